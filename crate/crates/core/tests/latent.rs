mod common;

use common::oracles::{reparam_stats, sus_descent, sus_value};

#[test]
fn sus_descent_reaches_the_unit_sphere() {
    for (i, start) in [0.1, 0.3, 0.9, 1.5, 4.0, 10.0].into_iter().enumerate() {
        let n = sus_descent(start, i as u64);
        assert!((n - 1.0).abs() < 1e-3, "from {start}: |mu| = {n}");
    }
}

#[test]
fn sus_closed_forms() {
    assert!((sus_value(&[0.0; 8]) - 1.0).abs() < 1e-12);
    assert!((sus_value(&[3.0, 4.0]) - 16.0).abs() < 1e-12);
    assert!(sus_value(&[0.6, 0.8]).abs() < 1e-12);
}

#[test]
fn reparameterization_monte_carlo() {
    let mu = [0.6, -0.8, 0.0];
    let (mean, std) = reparam_stats(&mu, None, 1.0, 100_000);
    for d in 0..3 {
        assert!(mean[d].abs() < 0.02, "mean {mean:?}");
        assert!((std[d] - 1.0).abs() < 0.02, "std {std:?}");
    }
    let (mean, std) = reparam_stats(&mu, Some(4f64.ln()), 1.0, 100_000);
    for d in 0..3 {
        assert!(mean[d].abs() < 0.02, "mean {mean:?}");
        assert!((std[d] / 2.0 - 1.0).abs() < 0.02, "std {std:?}");
    }
}
