mod common;

use common::properties::{closed_gate_max_diff, max_abs_diff, perturbed, round_trip_preserves_outputs};
use common::{corpus, tiny};
use emoagg::autodiff::{Mode, Tensor};
use emoagg::config::Variant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn closed_gate_reduces_combined_to_textual() {
    for seed in 0..3 {
        let d = closed_gate_max_diff(&tiny(Variant::SaWac, seed));
        assert!(d < 1e-6, "seed {seed}: {d:e}");
    }
}

#[test]
fn open_gate_changes_outputs() {
    let cfg = tiny(Variant::SaWac, 1);
    let open = perturbed(&cfg);
    let mut closed = perturbed(&cfg);
    closed.set_gate_logit(-1e4).unwrap();
    let u = &corpus(&cfg)[0];
    let z = open.embed(&u.mel).unwrap();
    let a = open.predict_teacher_forced(u, &z).unwrap();
    let b = closed.predict_teacher_forced(u, &z).unwrap();
    assert!(max_abs_diff(a.mel.data(), b.mel.data()) > 1e-6);
}

#[test]
fn self_attention_block_is_permutation_equivariant() {
    let model = perturbed(&tiny(Variant::SaWa, 4));
    let d = model.config.model.d_model;
    let n = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let perm = [3, 0, 5, 1, 4, 2];
    let mut hp = Vec::with_capacity(n * d);
    for &p in &perm {
        hp.extend_from_slice(h.row_slice(p));
    }
    let hp = Tensor::matrix(n, d, hp).unwrap();
    let run = |x: Tensor| {
        let mut t = model.tape(Mode::Eval);
        let v = t.constant(x);
        let (out, _) = model.encoder().self_attention_block(&mut t, 0, v).unwrap();
        t.g.value(out).clone()
    };
    let (y, yp) = (run(h), run(hp));
    for (i, &p) in perm.iter().enumerate() {
        assert!(max_abs_diff(yp.row_slice(i), y.row_slice(p)) < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_preserves_forward_outputs() {
    for variant in Variant::ALL {
        round_trip_preserves_outputs(&tiny(variant, 7)).unwrap();
    }
}
