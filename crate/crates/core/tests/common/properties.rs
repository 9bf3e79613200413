//! Model-level properties shared by the property tests and the acceptance run.

use emoagg::checkpoint::Checkpoint;
use emoagg::config::{SystemConfig, Variant};
use emoagg::corpus::split_corpus;
use emoagg::eval::{evaluate, EvalMode, EvalOptions};
use emoagg::exec::Exec;
use emoagg::model::Model;
use emoagg::train::Trainer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus;

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Fresh model with every parameter moved off its initializer.
pub fn perturbed(cfg: &SystemConfig) -> Model {
    let mut m = Model::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    for t in m.params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    m
}

/// Largest output difference between SA-WAC with its gate closed and SA-WA
/// built from the same parameters.
pub fn closed_gate_max_diff(cfg: &SystemConfig) -> f64 {
    let mut cfg = cfg.clone();
    cfg.variant = Variant::SaWac;
    let mut wac = perturbed(&cfg);
    wac.set_gate_logit(-1e4).unwrap();
    assert_eq!(wac.gate_value(), Some(0.0));
    cfg.variant = Variant::SaWa;
    let mut wa = Model::new(&cfg).unwrap();
    let names = wa.params.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        wa.params.tensors_mut()[i] = wac.params.by_name(name).unwrap().clone();
    }
    let mut worst = 0.0f64;
    for u in corpus(&cfg).iter().step_by(9) {
        let z = wac.embed(&u.mel).unwrap();
        assert_eq!(z, wa.embed(&u.mel).unwrap());
        let a = wac.predict_teacher_forced(u, &z).unwrap();
        let b = wa.predict_teacher_forced(u, &z).unwrap();
        worst = worst.max(max_abs_diff(a.mel.data(), b.mel.data()));
        worst = worst.max(max_abs_diff(&a.stop_logits, &b.stop_logits));
        for (x, y) in a.attention.iter().zip(&b.attention) {
            worst = worst.max(max_abs_diff(x, y));
        }
    }
    worst
}

pub fn trained(cfg: &SystemConfig, steps: u64, exec: Exec) -> Trainer {
    let (train, _) = split_corpus(&corpus(cfg), cfg.corpus.split_ratio, cfg.seed).unwrap();
    let mut tr = Trainer::new(Model::new(cfg).unwrap(), exec);
    tr.run(&train, steps, |_, _| Ok(())).unwrap();
    tr
}

/// Trains `cfg` twice and compares checkpoints and evaluation reports byte for byte.
pub fn repeat_runs_identical(cfg: &SystemConfig, steps: u64) -> Result<(), String> {
    let a = trained(cfg, steps, Exec::Sequential);
    let b = trained(cfg, steps, Exec::from_env());
    if Checkpoint::from_trainer(&a).encode() != Checkpoint::from_trainer(&b).encode() {
        return Err(format!("{} seed {}: checkpoints differ", cfg.variant, cfg.seed));
    }
    let (train, test) = split_corpus(&corpus(cfg), cfg.corpus.split_ratio, cfg.seed).unwrap();
    for mode in [EvalMode::Parallel, EvalMode::Nonparallel] {
        let opts = EvalOptions {
            mode,
            self_check: false,
            exec: Exec::Sequential,
        };
        let ra = evaluate(&a.model, &train, &test, &opts).unwrap();
        let rb = evaluate(&b.model, &train, &test, &EvalOptions { exec: Exec::from_env(), ..opts }).unwrap();
        if ra.to_json() != rb.to_json() || ra.to_csv() != rb.to_csv() {
            return Err(format!("{} seed {}: {mode} reports differ", cfg.variant, cfg.seed));
        }
    }
    Ok(())
}

/// Saves and reloads a briefly trained model; forward outputs must match exactly.
pub fn round_trip_preserves_outputs(cfg: &SystemConfig) -> Result<(), String> {
    let tr = trained(cfg, 3, Exec::Sequential);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.emockpt");
    Checkpoint::from_trainer(&tr).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().to_model().unwrap();
    for u in corpus(cfg).iter().step_by(11) {
        let z = tr.model.embed(&u.mel).unwrap();
        if z != back.embed(&u.mel).unwrap()
            || tr.model.predict_teacher_forced(u, &z).unwrap() != back.predict_teacher_forced(u, &z).unwrap()
            || tr.model.synthesize(&u.text, &z, 20).unwrap() != back.synthesize(&u.text, &z, 20).unwrap()
        {
            return Err(format!("{} seed {}: outputs changed after reload of {}", cfg.variant, cfg.seed, u.id));
        }
    }
    Ok(())
}
