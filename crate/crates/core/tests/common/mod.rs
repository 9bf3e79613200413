#![allow(dead_code)]

pub mod gradients;
pub mod oracles;
pub mod properties;

use emoagg::config::{SystemConfig, Variant};
use emoagg::corpus::{generate_corpus, Utterance};
use emoagg::exec::Exec;

/// A model small enough for finite differences and short training runs.
pub fn tiny(variant: Variant, seed: u64) -> SystemConfig {
    let mut c = SystemConfig::for_variant(variant);
    c.seed = seed;
    c.corpus.n_per_emotion = 10;
    c.corpus.bands = 6;
    c.corpus.min_phonemes = 3;
    c.corpus.max_phonemes = 4;
    c.eval.cepstral_coeffs = 4;
    let m = &mut c.model;
    m.d_model = 8;
    m.enc_heads = 2;
    m.enc_blocks = 2;
    m.prenet_layers = 1;
    m.prenet_kernel = 3;
    m.ffn_mult = 2;
    m.latent_dim = 3;
    m.ref_channels = vec![2, 2];
    m.ref_gru = 4;
    m.cls_hidden = 4;
    m.query_hidden = 4;
    m.dec_prenet = 4;
    m.dec_gru = 6;
    m.gmm_hidden = 4;
    c
}

pub fn corpus(cfg: &SystemConfig) -> Vec<Utterance> {
    generate_corpus(&cfg.profiles(), &cfg.corpus, cfg.seed, Exec::Sequential).unwrap()
}
