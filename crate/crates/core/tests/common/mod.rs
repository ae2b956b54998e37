//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod oracle;

use graft_core::model::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(vocab: usize, d_model: usize, n_heads: usize, n_layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model,
        n_heads,
        d_ff: 2 * d_model,
        n_layers,
        max_seq_len: 16,
        rms_eps: 1e-5,
        rope_base: 10_000.0,
        post_ffn_norm: false,
    }
}

/// A random model whose weights are large enough for every parameter to
/// receive a clearly non-zero gradient.
pub fn lively_model(cfg: ModelConfig, seed: u64) -> Model {
    let mut model = Model::new_random(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in model.params_mut() {
        let range = if name.ends_with("norm") {
            0.8..1.2
        } else if name == "token_embedding" {
            -1.5..1.5
        } else {
            -0.3..0.3
        };
        for v in t.data_mut() {
            *v = rng.gen_range(range.clone());
        }
    }
    model
}

/// Per parameter group: `max |analytic − numeric| / (max |numeric| + 1e-8)`,
/// with numeric gradients from f64 central differences of step `h`.
pub fn gradient_check(model: &Model, tokens: &[usize], targets: &[usize], seq_len: usize, h: f64) -> Vec<(String, f64)> {
    use graft_core::tensor::Tape;
    let mut model = model.clone();
    for (_, t) in model.params_mut() {
        t.set_requires_grad(true);
    }
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let logits = model.forward_on_tape(&mut tape, &vars, tokens, seq_len).unwrap();
    let loss = tape.cross_entropy(logits, targets).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut p = oracle::params_f64(&model);
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::new();
    for (gi, var) in vars.all().into_iter().enumerate() {
        let analytic = grads.get(var).expect("every parameter has a gradient");
        let (mut err, mut scale) = (0.0f64, 0.0f64);
        for j in 0..p[gi].len() {
            let orig = p[gi][j];
            p[gi][j] = orig + h;
            let up = oracle::loss(&model.config, &p, tokens, targets, seq_len);
            p[gi][j] = orig - h;
            let down = oracle::loss(&model.config, &p, tokens, targets, seq_len);
            p[gi][j] = orig;
            let numeric = (up - down) / (2.0 * h);
            err = err.max((analytic[j] as f64 - numeric).abs());
            scale = scale.max(numeric.abs());
        }
        out.push((names[gi].clone(), err / (scale + 1e-8)));
    }
    out
}
