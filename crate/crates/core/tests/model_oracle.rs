mod common;

use common::{gradient_check, lively_model, oracle, tiny_config};
use graft_core::model::block_forward;
use graft_core::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(t: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new([t, d], (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn block_matches_f64_reference() {
    for post_ffn_norm in [false, true] {
        let mut cfg = tiny_config(10, 4, 2, 1);
        cfg.post_ffn_norm = post_ffn_norm;
        let model = lively_model(cfg.clone(), 11);
        let t = 6;
        let x = random_input(t, 4, 3);
        let positions: Vec<usize> = (0..t).collect();
        let got = block_forward(&cfg, &model.blocks[0], &x, &positions).unwrap();
        let p = oracle::params_f64(&model);
        let per_block = if post_ffn_norm { 10 } else { 9 };
        let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let want = oracle::block(&cfg, &p[1..1 + per_block], &xs, t);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((*g as f64 - w).abs() <= 1e-5, "{g} vs {w}");
        }
    }
}

#[test]
fn loss_matches_f64_reference() {
    let cfg = tiny_config(12, 8, 2, 2);
    let model = lively_model(cfg.clone(), 5);
    let tokens = [1, 4, 7, 2, 9, 11, 0, 3, 3, 5];
    let targets = [4, 7, 2, 9, 11, 0, 3, 3, 5, 8];
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let logits = model.forward_on_tape(&mut tape, &vars, &tokens, 5).unwrap();
    let loss = tape.cross_entropy(logits, &targets).unwrap();
    let got = tape.value(loss)[0] as f64;
    let want = oracle::loss(&cfg, &oracle::params_f64(&model), &tokens, &targets, 5);
    assert!((got - want).abs() <= 1e-5 * want.abs(), "{got} vs {want}");
}

#[test]
fn gradients_match_central_differences() {
    for post_ffn_norm in [false, true] {
        let mut cfg = tiny_config(12, 8, 2, 2);
        cfg.post_ffn_norm = post_ffn_norm;
        let model = lively_model(cfg, 21);
        let tokens = [1, 4, 7, 2, 9, 11, 0, 3, 3, 5];
        let targets = [4, 7, 2, 9, 11, 0, 3, 3, 5, 8];
        for (name, rel) in gradient_check(&model, &tokens, &targets, 5, 1e-4) {
            assert!(rel <= 1e-4, "{name}: relative error {rel:e}");
        }
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let model = lively_model(tiny_config(12, 8, 2, 2), 2);
    let run = || {
        let mut m = model.clone();
        for (_, t) in m.params_mut() {
            t.set_requires_grad(true);
        }
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let logits = m.forward_on_tape(&mut tape, &vars, &[1, 2, 3, 4, 5, 6], 3).unwrap();
        let loss = tape.cross_entropy(logits, &[2, 3, 4, 5, 6, 7]).unwrap();
        let grads = tape.backward(loss).unwrap();
        vars.all()
            .into_iter()
            .map(|v| grads.get(v).unwrap().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
