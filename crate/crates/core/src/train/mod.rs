//! Selective training, perplexity evaluation and the synthetic bilingual
//! experiments built on them.

mod experiment;
mod synthetic;

pub use experiment::{
    encode_documents, run_placement_study, run_retention_experiment, ArmReport, ExperimentConfig, PlacementArm,
    PlacementReport, PlacementResult, RetentionReport, Workbench,
};
pub use synthetic::{LanguageSpec, SyntheticBilingualSpec, SyntheticCorpora};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GraftError, Result};
use crate::model::{Model, TokenId};
use crate::surgery::{apply_mask, TrainabilityMask, VocabTrainability};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences per batch.
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Cosine decay ends at `lr * min_lr_ratio`.
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            seq_len: 64,
            lr: 3e-4,
            warmup_steps: 100,
            min_lr_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            log_interval: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GraftError::Config(format!("train config: {m}")));
        if self.batch_size == 0 || self.seq_len == 0 || self.log_interval == 0 {
            return bad("batch_size, seq_len and log_interval must be positive");
        }
        if self.warmup_steps > self.steps {
            return bad("warmup_steps exceeds steps");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("eps must be positive; weight_decay and grad_clip nonnegative");
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("min_lr_ratio must lie in [0, 1]");
        }
        Ok(())
    }

    /// Linear warmup to `lr`, then cosine decay to `lr * min_lr_ratio`.
    pub fn lr_at(&self, step: usize) -> f32 {
        if step < self.warmup_steps {
            return (self.lr * (step + 1) as f64 / self.warmup_steps as f64) as f32;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        (floor + (self.lr - floor) * cos) as f32
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| GraftError::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    /// Number of optimizer steps completed.
    pub step: usize,
    /// Mean training loss over the preceding interval.
    pub loss: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    pub fn final_loss(&self) -> Option<f32> {
        self.points.last().map(|p| p.loss)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tloss\n");
        for p in &self.points {
            out.push_str(&format!("{}\t{:.6}\n", p.step, p.loss));
        }
        out
    }
}

/// Elements of a parameter the mask keeps frozen even though the tensor
/// as a whole trains.
#[derive(Clone, Copy)]
enum FrozenPart {
    None,
    /// First `n` rows of a `[vocab × d]` table.
    Rows { n: usize, width: usize },
    /// First `n` columns of a `[d × vocab]` matrix.
    Cols { n: usize, width: usize },
}

impl FrozenPart {
    fn of(v: VocabTrainability, vocab: usize, d: usize, rows: bool) -> Self {
        match v.frozen_prefix(vocab) {
            0 => FrozenPart::None,
            n if rows => FrozenPart::Rows { n, width: d },
            n => FrozenPart::Cols { n, width: vocab },
        }
    }

    fn contains(&self, i: usize) -> bool {
        match *self {
            FrozenPart::None => false,
            FrozenPart::Rows { n, width } => i / width < n,
            FrozenPart::Cols { n, width } => i % width < n,
        }
    }
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Trains `model` in place on random windows of `data`; only what `mask`
/// marks trainable changes. `observe` runs after every logged interval.
pub fn train_observed(
    model: &mut Model,
    mask: &TrainabilityMask,
    data: &[TokenId],
    cfg: &TrainConfig,
    mut observe: impl FnMut(usize, &Model),
) -> Result<LossCurve> {
    cfg.validate()?;
    apply_mask(model, mask)?;
    let vocab = model.config.vocab_size;
    if cfg.seq_len > model.config.max_seq_len {
        return Err(GraftError::Contract(format!(
            "seq_len {} exceeds the model's max_seq_len {}",
            cfg.seq_len, model.config.max_seq_len
        )));
    }
    if data.len() < cfg.seq_len + 1 {
        return Err(GraftError::Input(format!(
            "training stream has {} tokens; at least seq_len + 1 = {} are needed",
            data.len(),
            cfg.seq_len + 1
        )));
    }
    if let Some(bad) = data.iter().find(|&&t| t as usize >= vocab) {
        return Err(GraftError::Index(format!(
            "training token {bad} out of range for vocabulary of {vocab}"
        )));
    }
    let d = model.config.d_model;
    let n_params = model.params().len();
    let frozen: Vec<FrozenPart> = (0..n_params)
        .map(|i| match i {
            0 => FrozenPart::of(mask.embedding, vocab, d, true),
            i if i == n_params - 1 => FrozenPart::of(mask.lm_head, vocab, d, false),
            _ => FrozenPart::None,
        })
        .collect();
    let mut moments: Vec<Option<Moments>> = model
        .params()
        .iter()
        .map(|(_, t)| {
            t.requires_grad().then(|| Moments {
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
            })
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (t, b) = (cfg.seq_len, cfg.batch_size);
    let mut inputs = vec![0usize; b * t];
    let mut targets = vec![0usize; b * t];
    let mut curve = LossCurve::default();
    let mut interval_sum = 0f64;

    for step in 0..cfg.steps {
        for row in 0..b {
            let start = rng.gen_range(0..=data.len() - t - 1);
            for j in 0..t {
                inputs[row * t + j] = data[start + j] as usize;
                targets[row * t + j] = data[start + j + 1] as usize;
            }
        }
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let logits = model.forward_on_tape(&mut tape, &vars, &inputs, t)?;
        let loss_var = tape.cross_entropy(logits, &targets)?;
        let loss = tape.value(loss_var)[0];
        if !loss.is_finite() {
            return Err(GraftError::NonFiniteLoss {
                step,
                batch: step,
                loss,
            });
        }
        interval_sum += loss as f64;
        let grads = tape.backward(loss_var)?;

        let var_list = vars.all();
        let mut masked: Vec<Option<Vec<f32>>> = var_list
            .iter()
            .zip(&frozen)
            .map(|(&v, part)| {
                grads.get(v).map(|g| {
                    let mut g = g.to_vec();
                    if !matches!(part, FrozenPart::None) {
                        for (i, x) in g.iter_mut().enumerate() {
                            if part.contains(i) {
                                *x = 0.0;
                            }
                        }
                    }
                    g
                })
            })
            .collect();
        if cfg.grad_clip > 0.0 {
            let norm = masked
                .iter()
                .flatten()
                .flat_map(|g| g.iter())
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt();
            if norm > cfg.grad_clip {
                let s = (cfg.grad_clip / norm) as f32;
                for g in masked.iter_mut().flatten() {
                    g.iter_mut().for_each(|x| *x *= s);
                }
            }
        }

        let lr = cfg.lr_at(step);
        let k = (step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(k);
        let bc2 = 1.0 - cfg.beta2.powi(k);
        let (beta1, beta2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        for (((_, param), state), (g, part)) in model
            .params_mut()
            .into_iter()
            .zip(&mut moments)
            .zip(masked.iter().zip(&frozen))
        {
            let (Some(state), Some(g)) = (state.as_mut(), g.as_ref()) else {
                continue;
            };
            let decay = if param.shape().len() == 2 { cfg.weight_decay } else { 0.0 };
            let p = param.data_mut();
            for i in 0..p.len() {
                if part.contains(i) {
                    continue;
                }
                let gi = g[i];
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * gi;
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * gi * gi;
                let mhat = state.m[i] as f64 / bc1;
                let vhat = state.v[i] as f64 / bc2;
                let update = mhat / (vhat.sqrt() + cfg.eps) + decay * p[i] as f64;
                p[i] -= (lr as f64 * update) as f32;
            }
        }

        if (step + 1) % cfg.log_interval == 0 {
            curve.points.push(LossPoint {
                step: step + 1,
                loss: (interval_sum / cfg.log_interval as f64) as f32,
            });
            interval_sum = 0.0;
            observe(step + 1, model);
        }
    }
    Ok(curve)
}

pub fn train(
    model: &mut Model,
    mask: &TrainabilityMask,
    data: &[TokenId],
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    train_observed(model, mask, data, cfg, |_, _| {})
}

/// Summed next-token negative log-likelihood and the number of predictions.
fn nll_sum(model: &Model, tokens: &[TokenId], window: usize) -> Result<(f64, usize)> {
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let vocab = model.config.vocab_size;
    let mut total = 0f64;
    let mut count = 0usize;
    // Full windows are batched; the remainder runs on its own.
    let n_full = (ids.len() - 1) / window;
    let per_batch = 16;
    let mut run = |starts: &[usize], len: usize| -> Result<()> {
        let mut inputs = Vec::with_capacity(starts.len() * len);
        let mut targets = Vec::with_capacity(starts.len() * len);
        for &s in starts {
            inputs.extend_from_slice(&ids[s..s + len]);
            targets.extend_from_slice(&ids[s + 1..s + len + 1]);
        }
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let logits = model.forward_on_tape(&mut tape, &vars, &inputs, len)?;
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(GraftError::Index(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        for (row, &target) in tape.value(logits).chunks(vocab).zip(&targets) {
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
            total += lse - row[target] as f64;
            count += 1;
        }
        Ok(())
    };
    let starts: Vec<usize> = (0..n_full).map(|w| w * window).collect();
    for chunk in starts.chunks(per_batch) {
        run(chunk, window)?;
    }
    let rest = ids.len() - 1 - n_full * window;
    if rest > 0 {
        run(&[n_full * window], rest)?;
    }
    Ok((total, count))
}

/// Mean next-token negative log-likelihood over non-overlapping windows of
/// `window` predictions.
pub fn mean_nll(model: &Model, tokens: &[TokenId], window: usize) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(GraftError::Input(
            "perplexity needs at least two tokens".into(),
        ));
    }
    if window == 0 || window > model.config.max_seq_len {
        return Err(GraftError::Contract(format!(
            "evaluation window {window} must be in 1..={}",
            model.config.max_seq_len
        )));
    }
    let (total, count) = nll_sum(model, tokens, window)?;
    Ok(total / count as f64)
}

/// `exp` of [`mean_nll`].
pub fn perplexity(model: &Model, tokens: &[TokenId], window: usize) -> Result<f64> {
    Ok(mean_nll(model, tokens, window)?.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::surgery::diff_frozen;

    fn tiny(vocab_size: usize, seed: u64) -> Model {
        Model::new_random(
            ModelConfig {
                vocab_size,
                d_model: 16,
                n_heads: 2,
                d_ff: 32,
                n_layers: 2,
                max_seq_len: 16,
                rms_eps: 1e-5,
                rope_base: 10_000.0,
                post_ffn_norm: false,
            },
            seed,
        )
        .unwrap()
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            seq_len: 8,
            lr: 1e-2,
            warmup_steps: 0,
            log_interval: 5,
            ..TrainConfig::default()
        }
    }

    fn stream(n: usize, vocab: u32) -> Vec<TokenId> {
        (0..n as u32).map(|i| (i * 7 + i / 3) % vocab).collect()
    }

    #[test]
    fn zero_steps_changes_nothing() {
        let mut m = tiny(11, 1);
        let before = m.clone();
        let curve = train(&mut m, &TrainabilityMask::all_trainable(2), &stream(50, 11), &quick(0)).unwrap();
        assert!(curve.points.is_empty());
        for ((_, a), (_, b)) in before.params().iter().zip(m.params()) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            steps: 200,
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(0) - 3e-6).abs() < 1e-9);
        assert!((cfg.lr_at(99) - 3e-4).abs() < 1e-9);
        assert!((cfg.lr_at(100) - 3e-4).abs() < 1e-9);
        assert!(cfg.lr_at(150) < 3e-4 && cfg.lr_at(150) > 3e-5);
        assert!((cfg.lr_at(199) - 3e-5).abs() < 1e-6);
        assert!(TrainConfig { steps: 10, ..TrainConfig::default() }.validate().is_err());
        let text = cfg.to_toml();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn frozen_parts_stay_bitwise() {
        let mut m = tiny(12, 2);
        let before = m.clone();
        let mask = TrainabilityMask::last_block_only(2).with_new_vocab(8);
        let curve = train(&mut m, &mask, &stream(200, 12), &quick(20)).unwrap();
        assert_eq!(curve.points.len(), 4);
        let report = diff_frozen(&before, &m, &mask).unwrap();
        assert!(!report.entries.is_empty());
        assert_eq!(report.max(), 0.0, "{}", report.to_tsv());
        assert_ne!(before.blocks[1].w_q, m.blocks[1].w_q);
        assert_ne!(&before.token_embedding.data()[8 * 16..], &m.token_embedding.data()[8 * 16..]);
    }

    #[test]
    fn deterministic_curves() {
        let run = || {
            let mut m = tiny(11, 3);
            let c = train(&mut m, &TrainabilityMask::all_trainable(2), &stream(100, 11), &quick(10)).unwrap();
            (m, c)
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(ca, cb);
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_head_gives_vocab_perplexity() {
        let mut m = tiny(11, 4);
        m.lm_head.data_mut().fill(0.0);
        let ppl = perplexity(&m, &stream(40, 11), 8).unwrap();
        assert!((ppl - 11.0).abs() < 1e-9, "{ppl}");
        assert!(perplexity(&m, &[1], 8).is_err());
        assert!(perplexity(&m, &[1, 2], 0).is_err());
    }

    #[test]
    fn perplexity_matches_loss() {
        let m = tiny(11, 5);
        let tokens = stream(9, 11);
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let logits = m.forward_on_tape(&mut tape, &vars, &ids[..8], 8).unwrap();
        let loss = tape.cross_entropy(logits, &ids[1..]).unwrap();
        let loss = tape.value(loss)[0] as f64;
        let ppl = perplexity(&m, &tokens, 8).unwrap();
        assert!((ppl - loss.exp()).abs() / ppl < 1e-6);
    }

    #[test]
    fn bad_inputs() {
        let mut m = tiny(11, 6);
        let mask = TrainabilityMask::all_trainable(2);
        assert!(matches!(train(&mut m, &mask, &[1, 2, 3], &quick(1)), Err(GraftError::Input(_))));
        assert!(matches!(train(&mut m, &mask, &stream(50, 12), &quick(1)), Err(GraftError::Index(_))));
        m.blocks[0].w_q.data_mut()[0] = f32::NAN;
        assert!(matches!(
            train(&mut m, &mask, &stream(50, 11), &quick(1)),
            Err(GraftError::NonFiniteLoss { step: 0, .. })
        ));
    }
}
