use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Document;
use crate::error::{GraftError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    /// Share of emitted documents drawn from the anchor stream.
    pub anchor_fraction: f64,
    pub anchor_stream: String,
    pub new_stream: String,
    pub seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            anchor_fraction: 0.2,
            anchor_stream: "anchor".into(),
            new_stream: "new".into(),
            seed: 0,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.anchor_fraction) {
            return Err(GraftError::Config(format!(
                "anchor fraction {} is outside [0, 1]",
                self.anchor_fraction
            )));
        }
        Ok(())
    }
}

/// Endless reshuffled walk over a document list.
struct Cycle<'a> {
    docs: &'a [Document],
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<'a> Cycle<'a> {
    fn new(docs: &'a [Document], rng: ChaCha8Rng) -> Self {
        Cycle {
            docs,
            order: (0..docs.len()).collect(),
            pos: docs.len(),
            rng,
        }
    }

    fn next(&mut self) -> &'a Document {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        &self.docs[self.order[self.pos - 1]]
    }
}

/// Which stream each of the first `n` positions draws from, as a
/// low-discrepancy sequence: position `i` is an anchor exactly when
/// `floor((i+1)·φ + u)` exceeds `floor(i·φ + u)`, with phase `u` from the seed.
/// Any window of `w` consecutive positions holds `floor(w·φ)` or
/// `ceil(w·φ)` anchors.
pub fn anchor_schedule(phi: f64, seed: u64, n: usize) -> Vec<bool> {
    let u: f64 = ChaCha8Rng::seed_from_u64(seed).gen();
    (0..n)
        .map(|i| ((i + 1) as f64 * phi + u).floor() > (i as f64 * phi + u).floor())
        .collect()
}

/// Interleaves `n` documents from the two streams. Each stream is shuffled
/// once per pass and cycles when exhausted.
pub fn mix_stream(cfg: &MixConfig, anchor: &[Document], new: &[Document], n: usize) -> Result<Vec<Document>> {
    cfg.validate()?;
    let schedule = anchor_schedule(cfg.anchor_fraction, cfg.seed, n);
    let need_anchor = schedule.iter().any(|&a| a);
    let need_new = schedule.iter().any(|&a| !a);
    for (needed, docs, id) in [(need_anchor, anchor, &cfg.anchor_stream), (need_new, new, &cfg.new_stream)] {
        if needed && docs.is_empty() {
            return Err(GraftError::Input(format!("stream {id} has no documents")));
        }
    }
    let stream_rng = |k: u64| ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k));
    let mut anchors = Cycle::new(anchor, stream_rng(1));
    let mut news = Cycle::new(new, stream_rng(2));
    Ok(schedule
        .into_iter()
        .map(|a| if a { anchors.next() } else { news.next() }.clone())
        .collect())
}
