use serde::{Deserialize, Serialize};

use super::plan::Violation;
use crate::error::{GraftError, Result};
use crate::model::Model;

/// Which vocabulary rows of the embedding (or columns of the LM head) train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabTrainability {
    Frozen,
    All,
    /// Only token ids `>= n`, i.e. rows appended by vocabulary expansion.
    FromToken(usize),
}

impl VocabTrainability {
    pub fn is_trainable(&self, id: usize) -> bool {
        match *self {
            VocabTrainability::Frozen => false,
            VocabTrainability::All => true,
            VocabTrainability::FromToken(n) => id >= n,
        }
    }

    pub fn any(&self, vocab: usize) -> bool {
        self.trainable_rows(vocab) > 0
    }

    pub fn trainable_rows(&self, vocab: usize) -> usize {
        match *self {
            VocabTrainability::Frozen => 0,
            VocabTrainability::All => vocab,
            VocabTrainability::FromToken(n) => vocab.saturating_sub(n),
        }
    }

    /// Token ids that stay frozen: `0..n`.
    pub fn frozen_prefix(&self, vocab: usize) -> usize {
        vocab - self.trainable_rows(vocab)
    }
}

/// Per-block trainable flags for an (extended) model plus flags for the
/// embedding, LM head and final norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainabilityMask {
    pub blocks: Vec<bool>,
    pub embedding: VocabTrainability,
    pub lm_head: VocabTrainability,
    pub final_norm: bool,
    /// Accept a frozen final block.
    #[serde(default)]
    pub allow_frozen_last: bool,
}

impl TrainabilityMask {
    pub fn all_trainable(n_blocks: usize) -> Self {
        TrainabilityMask {
            blocks: vec![true; n_blocks],
            embedding: VocabTrainability::All,
            lm_head: VocabTrainability::All,
            final_norm: true,
            allow_frozen_last: false,
        }
    }

    pub fn all_frozen(n_blocks: usize) -> Self {
        TrainabilityMask {
            blocks: vec![false; n_blocks],
            embedding: VocabTrainability::Frozen,
            lm_head: VocabTrainability::Frozen,
            final_norm: false,
            allow_frozen_last: true,
        }
    }

    /// Only the final block trains.
    pub fn last_block_only(n_blocks: usize) -> Self {
        let mut m = TrainabilityMask::all_frozen(n_blocks);
        if let Some(last) = m.blocks.last_mut() {
            *last = true;
        }
        m.allow_frozen_last = false;
        m
    }

    /// Makes embedding rows and LM-head columns for ids `>= base_vocab` trainable.
    pub fn with_new_vocab(mut self, base_vocab: usize) -> Self {
        self.embedding = VocabTrainability::FromToken(base_vocab);
        self.lm_head = VocabTrainability::FromToken(base_vocab);
        self
    }

    pub fn validate(&self) -> Vec<Violation> {
        match self.blocks.last() {
            Some(false) => vec![Violation::FrozenFinalBlock {
                allowed: self.allow_frozen_last,
            }],
            _ => vec![],
        }
    }

    pub fn check_topology(&self, model: &Model) -> Result<()> {
        if self.blocks.len() != model.blocks.len() {
            return Err(GraftError::Contract(format!(
                "mask covers {} blocks, model has {}",
                self.blocks.len(),
                model.blocks.len()
            )));
        }
        let vocab = model.config.vocab_size;
        for (what, v) in [("embedding", self.embedding), ("lm_head", self.lm_head)] {
            if let VocabTrainability::FromToken(n) = v {
                if n > vocab {
                    return Err(GraftError::Contract(format!(
                        "{what} trainable from token {n} but vocabulary has {vocab}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_trainable_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| **b).count()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| GraftError::Config(format!("mask: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("mask serializes")
    }
}

/// Sets `requires_grad` on every parameter according to `mask`.
///
/// Partially trainable vocabulary tensors require grad as a whole; the
/// trainer zeroes and skips their frozen rows.
pub fn apply_mask(model: &mut Model, mask: &TrainabilityMask) -> Result<()> {
    mask.check_topology(model)?;
    if let Some(v) = mask.validate().into_iter().find(Violation::is_error) {
        return Err(GraftError::Contract(v.to_string()));
    }
    let vocab = model.config.vocab_size;
    model
        .token_embedding
        .set_requires_grad(mask.embedding.any(vocab));
    for (block, &on) in model.blocks.iter_mut().zip(&mask.blocks) {
        for (_, t) in block.tensors_mut() {
            t.set_requires_grad(on);
        }
    }
    model.final_norm.set_requires_grad(mask.final_norm);
    model.lm_head.set_requires_grad(mask.lm_head.any(vocab));
    Ok(())
}
