//! Depth extension with identity-initialized blocks, trainability masks, and
//! checkpoint diffs used to prove frozen weights stayed put.

mod mask;
mod plan;

pub use mask::{apply_mask, TrainabilityMask, VocabTrainability};
pub use plan::{
    validate_plan, ExtensionPlan, PlanOverrides, PlanReport, Severity, Violation,
    EXPLORED_INSERTIONS,
};

use serde::Serialize;

use crate::error::{GraftError, Result};
use crate::model::{DecoderBlock, Model};

/// A copy of `block` with `W_O` and `W_3` zeroed, so it computes the identity.
pub fn identity_copy(block: &DecoderBlock) -> DecoderBlock {
    let mut b = block.clone();
    for (_, t) in b.tensors_mut() {
        t.set_requires_grad(false);
    }
    b.w_o.data_mut().fill(0.0);
    b.w_3.data_mut().fill(0.0);
    b
}

/// Inserts identity blocks per `plan` and returns the default mask: inserted
/// blocks and the final block trainable, everything else frozen.
pub fn extend_model(base: &Model, plan: &ExtensionPlan) -> Result<(Model, TrainabilityMask)> {
    let mut report = validate_plan(plan);
    if base.blocks.len() != plan.n_base_layers {
        report.violations.push(Violation::BaseSizeMismatch {
            plan: plan.n_base_layers,
            model: base.blocks.len(),
        });
    }
    if !report.is_ok() {
        return Err(GraftError::Plan(report.errors().map(|v| v.to_string()).collect()));
    }
    let insertions = plan.sorted_insertions();
    let mut blocks = Vec::with_capacity(plan.n_extended_layers());
    let mut trainable = Vec::with_capacity(plan.n_extended_layers());
    for (i, b) in base.blocks.iter().enumerate() {
        let mut copy = b.clone();
        for (_, t) in copy.tensors_mut() {
            t.set_requires_grad(false);
        }
        blocks.push(copy);
        trainable.push(false);
        for _ in insertions.iter().filter(|&&k| k == i) {
            blocks.push(identity_copy(b));
            trainable.push(true);
        }
    }
    if !plan.overrides.freeze_last_block {
        *trainable.last_mut().expect("model has blocks") = true;
    }
    let mut model = base.clone();
    model.config.n_layers = blocks.len();
    model.blocks = blocks;
    for t in [
        &mut model.token_embedding,
        &mut model.final_norm,
        &mut model.lm_head,
    ] {
        t.set_requires_grad(false);
    }
    let mask = TrainabilityMask {
        blocks: trainable,
        embedding: VocabTrainability::Frozen,
        lm_head: VocabTrainability::Frozen,
        final_norm: plan.overrides.train_final_norm,
        allow_frozen_last: plan.overrides.allow_frozen_last,
    };
    Ok((model, mask))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorDelta {
    pub name: String,
    pub max_abs_delta: f32,
}

/// Per-tensor maximum absolute differences between two checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DiffReport {
    pub entries: Vec<TensorDelta>,
}

impl DiffReport {
    pub fn get(&self, name: &str) -> Option<f32> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.max_abs_delta)
    }

    pub fn nonzero(&self) -> impl Iterator<Item = &TensorDelta> {
        self.entries.iter().filter(|e| e.max_abs_delta != 0.0)
    }

    pub fn max(&self) -> f32 {
        self.entries.iter().map(|e| e.max_abs_delta).fold(0.0, f32::max)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("tensor\tmax_abs_delta\n");
        for e in &self.entries {
            out.push_str(&format!("{}\t{:e}\n", e.name, e.max_abs_delta));
        }
        out
    }
}

fn check_same_topology(a: &Model, b: &Model) -> Result<()> {
    let (pa, pb) = (a.params(), b.params());
    if pa.len() != pb.len()
        || pa
            .iter()
            .zip(&pb)
            .any(|((na, ta), (nb, tb))| na != nb || ta.shape() != tb.shape())
    {
        return Err(GraftError::Contract(
            "checkpoints have different topologies".into(),
        ));
    }
    Ok(())
}

fn max_abs(a: impl Iterator<Item = f32>, b: impl Iterator<Item = f32>) -> f32 {
    a.zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

pub fn diff_checkpoints(a: &Model, b: &Model) -> Result<DiffReport> {
    check_same_topology(a, b)?;
    let entries = a
        .params()
        .into_iter()
        .zip(b.params())
        .map(|((name, ta), (_, tb))| TensorDelta {
            name,
            max_abs_delta: max_abs(ta.data().iter().copied(), tb.data().iter().copied()),
        })
        .collect();
    Ok(DiffReport { entries })
}

/// Deltas restricted to what `mask` freezes: whole frozen tensors, plus the
/// frozen row range of partially trainable vocabulary tensors.
pub fn diff_frozen(a: &Model, b: &Model, mask: &TrainabilityMask) -> Result<DiffReport> {
    check_same_topology(a, b)?;
    mask.check_topology(a)?;
    let vocab = a.config.vocab_size;
    let d = a.config.d_model;
    let mut entries = Vec::new();

    let emb_frozen = mask.embedding.frozen_prefix(vocab);
    if emb_frozen > 0 {
        let n = emb_frozen * d;
        entries.push(TensorDelta {
            name: format!("token_embedding[rows 0..{emb_frozen}]"),
            max_abs_delta: max_abs(
                a.token_embedding.data()[..n].iter().copied(),
                b.token_embedding.data()[..n].iter().copied(),
            ),
        });
    }
    for (i, ((ba, bb), &on)) in a.blocks.iter().zip(&b.blocks).zip(&mask.blocks).enumerate() {
        if on {
            continue;
        }
        for ((name, ta), (_, tb)) in ba.tensors().into_iter().zip(bb.tensors()) {
            entries.push(TensorDelta {
                name: format!("blocks.{i}.{name}"),
                max_abs_delta: max_abs(ta.data().iter().copied(), tb.data().iter().copied()),
            });
        }
    }
    if !mask.final_norm {
        entries.push(TensorDelta {
            name: "final_norm".into(),
            max_abs_delta: max_abs(
                a.final_norm.data().iter().copied(),
                b.final_norm.data().iter().copied(),
            ),
        });
    }
    let head_frozen = mask.lm_head.frozen_prefix(vocab);
    if head_frozen > 0 {
        let cols = |m: &Model| -> Vec<f32> {
            m.lm_head
                .data()
                .chunks(vocab)
                .flat_map(|row| row[..head_frozen].to_vec())
                .collect()
        };
        entries.push(TensorDelta {
            name: format!("lm_head[cols 0..{head_frozen}]"),
            max_abs_delta: max_abs(cols(a).into_iter(), cols(b).into_iter()),
        });
    }
    Ok(DiffReport { entries })
}
