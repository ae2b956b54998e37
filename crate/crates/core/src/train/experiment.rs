use serde::{Deserialize, Serialize};

use super::synthetic::{SyntheticBilingualSpec, SyntheticCorpora};
use super::{perplexity, train, LossCurve, TrainConfig};
use crate::corpus::{mix_stream, Document, MixConfig};
use crate::error::{GraftError, Result};
use crate::model::{Model, ModelConfig, TokenId};
use crate::surgery::{extend_model, ExtensionPlan, PlanOverrides, TrainabilityMask};
use crate::tokenizer::{
    expand_embeddings, merge_vocab, train_vocab, EmbeddingInit, MergedTokenizer, SubwordVocab, Tokenizer,
};

/// Everything that defines a bilingual experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: SyntheticBilingualSpec,
    /// `vocab_size` is replaced by the trained base vocabulary's size.
    pub model: ModelConfig,
    pub base_vocab_size: usize,
    pub new_vocab_size: usize,
    pub init: EmbeddingInit,
    /// Training of the base model on the first language.
    pub pretrain: TrainConfig,
    /// Training of every adapted arm.
    pub adapt: TrainConfig,
    pub plan: ExtensionPlan,
    /// Anchor fraction of the main extended arm.
    pub phi: f64,
    /// Anchor fraction of the low-anchor arm.
    pub phi_low: f64,
    /// Documents drawn into each mixed training stream.
    pub mix_docs: usize,
    pub eval_window: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: SyntheticBilingualSpec::default(),
            model: ModelConfig {
                vocab_size: 0,
                d_model: 128,
                n_heads: 4,
                d_ff: 256,
                n_layers: 6,
                max_seq_len: 64,
                rms_eps: 1e-5,
                rope_base: 10_000.0,
                post_ffn_norm: false,
            },
            base_vocab_size: 320,
            new_vocab_size: 320,
            init: EmbeddingInit::Mean,
            pretrain: TrainConfig {
                steps: 800,
                batch_size: 8,
                seq_len: 64,
                lr: 3e-3,
                warmup_steps: 100,
                log_interval: 50,
                ..TrainConfig::default()
            },
            adapt: TrainConfig {
                steps: 400,
                batch_size: 8,
                seq_len: 64,
                lr: 1e-3,
                warmup_steps: 40,
                log_interval: 20,
                seed: 1,
                ..TrainConfig::default()
            },
            plan: ExtensionPlan::new(6, [1, 3, 5]),
            phi: 0.2,
            phi_low: 0.05,
            mix_docs: 2000,
            eval_window: 64,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| GraftError::Config(format!("experiment config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }
}

/// Concatenated token ids of `docs`, each followed by the encoding of `"\n"`.
pub fn encode_documents(tok: &impl Tokenizer, docs: &[Document]) -> Vec<TokenId> {
    let mut out = Vec::new();
    for d in docs {
        out.extend(tok.encode(&d.text));
        out.extend(tok.encode("\n"));
    }
    out
}

/// Shared state of an experiment: corpora, tokenizers, the pretrained base
/// and its vocabulary-expanded copy, which every arm starts from.
pub struct Workbench {
    pub config: ExperimentConfig,
    pub corpora: SyntheticCorpora,
    pub base_tokenizer: SubwordVocab,
    pub merged: MergedTokenizer,
    pub base_model: Model,
    pub pretrain_curve: LossCurve,
    /// The base model with its vocabulary expanded, untrained since.
    pub expanded: Model,
    pub l1_eval: Vec<TokenId>,
    pub l2_eval: Vec<TokenId>,
}

impl Workbench {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        let corpora = config.corpus.generate()?;
        let text = |docs: &[Document]| docs.iter().map(|d| d.text.clone()).collect::<Vec<_>>();
        let base_tokenizer = train_vocab(&text(&corpora.l1_train), config.base_vocab_size)?;
        let new_tokenizer = train_vocab(&text(&corpora.l2_train), config.new_vocab_size)?;
        let merged = merge_vocab(&base_tokenizer, &new_tokenizer);

        let mut model_cfg = config.model.clone();
        model_cfg.vocab_size = base_tokenizer.len();
        let mut base_model = Model::new_random(model_cfg, config.seed)?;
        let l1_train = encode_documents(&base_tokenizer, &corpora.l1_train);
        let all = TrainabilityMask::all_trainable(base_model.blocks.len());
        let pretrain_curve = train(
            &mut base_model,
            &all,
            &l1_train,
            &config.pretrain,
        )?;
        let mut expanded = expand_embeddings(&base_model, &merged, config.init)?;
        clear_grads(&mut base_model);
        clear_grads(&mut expanded);
        Ok(Workbench {
            l1_eval: encode_documents(&merged, &corpora.l1_eval),
            l2_eval: encode_documents(&merged, &corpora.l2_eval),
            config: config.clone(),
            corpora,
            base_tokenizer,
            merged,
            base_model,
            pretrain_curve,
            expanded,
        })
    }

    /// Training tokens with anchor fraction `phi` (0 gives new-language only).
    pub fn mixed_stream(&self, phi: f64) -> Result<Vec<TokenId>> {
        let mix = MixConfig {
            anchor_fraction: phi,
            anchor_stream: "l1_train".into(),
            new_stream: "l2_train".into(),
            seed: self.config.seed,
        };
        let docs = mix_stream(&mix, &self.corpora.l1_train, &self.corpora.l2_train, self.config.mix_docs)?;
        Ok(encode_documents(&self.merged, &docs))
    }

    pub fn evaluate(&self, model: &Model) -> Result<(f64, f64)> {
        let w = self.config.eval_window;
        Ok((perplexity(model, &self.l1_eval, w)?, perplexity(model, &self.l2_eval, w)?))
    }

    /// Extends the expanded base per `plan` and returns it with the default
    /// mask widened to the new vocabulary rows.
    pub fn extended(&self, plan: &ExtensionPlan) -> Result<(Model, TrainabilityMask)> {
        let (model, mask) = extend_model(&self.expanded, plan)?;
        Ok((model, mask.with_new_vocab(self.merged.base_size())))
    }
}

fn clear_grads(model: &mut Model) {
    for (_, t) in model.params_mut() {
        t.set_requires_grad(false);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub description: String,
    pub l1_ppl: f64,
    pub l2_ppl: f64,
    /// Relative change of first-language perplexity against the baseline arm.
    pub retention_delta: f64,
    /// Relative change of new-language perplexity against the baseline arm.
    pub acquisition_delta: f64,
    pub trainable_params: usize,
    pub curve: LossCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub arms: Vec<ArmReport>,
}

impl RetentionReport {
    pub fn arm(&self, id: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm == id)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "arm\tdescription\tl1_ppl\tl2_ppl\tretention_delta\tacquisition_delta\ttrainable_params\tfinal_loss\n",
        );
        for a in &self.arms {
            let final_loss = a
                .curve
                .final_loss()
                .map_or_else(|| "-".to_string(), |l| format!("{l:.6}"));
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:+.6}\t{:+.6}\t{}\t{}\n",
                a.arm,
                a.description,
                a.l1_ppl,
                a.l2_ppl,
                a.retention_delta,
                a.acquisition_delta,
                a.trainable_params,
                final_loss
            ));
        }
        out
    }

    /// Loss curves of the trained arms side by side.
    pub fn curves_tsv(&self) -> String {
        let trained: Vec<(&str, &LossCurve)> = self
            .arms
            .iter()
            .filter(|a| !a.curve.points.is_empty())
            .map(|a| (a.arm.as_str(), &a.curve))
            .collect();
        aligned_curves(&trained)
    }
}

fn aligned_curves(curves: &[(&str, &LossCurve)]) -> String {
    let mut out = String::from("step");
    for (name, _) in curves {
        out.push('\t');
        out.push_str(name);
    }
    out.push('\n');
    let n = curves.iter().map(|(_, c)| c.points.len()).max().unwrap_or(0);
    for i in 0..n {
        let step = curves.iter().find_map(|(_, c)| c.points.get(i)).map(|p| p.step);
        out.push_str(&step.map_or_else(String::new, |s| s.to_string()));
        for (_, c) in curves {
            out.push('\t');
            if let Some(p) = c.points.get(i) {
                out.push_str(&format!("{:.6}", p.loss));
            }
        }
        out.push('\n');
    }
    out
}

fn arm_report(
    wb: &Workbench,
    baseline: (f64, f64),
    arm: &str,
    description: String,
    model: &Model,
    mask: Option<&TrainabilityMask>,
    curve: LossCurve,
) -> Result<ArmReport> {
    let (l1, l2) = wb.evaluate(model)?;
    Ok(ArmReport {
        arm: arm.into(),
        description,
        l1_ppl: l1,
        l2_ppl: l2,
        retention_delta: (l1 - baseline.0) / baseline.0,
        acquisition_delta: (l2 - baseline.1) / baseline.1,
        trainable_params: mask.map_or(Ok(0), |m| model.count_params(Some(m)).map(|c| c.trainable))?,
        curve,
    })
}

/// Runs the four arms from the expanded base:
/// A the base itself, B full-parameter training on the new language only,
/// C extension with the default mask at anchor fraction `phi`, and D the
/// same at `phi_low`. Deltas are relative to arm A.
pub fn run_retention_experiment(wb: &Workbench) -> Result<RetentionReport> {
    let cfg = &wb.config;
    let baseline = wb.evaluate(&wb.expanded)?;
    let mut arms = vec![arm_report(
        wb,
        baseline,
        "A",
        "expanded base, no further training".into(),
        &wb.expanded,
        None,
        LossCurve::default(),
    )?];

    let mut naive = wb.expanded.clone();
    let all = TrainabilityMask::all_trainable(naive.blocks.len());
    let curve = train(&mut naive, &all, &wb.mixed_stream(0.0)?, &cfg.adapt)?;
    arms.push(arm_report(
        wb,
        baseline,
        "B",
        "all parameters, new language only".into(),
        &naive,
        Some(&all),
        curve,
    )?);

    for (arm, phi) in [("C", cfg.phi), ("D", cfg.phi_low)] {
        let (mut model, mask) = wb.extended(&cfg.plan)?;
        let curve = train(&mut model, &mask, &wb.mixed_stream(phi)?, &cfg.adapt)?;
        arms.push(arm_report(
            wb,
            baseline,
            arm,
            format!("extended, default mask, anchor fraction {phi}"),
            &model,
            Some(&mask),
            curve,
        )?);
    }
    Ok(RetentionReport { arms })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementArm {
    pub name: String,
    pub plan: ExtensionPlan,
}

impl PlacementArm {
    /// The three layouts compared in the placement study, each inserting
    /// `count` blocks before the final base block: a frozen final block,
    /// all new blocks stacked in one gap, and new blocks spread out.
    pub fn standard(n_base: usize, count: usize) -> Result<Vec<PlacementArm>> {
        if n_base < 2 * count {
            return Err(GraftError::Config(format!(
                "{n_base} base blocks cannot hold {count} spread-out insertions before the last block"
            )));
        }
        let spread: Vec<usize> = (0..count).map(|k| n_base - 2 - 2 * (count - 1 - k)).collect();
        let stacked = vec![n_base - 2; count];
        Ok(vec![
            PlacementArm {
                name: "frozen_last".into(),
                plan: ExtensionPlan {
                    overrides: PlanOverrides {
                        freeze_last_block: true,
                        allow_frozen_last: true,
                        ..PlanOverrides::default()
                    },
                    ..ExtensionPlan::new(n_base, spread.clone())
                },
            },
            PlacementArm {
                name: "consecutive".into(),
                plan: ExtensionPlan {
                    overrides: PlanOverrides {
                        allow_consecutive: true,
                        ..PlanOverrides::default()
                    },
                    ..ExtensionPlan::new(n_base, stacked)
                },
            },
            PlacementArm {
                name: "distributed".into(),
                plan: ExtensionPlan::new(n_base, spread),
            },
        ])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementResult {
    pub arm: PlacementArm,
    pub trainable_params: usize,
    pub curve: LossCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementReport {
    pub results: Vec<PlacementResult>,
}

impl PlacementReport {
    pub fn get(&self, name: &str) -> Option<&PlacementResult> {
        self.results.iter().find(|r| r.arm.name == name)
    }

    pub fn curves_tsv(&self) -> String {
        let curves: Vec<(&str, &LossCurve)> = self
            .results
            .iter()
            .map(|r| (r.arm.name.as_str(), &r.curve))
            .collect();
        aligned_curves(&curves)
    }

    /// Every arm's plan, as TOML sections keyed by arm name.
    pub fn plans_toml(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&format!("[{}]\n{}\n", r.arm.name, r.arm.plan.to_toml()));
        }
        out
    }
}

/// Trains one extended model per arm on the same anchor-mixed stream with
/// the same seed, recording loss curves.
pub fn run_placement_study(wb: &Workbench, arms: &[PlacementArm]) -> Result<PlacementReport> {
    let data = wb.mixed_stream(wb.config.phi)?;
    let mut results = Vec::with_capacity(arms.len());
    for arm in arms {
        let (mut model, mask) = wb.extended(&arm.plan)?;
        let curve = train(&mut model, &mask, &data, &wb.config.adapt)?;
        results.push(PlacementResult {
            arm: arm.clone(),
            trainable_params: model.count_params(Some(&mask))?.trainable,
            curve,
        });
    }
    Ok(PlacementReport { results })
}
