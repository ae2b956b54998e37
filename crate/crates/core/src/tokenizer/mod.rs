//! Byte-level subword vocabularies: training, merging a new-language
//! vocabulary into a base one, embedding expansion and the expansion ratio.

mod train;
mod vocab;

pub use train::train_vocab;
pub use vocab::{escape_bytes, pretokenize, unescape_bytes, MergeRule, SubwordVocab};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GraftError, Result};
use crate::io::{read_to_string, write_atomic};
use crate::model::{Model, TokenId};
use crate::tensor::Tensor;
use vocab::{BaseExtent, VocabFile};

/// Anything that maps text to token ids and back.
pub trait Tokenizer {
    fn vocab(&self) -> &SubwordVocab;

    fn vocab_size(&self) -> usize {
        self.vocab().len()
    }

    fn encode(&self, text: &str) -> Vec<TokenId> {
        self.vocab().encode(text)
    }

    fn decode(&self, ids: &[TokenId]) -> Result<String> {
        self.vocab().decode(ids)
    }
}

impl Tokenizer for SubwordVocab {
    fn vocab(&self) -> &SubwordVocab {
        self
    }
}

/// A base vocabulary with a new vocabulary appended after it.
///
/// Base ids and base merge ranks are untouched; new tokens get ids from
/// `base_size` on and new rules rank after every base rule.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedTokenizer {
    combined: SubwordVocab,
    base_size: usize,
    base_merges: usize,
}

impl Tokenizer for MergedTokenizer {
    fn vocab(&self) -> &SubwordVocab {
        &self.combined
    }
}

impl MergedTokenizer {
    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn n_new_tokens(&self) -> usize {
        self.combined.len() - self.base_size
    }

    pub fn len(&self) -> usize {
        self.combined.len()
    }

    pub fn is_empty(&self) -> bool {
        self.combined.is_empty()
    }

    /// The base vocabulary this tokenizer was built from.
    pub fn base(&self) -> SubwordVocab {
        let mut v = SubwordVocab::bytes_only();
        for t in &self.combined.tokens()[256..self.base_size] {
            v.push_token(t.clone());
        }
        for m in &self.combined.merges()[..self.base_merges] {
            v.push_merge(m.left, m.right);
        }
        v
    }
}

/// Appends `new` to `base`.
///
/// Tokens of `new` whose bytes already exist in `base` reuse the base id.
/// New rules are appended in rank order, skipping pairs the base already
/// has and rules whose result is pure ASCII; the latter keeps the
/// segmentation of ASCII text identical to the base.
pub fn merge_vocab(base: &SubwordVocab, new: &SubwordVocab) -> MergedTokenizer {
    let mut combined = base.clone();
    let remap: Vec<TokenId> = new
        .tokens()
        .iter()
        .map(|t| combined.push_token(t.clone()))
        .collect();
    for m in new.merges() {
        let (left, right) = (remap[m.left as usize], remap[m.right as usize]);
        let result = new.token(m.result).expect("rule result is a token");
        if result.is_ascii() || combined.has_rule(left, right) {
            continue;
        }
        combined.push_merge(left, right);
    }
    MergedTokenizer {
        combined,
        base_size: base.len(),
        base_merges: base.merges().len(),
    }
}

/// Number of tokens of `new` whose bytes are also tokens of `base`.
pub fn vocab_overlap(base: &SubwordVocab, new: &SubwordVocab) -> usize {
    new.tokens().iter().filter(|t| base.id_of(t).is_some()).count()
}

fn write_vocab_file(path: &Path, file: &VocabFile) -> Result<()> {
    let mut text = serde_json::to_string_pretty(file).expect("vocab serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_vocab_file(path: &Path) -> Result<VocabFile> {
    serde_json::from_str(&read_to_string(path)?)
        .map_err(|e| GraftError::Input(format!("{}: {e}", path.display())))
}

impl SubwordVocab {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file(None)).expect("vocab serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_vocab_file(path.as_ref(), &self.to_file(None))
    }

    /// Loads any vocabulary file; a merged file loads as its combined vocabulary.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        SubwordVocab::from_file(&read_vocab_file(path.as_ref())?)
    }
}

impl MergedTokenizer {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let base = BaseExtent {
            tokens: self.base_size,
            merges: self.base_merges,
        };
        write_vocab_file(path.as_ref(), &self.combined.to_file(Some(base)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = read_vocab_file(path)?;
        let base = file.base.ok_or_else(|| {
            GraftError::Input(format!("{} is not a merged vocabulary", path.display()))
        })?;
        let combined = SubwordVocab::from_file(&file)?;
        if base.tokens < 256 || base.tokens > combined.len() || base.merges > combined.merges().len() {
            return Err(GraftError::Input(format!(
                "{}: base extent out of range",
                path.display()
            )));
        }
        Ok(MergedTokenizer {
            combined,
            base_size: base.tokens,
            base_merges: base.merges,
        })
    }
}

/// Tokens per whitespace-delimited word over a whole corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub words: u64,
    pub tokens: u64,
    pub ratio: f64,
}

pub fn expansion_ratio<T, S>(tok: &T, corpus: impl IntoIterator<Item = S>) -> Result<ExpansionReport>
where
    T: Tokenizer + ?Sized,
    S: AsRef<str>,
{
    let (mut words, mut tokens) = (0u64, 0u64);
    for doc in corpus {
        let doc = doc.as_ref();
        words += doc.split_whitespace().count() as u64;
        tokens += tok.encode(doc).len() as u64;
    }
    if words == 0 {
        return Err(GraftError::Input("corpus contains no words".into()));
    }
    Ok(ExpansionReport {
        words,
        tokens,
        ratio: tokens as f64 / words as f64,
    })
}

/// How rows for new tokens are initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EmbeddingInit {
    /// Mean of the existing embedding rows and LM-head columns.
    #[default]
    Mean,
    /// N(0, 0.02²) from a seeded generator.
    SmallRandom { seed: u64 },
    /// Mean embedding rows, zero LM-head columns: base-token logits are unchanged.
    ZeroHead,
}

/// Grows the embedding and LM head to the merged vocabulary.
pub fn expand_embeddings(model: &Model, merged: &MergedTokenizer, init: EmbeddingInit) -> Result<Model> {
    let old_v = model.config.vocab_size;
    if old_v != merged.base_size() {
        return Err(GraftError::Contract(format!(
            "model vocabulary is {old_v} but the tokenizer's base vocabulary is {}",
            merged.base_size()
        )));
    }
    let new_v = merged.len();
    let extra = new_v - old_v;
    let d = model.config.d_model;
    let mut rng = match init {
        EmbeddingInit::SmallRandom { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let normal = Normal::new(0.0f32, 0.02).expect("valid distribution");
    let mut sample = |n: usize| -> Vec<f32> {
        let rng = rng.as_mut().expect("random init has a generator");
        (0..n).map(|_| normal.sample(rng)).collect()
    };

    let emb = model.token_embedding.data();
    let mut emb_new = emb.to_vec();
    let new_rows = match init {
        EmbeddingInit::SmallRandom { .. } => sample(extra * d),
        _ => {
            let mut mean = vec![0f64; d];
            for row in emb.chunks(d) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += *v as f64;
                }
            }
            let mean: Vec<f32> = mean.iter().map(|m| (m / old_v as f64) as f32).collect();
            mean.repeat(extra)
        }
    };
    emb_new.extend(new_rows);

    let head = model.lm_head.data();
    let new_cols = match init {
        EmbeddingInit::SmallRandom { .. } => sample(d * extra),
        EmbeddingInit::ZeroHead => vec![0.0; d * extra],
        EmbeddingInit::Mean => head
            .chunks(old_v)
            .flat_map(|row| {
                let m = row.iter().map(|v| *v as f64).sum::<f64>() / old_v as f64;
                std::iter::repeat_n(m as f32, extra)
            })
            .collect(),
    };
    let mut head_new = Vec::with_capacity(d * new_v);
    for (row, fresh) in head.chunks(old_v).zip(new_cols.chunks(extra.max(1))) {
        head_new.extend_from_slice(row);
        if extra > 0 {
            head_new.extend_from_slice(fresh);
        }
    }

    let mut out = model.clone();
    out.config.vocab_size = new_v;
    out.token_embedding = Tensor::new(vec![new_v, d], emb_new)?;
    out.lm_head = Tensor::new(vec![d, new_v], head_new)?;
    out.validate()?;
    Ok(out)
}
