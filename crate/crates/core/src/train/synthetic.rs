use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{GraftError, Result};

/// An order-2 Markov chain over an alphabet plus the space character.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub lang: String,
    pub alphabet: Vec<char>,
    /// Successors per two-symbol context.
    pub branching: usize,
    pub max_word_len: usize,
    pub seed: u64,
}

impl LanguageSpec {
    pub fn latin(seed: u64) -> Self {
        LanguageSpec {
            lang: "l1".into(),
            alphabet: "abcdefghijklmnop".chars().collect(),
            branching: 3,
            max_word_len: 8,
            seed,
        }
    }

    pub fn arabic(seed: u64) -> Self {
        LanguageSpec {
            lang: "l2".into(),
            alphabet: "ابتثجحخدذرزسشصضط".chars().collect(),
            branching: 3,
            max_word_len: 8,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let distinct: BTreeSet<char> = self.alphabet.iter().copied().collect();
        if distinct.len() != self.alphabet.len() || distinct.len() < 2 {
            return Err(GraftError::Config(format!(
                "language {}: alphabet needs at least two distinct letters",
                self.lang
            )));
        }
        if self.alphabet.iter().any(|c| c.is_whitespace()) {
            return Err(GraftError::Config(format!(
                "language {}: alphabet may not contain whitespace",
                self.lang
            )));
        }
        if self.branching == 0 || self.max_word_len == 0 {
            return Err(GraftError::Config(format!(
                "language {}: branching and max_word_len must be positive",
                self.lang
            )));
        }
        Ok(())
    }
}

/// Sampled transition table. Symbol 0 is the space; letters follow.
struct Chain {
    symbols: Vec<char>,
    /// `(successor, cumulative weight)` per context `prev2 * n + prev1`.
    next: Vec<Vec<(usize, f64)>>,
    max_word_len: usize,
}

impl Chain {
    fn new(spec: &LanguageSpec) -> Self {
        let mut symbols = vec![' '];
        symbols.extend(&spec.alphabet);
        let n = symbols.len();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut next = Vec::with_capacity(n * n);
        for ctx in 0..n * n {
            // No empty words: a space is never followed by a space.
            let lo = usize::from(ctx % n == 0);
            let k = spec.branching.min(n - lo);
            let mut picks = BTreeSet::new();
            while picks.len() < k {
                picks.insert(rng.gen_range(lo..n));
            }
            let weights: Vec<f64> = picks.iter().map(|_| rng.gen_range(0.2..1.0)).collect();
            let total: f64 = weights.iter().sum();
            let mut acc = 0.0;
            next.push(
                picks
                    .into_iter()
                    .zip(weights)
                    .map(|(s, w)| {
                        acc += w / total;
                        (s, acc)
                    })
                    .collect(),
            );
        }
        Chain {
            symbols,
            next,
            max_word_len: spec.max_word_len,
        }
    }

    fn document(&self, words: usize, rng: &mut ChaCha8Rng) -> String {
        let n = self.symbols.len();
        let (mut a, mut b) = (0usize, 0usize);
        let mut out = String::new();
        let mut done = 0;
        let mut word_len = 0;
        while done < words {
            let choices = &self.next[a * n + b];
            let u: f64 = rng.gen();
            let mut c = choices
                .iter()
                .find(|(_, cum)| u < *cum)
                .unwrap_or(choices.last().expect("contexts have successors"))
                .0;
            if word_len >= self.max_word_len {
                c = 0;
            }
            if c == 0 {
                done += 1;
                word_len = 0;
                if done < words {
                    out.push(' ');
                }
            } else {
                out.push(self.symbols[c]);
                word_len += 1;
            }
            (a, b) = (b, c);
        }
        out
    }
}

/// Two synthetic languages with disjoint alphabets and split sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticBilingualSpec {
    pub l1: LanguageSpec,
    pub l2: LanguageSpec,
    pub train_docs: usize,
    pub eval_docs: usize,
    pub words_per_doc: usize,
    pub seed: u64,
}

impl Default for SyntheticBilingualSpec {
    fn default() -> Self {
        SyntheticBilingualSpec {
            l1: LanguageSpec::latin(101),
            l2: LanguageSpec::arabic(202),
            train_docs: 400,
            eval_docs: 40,
            words_per_doc: 40,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpora {
    pub l1_train: Vec<Document>,
    pub l1_eval: Vec<Document>,
    pub l2_train: Vec<Document>,
    pub l2_eval: Vec<Document>,
}

impl SyntheticBilingualSpec {
    pub fn validate(&self) -> Result<()> {
        self.l1.validate()?;
        self.l2.validate()?;
        if self.l1.alphabet.iter().any(|c| self.l2.alphabet.contains(c)) {
            return Err(GraftError::Config("language alphabets must be disjoint".into()));
        }
        if self.train_docs == 0 || self.eval_docs == 0 || self.words_per_doc == 0 {
            return Err(GraftError::Config("corpus sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SyntheticCorpora> {
        self.validate()?;
        let split = |lang: &LanguageSpec, salt: u64, n: usize, name: &str| -> Vec<Document> {
            let chain = Chain::new(lang);
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ lang.seed.rotate_left(17) ^ salt);
            (0..n)
                .map(|_| {
                    Document::new(
                        chain.document(self.words_per_doc, &mut rng),
                        lang.lang.clone(),
                        format!("synthetic:{name}"),
                    )
                })
                .collect()
        };
        Ok(SyntheticCorpora {
            l1_train: split(&self.l1, 1, self.train_docs, "train"),
            l1_eval: split(&self.l1, 2, self.eval_docs, "eval"),
            l2_train: split(&self.l2, 1, self.train_docs, "train"),
            l2_eval: split(&self.l2, 2, self.eval_docs, "eval"),
        })
    }
}
