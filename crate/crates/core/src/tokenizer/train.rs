use std::collections::HashMap;

use super::vocab::{apply_merge, pretokenize, SubwordVocab};
use crate::error::{GraftError, Result};
use crate::model::TokenId;

/// Greedy byte-pair training: repeatedly merge the most frequent adjacent
/// pair until the vocabulary has `target_size` tokens or no pair remains.
///
/// Frequency ties go to the lexicographically smallest `(left, right)` byte
/// strings, so the result depends only on the corpus contents.
pub fn train_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<SubwordVocab> {
    if target_size < 257 {
        return Err(GraftError::Input(format!(
            "target size {target_size} leaves no room for merges (minimum 257)"
        )));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for doc in corpus {
        for piece in pretokenize(doc.as_ref()) {
            *counts.entry(piece).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(GraftError::Input("cannot train a vocabulary on an empty corpus".into()));
    }
    let mut words: Vec<(Vec<TokenId>, u64)> = counts
        .into_iter()
        .filter(|(p, _)| p.len() > 1)
        .map(|(p, n)| (p.bytes().map(TokenId::from).collect(), n))
        .collect();
    words.sort();

    let mut vocab = SubwordVocab::bytes_only();
    while vocab.len() < target_size {
        let mut pairs: HashMap<(TokenId, TokenId), u64> = HashMap::new();
        for (ids, n) in &words {
            for w in ids.windows(2) {
                *pairs.entry((w[0], w[1])).or_default() += n;
            }
        }
        let key = |p: &(TokenId, TokenId)| (vocab.token(p.0).unwrap(), vocab.token(p.1).unwrap());
        let Some((&(left, right), _)) = pairs.iter().max_by(|(pa, na), (pb, nb)| {
            na.cmp(nb).then_with(|| key(pb).cmp(&key(pa)))
        }) else {
            break;
        };
        let result = vocab.push_merge(left, right);
        for (ids, _) in &mut words {
            if ids.len() > 1 {
                *ids = apply_merge(ids, left, right, result);
            }
        }
        words.retain(|(ids, _)| ids.len() > 1);
    }
    Ok(vocab)
}
