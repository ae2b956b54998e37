use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{GraftError, Result};
use crate::model::TokenId;

/// `left + right → result`, applied in rank (list) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MergeRule {
    pub left: TokenId,
    pub right: TokenId,
    pub result: TokenId,
}

/// A byte-level subword vocabulary with ranked merge rules.
///
/// Ids `0..256` are the single bytes, so every string is encodable and
/// decoding is lossless.
#[derive(Clone, Debug)]
pub struct SubwordVocab {
    tokens: Vec<Vec<u8>>,
    merges: Vec<MergeRule>,
    index: HashMap<Vec<u8>, TokenId>,
    ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

impl PartialEq for SubwordVocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.merges == other.merges
    }
}

impl Default for SubwordVocab {
    fn default() -> Self {
        SubwordVocab::bytes_only()
    }
}

/// Splits text into pre-tokens: a whitespace run followed by a
/// non-whitespace run. Merges never cross pre-token boundaries.
pub fn pretokenize(text: &str) -> impl Iterator<Item = &str> {
    let mut rest = text;
    std::iter::from_fn(move || {
        if rest.is_empty() {
            return None;
        }
        let mut seen_word = false;
        let mut end = rest.len();
        for (i, c) in rest.char_indices() {
            if c.is_whitespace() {
                if seen_word {
                    end = i;
                    break;
                }
            } else {
                seen_word = true;
            }
        }
        let (piece, tail) = rest.split_at(end);
        rest = tail;
        Some(piece)
    })
}

impl SubwordVocab {
    pub fn bytes_only() -> Self {
        let tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        SubwordVocab {
            tokens,
            merges: Vec::new(),
            index,
            ranks: HashMap::new(),
        }
    }

    /// Builds a vocabulary by replaying merges given as byte strings.
    pub fn from_merges<A: AsRef<[u8]>, B: AsRef<[u8]>>(pairs: &[(A, B)]) -> Result<Self> {
        let mut v = SubwordVocab::bytes_only();
        for (a, b) in pairs {
            let left = v.id_of(a.as_ref()).ok_or_else(|| {
                GraftError::Input(format!("merge operand {:?} is not a token", escape_bytes(a.as_ref())))
            })?;
            let right = v.id_of(b.as_ref()).ok_or_else(|| {
                GraftError::Input(format!("merge operand {:?} is not a token", escape_bytes(b.as_ref())))
            })?;
            v.push_merge(left, right);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn byte_fallback(&self) -> bool {
        true
    }

    pub fn tokens(&self) -> &[Vec<u8>] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(|t| t.as_slice())
    }

    pub fn merges(&self) -> &[MergeRule] {
        &self.merges
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<TokenId> {
        self.index.get(bytes).copied()
    }

    pub(crate) fn has_rule(&self, left: TokenId, right: TokenId) -> bool {
        self.ranks.contains_key(&(left, right))
    }

    /// Appends a token unless its bytes already exist; returns its id.
    pub(crate) fn push_token(&mut self, bytes: Vec<u8>) -> TokenId {
        if let Some(id) = self.index.get(&bytes) {
            return *id;
        }
        let id = self.tokens.len() as TokenId;
        self.index.insert(bytes.clone(), id);
        self.tokens.push(bytes);
        id
    }

    /// Appends the rule `left + right` at the lowest priority, creating the
    /// result token if needed. An already-known pair is left unchanged.
    pub(crate) fn push_merge(&mut self, left: TokenId, right: TokenId) -> TokenId {
        if let Some((_, result)) = self.ranks.get(&(left, right)) {
            return *result;
        }
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        let result = self.push_token(bytes);
        self.ranks.insert((left, right), (self.merges.len(), result));
        self.merges.push(MergeRule { left, right, result });
        result
    }

    fn encode_piece(&self, piece: &[u8], out: &mut Vec<TokenId>) {
        let mut ids: Vec<TokenId> = piece.iter().map(|&b| b as TokenId).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, res)| (rank, w[0], w[1], res)))
                .min_by_key(|x| x.0);
            let Some((_, left, right, result)) = best else {
                break;
            };
            ids = apply_merge(&ids, left, right, result);
        }
        out.extend(ids);
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len());
        for piece in pretokenize(text) {
            self.encode_piece(piece.as_bytes(), &mut out);
        }
        out
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let t = self.token(id).ok_or_else(|| {
                GraftError::Index(format!("token id {id} out of range for vocabulary of {}", self.len()))
            })?;
            out.extend_from_slice(t);
        }
        Ok(out)
    }

    /// Inverse of [`SubwordVocab::encode`]; invalid UTF-8 from arbitrary id
    /// sequences is replaced with U+FFFD.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub(crate) fn to_file(&self, base: Option<BaseExtent>) -> VocabFile {
        VocabFile {
            format: VOCAB_FORMAT.into(),
            version: VOCAB_VERSION,
            byte_fallback: true,
            base,
            tokens: self.tokens.iter().map(|t| escape_bytes(t)).collect(),
            merges: self.merges.iter().map(|m| [m.left, m.right, m.result]).collect(),
        }
    }

    pub(crate) fn from_file(file: &VocabFile) -> Result<Self> {
        let bad = |msg: String| GraftError::Input(format!("vocab file: {msg}"));
        if file.format != VOCAB_FORMAT || file.version != VOCAB_VERSION {
            return Err(bad(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        if !file.byte_fallback {
            return Err(bad("only byte-fallback vocabularies are supported".into()));
        }
        let mut v = SubwordVocab::bytes_only();
        for (i, t) in file.tokens.iter().enumerate() {
            let bytes = unescape_bytes(t).ok_or_else(|| bad(format!("token {i} has a bad escape: {t:?}")))?;
            if i < 256 {
                if bytes != [i as u8] {
                    return Err(bad(format!("token {i} must be the single byte {i}")));
                }
                continue;
            }
            if v.push_token(bytes) as usize != i {
                return Err(bad(format!("token {i} duplicates an earlier token")));
            }
        }
        for (rank, &[l, r, res]) in file.merges.iter().enumerate() {
            let n = v.len() as TokenId;
            if l >= n || r >= n || res >= n {
                return Err(bad(format!("merge {rank} refers to an unknown token")));
            }
            let mut joined = v.tokens[l as usize].clone();
            joined.extend_from_slice(&v.tokens[r as usize]);
            if joined != v.tokens[res as usize] || v.has_rule(l, r) {
                return Err(bad(format!("merge {rank} is inconsistent")));
            }
            v.ranks.insert((l, r), (v.merges.len(), res));
            v.merges.push(MergeRule {
                left: l,
                right: r,
                result: res,
            });
        }
        Ok(v)
    }
}

/// Replaces every non-overlapping `left, right` (scanning left to right).
pub(crate) fn apply_merge(ids: &[TokenId], left: TokenId, right: TokenId, result: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
            out.push(result);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

pub(crate) const VOCAB_FORMAT: &str = "graft-vocab";
pub(crate) const VOCAB_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct VocabFile {
    pub format: String,
    pub version: u32,
    pub byte_fallback: bool,
    /// Present for merged tokenizers: how much of the file is the base vocabulary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<BaseExtent>,
    pub tokens: Vec<String>,
    pub merges: Vec<[TokenId; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct BaseExtent {
    pub tokens: usize,
    pub merges: usize,
}

/// Printable ASCII stays as is (backslash doubled); every other byte is `\xNN`.
pub fn escape_bytes(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'\\' => s.push_str("\\\\"),
            0x21..=0x7e => s.push(b as char),
            _ => s.push_str(&format!("\\x{b:02x}")),
        }
    }
    s
}

pub fn unescape_bytes(s: &str) -> Option<Vec<u8>> {
    let raw = s.as_bytes();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if raw[i] != b'\\' {
            out.push(raw[i]);
            i += 1;
            continue;
        }
        match raw.get(i + 1)? {
            b'\\' => {
                out.push(b'\\');
                i += 2;
            }
            b'x' => {
                let hex = std::str::from_utf8(raw.get(i + 2..i + 4)?).ok()?;
                out.push(u8::from_str_radix(hex, 16).ok()?);
                i += 4;
            }
            _ => return None,
        }
    }
    Some(out)
}
