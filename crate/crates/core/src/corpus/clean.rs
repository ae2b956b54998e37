use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{GraftError, Result};

const TATWEEL: char = '\u{0640}';
const MAX_PASSES: usize = 16;

/// Inclusive code-point range, written `U+06D6..U+06ED` in config files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CharRange {
    pub start: char,
    pub end: char,
}

impl CharRange {
    pub fn contains(&self, c: char) -> bool {
        (self.start..=self.end).contains(&c)
    }
}

impl fmt::Display for CharRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "U+{:04X}..U+{:04X}", self.start as u32, self.end as u32)
    }
}

impl FromStr for CharRange {
    type Err = GraftError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || GraftError::Config(format!("bad code-point range {s:?} (expected U+XXXX..U+YYYY)"));
        let point = |p: &str| -> Result<char> {
            let hex = p.trim().strip_prefix("U+").ok_or_else(bad)?;
            u32::from_str_radix(hex, 16)
                .ok()
                .and_then(char::from_u32)
                .ok_or_else(bad)
        };
        let (a, b) = s.split_once("..").ok_or_else(bad)?;
        let (start, end) = (point(a)?, point(b)?);
        if start > end {
            return Err(bad());
        }
        Ok(CharRange { start, end })
    }
}

impl TryFrom<String> for CharRange {
    type Error = GraftError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CharRange> for String {
    fn from(r: CharRange) -> String {
        r.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanConfig {
    /// Runs of this many identical letters shrink to one fewer; 0 disables.
    pub collapse_repeats_at: usize,
    pub strip_elongation: bool,
    pub strip_markup: bool,
    pub normalize_whitespace: bool,
    /// Kept verbatim by every step.
    pub preserve_ranges: Vec<CharRange>,
    /// Single character → replacement.
    pub normalize_variants: BTreeMap<String, String>,
    /// Minimum number of whitespace-delimited words.
    pub min_length: usize,
    pub drop_malformed: bool,
}

impl Default for CleanConfig {
    fn default() -> Self {
        let variants = [
            ('\u{066E}', '\u{0628}'), // dotless beh
            ('\u{067B}', '\u{0628}'), // beeh
            ('\u{0680}', '\u{0628}'), // beheh
            ('\u{06CC}', '\u{064A}'), // farsi yeh
            ('\u{06A9}', '\u{0643}'), // keheh
        ];
        CleanConfig {
            collapse_repeats_at: 3,
            strip_elongation: true,
            strip_markup: true,
            normalize_whitespace: true,
            preserve_ranges: vec![CharRange {
                start: '\u{06D6}',
                end: '\u{06ED}',
            }],
            normalize_variants: variants
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            min_length: 3,
            drop_malformed: true,
        }
    }
}

impl CleanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.collapse_repeats_at == 1 {
            return Err(GraftError::Config(
                "collapse_repeats_at must be 0 (off) or at least 2".into(),
            ));
        }
        for (from, to) in &self.normalize_variants {
            if from.chars().count() != 1 {
                return Err(GraftError::Config(format!(
                    "variant key {from:?} must be a single character"
                )));
            }
            // A replacement that contains a key would never settle.
            if let Some(k) = self.normalize_variants.keys().find(|k| to.contains(k.as_str())) {
                return Err(GraftError::Config(format!(
                    "variant replacement {to:?} contains the key {k:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: CleanConfig =
            toml::from_str(text).map_err(|e| GraftError::Config(format!("clean config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("clean config serializes")
    }

    fn preserved(&self, c: char) -> bool {
        self.preserve_ranges.iter().any(|r| r.contains(c))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Short,
    Malformed,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::Short => "short",
            RejectReason::Malformed => "malformed",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Cleaned {
    Kept(String),
    Rejected(RejectReason),
}

impl Cleaned {
    pub fn kept(&self) -> Option<&str> {
        match self {
            Cleaned::Kept(s) => Some(s),
            Cleaned::Rejected(_) => None,
        }
    }
}

fn is_presentation_form(c: char) -> bool {
    matches!(c, '\u{FB50}'..='\u{FDFF}' | '\u{FE70}'..='\u{FEFF}')
}

/// Drops control characters and a stray BOM, and folds Arabic presentation
/// forms to their base letters.
fn repair_encoding(text: &str, cfg: &CleanConfig) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if cfg.preserved(c) {
            out.push(c);
        } else if c == '\u{FEFF}' || (c.is_control() && !c.is_whitespace()) {
            continue;
        } else if is_presentation_form(c) {
            out.extend(c.to_string().nfkc());
        } else {
            out.push(c);
        }
    }
    out
}

/// Length in bytes of a tag starting at `s` (which begins with `<`):
/// `<` [`/` | `!`] ASCII letter, then anything but angle brackets, then `>`.
fn tag_len(s: &str, cfg: &CleanConfig) -> Option<usize> {
    let mut chars = s.char_indices().skip(1).peekable();
    if let Some((_, '/' | '!')) = chars.peek() {
        chars.next();
    }
    match chars.next() {
        Some((_, c)) if c.is_ascii_alphabetic() => {}
        _ => return None,
    }
    for (i, c) in chars {
        match c {
            '>' => return Some(i + 1),
            '<' => return None,
            c if cfg.preserved(c) => return None,
            _ => {}
        }
    }
    None
}

fn strip_markup(text: &str, cfg: &CleanConfig) -> String {
    let mut cur = text.to_string();
    loop {
        let mut out = String::with_capacity(cur.len());
        let mut rest = cur.as_str();
        while let Some(at) = rest.find('<') {
            out.push_str(&rest[..at]);
            match tag_len(&rest[at..], cfg) {
                Some(n) => {
                    out.push(' ');
                    rest = &rest[at + n..];
                }
                None => {
                    out.push('<');
                    rest = &rest[at + 1..];
                }
            }
        }
        out.push_str(rest);
        if out == cur {
            return out;
        }
        cur = out;
    }
}

fn strip_elongation(text: &str, cfg: &CleanConfig) -> String {
    text.chars()
        .filter(|&c| c != TATWEEL || cfg.preserved(c))
        .collect()
}

fn normalize_variants(text: &str, cfg: &CleanConfig) -> String {
    let mut out = String::with_capacity(text.len());
    let mut key = [0u8; 4];
    for c in text.chars() {
        match cfg.normalize_variants.get(&*c.encode_utf8(&mut key)) {
            Some(to) if !cfg.preserved(c) => out.push_str(to),
            _ => out.push(c),
        }
    }
    out
}

fn collapse_repeats(text: &str, cfg: &CleanConfig) -> String {
    let at = cfg.collapse_repeats_at;
    let mut out = String::with_capacity(text.len());
    let mut prev = None;
    let mut run = 0;
    for c in text.chars() {
        run = if Some(c) == prev { run + 1 } else { 1 };
        prev = Some(c);
        if c.is_alphabetic() && !cfg.preserved(c) && run >= at {
            continue;
        }
        out.push(c);
    }
    out
}

fn normalize_whitespace(text: &str, cfg: &CleanConfig) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending = false;
    for c in text.chars() {
        if c.is_whitespace() && !cfg.preserved(c) {
            pending = !out.is_empty();
        } else {
            if pending {
                out.push(' ');
                pending = false;
            }
            out.push(c);
        }
    }
    out
}

fn clean_pass(text: &str, cfg: &CleanConfig) -> String {
    let mut s = repair_encoding(text, cfg);
    if cfg.strip_markup {
        s = strip_markup(&s, cfg);
    }
    if cfg.strip_elongation {
        s = strip_elongation(&s, cfg);
    }
    if !cfg.normalize_variants.is_empty() {
        s = normalize_variants(&s, cfg);
    }
    if cfg.collapse_repeats_at >= 2 {
        s = collapse_repeats(&s, cfg);
    }
    if cfg.normalize_whitespace {
        s = normalize_whitespace(&s, cfg);
    }
    s
}

fn is_malformed(text: &str, cfg: &CleanConfig) -> bool {
    if text.contains('\u{FFFD}') {
        return true;
    }
    let (mut letters, mut symbols) = (0usize, 0usize);
    for c in text.chars() {
        if c.is_alphabetic() {
            letters += 1;
        } else if !c.is_whitespace() && !c.is_numeric() && !cfg.preserved(c) {
            symbols += 1;
        }
    }
    symbols > 0 && (letters as f64) < 0.5 * symbols as f64
}

/// Applies the cleaning steps in order, repeating the sequence until the text
/// stops changing so that cleaning is idempotent, then applies the filters.
///
/// `cfg` is assumed valid (see [`CleanConfig::validate`]).
pub fn clean_text(text: &str, cfg: &CleanConfig) -> Cleaned {
    let mut cur = clean_pass(text, cfg);
    // After the first pass steps only delete, so this settles quickly; the
    // cap guards against variant tables that cycle through normalization.
    for _ in 0..MAX_PASSES {
        let next = clean_pass(&cur, cfg);
        if next == cur {
            break;
        }
        cur = next;
    }
    if cfg.drop_malformed && is_malformed(&cur, cfg) {
        return Cleaned::Rejected(RejectReason::Malformed);
    }
    if cur.split_whitespace().count() < cfg.min_length {
        return Cleaned::Rejected(RejectReason::Short);
    }
    Cleaned::Kept(cur)
}
