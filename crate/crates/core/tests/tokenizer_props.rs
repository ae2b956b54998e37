use std::sync::OnceLock;

use graft_core::tokenizer::{expansion_ratio, merge_vocab, train_vocab, MergedTokenizer, SubwordVocab, Tokenizer};
use graft_core::train::{SyntheticBilingualSpec, SyntheticCorpora};
use proptest::prelude::*;

struct Fixture {
    corpora: SyntheticCorpora,
    base: SubwordVocab,
    merged: MergedTokenizer,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = SyntheticBilingualSpec {
            train_docs: 120,
            eval_docs: 60,
            ..SyntheticBilingualSpec::default()
        };
        let corpora = spec.generate().unwrap();
        let text = |docs: &[graft_core::corpus::Document]| docs.iter().map(|d| d.text.clone()).collect::<Vec<_>>();
        // The base also learns a few English-like merges so ASCII text exercises real rules.
        let mut base_text = text(&corpora.l1_train);
        base_text.push("the quick brown fox jumps over the lazy dog; the end.".into());
        let base = train_vocab(&base_text, 300).unwrap();
        let new = train_vocab(&text(&corpora.l2_train), 300).unwrap();
        let merged = merge_vocab(&base, &new);
        Fixture { corpora, base, merged }
    })
}

/// Characters from ASCII, Latin-1, the Arabic block (including the Quranic
/// annotation marks), presentation forms, and anything else.
fn mixed_char() -> impl Strategy<Value = char> {
    prop_oneof![
        (0x20u32..0x7f).prop_map(|c| char::from_u32(c).unwrap()),
        (0x600u32..0x700).prop_map(|c| char::from_u32(c).unwrap()),
        (0x6d6u32..=0x6ed).prop_map(|c| char::from_u32(c).unwrap()),
        (0xfb50u32..0xfe00).prop_filter_map("scalar", char::from_u32),
        Just(' '),
        Just('\n'),
        any::<char>(),
    ]
}

proptest! {
    #[test]
    fn decode_inverts_encode(s in proptest::collection::vec(mixed_char(), 0..60)) {
        let s: String = s.into_iter().collect();
        let f = fixture();
        prop_assert_eq!(f.base.decode_bytes(&f.base.encode(&s)).unwrap(), s.as_bytes());
        let merged = f.merged.vocab();
        prop_assert_eq!(merged.decode_bytes(&merged.encode(&s)).unwrap(), s.as_bytes());
    }

    #[test]
    fn ascii_encodes_identically_after_merge(s in "[ -~]{0,80}") {
        let f = fixture();
        prop_assert_eq!(f.merged.encode(&s), f.base.encode(&s));
    }

    #[test]
    fn base_ids_survive_merging(id in 0u32..300) {
        let f = fixture();
        prop_assert_eq!(f.merged.vocab().token(id), f.base.token(id));
    }
}

#[test]
fn merged_never_longer_and_usually_shorter_on_new_language() {
    let f = fixture();
    let docs = &f.corpora.l2_eval;
    let mut strict = 0;
    for d in docs {
        let (m, b) = (f.merged.encode(&d.text).len(), f.base.encode(&d.text).len());
        assert!(m <= b, "{m} > {b} on {:?}", d.text);
        strict += usize::from(m < b);
    }
    assert!(strict * 100 >= docs.len() * 95, "{strict}/{}", docs.len());
}

#[test]
fn larger_merged_vocab_never_raises_ratio() {
    let f = fixture();
    let text: Vec<String> = f.corpora.l2_train.iter().map(|d| d.text.clone()).collect();
    let eval: Vec<&str> = f.corpora.l2_eval.iter().map(|d| d.text.as_str()).collect();
    let mut last = f64::INFINITY;
    for size in [260, 280, 300, 340] {
        let merged = merge_vocab(&f.base, &train_vocab(&text, size).unwrap());
        let ratio = expansion_ratio(&merged, eval.iter()).unwrap().ratio;
        assert!(ratio <= last, "size {size}: {ratio} > {last}");
        last = ratio;
    }
    let base_ratio = expansion_ratio(&f.base, eval.iter()).unwrap().ratio;
    assert!(last < base_ratio);
}

#[test]
fn merged_size_is_inclusion_exclusion() {
    let f = fixture();
    let text: Vec<String> = f.corpora.l2_train.iter().map(|d| d.text.clone()).collect();
    let new = train_vocab(&text, 300).unwrap();
    let overlap = graft_core::tokenizer::vocab_overlap(&f.base, &new);
    assert_eq!(f.merged.len(), f.base.len() + new.len() - overlap);
}
