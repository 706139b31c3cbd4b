use qbm_core::eval::{highest_idf_tokens, inspect_weights};
use qbm_core::index::InvertedIndex;
use qbm_core::model::{Matcher, ModelConfig, ModelParams, Variant};
use qbm_core::text::{EmbeddingTable, Vocabulary, UNK_TOKEN};
use qbm_core::QbmError;

const TEXTS: [&str; 4] = [
    "how do i reset my password",
    "password reset link expired",
    "where is my parcel",
    "parcel tracking number missing",
];

fn matcher(variant: Variant) -> Matcher {
    let vocab = Vocabulary::build(TEXTS.iter().copied(), 1);
    let stats = InvertedIndex::build(&TEXTS).stats().clone();
    let config = ModelConfig::tiny(variant);
    let table = EmbeddingTable::random(vocab.len(), config.embed_dim, 5);
    let params = ModelParams::from_embeddings(&config, &table, 5).unwrap();
    Matcher::new(config, vocab, stats, params).unwrap()
}

#[test]
fn fresh_weights_are_uniform() {
    // The output layer of the weighting network starts at zero.
    let m = matcher(Variant::Qbm);
    let (rows, mean) = inspect_weights(&m, &["password", "the", "parcel"]).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert_eq!(r.e, rows[0].e);
    }
    assert_eq!(mean, rows[0].e);
}

#[test]
fn unknown_tokens_resolve_to_unk_and_duplicates_collapse() {
    let m = matcher(Variant::Qbm);
    let (rows, _) = inspect_weights(&m, &["Parcel", "zebra", "parcel", "zebra"]).unwrap();
    let shown: Vec<(&str, &str)> = rows.iter().map(|r| (r.token.as_str(), r.resolved.as_str())).collect();
    assert_eq!(shown, [("parcel", "parcel"), ("zebra", UNK_TOKEN)]);
}

#[test]
fn variants_without_weighting_refuse() {
    for v in [Variant::Base, Variant::BaseBrNoCov, Variant::Qq, Variant::BagCon] {
        let m = matcher(v);
        assert!(matches!(inspect_weights(&m, &["parcel"]), Err(QbmError::Capability(_))), "{v}");
    }
    for v in [Variant::BaseMc, Variant::BaseBr, Variant::Qbm] {
        assert!(inspect_weights(&matcher(v), &["parcel"]).is_ok(), "{v}");
    }
}

#[test]
fn highest_idf_tokens_skip_stopwords() {
    let m = matcher(Variant::Qbm);
    let top = highest_idf_tokens(&m.term_stats, &m.vocab, m.stopwords(), 5);
    assert_eq!(top.len(), 5);
    assert!(!top.iter().any(|t| ["my", "how", "do", "i", "is", "where"].contains(&t.as_str())));
    // df 1 tokens, alphabetical.
    assert_eq!(top[0], "expired");
}
