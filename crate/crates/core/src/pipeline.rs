//! End-to-end helpers shared by the command line and the test suites.

use std::collections::BTreeSet;
use std::path::Path;

use crate::dataset::{emit_splits, filter_and_split, group_duplicates, DatasetStats, PairRecord, QueryBag, QueryBagInstance, SplitSizes, Splits};
use crate::error::{QbmError, Result};
use crate::index::InvertedIndex;
use crate::model::{Matcher, ModelConfig, ModelParams};
use crate::text::{EmbeddingTable, Vocabulary};

#[derive(Clone, Debug)]
pub struct BuiltDataset {
    pub query_bags: Vec<QueryBag>,
    pub splits: Splits,
    pub stats: DatasetStats,
}

/// Groups duplicates into bags, keeps bags with at least `min_bag_size`
/// questions, holds out a query per bag and emits the three splits.
/// Without explicit sizes, all kept queries are split 80/10/10.
pub fn build_dataset(pairs: &[PairRecord], min_bag_size: usize, sizes: Option<SplitSizes>, seed: u64) -> Result<BuiltDataset> {
    if pairs.is_empty() {
        return Err(QbmError::EmptyCorpus("pair file has no records".into()));
    }
    let bags = group_duplicates(pairs);
    let query_bags = filter_and_split(&bags, min_bag_size);
    if query_bags.is_empty() {
        return Err(QbmError::DatasetTooSmall(format!("no bag has {min_bag_size} or more questions")));
    }
    let sizes = sizes.unwrap_or_else(|| SplitSizes::proportional(query_bags.len()));
    let splits = emit_splits(&query_bags, sizes, seed)?;
    let stats = DatasetStats::new(bags.len(), &query_bags, &splits);
    Ok(BuiltDataset {
        query_bags,
        splits,
        stats,
    })
}

/// Distinct queries and questions of a split, sorted.
pub fn distinct_texts(instances: &[QueryBagInstance]) -> Vec<String> {
    let mut set = BTreeSet::new();
    for inst in instances {
        set.insert(inst.query.clone());
        for c in &inst.candidates {
            set.extend(c.questions.iter().cloned());
        }
    }
    set.into_iter().collect()
}

/// A freshly initialised matcher whose vocabulary and document frequencies
/// come from the training split. Embeddings are read from `embeddings`
/// when given, otherwise drawn at random.
pub fn new_matcher(
    config: ModelConfig,
    train: &[QueryBagInstance],
    embeddings: Option<&Path>,
    min_count: usize,
    seed: u64,
) -> Result<Matcher> {
    config.validate()?;
    let texts = distinct_texts(train);
    if texts.is_empty() {
        return Err(QbmError::EmptyCorpus("training split has no text".into()));
    }
    let vocab = Vocabulary::build(texts.iter().map(|s| s.as_str()), min_count);
    let stats = InvertedIndex::build(&texts).stats().clone();
    let table = match embeddings {
        Some(path) => EmbeddingTable::load(path, &vocab, config.embed_dim, seed)?,
        None => EmbeddingTable::random(vocab.len(), config.embed_dim, seed),
    };
    let params = ModelParams::from_embeddings(&config, &table, seed)?;
    Matcher::new(config, vocab, stats, params)
}
