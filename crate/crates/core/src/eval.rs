//! Ranking evaluation over fixed candidate lists.

use std::collections::HashSet;

use crate::dataset::{QueryBagInstance, TEST_NEGATIVES};
use crate::error::{QbmError, Result};
use crate::index::{StopWords, TermStats};
use crate::model::{Matcher, QqMode};
use crate::text::{Vocabulary, PAD, UNK, UNK_TOKEN};

/// Candidates per ranking instance.
pub const CANDIDATES: usize = TEST_NEGATIVES + 1;

/// Scores of one instance's candidates in stored order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredInstance {
    pub query_id: usize,
    pub bag_ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub positive: usize,
    /// Candidates that could not be encoded and were scored 0.
    pub degenerate: usize,
}

impl ScoredInstance {
    pub fn new(query_id: usize, bag_ids: Vec<usize>, scores: Vec<f64>, positive: usize) -> Result<Self> {
        if scores.len() != bag_ids.len() || positive >= scores.len() {
            return Err(QbmError::InstanceFormat("scores, ids and positive index disagree".into()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(QbmError::InstanceFormat("NaN score".into()));
        }
        Ok(ScoredInstance {
            query_id,
            bag_ids,
            scores,
            positive,
            degenerate: 0,
        })
    }

    /// Candidate indices best first; equal scores keep stored order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }

    /// 1-based rank of the positive among the positive and the first
    /// `n - 1` negatives in stored order.
    pub fn subset_rank(&self, n: usize) -> usize {
        let subset = (0..self.scores.len()).filter(|&i| i != self.positive).take(n.saturating_sub(1));
        let p = self.positive;
        let sp = self.scores[p];
        1 + subset
            .filter(|&j| self.scores[j] > sp || (self.scores[j] == sp && j < p))
            .count()
    }

    pub fn rank(&self) -> usize {
        self.subset_rank(self.scores.len())
    }
}

fn check_count(inst: &QueryBagInstance) -> Result<()> {
    if inst.candidates.len() != CANDIDATES {
        return Err(QbmError::InstanceFormat(format!(
            "query {} has {} candidates, expected {CANDIDATES}",
            inst.query_id,
            inst.candidates.len()
        )));
    }
    Ok(())
}

/// Scores every candidate with `score`; degenerate candidates score 0.
pub fn rank_candidates<F>(inst: &QueryBagInstance, mut score: F) -> Result<ScoredInstance>
where
    F: FnMut(&str, &[String]) -> Result<f64>,
{
    check_count(inst)?;
    let mut degenerate = 0;
    let mut scores = Vec::with_capacity(CANDIDATES);
    for c in &inst.candidates {
        match score(&inst.query, &c.questions) {
            Ok(s) => scores.push(s),
            Err(QbmError::Degenerate(_)) => {
                degenerate += 1;
                scores.push(0.0);
            }
            Err(e) => return Err(e),
        }
    }
    let ids = inst.candidates.iter().map(|c| c.bag_id).collect();
    let mut out = ScoredInstance::new(inst.query_id, ids, scores, inst.positive_index())?;
    out.degenerate = degenerate;
    Ok(out)
}

pub fn score_instances(matcher: &Matcher, instances: &[QueryBagInstance], mode: QqMode) -> Result<Vec<ScoredInstance>> {
    instances
        .iter()
        .map(|i| rank_candidates(i, |q, b| matcher.score(q, b, mode)))
        .collect()
}

/// A stand-in model that knows the answer: 1 for the positive, 0 otherwise.
pub fn oracle_scores(instances: &[QueryBagInstance]) -> Result<Vec<ScoredInstance>> {
    instances
        .iter()
        .map(|inst| {
            check_count(inst)?;
            let scores = inst.candidates.iter().map(|c| if c.positive { 1.0 } else { 0.0 }).collect();
            let ids = inst.candidates.iter().map(|c| c.bag_id).collect();
            ScoredInstance::new(inst.query_id, ids, scores, inst.positive_index())
        })
        .collect()
}

pub fn mrr(instances: &[ScoredInstance]) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    instances.iter().map(|i| 1.0 / i.rank() as f64).sum::<f64>() / instances.len() as f64
}

/// R_n@k: share of instances whose positive ranks within the top `k` of the
/// `n`-candidate subset.
pub fn recall_at(instances: &[ScoredInstance], n: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(QbmError::Parameter(format!("R{n}@{k}: need 1 <= k <= n")));
    }
    if let Some(i) = instances.iter().find(|i| i.scores.len() < n) {
        return Err(QbmError::Parameter(format!(
            "R{n}@{k}: query {} has only {} candidates",
            i.query_id,
            i.scores.len()
        )));
    }
    if instances.is_empty() {
        return Ok(0.0);
    }
    let hits = instances.iter().filter(|i| i.subset_rank(n) <= k).count();
    Ok(hits as f64 / instances.len() as f64)
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub mrr: f64,
    pub r10_1: f64,
    pub r10_2: f64,
    pub r10_5: f64,
    pub r2_1: f64,
}

impl MetricsRow {
    pub fn compute(model: impl Into<String>, instances: &[ScoredInstance]) -> Result<Self> {
        Ok(MetricsRow {
            model: model.into(),
            mrr: mrr(instances),
            r10_1: recall_at(instances, 10, 1)?,
            r10_2: recall_at(instances, 10, 2)?,
            r10_5: recall_at(instances, 10, 5)?,
            r2_1: recall_at(instances, 2, 1)?,
        })
    }
}

pub const REPORT_HEADER: &str = "model\tMRR\tR10@1\tR10@2\tR10@5\tR2@1";

/// Tab-separated table with four decimals.
pub fn ablation_report(rows: &[MetricsRow]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            r.model, r.mrr, r.r10_1, r.r10_2, r.r10_5, r.r2_1
        ));
    }
    s
}

/// A token's coverage weight. `resolved` is the vocabulary entry used,
/// `<unk>` for unknown tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightRow {
    pub token: String,
    pub resolved: String,
    pub e: f64,
}

/// Raw token weights for the given tokens (deduplicated, first occurrence
/// kept) and the mean over every vocabulary entry except padding.
pub fn inspect_weights<S: AsRef<str>>(matcher: &Matcher, tokens: &[S]) -> Result<(Vec<WeightRow>, f64)> {
    let mut seen = HashSet::new();
    let uniq: Vec<String> = tokens
        .iter()
        .map(|t| t.as_ref().to_lowercase())
        .filter(|t| seen.insert(t.clone()))
        .collect();
    let ids: Vec<usize> = uniq.iter().map(|t| matcher.vocab.id(t)).collect();
    let e = if ids.is_empty() { Vec::new() } else { matcher.token_weights(&ids)? };
    let rows = uniq
        .into_iter()
        .zip(ids.iter().zip(&e))
        .map(|(token, (&id, &e))| WeightRow {
            resolved: if id == UNK { UNK_TOKEN.to_string() } else { token.clone() },
            token,
            e: e as f64,
        })
        .collect();
    let all: Vec<usize> = (0..matcher.vocab.len()).filter(|&i| i != PAD).collect();
    let all_e = matcher.token_weights(&all)?;
    let mean = all_e.iter().map(|&x| x as f64).sum::<f64>() / all_e.len() as f64;
    Ok((rows, mean))
}

/// The `n` in-vocabulary, non-stopword tokens with the highest idf (rarest
/// first, ties alphabetical).
pub fn highest_idf_tokens(stats: &TermStats, vocab: &Vocabulary, stopwords: &StopWords, n: usize) -> Vec<String> {
    let mut cands: Vec<(&String, usize)> = stats
        .df
        .iter()
        .filter(|(t, _)| vocab.contains(t) && !stopwords.contains(t) && t.chars().any(char::is_alphanumeric))
        .map(|(t, &df)| (t, df))
        .collect();
    cands.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    cands.into_iter().take(n).map(|(t, _)| t.clone()).collect()
}
