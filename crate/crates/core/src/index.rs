//! TF-IDF inverted index over questions: cosine retrieval for negative
//! mining, and per-bag keyword selection.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{QbmError, Result};
use crate::text::{tokenize, PAD_TOKEN, UNK_TOKEN};

const ENGLISH_STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "all", "am", "an", "and", "any", "are", "as", "at",
    "be", "because", "been", "before", "being", "below", "between", "both", "but", "by", "can",
    "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for", "from",
    "further", "had", "has", "have", "having", "he", "her", "here", "hers", "him", "his", "how",
    "i", "if", "in", "into", "is", "it", "its", "itself", "just", "me", "more", "most", "my",
    "no", "nor", "not", "now", "of", "off", "on", "once", "only", "or", "other", "our", "ours",
    "out", "over", "own", "same", "she", "should", "so", "some", "such", "than", "that", "the",
    "their", "theirs", "them", "then", "there", "these", "they", "this", "those", "through", "to",
    "too", "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "?", ".", ",",
    "!", "'", "\"", "-", "(", ")", ":", ";", "s", "t",
];

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StopWords(HashSet<String>);

impl StopWords {
    pub fn english() -> Self {
        StopWords(ENGLISH_STOPWORDS.iter().map(|s| s.to_string()).collect())
    }

    pub fn empty() -> Self {
        StopWords(HashSet::new())
    }

    /// One token per line; blank lines ignored. Entries are lowercased.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| QbmError::io(path, e))?;
        Ok(StopWords(
            text.lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        ))
    }

    pub fn extend(&mut self, other: StopWords) {
        self.0.extend(other.0);
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

/// A token and its tf·idf weight within some scope.
#[derive(Clone, Debug, PartialEq)]
pub struct TermScore {
    pub token: String,
    pub weight: f64,
}

/// Document frequencies over a corpus; enough to compute idf anywhere.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermStats {
    pub n_docs: usize,
    pub df: BTreeMap<String, usize>,
}

impl TermStats {
    /// Smoothed inverse document frequency, ln((N+1)/(df+1)) + 1.
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.df.get(token).copied().unwrap_or(0);
        ((self.n_docs as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0
    }

    /// Keywords of a bag: tf counted over all its questions, stopwords and
    /// special tokens excluded, highest tf·idf first, ties alphabetical.
    pub fn top_term_scores<S: AsRef<str>>(&self, questions: &[S], m: usize, stopwords: &StopWords) -> Vec<TermScore> {
        let mut tf: BTreeMap<String, usize> = BTreeMap::new();
        for q in questions {
            for tok in tokenize(q.as_ref()) {
                if tok == PAD_TOKEN || tok == UNK_TOKEN || stopwords.contains(&tok) {
                    continue;
                }
                *tf.entry(tok).or_default() += 1;
            }
        }
        let mut scored: Vec<TermScore> = tf
            .into_iter()
            .map(|(token, c)| {
                let weight = c as f64 * self.idf(&token);
                TermScore { token, weight }
            })
            .collect();
        scored.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.token.cmp(&b.token)));
        scored.truncate(m);
        scored
    }

    pub fn top_terms<S: AsRef<str>>(&self, questions: &[S], m: usize, stopwords: &StopWords) -> Vec<String> {
        self.top_term_scores(questions, m, stopwords)
            .into_iter()
            .map(|t| t.token)
            .collect()
    }
}

/// Postings per token, sorted by document id, with precomputed document
/// vector norms. Document ids are input positions.
#[derive(Clone, Debug, Default)]
pub struct InvertedIndex {
    postings: HashMap<String, Vec<(usize, u32)>>,
    norms: Vec<f64>,
    stats: TermStats,
}

fn term_counts(text: &str) -> BTreeMap<String, u32> {
    let mut tf = BTreeMap::new();
    for tok in tokenize(text) {
        *tf.entry(tok).or_default() += 1;
    }
    tf
}

impl InvertedIndex {
    pub fn build<S: AsRef<str>>(docs: &[S]) -> Self {
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let doc_tfs: Vec<BTreeMap<String, u32>> = docs.iter().map(|d| term_counts(d.as_ref())).collect();
        for (id, tf) in doc_tfs.iter().enumerate() {
            for (tok, &c) in tf {
                postings.entry(tok.clone()).or_default().push((id, c));
            }
        }
        let stats = TermStats {
            n_docs: docs.len(),
            df: postings.iter().map(|(t, p)| (t.clone(), p.len())).collect(),
        };
        // Norms summed in token order, the same order scoring uses.
        let norms = doc_tfs
            .iter()
            .map(|tf| {
                tf.iter()
                    .map(|(t, &c)| {
                        let w = c as f64 * stats.idf(t);
                        w * w
                    })
                    .fold(0.0, |a, b| a + b)
                    .sqrt()
            })
            .collect();
        InvertedIndex {
            postings,
            norms,
            stats,
        }
    }

    pub fn doc_count(&self) -> usize {
        self.stats.n_docs
    }

    pub fn norm(&self, doc: usize) -> f64 {
        self.norms[doc]
    }

    pub fn postings(&self, token: &str) -> &[(usize, u32)] {
        self.postings.get(token).map_or(&[], Vec::as_slice)
    }

    pub fn stats(&self) -> &TermStats {
        &self.stats
    }

    pub fn idf(&self, token: &str) -> f64 {
        self.stats.idf(token)
    }

    /// Cosine similarity between TF-IDF vectors. Only documents with a
    /// nonzero score are returned, best first, ties by ascending doc id.
    pub fn top_k_similar(&self, query: &str, k: usize) -> Vec<(usize, f64)> {
        let qtf: Vec<(String, f64)> = term_counts(query)
            .into_iter()
            .filter(|(t, _)| self.postings.contains_key(t))
            .map(|(t, c)| {
                let w = c as f64 * self.idf(&t);
                (t, w)
            })
            .collect();
        if qtf.is_empty() {
            return Vec::new();
        }
        let qnorm = qtf.iter().map(|(_, w)| w * w).fold(0.0, |a, b| a + b).sqrt();
        let mut dots: BTreeMap<usize, f64> = BTreeMap::new();
        for (tok, qw) in &qtf {
            let idf = self.idf(tok);
            for &(doc, c) in self.postings(tok) {
                *dots.entry(doc).or_insert(0.0) += qw * (c as f64 * idf);
            }
        }
        let mut scored: Vec<(usize, f64)> = dots
            .into_iter()
            .filter(|&(d, dot)| dot > 0.0 && self.norms[d] > 0.0)
            .map(|(d, dot)| (d, dot / (qnorm * self.norms[d])))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }
}
