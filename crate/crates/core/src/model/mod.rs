//! The query-bag matching network and its baselines.

mod config;
pub mod forward;
mod params;

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;

use rand::rngs::mock::StepRng;

pub use config::{ModelConfig, Variant};
pub use forward::{baseline_qq, EncodedBag, QqMode};
pub use params::{Bound, CoverageMlp, ModelParams};

use crate::autodiff::{positive_probability, Graph};
use crate::error::{QbmError, Result};
use crate::index::{StopWords, TermStats};
use crate::text::{encode, encode_tokens, tokenize, EncodedText, Vocabulary};

/// A trained or freshly initialised network together with everything
/// needed to encode raw text for it.
#[derive(Clone, Debug)]
pub struct Matcher {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub term_stats: TermStats,
    pub params: ModelParams<f32>,
    stopwords: StopWords,
}

impl Matcher {
    pub fn new(config: ModelConfig, vocab: Vocabulary, term_stats: TermStats, params: ModelParams<f32>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes(vocab.len());
        let ok = expected.len() == params.tensors().len()
            && expected.iter().zip(params.tensors()).all(|((_, s), t)| t.shape() == s.as_slice());
        if !ok {
            return Err(QbmError::Config("parameter shapes do not match the model config".into()));
        }
        Ok(Matcher {
            config,
            vocab,
            term_stats,
            params,
            stopwords: StopWords::english(),
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn stopwords(&self) -> &StopWords {
        &self.stopwords
    }

    /// The bag's top TF-IDF terms that the vocabulary knows. When none is
    /// known, the single most frequent non-stopword token stands in.
    pub fn keyword_tokens<S: AsRef<str>>(&self, questions: &[S]) -> Result<Vec<String>> {
        let known: Vec<String> = self
            .term_stats
            .top_terms(questions, usize::MAX, &self.stopwords)
            .into_iter()
            .filter(|t| self.vocab.contains(t))
            .take(self.config.top_terms)
            .collect();
        if !known.is_empty() {
            return Ok(known);
        }
        let mut tf: BTreeMap<String, usize> = BTreeMap::new();
        for q in questions {
            for t in tokenize(q.as_ref()) {
                if !self.stopwords.contains(&t) {
                    *tf.entry(t).or_default() += 1;
                }
            }
        }
        // BTreeMap iterates alphabetically, so max_by_key keeps the last of
        // equal counts; reverse to prefer the first.
        tf.into_iter()
            .rev()
            .max_by_key(|(_, c)| *c)
            .map(|(t, _)| vec![t])
            .ok_or_else(|| QbmError::Degenerate("bag has no non-stopword token".into()))
    }

    pub fn keywords<S: AsRef<str>>(&self, questions: &[S]) -> Result<EncodedText> {
        Ok(encode_tokens(&self.keyword_tokens(questions)?, &self.vocab, self.config.max_len))
    }

    /// Encodes a query against a bag for this variant. Empty questions are
    /// dropped and bags are cut to the slot count. For the pairwise
    /// baseline use [`Matcher::encode_pair`] per question instead.
    pub fn encode_bag<S: AsRef<str>>(&self, query: &str, questions: &[S]) -> Result<EncodedBag> {
        let len = self.config.seq_len();
        let q = encode(query, &self.vocab, len);
        if q.is_empty() {
            return Err(QbmError::Degenerate("query has no token".into()));
        }
        let kept: Vec<&str> = questions
            .iter()
            .map(|s| s.as_ref())
            .filter(|s| !tokenize(s).is_empty())
            .collect();
        if kept.is_empty() {
            return Err(QbmError::Degenerate("bag has no nonempty question".into()));
        }
        let (questions, keywords) = match self.config.variant {
            Variant::BagCon => (vec![encode(&kept.join(" "), &self.vocab, len)], None),
            Variant::Qq => {
                return Err(QbmError::Config("the pairwise baseline scores questions one at a time".into()));
            }
            v => {
                let kept = &kept[..kept.len().min(self.config.max_bag)];
                let enc = kept.iter().map(|s| encode(s, &self.vocab, len)).collect();
                let kw = if v.keyword_rep() { Some(self.keywords(kept)?) } else { None };
                (enc, kw)
            }
        };
        Ok(EncodedBag {
            query: q,
            questions,
            keywords,
        })
    }

    /// A single query-question input.
    pub fn encode_pair(&self, query: &str, question: &str) -> Result<EncodedBag> {
        let len = self.config.seq_len();
        let q = encode(query, &self.vocab, len);
        let b = encode(question, &self.vocab, len);
        if q.is_empty() || b.is_empty() {
            return Err(QbmError::Degenerate("empty query or question".into()));
        }
        Ok(EncodedBag {
            query: q,
            questions: vec![b],
            keywords: None,
        })
    }

    /// Match probability in evaluation mode.
    pub fn probability(&self, input: &EncodedBag) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        // Dropout is off in evaluation, so the generator is never drawn from.
        let mut rng = StepRng::new(0, 0);
        let out = forward::logits(&mut g, &p, &self.config, input, false, &mut rng)?;
        Ok(positive_probability(g.value(out).data()) as f64)
    }

    /// Score of a bag for a query. The pairwise baseline aggregates its
    /// per-question probabilities with `mode`; other variants ignore it.
    pub fn score<S: AsRef<str>>(&self, query: &str, questions: &[S], mode: QqMode) -> Result<f64> {
        if self.config.variant == Variant::Qq {
            let probs: Vec<f64> = questions
                .iter()
                .filter(|s| !tokenize(s.as_ref()).is_empty())
                .map(|s| self.probability(&self.encode_pair(query, s.as_ref())?))
                .collect::<Result<_>>()?;
            return baseline_qq(&probs, mode);
        }
        self.probability(&self.encode_bag(query, questions)?)
    }

    /// Raw token weights `e` of the coverage-weighting network for the given
    /// vocabulary ids.
    pub fn token_weights(&self, ids: &[usize]) -> Result<Vec<f32>> {
        if !self.config.variant.has_coverage_mlp() {
            return Err(QbmError::Capability(format!(
                "variant {} has no coverage weighting",
                self.config.variant
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let mlp = p.coverage.expect("variant has coverage weights");
        let emb = g.gather(p.embedding, ids, &vec![true; ids.len()])?;
        let e = forward::token_weights(&mut g, &mlp, emb)?;
        Ok(g.value(e).data().to_vec())
    }
}
