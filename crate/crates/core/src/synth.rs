//! Seeded synthetic paraphrase corpora for tests and desk-scale experiments.
//!
//! Each bag has a topic of a few content words. Its questions are built from
//! one template by token substitution: filler positions take random
//! function words, and topic words are occasionally swapped for a fixed
//! synonym. Topics share a "domain" word with many other bags, so lexical
//! retrieval returns plausible wrong bags.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::PairRecord;

/// Function words used as filler; all are in the built-in stopword list.
pub const FILLER_WORDS: [&str; 20] = [
    "the", "a", "is", "how", "do", "i", "what", "to", "of", "in", "for", "my", "can", "you",
    "does", "it", "on", "with", "and", "are",
];

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ra", "te", "zu", "pa", "ne", "so", "vi", "du", "ge", "ba", "ri", "mo",
    "ta", "fe", "lu", "ki", "na", "po", "se", "ha", "jo",
];

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_bags: usize,
    pub min_questions: usize,
    pub max_questions: usize,
    pub topic_words: usize,
    pub domains: usize,
    pub content_vocab: usize,
    /// Probability that a topic word is replaced by its synonym.
    pub synonym_rate: f64,
    /// Probability that a filler position is resampled.
    pub filler_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_bags: 500,
            min_questions: 4,
            max_questions: 7,
            topic_words: 4,
            domains: 40,
            content_vocab: 600,
            synonym_rate: 0.15,
            filler_rate: 0.5,
            seed: 7,
        }
    }
}

/// Generated bags (full paraphrase sets, before any query is held out).
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub bags: Vec<Vec<String>>,
}

fn make_word(rng: &mut ChaCha8Rng, used: &mut std::collections::HashSet<String>) -> String {
    loop {
        let n = rng.gen_range(2..4);
        let w: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("nonempty")).collect();
        if used.insert(w.clone()) {
            return w;
        }
    }
}

impl SynthCorpus {
    pub fn generate(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut used = std::collections::HashSet::new();
        let content: Vec<String> = (0..cfg.content_vocab).map(|_| make_word(&mut rng, &mut used)).collect();
        let synonyms: Vec<String> = (0..cfg.content_vocab).map(|_| make_word(&mut rng, &mut used)).collect();
        let domains = cfg.domains.clamp(1, cfg.content_vocab);
        let mut bags = Vec::with_capacity(cfg.n_bags);
        let mut seen_topics = std::collections::HashSet::new();
        while bags.len() < cfg.n_bags {
            // Topic: one domain word plus distinct content words.
            let mut topic = vec![rng.gen_range(0..domains)];
            while topic.len() < cfg.topic_words.max(1) {
                let w = rng.gen_range(domains..cfg.content_vocab);
                if !topic.contains(&w) {
                    topic.push(w);
                }
            }
            let mut key = topic.clone();
            key.sort_unstable();
            if !seen_topics.insert(key) {
                continue;
            }
            // Template: topic words in a fixed order with filler slots around them.
            let mut template: Vec<Option<usize>> = Vec::new();
            for (i, &w) in topic.iter().enumerate() {
                let fillers = if i == 0 { rng.gen_range(1..3) } else { rng.gen_range(0..2) };
                template.extend(std::iter::repeat(None).take(fillers));
                template.push(Some(w));
            }
            let base_fill: Vec<&str> = template.iter().map(|_| *FILLER_WORDS.choose(&mut rng).expect("nonempty")).collect();
            let n = rng.gen_range(cfg.min_questions..=cfg.max_questions);
            let mut questions: Vec<String> = Vec::with_capacity(n);
            let mut attempts = 0;
            while questions.len() < n && attempts < 50 * n {
                attempts += 1;
                let toks: Vec<&str> = template
                    .iter()
                    .zip(&base_fill)
                    .map(|(slot, &fill)| match slot {
                        Some(w) => {
                            if rng.gen_bool(cfg.synonym_rate) {
                                synonyms[*w].as_str()
                            } else {
                                content[*w].as_str()
                            }
                        }
                        None => {
                            if rng.gen_bool(cfg.filler_rate) {
                                FILLER_WORDS.choose(&mut rng).expect("nonempty")
                            } else {
                                fill
                            }
                        }
                    })
                    .collect();
                let mut q = toks.join(" ");
                q.push_str(" ?");
                if !questions.contains(&q) {
                    questions.push(q);
                }
            }
            bags.push(questions);
        }
        // Distinct topics can still collide on a question string; keep the
        // first bag that produced it.
        let mut owner = std::collections::HashSet::new();
        for b in &mut bags {
            b.retain(|q| owner.insert(q.clone()));
        }
        SynthCorpus { bags }
    }

    /// Duplicate pairs chaining each bag's questions in a shuffled order,
    /// plus `non_duplicates` random cross-bag pairs labelled 0.
    pub fn pairs(&self, non_duplicates: usize, seed: u64) -> Vec<PairRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for b in &self.bags {
            let mut order: Vec<&String> = b.iter().collect();
            order.shuffle(&mut rng);
            for w in order.windows(2) {
                out.push(PairRecord {
                    q1: w[0].clone(),
                    q2: w[1].clone(),
                    is_duplicate: true,
                });
            }
        }
        let nonempty: Vec<&Vec<String>> = self.bags.iter().filter(|b| !b.is_empty()).collect();
        if nonempty.len() >= 2 {
            for _ in 0..non_duplicates {
                let i = rng.gen_range(0..nonempty.len());
                let mut j = rng.gen_range(0..nonempty.len());
                while j == i {
                    j = rng.gen_range(0..nonempty.len());
                }
                out.push(PairRecord {
                    q1: nonempty[i].choose(&mut rng).expect("nonempty").clone(),
                    q2: nonempty[j].choose(&mut rng).expect("nonempty").clone(),
                    is_duplicate: false,
                });
            }
        }
        out.shuffle(&mut rng);
        out
    }

    /// Pair-file text with a header line.
    pub fn pair_file(&self, non_duplicates: usize, seed: u64) -> String {
        let mut s = String::from("q1\tq2\tis_duplicate\n");
        for p in self.pairs(non_duplicates, seed) {
            s.push_str(&format!("{}\t{}\t{}\n", p.q1, p.q2, u8::from(p.is_duplicate)));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{filter_and_split, group_duplicates};

    #[test]
    fn generation_is_seeded_and_groups_back() {
        let cfg = SynthConfig {
            n_bags: 30,
            ..SynthConfig::default()
        };
        let a = SynthCorpus::generate(&cfg);
        let b = SynthCorpus::generate(&cfg);
        assert_eq!(a.bags, b.bags);
        let bags = group_duplicates(&a.pairs(50, 1));
        let kept = filter_and_split(&bags, 3);
        assert_eq!(kept.len(), a.bags.iter().filter(|b| b.len() >= 3).count());
    }
}
