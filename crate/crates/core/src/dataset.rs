//! Query-bag dataset construction: duplicate pairs are grouped into bags,
//! small bags dropped, one question per bag held out as the query, and
//! lexically similar bags mined as negatives.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{QbmError, Result};
use crate::index::InvertedIndex;
use crate::union_find::UnionFind;

pub const MAX_BAG_SIZE: usize = 5;
pub const DEFAULT_MIN_BAG_SIZE: usize = 3;
pub const RETRIEVAL_DEPTH: usize = 20;
pub const TRAIN_NEGATIVES: usize = 1;
pub const TEST_NEGATIVES: usize = 9;
pub const QUESTION_SEPARATOR: &str = "||";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairRecord {
    pub q1: String,
    pub q2: String,
    pub is_duplicate: bool,
}

/// Parses `q1<TAB>q2<TAB>0|1` lines. A first line whose label column is
/// not 0/1 is treated as a header and skipped.
pub fn parse_pairs(text: &str, source: &str) -> Result<Vec<PairRecord>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let label = fields.get(2).map(|s| s.trim());
        if idx == 0 && !matches!(label, Some("0") | Some("1")) {
            continue;
        }
        if fields.len() != 3 {
            return Err(QbmError::parse(
                source,
                lineno,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let is_duplicate = match label {
            Some("1") => true,
            Some("0") => false,
            other => {
                return Err(QbmError::parse(source, lineno, format!("label must be 0 or 1, got {other:?}")));
            }
        };
        let (q1, q2) = (fields[0].trim(), fields[1].trim());
        if q1.is_empty() || q2.is_empty() {
            return Err(QbmError::parse(source, lineno, "empty question text"));
        }
        out.push(PairRecord {
            q1: q1.to_string(),
            q2: q2.to_string(),
            is_duplicate,
        });
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let text = fs::read_to_string(path).map_err(|e| QbmError::io(path, e))?;
    parse_pairs(&text, &path.display().to_string())
}

/// A set of paraphrase questions sharing one answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bag {
    pub id: usize,
    pub questions: Vec<String>,
}

/// Connected components of the duplicate graph. Questions are identified by
/// exact string. Each bag's questions are sorted; bags are ordered by their
/// smallest question and numbered in that order, so the result does not
/// depend on pair order.
pub fn group_duplicates(pairs: &[PairRecord]) -> Vec<Bag> {
    let mut names: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.q1.as_str(), p.q2.as_str()])
        .collect();
    names.sort_unstable();
    names.dedup();
    let id_of: HashMap<&str, usize> = names.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut uf = UnionFind::new(names.len());
    for p in pairs.iter().filter(|p| p.is_duplicate) {
        uf.union(id_of[p.q1.as_str()], id_of[p.q2.as_str()]);
    }
    // Node ids follow sorted string order, so sets() yields sorted members
    // and orders sets by smallest question.
    uf.sets()
        .into_iter()
        .enumerate()
        .map(|(id, members)| Bag {
            id,
            questions: members.into_iter().map(|m| names[m].to_string()).collect(),
        })
        .collect()
}

/// A bag with one of its questions held out as the query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryBag {
    pub query: String,
    pub bag: Bag,
}

/// Drops bags smaller than `min_size`; the lexicographically smallest
/// question becomes the query and the next (at most five) form the bag.
pub fn filter_and_split(bags: &[Bag], min_size: usize) -> Vec<QueryBag> {
    bags.iter()
        .filter(|b| b.questions.len() >= min_size.max(2))
        .map(|b| {
            let mut qs = b.questions.clone();
            qs.sort();
            let query = qs.remove(0);
            qs.truncate(MAX_BAG_SIZE);
            QueryBag {
                query,
                bag: Bag {
                    id: b.id,
                    questions: qs,
                },
            }
        })
        .collect()
}

/// SplitMix64 finaliser, used to derive per-instance seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Retrieval-based negative mining over every question of every bag.
pub struct NegativeSampler<'a> {
    bags: &'a [Bag],
    index: InvertedIndex,
    doc_bag: Vec<usize>,
    by_id: HashMap<usize, usize>,
}

impl<'a> NegativeSampler<'a> {
    pub fn new(bags: &'a [Bag]) -> Self {
        let mut docs = Vec::new();
        let mut doc_bag = Vec::new();
        for (pos, b) in bags.iter().enumerate() {
            for q in &b.questions {
                docs.push(q.as_str());
                doc_bag.push(pos);
            }
        }
        NegativeSampler {
            bags,
            index: InvertedIndex::build(&docs),
            doc_bag,
            by_id: bags.iter().enumerate().map(|(i, b)| (b.id, i)).collect(),
        }
    }

    pub fn index(&self) -> &InvertedIndex {
        &self.index
    }

    /// Draws `k` distinct negative bag ids for `query`.
    ///
    /// The top retrieved questions that are not in the positive bag are
    /// mapped to their bags (first occurrence kept) and `k` of those are
    /// drawn uniformly. If fewer than `k` exist, the rest are drawn
    /// uniformly from all other bags. Bags sharing any question string with
    /// the positive bag are never returned.
    pub fn sample(&self, query: &str, positive_id: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
        if self.bags.len() < k + 1 {
            return Err(QbmError::DatasetTooSmall(format!(
                "{} bags cannot supply {k} negatives plus a positive",
                self.bags.len()
            )));
        }
        let pos = *self
            .by_id
            .get(&positive_id)
            .ok_or_else(|| QbmError::Contract(format!("unknown positive bag {positive_id}")))?;
        let positive: HashSet<&str> = self.bags[pos].questions.iter().map(String::as_str).collect();
        let pure = |b: usize| b != pos && self.bags[b].questions.iter().all(|q| !positive.contains(q.as_str()));

        let mut retrieved: Vec<usize> = Vec::new();
        for (doc, _) in self.index.top_k_similar(query, RETRIEVAL_DEPTH) {
            let b = self.doc_bag[doc];
            if pure(b) && !retrieved.contains(&b) {
                retrieved.push(b);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen: Vec<usize> = if retrieved.len() >= k {
            sample(&mut rng, retrieved.len(), k)
                .into_iter()
                .map(|i| retrieved[i])
                .collect()
        } else {
            retrieved
        };
        if chosen.len() < k {
            let pool: Vec<usize> = (0..self.bags.len())
                .filter(|&b| pure(b) && !chosen.contains(&b))
                .collect();
            let need = k - chosen.len();
            if pool.len() < need {
                return Err(QbmError::DatasetTooSmall(format!(
                    "only {} candidate negatives for {k} requested",
                    pool.len() + chosen.len()
                )));
            }
            chosen.extend(sample(&mut rng, pool.len(), need).into_iter().map(|i| pool[i]));
        }
        Ok(chosen.into_iter().map(|b| self.bags[b].id).collect())
    }
}

/// One candidate bag of an instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub bag_id: usize,
    pub positive: bool,
    pub questions: Vec<String>,
}

/// A query with its candidate bags, exactly one of which is positive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryBagInstance {
    pub query_id: usize,
    pub query: String,
    pub candidates: Vec<Candidate>,
}

impl QueryBagInstance {
    pub fn positive_index(&self) -> usize {
        self.candidates
            .iter()
            .position(|c| c.positive)
            .expect("instance has a positive candidate")
    }
}

/// One (query, bag, label) record for binary training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledPair<'a> {
    pub query: &'a str,
    pub questions: &'a [String],
    pub label: bool,
}

/// Flattens instances into binary (query, bag, label) records.
pub fn labeled_pairs(instances: &[QueryBagInstance]) -> Vec<LabeledPair<'_>> {
    instances
        .iter()
        .flat_map(|inst| {
            inst.candidates.iter().map(move |c| LabeledPair {
                query: &inst.query,
                questions: &c.questions,
                label: c.positive,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 80/10/10 of `n` queries.
    pub fn proportional(n: usize) -> Self {
        let valid = n / 10;
        let test = n / 10;
        SplitSizes {
            train: n - valid - test,
            valid,
            test,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<QueryBagInstance>,
    pub valid: Vec<QueryBagInstance>,
    pub test: Vec<QueryBagInstance>,
}

fn build_instance(qb: &QueryBag, sampler: &NegativeSampler, bags: &HashMap<usize, &Bag>, k: usize, seed: u64) -> Result<QueryBagInstance> {
    let inst_seed = mix_seed(seed, qb.bag.id as u64);
    let negatives = sampler.sample(&qb.query, qb.bag.id, k, inst_seed)?;
    let mut candidates = vec![Candidate {
        bag_id: qb.bag.id,
        positive: true,
        questions: qb.bag.questions.clone(),
    }];
    candidates.extend(negatives.into_iter().map(|id| Candidate {
        bag_id: id,
        positive: false,
        questions: bags[&id].questions.clone(),
    }));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(inst_seed, 0x5348_5546));
    candidates.shuffle(&mut rng);
    Ok(QueryBagInstance {
        query_id: qb.bag.id,
        query: qb.query.clone(),
        candidates,
    })
}

/// Assigns queries to train/valid/test (disjoint by query) and builds their
/// instances: one negative per query for train and valid, nine for test.
/// Candidate order within an instance is shuffled under the seed.
pub fn emit_splits(query_bags: &[QueryBag], sizes: SplitSizes, seed: u64) -> Result<Splits> {
    let total = sizes.train + sizes.valid + sizes.test;
    if total > query_bags.len() {
        return Err(QbmError::Sizing(format!(
            "requested {}/{}/{} queries but only {} are available",
            sizes.train,
            sizes.valid,
            sizes.test,
            query_bags.len()
        )));
    }
    let bag_list: Vec<Bag> = query_bags.iter().map(|qb| qb.bag.clone()).collect();
    let sampler = NegativeSampler::new(&bag_list);
    let by_id: HashMap<usize, &Bag> = bag_list.iter().map(|b| (b.id, b)).collect();

    let mut order: Vec<usize> = (0..query_bags.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let build = |range: std::ops::Range<usize>, k: usize| -> Result<Vec<QueryBagInstance>> {
        order[range]
            .iter()
            .map(|&i| build_instance(&query_bags[i], &sampler, &by_id, k, seed))
            .collect()
    };
    let (a, b) = (sizes.train, sizes.train + sizes.valid);
    Ok(Splits {
        train: build(0..a, TRAIN_NEGATIVES)?,
        valid: build(a..b, TRAIN_NEGATIVES)?,
        test: build(b..total, TEST_NEGATIVES)?,
    })
}

fn check_field(s: &str, what: &str) -> Result<()> {
    if s.contains('\t') || s.contains('\n') || s.contains('\r') {
        return Err(QbmError::InstanceFormat(format!("{what} contains a tab or newline: {s:?}")));
    }
    Ok(())
}

fn join_questions(qs: &[String]) -> Result<String> {
    for q in qs {
        check_field(q, "question")?;
        if q.contains(QUESTION_SEPARATOR) {
            return Err(QbmError::InstanceFormat(format!("question contains '||': {q:?}")));
        }
    }
    Ok(qs.join(QUESTION_SEPARATOR))
}

/// Serialises instances, one candidate per line:
/// `query_id<TAB>query<TAB>bag_id<TAB>label<TAB>q1||q2||…`.
pub fn format_instances(instances: &[QueryBagInstance]) -> Result<String> {
    let mut out = String::new();
    for inst in instances {
        check_field(&inst.query, "query")?;
        for c in &inst.candidates {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                inst.query_id,
                inst.query,
                c.bag_id,
                u8::from(c.positive),
                join_questions(&c.questions)?
            )
            .expect("writing to a String");
        }
    }
    Ok(out)
}

pub fn write_instances(path: &Path, instances: &[QueryBagInstance]) -> Result<()> {
    fs::write(path, format_instances(instances)?).map_err(|e| QbmError::io(path, e))
}

fn split_questions(field: &str, source: &str, lineno: usize) -> Result<Vec<String>> {
    let qs: Vec<String> = field.split(QUESTION_SEPARATOR).map(str::to_string).collect();
    if qs.iter().any(|q| q.trim().is_empty()) {
        return Err(QbmError::parse(source, lineno, "empty question in bag"));
    }
    Ok(qs)
}

/// Parses an instance file; consecutive lines sharing a query id form one
/// instance, which must contain exactly one positive.
pub fn parse_instances(text: &str, source: &str) -> Result<Vec<QueryBagInstance>> {
    let mut out: Vec<QueryBagInstance> = Vec::new();
    let mut start_line = 0;
    let finish = |inst: &QueryBagInstance, line: usize| -> Result<()> {
        let n = inst.candidates.iter().filter(|c| c.positive).count();
        if n != 1 {
            return Err(QbmError::parse(
                source,
                line,
                format!("query {} has {n} positive candidates", inst.query_id),
            ));
        }
        Ok(())
    };
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(QbmError::parse(source, lineno, format!("expected 5 fields, found {}", f.len())));
        }
        let query_id: usize = f[0]
            .parse()
            .map_err(|_| QbmError::parse(source, lineno, format!("bad query id {:?}", f[0])))?;
        let bag_id: usize = f[2]
            .parse()
            .map_err(|_| QbmError::parse(source, lineno, format!("bad bag id {:?}", f[2])))?;
        let positive = match f[3] {
            "1" => true,
            "0" => false,
            other => return Err(QbmError::parse(source, lineno, format!("label must be 0 or 1, got {other:?}"))),
        };
        let candidate = Candidate {
            bag_id,
            positive,
            questions: split_questions(f[4], source, lineno)?,
        };
        match out.last_mut() {
            Some(last) if last.query_id == query_id => {
                if last.query != f[1] {
                    return Err(QbmError::parse(source, lineno, "query text differs within one query id"));
                }
                last.candidates.push(candidate);
            }
            _ => {
                if let Some(last) = out.last() {
                    finish(last, start_line)?;
                }
                start_line = lineno;
                out.push(QueryBagInstance {
                    query_id,
                    query: f[1].to_string(),
                    candidates: vec![candidate],
                });
            }
        }
    }
    if let Some(last) = out.last() {
        finish(last, start_line)?;
    }
    Ok(out)
}

pub fn read_instances(path: &Path) -> Result<Vec<QueryBagInstance>> {
    let text = fs::read_to_string(path).map_err(|e| QbmError::io(path, e))?;
    parse_instances(&text, &path.display().to_string())
}

/// `bag_id<TAB>q1||q2||…` per line.
pub fn format_bags(bags: &[Bag]) -> Result<String> {
    let mut out = String::new();
    for b in bags {
        writeln!(out, "{}\t{}", b.id, join_questions(&b.questions)?).expect("writing to a String");
    }
    Ok(out)
}

pub fn parse_bags(text: &str, source: &str) -> Result<Vec<Bag>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 2 {
            return Err(QbmError::parse(source, lineno, format!("expected 2 fields, found {}", f.len())));
        }
        let id = f[0]
            .parse()
            .map_err(|_| QbmError::parse(source, lineno, format!("bad bag id {:?}", f[0])))?;
        out.push(Bag {
            id,
            questions: split_questions(f[1], source, lineno)?,
        });
    }
    Ok(out)
}

pub fn read_bags(path: &Path) -> Result<Vec<Bag>> {
    let text = fs::read_to_string(path).map_err(|e| QbmError::io(path, e))?;
    parse_bags(&text, &path.display().to_string())
}

/// Summary of a dataset build.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetStats {
    pub components: usize,
    pub kept_bags: usize,
    /// Histogram of bag sizes (after holding out the query and capping).
    pub size_histogram: BTreeMap<usize, usize>,
    pub train_records: usize,
    pub valid_records: usize,
    pub test_records: usize,
}

impl DatasetStats {
    pub fn new(components: usize, kept: &[QueryBag], splits: &Splits) -> Self {
        let mut hist = BTreeMap::new();
        for qb in kept {
            *hist.entry(qb.bag.questions.len()).or_insert(0) += 1;
        }
        let records = |v: &[QueryBagInstance]| v.iter().map(|i| i.candidates.len()).sum();
        DatasetStats {
            components,
            kept_bags: kept.len(),
            size_histogram: hist,
            train_records: records(&splits.train),
            valid_records: records(&splits.valid),
            test_records: records(&splits.test),
        }
    }

    pub fn summary_line(&self) -> String {
        let hist: Vec<String> = self.size_histogram.iter().map(|(s, c)| format!("{s}:{c}")).collect();
        format!(
            "components={} bags={} sizes={{{}}} train_records={} valid_records={} test_records={}",
            self.components,
            self.kept_bags,
            hist.join(","),
            self.train_records,
            self.valid_records,
            self.test_records
        )
    }
}
