//! Forward computations on a [`Graph`]. Everything here is generic over the
//! scalar type so the same code is trained in f32 and gradient-checked in f64.

use rand::Rng;

use super::config::{ModelConfig, Variant};
use super::params::{Bound, CoverageMlp};
use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{QbmError, Result};
use crate::text::EncodedText;

/// A query and a bag, ready for the network. For the pairwise baseline the
/// bag holds one question; for the concatenation baseline it holds the one
/// long question.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBag {
    pub query: EncodedText,
    pub questions: Vec<EncodedText>,
    /// The keyword pseudo-question, present for variants that use it.
    pub keywords: Option<EncodedText>,
}

/// An encoded sentence: word embeddings, mask and pooled CNN encoding.
#[derive(Clone, Debug)]
pub struct Side {
    pub emb: Var,
    pub mask: Vec<bool>,
    pub h: Var,
}

/// Outputs of matching the query against one question.
#[derive(Clone, Copy, Debug)]
pub struct PairOut {
    /// `[h1; h2; h1-h2; h1*h2; hm]`
    pub r: Var,
    /// Cross-attention matrix, query rows by question columns.
    pub m: Var,
}

/// Coverage in both directions plus the weighted forms and their sums.
#[derive(Clone, Copy, Debug)]
pub struct CoverageOut {
    pub c_q: Var,
    pub c_b: Var,
    pub weighted_q: Var,
    pub weighted_b: Var,
    pub sum_q: Var,
    pub sum_b: Var,
}

impl CoverageOut {
    /// `[c̄_q; c̄_b; sum(c̄_q); sum(c̄_b)]`
    pub fn features(&self) -> [Var; 4] {
        [self.weighted_q, self.weighted_b, self.sum_q, self.sum_b]
    }
}

pub fn embed<T: Scalar>(g: &mut Graph<T>, p: &Bound, text: &EncodedText) -> Result<Var> {
    if text.is_empty() {
        return Err(QbmError::Degenerate("text has no valid token".into()));
    }
    g.gather(p.embedding, &text.ids, &text.mask)
}

/// Embeds a sentence and encodes it with the shared sentence CNN followed by
/// max-over-time pooling.
pub fn encode_side<T: Scalar>(g: &mut Graph<T>, p: &Bound, text: &EncodedText) -> Result<Side> {
    let emb = embed(g, p, text)?;
    let conv = g.conv_text(emb, p.conv1.0, p.conv1.1, &text.mask)?;
    let h = g.masked_max_pool(conv, &text.mask)?;
    Ok(Side {
        emb,
        mask: text.mask.clone(),
        h,
    })
}

/// Dot products of raw word embeddings. Padded rows are zero vectors, so
/// masked cells come out zero.
pub fn cross_attention<T: Scalar>(g: &mut Graph<T>, q_emb: Var, b_emb: Var) -> Result<Var> {
    let bt = g.transpose(b_emb)?;
    g.matmul(q_emb, bt)
}

/// Stages of conv, ReLU, mask and 2×2 max pooling over the interaction
/// grid, flattened row-major.
pub fn conv_grid<T: Scalar>(g: &mut Graph<T>, p: &Bound, m: Var, row_mask: &[bool], col_mask: &[bool]) -> Result<Var> {
    let (rows, cols) = g.value(m).dims2()?;
    let mut mask: Vec<bool> = (0..rows * cols).map(|i| row_mask[i / cols] && col_mask[i % cols]).collect();
    let (mut h, mut w) = (rows, cols);
    let mut x = g.reshape(m, vec![1, h, w])?;
    for &(k, b) in &p.conv2 {
        let c = g.value(k).shape()[0];
        x = g.conv2d(x, k, b)?;
        x = g.relu(x);
        let full: Vec<bool> = (0..c).flat_map(|_| mask.iter().copied()).collect();
        x = g.apply_mask(x, &full)?;
        x = g.max_pool2d(x)?;
        let (oh, ow) = (h / 2, w / 2);
        mask = (0..oh * ow)
            .map(|i| {
                let (y, xx) = (i / ow, i % ow);
                [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .any(|&(dy, dx)| mask[(2 * y + dy) * w + 2 * xx + dx])
            })
            .collect();
        (h, w) = (oh, ow);
    }
    let n = g.value(x).len();
    g.reshape(x, vec![n])
}

/// The pair representation for the query against one question.
pub fn pair_rep<T: Scalar>(g: &mut Graph<T>, p: &Bound, q: &Side, b: &Side) -> Result<PairOut> {
    let m = cross_attention(g, q.emb, b.emb)?;
    let hm = conv_grid(g, p, m, &q.mask, &b.mask)?;
    let diff = g.sub(q.h, b.h)?;
    let prod = g.mul(q.h, b.h)?;
    let r = g.concat(&[q.h, b.h, diff, prod, hm]);
    Ok(PairOut { r, m })
}

/// `[max; mean]` over the bag's pair representations.
pub fn aggregate_bag<T: Scalar>(g: &mut Graph<T>, reps: &[Var]) -> Result<Var> {
    if reps.is_empty() {
        return Err(QbmError::Degenerate("bag has no question".into()));
    }
    let stacked = g.stack_rows(reps)?;
    let all = vec![true; reps.len()];
    let mx = g.masked_max_pool(stacked, &all)?;
    let mean = g.masked_mean_pool(stacked, &all)?;
    Ok(g.concat(&[mx, mean]))
}

/// Per query word, the best match against any word of any question.
pub fn bag_to_query_coverage<T: Scalar>(g: &mut Graph<T>, ms: &[Var], q_mask: &[bool], b_masks: &[&[bool]]) -> Result<Var> {
    if ms.is_empty() {
        return Err(QbmError::Degenerate("bag has no question".into()));
    }
    let per: Vec<Var> = ms
        .iter()
        .zip(b_masks)
        .map(|(&m, bm)| g.row_max(m, q_mask, bm))
        .collect::<Result<_>>()?;
    let stacked = g.stack_rows(&per)?;
    g.masked_max_pool(stacked, &vec![true; per.len()])
}

/// Per question word, the best match against any query word; blocks of
/// length L in bag order, zero blocks for absent questions.
pub fn query_to_bag_coverage<T: Scalar>(
    g: &mut Graph<T>,
    ms: &[Var],
    q_mask: &[bool],
    b_masks: &[&[bool]],
    n_max: usize,
) -> Result<Var> {
    if ms.is_empty() {
        return Err(QbmError::Degenerate("bag has no question".into()));
    }
    if ms.len() > n_max {
        return Err(QbmError::Dimension(format!("bag of {} questions exceeds {n_max} slots", ms.len())));
    }
    let mut blocks = Vec::with_capacity(n_max);
    for (&m, bm) in ms.iter().zip(b_masks) {
        let mt = g.transpose(m)?;
        blocks.push(g.row_max(mt, bm, q_mask)?);
    }
    let len = b_masks[0].len();
    for _ in ms.len()..n_max {
        blocks.push(g.constant(Tensor::zeros(vec![len])));
    }
    Ok(g.concat(&blocks))
}

/// Raw token weights `e`, one per row of `emb`.
pub fn token_weights<T: Scalar>(g: &mut Graph<T>, mlp: &CoverageMlp, emb: Var) -> Result<Var> {
    let h = g.matmul(emb, mlp.w1)?;
    let h = g.add_row_bias(h, mlp.b1)?;
    let h = g.relu(h);
    let e = g.matmul(h, mlp.w2)?;
    let e = g.add_row_bias(e, mlp.b2)?;
    let n = g.value(e).len();
    g.reshape(e, vec![n])
}

/// Softmax of the token weights over valid positions, multiplied into the
/// coverage vector. Returns the weighted vector and its sum.
pub fn coverage_weighting<T: Scalar>(g: &mut Graph<T>, c: Var, e: Var, mask: &[bool]) -> Result<(Var, Var)> {
    if !mask.iter().any(|&m| m) {
        return Err(QbmError::Degenerate("coverage over no valid position".into()));
    }
    let a = g.masked_softmax(e, mask)?;
    let weighted = g.mul(a, c)?;
    let s = g.sum(weighted);
    Ok((weighted, s))
}

/// Coverage features of the query against a set of questions. The bag-side
/// softmax runs jointly over every valid token of every question.
pub fn coverage<T: Scalar>(
    g: &mut Graph<T>,
    mlp: &CoverageMlp,
    q: &Side,
    questions: &[&Side],
    ms: &[Var],
    n_max: usize,
) -> Result<CoverageOut> {
    let b_masks: Vec<&[bool]> = questions.iter().map(|s| s.mask.as_slice()).collect();
    let c_q = bag_to_query_coverage(g, ms, &q.mask, &b_masks)?;
    let c_b = query_to_bag_coverage(g, ms, &q.mask, &b_masks, n_max)?;
    let e_q = token_weights(g, mlp, q.emb)?;
    let (weighted_q, sum_q) = coverage_weighting(g, c_q, e_q, &q.mask)?;
    let len = b_masks[0].len();
    let mut e_blocks = Vec::with_capacity(n_max);
    let mut joint_mask = Vec::with_capacity(n_max * len);
    for s in questions {
        e_blocks.push(token_weights(g, mlp, s.emb)?);
        joint_mask.extend_from_slice(&s.mask);
    }
    for _ in questions.len()..n_max {
        e_blocks.push(g.constant(Tensor::zeros(vec![len])));
        joint_mask.extend(std::iter::repeat(false).take(len));
    }
    let e_b = g.concat(&e_blocks);
    let (weighted_b, sum_b) = coverage_weighting(g, c_b, e_b, &joint_mask)?;
    Ok(CoverageOut {
        c_q,
        c_b,
        weighted_q,
        weighted_b,
        sum_q,
        sum_b,
    })
}

/// Everything the classifier head needs, plus intermediate handles that
/// tests and diagnostics inspect.
#[derive(Clone, Debug)]
pub struct Features {
    pub x: Var,
    pub r_p: Option<Var>,
    pub bag_coverage: Option<CoverageOut>,
    pub r_r: Option<Var>,
    pub keyword_coverage: Option<CoverageOut>,
}

fn coverage_mlp(p: &Bound) -> Result<&CoverageMlp> {
    p.coverage
        .as_ref()
        .ok_or_else(|| QbmError::Config("variant needs coverage weights that are not present".into()))
}

/// Assembles the variant's feature vector.
pub fn features<T: Scalar>(g: &mut Graph<T>, p: &Bound, config: &ModelConfig, input: &EncodedBag) -> Result<Features> {
    let variant = config.variant;
    if input.questions.is_empty() {
        return Err(QbmError::Degenerate("bag has no question".into()));
    }
    let q = encode_side(g, p, &input.query)?;
    if matches!(variant, Variant::Qq | Variant::BagCon) {
        if input.questions.len() != 1 {
            return Err(QbmError::Dimension(format!(
                "{variant} scores one question at a time, got {}",
                input.questions.len()
            )));
        }
        let b = encode_side(g, p, &input.questions[0])?;
        let pair = pair_rep(g, p, &q, &b)?;
        return Ok(Features {
            x: pair.r,
            r_p: None,
            bag_coverage: None,
            r_r: None,
            keyword_coverage: None,
        });
    }
    if input.questions.len() > config.max_bag {
        return Err(QbmError::Dimension(format!(
            "bag of {} questions exceeds {} slots",
            input.questions.len(),
            config.max_bag
        )));
    }
    let sides: Vec<Side> = input.questions.iter().map(|t| encode_side(g, p, t)).collect::<Result<_>>()?;
    let pairs: Vec<PairOut> = sides.iter().map(|b| pair_rep(g, p, &q, b)).collect::<Result<_>>()?;
    let reps: Vec<Var> = pairs.iter().map(|o| o.r).collect();
    let r_p = aggregate_bag(g, &reps)?;
    let mut parts = vec![r_p];

    let mut bag_coverage = None;
    if variant.bag_coverage() {
        let ms: Vec<Var> = pairs.iter().map(|o| o.m).collect();
        let refs: Vec<&Side> = sides.iter().collect();
        let cov = coverage(g, coverage_mlp(p)?, &q, &refs, &ms, config.max_bag)?;
        parts.extend(cov.features());
        bag_coverage = Some(cov);
    }

    let (mut r_r, mut keyword_coverage) = (None, None);
    if variant.keyword_rep() {
        let kw = input
            .keywords
            .as_ref()
            .ok_or_else(|| QbmError::Degenerate("bag has no keyword pseudo-question".into()))?;
        let b_r = encode_side(g, p, kw)?;
        let pair = pair_rep(g, p, &q, &b_r)?;
        parts.push(pair.r);
        r_r = Some(pair.r);
        if variant.keyword_coverage() {
            let cov = coverage(g, coverage_mlp(p)?, &q, &[&b_r], &[pair.m], 1)?;
            parts.extend(cov.features());
            keyword_coverage = Some(cov);
        }
    }
    Ok(Features {
        x: g.concat(&parts),
        r_p: Some(r_p),
        bag_coverage,
        r_r,
        keyword_coverage,
    })
}

/// Dropout, one ReLU hidden layer and two output logits.
pub fn head<T: Scalar, R: Rng>(g: &mut Graph<T>, p: &Bound, x: Var, dropout: f64, training: bool, rng: &mut R) -> Result<Var> {
    let n = g.value(x).len();
    let x = g.dropout(x, dropout, training, rng)?;
    let x = g.reshape(x, vec![1, n])?;
    let h = g.matmul(x, p.head[0])?;
    let h = g.add_row_bias(h, p.head[1])?;
    let h = g.relu(h);
    let o = g.matmul(h, p.head[2])?;
    let o = g.add_row_bias(o, p.head[3])?;
    g.reshape(o, vec![2])
}

/// Two logits for (no match, match).
pub fn logits<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    p: &Bound,
    config: &ModelConfig,
    input: &EncodedBag,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let f = features(g, p, config, input)?;
    head(g, p, f.x, config.dropout, training, rng)
}

/// How per-question probabilities of the pairwise baseline become a bag score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QqMode {
    Max,
    Mean,
}

impl QqMode {
    pub fn name(self) -> &'static str {
        match self {
            QqMode::Max => "qq-max",
            QqMode::Mean => "qq-mean",
        }
    }
}

/// Bag score from per-question match probabilities.
pub fn baseline_qq(probabilities: &[f64], mode: QqMode) -> Result<f64> {
    if probabilities.is_empty() {
        return Err(QbmError::Degenerate("bag has no question".into()));
    }
    Ok(match mode {
        QqMode::Max => probabilities.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        QqMode::Mean => {
            let mut v = probabilities.to_vec();
            crate::autodiff::ordered_sum(&mut v) / v.len() as f64
        }
    })
}
