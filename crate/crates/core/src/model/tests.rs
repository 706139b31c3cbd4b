use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::{self, EncodedBag, Side};
use super::*;
use crate::autodiff::{grad_check, Graph, Tensor, Var, DEFAULT_STEP};
use crate::index::InvertedIndex;
use crate::text::{encode_tokens, EmbeddingTable, PAD};

const TOL: f64 = 1e-10;

fn vocab(n: usize) -> Vocabulary {
    Vocabulary::from_tokens((0..n).map(|i| format!("w{i}")))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Params with random embeddings and nonzero biases everywhere so that no
/// block is trivially zero.
fn rand_params(config: &ModelConfig, vocab_size: usize, seed: u64) -> ModelParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut emb = rand_tensor(&mut rng, vec![vocab_size, config.embed_dim], 0.5);
    emb.data_mut()[..config.embed_dim].iter_mut().for_each(|v| *v = 0.0);
    let mut p = ModelParams::init(config, emb, seed).unwrap();
    for (name, t) in p.names().to_vec().into_iter().zip(p.tensors_mut()) {
        if name != "embedding" {
            *t = rand_tensor(&mut rng, t.shape().to_vec(), 0.5);
        }
    }
    p
}

fn rand_text(rng: &mut ChaCha8Rng, vocab: &Vocabulary, max_len: usize) -> EncodedText {
    let n = rng.gen_range(1..=max_len);
    let toks: Vec<String> = (0..n).map(|_| format!("w{}", rng.gen_range(0..vocab.len() - 2))).collect();
    encode_tokens(&toks, vocab, max_len)
}

fn rand_bag(rng: &mut ChaCha8Rng, vocab: &Vocabulary, config: &ModelConfig, n: usize) -> EncodedBag {
    let len = config.max_len;
    EncodedBag {
        query: rand_text(rng, vocab, len),
        questions: (0..n).map(|_| rand_text(rng, vocab, len)).collect(),
        keywords: Some(rand_text(rng, vocab, len)),
    }
}

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        max_len: 8,
        max_bag: 3,
        embed_dim: 5,
        conv1_filters: 3,
        conv1_width: 3,
        conv2_filters: vec![2, 3],
        conv2_kernel: 3,
        coverage_hidden: 4,
        mlp_hidden: 5,
        dropout: 0.5,
        bagcon_len: 16,
        top_terms: 10,
        variant,
    }
}

fn vals(g: &Graph<f64>, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

fn emb_rows(table: &Tensor<f64>, t: &EncodedText) -> Vec<Vec<f64>> {
    let d = table.shape()[1];
    t.ids
        .iter()
        .zip(&t.mask)
        .map(|(&id, &m)| if m { table.data()[id * d..(id + 1) * d].to_vec() } else { vec![0.0; d] })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

// ---------------------------------------------------------------- oracles

/// Sentence CNN with ReLU and max over valid positions, by explicit loops.
fn oracle_sentence(x: &[Vec<f64>], mask: &[bool], k: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let [f, w, d] = k.shape()[..] else { unreachable!() };
    let half = (w / 2) as isize;
    let l = x.len();
    let mut best = vec![f64::NEG_INFINITY; f];
    for i in 0..l {
        if !mask[i] {
            continue;
        }
        for fi in 0..f {
            let mut s = b.data()[fi];
            for o in 0..w {
                let j = i as isize + o as isize - half;
                if j < 0 || j >= l as isize || !mask[j as usize] {
                    continue;
                }
                for di in 0..d {
                    s += k.data()[(fi * w + o) * d + di] * x[j as usize][di];
                }
            }
            best[fi] = best[fi].max(s.max(0.0));
        }
    }
    best
}

/// Interaction-grid CNN by explicit loops over a C×H×W nested array.
fn oracle_grid(m: &[Vec<f64>], rmask: &[bool], cmask: &[bool], stages: &[(&Tensor<f64>, &Tensor<f64>)]) -> Vec<f64> {
    let mut x: Vec<Vec<Vec<f64>>> = vec![m.to_vec()];
    let mut valid: Vec<Vec<bool>> = rmask.iter().map(|&r| cmask.iter().map(|&c| r && c).collect()).collect();
    for (k, b) in stages {
        let [f, c, ks, _] = k.shape()[..] else { unreachable!() };
        let (h, w) = (x[0].len(), x[0][0].len());
        let pad = (ks / 2) as isize;
        let mut y = vec![vec![vec![0.0; w]; h]; f];
        for fi in 0..f {
            for r in 0..h {
                for col in 0..w {
                    let mut s = b.data()[fi];
                    for ci in 0..c {
                        for a in 0..ks {
                            for bb in 0..ks {
                                let (rr, cc) = (r as isize + a as isize - pad, col as isize + bb as isize - pad);
                                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                                    s += k.data()[((fi * c + ci) * ks + a) * ks + bb] * x[ci][rr as usize][cc as usize];
                                }
                            }
                        }
                    }
                    y[fi][r][col] = if valid[r][col] { s.max(0.0) } else { 0.0 };
                }
            }
        }
        let (oh, ow) = (h / 2, w / 2);
        x = (0..f)
            .map(|fi| {
                (0..oh)
                    .map(|r| {
                        (0..ow)
                            .map(|col| {
                                let cells = [y[fi][2 * r][2 * col], y[fi][2 * r][2 * col + 1], y[fi][2 * r + 1][2 * col], y[fi][2 * r + 1][2 * col + 1]];
                                cells.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        valid = (0..oh)
            .map(|r| (0..ow).map(|col| valid[2 * r][2 * col] || valid[2 * r][2 * col + 1] || valid[2 * r + 1][2 * col] || valid[2 * r + 1][2 * col + 1]).collect())
            .collect();
    }
    x.into_iter().flatten().flatten().collect()
}

fn oracle_matrix(q: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    q.iter().map(|qa| b.iter().map(|bb| dot(qa, bb)).collect()).collect()
}

fn oracle_pair(p: &ModelParams<f64>, q: &EncodedText, b: &EncodedText) -> Vec<f64> {
    let table = p.embedding();
    let (qe, be) = (emb_rows(table, q), emb_rows(table, b));
    let k = p.get("conv1.kernels").unwrap();
    let bias = p.get("conv1.bias").unwrap();
    let h1 = oracle_sentence(&qe, &q.mask, k, bias);
    let h2 = oracle_sentence(&be, &b.mask, k, bias);
    let m = oracle_matrix(&qe, &be);
    let mut stages = vec![];
    let mut i = 0;
    while let Some(k) = p.get(&format!("conv2.{i}.kernels")) {
        stages.push((k, p.get(&format!("conv2.{i}.bias")).unwrap()));
        i += 1;
    }
    let hm = oracle_grid(&m, &q.mask, &b.mask, &stages);
    let mut r = h1.clone();
    r.extend(&h2);
    r.extend(h1.iter().zip(&h2).map(|(a, b)| a - b));
    r.extend(h1.iter().zip(&h2).map(|(a, b)| a * b));
    r.extend(hm);
    r
}

fn oracle_c_q(ms: &[Vec<Vec<f64>>], qmask: &[bool], bmasks: &[Vec<bool>]) -> Vec<f64> {
    (0..qmask.len())
        .map(|a| {
            if !qmask[a] {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for (m, bm) in ms.iter().zip(bmasks) {
                for (bb, &valid) in bm.iter().enumerate() {
                    if valid {
                        best = best.max(m[a][bb]);
                    }
                }
            }
            best
        })
        .collect()
}

fn oracle_c_b(ms: &[Vec<Vec<f64>>], qmask: &[bool], bmasks: &[Vec<bool>], n_max: usize) -> Vec<f64> {
    let len = bmasks[0].len();
    let mut out = vec![0.0; n_max * len];
    for (i, (m, bm)) in ms.iter().zip(bmasks).enumerate() {
        for bb in 0..len {
            if !bm[bb] {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for a in 0..qmask.len() {
                if qmask[a] {
                    best = best.max(m[a][bb]);
                }
            }
            out[i * len + bb] = best;
        }
    }
    out
}

fn oracle_e(p: &ModelParams<f64>, row: &[f64]) -> f64 {
    let w1 = p.get("coverage.w1").unwrap();
    let b1 = p.get("coverage.b1").unwrap().data();
    let w2 = p.get("coverage.w2").unwrap().data();
    let b2 = p.get("coverage.b2").unwrap().data()[0];
    let h = b1.len();
    let mut e = b2;
    for j in 0..h {
        let mut s = b1[j];
        for (d, &x) in row.iter().enumerate() {
            s += x * w1.data()[d * h + j];
        }
        e += s.max(0.0) * w2[j];
    }
    e
}

fn oracle_weighting(c: &[f64], e: &[f64], mask: &[bool]) -> (Vec<f64>, f64) {
    let mx = e.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = e.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| (v - mx).exp()).sum();
    let w: Vec<f64> = (0..c.len()).map(|i| if mask[i] { (e[i] - mx).exp() / z * c[i] } else { 0.0 }).collect();
    let s = w.iter().sum();
    (w, s)
}

// ------------------------------------------------------- cross attention

fn graph_with(p: &ModelParams<f64>) -> (Graph<f64>, Bound) {
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    (g, b)
}

fn unit_params(rows: &[&[f64]]) -> ModelParams<f64> {
    let d = rows[0].len();
    let mut config = small(Variant::Base);
    config.embed_dim = d;
    let mut data = vec![0.0; 2 * d];
    for r in rows {
        data.extend_from_slice(r);
    }
    let t = Tensor::from_f64(vec![rows.len() + 2, d], &data).unwrap();
    ModelParams::init(&config, t, 1).unwrap()
}

#[test]
fn cross_attention_unit_and_orthogonal() {
    let v = vocab(2);
    let p = unit_params(&[&[0.6, 0.8, 0.0], &[0.0, 0.0, 1.0]]);
    let (mut g, b) = graph_with(&p);
    let a = encode_tokens(&["w0"], &v, 4);
    let c = encode_tokens(&["w1"], &v, 4);
    let ea = forward::embed(&mut g, &b, &a).unwrap();
    let ec = forward::embed(&mut g, &b, &c).unwrap();
    let m = forward::cross_attention(&mut g, ea, ea).unwrap();
    let got = vals(&g, m);
    assert!((got[0] - 1.0).abs() < 1e-15);
    assert!(got[1..].iter().all(|&x| x == 0.0));
    let m = forward::cross_attention(&mut g, ea, ec).unwrap();
    assert!(vals(&g, m).iter().all(|&x| x == 0.0));
}

#[test]
fn cross_attention_matches_double_loop() {
    let config = small(Variant::Base);
    let v = vocab(12);
    for seed in 0..5 {
        let p = rand_params(&config, v.len(), seed);
        let (mut g, b) = graph_with(&p);
        let q = encode_tokens(&["w0", "w3", "w4", "w7"], &v, 8);
        let d = encode_tokens(&["w2", "w3", "w9"], &v, 8);
        let (eq, ed) = (forward::embed(&mut g, &b, &q).unwrap(), forward::embed(&mut g, &b, &d).unwrap());
        let m = forward::cross_attention(&mut g, eq, ed).unwrap();
        let want: Vec<f64> = oracle_matrix(&emb_rows(p.embedding(), &q), &emb_rows(p.embedding(), &d)).concat();
        assert_close(&vals(&g, m), &want, TOL);
    }
}

#[test]
fn degenerate_text_is_rejected() {
    let config = small(Variant::Base);
    let v = vocab(4);
    let p = rand_params(&config, v.len(), 0);
    let (mut g, b) = graph_with(&p);
    let empty = encode_tokens::<&str>(&[], &v, 8);
    assert!(matches!(forward::embed(&mut g, &b, &empty), Err(QbmError::Degenerate(_))));
}

// ------------------------------------------------------------ pair match

fn side(g: &mut Graph<f64>, b: &Bound, t: &EncodedText) -> Side {
    forward::encode_side(g, b, t).unwrap()
}

#[test]
fn identical_texts_have_zero_difference_block() {
    let config = small(Variant::Base);
    let v = vocab(10);
    let p = rand_params(&config, v.len(), 3);
    let (mut g, b) = graph_with(&p);
    let t = encode_tokens(&["w1", "w5", "w2"], &v, 8);
    let (s1, s2) = (side(&mut g, &b, &t), side(&mut g, &b, &t));
    let out = forward::pair_rep(&mut g, &b, &s1, &s2).unwrap();
    let f = config.conv1_filters;
    let r = vals(&g, out.r);
    assert!(r[2 * f..3 * f].iter().all(|&x| x == 0.0));
    assert_eq!(r[..f], r[f..2 * f]);
}

#[test]
fn zero_embeddings_pool_the_relu_bias() {
    let config = small(Variant::Base);
    let v = vocab(6);
    let emb = Tensor::zeros(vec![v.len(), config.embed_dim]);
    let mut p = ModelParams::init(&config, emb, 0).unwrap();
    *p.get_mut("conv1.bias").unwrap() = Tensor::from_f64(vec![3], &[0.5, -0.2, 0.0]).unwrap();
    let (mut g, b) = graph_with(&p);
    let q = side(&mut g, &b, &encode_tokens(&["w0", "w1"], &v, 8));
    let d = side(&mut g, &b, &encode_tokens(&["w3"], &v, 8));
    assert_eq!(vals(&g, q.h), [0.5, 0.0, 0.0]);
    assert_eq!(vals(&g, d.h), [0.5, 0.0, 0.0]);
}

#[test]
fn pair_rep_matches_compositional_oracle() {
    let config = small(Variant::Base);
    let v = vocab(15);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..10 {
        let p = rand_params(&config, v.len(), seed);
        let (mut g, b) = graph_with(&p);
        let q = rand_text(&mut rng, &v, 8);
        let d = rand_text(&mut rng, &v, 8);
        let (sq, sd) = (side(&mut g, &b, &q), side(&mut g, &b, &d));
        let out = forward::pair_rep(&mut g, &b, &sq, &sd).unwrap();
        assert_eq!(g.value(out.r).len(), config.pair_len());
        assert_close(&vals(&g, out.r), &oracle_pair(&p, &q, &d), TOL);
    }
}

// ------------------------------------------------------------ aggregation

#[test]
fn aggregate_bag_definitions() {
    let mut g: Graph<f64> = Graph::new();
    let v = g.constant(Tensor::vector(vec![1.0, -2.0, 3.0]));
    let w = g.constant(Tensor::vector(vec![0.0, 4.0, 1.0]));
    let one = forward::aggregate_bag(&mut g, &[v]).unwrap();
    assert_eq!(vals(&g, one), [1.0, -2.0, 3.0, 1.0, -2.0, 3.0]);
    let two = forward::aggregate_bag(&mut g, &[v, w]).unwrap();
    assert_eq!(vals(&g, two), [1.0, 4.0, 3.0, 0.5, 1.0, 2.0]);
    assert!(matches!(forward::aggregate_bag(&mut g, &[]), Err(QbmError::Degenerate(_))));
}

#[test]
fn aggregate_bag_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g: Graph<f64> = Graph::new();
    let reps: Vec<Var> = (0..5).map(|_| g.constant(rand_tensor(&mut rng, vec![7], 1.0))).collect();
    let a = forward::aggregate_bag(&mut g, &reps).unwrap();
    let perm = [reps[3], reps[0], reps[4], reps[2], reps[1]];
    let b = forward::aggregate_bag(&mut g, &perm).unwrap();
    assert_eq!(vals(&g, a), vals(&g, b));
}

// --------------------------------------------------------------- coverage

fn matrix(g: &mut Graph<f64>, rows: &[&[f64]]) -> Var {
    let c = rows[0].len();
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    g.constant(Tensor::from_f64(vec![rows.len(), c], &data).unwrap())
}

#[test]
fn coverage_examples() {
    let mut g: Graph<f64> = Graph::new();
    let m = matrix(&mut g, &[&[0.2, 0.9], &[0.5, 0.1]]);
    let t = [true, true];
    let c_q = forward::bag_to_query_coverage(&mut g, &[m], &t, &[&t]).unwrap();
    assert_eq!(vals(&g, c_q), [0.9, 0.5]);
    let c_b = forward::query_to_bag_coverage(&mut g, &[m], &t, &[&t], 5).unwrap();
    let got = vals(&g, c_b);
    assert_eq!(got.len(), 10);
    assert_eq!(got[..2], [0.5, 0.9]);
    assert!(got[2..].iter().all(|&x| x == 0.0));

    let m1 = matrix(&mut g, &[&[0.3], &[0.4]]);
    let m2 = matrix(&mut g, &[&[0.5], &[0.1]]);
    let c_q = forward::bag_to_query_coverage(&mut g, &[m1, m2], &t, &[&[true], &[true]]).unwrap();
    assert_eq!(vals(&g, c_q), [0.5, 0.4]);
}

#[test]
fn coverage_matches_loop_oracles() {
    let config = small(Variant::BaseMc);
    let v = vocab(15);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..10 {
        let p = rand_params(&config, v.len(), seed);
        let (mut g, b) = graph_with(&p);
        let n = if seed < 5 { 3 } else { rng.gen_range(1..=3) };
        let inst = rand_bag(&mut rng, &v, &config, n);
        let q = side(&mut g, &b, &inst.query);
        let sides: Vec<Side> = inst.questions.iter().map(|t| side(&mut g, &b, t)).collect();
        let ms: Vec<Var> = sides.iter().map(|s| forward::cross_attention(&mut g, q.emb, s.emb).unwrap()).collect();
        let bm: Vec<&[bool]> = sides.iter().map(|s| s.mask.as_slice()).collect();
        let c_q = forward::bag_to_query_coverage(&mut g, &ms, &q.mask, &bm).unwrap();
        let c_b = forward::query_to_bag_coverage(&mut g, &ms, &q.mask, &bm, config.max_bag).unwrap();

        let table = p.embedding();
        let qe = emb_rows(table, &inst.query);
        let oms: Vec<Vec<Vec<f64>>> = inst.questions.iter().map(|t| oracle_matrix(&qe, &emb_rows(table, t))).collect();
        let obm: Vec<Vec<bool>> = inst.questions.iter().map(|t| t.mask.clone()).collect();
        // Max is exact, so the comparison is too.
        assert_eq!(vals(&g, c_q), oracle_c_q(&oms, &inst.query.mask, &obm));
        let want_b = oracle_c_b(&oms, &inst.query.mask, &obm, config.max_bag);
        assert_eq!(vals(&g, c_b), want_b);
        assert!(want_b[n * config.max_len..].iter().all(|&x| x == 0.0));

        // Weighted forms against softmax-then-multiply.
        let refs: Vec<&Side> = sides.iter().collect();
        let cov = forward::coverage(&mut g, b.coverage.as_ref().unwrap(), &q, &refs, &ms, config.max_bag).unwrap();
        let eq: Vec<f64> = qe.iter().map(|r| oracle_e(&p, r)).collect();
        let (wq, sq) = oracle_weighting(&vals(&g, c_q), &eq, &inst.query.mask);
        assert_close(&vals(&g, cov.weighted_q), &wq, TOL);
        assert!((vals(&g, cov.sum_q)[0] - sq).abs() < TOL);
        let mut eb = vec![];
        let mut jm = vec![];
        for i in 0..config.max_bag {
            match inst.questions.get(i) {
                Some(t) => {
                    eb.extend(emb_rows(table, t).iter().map(|r| oracle_e(&p, r)));
                    jm.extend(&t.mask);
                }
                None => {
                    eb.extend(vec![0.0; config.max_len]);
                    jm.extend(vec![false; config.max_len]);
                }
            }
        }
        let (wb, sb) = oracle_weighting(&want_b, &eb, &jm);
        assert_close(&vals(&g, cov.weighted_b), &wb, TOL);
        assert!((vals(&g, cov.sum_b)[0] - sb).abs() < TOL);
    }
}

#[test]
fn weighting_zero_logits_and_singleton() {
    let mut g: Graph<f64> = Graph::new();
    let c = g.constant(Tensor::vector(vec![0.4, 0.8, 9.0, 0.2]));
    let e = g.constant(Tensor::vector(vec![0.0; 4]));
    let mask = [true, true, false, true];
    let (w, s) = forward::coverage_weighting(&mut g, c, e, &mask).unwrap();
    assert_close(&vals(&g, w), &[0.4 / 3.0, 0.8 / 3.0, 0.0, 0.2 / 3.0], 1e-15);
    assert!((vals(&g, s)[0] - 1.4 / 3.0).abs() < 1e-15);
    let (w, s) = forward::coverage_weighting(&mut g, c, e, &[false, true, false, false]).unwrap();
    assert_eq!(vals(&g, w), [0.0, 0.8, 0.0, 0.0]);
    assert_eq!(vals(&g, s), [0.8]);
    assert!(forward::coverage_weighting(&mut g, c, e, &[false; 4]).is_err());
}

#[test]
fn zero_output_layer_weighs_tokens_uniformly() {
    let config = small(Variant::Qbm);
    let v = vocab(10);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let emb = rand_tensor(&mut rng, vec![v.len(), config.embed_dim], 0.5);
    let p = ModelParams::init(&config, emb, 4).unwrap();
    let (mut g, b) = graph_with(&p);
    let t = encode_tokens(&["w1", "w2", "w7"], &v, 8);
    let s = side(&mut g, &b, &t);
    let e = forward::token_weights(&mut g, b.coverage.as_ref().unwrap(), s.emb).unwrap();
    assert!(vals(&g, e).iter().all(|&x| x == 0.0));
}

// ----------------------------------------------------- bag representation

fn matcher(config: ModelConfig, questions: &[&str], seed: u64) -> Matcher {
    let vocab = Vocabulary::build(questions.iter().copied(), 1);
    let stats = InvertedIndex::build(questions).stats().clone();
    let table = EmbeddingTable::random(vocab.len(), config.embed_dim, seed);
    let params = ModelParams::from_embeddings(&config, &table, seed).unwrap();
    Matcher::new(config, vocab, stats, params).unwrap()
}

#[test]
fn keywords_of_a_degenerate_bag() {
    let corpus = ["refund", "refund", "refund", "where is my parcel", "cancel the order"];
    let m = matcher(small(Variant::BaseBr), &corpus, 5);
    assert_eq!(m.keyword_tokens(&["refund", "refund", "refund"]).unwrap(), ["refund"]);
    let input = m.encode_bag("refund", &["refund", "refund"]).unwrap();
    let p = m.params.cast::<f64>();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let f = forward::features(&mut g, &b, &m.config, &input).unwrap();
    let row = emb_rows(p.embedding(), &input.query)[0].clone();
    let norm2 = dot(&row, &row);
    let cov = f.keyword_coverage.unwrap();
    assert!((vals(&g, cov.c_q)[0] - norm2).abs() < 1e-12);
    assert!(vals(&g, cov.c_q)[1..].iter().all(|&x| x == 0.0));
    // A bag made only of stopwords has no keyword at all.
    assert!(matches!(m.keyword_tokens(&["is it the"]), Err(QbmError::Degenerate(_))));
    // Unknown keywords fall back to the most frequent non-stopword token.
    assert_eq!(m.keyword_tokens(&["the zebra zebra yak"]).unwrap(), ["zebra"]);
}

#[test]
fn keywords_match_tfidf_oracle() {
    let corpus = [
        "how do i reset my password",
        "reset password link expired",
        "password reset email never arrives",
        "change the account email",
        "delete my account forever",
        "why was my account locked",
    ];
    let m = matcher(small(Variant::Qbm), &corpus, 2);
    let bag = ["reset password link expired", "password reset email never arrives"];
    // Brute force: count terms, score tf*idf with the smoothed idf.
    let sw = StopWords::english();
    let n = corpus.len() as f64;
    let mut scored: Vec<(String, f64)> = vec![];
    let toks: Vec<String> = bag.iter().flat_map(|q| tokenize(q)).filter(|t| !sw.contains(t)).collect();
    let mut uniq = toks.clone();
    uniq.sort();
    uniq.dedup();
    for t in uniq {
        let tf = toks.iter().filter(|x| **x == t).count() as f64;
        let df = corpus.iter().filter(|d| tokenize(d).contains(&t)).count() as f64;
        scored.push((t, tf * (((n + 1.0) / (df + 1.0)).ln() + 1.0)));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let want: Vec<String> = scored.into_iter().take(10).map(|(t, _)| t).collect();
    assert_eq!(m.keyword_tokens(&bag).unwrap(), want);
}

// ------------------------------------------------------------ full forward

#[test]
fn feature_lengths_follow_the_config() {
    // Closed forms for the default shape: r = 4*128 + 32*5*5.
    let r = 4 * 128 + 32 * 25;
    let expect = [
        (Variant::Base, 2 * r),
        (Variant::BaseMc, 2 * r + 20 + 100 + 2),
        (Variant::BaseBr, 3 * r + 42),
        (Variant::BaseBrNoCov, 3 * r),
        (Variant::Qbm, 3 * r + 122 + 42),
        (Variant::Qq, r),
        (Variant::BagCon, 4 * 128 + 32 * 25 * 25),
    ];
    for (v, n) in expect {
        let c = ModelConfig { variant: v, ..ModelConfig::default() };
        assert_eq!(c.feature_len(), n, "{v}");
    }
    // And the implementation agrees on a small shape.
    let vcb = vocab(12);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for v in [Variant::Base, Variant::BaseMc, Variant::BaseBr, Variant::BaseBrNoCov, Variant::Qbm] {
        let config = small(v);
        let p = rand_params(&config, vcb.len(), 1);
        let (mut g, b) = graph_with(&p);
        let inst = rand_bag(&mut rng, &vcb, &config, 2);
        let f = forward::features(&mut g, &b, &config, &inst).unwrap();
        assert_eq!(g.value(f.x).len(), config.feature_len(), "{v}");
        assert_eq!(f.keyword_coverage.is_some(), v.keyword_coverage());
    }
}

#[test]
fn parameter_count_is_a_function_of_config() {
    let vcb = vocab(20);
    for v in Variant::ALL {
        let config = small(v);
        let a = rand_params(&config, vcb.len(), 1).count();
        let b = rand_params(&config, vcb.len(), 2).count();
        assert_eq!(a, b);
        assert_eq!(a, config.param_count(vcb.len()));
    }
    let with = small(Variant::Qbm).param_count(20);
    let without = small(Variant::Base).param_count(20);
    let c = small(Variant::Qbm);
    let extra = (c.feature_len() - small(Variant::Base).feature_len()) * c.mlp_hidden
        + c.embed_dim * c.coverage_hidden
        + 2 * c.coverage_hidden
        + 1;
    assert_eq!(with - without, extra);
}

#[test]
fn unknown_variant_is_a_config_error() {
    assert!(matches!("qbm2".parse::<Variant>(), Err(QbmError::Config(_))));
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
}

#[test]
fn probabilities_are_normalised_and_deterministic() {
    let corpus = ["how to get a refund", "refund not received", "where is my parcel", "parcel lost in transit", "track my parcel"];
    for v in [Variant::Base, Variant::Qbm, Variant::BaseBrNoCov, Variant::BagCon] {
        let m = matcher(small(v), &corpus, 3);
        let input = m.encode_bag("refund please", &corpus[..2]).unwrap();
        let a = m.probability(&input).unwrap();
        let b = m.probability(&input).unwrap();
        assert!(a > 0.0 && a < 1.0);
        assert_eq!(a.to_bits(), b.to_bits());
        let mut g = Graph::new();
        let bnd = m.params.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = forward::logits(&mut g, &bnd, &m.config, &input, false, &mut rng).unwrap();
        let z: Vec<f64> = g.value(l).data().iter().map(|&x| x as f64).collect();
        let e: Vec<f64> = z.iter().map(|x| (x - z[0].max(z[1])).exp()).collect();
        assert!((e[0] / (e[0] + e[1]) + e[1] / (e[0] + e[1]) - 1.0).abs() < 1e-9);
    }
    let m = matcher(small(Variant::Qbm), &corpus, 3);
    assert!(matches!(m.encode_bag("", &corpus[..2]), Err(QbmError::Degenerate(_))));
    assert!(matches!(m.encode_bag("refund", &[""]), Err(QbmError::Degenerate(_))));
}

#[test]
fn pairwise_baseline_aggregation() {
    assert_eq!(baseline_qq(&[0.2, 0.8], QqMode::Max).unwrap(), 0.8);
    assert_eq!(baseline_qq(&[0.2, 0.8], QqMode::Mean).unwrap(), 0.5);
    assert!(baseline_qq(&[], QqMode::Max).is_err());
    let corpus = ["how to get a refund", "refund not received", "where is my parcel"];
    let m = matcher(small(Variant::Qq), &corpus, 3);
    let p = m.probability(&m.encode_pair("refund", corpus[0]).unwrap()).unwrap();
    assert_eq!(m.score("refund", &corpus[..1], QqMode::Max).unwrap(), p);
    assert_eq!(m.score("refund", &corpus[..1], QqMode::Mean).unwrap(), p);
}

#[test]
fn bag_concatenation_padding_and_truncation() {
    let corpus = ["how to get a refund", "refund not received", "where is my parcel"];
    let m = matcher(small(Variant::BagCon), &corpus, 3);
    // One short question: the long encoding differs only by padding, which
    // the sentence encoder ignores.
    let long = m.encode_bag("refund please", &corpus[..1]).unwrap();
    assert_eq!(long.questions[0].max_len(), 16);
    let p = m.params.cast::<f64>();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let short = encode(corpus[0], &m.vocab, 8);
    let h_long = side(&mut g, &b, &long.questions[0]).h;
    let h_short = side(&mut g, &b, &short).h;
    assert_eq!(vals(&g, h_long), vals(&g, h_short));
    // Its score is the pair model's on the same question.
    let pair = m.probability(&m.encode_pair("refund please", corpus[0]).unwrap()).unwrap();
    assert!((m.score("refund please", &corpus[..1], QqMode::Max).unwrap() - pair).abs() < 1e-6);
    // Long concatenations are cut to the first bagcon_len tokens.
    let many: Vec<String> = (0..6).map(|_| "refund not received".to_string()).collect();
    let cut = m.encode_bag("refund", &many).unwrap();
    assert_eq!(cut.questions[0].true_length, 16);
    assert_eq!(cut.questions[0], encode(&many.join(" "), &m.vocab, 16));
}

#[test]
fn pad_row_never_matters() {
    let config = small(Variant::Qbm);
    let v = vocab(12);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..5 {
        let p = rand_params(&config, v.len(), seed);
        let inst = rand_bag(&mut rng, &v, &config, 2);
        let run = |p: &ModelParams<f64>| {
            let (mut g, b) = graph_with(p);
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let l = forward::logits(&mut g, &b, &config, &inst, false, &mut r).unwrap();
            vals(&g, l)
        };
        let base = run(&p);
        let mut q = p.clone();
        let d = config.embed_dim;
        q.get_mut("embedding").unwrap().data_mut()[PAD * d..(PAD + 1) * d].iter_mut().for_each(|x| *x = 7.5);
        assert_eq!(run(&q), base);
    }
}

// -------------------------------------------------------------- gradients

#[test]
fn full_forward_gradient_check() {
    let v = vocab(10);
    for variant in [Variant::Qbm, Variant::BagCon] {
        let config = ModelConfig::tiny(variant);
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let p = rand_params(&config, v.len(), seed);
            let inst = if variant == Variant::BagCon {
                let mut i = rand_bag(&mut rng, &v, &ModelConfig { max_len: 12, ..config.clone() }, 1);
                i.keywords = None;
                i
            } else {
                rand_bag(&mut rng, &v, &config, 2)
            };
            let names = p.names().to_vec();
            let report = grad_check(
                p.tensors(),
                |g, vars| {
                    let b = Bound::new(&names, vars.to_vec());
                    let mut r = ChaCha8Rng::seed_from_u64(0);
                    let l = forward::logits(g, &b, &config, &inst, false, &mut r)?;
                    let l2 = g.reshape(l, vec![1, 2])?;
                    g.cross_entropy(l2, &[1])
                },
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-3, "{variant} seed {seed}: {report:?}");
        }
    }
}

// ------------------------------------------------------------- properties

fn qbm_parts(config: &ModelConfig, p: &ModelParams<f64>, inst: &EncodedBag) -> (Vec<f64>, Vec<f64>, f64) {
    let (mut g, b) = graph_with(p);
    let f = forward::features(&mut g, &b, config, inst).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let l = forward::head(&mut g, &b, f.x, config.dropout, false, &mut r).unwrap();
    let cov = f.bag_coverage.unwrap_or_else(|| f.keyword_coverage.unwrap());
    (vals(&g, l), vals(&g, cov.c_q), vals(&g, cov.sum_b)[0])
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn bag_permutation_invariance(seed in 0u64..1000, n in 2usize..=3, rot in 1usize..3) {
        let v = vocab(14);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for variant in [Variant::Base, Variant::BaseBr, Variant::Qbm] {
            let config = small(variant);
            let p = rand_params(&config, v.len(), seed);
            let inst = rand_bag(&mut rng, &v, &config, n);
            let mut perm = inst.clone();
            if rot % n == 0 {
                perm.questions.reverse();
            } else {
                perm.questions.rotate_left(rot % n);
            }
            prop_assert_ne!(&perm.questions, &inst.questions);
            let (mut g, b) = graph_with(&p);
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let a = forward::logits(&mut g, &b, &config, &inst, false, &mut r).unwrap();
            let c = forward::logits(&mut g, &b, &config, &perm, false, &mut r).unwrap();
            if variant == Variant::Qbm {
                let (_, cq1, sb1) = qbm_parts(&config, &p, &inst);
                let (_, cq2, sb2) = qbm_parts(&config, &p, &perm);
                prop_assert_eq!(cq1, cq2);
                prop_assert_eq!(sb1.to_bits(), sb2.to_bits());
            } else {
                prop_assert_eq!(vals(&g, a), vals(&g, c));
            }
        }
    }

    #[test]
    fn coverage_grows_with_the_bag(seed in 0u64..1000) {
        let v = vocab(14);
        let config = small(Variant::BaseMc);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rand_params(&config, v.len(), seed);
        let big = rand_bag(&mut rng, &v, &config, 3);
        let mut prev: Option<Vec<f64>> = None;
        for n in 1..=3 {
            let inst = EncodedBag { questions: big.questions[..n].to_vec(), ..big.clone() };
            let (_, c_q, _) = qbm_parts(&config, &p, &inst);
            if let Some(prev) = &prev {
                for (a, b) in prev.iter().zip(&c_q) {
                    prop_assert!(b >= a);
                }
            }
            prev = Some(c_q);
        }
    }

    #[test]
    fn coverage_bounds_with_normalised_embeddings(seed in 0u64..1000, nonneg in any::<bool>()) {
        let v = vocab(14);
        let config = small(Variant::BaseMc);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = rand_params(&config, v.len(), seed);
        let d = config.embed_dim;
        for row in p.get_mut("embedding").unwrap().data_mut().chunks_mut(d).skip(1) {
            if nonneg {
                row.iter_mut().for_each(|x| *x = x.abs());
            }
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        let inst = rand_bag(&mut rng, &v, &config, 3);
        let (mut g, b) = graph_with(&p);
        let f = forward::features(&mut g, &b, &config, &inst).unwrap();
        let cov = f.bag_coverage.unwrap();
        let lo = if nonneg { 0.0 } else { -1.0 };
        for x in vals(&g, cov.c_q).into_iter().chain(vals(&g, cov.c_b)) {
            prop_assert!(x >= lo - 1e-12 && x <= 1.0 + 1e-12, "{}", x);
        }
    }

    #[test]
    fn padding_values_never_change_outputs(seed in 0u64..1000, fill in -5.0f64..5.0) {
        let v = vocab(14);
        let config = small(Variant::Qbm);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rand_params(&config, v.len(), seed);
        let inst = rand_bag(&mut rng, &v, &config, 2);
        let mut q = p.clone();
        let d = config.embed_dim;
        q.get_mut("embedding").unwrap().data_mut()[..d].iter_mut().for_each(|x| *x = fill);
        prop_assert_eq!(qbm_parts(&config, &p, &inst), qbm_parts(&config, &q, &inst));
    }
}
