//! Finite-difference checks of every differentiable operation and of the
//! full network on a small shape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Graph, Tensor, Var, DEFAULT_STEP};
use crate::error::Result;
use crate::model::{forward, Bound, EncodedBag, ModelConfig, ModelParams, Variant};
use crate::text::{encode_tokens, Vocabulary};

/// Worst relative error of one operation over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_f64(shape, &data).expect("shape matches data")
}

/// Values spread on a grid and shuffled, so max choices sit far from ties.
fn distinct(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / n as f64).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape, vals).expect("shape matches data")
}

/// Like `rand_tensor` but with magnitudes at least `gap`, keeping ReLU
/// inputs off the kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape, &data).expect("shape matches data")
}

type Forward<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

struct Table(Vec<GradRow>);

impl Table {
    fn record(&mut self, name: &str, inputs: &[Tensor<f64>], f: &Forward<'_>) -> Result<()> {
        let r = grad_check(inputs, f, DEFAULT_STEP)?;
        match self.0.iter_mut().find(|row| row.name == name) {
            Some(row) => {
                row.max_rel_error = row.max_rel_error.max(r.max_rel_error);
                row.checked += r.checked;
            }
            None => self.0.push(GradRow {
                name: name.to_string(),
                max_rel_error: r.max_rel_error,
                checked: r.checked,
            }),
        }
        Ok(())
    }
}

fn primitives(t: &mut Table, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let mask5 = [true, true, true, false, true];
    let r = &mut rng;
    t.record("matmul", &[rand_tensor(r, vec![3, 4], 1.0), rand_tensor(r, vec![4, 2], 1.0)], &|g, v| g.matmul(v[0], v[1]))?;
    t.record("transpose", &[rand_tensor(r, vec![3, 2], 1.0)], &|g, v| g.transpose(v[0]))?;
    t.record("add_sub_mul", &[rand_tensor(r, vec![4], 1.0), rand_tensor(r, vec![4], 1.0)], &|g, v| {
        let a = g.add(v[0], v[1])?;
        let s = g.sub(a, v[1])?;
        g.mul(s, v[1])
    })?;
    t.record("add_row_bias", &[rand_tensor(r, vec![3, 2], 1.0), rand_tensor(r, vec![2], 1.0)], &|g, v| g.add_row_bias(v[0], v[1]))?;
    t.record("relu", &[away_from_zero(r, vec![6], 0.05)], &|g, v| Ok(g.relu(v[0])))?;
    t.record("concat_stack", &[rand_tensor(r, vec![3], 1.0), rand_tensor(r, vec![3], 1.0)], &|g, v| {
        let s = g.stack_rows(&[v[0], v[1], v[0]])?;
        Ok(g.concat(&[s, v[1]]))
    })?;
    t.record("gather", &[rand_tensor(r, vec![4, 3], 1.0)], &|g, v| g.gather(v[0], &[2, 0, 2, 3], &[true, false, true, true]))?;
    // A large bias keeps the fused ReLU active everywhere.
    let conv_in = [
        rand_tensor(r, vec![5, 3], 1.0),
        rand_tensor(r, vec![2, 3, 3], 1.0),
        Tensor::from_f64(vec![2], &[4.0, 4.5])?,
    ];
    t.record("conv_text", &conv_in, &|g, v| g.conv_text(v[0], v[1], v[2], &mask5))?;
    let conv2 = [rand_tensor(r, vec![2, 4, 5], 1.0), rand_tensor(r, vec![3, 2, 3, 3], 1.0), rand_tensor(r, vec![3], 1.0)];
    t.record("conv2d", &conv2, &|g, v| g.conv2d(v[0], v[1], v[2]))?;
    t.record("max_pool2d", &[distinct(r, vec![2, 4, 5])], &|g, v| g.max_pool2d(v[0]))?;
    t.record("masked_max_pool", &[distinct(r, vec![5, 3])], &|g, v| g.masked_max_pool(v[0], &mask5))?;
    t.record("masked_mean_pool", &[rand_tensor(r, vec![5, 3], 1.0)], &|g, v| g.masked_mean_pool(v[0], &mask5))?;
    t.record("row_max", &[distinct(r, vec![3, 5])], &|g, v| g.row_max(v[0], &[true, false, true], &mask5))?;
    t.record("masked_softmax", &[rand_tensor(r, vec![5], 1.0)], &|g, v| g.masked_softmax(v[0], &mask5))?;
    t.record("sum", &[rand_tensor(r, vec![5], 1.0)], &|g, v| Ok(g.sum(v[0])))?;
    t.record("scale_const", &[rand_tensor(r, vec![3], 1.0)], &|g, v| g.scale_const(v[0], vec![2.0, 0.0, -1.0]))?;
    t.record("cross_entropy", &[rand_tensor(r, vec![4, 2], 1.0)], &|g, v| g.cross_entropy(v[0], &[0, 1, 1, 0]))?;
    Ok(())
}

/// Random parameters and a random bag on the small shape. Biases are random
/// too, which keeps pre-activations of padded grid cells off zero.
fn model_point(config: &ModelConfig, seed: u64) -> Result<(ModelParams<f64>, EncodedBag)> {
    let vocab = Vocabulary::from_tokens((0..10).map(|i| format!("w{i}")));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut emb = rand_tensor(&mut rng, vec![vocab.len(), config.embed_dim], 0.5);
    emb.data_mut()[..config.embed_dim].iter_mut().for_each(|x| *x = 0.0);
    let mut params = ModelParams::init(config, emb, seed)?;
    let names = params.names().to_vec();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if name != "embedding" {
            *t = rand_tensor(&mut rng, t.shape().to_vec(), 0.5);
        }
    }
    let len = config.seq_len();
    let text = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(1..=config.max_len);
        let toks: Vec<String> = (0..n).map(|_| format!("w{}", rng.gen_range(0..10))).collect();
        encode_tokens(&toks, &vocab, len)
    };
    let n_q = match config.variant {
        Variant::Qq | Variant::BagCon => 1,
        _ => config.max_bag,
    };
    let input = EncodedBag {
        query: text(&mut rng),
        questions: (0..n_q).map(|_| text(&mut rng)).collect(),
        keywords: config.variant.keyword_rep().then(|| text(&mut rng)),
    };
    Ok((params, input))
}

fn model(t: &mut Table, variant: Variant, seed: u64) -> Result<()> {
    let config = ModelConfig::tiny(variant);
    let (params, input) = model_point(&config, 1000 + seed)?;
    let names = params.names().to_vec();
    let label = (seed % 2) as usize;
    let f = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let b = Bound::new(&names, vars.to_vec());
        // Dropout is off, so the generator is unused.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = forward::logits(g, &b, &config, &input, false, &mut rng)?;
        let row = g.reshape(logits, vec![1, 2])?;
        g.cross_entropy(row, &[label])
    };
    t.record(&format!("model:{variant}"), params.tensors(), &f)
}

/// Runs every primitive and, when `with_model` is set, the full network for
/// each variant, at `seeds` points each.
pub fn gradient_suite(seeds: u64, with_model: bool) -> Result<Vec<GradRow>> {
    let mut t = Table(Vec::new());
    for seed in 0..seeds {
        primitives(&mut t, seed)?;
        if with_model {
            for v in Variant::ALL {
                model(&mut t, v, seed)?;
            }
        }
    }
    Ok(t.0)
}
