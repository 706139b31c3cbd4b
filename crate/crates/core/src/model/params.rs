use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::dataset::mix_seed;
use crate::error::{QbmError, Result};
use crate::text::EmbeddingTable;

/// Named parameter tensors in the order given by
/// [`ModelConfig::param_shapes`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-uniform weights, zero biases. The token-weighting network's
    /// output layer starts at zero so every token initially weighs the same.
    pub fn init(config: &ModelConfig, embedding: Tensor<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let (v, d) = embedding.dims2()?;
        if d != config.embed_dim {
            return Err(QbmError::Config(format!(
                "embedding dimension {d} does not match embed_dim {}",
                config.embed_dim
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut embedding = Some(embedding);
        for (i, (name, shape)) in config.param_shapes(v).into_iter().enumerate() {
            let t = if name == "embedding" {
                embedding.take().expect("embedding comes once")
            } else if shape.len() == 1 || name == "coverage.w2" {
                Tensor::zeros(shape)
            } else {
                let (fan_in, fan_out) = fans(&shape);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
                let data: Vec<f64> = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-limit..limit)).collect();
                Tensor::from_f64(shape, &data)?
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(ModelParams { names, tensors })
    }

    /// Rebuilds from stored arrays, checking names and shapes against the config.
    pub fn from_parts(config: &ModelConfig, vocab_size: usize, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = config.param_shapes(vocab_size);
        if shapes.len() != tensors.len() {
            return Err(QbmError::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(QbmError::Checkpoint(format!(
                    "parameter {name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(ModelParams {
            names: shapes.into_iter().map(|(n, _)| n).collect(),
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn embedding(&self) -> &Tensor<T> {
        &self.tensors[0]
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Puts every tensor on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Bound {
        let vars = self.tensors.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect();
        Bound::new(&self.names, vars)
    }
}

impl ModelParams<f32> {
    pub fn from_embeddings(config: &ModelConfig, table: &EmbeddingTable, seed: u64) -> Result<Self> {
        Self::init(config, table.matrix.clone(), seed)
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [i, o] => (*i, *o),
        // conv1: F×w×D
        [f, w, d] => (w * d, f * w),
        // conv2: F×C×k×k
        [f, c, kh, kw] => (c * kh * kw, f * kh * kw),
        _ => (1, 1),
    }
}

/// Weights of a scalar-output two-layer network applied per token.
#[derive(Clone, Copy, Debug)]
pub struct CoverageMlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Graph handles for every parameter.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    pub embedding: Var,
    pub conv1: (Var, Var),
    pub conv2: Vec<(Var, Var)>,
    pub coverage: Option<CoverageMlp>,
    pub head: [Var; 4],
}

impl Bound {
    /// `vars` must follow the order of `names`, as produced by
    /// [`ModelConfig::param_shapes`].
    pub fn new(names: &[String], vars: Vec<Var>) -> Self {
        let find = |n: &str| names.iter().position(|x| x == n).map(|i| vars[i]);
        let must = |n: &str| find(n).unwrap_or_else(|| panic!("parameter {n} missing"));
        let mut conv2 = Vec::new();
        while let Some(k) = find(&format!("conv2.{}.kernels", conv2.len())) {
            conv2.push((k, must(&format!("conv2.{}.bias", conv2.len()))));
        }
        let coverage = find("coverage.w1").map(|w1| CoverageMlp {
            w1,
            b1: must("coverage.b1"),
            w2: must("coverage.w2"),
            b2: must("coverage.b2"),
        });
        Bound {
            embedding: must("embedding"),
            conv1: (must("conv1.kernels"), must("conv1.bias")),
            conv2,
            coverage,
            head: [must("head.w1"), must("head.b1"), must("head.w2"), must("head.b2")],
            vars,
        }
    }
}
