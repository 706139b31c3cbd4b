//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node appended to a linear tape.
//! Node inputs always have smaller indices than the node itself, so a single
//! reverse sweep over the tape visits each operation exactly once, after all
//! of its consumers. Gradients flowing into a node from several consumers are
//! summed.
//!
//! Only the operations the matching network needs are provided. Masks are
//! plain `bool` slices; masked positions never influence outputs and never
//! receive gradient.

use rand::Rng;

use super::tensor::{ordered_sum, Scalar, Tensor};
use crate::error::{QbmError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Relu(Var),
    ScaleConst(Var, Vec<T>),
    Reshape(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
        mask: Vec<bool>,
    },
    ConvText {
        x: Var,
        kernels: Var,
        bias: Var,
        mask: Vec<bool>,
    },
    Conv2d {
        x: Var,
        kernels: Var,
        bias: Var,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanPoolRows {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    RowMax {
        x: Var,
        argmax: Vec<Option<usize>>,
    },
    Softmax {
        x: Var,
        mask: Vec<bool>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        clamped: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The tape. Build a forward computation with the operation methods, then
/// call [`Graph::backward`] on a scalar result.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> QbmError {
    QbmError::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn check_mask(op: &str, mask: &[bool], len: usize) -> Result<()> {
    if mask.len() != len {
        return Err(QbmError::Dimension(format!(
            "{op}: mask of length {} for axis of length {len}",
            mask.len()
        )));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input tensor. Gradients are only tracked for leaves with
    /// `requires_grad` and for nodes that depend on one.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for t in 0..k {
                let av = ad[i * k + t];
                if av == T::zero() {
                    continue;
                }
                let brow = &bd[t * n..(t + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), ng))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-C bias to every row of an R×C matrix (or to a length-C vector).
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return Err(dim_err("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRowBias(x, bias), ng))
    }

    /// Rectified linear unit; the derivative at 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        // NaN passes through so that numeric failures reach the loss.
        let out: Vec<T> = v.data().iter().map(|&a| if a < T::zero() { T::zero() } else { a }).collect();
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    /// Elementwise product with a constant of the same length.
    pub fn scale_const(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        if factors.len() != self.value(x).len() {
            return Err(QbmError::Dimension(format!(
                "scale_const: {} factors for {:?}",
                factors.len(),
                self.shape(x)
            )));
        }
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .zip(&factors)
            .map(|(&a, &f)| a * f)
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScaleConst(x, factors), ng))
    }

    /// Zeroes the entries of a vector where `mask` is false.
    pub fn apply_mask(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let f = mask
            .iter()
            .map(|&m| if m { T::one() } else { T::zero() })
            .collect();
        self.scale_const(x, f)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Flattens and concatenates the inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::vector(out), Op::Concat(parts.to_vec()), ng)
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(QbmError::Dimension("stack_rows: no rows".into()));
        };
        let c = self.value(first).len();
        let mut out = Vec::with_capacity(c * rows.len());
        for &r in rows {
            if self.value(r).len() != c {
                return Err(dim_err("stack_rows", self.shape(first), self.shape(r)));
            }
            out.extend_from_slice(self.value(r).data());
        }
        let ng = rows.iter().any(|&r| self.ng(r));
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], out)?,
            Op::StackRows(rows.to_vec()),
            ng,
        ))
    }

    /// Embedding lookup. Rows where `mask` is false come out as zeros and
    /// pass no gradient back to the table.
    pub fn gather(&mut self, table: Var, ids: &[usize], mask: &[bool]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        check_mask("gather", mask, ids.len())?;
        let td = self.value(table).data();
        let mut out = vec![T::zero(); ids.len() * d];
        for (p, (&id, &m)) in ids.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if id >= v {
                return Err(QbmError::Dimension(format!(
                    "gather: id {id} outside table of {v} rows"
                )));
            }
            out[p * d..(p + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    /// Same-length 1-D convolution over a token sequence followed by ReLU.
    ///
    /// `x` is L×D, `kernels` F×w×D with odd w, `bias` F. The sequence is zero
    /// padded at both ends and masked positions read as zeros. Output rows at
    /// masked positions are zero.
    pub fn conv_text(&mut self, x: Var, kernels: Var, bias: Var, mask: &[bool]) -> Result<Var> {
        let (l, d) = self.value(x).dims2()?;
        let ks = self.shape(kernels).to_vec();
        let [f, w, kd] = ks[..] else {
            return Err(QbmError::Dimension(format!(
                "conv_text: kernels must be F×w×D, got {ks:?}"
            )));
        };
        if w % 2 == 0 {
            return Err(QbmError::Config(format!(
                "conv_text: kernel width {w} must be odd"
            )));
        }
        if kd != d {
            return Err(dim_err("conv_text", self.shape(x), &ks));
        }
        if self.shape(bias) != [f] {
            return Err(dim_err("conv_text bias", &ks, self.shape(bias)));
        }
        check_mask("conv_text", mask, l)?;
        let half = w / 2;
        let xd = self.value(x).data();
        let kdata = self.value(kernels).data();
        let bd = self.value(bias).data();
        let mut out = vec![T::zero(); l * f];
        for p in 0..l {
            if !mask[p] {
                continue;
            }
            for fi in 0..f {
                let mut acc = bd[fi];
                for o in 0..w {
                    let q = p as isize + o as isize - half as isize;
                    if q < 0 || q >= l as isize || !mask[q as usize] {
                        continue;
                    }
                    let q = q as usize;
                    let xr = &xd[q * d..(q + 1) * d];
                    let kr = &kdata[(fi * w + o) * d..(fi * w + o + 1) * d];
                    acc += dot(xr, kr);
                }
                out[p * f + fi] = acc.max(T::zero());
            }
        }
        let ng = self.ng(x) || self.ng(kernels) || self.ng(bias);
        Ok(self.push(
            Tensor::new(vec![l, f], out)?,
            Op::ConvText {
                x,
                kernels,
                bias,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    /// Same-size 2-D convolution, zero padded, no activation.
    /// `x` is C×H×W, `kernels` F×C×k×k with odd k, `bias` F.
    pub fn conv2d(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels).to_vec();
        let [c, h, w] = xs[..] else {
            return Err(QbmError::Dimension(format!(
                "conv2d: input must be C×H×W, got {xs:?}"
            )));
        };
        let [f, kc, kh, kw] = ks[..] else {
            return Err(QbmError::Dimension(format!(
                "conv2d: kernels must be F×C×k×k, got {ks:?}"
            )));
        };
        if kc != c || kh != kw {
            return Err(dim_err("conv2d", &xs, &ks));
        }
        if kh % 2 == 0 {
            return Err(QbmError::Config(format!(
                "conv2d: kernel size {kh} must be odd"
            )));
        }
        if self.shape(bias) != [f] {
            return Err(dim_err("conv2d bias", &ks, self.shape(bias)));
        }
        let k = kh;
        let pad = (k / 2) as isize;
        let xd = self.value(x).data();
        let kdata = self.value(kernels).data();
        let bd = self.value(bias).data();
        let plane = h * w;
        let mut out = vec![T::zero(); f * plane];
        for fi in 0..f {
            let o = &mut out[fi * plane..(fi + 1) * plane];
            o.iter_mut().for_each(|v| *v = bd[fi]);
            for ci in 0..c {
                let inp = &xd[ci * plane..(ci + 1) * plane];
                for ki in 0..k {
                    let dy = ki as isize - pad;
                    for kj in 0..k {
                        let dx = kj as isize - pad;
                        let wv = kdata[((fi * c + ci) * k + ki) * k + kj];
                        if wv == T::zero() {
                            continue;
                        }
                        let (x0, x1) = shifted_range(w, dx);
                        let (y0, y1) = shifted_range(h, dy);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let orow = &mut o[y * w + x0..y * w + x1];
                            let srow = &inp[sy * w + (x0 as isize + dx) as usize
                                ..sy * w + (x1 as isize + dx) as usize];
                            for (ov, &sv) in orow.iter_mut().zip(srow) {
                                *ov += wv * sv;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(kernels) || self.ng(bias);
        Ok(self.push(
            Tensor::new(vec![f, h, w], out)?,
            Op::Conv2d { x, kernels, bias },
            ng,
        ))
    }

    /// 2×2 max pooling with stride 2 over each channel of a C×H×W tensor.
    /// Odd trailing rows/columns are dropped. Ties go to the first cell in
    /// row-major order.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [c, h, w] = xs[..] else {
            return Err(QbmError::Dimension(format!(
                "max_pool2d: input must be C×H×W, got {xs:?}"
            )));
        };
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(QbmError::Dimension(format!(
                "max_pool2d: input {xs:?} too small to pool"
            )));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = ci * h * w + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ci * h * w + (2 * y + dy) * w + 2 * xx + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![c, oh, ow], out)?,
            Op::MaxPool2d { x, argmax },
            ng,
        ))
    }

    /// Column-wise maximum over the valid rows of an R×C matrix.
    pub fn masked_max_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        check_mask("masked_max_pool", mask, r)?;
        if !mask.iter().any(|&m| m) {
            return Err(QbmError::EmptyPool("max pool over a fully masked input".into()));
        }
        let xd = self.value(x).data();
        let first = mask.iter().position(|&m| m).expect("a valid row exists");
        let mut out = xd[first * c..(first + 1) * c].to_vec();
        let mut argmax: Vec<usize> = (0..c).map(|j| first * c + j).collect();
        for i in (first + 1..r).filter(|&i| mask[i]) {
            for j in 0..c {
                let v = xd[i * c + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i * c + j;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::vector(out), Op::MaxPoolRows { x, argmax }, ng))
    }

    /// Column-wise mean over the valid rows of an R×C matrix. Values are
    /// summed in sorted order so the result is independent of row order.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        check_mask("masked_mean_pool", mask, r)?;
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(QbmError::EmptyPool("mean pool over a fully masked input".into()));
        }
        let xd = self.value(x).data();
        let n = T::from_usize(count).expect("count fits");
        let mut col = Vec::with_capacity(count);
        let mut out = Vec::with_capacity(c);
        for j in 0..c {
            col.clear();
            col.extend((0..r).filter(|&i| mask[i]).map(|i| xd[i * c + j]));
            out.push(ordered_sum(&mut col) / n);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::vector(out),
            Op::MeanPoolRows {
                x,
                mask: mask.to_vec(),
                count,
            },
            ng,
        ))
    }

    /// Per-row maximum of an R×C matrix taken over the valid columns.
    /// Rows where `row_mask` is false produce 0.
    pub fn row_max(&mut self, x: Var, row_mask: &[bool], col_mask: &[bool]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        check_mask("row_max rows", row_mask, r)?;
        check_mask("row_max cols", col_mask, c)?;
        if !col_mask.iter().any(|&m| m) {
            return Err(QbmError::EmptyPool("row max over fully masked columns".into()));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); r];
        let mut argmax = vec![None; r];
        for i in 0..r {
            if !row_mask[i] {
                continue;
            }
            let mut best: Option<usize> = None;
            for j in (0..c).filter(|&j| col_mask[j]) {
                let idx = i * c + j;
                if best.map_or(true, |b| xd[idx] > xd[b]) {
                    best = Some(idx);
                }
            }
            out[i] = xd[best.expect("a valid column exists")];
            argmax[i] = best;
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::vector(out), Op::RowMax { x, argmax }, ng))
    }

    /// Softmax over the valid entries of a vector, stabilised by subtracting
    /// the valid maximum. Masked entries are exactly 0.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let n = self.value(x).len();
        check_mask("masked_softmax", mask, n)?;
        let out = masked_softmax_values(self.value(x).data(), mask)?;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::vector(out),
            Op::Softmax {
                x,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut vals = self.value(x).data().to_vec();
        let s = ordered_sum(&mut vals);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by 1/(1-rate). Identity
    /// in evaluation mode.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(QbmError::Config(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let factors = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        self.scale_const(x, factors)
    }

    /// Mean cross-entropy of a B×2 logit matrix against labels in {0, 1}.
    /// Probabilities are clamped to [1e-12, 1] before the logarithm.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        if k != 2 {
            return Err(QbmError::Dimension(format!(
                "cross_entropy: expected B×2 logits, got {:?}",
                self.shape(logits)
            )));
        }
        if labels.len() != b || b == 0 {
            return Err(QbmError::Dimension(format!(
                "cross_entropy: {} labels for {b} rows",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(QbmError::Label(format!("label {bad} is not 0 or 1")));
        }
        let floor = T::from_f64_lossy(1e-12);
        let ld = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * 2);
        let mut clamped = Vec::with_capacity(b);
        let mut losses = Vec::with_capacity(b);
        for i in 0..b {
            let p = softmax2(ld[2 * i], ld[2 * i + 1]);
            probs.extend_from_slice(&p);
            let pl = p[labels[i]];
            clamped.push(pl < floor);
            losses.push(if pl.is_nan() { pl } else { -(pl.max(floor).min(T::one())).ln() });
        }
        let loss = ordered_sum(&mut losses) / T::from_usize(b).expect("batch fits");
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                clamped,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(QbmError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matrix");
                let n = self.value(*b).dims2().expect("matrix").1;
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.ng(*a) {
                    let ga = self.grad_buf(grads, *a);
                    for r in 0..m {
                        for t in 0..k {
                            ga[r * k + t] += dot(&g[r * n..(r + 1) * n], &bd[t * n..(t + 1) * n]);
                        }
                    }
                }
                if self.ng(*b) {
                    let gb = self.grad_buf(grads, *b);
                    for r in 0..m {
                        for t in 0..k {
                            let av = ad[r * k + t];
                            if av == T::zero() {
                                continue;
                            }
                            for (o, &gv) in gb[t * n..(t + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *o += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().expect("matrix");
                let ga = self.grad_buf(grads, *a);
                for x in 0..r {
                    for y in 0..c {
                        ga[x * c + y] += g[y * r + x];
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().map(|&v| -v));
            }
            Op::Mul(a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                self.accumulate(grads, *a, g.iter().zip(bd).map(|(&gv, &bv)| gv * bv));
                self.accumulate(grads, *b, g.iter().zip(ad).map(|(&gv, &av)| gv * av));
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, g.iter().copied());
                if self.ng(*bias) {
                    let c = self.value(*bias).len();
                    let gb = self.grad_buf(grads, *bias);
                    for (idx, &gv) in g.iter().enumerate() {
                        gb[idx % c] += gv;
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() }),
                );
            }
            Op::ScaleConst(x, f) => {
                self.accumulate(grads, *x, g.iter().zip(f).map(|(&gv, &fv)| gv * fv));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.iter().copied()),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate(grads, *p, g[off..off + n].iter().copied());
                    off += n;
                }
            }
            Op::StackRows(rows) => {
                let c = node.value.shape()[1];
                for (r, p) in rows.iter().enumerate() {
                    self.accumulate(grads, *p, g[r * c..(r + 1) * c].iter().copied());
                }
            }
            Op::Gather { table, ids, mask } => {
                let d = node.value.shape()[1];
                let gt = self.grad_buf(grads, *table);
                for (p, (&id, &m)) in ids.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    for (o, &gv) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[p * d..(p + 1) * d]) {
                        *o += gv;
                    }
                }
            }
            Op::ConvText {
                x,
                kernels,
                bias,
                mask,
            } => self.backprop_conv_text(node, g, *x, *kernels, *bias, mask, grads),
            Op::Conv2d { x, kernels, bias } => self.backprop_conv2d(g, *x, *kernels, *bias, grads),
            Op::MaxPool2d { x, argmax } | Op::MaxPoolRows { x, argmax } => {
                if self.ng(*x) {
                    let gx = self.grad_buf(grads, *x);
                    for (&src, &gv) in argmax.iter().zip(g) {
                        gx[src] += gv;
                    }
                }
            }
            Op::MeanPoolRows { x, mask, count } => {
                if self.ng(*x) {
                    let c = g.len();
                    let n = T::from_usize(*count).expect("count fits");
                    let gx = self.grad_buf(grads, *x);
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for j in 0..c {
                            gx[r * c + j] += g[j] / n;
                        }
                    }
                }
            }
            Op::RowMax { x, argmax } => {
                if self.ng(*x) {
                    let gx = self.grad_buf(grads, *x);
                    for (src, &gv) in argmax.iter().zip(g) {
                        if let Some(s) = src {
                            gx[*s] += gv;
                        }
                    }
                }
            }
            Op::Softmax { x, mask } => {
                let y = node.value.data();
                let mut terms: Vec<T> = (0..y.len())
                    .filter(|&j| mask[j])
                    .map(|j| y[j] * g[j])
                    .collect();
                let s = ordered_sum(&mut terms);
                self.accumulate(
                    grads,
                    *x,
                    (0..y.len()).map(|j| if mask[j] { y[j] * (g[j] - s) } else { T::zero() }),
                );
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, std::iter::repeat(g[0]).take(n));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                clamped,
            } => {
                let b = labels.len();
                let scale = g[0] / T::from_usize(b).expect("batch fits");
                let vals = (0..b).flat_map(|i| {
                    (0..2).map(move |c| {
                        if clamped[i] {
                            T::zero()
                        } else {
                            let onehot = if labels[i] == c { T::one() } else { T::zero() };
                            (probs[2 * i + c] - onehot) * scale
                        }
                    })
                });
                self.accumulate(grads, *logits, vals);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv_text(
        &self,
        node: &Node<T>,
        g: &[T],
        x: Var,
        kernels: Var,
        bias: Var,
        mask: &[bool],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (l, d) = self.value(x).dims2().expect("matrix");
        let ks = self.shape(kernels);
        let (f, w) = (ks[0], ks[1]);
        let half = w / 2;
        let out = node.value.data();
        // Gradient through the rectifier; masked outputs are exactly zero.
        let gpre: Vec<T> = g
            .iter()
            .zip(out)
            .map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() })
            .collect();
        if self.ng(bias) {
            let gb = self.grad_buf(grads, bias);
            for p in 0..l {
                for fi in 0..f {
                    gb[fi] += gpre[p * f + fi];
                }
            }
        }
        let xd = self.value(x).data();
        let kd = self.value(kernels).data();
        let taps = |p: usize| {
            (0..w).filter_map(move |o| {
                let q = p as isize + o as isize - half as isize;
                (q >= 0 && q < l as isize && mask[q as usize]).then_some((o, q as usize))
            })
        };
        if self.ng(kernels) {
            let gk = self.grad_buf(grads, kernels);
            for p in 0..l {
                for fi in 0..f {
                    let gv = gpre[p * f + fi];
                    if gv == T::zero() {
                        continue;
                    }
                    for (o, q) in taps(p) {
                        axpy(
                            &mut gk[(fi * w + o) * d..(fi * w + o + 1) * d],
                            gv,
                            &xd[q * d..(q + 1) * d],
                        );
                    }
                }
            }
        }
        if self.ng(x) {
            let gx = self.grad_buf(grads, x);
            for p in 0..l {
                for fi in 0..f {
                    let gv = gpre[p * f + fi];
                    if gv == T::zero() {
                        continue;
                    }
                    for (o, q) in taps(p) {
                        axpy(
                            &mut gx[q * d..(q + 1) * d],
                            gv,
                            &kd[(fi * w + o) * d..(fi * w + o + 1) * d],
                        );
                    }
                }
            }
        }
    }

    fn backprop_conv2d(&self, g: &[T], x: Var, kernels: Var, bias: Var, grads: &mut [Option<Vec<T>>]) {
        let xs = self.shape(x);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let ks = self.shape(kernels);
        let (f, k) = (ks[0], ks[2]);
        let pad = (k / 2) as isize;
        let plane = h * w;
        if self.ng(bias) {
            let gb = self.grad_buf(grads, bias);
            for fi in 0..f {
                let mut s = T::zero();
                for &v in &g[fi * plane..(fi + 1) * plane] {
                    s += v;
                }
                gb[fi] += s;
            }
        }
        let xd = self.value(x).data();
        let kd = self.value(kernels).data();
        let want_k = self.ng(kernels);
        let want_x = self.ng(x);
        let mut gk = if want_k { vec![T::zero(); kd.len()] } else { Vec::new() };
        let mut gx = if want_x { vec![T::zero(); xd.len()] } else { Vec::new() };
        for fi in 0..f {
            let go = &g[fi * plane..(fi + 1) * plane];
            for ci in 0..c {
                let inp = &xd[ci * plane..(ci + 1) * plane];
                for ki in 0..k {
                    let dy = ki as isize - pad;
                    let (y0, y1) = shifted_range(h, dy);
                    for kj in 0..k {
                        let dx = kj as isize - pad;
                        let (x0, x1) = shifted_range(w, dx);
                        let kidx = ((fi * c + ci) * k + ki) * k + kj;
                        let wv = kd[kidx];
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &go[y * w + x0..y * w + x1];
                            let s0 = sy * w + (x0 as isize + dx) as usize;
                            let s1 = sy * w + (x1 as isize + dx) as usize;
                            if want_k {
                                acc += dot(grow, &inp[s0..s1]);
                            }
                            if want_x && wv != T::zero() {
                                let gxs = &mut gx[ci * plane + s0..ci * plane + s1];
                                axpy(gxs, wv, grow);
                            }
                        }
                        if want_k {
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
        if want_k {
            self.accumulate(grads, kernels, gk.into_iter());
        }
        if want_x {
            self.accumulate(grads, x, gx.into_iter());
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, vals: impl Iterator<Item = T>) {
        if !self.ng(v) {
            return;
        }
        let buf = self.grad_buf(grads, v);
        for (o, x) in buf.iter_mut().zip(vals) {
            *o += x;
        }
    }
}

/// Output index range [lo, hi) whose shifted source index `i + shift`
/// stays inside [0, n).
fn shifted_range(n: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift).min(n as isize).max(0) as usize;
    (lo.min(hi), hi)
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

fn softmax2<T: Scalar>(a: T, b: T) -> [T; 2] {
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let z = ea + eb;
    [ea / z, eb / z]
}

/// Masked softmax on plain values; shared by the graph op and by
/// inference code that needs no tape.
pub fn masked_softmax_values<T: Scalar>(x: &[T], mask: &[bool]) -> Result<Vec<T>> {
    if x.len() != mask.len() {
        return Err(QbmError::Dimension(format!(
            "masked_softmax: mask of length {} for {} logits",
            mask.len(),
            x.len()
        )));
    }
    let max = x
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or_else(|| QbmError::EmptyPool("softmax over a fully masked input".into()))?;
    let exps: Vec<T> = x
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - max).exp() } else { T::zero() })
        .collect();
    let mut valid: Vec<T> = exps.iter().zip(mask).filter(|(_, &m)| m).map(|(&e, _)| e).collect();
    let z = ordered_sum(&mut valid);
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Two-class softmax of a logit pair; returns P(class 1).
pub fn positive_probability<T: Scalar>(logits: &[T]) -> T {
    softmax2(logits[0], logits[1])[1]
}
