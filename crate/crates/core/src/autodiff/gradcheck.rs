//! Central finite-difference verification of backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares backward gradients against central differences for every
/// element of every input.
///
/// `forward` builds a computation over leaves created from `inputs`. A
/// non-scalar output is reduced to a scalar by a fixed pseudo-random
/// projection so every output element contributes. The relative error per
/// element is |a - n| / max(1e-8, |a| + |n|).
pub fn grad_check<F>(inputs: &[Tensor<f64>], forward: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let projected = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let out = forward(g, vars)?;
        let n = g.value(out).len();
        if n == 1 {
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
        let scaled = g.scale_const(out, w)?;
        Ok(g.sum(scaled))
    };
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = projected(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = projected(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked,
    })
}
