//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values, so it is
//! independent of every backward rule it is used to verify.

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per-input `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub rel_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences of step `h`.
///
/// `f` receives the graph and one parameter leaf per entry of `inputs` and
/// must return a scalar node.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut numeric = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * h);
        }
        let diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        rel_errors.push(if denom < 1e-12 { diff } else { diff / denom });
    }
    Ok(GradCheckReport { rel_errors })
}

/// Reduces any node to a scalar through a fixed random projection, so every
/// output element contributes with a distinct weight.
pub fn random_projection<R: Rng>(g: &mut Graph, x: Var, rng: &mut R) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = g.constant(Tensor::uniform(&shape, -1.0, 1.0, rng));
    let y = g.mul(x, w)?;
    g.sum(y)
}
