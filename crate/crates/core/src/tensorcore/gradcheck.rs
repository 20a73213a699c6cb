use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences, both in 64-bit.
///
/// `f` receives a fresh graph and the leaf holding `x` and must return a
/// scalar node. Returns `max_i |a_i - n_i| / max(1e-8, |a_i| + |n_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let root = f(&mut g, leaf)?;
    g.backward(root)?;
    let analytic = g.grad(leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.leaf(probe, false);
        let root = f(&mut g, leaf)?;
        Ok(g.value(root).data()[0])
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
