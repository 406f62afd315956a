use super::graph::{Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Compares the analytic gradient of a scalar function against central
/// finite differences.
///
/// `build` receives a fresh graph and the leaf bound as a parameter and must
/// return the scalar root. Returns the maximum over leaf elements of
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(leaf: &Tensor, step: Scalar, build: F) -> Result<Scalar>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("grad_check step must be > 0, got {step}")));
    }
    let mut g = Graph::new();
    let x = g.param(leaf.clone());
    let root = build(&mut g, x)?;
    g.backward(root)?;
    let analytic = g
        .grad(x)
        .map(<[Scalar]>::to_vec)
        .unwrap_or_else(|| vec![0.0; leaf.numel()]);

    let eval = |t: Tensor| -> Result<Scalar> {
        let mut g = Graph::new();
        let x = g.constant(t);
        let root = build(&mut g, x)?;
        Ok(g.value(root).data()[0])
    };

    let mut worst: Scalar = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = leaf.clone();
        plus.data_mut()[i] += step;
        let mut minus = leaf.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
