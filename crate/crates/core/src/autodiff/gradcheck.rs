//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Step used by the crate's own checks for the active precision.
#[cfg(not(feature = "f32"))]
pub const DEFAULT_EPS: Scalar = 1e-5;
#[cfg(feature = "f32")]
pub const DEFAULT_EPS: Scalar = 3e-3;

/// Relative error bound the crate's gradient checks must meet.
#[cfg(not(feature = "f32"))]
pub const GRAD_TOLERANCE: Scalar = 1e-6;
#[cfg(feature = "f32")]
pub const GRAD_TOLERANCE: Scalar = 1e-3;

/// Compares the tape's analytic gradients of `f` against central differences.
///
/// Returns `max |analytic − numeric| / max(1, |analytic|, |numeric|)` over
/// every coordinate of every tensor in `params`. All of `params` are treated
/// as trainable, regardless of their own `requires_grad` flag.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: Scalar) -> Result<Scalar>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "grad_check eps must be positive, got {eps}"
        )));
    }
    let params: Vec<Tensor> = params.iter().map(|p| p.clone().with_requires_grad(true)).collect();

    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p)).collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?
    };

    let eval = |ps: &[Tensor]| -> Result<Scalar> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.constant(p)).collect();
        let v = f(&tape, &vars)?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check objective at a perturbed point".into()))
        }
    };

    let mut worst: Scalar = 0.0;
    let mut probe = params.clone();
    for (pi, p) in params.iter().enumerate() {
        let zeros = vec![0.0; p.numel()];
        let g = analytic.get(p.id()).unwrap_or(&zeros);
        for (j, &a) in g.iter().enumerate() {
            let orig = p.data()[j];
            probe[pi].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[pi].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (a - numeric).abs() / (1.0 as Scalar).max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm_is_exact() {
        let x = Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let err = grad_check(|_, v| Ok(v[0].mul(&v[0])?.sum().scale(0.5)), &[x], DEFAULT_EPS).unwrap();
        assert!(err < GRAD_TOLERANCE, "{err}");
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(|t, _| t.input(1, 1, vec![4.0]), &[x], 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        // 1/relu(x) blows up at the perturbed points on the negative side
        let r = grad_check(
            |t, v| {
                let r = v[0].relu();
                let one = t.input(1, 1, vec![1.0])?;
                let inv = one.mul(&r)?; // 0 at x ≤ 0
                Ok(inv.scale(Scalar::INFINITY).sum())
            },
            &[x],
            1e-4,
        );
        assert!(r.is_err());
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert!(grad_check(|_, v| Ok(v[0].sum()), &[x], 0.0).is_err());
    }
}
