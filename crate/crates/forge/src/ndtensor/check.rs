//! Central finite-difference gradient checking (the autodiff test oracle).

use super::{backward, Scalar, Tape, Tensor};
use crate::{Error, Result};

/// Per-check summary produced by [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub n_elements: usize,
    pub tol: f64,
}

impl FiniteDiffReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Compare the reverse-mode gradient of a scalar-valued function against
/// central finite differences with the given step.
///
/// The relative error of element `i` is `|a_i − n_i| / max(1, |a_i|, |n_i|)`.
/// `f` must be deterministic; stochastic ops must re-seed internally.
pub fn finite_diff_check<F>(f: &F, x0: &Tensor<f64>, step: f64, tol: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    // Reverse-mode gradient.
    let tape: Tape<f64> = Tape::new();
    let x = tape.var(x0.data().to_vec(), x0.shape())?;
    let y = f(&x)?;
    if y.len() != 1 {
        return Err(Error::Shape(format!(
            "finite_diff_check: f must be scalar-valued, got {:?}",
            y.shape()
        )));
    }
    // A function that never touches x leaves the output off the tape; its
    // gradient is zero everywhere.
    let analytic: Vec<f64> = if y.requires_grad() {
        backward(&y)?;
        match x.grad() {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; x0.len()],
        }
    } else {
        vec![0.0; x0.len()]
    };

    // Central differences.
    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0usize;
    let base = x0.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let yp = f(&Tensor::from_vec(plus, x0.shape())?)?.item()?;
        let ym = f(&Tensor::from_vec(minus, x0.shape())?)?.item()?;
        let numeric = (yp - ym) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(FiniteDiffReport {
        max_rel_err,
        worst_index,
        n_elements: base.len(),
        tol,
    })
}

/// Nudge values away from the kink/tie points of relu and maxpool so the
/// finite-difference probe never straddles a non-differentiable point.
pub fn nudge_away_from_ties<S: Scalar>(data: &mut [S], margin: f64) {
    let m = super::s::<S>(margin);
    for v in data.iter_mut() {
        if v.abs() < m {
            *v = if *v < S::zero() { -m } else { m };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_exact() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5], &[3]).unwrap();
        let rep = finite_diff_check(&|t: &Tensor<f64>| Ok(t.sum_all()), &x, 1e-4, 1e-4).unwrap();
        assert!(rep.passed(), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn constant_function_has_zero_grads() {
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let rep = finite_diff_check(
            &|_t: &Tensor<f64>| Ok(Tensor::scalar(3.5)),
            &x,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed());
        assert_eq!(rep.max_rel_err, 0.0);
    }

    #[test]
    fn quadratic_matches() {
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.2, 2.1], &[4]).unwrap();
        let rep = finite_diff_check(
            &|t: &Tensor<f64>| Ok(t.mul(t)?.sum_all()),
            &x,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed(), "max rel err {}", rep.max_rel_err);
    }
}
