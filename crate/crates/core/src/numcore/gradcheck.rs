//! Central finite-difference auditing of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::matrix::Matrix;

/// Settings for [`finite_diff_check`].
#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Tensors larger than this get a random coordinate subsample of this
    /// size instead of exhaustive coverage.
    pub max_coords_per_tensor: usize,
    /// Seed for the subsample draw.
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            eps: 1e-5,
            max_coords_per_tensor: 256,
            seed: 0,
        }
    }
}

/// Outcome of one finite-difference audit.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// (tensor index, flat coordinate) of the worst deviation.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Relative error used throughout the audits:
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compares analytic gradients against central differences of `f`.
///
/// `f` re-evaluates the scalar objective at perturbed parameter values; it
/// must be deterministic. `analytic` holds one gradient tensor per parameter
/// tensor, shape-aligned with `params`. Returns the max relative error over
/// all checked coordinates; a non-finite objective value at any perturbed
/// point is an audit failure.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[Matrix],
    analytic: &[Matrix],
    opts: FdOptions,
) -> Result<FdReport>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::AuditFailure(format!(
            "parameter/gradient count mismatch: {} vs {}",
            params.len(),
            analytic.len()
        )));
    }
    if opts.eps <= 0.0 {
        return Err(Error::AuditFailure("eps must be > 0".into()));
    }
    let mut work: Vec<Matrix> = params.to_vec();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (ti, p) in params.iter().enumerate() {
        if !analytic[ti].same_shape(p) {
            return Err(Error::AuditFailure(format!(
                "gradient {} shape mismatch",
                ti
            )));
        }
        let coords: Vec<usize> = if p.len() > opts.max_coords_per_tensor {
            let mut all: Vec<usize> = (0..p.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (ti as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            all.shuffle(&mut rng);
            let mut picked = all[..opts.max_coords_per_tensor].to_vec();
            picked.sort_unstable();
            picked
        } else {
            (0..p.len()).collect()
        };
        for ci in coords {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + opts.eps;
            let plus = f(&work)?;
            work[ti].data_mut()[ci] = orig - opts.eps;
            let minus = f(&work)?;
            work[ti].data_mut()[ci] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::AuditFailure(format!(
                    "objective non-finite at perturbed point (tensor {}, coord {})",
                    ti, ci
                )));
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let e = rel_err(analytic[ti].data()[ci], numeric);
            report.coords_checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((ti, ci));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tape::Tape;

    #[test]
    fn quadratic_scalar_case() {
        // f(w) = w^2 at w = 3: analytic 6, numeric 6, tiny relative error.
        let w = Matrix::filled(1, 1, 3.0);
        let analytic = Matrix::filled(1, 1, 6.0);
        let report = finite_diff_check(
            |p| {
                let v = p[0].get(0, 0);
                Ok(v * v)
            },
            &[w],
            &[analytic],
            FdOptions {
                eps: 1e-5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{}", report.max_rel_err);
    }

    #[test]
    fn non_finite_objective_is_audit_failure() {
        let w = Matrix::filled(1, 1, 0.0);
        let g = Matrix::filled(1, 1, 0.0);
        let out = finite_diff_check(
            |p| Ok(1.0 / p[0].get(0, 0).abs().min(0.0)),
            &[w],
            &[g],
            FdOptions::default(),
        );
        assert!(matches!(out, Err(Error::AuditFailure(_))));
    }

    #[test]
    fn taped_expression_passes_audit() {
        let x = Matrix::from_vec(4, 3, vec![
            0.6, -1.1, 0.4, 1.3, 0.2, -0.8, -0.5, 0.9, 1.7, 0.3, -1.4, 0.8,
        ])
        .unwrap();
        let w = Matrix::from_vec(3, 2, vec![0.5, -0.7, 1.1, 0.3, -0.9, 0.6]).unwrap();
        let target = Matrix::filled(1, 2, 0.25);

        let eval = |params: &[Matrix]| -> crate::error::Result<f64> {
            let mut tape = Tape::new();
            let xn = tape.leaf(params[0].clone());
            let wn = tape.leaf(params[1].clone());
            let h = tape.matmul(xn, wn)?;
            let r = tape.relu(h);
            let s = tape.softmax_rows(r);
            let m = tape.mean_over_time(s)?;
            let loss = tape.mse_vs(m, &target)?;
            Ok(tape.scalar(loss))
        };

        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let wn = tape.leaf(w.clone());
        let h = tape.matmul(xn, wn).unwrap();
        let r = tape.relu(h);
        let s = tape.softmax_rows(r);
        let m = tape.mean_over_time(s).unwrap();
        let loss = tape.mse_vs(m, &target).unwrap();
        tape.backward(loss).unwrap();
        let analytic = vec![tape.grad(xn).unwrap(), tape.grad(wn).unwrap()];

        let report =
            finite_diff_check(eval, &[x, w], &analytic, FdOptions::default()).unwrap();
        assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
    }
}
