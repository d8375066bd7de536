//! Central finite-difference verification of tape gradients.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward sweep it is checking.

use super::matrix::Matrix;
use super::tape::{NodeId, Tape};
use super::NumericsError;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative error with a small absolute floor so near-zero gradients
/// compare on absolute terms.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (1e-6 + analytic.abs().max(numeric.abs()))
}

/// Compare tape gradients against central differences.
///
/// `build` must construct a fresh tape from the given parameter values and
/// return the scalar output node plus the leaf node of each parameter, in
/// the same order as `params`. It is called once for the analytic pass and
/// twice per parameter entry for the numeric pass, so it must be a pure
/// function of the matrices it receives.
pub fn central_diff_check<F, E>(
    params: &[(&str, Matrix)],
    build: F,
    step: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&[Matrix]) -> Result<(Tape, NodeId, Vec<NodeId>), E>,
    E: From<NumericsError>,
{
    let mut mats: Vec<Matrix> = params.iter().map(|(_, m)| m.clone()).collect();

    let (mut tape, out, leaves) = build(&mats)?;
    assert_eq!(leaves.len(), params.len(), "one leaf per parameter expected");
    tape.backward(out).map_err(E::from)?;
    let analytic: Vec<Matrix> = leaves.iter().map(|&l| tape.grad(l).clone()).collect();

    let eval = |mats: &[Matrix]| -> Result<f64, E> {
        let (tape, out, _) = build(mats)?;
        Ok(tape.scalar_value(out))
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, entries_checked: 0 };
    for (p, (name, _)) in params.iter().enumerate() {
        for idx in 0..mats[p].len() {
            let orig = mats[p].values()[idx];
            mats[p].values_mut()[idx] = orig + step;
            let f_plus = eval(&mats)?;
            mats[p].values_mut()[idx] = orig - step;
            let f_minus = eval(&mats)?;
            mats[p].values_mut()[idx] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[p].values()[idx];
            let e = rel_err(a, numeric);
            report.entries_checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((name.to_string(), idx));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_checks_clean() {
        let x0 = Matrix::row_vector(vec![0.3, -0.7, 0.1]);
        let report = central_diff_check(
            &[("x", x0)],
            |mats| -> Result<_, NumericsError> {
                let mut tape = Tape::new();
                let x = tape.leaf(mats[0].clone());
                let sq = tape.hadamard(x, x)?;
                let out = tape.sum(sq);
                Ok((tape, out, vec![x]))
            },
            1e-5,
        )
        .unwrap();
        assert_eq!(report.entries_checked, 3);
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn detects_wrong_gradient() {
        // Forward computes sum(2x) but the tape claims d/dx = 1 by using a
        // leaf trick: scale value off-tape so backward sees a plain leaf sum.
        let x0 = Matrix::row_vector(vec![0.5]);
        let report = central_diff_check(
            &[("x", x0)],
            |mats| -> Result<_, NumericsError> {
                let mut tape = Tape::new();
                let doubled = mats[0].map(|v| 2.0 * v);
                let x = tape.leaf(doubled);
                let out = tape.sum(x);
                Ok((tape, out, vec![x]))
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.3, "should flag mismatch, got {}", report.max_rel_err);
    }
}
