//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Graph, Var};

/// Result of [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, flat coordinate)` at which the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Compare analytic gradients of `f` against `(f(p+h) - f(p-h)) / 2h` for
/// every coordinate of every tensor in `params`.
///
/// `f` receives a fresh graph and one leaf per parameter and must return a
/// scalar. The error per coordinate is `|ga - gn| / max(1, |ga|, |gn|)`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::contract(format!("step {h} outside [1e-7, 1e-3]")));
    }

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    if g.value(root).item().to_bits() != first.to_bits() {
        return Err(Error::Determinism {
            first,
            second: g.value(root).item(),
        });
    }
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for ci in 0..grad.len() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[ci] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let ga = grad.data()[ci];
            let err = (ga - numeric).abs() / 1f64.max(ga.abs()).max(numeric.abs());
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn sum_of_squares_is_near_exact() {
        let w = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let report = finite_diff_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.coordinates, 2);
    }

    #[test]
    fn step_out_of_range() {
        let w = Tensor::zeros(&[1]);
        let f = |g: &mut Graph, v: &[Var]| Ok(g.sum(v[0]));
        assert!(finite_diff_check(f, &[w.clone()], 1e-2).is_err());
        assert!(finite_diff_check(f, &[w], 1e-8).is_err());
    }

    #[test]
    fn nondeterminism_detected() {
        let calls = Cell::new(0u32);
        let w = Tensor::zeros(&[1]);
        let err = finite_diff_check(
            |g, v| {
                calls.set(calls.get() + 1);
                let s = g.sum(v[0]);
                let bump = g.constant(Tensor::scalar(calls.get() as f64));
                g.add(s, bump)
            },
            &[w],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Determinism { .. }));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu at exactly 0 has a kink; the central difference sees 0.5.
        let w = Tensor::zeros(&[1]);
        let report = finite_diff_check(
            |g, v| {
                let r = g.relu(v[0]);
                Ok(g.sum(r))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!((report.max_rel_error - 0.5).abs() < 1e-9);
    }
}
