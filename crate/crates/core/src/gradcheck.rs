//! Central finite-difference verification of graph gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{ComputeGraph, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coords_checked: usize,
}

/// Which coordinates of each parameter tensor to perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    All,
    /// At most this many coordinates per tensor, sampled without replacement
    /// from a fixed seed.
    Sampled(usize),
}

/// Relative error used throughout: `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compares the reverse-mode gradient of the scalar built by `build` against
/// central differences with step `eps`. `build` receives one registered
/// parameter node per entry of `params`, in order.
pub fn grad_check<F>(build: F, params: &[Tensor], eps: f64, coverage: Coverage) -> Result<GradCheckReport>
where
    F: Fn(&mut ComputeGraph, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor]| -> Result<(ComputeGraph, Vec<Var>, Var)> {
        let mut g = ComputeGraph::new();
        let vars: Vec<Var> = params.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
        let loss = build(&mut g, &vars)?;
        Ok((g, vars, loss))
    };

    let (g, vars, loss) = eval(params)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    compare(params, &analytic, eps, coverage, |work| {
        let (g, _, l) = eval(work)?;
        g.scalar(l)
    })
}

/// Compares precomputed `analytic` gradients of `loss` at `params` with
/// central differences.
pub fn compare<L>(params: &[Tensor], analytic: &[Vec<f64>], eps: f64, coverage: Coverage, loss: L) -> Result<GradCheckReport>
where
    L: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coords_checked: 0,
    };
    for (ti, tensor) in params.iter().enumerate() {
        let coords: Vec<usize> = match coverage {
            Coverage::Sampled(k) if k < tensor.numel() => {
                let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164 ^ ti as u64);
                let mut picked = sample(&mut rng, tensor.numel(), k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..tensor.numel()).collect(),
        };
        for idx in coords {
            let orig = tensor.data()[idx];
            work[ti].data_mut()[idx] = orig + eps;
            let plus = loss(&work)?;
            work[ti].data_mut()[idx] = orig - eps;
            let minus = loss(&work)?;
            work[ti].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[ti][idx], numeric);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((ti, idx));
                report.worst_values = (analytic[ti][idx], numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_checks_tightly() {
        // xᵀ A x with a fixed non-symmetric A.
        let a = Tensor::matrix(3, 3, vec![2.0, 0.5, -1.0, 0.3, 1.5, 0.2, -0.7, 0.1, 3.0]).unwrap();
        let x = Tensor::matrix(3, 1, vec![0.4, -1.2, 0.9]).unwrap();
        let report = grad_check(
            |g, p| {
                let xt = g.transpose(p[1]);
                let ax = g.matmul(p[0], p[1])?;
                g.matmul(xt, ax)
            },
            &[a, x],
            1e-5,
            Coverage::All,
        )
        .unwrap();
        assert_eq!(report.coords_checked, 12);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at exactly the kink: analytic uses the 0 subgradient, the
        // central difference sees slope 1/2.
        let x = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let report = grad_check(
            |g, p| {
                let r = g.relu(p[0]);
                Ok(g.sum(r))
            },
            &[x],
            1e-5,
            Coverage::All,
        )
        .unwrap();
        assert!(report.max_rel_error > 0.5);
        assert_eq!(report.worst, Some((0, 0)));
    }
}
