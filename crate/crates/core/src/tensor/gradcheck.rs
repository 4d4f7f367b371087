//! Central finite-difference gradient checking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor};
use crate::error::Error;
use crate::Result;

/// Above this many coordinates, a seeded random subsample is checked.
const SUBSAMPLE_LIMIT: usize = 10_000;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, coordinate) of the worst checked entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates skipped as non-differentiable kink/tie points.
    pub skipped: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Check a user-supplied analytic gradient against central differences.
pub fn grad_check_fn(
    eval: impl Fn(&[f64]) -> Result<f64>,
    analytic: &[f64],
    x0: &[f64],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if analytic.len() != x0.len() {
        return Err(Error::shape("grad_check_fn: gradient/point length mismatch"));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut x = x0.to_vec();
    for j in 0..x.len() {
        let numeric = central_diff(&eval, &mut x, j, eps)?;
        let err = rel_err(analytic[j], numeric);
        if err > tol {
            // Distinguish a kink (numeric estimate unstable in eps)
            // from a wrong gradient (numeric stable, analytic off).
            let finer = central_diff(&eval, &mut x, j, eps / 2.0)?;
            if (finer - numeric).abs() > 0.25 * (numeric - analytic[j]).abs() {
                report.skipped += 1;
                continue;
            }
        }
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((0, j));
        }
    }
    if report.max_rel_err > tol {
        let (_, j) = report.worst.unwrap();
        return Err(Error::GradCheck(format!(
            "coordinate {j}: relative error {:.3e} exceeds {tol:.1e}",
            report.max_rel_err
        )));
    }
    Ok(report)
}

fn central_diff(
    eval: &impl Fn(&[f64]) -> Result<f64>,
    x: &mut [f64],
    j: usize,
    eps: f64,
) -> Result<f64> {
    let orig = x[j];
    x[j] = orig + eps;
    let plus = eval(x)?;
    x[j] = orig - eps;
    let minus = eval(x)?;
    x[j] = orig;
    Ok((plus - minus) / (2.0 * eps))
}

/// Check the tape's backward pass for a graph-building closure.
///
/// `build` receives one parameter tensor per entry of `x0` (with the
/// matching shape) and must return a scalar loss. Every parameter
/// coordinate (subsampled above 10k) is compared against central
/// differences at step `eps`.
pub fn grad_check<F>(
    shapes: &[Vec<usize>],
    x0: &[Vec<f64>],
    build: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Tensor]) -> Result<Tensor>,
{
    if shapes.len() != x0.len() {
        return Err(Error::shape("grad_check: shapes/values length mismatch"));
    }
    let run = |xs: &[Vec<f64>]| -> Result<(Graph, Vec<Tensor>, Tensor)> {
        let mut g = Graph::new();
        let params: Vec<Tensor> = xs
            .iter()
            .zip(shapes)
            .map(|(v, s)| g.param(v.clone(), s.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &params)?;
        Ok((g, params, loss))
    };

    let (g, params, loss) = run(x0)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .zip(x0)
        .map(|(&p, v)| grads.get(p).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; v.len()]))
        .collect();

    let total: usize = x0.iter().map(Vec::len).sum();
    let mut coords: Vec<(usize, usize)> = (0..x0.len())
        .flat_map(|p| (0..x0[p].len()).map(move |j| (p, j)))
        .collect();
    if total > SUBSAMPLE_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        coords.shuffle(&mut rng);
        coords.truncate(SUBSAMPLE_LIMIT);
        coords.sort_unstable();
    }

    let eval = |xs: &[Vec<f64>]| -> Result<f64> {
        let (g, _, loss) = run(xs)?;
        Ok(g.values(loss)[0])
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut xs = x0.to_vec();
    for (p, j) in coords {
        let diff_at = |xs: &mut Vec<Vec<f64>>, step: f64| -> Result<f64> {
            let orig = xs[p][j];
            xs[p][j] = orig + step;
            let plus = eval(xs)?;
            xs[p][j] = orig - step;
            let minus = eval(xs)?;
            xs[p][j] = orig;
            Ok((plus - minus) / (2.0 * step))
        };
        let numeric = diff_at(&mut xs, eps)?;
        let err = rel_err(analytic[p][j], numeric);
        if err > tol {
            let finer = diff_at(&mut xs, eps / 2.0)?;
            if (finer - numeric).abs() > 0.25 * (numeric - analytic[p][j]).abs() {
                report.skipped += 1;
                continue;
            }
        }
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((p, j));
        }
    }
    if report.max_rel_err > tol {
        let (p, j) = report.worst.unwrap();
        return Err(Error::GradCheck(format!(
            "param {p} coordinate {j}: relative error {:.3e} exceeds {tol:.1e}",
            report.max_rel_err
        )));
    }
    Ok(report)
}
