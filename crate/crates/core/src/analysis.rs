//! Error norms, regularity statistics and empirical convergence orders.
//!
//! Errors are measured on the grid of the solution: the max over grid points
//! for `Y`, a left-endpoint quadrature of `∫ E|δZ|² dt` for `Z`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{BsdeError, Result};
use crate::paths::{PathEnsemble, PathRef, Partition};
use crate::problems::{BsdeProblem, Reference};
use crate::schemes::DiscreteSolution;

const BATCHES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorReport {
    pub p: f64,
    /// `(E max_i |δY_i|^p)^{1/p}`.
    pub err_y_max_p: f64,
    pub err_y_stderr: f64,
    /// `(Σ_{i<n} Δ_i E|δZ_i|²)^{1/2}`.
    pub err_z_int_l2: f64,
    pub err_z_stderr: f64,
    /// `(E max_i {|δY_i|^p + |δZ_i|^p})^{1/p}`.
    pub err_max_joint_p: f64,
    pub err_joint_stderr: f64,
    pub n_paths: usize,
    pub mesh: f64,
}

/// Mean with a batch-means standard error of the mean.
fn batch_mean(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let batches = BATCHES.min(n);
    if batches < 2 {
        return (mean, f64::NAN);
    }
    let means: Vec<f64> = (0..batches)
        .map(|b| {
            let (lo, hi) = (b * n / batches, (b + 1) * n / batches);
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (batches - 1) as f64;
    (mean, (var / batches as f64).sqrt())
}

/// `m^{1/q}` and its delta-method standard error.
fn root(values: &[f64], q: f64) -> (f64, f64) {
    let (m, se) = batch_mean(values);
    if m <= 0.0 {
        return (0.0, 0.0);
    }
    let r = m.powf(1.0 / q);
    (r, r / (q * m) * se)
}

struct PathErrors {
    y_max: f64,
    z_int: f64,
    joint_max: f64,
}

fn reduce(partition: &Partition, per_path: Vec<PathErrors>, p: f64) -> ErrorReport {
    let take = |f: fn(&PathErrors) -> f64| per_path.iter().map(f).collect::<Vec<_>>();
    let (err_y_max_p, err_y_stderr) = root(&take(|e| e.y_max), p);
    let (err_z_int_l2, err_z_stderr) = root(&take(|e| e.z_int), 2.0);
    let (err_max_joint_p, err_joint_stderr) = root(&take(|e| e.joint_max), p);
    ErrorReport {
        p,
        err_y_max_p,
        err_y_stderr,
        err_z_int_l2,
        err_z_stderr,
        err_max_joint_p,
        err_joint_stderr,
        n_paths: per_path.len(),
        mesh: partition.mesh(),
    }
}

fn path_errors(
    partition: &Partition,
    p: f64,
    terminal_z: bool,
    dy: impl Fn(usize) -> f64,
    dz: impl Fn(usize) -> f64,
) -> PathErrors {
    let n = partition.n();
    let mut out = PathErrors {
        y_max: 0.0,
        z_int: 0.0,
        joint_max: 0.0,
    };
    for i in 0..=n {
        let ey = dy(i).abs().powf(p);
        let mut joint = ey;
        if i < n {
            let ez = dz(i).abs();
            out.z_int += partition.dt(i) * ez * ez;
            joint += ez.powf(p);
        } else if terminal_z {
            joint += dz(i).abs().powf(p);
        }
        out.y_max = out.y_max.max(ey);
        out.joint_max = out.joint_max.max(joint);
    }
    out
}

fn check_order(p: f64) -> Result<()> {
    if p >= 1.0 && p.is_finite() {
        Ok(())
    } else {
        Err(BsdeError::InvalidArgument(format!("norm order must be >= 1, got {p}")))
    }
}

fn reference_of(problem: &BsdeProblem) -> Result<&Reference> {
    problem.reference.as_ref().ok_or(BsdeError::NoReference)
}

/// Errors of `solution` against the closed-form solution of `problem` on the
/// paths of `ensemble` (the ensemble the solution was computed on).
pub fn error_report(
    solution: &DiscreteSolution,
    problem: &BsdeProblem,
    ensemble: &PathEnsemble,
    p: f64,
) -> Result<ErrorReport> {
    check_order(p)?;
    let reference = reference_of(problem)?;
    let partition = &solution.partition;
    let idx = ensemble.fine().subset_indices(partition)?;
    if solution.n_paths() != ensemble.n_paths() {
        return Err(BsdeError::DimensionMismatch(format!(
            "solution has {} paths, ensemble {}",
            solution.n_paths(),
            ensemble.n_paths()
        )));
    }
    let per_path = ensemble.map_paths(|q, path| {
        path_errors(
            partition,
            p,
            solution.terminal_z_is_estimate,
            |i| solution.y[i][q] - (reference.y)(&path, idx[i]),
            |i| solution.z[i][q] - (reference.z)(&path, idx[i]),
        )
    });
    Ok(reduce(partition, per_path, p))
}

/// Errors of `solution` against a finer solution computed on the same paths,
/// for problems without a closed form.
pub fn error_report_against(
    solution: &DiscreteSolution,
    reference: &DiscreteSolution,
    p: f64,
) -> Result<ErrorReport> {
    check_order(p)?;
    let partition = &solution.partition;
    let idx = reference.partition.subset_indices(partition)?;
    if solution.n_paths() != reference.n_paths() {
        return Err(BsdeError::DimensionMismatch(format!(
            "solution has {} paths, reference {}",
            solution.n_paths(),
            reference.n_paths()
        )));
    }
    let per_path = (0..solution.n_paths())
        .into_par_iter()
        .map(|q| {
            path_errors(
                partition,
                p,
                solution.terminal_z_is_estimate,
                |i| solution.y[i][q] - reference.y[idx[i]][q],
                |i| solution.z[i][q] - reference.z[idx[i]][q],
            )
        })
        .collect();
    Ok(reduce(partition, per_path, p))
}

/// Closed-form `(Y, Z)` rows at the points of `partition`, node-major.
pub fn reference_grid(
    problem: &BsdeProblem,
    ensemble: &PathEnsemble,
    partition: &Partition,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let reference = reference_of(problem)?;
    let idx = ensemble.fine().subset_indices(partition)?;
    let per_path = ensemble.map_paths(|_, path| {
        let y: Vec<f64> = idx.iter().map(|&k| (reference.y)(&path, k)).collect();
        let z: Vec<f64> = idx.iter().map(|&k| (reference.z)(&path, k)).collect();
        (y, z)
    });
    let transpose = |pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| {
        (0..idx.len())
            .map(|i| per_path.iter().map(|row| pick(row)[i]).collect())
            .collect()
    };
    Ok((transpose(|r| &r.0), transpose(|r| &r.1)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `(mesh, error)` pairs used in the fit.
    pub levels: Vec<(f64, f64)>,
    /// Levels left out because the error was zero or not finite.
    pub excluded: Vec<(f64, f64)>,
}

/// Least-squares line through `(log mesh, log error)`.
pub fn fit_rate(levels: &[(f64, f64)]) -> Result<RateFit> {
    let (used, excluded): (Vec<_>, Vec<_>) = levels
        .iter()
        .copied()
        .partition(|&(h, e)| e > 0.0 && e.is_finite() && h > 0.0 && h.is_finite());
    if used.len() < 3 {
        return Err(BsdeError::TooFewLevels(used.len()));
    }
    let k = used.len() as f64;
    let xs: Vec<f64> = used.iter().map(|l| l.0.ln()).collect();
    let ys: Vec<f64> = used.iter().map(|l| l.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(BsdeError::InvalidArgument(
            "rate fit needs at least two distinct meshes".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        levels: used,
        excluded,
    })
}

/// `max_{s<t} mean_paths |Z_t - Z_s|^p / (t - s)^{p/2}` over grid points.
/// `z` is node-major with one row per point of `partition`.
pub fn holder_statistic(z: &[Vec<f64>], partition: &Partition, p: f64) -> Result<f64> {
    if !(p >= 2.0) {
        return Err(BsdeError::InvalidArgument(format!("Hölder order must be >= 2, got {p}")));
    }
    let times = partition.times();
    if z.len() != times.len() || z.len() < 2 {
        return Err(BsdeError::DimensionMismatch(format!(
            "{} rows for {} grid points",
            z.len(),
            times.len()
        )));
    }
    let pairs: Vec<(usize, usize)> = (0..z.len())
        .flat_map(|s| (s + 1..z.len()).map(move |t| (s, t)))
        .collect();
    let ratios: Vec<f64> = pairs
        .par_iter()
        .map(|&(s, t)| {
            let m = z[s]
                .iter()
                .zip(&z[t])
                .map(|(a, b)| (b - a).abs().powf(p))
                .sum::<f64>()
                / z[s].len() as f64;
            m / (times[t] - times[s]).powf(0.5 * p)
        })
        .collect();
    Ok(ratios.into_iter().fold(0.0, f64::max))
}

/// `Σ_i Σ_{fine t ∈ [t_i, t_{i+1})} (E|Z_t - Z_{t_i}|² + E|Z_t - Z_{t_{i+1}}|²) δt`
/// with the closed-form `Z` on every fine point.
pub fn l2_regularity_statistic(
    problem: &BsdeProblem,
    ensemble: &PathEnsemble,
    coarse: &Partition,
) -> Result<f64> {
    let reference = reference_of(problem)?;
    let fine = ensemble.fine();
    let idx = fine.subset_indices(coarse)?;
    let per_path = ensemble.map_paths(|_, path: PathRef<'_>| {
        let mut acc = 0.0;
        for i in 0..coarse.n() {
            let left = (reference.z)(&path, idx[i]);
            let right = (reference.z)(&path, idx[i + 1]);
            for k in idx[i]..idx[i + 1] {
                let z = (reference.z)(&path, k);
                acc += ((z - left).powi(2) + (z - right).powi(2)) * fine.dt(k);
            }
        }
        acc
    });
    Ok(per_path.iter().sum::<f64>() / per_path.len() as f64)
}
