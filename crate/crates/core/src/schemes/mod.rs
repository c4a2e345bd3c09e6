//! Backward time-stepping solvers.
//!
//! * [`solve_explicit`]: `Z` frozen at the right end of each interval.
//! * [`solve_implicit`]: `Z` solved on each interval by Picard iteration.
//! * [`solve_malliavin`]: `Z` read off a Malliavin representation with
//!   discrete stochastic-exponential weights, for deterministic linear
//!   generators.
//!
//! `Z` is represented as piecewise constant per interval and extracted with
//! the projection `E(M ΔW_i | F_{t_i}) / Δ_i`.

mod backend;
mod weights;

use serde::{Deserialize, Serialize};

use crate::condexp::EstimatorKind;
use crate::error::{BsdeError, Result};
use crate::paths::{mesh_stats, PathEnsemble, Partition};
use crate::problems::{eval_terminal, malliavin_terminal, BsdeProblem};
use backend::{Backend, ExactBackend, NestedBackend, RegressionBackend, ZArg};
pub use weights::{discrete_weights, WeightVariant};
use weights::{linear_part, WeightPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Explicit,
    Implicit,
    Malliavin,
}

impl SchemeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SchemeKind::Explicit => "explicit",
            SchemeKind::Implicit => "implicit",
            SchemeKind::Malliavin => "malliavin",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardConfig {
    #[serde(default = "PicardConfig::default_tol")]
    pub tol: f64,
    #[serde(default = "PicardConfig::default_max_iter")]
    pub max_iter: usize,
}

impl PicardConfig {
    fn default_tol() -> f64 {
        1e-10
    }

    fn default_max_iter() -> usize {
        50
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(BsdeError::InvalidArgument(format!(
                "picard.tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(BsdeError::InvalidArgument("picard.max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            tol: Self::default_tol(),
            max_iter: Self::default_max_iter(),
        }
    }
}

/// Per-interval Picard diagnostics, indexed by interval `i`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PicardStats {
    pub iters: Vec<usize>,
    /// Ensemble L² distances between successive iterates.
    pub residuals: Vec<Vec<f64>>,
}

impl PicardStats {
    pub fn max_iters(&self) -> usize {
        self.iters.iter().copied().max().unwrap_or(0)
    }

    /// `‖z^{(k+1)} - z^{(k)}‖ / ‖z^{(k)} - z^{(k-1)}‖` on interval `i`.
    pub fn ratios(&self, i: usize) -> Vec<f64> {
        self.residuals[i].windows(2).map(|r| r[1] / r[0]).collect()
    }
}

/// `(Y, Z)` on the grid, node-major: `y[i][p]` is `Y_{t_i}` on path `p`.
#[derive(Debug, Clone)]
pub struct DiscreteSolution {
    pub partition: Partition,
    pub y: Vec<Vec<f64>>,
    /// Row `n` is 0 (explicit), the last-interval value (implicit) or `D_T ξ` (Malliavin).
    pub z: Vec<Vec<f64>>,
    pub scheme: SchemeKind,
    pub picard: Option<PicardStats>,
    /// True when row `n` of `z` approximates `Z_T` and belongs in error norms.
    pub terminal_z_is_estimate: bool,
    pub warnings: Vec<String>,
}

impl DiscreteSolution {
    pub fn n(&self) -> usize {
        self.partition.n()
    }

    pub fn n_paths(&self) -> usize {
        self.y.first().map_or(0, Vec::len)
    }
}

/// Everything that selects and tunes a scheme.
#[derive(Debug, Clone, Default)]
pub struct SchemeConfig {
    pub picard: PicardConfig,
    pub weight_variant: WeightVariant,
    /// Warn when some `Δ_i / Δ_{i+1}` exceeds this bound.
    pub mesh_ratio_limit: Option<f64>,
}

/// Run `kind` and attach a mesh-ratio warning when the partition violates the
/// configured bound.
pub fn solve(
    kind: SchemeKind,
    problem: &BsdeProblem,
    partition: &Partition,
    ensemble: &PathEnsemble,
    estimator: &EstimatorKind,
    config: &SchemeConfig,
) -> Result<DiscreteSolution> {
    let mut sol = match kind {
        SchemeKind::Explicit => solve_explicit(problem, partition, ensemble, estimator),
        SchemeKind::Implicit => solve_implicit(problem, partition, ensemble, estimator, config.picard),
        SchemeKind::Malliavin => {
            solve_malliavin(problem, partition, ensemble, estimator, config.weight_variant)
        }
    }?;
    if let Some(limit) = config.mesh_ratio_limit {
        let (_, ratio) = mesh_stats(partition);
        if ratio > limit {
            let msg = format!("mesh ratio {ratio} exceeds the configured bound {limit}");
            log::warn!("{msg}");
            sol.warnings.push(msg);
        }
    }
    Ok(sol)
}

/// Rows of one backward sweep before terminal values are attached.
struct Sweep {
    y: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    picard: Option<PicardStats>,
    warnings: Vec<String>,
}

fn with_backend<T>(
    problem: &BsdeProblem,
    partition: &Partition,
    ensemble: &PathEnsemble,
    estimator: &EstimatorKind,
    run: impl BackendRunner<Output = T>,
) -> Result<T> {
    estimator.validate()?;
    if (partition.horizon() - problem.horizon).abs() > 1e-12 * problem.horizon.max(1.0) {
        return Err(BsdeError::InvalidArgument(format!(
            "partition horizon {} does not match problem horizon {}",
            partition.horizon(),
            problem.horizon
        )));
    }
    let view = ensemble.coarsen(partition)?;
    match estimator {
        EstimatorKind::Exact => run.run(&ExactBackend::new(problem, ensemble.fine(), &view)?),
        EstimatorKind::Regression(spec) => {
            run.run(&RegressionBackend::new(problem, ensemble, &view, *spec)?)
        }
        EstimatorKind::NestedMc { inner } => {
            run.run(&NestedBackend::new(problem, ensemble, &view, *inner)?)
        }
    }
}

trait BackendRunner {
    type Output;
    fn run<B: Backend>(self, backend: &B) -> Result<Self::Output>;
}

fn rows<B: Backend>(b: &B, fields: &[B::Field]) -> Vec<Vec<f64>> {
    fields.iter().enumerate().map(|(i, f)| b.eval(i, f)).collect()
}

struct Explicit {
    n: usize,
}

impl BackendRunner for Explicit {
    type Output = Sweep;

    fn run<B: Backend>(self, b: &B) -> Result<Sweep> {
        let n = self.n;
        let mut ys = vec![b.zero(); n];
        let mut zs = vec![b.zero(); n];
        let mut y = b.terminal();
        let mut z = b.zero();
        for i in (0..n).rev() {
            let (ey, zbar) = b.project(i, &y, ZArg::Next(&z))?;
            ys[i] = ey.clone();
            zs[i] = zbar.clone();
            y = ey;
            z = zbar;
        }
        Ok(Sweep {
            y: rows(b, &ys),
            z: rows(b, &zs),
            picard: None,
            warnings: b.take_warnings(),
        })
    }
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (s / a.len() as f64).sqrt()
}

struct Implicit {
    n: usize,
    picard: PicardConfig,
    z_free: bool,
}

impl BackendRunner for Implicit {
    type Output = Sweep;

    fn run<B: Backend>(self, b: &B) -> Result<Sweep> {
        let n = self.n;
        let mut ys = vec![b.zero(); n];
        let mut zs = vec![b.zero(); n];
        let mut stats = PicardStats {
            iters: vec![0; n],
            residuals: vec![Vec::new(); n],
        };
        let mut y = b.terminal();
        for i in (0..n).rev() {
            let mut z = if i + 1 == n { b.zero() } else { zs[i + 1].clone() };
            let mut current = b.eval(i, &z);
            let mut residual = f64::INFINITY;
            let mut iters = 0;
            while iters < self.picard.max_iter {
                let (_, next) = b.project(i, &y, ZArg::Current(&z))?;
                iters += 1;
                let values = b.eval(i, &next);
                residual = l2_distance(&values, &current);
                stats.residuals[i].push(residual);
                z = next;
                current = values;
                if self.z_free || residual <= self.picard.tol {
                    break;
                }
            }
            if !self.z_free && !(residual <= self.picard.tol) {
                return Err(BsdeError::PicardDiverged {
                    interval: i,
                    residual,
                    iters,
                });
            }
            stats.iters[i] = iters;
            let (ey, _) = b.project(i, &y, ZArg::Current(&z))?;
            ys[i] = ey.clone();
            zs[i] = z;
            y = ey;
        }
        Ok(Sweep {
            y: rows(b, &ys),
            z: rows(b, &zs),
            picard: Some(stats),
            warnings: b.take_warnings(),
        })
    }
}

struct Malliavin<'a> {
    n: usize,
    plan: &'a WeightPlan,
}

impl BackendRunner for Malliavin<'_> {
    type Output = Sweep;

    fn run<B: Backend>(self, b: &B) -> Result<Sweep> {
        let n = self.n;
        let zs = b.malliavin_zs(self.plan)?;
        let mut ys = vec![b.zero(); n];
        let mut y = b.terminal();
        for i in (0..n).rev() {
            let z_next = if i + 1 == n {
                b.malliavin_terminal_z()?
            } else {
                zs[i + 1].clone()
            };
            let (ey, _) = b.project(i, &y, ZArg::Next(&z_next))?;
            ys[i] = ey.clone();
            y = ey;
        }
        Ok(Sweep {
            y: rows(b, &ys),
            z: rows(b, &zs),
            picard: None,
            warnings: b.take_warnings(),
        })
    }
}

fn finish(
    sweep: Sweep,
    partition: &Partition,
    xi: Vec<f64>,
    z_terminal: Vec<f64>,
    scheme: SchemeKind,
    terminal_z_is_estimate: bool,
) -> DiscreteSolution {
    let Sweep {
        mut y,
        mut z,
        picard,
        warnings,
    } = sweep;
    y.push(xi);
    z.push(z_terminal);
    DiscreteSolution {
        partition: partition.clone(),
        y,
        z,
        scheme,
        picard,
        terminal_z_is_estimate,
        warnings,
    }
}

pub fn solve_explicit(
    problem: &BsdeProblem,
    partition: &Partition,
    ensemble: &PathEnsemble,
    estimator: &EstimatorKind,
) -> Result<DiscreteSolution> {
    let n = partition.n();
    let sweep = with_backend(problem, partition, ensemble, estimator, Explicit { n })?;
    let xi = eval_terminal(problem, ensemble)?;
    let zero = vec![0.0; ensemble.n_paths()];
    Ok(finish(sweep, partition, xi, zero, SchemeKind::Explicit, false))
}

pub fn solve_implicit(
    problem: &BsdeProblem,
    partition: &Partition,
    ensemble: &PathEnsemble,
    estimator: &EstimatorKind,
    picard: PicardConfig,
) -> Result<DiscreteSolution> {
    picard.validate()?;
    let gen = &problem.generator;
    if !gen.lipschitz.is_finite() {
        return Err(BsdeError::PreconditionViolated(
            "the implicit scheme needs a finite Lipschitz constant".into(),
        ));
    }
    let runner = Implicit {
        n: partition.n(),
        picard,
        z_free: gen.independent_of_z(),
    };
    let sweep = with_backend(problem, partition, ensemble, estimator, runner)?;
    let xi = eval_terminal(problem, ensemble)?;
    let last = sweep.z.last().cloned().unwrap_or_default();
    Ok(finish(sweep, partition, xi, last, SchemeKind::Implicit, false))
}

pub fn solve_malliavin(
    problem: &BsdeProblem,
    partition: &Partition,
    ensemble: &PathEnsemble,
    estimator: &EstimatorKind,
    variant: WeightVariant,
) -> Result<DiscreteSolution> {
    let lin = linear_part(&problem.generator)?;
    if problem.terminal.d_xi.is_none() {
        return Err(BsdeError::PreconditionViolated(format!(
            "`{}` has no Malliavin derivative of its terminal value",
            problem.name
        )));
    }
    let fine_index = ensemble.fine().subset_indices(partition)?;
    let plan = WeightPlan::new(lin, ensemble.fine(), partition, &fine_index, variant);
    let runner = Malliavin {
        n: partition.n(),
        plan: &plan,
    };
    let sweep = with_backend(problem, partition, ensemble, estimator, runner)?;
    let xi = eval_terminal(problem, ensemble)?;
    let dxi = malliavin_terminal(problem, ensemble, problem.horizon)?;
    Ok(finish(sweep, partition, xi, dxi, SchemeKind::Malliavin, true))
}

#[cfg(test)]
mod tests;
