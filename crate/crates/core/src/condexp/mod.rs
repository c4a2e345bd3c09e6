//! Conditional expectation estimators `E(V | F_{t_i})`.
//!
//! Three routes: closed-form Gaussian operators registered by a problem,
//! least-squares regression on basis functions of the Markov state, and
//! nested Monte Carlo over fresh inner continuations.

pub mod gaussian;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BsdeError, Result};
use crate::paths::{cumulative, mix_seed, normal_stream, PathEnsemble, PathRef};
use gaussian::ExpPoly;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisFamily {
    Monomial,
    Hermite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub degree: usize,
    pub ridge: f64,
    pub basis: BasisFamily,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        Self {
            degree: 4,
            ridge: 1e-10,
            basis: BasisFamily::Monomial,
        }
    }
}

impl RegressionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(BsdeError::InvalidArgument(format!(
                "ridge must be >= 0, got {}",
                self.ridge
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorKind {
    /// Closed-form operator supplied by the problem.
    Exact,
    Regression(RegressionSpec),
    /// Nested Monte Carlo with `inner` continuations per outer path.
    NestedMc { inner: usize },
}

impl EstimatorKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            EstimatorKind::Exact => Ok(()),
            EstimatorKind::Regression(spec) => spec.validate(),
            EstimatorKind::NestedMc { inner } if *inner == 0 => Err(
                BsdeError::InvalidArgument("nested estimator needs inner >= 1".into()),
            ),
            EstimatorKind::NestedMc { .. } => Ok(()),
        }
    }
}

/// Basis functions of a standardized state, total degree `<= d`.
#[derive(Debug, Clone)]
pub struct Basis {
    family: BasisFamily,
    degree: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    exponents: Vec<Vec<usize>>,
}

fn multi_indices(active: &[usize], dim: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; dim]];
    for &c in active {
        let mut grown = Vec::new();
        for idx in &out {
            let used: usize = idx.iter().sum();
            for e in 1..=degree.saturating_sub(used) {
                let mut next = idx.clone();
                next[c] = e;
                grown.push(next);
            }
        }
        out.extend(grown);
    }
    out.sort_by_key(|idx| (idx.iter().sum::<usize>(), idx.clone()));
    out
}

impl Basis {
    /// Standardize each state component to zero mean and unit variance over
    /// `states`; components with no spread are dropped.
    pub fn fit(spec: &RegressionSpec, states: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || states.len() % dim != 0 {
            return Err(BsdeError::DimensionMismatch(format!(
                "{} state entries for dimension {dim}",
                states.len()
            )));
        }
        let n = states.len() / dim;
        let mut mean = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        let mut active = Vec::new();
        for c in 0..dim {
            let m = states.iter().skip(c).step_by(dim).sum::<f64>() / n as f64;
            let var = states
                .iter()
                .skip(c)
                .step_by(dim)
                .map(|x| (x - m) * (x - m))
                .sum::<f64>()
                / n as f64;
            let sd = var.sqrt();
            mean[c] = m;
            if sd > 1e-12 * (1.0 + m.abs()) {
                scale[c] = sd;
                active.push(c);
            }
        }
        Ok(Self {
            family: spec.basis,
            degree: spec.degree,
            mean,
            scale,
            exponents: multi_indices(&active, dim, spec.degree),
        })
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn eval_into(&self, state: &[f64], out: &mut [f64]) {
        let dim = self.mean.len();
        let d = self.degree;
        // per-component 1-d basis values up to degree d
        let mut table = vec![0.0; dim * (d + 1)];
        for c in 0..dim {
            let u = (state[c] - self.mean[c]) / self.scale[c];
            let row = &mut table[c * (d + 1)..(c + 1) * (d + 1)];
            row[0] = 1.0;
            if d >= 1 {
                row[1] = u;
            }
            for k in 1..d {
                row[k + 1] = match self.family {
                    BasisFamily::Monomial => row[k] * u,
                    BasisFamily::Hermite => u * row[k] - k as f64 * row[k - 1],
                };
            }
        }
        for (o, idx) in out.iter_mut().zip(&self.exponents) {
            *o = idx
                .iter()
                .enumerate()
                .map(|(c, &e)| table[c * (d + 1) + e])
                .product();
        }
    }
}

/// Least-squares fit with ridge penalty, one coefficient vector per target.
#[derive(Debug, Clone)]
pub struct FittedRegression {
    basis: Basis,
    coeffs: Vec<Vec<f64>>,
    pub rank_deficient: bool,
}

impl FittedRegression {
    /// Minimize `Σ (v - Σ c_k φ_k(x))² + λ ‖c‖²` for each target column through
    /// a Householder QR of the augmented design `[Φ; sqrt(λ) I]`.
    pub fn fit(
        states: &[f64],
        dim: usize,
        targets: &[&[f64]],
        spec: &RegressionSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let basis = Basis::fit(spec, states, dim)?;
        let n = states.len() / dim;
        for t in targets {
            if t.len() != n {
                return Err(BsdeError::DimensionMismatch(format!(
                    "{} states but {} values",
                    n,
                    t.len()
                )));
            }
        }
        let k = basis.len();
        if n < k {
            return Err(BsdeError::DimensionMismatch(format!(
                "{n} samples cannot determine {k} basis coefficients"
            )));
        }
        let mut rows = vec![0.0; (n + k) * k];
        rows[..n * k]
            .par_chunks_mut(k)
            .zip(states.par_chunks(dim))
            .for_each(|(row, s)| basis.eval_into(s, row));
        let root = spec.ridge.sqrt();
        for j in 0..k {
            rows[(n + j) * k + j] = root;
        }
        let design = DMatrix::from_row_slice(n + k, k, &rows);
        drop(rows);
        let mut rhs = DMatrix::zeros(n + k, targets.len());
        for (c, t) in targets.iter().enumerate() {
            for (r, v) in t.iter().enumerate() {
                rhs[(r, c)] = *v;
            }
        }
        let qr = design.qr();
        qr.q_tr_mul(&mut rhs);
        let mut r = qr.r();
        let max_diag = (0..k).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
        let mut rank_deficient = false;
        for j in 0..k {
            if r[(j, j)].abs() <= 1e-12 * max_diag.max(f64::MIN_POSITIVE) {
                rank_deficient = true;
                // a zero pivot would leave the coefficient undetermined
                r[(j, j)] = if r[(j, j)] >= 0.0 { 1.0 } else { -1.0 } * 1e-12 * max_diag.max(1.0);
            }
        }
        if rank_deficient {
            log::warn!("regression design is rank deficient ({k} basis functions, {n} samples)");
        }
        let top = rhs.rows(0, k).into_owned();
        let sol = r.solve_upper_triangular(&top).ok_or_else(|| {
            BsdeError::InvalidArgument("regression triangular solve failed".into())
        })?;
        let coeffs = (0..targets.len())
            .map(|c| sol.column(c).iter().copied().collect())
            .collect();
        Ok(Self {
            basis,
            coeffs,
            rank_deficient,
        })
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn coefficients(&self, target: usize) -> &[f64] {
        &self.coeffs[target]
    }

    pub fn predict_one(&self, target: usize, state: &[f64], scratch: &mut Vec<f64>) -> f64 {
        scratch.resize(self.basis.len(), 0.0);
        self.basis.eval_into(state, scratch);
        scratch
            .iter()
            .zip(&self.coeffs[target])
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Predictions for every state and every target, `[target][sample]`.
    pub fn predict(&self, states: &[f64]) -> Vec<Vec<f64>> {
        let dim = self.basis.mean.len();
        let per_sample: Vec<Vec<f64>> = states
            .par_chunks(dim)
            .map_init(Vec::new, |scratch, s| {
                (0..self.coeffs.len())
                    .map(|t| self.predict_one(t, s, scratch))
                    .collect()
            })
            .collect();
        (0..self.coeffs.len())
            .map(|t| per_sample.iter().map(|row| row[t]).collect())
            .collect()
    }
}

/// Regression predictions with a flag for a rank-deficient design.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub values: Vec<f64>,
    pub rank_deficient: bool,
}

/// Fit `values ≈ Σ c_k φ_k(state)` and evaluate the fit at every state.
/// `states` is row-major with `dim` entries per sample.
pub fn fit_predict(
    states: &[f64],
    dim: usize,
    values: &[f64],
    spec: &RegressionSpec,
) -> Result<Prediction> {
    let fit = FittedRegression::fit(states, dim, &[values], spec)?;
    let values = fit.predict(states).pop().unwrap();
    Ok(Prediction {
        values,
        rank_deficient: fit.rank_deficient,
    })
}

/// Closed-form conditional expectations for functionals of `W_T` when the
/// Markov state is `W_t` itself.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    pub horizon: f64,
    /// `ξ = F(W_T)`.
    pub terminal: ExpPoly,
    /// `D_θ ξ = G(W_T)`, the same for every `θ`.
    pub malliavin: Option<ExpPoly>,
}

impl GaussianModel {
    pub fn new(horizon: f64, terminal: ExpPoly, malliavin: Option<ExpPoly>) -> Self {
        Self {
            horizon,
            terminal,
            malliavin,
        }
    }
}

/// A functional of `W_T` whose conditional expectation has a closed form.
#[derive(Debug, Clone, PartialEq)]
pub enum Functional {
    Terminal,
    MalliavinTerminal,
    Of(ExpPoly),
}

/// `E(F(W_T) | W_t = x)` for every `x` in `states`.
pub fn exact_step(
    model: &GaussianModel,
    t: f64,
    states: &[f64],
    functional: &Functional,
) -> Result<Vec<f64>> {
    if !(0.0..=model.horizon).contains(&t) {
        return Err(BsdeError::InvalidArgument(format!(
            "time {t} outside [0, {}]",
            model.horizon
        )));
    }
    let f = match functional {
        Functional::Terminal => &model.terminal,
        Functional::MalliavinTerminal => model.malliavin.as_ref().ok_or_else(|| {
            BsdeError::UnsupportedFunctional("the model registers no Malliavin derivative".into())
        })?,
        Functional::Of(f) => f,
    };
    let g = f.gaussian_expect(model.horizon - t);
    Ok(states.iter().map(|&x| g.eval(x)).collect())
}

/// Nested Monte Carlo: for each outer path, average `functional` over `inner`
/// fresh continuations of the path from fine node `node` to the horizon.
pub fn nested_mc<F>(
    ensemble: &PathEnsemble,
    node: usize,
    inner: usize,
    functional: F,
    seed: u64,
) -> Result<Vec<f64>>
where
    F: Fn(&PathRef<'_>) -> f64 + Sync,
{
    if inner == 0 {
        return Err(BsdeError::InvalidArgument("inner count must be >= 1".into()));
    }
    let fine = ensemble.fine();
    if node > fine.n() {
        return Err(BsdeError::InvalidArgument(format!(
            "node {node} beyond {} steps",
            fine.n()
        )));
    }
    let times = fine.times();
    let sd: Vec<f64> = fine.steps().map(f64::sqrt).collect();
    let node_seed = mix_seed(seed, node as u64);
    Ok((0..ensemble.n_paths())
        .into_par_iter()
        .map_init(
            || (Vec::new(), Vec::new()),
            |(inc, w), p| {
                inc.clear();
                inc.extend_from_slice(&ensemble.increments(p)[..node]);
                inc.resize(fine.n(), 0.0);
                let path_seed = mix_seed(node_seed, p as u64);
                let mut acc = 0.0;
                for m in 0..inner {
                    let mut draw = normal_stream(path_seed, m as u64);
                    for k in node..fine.n() {
                        inc[k] = sd[k] * draw();
                    }
                    cumulative(inc, w);
                    acc += functional(&PathRef { times, w });
                }
                acc / inner as f64
            },
        )
        .collect())
}
