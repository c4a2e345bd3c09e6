//! Conditional-expectation backends driving the backward recursions.
//!
//! A backend owns the representation of an `F_{t_i}`-measurable field: a
//! closed-form function of `W_{t_i}` for the exact backend, per-path values
//! for the regression and nested backends.

use std::sync::Mutex;

use rayon::prelude::*;

use super::weights::WeightPlan;
use crate::condexp::gaussian::ExpPoly;
use crate::condexp::{nested_mc, FittedRegression, GaussianModel, RegressionSpec};
use crate::error::{BsdeError, Result};
use crate::paths::{cumulative, mix_seed, normal_stream, CoarseView, PathEnsemble, PathRef, Partition};
use crate::problems::{eval_terminal, malliavin_terminal, BsdeProblem, LinearCoeffs};

/// Where the `z` argument of the generator lives in a one-step projection.
pub(crate) enum ZArg<'a, F> {
    /// Measurable at `t_{i+1}`, as in the explicit and Malliavin schemes.
    Next(&'a F),
    /// Measurable at `t_i`, the Picard iterate of the implicit scheme.
    Current(&'a F),
}

pub(crate) trait Backend {
    type Field: Clone;

    fn terminal(&self) -> Self::Field;
    fn zero(&self) -> Self::Field;
    /// `D_T ξ` as a field at `t_n`.
    fn malliavin_terminal_z(&self) -> Result<Self::Field>;
    /// With `M = Y_{i+1} + f(t_{i+1}, Y_{i+1}, z) Δ_i`, returns
    /// `(E(M | F_i), E(M ΔW_i | F_i) / Δ_i)`.
    fn project(&self, i: usize, y_next: &Self::Field, z: ZArg<'_, Self::Field>)
        -> Result<(Self::Field, Self::Field)>;
    /// `E(ρ_{t_{i+1}, t_n} D_{t_i} ξ | F_i)` for `i = 0..n`.
    fn malliavin_zs(&self, plan: &WeightPlan) -> Result<Vec<Self::Field>>;
    /// Per-path values of a field living at node `i`.
    fn eval(&self, i: usize, field: &Self::Field) -> Vec<f64>;
    fn take_warnings(&self) -> Vec<String>;
}

fn generator_terms(lin: &LinearCoeffs, t: f64) -> (f64, f64, f64) {
    (lin.g.at(t), lin.h.at(t), lin.f1.at(t))
}

pub(crate) struct ExactBackend<'a> {
    model: &'a GaussianModel,
    lin: &'a LinearCoeffs,
    fine: &'a Partition,
    view: &'a CoarseView,
}

impl<'a> ExactBackend<'a> {
    pub fn new(problem: &'a BsdeProblem, fine: &'a Partition, view: &'a CoarseView) -> Result<Self> {
        let model = problem.exact.as_ref().ok_or_else(|| {
            BsdeError::UnsupportedProblem(format!(
                "`{}` has no closed-form conditional expectations",
                problem.name
            ))
        })?;
        let lin = problem.generator.linear.as_ref().ok_or_else(|| {
            BsdeError::UnsupportedProblem(format!(
                "the exact estimator needs a linear generator, `{}` has none",
                problem.name
            ))
        })?;
        Ok(Self {
            model,
            lin,
            fine,
            view,
        })
    }

    fn weight_step(&self, k: usize, g: &ExpPoly, plan: &WeightPlan) -> ExpPoly {
        let w = plan.interval(k);
        let stepped = match w.slope {
            Some(h) => g
                .shift_rate(h)
                .gaussian_expect(self.view.partition().dt(k))
                .shift_rate(-h),
            None => {
                let mut acc = g.clone();
                for j in plan.fine_range(k).rev() {
                    let h = plan.h_fine(j);
                    acc = acc.shift_rate(h).gaussian_expect(self.fine.dt(j)).shift_rate(-h);
                }
                acc
            }
        };
        stepped.scale(w.drift.exp())
    }
}

impl Backend for ExactBackend<'_> {
    type Field = ExpPoly;

    fn terminal(&self) -> ExpPoly {
        self.model.terminal.clone()
    }

    fn zero(&self) -> ExpPoly {
        ExpPoly::zero()
    }

    fn malliavin_terminal_z(&self) -> Result<ExpPoly> {
        self.model.malliavin.clone().ok_or_else(|| {
            BsdeError::PreconditionViolated("no closed-form Malliavin derivative of ξ".into())
        })
    }

    fn project(&self, i: usize, y: &ExpPoly, z: ZArg<'_, ExpPoly>) -> Result<(ExpPoly, ExpPoly)> {
        let part = self.view.partition();
        let dt = part.dt(i);
        let (g, h, f1) = generator_terms(self.lin, part.t(i + 1));
        let base = y.scale(1.0 + g * dt).add_constant(f1 * dt);
        Ok(match z {
            ZArg::Next(z) => {
                let m = base.add_scaled(z, h * dt);
                (m.gaussian_expect(dt), m.derivative().gaussian_expect(dt))
            }
            ZArg::Current(z) => (
                base.gaussian_expect(dt).add_scaled(z, h * dt),
                base.derivative().gaussian_expect(dt),
            ),
        })
    }

    fn malliavin_zs(&self, plan: &WeightPlan) -> Result<Vec<ExpPoly>> {
        let part = self.view.partition();
        let n = part.n();
        let mut g = self.malliavin_terminal_z()?;
        let mut out = vec![ExpPoly::zero(); n];
        for i in (0..n).rev() {
            out[i] = g.gaussian_expect(part.dt(i));
            if i > 0 {
                g = self.weight_step(i, &g, plan);
            }
        }
        Ok(out)
    }

    fn eval(&self, i: usize, field: &ExpPoly) -> Vec<f64> {
        self.view.w(i).par_iter().map(|&x| field.eval(x)).collect()
    }

    fn take_warnings(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Markov states at every coarse node, node-major, `dim` entries per path.
fn node_states(problem: &BsdeProblem, ensemble: &PathEnsemble, view: &CoarseView) -> Vec<Vec<f64>> {
    let dim = problem.terminal.state_dim;
    let idx = view.fine_indices();
    let state = &problem.terminal.state;
    let per_path = ensemble.map_paths(|_, path| {
        let mut out = vec![0.0; idx.len() * dim];
        state(&path, idx, &mut out);
        out
    });
    (0..idx.len())
        .map(|i| {
            per_path
                .iter()
                .flat_map(|row| row[i * dim..(i + 1) * dim].iter().copied())
                .collect()
        })
        .collect()
}

pub(crate) struct RegressionBackend<'a> {
    problem: &'a BsdeProblem,
    ensemble: &'a PathEnsemble,
    view: &'a CoarseView,
    spec: RegressionSpec,
    states: Vec<Vec<f64>>,
    xi: Vec<f64>,
    warnings: Mutex<Vec<String>>,
}

impl<'a> RegressionBackend<'a> {
    pub fn new(
        problem: &'a BsdeProblem,
        ensemble: &'a PathEnsemble,
        view: &'a CoarseView,
        spec: RegressionSpec,
    ) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            problem,
            ensemble,
            view,
            spec,
            states: node_states(problem, ensemble, view),
            xi: eval_terminal(problem, ensemble)?,
            warnings: Mutex::new(Vec::new()),
        })
    }

    fn fit(&self, i: usize, targets: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let states = &self.states[i];
        let fit = FittedRegression::fit(states, self.problem.terminal.state_dim, targets, &self.spec)?;
        if fit.rank_deficient {
            self.warnings
                .lock()
                .unwrap()
                .push(format!("rank-deficient regression at node {i}"));
        }
        Ok(fit.predict(states))
    }
}

impl Backend for RegressionBackend<'_> {
    type Field = Vec<f64>;

    fn terminal(&self) -> Vec<f64> {
        self.xi.clone()
    }

    fn zero(&self) -> Vec<f64> {
        vec![0.0; self.view.n_paths()]
    }

    fn malliavin_terminal_z(&self) -> Result<Vec<f64>> {
        malliavin_terminal(self.problem, self.ensemble, self.problem.horizon)
    }

    fn project(&self, i: usize, y: &Vec<f64>, z: ZArg<'_, Vec<f64>>) -> Result<(Vec<f64>, Vec<f64>)> {
        let z = match z {
            ZArg::Next(z) | ZArg::Current(z) => z,
        };
        let part = self.view.partition();
        let (t1, dt) = (part.t(i + 1), part.dt(i));
        let f = &self.problem.generator.f;
        let (m, mdw): (Vec<f64>, Vec<f64>) = y
            .par_iter()
            .zip(z.par_iter())
            .zip(self.view.dw(i).par_iter())
            .map(|((&y, &z), &dw)| {
                let m = y + f(t1, y, z) * dt;
                (m, m * dw)
            })
            .unzip();
        let mut pred = self.fit(i, &[&m, &mdw])?;
        let zbar = pred.pop().unwrap().into_iter().map(|v| v / dt).collect();
        Ok((pred.pop().unwrap(), zbar))
    }

    fn malliavin_zs(&self, plan: &WeightPlan) -> Result<Vec<Vec<f64>>> {
        let part = self.view.partition();
        let n = part.n();
        let np = self.ensemble.n_paths();
        // suffix[p][k] = Σ_{j >= k} log ρ over interval j
        let suffix: Vec<Vec<f64>> = (0..np)
            .into_par_iter()
            .map(|p| {
                let inc = self.ensemble.increments(p);
                let mut s = vec![0.0; n + 1];
                for k in (0..n).rev() {
                    s[k] = plan.log_increment(k, inc) + s[k + 1];
                }
                s
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let d = malliavin_terminal(self.problem, self.ensemble, part.t(i))?;
            let target: Vec<f64> = d
                .iter()
                .zip(&suffix)
                .map(|(d, s)| s[i + 1].exp() * d)
                .collect();
            out.push(self.fit(i, &[&target])?.pop().unwrap());
        }
        Ok(out)
    }

    fn eval(&self, _i: usize, field: &Vec<f64>) -> Vec<f64> {
        field.clone()
    }

    fn take_warnings(&self) -> Vec<String> {
        std::mem::take(&mut *self.warnings.lock().unwrap())
    }
}

#[derive(Clone, Debug)]
pub(crate) enum NestedField {
    Zero,
    /// `ξ`, only at `t_n`.
    Terminal,
    /// `D_T ξ`, only at `t_n`.
    MalliavinTerminal,
    Values(Vec<f64>),
}

/// How a field at `t_{i+1}` is evaluated on an inner continuation.
enum NextEval {
    Zero,
    Terminal,
    MalliavinTerminal,
    Fitted(FittedRegression),
}

impl NextEval {
    fn needs_state(&self) -> bool {
        matches!(self, NextEval::Fitted(_))
    }

    fn at(&self, problem: &BsdeProblem, path: &PathRef<'_>, state: &[f64], scratch: &mut Vec<f64>) -> f64 {
        match self {
            NextEval::Zero => 0.0,
            NextEval::Terminal => (problem.terminal.xi)(path),
            NextEval::MalliavinTerminal => {
                let d_xi = problem.terminal.d_xi.as_ref().expect("checked by the scheme");
                d_xi(path, problem.horizon)
            }
            NextEval::Fitted(fit) => fit.predict_one(0, state, scratch),
        }
    }
}

/// Nested Monte Carlo: every outer path is continued over one interval by
/// `inner` fresh Brownian increments. Fields at `t_{i+1}` are carried to the
/// inner endpoints through a regression surrogate on the node states.
pub(crate) struct NestedBackend<'a> {
    regression: RegressionBackend<'a>,
    inner: usize,
    seed: u64,
}

impl<'a> NestedBackend<'a> {
    pub fn new(
        problem: &'a BsdeProblem,
        ensemble: &'a PathEnsemble,
        view: &'a CoarseView,
        inner: usize,
    ) -> Result<Self> {
        if inner == 0 {
            return Err(BsdeError::InvalidArgument("nested estimator needs inner >= 1".into()));
        }
        Ok(Self {
            regression: RegressionBackend::new(problem, ensemble, view, RegressionSpec::default())?,
            inner,
            seed: mix_seed(ensemble.seed(), 0x6e65_7374),
        })
    }

    fn next_eval(&self, i: usize, field: &NestedField) -> Result<NextEval> {
        let r = &self.regression;
        Ok(match field {
            NestedField::Zero => NextEval::Zero,
            NestedField::Terminal => NextEval::Terminal,
            NestedField::MalliavinTerminal => NextEval::MalliavinTerminal,
            NestedField::Values(v) => NextEval::Fitted(FittedRegression::fit(
                &r.states[i],
                r.problem.terminal.state_dim,
                &[v],
                &r.spec,
            )?),
        })
    }
}

impl Backend for NestedBackend<'_> {
    type Field = NestedField;

    fn terminal(&self) -> NestedField {
        NestedField::Terminal
    }

    fn zero(&self) -> NestedField {
        NestedField::Zero
    }

    fn malliavin_terminal_z(&self) -> Result<NestedField> {
        Ok(NestedField::MalliavinTerminal)
    }

    fn project(
        &self,
        i: usize,
        y: &NestedField,
        z: ZArg<'_, NestedField>,
    ) -> Result<(NestedField, NestedField)> {
        let r = &self.regression;
        let problem = r.problem;
        let part = r.view.partition();
        let (t1, dt) = (part.t(i + 1), part.dt(i));
        let (a, b) = (r.view.fine_index(i), r.view.fine_index(i + 1));
        let fine = r.ensemble.fine();
        let times = &fine.times()[..=b];
        let sd: Vec<f64> = fine.steps().map(f64::sqrt).collect();
        let dim = problem.terminal.state_dim;

        let y_eval = self.next_eval(i + 1, y)?;
        let (z_eval, z_now) = match z {
            ZArg::Next(f) => (Some(self.next_eval(i + 1, f)?), None),
            ZArg::Current(f) => (None, Some(self.eval(i, f))),
        };
        let needs_state = y_eval.needs_state() || z_eval.as_ref().is_some_and(NextEval::needs_state);
        let node_seed = mix_seed(self.seed, i as u64);
        let f = &problem.generator.f;
        let state_fn = &problem.terminal.state;

        let (ey, ez): (Vec<f64>, Vec<f64>) = (0..r.ensemble.n_paths())
            .into_par_iter()
            .map_init(
                || (Vec::new(), Vec::new(), vec![0.0; dim], Vec::new()),
                |(inc, w, state, scratch), p| {
                    inc.clear();
                    inc.extend_from_slice(&r.ensemble.increments(p)[..a]);
                    inc.resize(b, 0.0);
                    let mut draw = normal_stream(mix_seed(node_seed, p as u64), 0);
                    let (mut sum_m, mut sum_mdw) = (0.0, 0.0);
                    for _ in 0..self.inner {
                        let mut dw = 0.0;
                        for k in a..b {
                            inc[k] = sd[k] * draw();
                            dw += inc[k];
                        }
                        cumulative(inc, w);
                        let path = PathRef { times, w };
                        if needs_state {
                            state_fn(&path, &[b], state);
                        }
                        let yv = y_eval.at(problem, &path, state, scratch);
                        let zv = match (&z_eval, &z_now) {
                            (Some(e), _) => e.at(problem, &path, state, scratch),
                            (None, Some(v)) => v[p],
                            (None, None) => unreachable!(),
                        };
                        let m = yv + f(t1, yv, zv) * dt;
                        sum_m += m;
                        sum_mdw += m * dw;
                    }
                    let k = self.inner as f64;
                    (sum_m / k, sum_mdw / k / dt)
                },
            )
            .unzip();
        Ok((NestedField::Values(ey), NestedField::Values(ez)))
    }

    fn malliavin_zs(&self, plan: &WeightPlan) -> Result<Vec<NestedField>> {
        let r = &self.regression;
        let problem = r.problem;
        let d_xi = problem.terminal.d_xi.as_ref().ok_or_else(|| {
            BsdeError::PreconditionViolated("the Malliavin scheme needs D ξ".into())
        })?;
        let part = r.view.partition();
        let n = part.n();
        (0..n)
            .map(|i| {
                let theta = part.t(i);
                let values = nested_mc(
                    r.ensemble,
                    r.view.fine_index(i),
                    self.inner,
                    |path| {
                        let inc: Vec<f64> = path.w.windows(2).map(|s| s[1] - s[0]).collect();
                        let mut expo = 0.0;
                        for k in i + 1..n {
                            expo += plan.log_increment(k, &inc);
                        }
                        expo.exp() * d_xi(path, theta)
                    },
                    mix_seed(self.seed, 0x6d61_6c6c),
                )?;
                Ok(NestedField::Values(values))
            })
            .collect()
    }

    fn eval(&self, _i: usize, field: &NestedField) -> Vec<f64> {
        let r = &self.regression;
        match field {
            NestedField::Zero => r.zero(),
            NestedField::Terminal => r.xi.clone(),
            NestedField::MalliavinTerminal => r
                .malliavin_terminal_z()
                .expect("checked by the scheme"),
            NestedField::Values(v) => v.clone(),
        }
    }

    fn take_warnings(&self) -> Vec<String> {
        self.regression.take_warnings()
    }
}
