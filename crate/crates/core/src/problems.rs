//! BSDE problem instances: generator, terminal functional, optional exact
//! solution, and the stochastic exponential that solves the linear case.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde_json::Value;

use crate::condexp::gaussian::ExpPoly;
use crate::condexp::GaussianModel;
use crate::error::{BsdeError, Result};
use crate::paths::{PathEnsemble, PathRef};

pub type Params = BTreeMap<String, Value>;

pub type DriverFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
pub type PathFn = Arc<dyn Fn(&PathRef<'_>) -> f64 + Send + Sync>;
/// `(path, θ) -> D_θ ξ`.
pub type PathThetaFn = Arc<dyn Fn(&PathRef<'_>, f64) -> f64 + Send + Sync>;
/// `(path, fine index) -> value`.
pub type PathIndexFn = Arc<dyn Fn(&PathRef<'_>, usize) -> f64 + Send + Sync>;
/// Writes the state vectors at the given ascending fine indices into `out`
/// (row-major, `indices.len() * dim`). The path may be a prefix that ends at
/// the last requested index.
pub type StateFn = Arc<dyn Fn(&PathRef<'_>, &[usize], &mut [f64]) + Send + Sync>;

/// A deterministic time coefficient.
#[derive(Clone)]
pub enum Coeff {
    Constant(f64),
    Function(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl Coeff {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Coeff::Constant(c) => *c,
            Coeff::Function(f) => f(t),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Coeff::Constant(c) => Some(*c),
            Coeff::Function(_) => None,
        }
    }
}

impl fmt::Debug for Coeff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coeff::Constant(c) => write!(f, "Constant({c})"),
            Coeff::Function(_) => write!(f, "Function(..)"),
        }
    }
}

/// `f(t, y, z) = g(t) y + h(t) z + f1(t)`.
#[derive(Clone, Debug)]
pub struct LinearCoeffs {
    pub g: Coeff,
    pub h: Coeff,
    pub f1: Coeff,
}

#[derive(Clone)]
pub struct GeneratorSpec {
    pub f: DriverFn,
    pub df_dy: DriverFn,
    pub df_dz: DriverFn,
    /// Lipschitz constant in `|dy| + |dz|`.
    pub lipschitz: f64,
    /// Constant of the `|t2 - t1|^{1/2}` time regularity.
    pub time_holder: f64,
    pub is_deterministic: bool,
    pub linear: Option<LinearCoeffs>,
}

impl GeneratorSpec {
    pub fn linear(g: Coeff, h: Coeff, f1: Coeff) -> Self {
        let (g1, h1, f11) = (g.clone(), h.clone(), f1.clone());
        let (g2, h2) = (g.clone(), h.clone());
        let lipschitz = match (g.as_constant(), h.as_constant()) {
            (Some(a), Some(b)) => a.abs().max(b.abs()),
            _ => f64::INFINITY,
        };
        let time_holder = if g.as_constant().is_some()
            && h.as_constant().is_some()
            && f1.as_constant().is_some()
        {
            0.0
        } else {
            f64::INFINITY
        };
        Self {
            f: Arc::new(move |t, y, z| g1.at(t) * y + h1.at(t) * z + f11.at(t)),
            df_dy: Arc::new(move |t, _, _| g2.at(t)),
            df_dz: Arc::new(move |t, _, _| h2.at(t)),
            lipschitz,
            time_holder,
            is_deterministic: true,
            linear: Some(LinearCoeffs { g, h, f1 }),
        }
    }

    pub fn zero() -> Self {
        Self::linear(Coeff::Constant(0.0), Coeff::Constant(0.0), Coeff::Constant(0.0))
    }

    pub fn eval(&self, t: f64, y: f64, z: f64) -> f64 {
        (self.f)(t, y, z)
    }

    /// True when `f` does not depend on `z`, as far as the linear form tells.
    pub fn independent_of_z(&self) -> bool {
        matches!(
            self.linear.as_ref().map(|l| &l.h),
            Some(Coeff::Constant(h)) if *h == 0.0
        )
    }
}

impl fmt::Debug for GeneratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneratorSpec")
            .field("lipschitz", &self.lipschitz)
            .field("time_holder", &self.time_holder)
            .field("is_deterministic", &self.is_deterministic)
            .field("linear", &self.linear)
            .finish_non_exhaustive()
    }
}

#[derive(Clone)]
pub struct TerminalSpec {
    pub xi: PathFn,
    pub d_xi: Option<PathThetaFn>,
    pub state: StateFn,
    pub state_dim: usize,
}

impl TerminalSpec {
    /// Markov state `W_t`.
    pub fn brownian_state() -> (StateFn, usize) {
        (
            Arc::new(|path: &PathRef<'_>, idx: &[usize], out: &mut [f64]| {
                for (o, &k) in out.iter_mut().zip(idx) {
                    *o = path.w[k];
                }
            }),
            1,
        )
    }
}

/// Closed-form `(Y, Z)` evaluated on a fine path at a fine index.
#[derive(Clone)]
pub struct Reference {
    pub y: PathIndexFn,
    pub z: PathIndexFn,
}

#[derive(Clone)]
pub struct BsdeProblem {
    pub name: String,
    pub horizon: f64,
    pub generator: GeneratorSpec,
    pub terminal: TerminalSpec,
    pub reference: Option<Reference>,
    /// Exact conditional-expectation operator for Gaussian built-ins.
    pub exact: Option<GaussianModel>,
}

impl fmt::Debug for BsdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BsdeProblem")
            .field("name", &self.name)
            .field("horizon", &self.horizon)
            .field("generator", &self.generator)
            .field("has_reference", &self.reference.is_some())
            .field("has_exact", &self.exact.is_some())
            .finish_non_exhaustive()
    }
}

pub const BUILTIN_NAMES: [&str; 6] = [
    "martingale",
    "quadratic",
    "linear_const",
    "smooth_terminal",
    "hermite2",
    "fbsde_energy",
];

struct ParamReader<'a> {
    problem: &'a str,
    params: &'a Params,
    allowed: &'a [&'a str],
}

impl<'a> ParamReader<'a> {
    fn check_unknown(&self) -> Result<()> {
        for key in self.params.keys() {
            if !self.allowed.contains(&key.as_str()) {
                return Err(BsdeError::InvalidArgument(format!(
                    "problem `{}` has no parameter `{key}`",
                    self.problem
                )));
            }
        }
        Ok(())
    }

    fn number(&self, key: &str) -> Result<Option<f64>> {
        match self.params.get(key) {
            None => Ok(None),
            Some(v) => v.as_f64().map(Some).ok_or_else(|| {
                BsdeError::InvalidArgument(format!(
                    "parameter `{key}` of `{}` must be a number",
                    self.problem
                ))
            }),
        }
    }

    fn required(&self, key: &str) -> Result<f64> {
        self.number(key)?.ok_or_else(|| BsdeError::MissingParam {
            problem: self.problem.to_string(),
            param: key.to_string(),
        })
    }

    fn or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.number(key)?.unwrap_or(default))
    }

    fn text(&self, key: &str, default: &str) -> Result<String> {
        match self.params.get(key) {
            None => Ok(default.to_string()),
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(BsdeError::InvalidArgument(format!(
                "parameter `{key}` of `{}` must be a string",
                self.problem
            ))),
        }
    }
}

fn time_at(path: &PathRef<'_>, k: usize) -> f64 {
    path.times[k]
}

/// Smooth nonlinear part of the default `smooth_terminal` driver:
/// `u(z) = cos(z) z / (1 + z²)`, with `sup |u'| = u'(0) = 1`.
fn smooth_u(z: f64) -> f64 {
    z.cos() * z / (1.0 + z * z)
}

fn smooth_du(z: f64) -> f64 {
    let q = 1.0 + z * z;
    -z.sin() * z / q + z.cos() * (1.0 - z * z) / (q * q)
}

/// Build one of the built-in problems on `[0, horizon]`.
///
/// | name | driver | terminal | reference |
/// |------|--------|----------|-----------|
/// | `martingale` | 0 | `W_T` | `(W_t, 1)` |
/// | `quadratic` | 0 | `W_T²` | `(W_t² + T - t, 2 W_t)` |
/// | `linear_const` | `a y + b z + c` | `W_T` | closed form |
/// | `smooth_terminal` | `L (sin y + cos z · z/(1+z²))` | `tanh W_T` | none |
/// | `hermite2` | 0 | `(W_T² - T)/2` | `((W_t² - t)/2, W_t)` |
/// | `fbsde_energy` | `a y + b z + c` | `φ(∫ X² dr)` | none |
pub fn builtin(name: &str, horizon: f64, params: &Params) -> Result<BsdeProblem> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(BsdeError::InvalidArgument(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    let allowed: &[&str] = match name {
        "martingale" | "quadratic" | "hermite2" => &[],
        "linear_const" => &["a", "b", "c"],
        "smooth_terminal" => &["L"],
        "fbsde_energy" => &[
            "x0", "mu", "kappa", "sigma", "sigma_x", "phi", "a", "b", "c",
        ],
        other => return Err(BsdeError::UnknownProblem(other.to_string())),
    };
    let reader = ParamReader {
        problem: name,
        params,
        allowed,
    };
    reader.check_unknown()?;
    let (brownian, dim) = TerminalSpec::brownian_state();
    let big_t = horizon;

    let problem = match name {
        "martingale" => BsdeProblem {
            name: name.into(),
            horizon,
            generator: GeneratorSpec::zero(),
            terminal: TerminalSpec {
                xi: Arc::new(|p| p.terminal()),
                d_xi: Some(Arc::new(|_, _| 1.0)),
                state: brownian,
                state_dim: dim,
            },
            reference: Some(Reference {
                y: Arc::new(|p, k| p.w[k]),
                z: Arc::new(|_, _| 1.0),
            }),
            exact: Some(GaussianModel::new(
                horizon,
                ExpPoly::identity(),
                Some(ExpPoly::constant(1.0)),
            )),
        },
        "quadratic" => BsdeProblem {
            name: name.into(),
            horizon,
            generator: GeneratorSpec::zero(),
            terminal: TerminalSpec {
                xi: Arc::new(|p| {
                    let w = p.terminal();
                    w * w
                }),
                d_xi: Some(Arc::new(|p, _| 2.0 * p.terminal())),
                state: brownian,
                state_dim: dim,
            },
            reference: Some(Reference {
                y: Arc::new(move |p, k| p.w[k] * p.w[k] + (big_t - time_at(p, k))),
                z: Arc::new(|p, k| 2.0 * p.w[k]),
            }),
            exact: Some(GaussianModel::new(
                horizon,
                ExpPoly::polynomial(vec![0.0, 0.0, 1.0]),
                Some(ExpPoly::polynomial(vec![0.0, 2.0])),
            )),
        },
        "hermite2" => BsdeProblem {
            name: name.into(),
            horizon,
            generator: GeneratorSpec::zero(),
            terminal: TerminalSpec {
                xi: Arc::new(move |p| {
                    let w = p.terminal();
                    0.5 * (w * w - big_t)
                }),
                d_xi: Some(Arc::new(|p, _| p.terminal())),
                state: brownian,
                state_dim: dim,
            },
            reference: Some(Reference {
                y: Arc::new(|p, k| 0.5 * (p.w[k] * p.w[k] - time_at(p, k))),
                z: Arc::new(|p, k| p.w[k]),
            }),
            exact: Some(GaussianModel::new(
                horizon,
                ExpPoly::polynomial(vec![-0.5 * horizon, 0.0, 0.5]),
                Some(ExpPoly::identity()),
            )),
        },
        "linear_const" => {
            let a = reader.required("a")?;
            let b = reader.required("b")?;
            let c = reader.or("c", 0.0)?;
            let growth = move |tau: f64| {
                if a.abs() < 1e-12 {
                    tau
                } else {
                    ((a * tau).exp() - 1.0) / a
                }
            };
            BsdeProblem {
                name: name.into(),
                horizon,
                generator: GeneratorSpec::linear(
                    Coeff::Constant(a),
                    Coeff::Constant(b),
                    Coeff::Constant(c),
                ),
                terminal: TerminalSpec {
                    xi: Arc::new(|p| p.terminal()),
                    d_xi: Some(Arc::new(|_, _| 1.0)),
                    state: brownian,
                    state_dim: dim,
                },
                reference: Some(Reference {
                    y: Arc::new(move |p, k| {
                        let tau = big_t - time_at(p, k);
                        (a * tau).exp() * (p.w[k] + b * tau) + c * growth(tau)
                    }),
                    z: Arc::new(move |p, k| (a * (big_t - time_at(p, k))).exp()),
                }),
                exact: Some(GaussianModel::new(
                    horizon,
                    ExpPoly::identity(),
                    Some(ExpPoly::constant(1.0)),
                )),
            }
        }
        "smooth_terminal" => {
            let l = reader.or("L", 1.0)?;
            if !(l >= 0.0) {
                return Err(BsdeError::InvalidArgument(format!(
                    "smooth_terminal needs L >= 0, got {l}"
                )));
            }
            BsdeProblem {
                name: name.into(),
                horizon,
                generator: GeneratorSpec {
                    f: Arc::new(move |_, y, z| l * (y.sin() + smooth_u(z))),
                    df_dy: Arc::new(move |_, y, _| l * y.cos()),
                    df_dz: Arc::new(move |_, _, z| l * smooth_du(z)),
                    lipschitz: l,
                    time_holder: 0.0,
                    is_deterministic: true,
                    linear: None,
                },
                terminal: TerminalSpec {
                    xi: Arc::new(|p| p.terminal().tanh()),
                    d_xi: Some(Arc::new(|p, _| {
                        let th = p.terminal().tanh();
                        1.0 - th * th
                    })),
                    state: brownian,
                    state_dim: dim,
                },
                reference: None,
                exact: None,
            }
        }
        "fbsde_energy" => {
            let x0 = reader.or("x0", 1.0)?;
            let mu = reader.or("mu", 0.0)?;
            let kappa = reader.or("kappa", 0.0)?;
            let sigma = reader.required("sigma")?;
            let sigma_x = reader.or("sigma_x", 0.0)?;
            let a = reader.or("a", 0.0)?;
            let b = reader.or("b", 0.0)?;
            let c = reader.or("c", 0.0)?;
            let phi: fn(f64) -> f64 = match reader.text("phi", "exp_neg")?.as_str() {
                "exp_neg" => |u| (-u).exp(),
                "identity" => |u| u,
                other => {
                    return Err(BsdeError::InvalidArgument(format!(
                        "fbsde_energy: unknown phi `{other}` (expected exp_neg or identity)"
                    )))
                }
            };
            let forward = EulerForward {
                x0,
                mu,
                kappa,
                sigma,
                sigma_x,
            };
            BsdeProblem {
                name: name.into(),
                horizon,
                generator: GeneratorSpec::linear(
                    Coeff::Constant(a),
                    Coeff::Constant(b),
                    Coeff::Constant(c),
                ),
                terminal: TerminalSpec {
                    xi: Arc::new(move |p| {
                        let k = p.len() - 1;
                        let mut out = [0.0; 2];
                        forward.states(p, &[k], &mut out);
                        phi(out[1])
                    }),
                    d_xi: None,
                    state: Arc::new(move |p, idx, out| forward.states(p, idx, out)),
                    state_dim: 2,
                },
                reference: None,
                exact: None,
            }
        }
        _ => unreachable!(),
    };
    Ok(problem)
}

/// Euler scheme for `dX = (mu - kappa X) dt + (sigma + sigma_x X) dW`, with the
/// running energy `∫ X² dr` by the trapezoid rule on the fine grid.
#[derive(Clone, Copy, Debug)]
struct EulerForward {
    x0: f64,
    mu: f64,
    kappa: f64,
    sigma: f64,
    sigma_x: f64,
}

impl EulerForward {
    fn states(&self, path: &PathRef<'_>, idx: &[usize], out: &mut [f64]) {
        let mut x = self.x0;
        let mut energy = 0.0;
        let mut next = 0;
        for k in 0..path.len() {
            while next < idx.len() && idx[next] == k {
                out[2 * next] = x;
                out[2 * next + 1] = energy;
                next += 1;
            }
            if next == idx.len() || k + 1 == path.len() {
                break;
            }
            let dt = path.times[k + 1] - path.times[k];
            let dw = path.w[k + 1] - path.w[k];
            let x_next = x + (self.mu - self.kappa * x) * dt + (self.sigma + self.sigma_x * x) * dw;
            energy += 0.5 * (x * x + x_next * x_next) * dt;
            x = x_next;
        }
    }
}

fn check_horizon(problem: &BsdeProblem, ensemble: &PathEnsemble) -> Result<()> {
    let t = ensemble.horizon();
    if (t - problem.horizon).abs() > 1e-12 * problem.horizon.max(1.0) {
        return Err(BsdeError::InvalidArgument(format!(
            "ensemble horizon {t} does not match problem horizon {}",
            problem.horizon
        )));
    }
    Ok(())
}

/// `ξ^π` on every path, evaluated on the fine grid.
pub fn eval_terminal(problem: &BsdeProblem, ensemble: &PathEnsemble) -> Result<Vec<f64>> {
    check_horizon(problem, ensemble)?;
    let xi = &problem.terminal.xi;
    Ok(ensemble.map_paths(|_, p| xi(&p)))
}

/// `D_θ ξ` on every path.
pub fn malliavin_terminal(
    problem: &BsdeProblem,
    ensemble: &PathEnsemble,
    theta: f64,
) -> Result<Vec<f64>> {
    check_horizon(problem, ensemble)?;
    let d_xi = problem.terminal.d_xi.as_ref().ok_or_else(|| {
        BsdeError::UnsupportedProblem(format!(
            "`{}` has no Malliavin derivative of its terminal value",
            problem.name
        ))
    })?;
    Ok(ensemble.map_paths(|_, p| d_xi(&p, theta)))
}

/// Exponent of the stochastic exponential over one fine step `[s_k, s_{k+1}]`:
/// `h(s_k) δW_k + ∫ (g - h²/2) dr`, the `dr` part exact for constant
/// coefficients and trapezoidal otherwise.
pub(crate) fn step_drift(lin: &LinearCoeffs, s0: f64, s1: f64) -> f64 {
    match (lin.g.as_constant(), lin.h.as_constant()) {
        (Some(g), Some(h)) => (g - 0.5 * h * h) * (s1 - s0),
        _ => {
            let q = |s: f64| {
                let h = lin.h.at(s);
                lin.g.at(s) - 0.5 * h * h
            };
            0.5 * (q(s0) + q(s1)) * (s1 - s0)
        }
    }
}

/// `ρ_{t,r} = exp{∫_t^r h dW + ∫_t^r (g - h²/2) ds}` on every path, between
/// fine indices `t_index <= r_index`.
pub fn linear_rho(
    generator: &GeneratorSpec,
    ensemble: &PathEnsemble,
    t_index: usize,
    r_index: usize,
) -> Result<Vec<f64>> {
    let lin = generator
        .linear
        .as_ref()
        .ok_or(BsdeError::GeneratorNotLinear)?;
    let fine = ensemble.fine();
    if t_index > r_index || r_index > fine.n() {
        return Err(BsdeError::InvalidArgument(format!(
            "need t_index <= r_index <= {}, got {t_index}, {r_index}",
            fine.n()
        )));
    }
    let times = fine.times();
    let h_at: Vec<f64> = (t_index..r_index).map(|k| lin.h.at(times[k])).collect();
    let drift: f64 = (t_index..r_index)
        .map(|k| step_drift(lin, times[k], times[k + 1]))
        .sum();
    Ok((0..ensemble.n_paths())
        .map(|p| {
            let inc = &ensemble.increments(p)[t_index..r_index];
            let stoch: f64 = h_at.iter().zip(inc).map(|(h, dw)| h * dw).sum();
            (stoch + drift).exp()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{sample_ensemble, Partition};

    fn params(kv: &[(&str, f64)]) -> Params {
        kv.iter()
            .map(|(k, v)| (k.to_string(), Value::from(*v)))
            .collect()
    }

    #[test]
    fn unknown_and_missing() {
        assert!(matches!(
            builtin("heston", 1.0, &Params::new()),
            Err(BsdeError::UnknownProblem(_))
        ));
        assert!(matches!(
            builtin("linear_const", 1.0, &params(&[("a", 0.1)])),
            Err(BsdeError::MissingParam { .. })
        ));
        assert!(matches!(
            builtin("fbsde_energy", 1.0, &Params::new()),
            Err(BsdeError::MissingParam { .. })
        ));
        assert!(matches!(
            builtin("martingale", 1.0, &params(&[("a", 0.1)])),
            Err(BsdeError::InvalidArgument(_))
        ));
    }

    #[test]
    fn reference_hits_terminal() {
        let fine = Partition::uniform(1.0, 32).unwrap();
        let e = sample_ensemble(&fine, 200, 4).unwrap();
        for name in ["martingale", "quadratic", "hermite2", "linear_const"] {
            let prob = builtin(name, 1.0, &params(&[("a", 0.1), ("b", 0.2), ("c", 0.3)]))
                .or_else(|_| builtin(name, 1.0, &Params::new()))
                .unwrap();
            let r = prob.reference.as_ref().unwrap();
            let xi = eval_terminal(&prob, &e).unwrap();
            let yt = e.map_paths(|_, p| (r.y)(&p, 32));
            for (a, b) in xi.iter().zip(&yt) {
                assert!((a - b).abs() <= 1e-10, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn linear_const_small_a_limit() {
        let fine = Partition::uniform(1.0, 4).unwrap();
        let e = sample_ensemble(&fine, 3, 4).unwrap();
        let tiny = builtin("linear_const", 1.0, &params(&[("a", 1e-14), ("b", 0.0), ("c", 2.0)])).unwrap();
        let y0 = e.map_paths(|_, p| (tiny.reference.as_ref().unwrap().y)(&p, 0));
        for y in y0 {
            assert!((y - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_const_y0() {
        let prob = builtin("linear_const", 1.0, &params(&[("a", 0.1), ("b", 0.2)])).unwrap();
        let times = [0.0, 1.0];
        let w = [0.0, 0.3];
        let p = PathRef { times: &times, w: &w };
        let y0 = (prob.reference.as_ref().unwrap().y)(&p, 0);
        assert!((y0 - 0.1_f64.exp() * 0.2).abs() < 1e-15);
        assert!(((prob.reference.as_ref().unwrap().z)(&p, 0) - 0.1_f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn linear_form_matches_driver() {
        let prob = builtin("linear_const", 1.0, &params(&[("a", -0.4), ("b", 0.7), ("c", 1.5)])).unwrap();
        let lin = prob.generator.linear.as_ref().unwrap();
        for &(t, y, z) in &[(0.1, 1.0, -2.0), (0.9, -3.5, 0.25), (0.5, 0.0, 0.0)] {
            let direct = prob.generator.eval(t, y, z);
            let via = lin.g.at(t) * y + lin.h.at(t) * z + lin.f1.at(t);
            assert!((direct - via).abs() < 1e-15);
        }
    }

    #[test]
    fn terminals_of_simple_problems() {
        let fine = Partition::uniform(1.0, 8).unwrap();
        let e = sample_ensemble(&fine, 100, 8).unwrap();
        let wt = e.terminal_w();
        let m = builtin("martingale", 1.0, &Params::new()).unwrap();
        let q = builtin("quadratic", 1.0, &Params::new()).unwrap();
        let xi_m = eval_terminal(&m, &e).unwrap();
        let xi_q = eval_terminal(&q, &e).unwrap();
        let d_m = malliavin_terminal(&m, &e, 0.3).unwrap();
        let d_q = malliavin_terminal(&q, &e, 0.3).unwrap();
        for p in 0..100 {
            assert_eq!(xi_m[p], wt[p]);
            assert_eq!(xi_q[p], wt[p] * wt[p]);
            assert_eq!(d_m[p], 1.0);
            assert_eq!(d_q[p], 2.0 * wt[p]);
        }
    }

    #[test]
    fn horizon_mismatch_rejected() {
        let fine = Partition::uniform(2.0, 8).unwrap();
        let e = sample_ensemble(&fine, 4, 8).unwrap();
        let m = builtin("martingale", 1.0, &Params::new()).unwrap();
        assert!(eval_terminal(&m, &e).is_err());
    }

    #[test]
    fn fbsde_has_no_malliavin_derivative() {
        let fine = Partition::uniform(1.0, 8).unwrap();
        let e = sample_ensemble(&fine, 4, 8).unwrap();
        let p = builtin("fbsde_energy", 1.0, &params(&[("sigma", 0.3)])).unwrap();
        assert!(matches!(
            malliavin_terminal(&p, &e, 0.5),
            Err(BsdeError::UnsupportedProblem(_))
        ));
    }

    #[test]
    fn fbsde_deterministic_forward() {
        // sigma = 0, constant drift: X_t = x0 + mu t, energy = ∫ X² by trapezoid
        let p = builtin(
            "fbsde_energy",
            1.0,
            &[
                ("sigma".to_string(), Value::from(0.0)),
                ("mu".to_string(), Value::from(1.0)),
                ("x0".to_string(), Value::from(0.0)),
                ("phi".to_string(), Value::from("identity")),
            ]
            .into_iter()
            .collect(),
        )
        .unwrap();
        let fine = Partition::uniform(1.0, 1000).unwrap();
        let e = sample_ensemble(&fine, 2, 1).unwrap();
        let xi = eval_terminal(&p, &e).unwrap();
        assert!((xi[0] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn rho_trivial_cases() {
        let fine = Partition::uniform(1.0, 16).unwrap();
        let e = sample_ensemble(&fine, 50, 2).unwrap();
        let gen = GeneratorSpec::linear(Coeff::Constant(0.3), Coeff::Constant(0.0), Coeff::Constant(0.0));
        for v in linear_rho(&gen, &e, 5, 5).unwrap() {
            assert_eq!(v, 1.0);
        }
        let want = (0.3_f64 * 0.5).exp();
        for v in linear_rho(&gen, &e, 4, 12).unwrap() {
            assert!((v - want).abs() < 1e-14);
        }
        let nonlinear = builtin("smooth_terminal", 1.0, &Params::new()).unwrap();
        assert!(matches!(
            linear_rho(&nonlinear.generator, &e, 0, 4),
            Err(BsdeError::GeneratorNotLinear)
        ));
    }
}
