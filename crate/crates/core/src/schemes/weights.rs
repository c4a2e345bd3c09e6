//! Discrete stochastic-exponential weights `ρ^π_{t_i, t_j}` of the Malliavin scheme.

use serde::{Deserialize, Serialize};

use crate::error::{BsdeError, Result};
use crate::paths::{PathEnsemble, Partition};
use crate::problems::{step_drift, GeneratorSpec, LinearCoeffs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightVariant {
    /// `∫ ∂_z f dW + ∫ (∂_y f - (∂_z f)²/2) dr` per interval, `dW` on the fine grid.
    #[default]
    Integral,
    /// Coefficients frozen at the left end of each interval.
    LeftPoint,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct IntervalWeight {
    /// Constant slope on the interval increment, when there is one.
    pub slope: Option<f64>,
    pub drift: f64,
}

/// Per-interval exponents of `ρ^π` for one coarse partition.
#[derive(Debug, Clone)]
pub(crate) struct WeightPlan {
    intervals: Vec<IntervalWeight>,
    fine_index: Vec<usize>,
    // h at every fine point, for the integral variant with time-varying h
    h_fine: Option<Vec<f64>>,
}

pub(crate) fn linear_part(generator: &GeneratorSpec) -> Result<&LinearCoeffs> {
    if !generator.is_deterministic {
        return Err(BsdeError::PreconditionViolated(
            "the Malliavin scheme needs a deterministic generator".into(),
        ));
    }
    generator.linear.as_ref().ok_or_else(|| {
        BsdeError::PreconditionViolated("the Malliavin scheme needs a generator linear in (y, z)".into())
    })
}

impl WeightPlan {
    pub fn new(
        lin: &LinearCoeffs,
        fine: &Partition,
        coarse: &Partition,
        fine_index: &[usize],
        variant: WeightVariant,
    ) -> Self {
        let ft = fine.times();
        let constant = lin.g.as_constant().is_some() && lin.h.as_constant().is_some();
        let intervals = (0..coarse.n())
            .map(|k| {
                let (t0, dt) = (coarse.t(k), coarse.dt(k));
                match variant {
                    WeightVariant::LeftPoint => {
                        let h = lin.h.at(t0);
                        IntervalWeight {
                            slope: Some(h),
                            drift: (lin.g.at(t0) - 0.5 * h * h) * dt,
                        }
                    }
                    WeightVariant::Integral if constant => {
                        let (g, h) = (lin.g.at(t0), lin.h.at(t0));
                        IntervalWeight {
                            slope: Some(h),
                            drift: (g - 0.5 * h * h) * dt,
                        }
                    }
                    WeightVariant::Integral => IntervalWeight {
                        slope: lin.h.as_constant(),
                        drift: (fine_index[k]..fine_index[k + 1])
                            .map(|j| step_drift(lin, ft[j], ft[j + 1]))
                            .sum(),
                    },
                }
            })
            .collect::<Vec<_>>();
        let h_fine = if intervals.iter().any(|w| w.slope.is_none()) {
            Some(ft.iter().map(|&s| lin.h.at(s)).collect())
        } else {
            None
        };
        Self {
            intervals,
            fine_index: fine_index.to_vec(),
            h_fine,
        }
    }

    pub fn interval(&self, k: usize) -> IntervalWeight {
        self.intervals[k]
    }

    pub fn fine_range(&self, k: usize) -> std::ops::Range<usize> {
        self.fine_index[k]..self.fine_index[k + 1]
    }

    /// `h` at fine point `j`; only populated when some interval lacks a constant slope.
    pub fn h_fine(&self, j: usize) -> f64 {
        self.h_fine.as_ref().expect("fine h table")[j]
    }

    /// Exponent over coarse interval `k` for one path, given its fine increments.
    pub fn log_increment(&self, k: usize, fine_inc: &[f64]) -> f64 {
        let (a, b) = (self.fine_index[k], self.fine_index[k + 1]);
        let w = self.intervals[k];
        let stoch = match w.slope {
            Some(h) => {
                let mut block = 0.0;
                for &x in &fine_inc[a..b] {
                    block += x;
                }
                h * block
            }
            None => {
                let h = self.h_fine.as_ref().expect("fine h table");
                (a..b).map(|j| h[j] * fine_inc[j]).sum()
            }
        };
        stoch + w.drift
    }
}

/// `ρ^π_{t_i, t_j}` on every path of `ensemble`, `i <= j` coarse indices.
pub fn discrete_weights(
    generator: &GeneratorSpec,
    ensemble: &PathEnsemble,
    partition: &Partition,
    i: usize,
    j: usize,
    variant: WeightVariant,
) -> Result<Vec<f64>> {
    let lin = linear_part(generator)?;
    if i > j || j > partition.n() {
        return Err(BsdeError::PreconditionViolated(format!(
            "need i <= j <= {}, got {i}, {j}",
            partition.n()
        )));
    }
    let fine_index = ensemble.fine().subset_indices(partition)?;
    let plan = WeightPlan::new(lin, ensemble.fine(), partition, &fine_index, variant);
    Ok((0..ensemble.n_paths())
        .map(|p| {
            let inc = ensemble.increments(p);
            let mut expo = 0.0;
            for k in i..j {
                expo += plan.log_increment(k, inc);
            }
            expo.exp()
        })
        .collect())
}
