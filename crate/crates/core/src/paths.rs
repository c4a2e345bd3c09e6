//! Time grids and reproducible Brownian path ensembles.
//!
//! Noise is sampled once on the finest grid of an experiment. Coarser grids
//! are index subsets of that grid, so every mesh level sees the same
//! Brownian motion and coarse increments telescope exactly out of fine ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{BsdeError, Result};

/// Strictly increasing time grid `0 = t_0 < t_1 < ... < t_n = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    times: Vec<f64>,
}

impl Partition {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(BsdeError::InvalidArgument(
                "a partition needs at least two time points".into(),
            ));
        }
        if times[0] != 0.0 {
            return Err(BsdeError::InvalidArgument(format!(
                "partition must start at 0, got {}",
                times[0]
            )));
        }
        if let Some(k) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(BsdeError::InvalidArgument(format!(
                "partition is not strictly increasing at index {}",
                k + 1
            )));
        }
        if !times.iter().all(|t| t.is_finite()) {
            return Err(BsdeError::InvalidArgument("non-finite time point".into()));
        }
        Ok(Self { times })
    }

    /// The grid `t_i = i T / n`.
    pub fn uniform(horizon: f64, n: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(BsdeError::InvalidArgument(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if n == 0 {
            return Err(BsdeError::InvalidArgument(
                "step count must be at least 1".into(),
            ));
        }
        let mut times: Vec<f64> = (0..=n).map(|i| i as f64 * horizon / n as f64).collect();
        times[n] = horizon;
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of steps.
    pub fn n(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.n()]
    }

    pub fn t(&self, i: usize) -> f64 {
        self.times[i]
    }

    /// Step size `t_{i+1} - t_i`.
    pub fn dt(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }

    pub fn steps(&self) -> impl Iterator<Item = f64> + '_ {
        self.times.windows(2).map(|w| w[1] - w[0])
    }

    pub fn mesh(&self) -> f64 {
        self.steps().fold(0.0, f64::max)
    }

    /// Every `stride`-th point of this grid. `stride` must divide `n`.
    pub fn stride(&self, stride: usize) -> Result<Self> {
        if stride == 0 || self.n() % stride != 0 {
            return Err(BsdeError::InvalidArgument(format!(
                "stride {stride} does not divide step count {}",
                self.n()
            )));
        }
        Ok(Self {
            times: self.times.iter().step_by(stride).copied().collect(),
        })
    }

    /// Sub-partition through `n` equal index blocks of this grid.
    pub fn coarse_uniform(&self, n: usize) -> Result<Self> {
        if n == 0 || self.n() % n != 0 {
            return Err(BsdeError::InvalidArgument(format!(
                "{n} does not divide the fine step count {}",
                self.n()
            )));
        }
        self.stride(self.n() / n)
    }

    /// Positions of `coarse` inside this grid, matched by exact equality.
    pub fn subset_indices(&self, coarse: &Partition) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(coarse.times.len());
        let mut j = 0;
        for &t in &coarse.times {
            while j < self.times.len() && self.times[j] < t {
                j += 1;
            }
            if j == self.times.len() || self.times[j] != t {
                return Err(BsdeError::InvalidArgument(format!(
                    "coarse time {t} is not a point of the fine partition"
                )));
            }
            out.push(j);
        }
        if *out.last().unwrap() != self.n() {
            return Err(BsdeError::InvalidArgument(
                "coarse partition must end at the fine horizon".into(),
            ));
        }
        Ok(out)
    }
}

/// `(mesh, max_ratio)` where `max_ratio = max Δ_i / Δ_{i+1}` (1 for a single step).
pub fn mesh_stats(p: &Partition) -> (f64, f64) {
    let steps: Vec<f64> = p.steps().collect();
    let mesh = steps.iter().copied().fold(0.0, f64::max);
    let max_ratio = if steps.len() < 2 {
        1.0
    } else {
        steps
            .windows(2)
            .map(|w| w[0] / w[1])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    (mesh, max_ratio)
}

/// One Brownian path on the fine grid: `w[k] = W_{t_k}`, `w[0] = 0`.
///
/// Functionals may receive a prefix of a path (`w.len() <= times.len()`).
#[derive(Debug, Clone, Copy)]
pub struct PathRef<'a> {
    pub times: &'a [f64],
    pub w: &'a [f64],
}

impl<'a> PathRef<'a> {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn terminal(&self) -> f64 {
        self.w[self.w.len() - 1]
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.w.len() - 1]
    }
}

/// Cumulative sums of increments, sequential order, `W_0 = 0`.
pub fn cumulative(increments: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.reserve(increments.len() + 1);
    let mut acc = 0.0;
    out.push(acc);
    for &dw in increments {
        acc += dw;
        out.push(acc);
    }
}

/// Counter-keyed standard normal stream: draw `k` of stream `(seed, stream)`
/// depends on nothing else.
pub(crate) fn normal_stream(seed: u64, stream: u64) -> impl FnMut() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    move || rng.sample(StandardNormal)
}

/// SplitMix64 finalizer, used to derive sub-seeds.
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Brownian increments on a fine grid for a fixed number of paths.
///
/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    fine: Partition,
    n_paths: usize,
    seed: u64,
    // path-major: increments[p * n + k]
    increments: Vec<f64>,
}

/// Sample `n_paths` Brownian paths on `fine`. Path `p` draws from its own
/// ChaCha stream, so the output does not depend on the thread count.
pub fn sample_ensemble(fine: &Partition, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(BsdeError::InvalidArgument("n_paths must be at least 1".into()));
    }
    let n = fine.n();
    let len = n
        .checked_mul(n_paths)
        .ok_or_else(|| BsdeError::Resource(format!("{n_paths} x {n} increments")))?;
    let mut increments = Vec::new();
    increments
        .try_reserve_exact(len)
        .map_err(|_| BsdeError::Resource(format!("{n_paths} x {n} increments")))?;
    increments.resize(len, 0.0);
    let sd: Vec<f64> = fine.steps().map(f64::sqrt).collect();
    increments
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(p, row)| {
            let mut draw = normal_stream(seed, p as u64);
            for (x, s) in row.iter_mut().zip(&sd) {
                *x = s * draw();
            }
        });
    Ok(PathEnsemble {
        fine: fine.clone(),
        n_paths,
        seed,
        increments,
    })
}

impl PathEnsemble {
    /// Build an ensemble from explicit increments (path-major, `n_paths * fine.n()`).
    pub fn from_increments(fine: Partition, increments: Vec<f64>) -> Result<Self> {
        let n = fine.n();
        if increments.is_empty() || increments.len() % n != 0 {
            return Err(BsdeError::DimensionMismatch(format!(
                "{} increments cannot fill rows of length {n}",
                increments.len()
            )));
        }
        Ok(Self {
            n_paths: increments.len() / n,
            fine,
            seed: 0,
            increments,
        })
    }

    pub fn fine(&self) -> &Partition {
        &self.fine
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn horizon(&self) -> f64 {
        self.fine.horizon()
    }

    pub fn increments(&self, p: usize) -> &[f64] {
        let n = self.fine.n();
        &self.increments[p * n..(p + 1) * n]
    }

    /// Write `W` on the fine grid for path `p` into `buf`.
    pub fn fill_path(&self, p: usize, buf: &mut Vec<f64>) {
        cumulative(self.increments(p), buf);
    }

    pub fn terminal_w(&self) -> Vec<f64> {
        (0..self.n_paths)
            .map(|p| self.increments(p).iter().sum())
            .collect()
    }

    /// Evaluate `f` on every path in parallel; output order is path order.
    pub fn map_paths<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize, PathRef<'_>) -> T + Sync,
    {
        let times = self.fine.times();
        (0..self.n_paths)
            .into_par_iter()
            .map_init(
                || Vec::with_capacity(times.len()),
                |buf, p| {
                    self.fill_path(p, buf);
                    f(p, PathRef { times, w: buf })
                },
            )
            .collect()
    }

    /// View of the ensemble on a sub-partition of the fine grid.
    pub fn coarsen(&self, coarse: &Partition) -> Result<CoarseView> {
        let index = self.fine.subset_indices(coarse)?;
        let n = coarse.n();
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..self.n_paths)
            .into_par_iter()
            .map(|p| {
                let inc = self.increments(p);
                let mut w = Vec::with_capacity(n + 1);
                let mut dw = Vec::with_capacity(n);
                let mut acc = 0.0;
                w.push(0.0);
                for i in 0..n {
                    let mut block = 0.0;
                    for &x in &inc[index[i]..index[i + 1]] {
                        acc += x;
                        block += x;
                    }
                    w.push(acc);
                    dw.push(block);
                }
                (w, dw)
            })
            .collect();
        let np = self.n_paths;
        let mut w = vec![0.0; (n + 1) * np];
        let mut dw = vec![0.0; n * np];
        for (p, (wr, dr)) in rows.into_iter().enumerate() {
            for (i, x) in wr.into_iter().enumerate() {
                w[i * np + p] = x;
            }
            for (i, x) in dr.into_iter().enumerate() {
                dw[i * np + p] = x;
            }
        }
        Ok(CoarseView {
            partition: coarse.clone(),
            fine_index: index,
            n_paths: np,
            w,
            dw,
        })
    }

    /// A new ensemble whose fine grid is `coarse`, driven by the same noise.
    pub fn restrict(&self, coarse: &Partition) -> Result<PathEnsemble> {
        let index = self.fine.subset_indices(coarse)?;
        let n = coarse.n();
        let mut increments = Vec::with_capacity(n * self.n_paths);
        for p in 0..self.n_paths {
            let inc = self.increments(p);
            for i in 0..n {
                increments.push(inc[index[i]..index[i + 1]].iter().sum());
            }
        }
        Ok(PathEnsemble {
            fine: coarse.clone(),
            n_paths: self.n_paths,
            seed: self.seed,
            increments,
        })
    }
}

/// Brownian values and increments of an ensemble on a coarse grid, node-major.
#[derive(Debug, Clone)]
pub struct CoarseView {
    partition: Partition,
    fine_index: Vec<usize>,
    n_paths: usize,
    w: Vec<f64>,
    dw: Vec<f64>,
}

impl CoarseView {
    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    /// Fine-grid index of coarse node `i`.
    pub fn fine_index(&self, i: usize) -> usize {
        self.fine_index[i]
    }

    pub fn fine_indices(&self) -> &[usize] {
        &self.fine_index
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// `W_{t_i}` on every path.
    pub fn w(&self, i: usize) -> &[f64] {
        &self.w[i * self.n_paths..(i + 1) * self.n_paths]
    }

    /// `W_{t_{i+1}} - W_{t_i}` as the sum of fine increments, on every path.
    pub fn dw(&self, i: usize) -> &[f64] {
        &self.dw[i * self.n_paths..(i + 1) * self.n_paths]
    }
}
