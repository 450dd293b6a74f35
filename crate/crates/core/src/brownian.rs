//! Finest-level Gaussian lattice and the level-coupled Brownian increments
//! derived from it.
//!
//! Only the finest Gaussians are stored. Level `l` increments are obtained by
//! scaling the finest draws and summing neighbouring pairs `L - l` times, so
//! pairing the level `l + 1` increments reproduces level `l` bit for bit.

use rayon::prelude::*;

use crate::error::{invalid, shape, Error, Result};
use crate::rng::CounterNormal;
use crate::timegrid::TimeGrid;

/// Default cap on lattice size, in scalars.
pub const DEFAULT_MEMORY_CAP: u128 = 1 << 31;

/// `M · 2^L` standard Gaussian vectors of dimension `d`, laid out
/// `[path][slot][component]`.
#[derive(Debug, Clone)]
pub struct BrownianLattice {
    max_level: u32,
    batch: usize,
    dim: usize,
    horizon: f64,
    seed: u64,
    z: Vec<f64>,
}

impl BrownianLattice {
    /// Sample with the default memory cap.
    pub fn sample(seed: u64, max_level: u32, batch: usize, dim: usize, horizon: f64) -> Result<Self> {
        Self::sample_with_cap(seed, max_level, batch, dim, horizon, DEFAULT_MEMORY_CAP)
    }

    /// Path `m` draws its Gaussians from counter stream `m`, so the lattice is
    /// independent of how paths are distributed over threads.
    pub fn sample_with_cap(
        seed: u64,
        max_level: u32,
        batch: usize,
        dim: usize,
        horizon: f64,
        cap: u128,
    ) -> Result<Self> {
        if batch == 0 || dim == 0 {
            return Err(invalid("lattice needs M ≥ 1 and d ≥ 1"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if max_level >= 64 {
            return Err(invalid("max level too large"));
        }
        let requested = (batch as u128) << max_level;
        let requested = requested * dim as u128;
        if requested > cap {
            return Err(Error::MemoryCap { requested, cap });
        }
        let per_path = dim << max_level;
        let mut z = vec![0.0; batch * per_path];
        z.par_chunks_mut(per_path).enumerate().for_each(|(m, chunk)| {
            CounterNormal::new(seed, m as u64).fill_normal(chunk);
        });
        Ok(BrownianLattice {
            max_level,
            batch,
            dim,
            horizon,
            seed,
            z,
        })
    }

    pub fn max_level(&self) -> u32 {
        self.max_level
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// All finest-level Gaussians.
    pub fn gaussians(&self) -> &[f64] {
        &self.z
    }

    /// Gaussian vector at global slot `k` (0-based, `k < M·2^L`).
    pub fn gaussian(&self, k: usize) -> &[f64] {
        &self.z[k * self.dim..(k + 1) * self.dim]
    }

    /// Brownian increments on the uniform grid with `2^l` steps.
    pub fn increments_at_level(&self, level: u32) -> Result<IncrementSet> {
        if level > self.max_level {
            return Err(invalid(format!(
                "level {level} exceeds lattice max level {}",
                self.max_level
            )));
        }
        let d = self.dim;
        let fine_steps = 1usize << self.max_level;
        let steps = 1usize << level;
        let scale = self.horizon.sqrt() * 2f64.powf(-(self.max_level as f64) / 2.0);
        let mut data = vec![0.0; self.batch * steps * d];
        data.par_chunks_mut(steps * d)
            .zip(self.z.par_chunks(fine_steps * d))
            .for_each(|(out, z)| {
                let mut buf: Vec<f64> = z.iter().map(|v| v * scale).collect();
                let mut len = fine_steps;
                while len > steps {
                    len /= 2;
                    for n in 0..len {
                        for c in 0..d {
                            buf[n * d + c] = buf[2 * n * d + c] + buf[(2 * n + 1) * d + c];
                        }
                    }
                }
                out.copy_from_slice(&buf[..steps * d]);
            });
        let dt = self.horizon / steps as f64;
        Ok(IncrementSet {
            level: Some(level),
            paths: self.batch,
            steps,
            dim: d,
            dt: vec![dt; steps],
            seed: Some(self.seed),
            data,
        })
    }
}

/// Index of the first finest slot feeding increment `step` of path `path`
/// (1-based path index) at `level`: `2^L (m-1) + n 2^{L-l}`.
pub fn block_start(step: usize, path: usize, level: u32, max_level: u32) -> usize {
    assert!(path >= 1 && level <= max_level);
    ((path - 1) << max_level) + (step << (max_level - level))
}

/// Per-path, per-step Brownian increments, laid out `[path][step][component]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementSet {
    level: Option<u32>,
    paths: usize,
    steps: usize,
    dim: usize,
    dt: Vec<f64>,
    seed: Option<u64>,
    data: Vec<f64>,
}

impl IncrementSet {
    /// Build from raw data; `dt` gives the step sizes.
    pub fn from_raw(paths: usize, dim: usize, dt: Vec<f64>, data: Vec<f64>) -> Result<Self> {
        let steps = dt.len();
        if data.len() != paths * steps * dim {
            return Err(shape(format!(
                "{} increments for {paths} paths × {steps} steps × {dim}",
                data.len()
            )));
        }
        Ok(IncrementSet {
            level: None,
            paths,
            steps,
            dim,
            dt,
            seed: None,
            data,
        })
    }

    /// Independent increments `√Δt_n · ξ` on an arbitrary grid.
    pub fn sample(grid: &TimeGrid, paths: usize, dim: usize, seed: u64) -> Result<Self> {
        if paths == 0 || dim == 0 {
            return Err(invalid("need M ≥ 1 and d ≥ 1"));
        }
        let steps = grid.steps();
        let dt = grid.step_sizes();
        let sq: Vec<f64> = dt.iter().map(|v| v.sqrt()).collect();
        let mut data = vec![0.0; paths * steps * dim];
        data.par_chunks_mut(steps * dim).enumerate().for_each(|(m, out)| {
            let mut g = CounterNormal::new(seed, m as u64);
            for n in 0..steps {
                for c in 0..dim {
                    out[n * dim + c] = sq[n] * g.normal();
                }
            }
        });
        Ok(IncrementSet {
            level: None,
            paths,
            steps,
            dim,
            dt,
            seed: Some(seed),
            data,
        })
    }

    pub fn level(&self) -> Option<u32> {
        self.level
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step_sizes(&self) -> &[f64] {
        &self.dt
    }

    /// Seed of the lattice (or stream family) the increments came from.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Increment vector of path `m` (0-based) at step `n`.
    #[inline]
    pub fn get(&self, m: usize, n: usize) -> &[f64] {
        let o = (m * self.steps + n) * self.dim;
        &self.data[o..o + self.dim]
    }

    /// All increments of path `m`.
    pub fn path(&self, m: usize) -> &[f64] {
        let w = self.steps * self.dim;
        &self.data[m * w..(m + 1) * w]
    }

    /// Restrict to the first `paths` paths.
    pub fn truncate_paths(&self, paths: usize) -> Result<Self> {
        if paths == 0 || paths > self.paths {
            return Err(invalid(format!("cannot take {paths} of {} paths", self.paths)));
        }
        let mut out = self.clone();
        out.paths = paths;
        out.data.truncate(paths * self.steps * self.dim);
        Ok(out)
    }

    /// `ΔW^c_n = ΔW^f_{2n} + ΔW^f_{2n+1}`.
    pub fn coarse_from_fine(&self) -> Result<Self> {
        if self.steps % 2 != 0 {
            return Err(invalid(format!("odd step count {}", self.steps)));
        }
        let d = self.dim;
        let steps = self.steps / 2;
        let mut data = vec![0.0; self.paths * steps * d];
        for m in 0..self.paths {
            let src = self.path(m);
            let dst = &mut data[m * steps * d..(m + 1) * steps * d];
            for n in 0..steps {
                for c in 0..d {
                    dst[n * d + c] = src[2 * n * d + c] + src[(2 * n + 1) * d + c];
                }
            }
        }
        let dt = self.dt.chunks(2).map(|p| p[0] + p[1]).collect();
        Ok(IncrementSet {
            level: self.level.and_then(|l| l.checked_sub(1)),
            paths: self.paths,
            steps,
            dim: d,
            dt,
            seed: self.seed,
            data,
        })
    }

    /// Every increment negated.
    pub fn antithetic_reflect(&self) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = -*v);
        out
    }

    /// Consecutive increment pairs swapped: `[a, b, c, d] → [b, a, d, c]`.
    pub fn antithetic_twin(&self) -> Result<Self> {
        if self.steps % 2 != 0 {
            return Err(invalid(format!("odd step count {}", self.steps)));
        }
        let d = self.dim;
        let mut out = self.clone();
        for m in 0..self.paths {
            let w = self.steps * d;
            let p = &mut out.data[m * w..(m + 1) * w];
            for n in (0..self.steps).step_by(2) {
                for c in 0..d {
                    p.swap(n * d + c, (n + 1) * d + c);
                }
            }
        }
        for n in (0..self.steps).step_by(2) {
            out.dt.swap(n, n + 1);
        }
        Ok(out)
    }

    /// Total displacement `Σ_n ΔW_n` of each path, `[path][component]`.
    pub fn path_sums(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; self.paths * d];
        for m in 0..self.paths {
            for n in 0..self.steps {
                for c in 0..d {
                    out[m * d + c] += self.get(m, n)[c];
                }
            }
        }
        out
    }

    /// Brownian values `W_{t_0..t_N}` of path `m`, `[node][component]`.
    pub fn brownian_path(&self, m: usize) -> Vec<f64> {
        let d = self.dim;
        let mut w = vec![0.0; (self.steps + 1) * d];
        for n in 0..self.steps {
            for c in 0..d {
                w[(n + 1) * d + c] = w[n * d + c] + self.get(m, n)[c];
            }
        }
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;
    use proptest::prelude::*;

    #[test]
    fn deterministic_and_sized() {
        let a = BrownianLattice::sample(11, 3, 5, 2, 1.0).unwrap();
        let b = BrownianLattice::sample(11, 3, 5, 2, 1.0).unwrap();
        assert_eq!(a.gaussians(), b.gaussians());
        assert_eq!(a.gaussians().len(), 5 * 8 * 2);
        let one = BrownianLattice::sample(1, 0, 1, 1, 1.0).unwrap();
        assert_eq!(one.gaussians().len(), 1);
        let c = BrownianLattice::sample(12, 3, 5, 2, 1.0).unwrap();
        assert_ne!(a.gaussians(), c.gaussians());
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(BrownianLattice::sample(0, 2, 0, 1, 1.0).is_err());
        assert!(BrownianLattice::sample(0, 2, 1, 0, 1.0).is_err());
        assert!(BrownianLattice::sample(0, 2, 1, 1, 0.0).is_err());
        assert!(matches!(
            BrownianLattice::sample_with_cap(0, 10, 4, 1, 1.0, 1000),
            Err(Error::MemoryCap { .. })
        ));
        let lat = BrownianLattice::sample(0, 2, 1, 1, 1.0).unwrap();
        assert!(lat.increments_at_level(3).is_err());
    }

    #[test]
    fn lattice_moments() {
        let lat = BrownianLattice::sample(3, 10, 1000, 1, 1.0).unwrap();
        let z = lat.gaussians();
        let se = 1.0 / (z.len() as f64).sqrt();
        assert!(stats::mean(z).abs() < 4.0 * se);
        assert!((stats::variance(z) - 1.0).abs() < 4.0 * stats::variance_std_error(z));
    }

    #[test]
    fn kappa_examples() {
        for l in 0..=3 {
            assert_eq!(block_start(0, 1, l, 3), 0);
        }
        assert_eq!(block_start(1, 2, 2, 3), 10);
    }

    #[test]
    fn increments_follow_kappa_blocks() {
        let (big_l, t) = (3u32, 2.0);
        let lat = BrownianLattice::sample(5, big_l, 3, 2, t).unwrap();
        for l in 0..=big_l {
            let inc = lat.increments_at_level(l).unwrap();
            let width = 1usize << (big_l - l);
            for m in 0..3 {
                for n in 0..(1usize << l) {
                    let k0 = block_start(n, m + 1, l, big_l);
                    for c in 0..2 {
                        let s: f64 = (0..width).map(|k| lat.gaussian(k0 + k)[c]).sum();
                        let want = t.sqrt() * 2f64.powf(-(big_l as f64) / 2.0) * s;
                        assert!((inc.get(m, n)[c] - want).abs() < 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn finest_level_is_scaled_gaussian() {
        let lat = BrownianLattice::sample(9, 4, 2, 1, 1.0).unwrap();
        let inc = lat.increments_at_level(4).unwrap();
        for (a, z) in inc.data().iter().zip(lat.gaussians()) {
            assert_eq!(*a, 0.25 * z);
        }
    }

    #[test]
    fn level_variance_scaling() {
        let t = 1.5;
        let lat = BrownianLattice::sample(21, 12, 32, 1, t).unwrap();
        for l in [5u32, 8, 12] {
            let inc = lat.increments_at_level(l).unwrap();
            if inc.data().len() < 100_000 {
                continue;
            }
            let v = stats::variance(inc.data());
            let want = t * 2f64.powi(-(l as i32));
            assert!((v / want - 1.0).abs() < 0.05, "level {l}: {v} vs {want}");
        }
    }

    #[test]
    fn coarse_from_fine_examples() {
        let f = IncrementSet::from_raw(1, 1, vec![0.5, 0.5], vec![0.1, -0.2]).unwrap();
        let c = f.coarse_from_fine().unwrap();
        assert!((c.data()[0] + 0.1).abs() < 1e-16);
        assert_eq!(c.step_sizes(), &[1.0]);
        let odd = IncrementSet::from_raw(1, 1, vec![1.0; 3], vec![0.0; 3]).unwrap();
        assert!(odd.coarse_from_fine().is_err());
        assert!(odd.antithetic_twin().is_err());
    }

    #[test]
    fn repeated_coarsening_gives_total_displacement() {
        let lat = BrownianLattice::sample(2, 6, 4, 3, 1.0).unwrap();
        let mut inc = lat.increments_at_level(6).unwrap();
        let sums = inc.path_sums();
        for _ in 0..6 {
            inc = inc.coarse_from_fine().unwrap();
        }
        assert_eq!(inc.steps(), 1);
        for (a, b) in inc.data().iter().zip(&sums) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(inc, lat.increments_at_level(0).unwrap());
    }

    #[test]
    fn antithetic_examples() {
        let s = IncrementSet::from_raw(1, 1, vec![0.5, 0.5], vec![0.3, -0.1]).unwrap();
        assert_eq!(s.antithetic_reflect().data(), &[-0.3, 0.1]);
        assert_eq!(s.antithetic_reflect().antithetic_reflect(), s);
        let sum: f64 = s.path_sums()[0] + s.antithetic_reflect().path_sums()[0];
        assert_eq!(sum, 0.0);
        let q = IncrementSet::from_raw(1, 1, vec![0.25; 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(q.antithetic_twin().unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn brownian_path_accumulates() {
        let s = IncrementSet::from_raw(1, 1, vec![0.5, 0.5], vec![0.3, -0.1]).unwrap();
        let w = s.brownian_path(0);
        assert_eq!(w[0], 0.0);
        assert_eq!(w[1], 0.3);
        assert!((w[2] - 0.2).abs() < 1e-16);
    }

    #[test]
    fn sampled_increments_scale_with_local_step() {
        let g = TimeGrid::chebyshev(1.0, 8).unwrap();
        let s = IncrementSet::sample(&g, 20_000, 1, 4).unwrap();
        for n in [0, 4] {
            let col: Vec<f64> = (0..s.paths()).map(|m| s.get(m, n)[0]).collect();
            let v = stats::variance(&col);
            assert!((v / g.step(n) - 1.0).abs() < 0.05);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn level_consistency(seed in any::<u64>(), big_l in 1u32..8, m in 1usize..5, d in 1usize..3) {
            let lat = BrownianLattice::sample(seed, big_l, m, d, 1.0).unwrap();
            for l in 0..big_l {
                let fine = lat.increments_at_level(l + 1).unwrap();
                let coarse = lat.increments_at_level(l).unwrap();
                let from = fine.coarse_from_fine().unwrap();
                prop_assert_eq!(from.level(), Some(l));
                for (a, b) in from.data().iter().zip(coarse.data()) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
                let twin = fine.antithetic_twin().unwrap();
                let tc = twin.coarse_from_fine().unwrap();
                prop_assert_eq!(tc.data(), from.data());
                prop_assert_eq!(twin.antithetic_twin().unwrap(), fine.clone());
            }
        }

        #[test]
        fn path_sums_preserved_across_levels(seed in any::<u64>(), big_l in 0u32..8) {
            let lat = BrownianLattice::sample(seed, big_l, 3, 2, 0.7).unwrap();
            let top = lat.increments_at_level(big_l).unwrap().path_sums();
            for l in 0..=big_l {
                let s = lat.increments_at_level(l).unwrap().path_sums();
                for (a, b) in s.iter().zip(&top) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }
}
