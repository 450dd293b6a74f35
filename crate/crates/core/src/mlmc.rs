//! Multilevel estimators and the coupled-difference measurements.
//!
//! Every difference is built from one [`BrownianLattice`], so fine and
//! coarse simulations at any two levels share the same Brownian path.
//! Values compared are `Y_n` along each simulation: `u` or `û` evaluated at
//! the simulated (or exact) forward states.

use std::collections::HashMap;
use std::sync::Arc;

use crate::brownian::BrownianLattice;
use crate::csv::{format_float, Table};
use crate::error::{invalid, shape, Error, Result};
use crate::problems::Fbsde;
use crate::simulate::{decoupled_forward_states, exact_forward_states, generate_paths, GenerateOptions, PathBundle, Track};
use crate::stats::{self, LinearFit};
use crate::surrogate::{Mlp, Order};
use crate::timegrid::TimeGrid;

/// What produces `Y_n` along a simulation.
#[derive(Debug, Clone, Copy)]
pub enum Source<'a> {
    /// `u(t_n, X_{t_n})` on the exact forward process.
    ExactProcess,
    /// `u(t_n, X̂_n)` on the Euler–Maruyama forward process.
    ExactSolution,
    /// `û(t_n, X̂_n^θ; θ)`.
    Surrogate(&'a Mlp),
}

impl Source<'_> {
    fn key(&self) -> SourceKey {
        match self {
            Source::ExactProcess => SourceKey::ExactProcess,
            Source::ExactSolution => SourceKey::ExactSolution,
            Source::Surrogate(n) => SourceKey::Net(*n as *const Mlp as usize),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum SourceKey {
    ExactProcess,
    ExactSolution,
    Net(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DifferenceKind {
    /// Plain level-0 payoff, `P̂_0 − 0`.
    Base,
    TwoWayTemporal,
    TwoWayNetwork,
    TwoWayMixed,
    FourWay,
}

/// How nodes of two levels are paired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NodeMatching {
    /// Compare only at the coarse level's nodes.
    #[default]
    CoarseNodes,
    /// Compare on the fine grid, extending coarse values piecewise constantly.
    PiecewiseConstant,
}

/// Per-path differences at matched nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceSample {
    pub kind: DifferenceKind,
    /// Level of the first operand (the finer one for temporal differences).
    pub level: u32,
    /// Level of the second operand; `None` for [`DifferenceKind::Base`].
    pub other_level: Option<u32>,
    /// Seed of the lattice all operands were simulated from.
    pub lattice_seed: u64,
    pub paths: usize,
    /// Matched nodes per path.
    pub nodes: usize,
    /// `[path][node]`.
    pub values: Vec<f64>,
    /// Time steps simulated per path, summed over operands.
    pub cost_steps: usize,
}

impl DifferenceSample {
    pub fn path(&self, m: usize) -> &[f64] {
        &self.values[m * self.nodes..(m + 1) * self.nodes]
    }

    /// Difference of the terminal payoffs, one per path.
    pub fn terminal(&self) -> Vec<f64> {
        (0..self.paths).map(|m| self.path(m)[self.nodes - 1]).collect()
    }

    /// `sup_n |Δ_n|` per path.
    pub fn sup_abs(&self) -> Vec<f64> {
        (0..self.paths)
            .map(|m| self.path(m).iter().fold(0.0, |a, v| f64::max(a, v.abs())))
            .collect()
    }

    /// `self − other`, elementwise; both must come from the same lattice.
    pub fn minus(&self, other: &DifferenceSample, kind: DifferenceKind) -> Result<DifferenceSample> {
        if self.lattice_seed != other.lattice_seed {
            return Err(Error::Coupling(format!(
                "lattice seeds differ ({} vs {})",
                self.lattice_seed, other.lattice_seed
            )));
        }
        if self.paths != other.paths || self.nodes != other.nodes {
            return Err(shape("difference samples have different shapes"));
        }
        Ok(DifferenceSample {
            kind,
            level: self.level,
            other_level: self.other_level,
            lattice_seed: self.lattice_seed,
            paths: self.paths,
            nodes: self.nodes,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
            cost_steps: self.cost_steps + other.cost_steps,
        })
    }
}

/// Payoff functional of a simulated path.
#[derive(Clone)]
pub enum Functional {
    /// `Y_N`.
    TerminalY,
    /// Function of the `Y` path and the `X` path (`[node][component]`).
    Custom(Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>),
}

/// One payoff per path of `track`.
pub fn payoff(bundle: &PathBundle, track: Track, functional: &Functional) -> Result<Vec<f64>> {
    let tr = bundle
        .track(track)
        .ok_or_else(|| invalid(format!("bundle has no {} track", track.name())))?;
    let nodes = bundle.nodes();
    let d = bundle.dim;
    Ok((0..bundle.paths)
        .map(|m| {
            let y = &tr.y[m * nodes..(m + 1) * nodes];
            match functional {
                Functional::TerminalY => y[nodes - 1],
                Functional::Custom(f) => f(y, &tr.x[m * nodes * d..(m + 1) * nodes * d]),
            }
        })
        .collect())
}

/// Caches `Y` paths per (source, level) over one lattice. Networks are
/// keyed by address, so they must outlive the evaluator.
pub struct Evaluator<'a, P: Fbsde> {
    problem: &'a P,
    lattice: &'a BrownianLattice,
    values: HashMap<(SourceKey, u32), Arc<Vec<f64>>>,
    states: HashMap<u32, Arc<Vec<f64>>>,
}

impl<'a, P: Fbsde> Evaluator<'a, P> {
    pub fn new(problem: &'a P, lattice: &'a BrownianLattice) -> Result<Self> {
        if lattice.dim() != problem.dim() || (lattice.horizon() - problem.horizon()).abs() > 1e-12 * problem.horizon()
        {
            return Err(shape("lattice does not match the problem dimension or horizon"));
        }
        Ok(Evaluator {
            problem,
            lattice,
            values: HashMap::new(),
            states: HashMap::new(),
        })
    }

    pub fn lattice(&self) -> &BrownianLattice {
        self.lattice
    }

    fn grid(&self, level: u32) -> Result<TimeGrid> {
        TimeGrid::uniform(self.problem.horizon(), 1 << level)
    }

    fn em_states(&mut self, level: u32) -> Result<Arc<Vec<f64>>> {
        if let Some(s) = self.states.get(&level) {
            return Ok(Arc::clone(s));
        }
        let incs = self.lattice.increments_at_level(level)?;
        let s = Arc::new(decoupled_forward_states(
            self.problem,
            &self.grid(level)?,
            &incs,
            crate::simulate::ForwardScheme::EulerMaruyama,
        )?);
        self.states.insert(level, Arc::clone(&s));
        Ok(s)
    }

    /// `Y` values `[path][node]` of `source` at `level`.
    pub fn y_paths(&mut self, source: Source<'a>, level: u32) -> Result<Arc<Vec<f64>>> {
        let key = (source.key(), level);
        if let Some(v) = self.values.get(&key) {
            return Ok(Arc::clone(v));
        }
        let grid = self.grid(level)?;
        let paths = self.lattice.batch();
        let times: Vec<f64> = (0..paths).flat_map(|_| grid.points().iter().copied()).collect();
        let d = self.problem.dim();
        let u = || {
            self.problem
                .exact()
                .ok_or_else(|| Error::Unsupported("problem has no exact solution".into()))
        };
        let values = match source {
            Source::ExactProcess => {
                let u = u()?;
                let incs = self.lattice.increments_at_level(level)?;
                let xs = exact_forward_states(self.problem, &grid, &incs)?;
                times
                    .iter()
                    .enumerate()
                    .map(|(p, t)| u.value(*t, &xs[p * d..(p + 1) * d]))
                    .collect()
            }
            Source::ExactSolution | Source::Surrogate(_) if !self.problem.forward_decoupled() => {
                let incs = self.lattice.increments_at_level(level)?;
                let (net, track) = match source {
                    Source::Surrogate(n) => (Some(n), Track::Surrogate),
                    _ => (None, Track::Exact),
                };
                let opts = GenerateOptions {
                    exact_track: track == Track::Exact,
                    surrogate_track: track == Track::Surrogate,
                    ..Default::default()
                };
                let b = generate_paths(self.problem, &grid, &incs, net, opts)?;
                b.track(track).unwrap().y.clone()
            }
            Source::ExactSolution => {
                let u = u()?;
                let xs = self.em_states(level)?;
                times
                    .iter()
                    .enumerate()
                    .map(|(p, t)| u.value(*t, &xs[p * d..(p + 1) * d]))
                    .collect()
            }
            Source::Surrogate(net) => {
                if net.state_dim() != d {
                    return Err(shape("network input dimension does not match the problem"));
                }
                let xs = self.em_states(level)?;
                net.evaluate_batch(&times, &xs, Order::Value)?.value
            }
        };
        let v = Arc::new(values);
        self.values.insert(key, Arc::clone(&v));
        Ok(v)
    }

    /// Payoff of `source` at `level` as a [`DifferenceKind::Base`] sample.
    pub fn level_payoff(&mut self, source: Source<'a>, level: u32) -> Result<DifferenceSample> {
        let y = self.y_paths(source, level)?;
        let n = (1usize << level) + 1;
        Ok(DifferenceSample {
            kind: DifferenceKind::Base,
            level,
            other_level: None,
            lattice_seed: self.lattice.seed(),
            paths: self.lattice.batch(),
            nodes: n,
            values: y.to_vec(),
            cost_steps: n - 1,
        })
    }

    /// `A − B` with `A` from `source_a` at `level_a` and `B` from `source_b`
    /// at `level_b`, paired on the coarser grid (or the finer one under
    /// [`NodeMatching::PiecewiseConstant`]).
    pub fn two_way(
        &mut self,
        (source_a, level_a): (Source<'a>, u32),
        (source_b, level_b): (Source<'a>, u32),
        matching: NodeMatching,
    ) -> Result<DifferenceSample> {
        let a = self.y_paths(source_a, level_a)?;
        let b = self.y_paths(source_b, level_b)?;
        let kind = match (source_a.key() == source_b.key(), level_a == level_b) {
            (true, _) => DifferenceKind::TwoWayTemporal,
            (false, true) => DifferenceKind::TwoWayNetwork,
            (false, false) => DifferenceKind::TwoWayMixed,
        };
        let (na, nb) = ((1usize << level_a) + 1, (1usize << level_b) + 1);
        let lo = level_a.min(level_b);
        let hi = level_a.max(level_b);
        let out_nodes = match matching {
            NodeMatching::CoarseNodes => (1usize << lo) + 1,
            NodeMatching::PiecewiseConstant => (1usize << hi) + 1,
        };
        // index into a level-`l` path for output node j
        let map = |l: u32, j: usize| -> usize {
            match matching {
                NodeMatching::CoarseNodes => j << (l - lo),
                NodeMatching::PiecewiseConstant => j >> (hi - l),
            }
        };
        let paths = self.lattice.batch();
        let mut values = Vec::with_capacity(paths * out_nodes);
        for m in 0..paths {
            let pa = &a[m * na..(m + 1) * na];
            let pb = &b[m * nb..(m + 1) * nb];
            for j in 0..out_nodes {
                values.push(pa[map(level_a, j)] - pb[map(level_b, j)]);
            }
        }
        Ok(DifferenceSample {
            kind,
            level: level_a,
            other_level: Some(level_b),
            lattice_seed: self.lattice.seed(),
            paths,
            nodes: out_nodes,
            values,
            cost_steps: (na - 1) + (nb - 1),
        })
    }

    /// `[û'(X̂^f) − û'(X̂^c)] − [û(X̂^f) − û(X̂^c)]`.
    pub fn four_way(
        &mut self,
        level_f: u32,
        level_c: u32,
        theta: &'a Mlp,
        theta_prime: &'a Mlp,
        matching: NodeMatching,
    ) -> Result<DifferenceSample> {
        if theta.dims() != theta_prime.dims() || theta.activation() != theta_prime.activation() {
            return Err(shape("four-way difference needs two networks of one architecture"));
        }
        let p = self.two_way(
            (Source::Surrogate(theta_prime), level_f),
            (Source::Surrogate(theta_prime), level_c),
            matching,
        )?;
        let q = self.two_way((Source::Surrogate(theta), level_f), (Source::Surrogate(theta), level_c), matching)?;
        p.minus(&q, DifferenceKind::FourWay)
    }
}

/// Convenience wrapper building an [`Evaluator`] for a single difference.
pub fn two_way_difference<P: Fbsde>(
    problem: &P,
    lattice: &BrownianLattice,
    a: (Source<'_>, u32),
    b: (Source<'_>, u32),
    matching: NodeMatching,
) -> Result<DifferenceSample> {
    Evaluator::new(problem, lattice)?.two_way(a, b, matching)
}

pub fn four_way_difference<P: Fbsde>(
    problem: &P,
    lattice: &BrownianLattice,
    level_f: u32,
    level_c: u32,
    theta: &Mlp,
    theta_prime: &Mlp,
    matching: NodeMatching,
) -> Result<DifferenceSample> {
    Evaluator::new(problem, lattice)?.four_way(level_f, level_c, theta, theta_prime, matching)
}

/// Running sums of one level's payoff differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelEstimate {
    pub level: u32,
    pub count: usize,
    pub sum: f64,
    pub sum_sq: f64,
    /// Steps × paths.
    pub cost: usize,
}

impl LevelEstimate {
    pub fn from_values(level: u32, values: &[f64], steps_per_path: usize) -> Self {
        LevelEstimate {
            level,
            count: values.len(),
            sum: values.iter().sum(),
            sum_sq: values.iter().map(|v| v * v).sum(),
            cost: steps_per_path * values.len(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    /// Unbiased sample variance, clamped at zero against rounding.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let n = self.count as f64;
        ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmcEstimate {
    pub estimate: f64,
    /// `Σ_l V_l / N_l`.
    pub estimator_variance: f64,
    pub levels: Vec<LevelEstimate>,
}

/// `Σ_l mean(P̂_l − P̂_{l−1})` from terminal payoff differences; sample `l`
/// must be the level-`l` correction, sample 0 the base payoff.
pub fn mlmc_estimate(samples: &[DifferenceSample]) -> Result<MlmcEstimate> {
    if samples.is_empty() {
        return Err(Error::Insufficient("no levels".into()));
    }
    let mut levels = Vec::with_capacity(samples.len());
    for (l, s) in samples.iter().enumerate() {
        if s.level as usize != l {
            return Err(invalid(format!("expected level {l}, found level {}", s.level)));
        }
        if (l == 0) != (s.kind == DifferenceKind::Base) {
            return Err(invalid("level 0 must be a base payoff and only level 0"));
        }
        if s.paths == 0 {
            return Err(Error::Insufficient(format!("level {l} has no samples")));
        }
        levels.push(LevelEstimate::from_values(s.level, &s.terminal(), s.cost_steps));
    }
    Ok(MlmcEstimate {
        estimate: levels.iter().map(|l| l.mean()).sum(),
        estimator_variance: levels.iter().map(|l| l.variance() / l.count as f64).sum(),
        levels,
    })
}

/// Per-path telescoped sum `P̂_0 + Σ_l (P̂_l − P̂_{l−1})` at the terminal node.
pub fn telescoped_paths(samples: &[DifferenceSample]) -> Result<Vec<f64>> {
    let first = samples.first().ok_or_else(|| Error::Insufficient("no levels".into()))?;
    let mut acc = vec![0.0; first.paths];
    for s in samples {
        if s.lattice_seed != first.lattice_seed || s.paths != first.paths {
            return Err(Error::Coupling("telescoping needs one lattice and shared paths".into()));
        }
        for (a, v) in acc.iter_mut().zip(s.terminal()) {
            *a += v;
        }
    }
    Ok(acc)
}

/// Strong-error statistics. Each is reported as a norm (the `p`-th root of
/// the corresponding moment) so that orders read directly off log-log fits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StrongError {
    /// `E|A_T − Â_N|`.
    TerminalL1,
    /// `(E|A_T − Â_N|²)^½`.
    TerminalL2,
    /// `(sup_n E|A_n − Â_n|²)^½`.
    SupOutsideL2,
    /// `(E sup_n |A_n − Â_n|²)^½`.
    SupInsideL2,
    /// `(E sup_n |A_n − Â_n|^p)^{1/p}`.
    SupInsideLp(f64),
}

/// `exact` and `approx` are `[path][node]` with `nodes` columns.
pub fn strong_error(exact: &[f64], approx: &[f64], nodes: usize, norm: StrongError) -> Result<f64> {
    if exact.len() != approx.len() || nodes == 0 || exact.len() % nodes != 0 || exact.is_empty() {
        return Err(shape("exact and approximate values must be matching [path][node] arrays"));
    }
    if let StrongError::SupInsideLp(p) = norm {
        if !(p >= 1.0) {
            return Err(invalid(format!("p = {p} must be at least 1")));
        }
    }
    let paths = exact.len() / nodes;
    let err = |m: usize, n: usize| (exact[m * nodes + n] - approx[m * nodes + n]).abs();
    let mean = |f: &dyn Fn(usize) -> f64| (0..paths).map(f).sum::<f64>() / paths as f64;
    let sup = |m: usize| (0..nodes).map(|n| err(m, n)).fold(0.0, f64::max);
    Ok(match norm {
        StrongError::TerminalL1 => mean(&|m| err(m, nodes - 1)),
        StrongError::TerminalL2 => mean(&|m| err(m, nodes - 1).powi(2)).sqrt(),
        StrongError::SupOutsideL2 => (0..nodes)
            .map(|n| mean(&|m| err(m, n).powi(2)))
            .fold(0.0, f64::max)
            .sqrt(),
        StrongError::SupInsideL2 => mean(&|m| sup(m).powi(2)).sqrt(),
        StrongError::SupInsideLp(p) => mean(&|m| sup(m).powf(p)).powf(1.0 / p),
    })
}

/// Least-squares fit of `log₂ error` against level.
pub fn convergence_fit(levels: &[u32], errors: &[f64]) -> Result<LinearFit> {
    if levels.len() != errors.len() {
        return Err(shape("levels and errors differ in length"));
    }
    if levels.len() < 3 {
        return Err(Error::Insufficient("a convergence fit needs at least 3 levels".into()));
    }
    if let Some(e) = errors.iter().find(|e| !(**e > 0.0)) {
        return Err(invalid(format!("error values must be positive, got {e}")));
    }
    let x: Vec<f64> = levels.iter().map(|l| *l as f64).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.log2()).collect();
    stats::linear_fit(&x, &y)
}

/// The difference families of the variance-structure figure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Marker {
    /// `u(t_n, X̂_n) − û(t_n, X̂_n^θ; θ)` at level `l`.
    SameNodes,
    /// `u(t_n, X_{t_n}) − u(t_n, X̂_n)` at level `l`.
    ExactVsEm,
    /// `u(t_n, X̂_n^f) − u(t_n, X̂_n^c)`, levels `l` and `l − 1`.
    TemporalExact,
    /// `u(t_n, X_{t_n}) − û(t_n, X̂_n^θ; θ)` at level `l`.
    ExactVsNet,
    /// `û(X̂^{f,θ}; θ) − û(X̂^{c,θ}; θ)`.
    TemporalNet,
    /// `û(X̂^{θ'}; θ') − û(X̂^θ; θ)` at level `l`.
    NetworkPair,
    /// `û(X̂^{f,θ'}; θ') − û(X̂^{c,θ}; θ)`.
    MixedPair,
    /// Four-way combination over levels `l`, `l − 1` and both networks.
    FourWay,
}

impl Marker {
    pub const ALL: [Marker; 8] = [
        Marker::SameNodes,
        Marker::ExactVsEm,
        Marker::TemporalExact,
        Marker::ExactVsNet,
        Marker::TemporalNet,
        Marker::NetworkPair,
        Marker::MixedPair,
        Marker::FourWay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Marker::SameNodes => "same_nodes",
            Marker::ExactVsEm => "exact_vs_em",
            Marker::TemporalExact => "temporal_exact",
            Marker::ExactVsNet => "exact_vs_net",
            Marker::TemporalNet => "temporal_net",
            Marker::NetworkPair => "network_pair",
            Marker::MixedPair => "mixed_pair",
            Marker::FourWay => "four_way",
        }
    }

    fn needs_coarser_level(self) -> bool {
        matches!(
            self,
            Marker::TemporalExact | Marker::TemporalNet | Marker::MixedPair | Marker::FourWay
        )
    }
}

impl std::str::FromStr for Marker {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Marker::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown difference kind '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceRow {
    pub marker: Marker,
    pub level: u32,
    pub dt: f64,
    pub n_samples: usize,
    /// Mean over paths of `sup_n |Δ_n|`.
    pub l1_error: f64,
    pub l1_se: f64,
    /// Sample variance of the terminal difference.
    pub variance: f64,
    pub var_se: f64,
    pub cost_steps: usize,
}

#[derive(Debug, Clone)]
pub struct VarianceScan {
    pub lattice_seed: u64,
    pub rows: Vec<VarianceRow>,
    /// `(marker, level, reason)` for every requested cell left out.
    pub skipped: Vec<(Marker, u32, String)>,
    /// Fit of `log₂ l1_error` against level per marker with ≥ 3 positive rows.
    pub fits: Vec<(Marker, LinearFit)>,
}

impl VarianceScan {
    pub fn rows_for(&self, marker: Marker) -> Vec<&VarianceRow> {
        self.rows.iter().filter(|r| r.marker == marker).collect()
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&[
            "kind",
            "level",
            "dt",
            "n_samples",
            "l1_error",
            "l1_se",
            "variance",
            "var_se",
            "cost_steps",
        ]);
        for r in &self.rows {
            t.push(vec![
                r.marker.name().into(),
                (r.level as usize).into(),
                r.dt.into(),
                r.n_samples.into(),
                r.l1_error.into(),
                r.l1_se.into(),
                r.variance.into(),
                r.var_se.into(),
                r.cost_steps.into(),
            ]);
        }
        for (m, f) in &self.fits {
            t.footer(format!(
                "fit {}: slope {} intercept {} r2 {}",
                m.name(),
                format_float(f.slope),
                format_float(f.intercept),
                format_float(f.r_squared)
            ));
        }
        for (m, l, why) in &self.skipped {
            t.footer(format!("skipped {} level {l}: {why}", m.name()));
        }
        t
    }
}

/// Every requested marker at every requested level on one lattice.
///
/// `θ` feeds the network rows, `θ'` the pair rows; rows whose sources are
/// missing are skipped with a warning.
pub fn variance_structure_scan<P: Fbsde>(
    problem: &P,
    lattice: &BrownianLattice,
    theta: Option<&Mlp>,
    theta_prime: Option<&Mlp>,
    levels: &[u32],
    markers: &[Marker],
    matching: NodeMatching,
) -> Result<VarianceScan> {
    if levels.is_empty() || markers.is_empty() {
        return Err(invalid("no levels or no difference kinds requested"));
    }
    if let Some(l) = levels.iter().find(|l| **l > lattice.max_level()) {
        return Err(invalid(format!("level {l} exceeds the lattice level {}", lattice.max_level())));
    }
    let mut ev = Evaluator::new(problem, lattice)?;
    let has_u = problem.exact().is_some();
    let has_exact_forward = problem.exact_forward(0.0, &vec![0.0; problem.dim()]).is_some();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &marker in markers {
        for &l in levels {
            let missing = match marker {
                _ if marker.needs_coarser_level() && l == 0 => Some("no coarser level below 0"),
                Marker::ExactVsEm | Marker::ExactVsNet if !has_exact_forward => Some("no exact forward process"),
                Marker::SameNodes | Marker::ExactVsEm | Marker::TemporalExact | Marker::ExactVsNet if !has_u => {
                    Some("no exact solution")
                }
                Marker::SameNodes | Marker::ExactVsNet | Marker::TemporalNet if theta.is_none() => {
                    Some("no checkpoint for θ")
                }
                Marker::NetworkPair | Marker::MixedPair | Marker::FourWay
                    if theta.is_none() || theta_prime.is_none() =>
                {
                    Some("needs two checkpoints θ and θ'")
                }
                _ => None,
            };
            if let Some(why) = missing {
                log::warn!("variance scan: skipping {} at level {l}: {why}", marker.name());
                skipped.push((marker, l, why.to_string()));
                continue;
            }
            let c = l.saturating_sub(1);
            let sample = match marker {
                Marker::SameNodes => {
                    ev.two_way((Source::ExactSolution, l), (Source::Surrogate(theta.unwrap()), l), matching)?
                }
                Marker::ExactVsEm => ev.two_way((Source::ExactProcess, l), (Source::ExactSolution, l), matching)?,
                Marker::TemporalExact => {
                    ev.two_way((Source::ExactSolution, l), (Source::ExactSolution, c), matching)?
                }
                Marker::ExactVsNet => {
                    ev.two_way((Source::ExactProcess, l), (Source::Surrogate(theta.unwrap()), l), matching)?
                }
                Marker::TemporalNet => {
                    let n = theta.unwrap();
                    ev.two_way((Source::Surrogate(n), l), (Source::Surrogate(n), c), matching)?
                }
                Marker::NetworkPair => ev.two_way(
                    (Source::Surrogate(theta_prime.unwrap()), l),
                    (Source::Surrogate(theta.unwrap()), l),
                    matching,
                )?,
                Marker::MixedPair => ev.two_way(
                    (Source::Surrogate(theta_prime.unwrap()), l),
                    (Source::Surrogate(theta.unwrap()), c),
                    matching,
                )?,
                Marker::FourWay => ev.four_way(l, c, theta.unwrap(), theta_prime.unwrap(), matching)?,
            };
            let sup = sample.sup_abs();
            let term = sample.terminal();
            rows.push(VarianceRow {
                marker,
                level: l,
                dt: problem.horizon() / (1u64 << l) as f64,
                n_samples: sample.paths,
                l1_error: stats::mean(&sup),
                l1_se: stats::std_error(&sup),
                variance: stats::variance(&term),
                var_se: stats::variance_std_error(&term),
                cost_steps: sample.cost_steps * sample.paths,
            });
        }
    }
    let mut fits = Vec::new();
    for &marker in markers {
        let (ls, es): (Vec<u32>, Vec<f64>) = rows
            .iter()
            .filter(|r| r.marker == marker && r.l1_error > 0.0)
            .map(|r| (r.level, r.l1_error))
            .unzip();
        if ls.len() >= 3 {
            if let Ok(f) = convergence_fit(&ls, &es) {
                fits.push((marker, f));
            }
        }
    }
    Ok(VarianceScan {
        lattice_seed: lattice.seed(),
        rows,
        skipped,
        fits,
    })
}
