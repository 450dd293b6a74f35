//! Path-wise losses, their remainder decomposition, and the residual
//! scaling scan.
//!
//! One-step residual (φ evaluated at step-`n` states):
//!
//! ```text
//! r_n = Y_{n+1} − Y_n − φ(t_n, X_n, Y_n, Z_n) Δt_n − Z_nᵀ ΔW_n
//! ```
//!
//! The higher-order variant (d = 1) further subtracts
//! `½ b_n² H_n (ΔW_n² − Δt_n)` with `H_n = ∂²û/∂x²(t_n, X_n)`.
//!
//! With `Z = bᵀ∇u`, the terminal-gradient term compares `Z_N` with
//! `b(T, X_N, Y_N)ᵀ∇g(X_N)`, the value `Z` takes under the exact solution.

use crate::autodiff::{Real, Var};
use crate::brownian::{BrownianLattice, IncrementSet};
use crate::csv::Table;
use crate::error::{invalid, shape, Error, Result};
use crate::problems::{hidden_from_gradient, ExactSolution, ExactSource, Fbsde, SolutionSource};
use crate::rng::CounterNormal;
use crate::simulate::{generate_paths, GenerateOptions, PathBundle, Track};
use crate::stats;
use crate::surrogate::{Mlp, Order, ParamTape};
use crate::timegrid::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    /// Step residuals plus the terminal mismatch.
    Pathwise,
    /// Pathwise plus the weighted terminal-gradient term.
    PathwisePlusTerminalGrad,
    /// Step residuals with the Hessian correction (d = 1).
    HigherOrder,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pathwise" => Ok(LossVariant::Pathwise),
            "pathwise_plus_terminal_grad" | "terminal_grad" => Ok(LossVariant::PathwisePlusTerminalGrad),
            "higher_order" | "hessian" => Ok(LossVariant::HigherOrder),
            other => Err(invalid(format!("unknown loss variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    /// Weight of the terminal-gradient term.
    pub terminal_gradient_weight: f64,
    /// Multiply squared residual `n` by `N Δt_n / T` (non-uniform grids).
    pub weighted: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            terminal_gradient_weight: 1.0,
            weighted: false,
        }
    }
}

/// Components of an evaluated loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// `[path][step]`.
    pub per_step_residuals: Vec<f64>,
    pub paths: usize,
    pub steps: usize,
    /// `Σ_m |Y_N − g(X_N)|²`.
    pub terminal_term: f64,
    /// Weighted terminal-gradient term, when enabled.
    pub terminal_gradient_term: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn residual(&self, m: usize, n: usize) -> f64 {
        self.per_step_residuals[m * self.steps + n]
    }
}

/// One-step residual, shared by the plain and taped evaluations.
#[allow(clippy::too_many_arguments)]
pub fn step_residual<P: Fbsde, S: Real>(
    problem: &P,
    t: f64,
    x: &[f64],
    y: S,
    z: &[S],
    y_next: S,
    dt: f64,
    dw: &[f64],
) -> S {
    let mut r = y_next - y - problem.driver(t, x, y, z) * dt;
    for (zi, wi) in z.iter().zip(dw) {
        r = r - *zi * *wi;
    }
    r
}

/// Hessian correction `½ b² H (ΔW² − Δt)` for d = 1.
fn hessian_correction<S: Real>(b: f64, h: S, dt: f64, dw: f64) -> S {
    h * (0.5 * b * b * (dw * dw - dt))
}

fn step_weights(grid: &TimeGrid, weighted: bool) -> Vec<f64> {
    let n = grid.steps() as f64;
    grid.step_sizes()
        .iter()
        .map(|dt| if weighted { n * dt / grid.horizon() } else { 1.0 })
        .collect()
}

fn check_bundle<P: Fbsde>(bundle: &PathBundle, problem: &P, track: Track) -> Result<()> {
    if bundle.track(track).is_none() {
        return Err(invalid(format!("bundle has no {} track", track.name())));
    }
    if bundle.dim != problem.dim() {
        return Err(shape("bundle dimension differs from the problem"));
    }
    if bundle.increments.steps() != bundle.grid.steps() || bundle.increments.paths() != bundle.paths {
        return Err(shape("bundle increments do not match its grid"));
    }
    Ok(())
}

fn breakdown_from_residuals<P: Fbsde>(
    bundle: &PathBundle,
    problem: &P,
    track: Track,
    residuals: Vec<f64>,
    weights: &[f64],
    grad_weight: Option<f64>,
) -> Result<LossBreakdown> {
    let steps = bundle.grid.steps();
    let sq: f64 = residuals
        .iter()
        .enumerate()
        .map(|(i, r)| weights[i % steps] * r * r)
        .sum();
    let n = steps;
    let terminal_term: f64 = (0..bundle.paths)
        .map(|m| (bundle.y(track, m, n) - problem.terminal(bundle.x(track, m, n))).powi(2))
        .sum();
    let terminal_gradient_term = match grad_weight {
        Some(w) => Some(w * terminal_gradient_term(bundle, problem, track)?),
        None => None,
    };
    let total = sq + terminal_term + terminal_gradient_term.unwrap_or(0.0);
    Ok(LossBreakdown {
        per_step_residuals: residuals,
        paths: bundle.paths,
        steps,
        terminal_term,
        terminal_gradient_term,
        total,
    })
}

/// Path-wise loss evaluated on the stored states of `track`.
pub fn pathwise_loss<P: Fbsde>(
    bundle: &PathBundle,
    problem: &P,
    track: Track,
    with_terminal_gradient: bool,
    options: &LossOptions,
) -> Result<LossBreakdown> {
    check_bundle(bundle, problem, track)?;
    let residuals = residuals(bundle, problem, track, None)?;
    let weights = step_weights(&bundle.grid, options.weighted);
    breakdown_from_residuals(
        bundle,
        problem,
        track,
        residuals,
        &weights,
        with_terminal_gradient.then_some(options.terminal_gradient_weight),
    )
}

fn residuals<P: Fbsde>(bundle: &PathBundle, problem: &P, track: Track, hess: Option<&[f64]>) -> Result<Vec<f64>> {
    let steps = bundle.grid.steps();
    let nodes = steps + 1;
    let mut out = Vec::with_capacity(bundle.paths * steps);
    for m in 0..bundle.paths {
        for n in 0..steps {
            let t = bundle.grid.time(n);
            let dt = bundle.grid.step(n);
            let x = bundle.x(track, m, n);
            let y = bundle.y(track, m, n);
            let dw = bundle.increments.get(m, n);
            let mut r = step_residual(problem, t, x, y, bundle.z(track, m, n), bundle.y(track, m, n + 1), dt, dw);
            if let Some(h) = hess {
                let b = problem.diffusion(t, x, y)[0];
                r -= hessian_correction(b, h[m * nodes + n], dt, dw[0]);
            }
            out.push(r);
        }
    }
    Ok(out)
}

/// `Σ_m ‖Z_N − b(T, X_N, Y_N)ᵀ∇g(X_N)‖²` (unweighted).
pub fn terminal_gradient_term<P: Fbsde>(bundle: &PathBundle, problem: &P, track: Track) -> Result<f64> {
    check_bundle(bundle, problem, track)?;
    let n = bundle.grid.steps();
    let t = bundle.grid.horizon();
    let mut acc = 0.0;
    for m in 0..bundle.paths {
        let x = bundle.x(track, m, n);
        let g = problem.terminal_gradient(x).ok_or_else(|| {
            Error::Unsupported("terminal gradient requested but g has no analytic gradient".into())
        })?;
        let target = hidden_from_gradient(&problem.diffusion(t, x, bundle.y(track, m, n)), &g);
        acc += bundle
            .z(track, m, n)
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok(acc)
}

/// Spatial second derivative of `source` at every node of `track`.
fn node_hessians(bundle: &PathBundle, track: Track, source: &dyn SolutionSource) -> Result<Vec<f64>> {
    let tr = bundle.track(track).unwrap();
    let times: Vec<f64> = (0..bundle.paths)
        .flat_map(|_| bundle.grid.points().iter().copied())
        .collect();
    Ok(source.evaluate(&times, &tr.x, Order::Hessian)?.hess)
}

/// Higher-order loss with the Hessian of `source` (network or exact `u`).
pub fn higher_order_loss<P: Fbsde>(
    bundle: &PathBundle,
    problem: &P,
    track: Track,
    source: &dyn SolutionSource,
    options: &LossOptions,
) -> Result<LossBreakdown> {
    check_bundle(bundle, problem, track)?;
    if problem.dim() != 1 {
        return Err(Error::Unsupported("higher-order loss is defined for d = 1".into()));
    }
    let hess = node_hessians(bundle, track, source)?;
    let residuals = residuals(bundle, problem, track, Some(&hess))?;
    let weights = step_weights(&bundle.grid, options.weighted);
    breakdown_from_residuals(bundle, problem, track, residuals, &weights, None)
}

/// Differentiable training loss on network outputs at precomputed states.
///
/// `states` holds `X̂` for every path and node (`[path][node][component]`);
/// parameter gradients flow through `û`, `∇û` and `∇²û` only.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<'t, P: Fbsde>(
    pt: &'t ParamTape<'_>,
    problem: &P,
    grid: &TimeGrid,
    incs: &IncrementSet,
    states: &[f64],
    variant: LossVariant,
    options: &LossOptions,
) -> Result<Var<'t>> {
    let d = problem.dim();
    let steps = grid.steps();
    let nodes = steps + 1;
    let paths = incs.paths();
    if incs.steps() != steps || states.len() != paths * nodes * d {
        return Err(shape("states and increments do not match the grid"));
    }
    let order = if variant == LossVariant::HigherOrder {
        if d != 1 {
            return Err(Error::Unsupported("higher-order loss is defined for d = 1".into()));
        }
        Order::Hessian
    } else {
        Order::Gradient
    };
    let times: Vec<f64> = (0..paths).flat_map(|_| grid.points().iter().copied()).collect();
    let out = pt.evaluate(&times, states, order)?;
    let weights = step_weights(grid, options.weighted);
    let tape = pt.tape();
    let mut total = tape.var(0.0);
    for m in 0..paths {
        let base = m * nodes;
        let node_z = |n: usize| -> (Vec<f64>, Vec<Var<'t>>) {
            let p = base + n;
            let x = &states[p * d..(p + 1) * d];
            let b = problem.diffusion(times[p], x, out.value[p].value());
            let g = out.gradient(p);
            let z = (0..d)
                .map(|j| {
                    let mut acc = g[0] * b[j];
                    for i in 1..d {
                        acc = acc + g[i] * b[i * d + j];
                    }
                    acc
                })
                .collect();
            (b, z)
        };
        let (mut b_cur, mut z_cur) = node_z(0);
        for n in 0..steps {
            let p = base + n;
            let x = &states[p * d..(p + 1) * d];
            let dw = incs.get(m, n);
            let dt = grid.step(n);
            let mut r = step_residual(problem, grid.time(n), x, out.value[p], &z_cur, out.value[p + 1], dt, dw);
            if order == Order::Hessian {
                r = r - hessian_correction(b_cur[0], out.hessian(p)[0], dt, dw[0]);
            }
            let sq = r * r;
            total = total + if weights[n] == 1.0 { sq } else { sq * weights[n] };
            let (b_next, zn) = node_z(n + 1);
            b_cur = b_next;
            z_cur = zn;
        }
        let pn = base + steps;
        let x_n = &states[pn * d..(pn + 1) * d];
        let tm = out.value[pn] - problem.terminal(x_n);
        total = total + tm * tm;
        if variant == LossVariant::PathwisePlusTerminalGrad {
            let g = problem.terminal_gradient(x_n).ok_or_else(|| {
                Error::Unsupported("terminal-gradient loss needs an analytic ∇g".into())
            })?;
            let target = hidden_from_gradient(&b_cur, &g);
            for (zi, ti) in z_cur.iter().zip(&target) {
                let e = *zi - *ti;
                total = total + e * e * options.terminal_gradient_weight;
            }
        }
    }
    Ok(total)
}

/// Remainder terms of `Y^EM_{n+1} − û(t_{n+1}, X_{n+1})` for d = 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemainderReport {
    /// `R₁ … R₆`.
    pub r: [f64; 6],
    /// Everything not captured by `R₁ … R₆`, defined by subtraction.
    pub tail: f64,
    pub residual: f64,
}

/// Value and `(∂t, ∂x, ∂xx)` of a one-dimensional solution at a point.
pub trait PointSolution {
    fn value(&self, t: f64, x: f64) -> Result<f64>;
    fn derivatives(&self, t: f64, x: f64) -> Result<(f64, f64, f64)>;
}

impl PointSolution for Mlp {
    fn value(&self, t: f64, x: f64) -> Result<f64> {
        self.forward(t, &[x])
    }

    fn derivatives(&self, t: f64, x: f64) -> Result<(f64, f64, f64)> {
        let (ut, g) = self.input_gradient(t, &[x])?;
        let h = self.input_hessian(t, &[x])?;
        Ok((ut, g[0], h[[0, 0]]))
    }
}

/// [`PointSolution`] view of an analytic solution.
pub struct ExactPoint<'a>(pub &'a dyn ExactSolution);

impl PointSolution for ExactPoint<'_> {
    fn value(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.0.value(t, &[x]))
    }

    fn derivatives(&self, t: f64, x: f64) -> Result<(f64, f64, f64)> {
        let missing = || Error::Unsupported("solution lacks ∂t or Hessian".into());
        let ut = self.0.time_derivative(t, &[x]).ok_or_else(missing)?;
        let h = self.0.hessian(t, &[x]).ok_or_else(missing)?;
        Ok((ut, self.0.gradient(t, &[x])[0], h[0]))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn remainder_decomposition<P: Fbsde>(
    problem: &P,
    u: &dyn PointSolution,
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    dt: f64,
    dw: f64,
) -> Result<RemainderReport> {
    if problem.dim() != 1 {
        return Err(Error::Unsupported("remainder decomposition is defined for d = 1".into()));
    }
    let xs = [x];
    let a = problem.drift(t, &xs, y, &[z])[0];
    let b = problem.diffusion(t, &xs, y)[0];
    let phi = problem.driver(t, &xs, y, &[z]);
    let uh = u.value(t, x)?;
    let (ut, ux, uxx) = u.derivatives(t, x)?;
    let r = [
        y - uh,
        (z - b * ux) * dw,
        (phi - ut - a * ux - 0.5 * b * b * uxx) * dt,
        -0.5 * b * b * uxx * (dw * dw - dt),
        -0.5 * a * a * uxx * dt * dt,
        -a * b * uxx * dw * dt,
    ];
    let x_next = x + a * dt + b * dw;
    let y_em = y + phi * dt + z * dw;
    let residual = y_em - u.value(t + dt, x_next)?;
    let tail = residual - r.iter().sum::<f64>();
    Ok(RemainderReport { r, tail, residual })
}

/// Sample moments of `ΔW² − Δt` over `draws` independent increments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquareIncrementMoments {
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
}

pub fn square_increment_moments(dt: f64, draws: usize, seed: u64) -> Result<SquareIncrementMoments> {
    if draws < 4 || !(dt > 0.0) {
        return Err(invalid("need at least 4 draws and a positive step"));
    }
    let mut g = CounterNormal::new(seed, 0);
    let s = dt.sqrt();
    let v: Vec<f64> = (0..draws)
        .map(|_| {
            let w = s * g.normal();
            w * w - dt
        })
        .collect();
    Ok(SquareIncrementMoments {
        mean: stats::mean(&v),
        mean_se: stats::std_error(&v),
        variance: stats::variance(&v),
        variance_se: stats::variance_std_error(&v),
    })
}

/// One row of the residual scaling scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRow {
    pub level: u32,
    pub dt: f64,
    pub variant: LossVariant,
    pub mean_signed: f64,
    pub se_signed: f64,
    pub mean_abs: f64,
    pub se_abs: f64,
}

#[derive(Debug, Clone)]
pub struct ScalingScan {
    pub rows: Vec<ScanRow>,
    /// Fitted slope of `log₂ E|r|` against `log₂ Δt`, path-wise residuals.
    pub pathwise_abs_slope: stats::LinearFit,
    /// Same, Hessian-corrected residuals.
    pub higher_order_abs_slope: stats::LinearFit,
    pub pathwise_signed_slope: Option<stats::LinearFit>,
    pub higher_order_signed_slope: Option<stats::LinearFit>,
}

impl ScalingScan {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["level", "dt", "variant", "mean_signed", "se_signed", "mean_abs", "se_abs"]);
        for r in &self.rows {
            let name = match r.variant {
                LossVariant::HigherOrder => "higher_order",
                _ => "pathwise",
            };
            t.push(vec![
                r.level.into(),
                r.dt.into(),
                name.into(),
                r.mean_signed.into(),
                r.se_signed.into(),
                r.mean_abs.into(),
                r.se_abs.into(),
            ]);
        }
        t.footer(format!("pathwise_abs_slope: {}", self.pathwise_abs_slope.slope));
        t.footer(format!("higher_order_abs_slope: {}", self.higher_order_abs_slope.slope));
        t
    }
}

/// Monte Carlo estimates of the one-step residual size per level with
/// `û := u`, for both loss variants, on increments from one lattice.
///
/// Means are over all steps; standard errors use per-path averages.
/// `max_rel_se` rejects scans whose absolute-mean standard error exceeds
/// that fraction of the mean.
pub fn loss_scaling_scan<P: Fbsde>(
    problem: &P,
    levels: &[u32],
    paths: usize,
    seed: u64,
    max_rel_se: Option<f64>,
) -> Result<ScalingScan> {
    let u = problem
        .exact()
        .ok_or_else(|| invalid("the scaling scan needs an exact solution"))?;
    if problem.dim() != 1 {
        return Err(Error::Unsupported("the scaling scan is defined for d = 1".into()));
    }
    if levels.len() < 2 {
        return Err(Error::Insufficient("need at least two levels".into()));
    }
    let max_level = *levels.iter().max().unwrap();
    let lattice = BrownianLattice::sample(seed, max_level, paths, 1, problem.horizon())?;
    let src = ExactSource { solution: u, dim: 1 };
    let mut rows = Vec::new();
    for &l in levels {
        let grid = TimeGrid::uniform(problem.horizon(), 1 << l)?;
        let incs = lattice.increments_at_level(l)?;
        let opts = GenerateOptions {
            surrogate_track: false,
            ..Default::default()
        };
        let bundle = generate_paths(problem, &grid, &incs, None, opts)?;
        let steps = grid.steps();
        let plain = residuals(&bundle, problem, Track::Exact, None)?;
        let hess = node_hessians(&bundle, Track::Exact, &src)?;
        let corrected = residuals(&bundle, problem, Track::Exact, Some(&hess))?;
        for (variant, res) in [(LossVariant::Pathwise, plain), (LossVariant::HigherOrder, corrected)] {
            let signed: Vec<f64> = res.chunks(steps).map(stats::mean).collect();
            let abs: Vec<f64> = res
                .chunks(steps)
                .map(|c| c.iter().map(|v| v.abs()).sum::<f64>() / steps as f64)
                .collect();
            let row = ScanRow {
                level: l,
                dt: grid.step(0),
                variant,
                mean_signed: stats::mean(&signed),
                se_signed: stats::std_error(&signed),
                mean_abs: stats::mean(&abs),
                se_abs: stats::std_error(&abs),
            };
            if let Some(bound) = max_rel_se {
                if row.se_abs > bound * row.mean_abs {
                    return Err(Error::Insufficient(format!(
                        "level {l}: standard error {} exceeds {bound} of the mean {}; increase M",
                        row.se_abs, row.mean_abs
                    )));
                }
            }
            rows.push(row);
        }
    }
    let fit = |variant: LossVariant, signed: bool| -> Result<stats::LinearFit> {
        let (x, y): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| (r.dt.log2(), if signed { r.mean_signed.abs().log2() } else { r.mean_abs.log2() }))
            .unzip();
        stats::linear_fit(&x, &y)
    };
    Ok(ScalingScan {
        pathwise_abs_slope: fit(LossVariant::Pathwise, false)?,
        higher_order_abs_slope: fit(LossVariant::HigherOrder, false)?,
        pathwise_signed_slope: fit(LossVariant::Pathwise, true).ok(),
        higher_order_signed_slope: fit(LossVariant::HigherOrder, true).ok(),
        rows,
    })
}
