//! Euler-Maruyama and Milstein steps and the dual-track path generator.
//!
//! The generator steps `X̂` with Euler-Maruyama and sets `Ŷ_n = u(t_n, X̂_n)`,
//! `Ẑ_n = b(t_n, X̂_n, Ŷ_n)ᵀ∇u(t_n, X̂_n)` at every node, terminal node
//! included, from either the exact solution or the network. Both tracks
//! consume the same increments.

use std::path::Path;

use rayon::prelude::*;

use crate::brownian::IncrementSet;
use crate::csv::{Cell, Table};
use crate::error::{invalid, shape, Error, Result};
use crate::problems::{hidden_from_gradient, ExactSource, Fbsde, SolutionSource};
use crate::surrogate::{Mlp, Order};
use crate::timegrid::TimeGrid;

/// `X + a(t, X, Y, Z)Δt + b(t, X, Y)ΔW`.
#[allow(clippy::too_many_arguments)]
pub fn em_forward_step<P: Fbsde>(
    problem: &P,
    t: f64,
    x: &[f64],
    y: f64,
    z: &[f64],
    dt: f64,
    dw: &[f64],
) -> Result<Vec<f64>> {
    let d = problem.dim();
    check_step_inputs(d, x, z, dw, &[y, t, dt])?;
    let a = problem.drift(t, x, y, z);
    let b = problem.diffusion(t, x, y);
    Ok(forward_update(d, x, &a, &b, dt, dw))
}

fn forward_update(d: usize, x: &[f64], a: &[f64], b: &[f64], dt: f64, dw: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|i| x[i] + a[i] * dt + (0..d).map(|j| b[i * d + j] * dw[j]).sum::<f64>())
        .collect()
}

/// `Y + φ(t, X, Y, Z)Δt + ZᵀΔW`.
#[allow(clippy::too_many_arguments)]
pub fn em_backward_step<P: Fbsde>(
    problem: &P,
    t: f64,
    x: &[f64],
    y: f64,
    z: &[f64],
    dt: f64,
    dw: &[f64],
) -> Result<f64> {
    check_step_inputs(problem.dim(), x, z, dw, &[y, t, dt])?;
    Ok(y + problem.driver(t, x, y, z) * dt + z.iter().zip(dw).map(|(a, b)| a * b).sum::<f64>())
}

fn check_step_inputs(d: usize, x: &[f64], z: &[f64], dw: &[f64], scalars: &[f64]) -> Result<()> {
    if x.len() != d || z.len() != d || dw.len() != d {
        return Err(shape(format!("step inputs must have dimension {d}")));
    }
    if x.iter().chain(z).chain(dw).chain(scalars).any(|v| !v.is_finite()) {
        return Err(invalid("non-finite step input"));
    }
    Ok(())
}

/// Scalar Milstein step `X + aΔt + bΔW + ½ b b′ (ΔW² − Δt)`.
pub fn milstein_step_1d(
    a: impl Fn(f64, f64) -> f64,
    b: impl Fn(f64, f64) -> f64,
    grad_b: impl Fn(f64, f64) -> f64,
    t: f64,
    x: f64,
    dt: f64,
    dw: f64,
) -> f64 {
    let bv = b(t, x);
    x + a(t, x) * dt + bv * dw + 0.5 * bv * grad_b(t, x) * (dw * dw - dt)
}

/// Milstein step for a decoupled one-dimensional problem.
pub fn milstein_step<P: Fbsde>(problem: &P, t: f64, x: f64, dt: f64, dw: f64) -> Result<f64> {
    if problem.dim() != 1 {
        return Err(Error::Unsupported("Milstein scheme is implemented for d = 1 only".into()));
    }
    if !problem.forward_decoupled() {
        return Err(Error::Unsupported("Milstein scheme needs a decoupled forward process".into()));
    }
    if problem.diffusion_derivative_1d(t, x).is_none() {
        return Err(Error::Unsupported("problem does not provide ∂b/∂x".into()));
    }
    Ok(milstein_step_1d(
        |t, x| problem.drift(t, &[x], 0.0, &[0.0])[0],
        |t, x| problem.diffusion(t, &[x], 0.0)[0],
        |t, x| problem.diffusion_derivative_1d(t, x).unwrap(),
        t,
        x,
        dt,
        dw,
    ))
}

/// Forward discretisation used by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardScheme {
    EulerMaruyama,
    /// One-dimensional decoupled problems only.
    Milstein,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Track {
    /// Driven by the exact solution `u`.
    Exact,
    /// Driven by the network `û(·; θ)`.
    Surrogate,
}

impl Track {
    pub fn name(self) -> &'static str {
        match self {
            Track::Exact => "exact",
            Track::Surrogate => "surrogate",
        }
    }
}

/// States of one track, `x`/`z` laid out `[path][node][component]`, `y` as
/// `[path][node]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackPaths {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

/// Output of [`generate_paths`].
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub paths: usize,
    pub dim: usize,
    pub increments: IncrementSet,
    pub exact: Option<TrackPaths>,
    pub surrogate: Option<TrackPaths>,
}

impl PathBundle {
    pub fn nodes(&self) -> usize {
        self.grid.steps() + 1
    }

    pub fn track(&self, track: Track) -> Option<&TrackPaths> {
        match track {
            Track::Exact => self.exact.as_ref(),
            Track::Surrogate => self.surrogate.as_ref(),
        }
    }

    /// `X̂` of path `m` at node `n`.
    pub fn x(&self, track: Track, m: usize, n: usize) -> &[f64] {
        let o = (m * self.nodes() + n) * self.dim;
        &self.track(track).expect("track not generated").x[o..o + self.dim]
    }

    pub fn y(&self, track: Track, m: usize, n: usize) -> f64 {
        self.track(track).expect("track not generated").y[m * self.nodes() + n]
    }

    pub fn z(&self, track: Track, m: usize, n: usize) -> &[f64] {
        let o = (m * self.nodes() + n) * self.dim;
        &self.track(track).expect("track not generated").z[o..o + self.dim]
    }

    /// CSV with columns `path, step, t, track, x_i.., y, z_i..`.
    pub fn to_table(&self) -> Table {
        let d = self.dim;
        let mut header: Vec<String> = vec!["path".into(), "step".into(), "t".into(), "track".into()];
        header.extend((0..d).map(|i| format!("x{i}")));
        header.push("y".into());
        header.extend((0..d).map(|i| format!("z{i}")));
        let mut table = Table::new(&header);
        for m in 0..self.paths {
            for track in [Track::Exact, Track::Surrogate] {
                if self.track(track).is_none() {
                    continue;
                }
                for n in 0..self.nodes() {
                    let mut row: Vec<Cell> = vec![
                        m.into(),
                        n.into(),
                        self.grid.time(n).into(),
                        track.name().into(),
                    ];
                    row.extend(self.x(track, m, n).iter().map(|&v| Cell::Float(v)));
                    row.push(self.y(track, m, n).into());
                    row.extend(self.z(track, m, n).iter().map(|&v| Cell::Float(v)));
                    table.push(row);
                }
            }
        }
        table
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.to_table().write_to(path)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenerateOptions {
    pub exact_track: bool,
    pub surrogate_track: bool,
    pub scheme: ForwardScheme,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            exact_track: true,
            surrogate_track: true,
            scheme: ForwardScheme::EulerMaruyama,
        }
    }
}

/// `(Y₀, Z₀) = (u(0, X₀), b(0, X₀, Y₀)ᵀ∇u(0, X₀))` from the given source.
pub fn init_states<P: Fbsde>(problem: &P, source: &dyn SolutionSource, x0: &[f64]) -> Result<(f64, Vec<f64>)> {
    if x0.len() != problem.dim() {
        return Err(shape("initial state has the wrong dimension"));
    }
    let out = source.evaluate(&[0.0], x0, Order::Gradient)?;
    let y0 = out.value[0];
    let b = problem.diffusion(0.0, x0, y0);
    Ok((y0, hidden_from_gradient(&b, out.gradient(0))))
}

/// Forward states of a decoupled problem, `[path][node][component]`.
pub fn decoupled_forward_states<P: Fbsde>(
    problem: &P,
    grid: &TimeGrid,
    incs: &IncrementSet,
    scheme: ForwardScheme,
) -> Result<Vec<f64>> {
    if !problem.forward_decoupled() {
        return Err(Error::Unsupported("forward process depends on (Y, Z)".into()));
    }
    check_increments(problem, grid, incs)?;
    if scheme == ForwardScheme::Milstein {
        milstein_step(problem, 0.0, problem.initial_state()[0], 0.0, 0.0)?;
    }
    let d = problem.dim();
    let nodes = grid.steps() + 1;
    let x0 = problem.initial_state();
    let zeros = vec![0.0; d];
    let mut xs = vec![0.0; incs.paths() * nodes * d];
    xs.par_chunks_mut(nodes * d)
        .enumerate()
        .try_for_each(|(m, out)| -> Result<()> {
            out[..d].copy_from_slice(&x0);
            for n in 0..grid.steps() {
                let t = grid.time(n);
                let dt = grid.step(n);
                let dw = incs.get(m, n);
                let x = &out[n * d..(n + 1) * d];
                let next = match scheme {
                    ForwardScheme::EulerMaruyama => {
                        let a = problem.drift(t, x, 0.0, &zeros);
                        let b = problem.diffusion(t, x, 0.0);
                        forward_update(d, x, &a, &b, dt, dw)
                    }
                    ForwardScheme::Milstein => vec![milstein_step(problem, t, x[0], dt, dw[0])?],
                };
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { path: m, step: n + 1 });
                }
                out[(n + 1) * d..(n + 2) * d].copy_from_slice(&next);
            }
            Ok(())
        })?;
    Ok(xs)
}

/// Exact forward states `X_{t_n}` from the cumulative Brownian path,
/// `[path][node][component]`.
pub fn exact_forward_states<P: Fbsde>(problem: &P, grid: &TimeGrid, incs: &IncrementSet) -> Result<Vec<f64>> {
    check_increments(problem, grid, incs)?;
    let d = problem.dim();
    let nodes = grid.steps() + 1;
    if problem.exact_forward(0.0, &vec![0.0; d]).is_none() {
        return Err(Error::Unsupported("problem has no exact forward process".into()));
    }
    let mut xs = vec![0.0; incs.paths() * nodes * d];
    xs.par_chunks_mut(nodes * d).enumerate().for_each(|(m, out)| {
        let w = incs.brownian_path(m);
        for n in 0..nodes {
            let x = problem.exact_forward(grid.time(n), &w[n * d..(n + 1) * d]).unwrap();
            out[n * d..(n + 1) * d].copy_from_slice(&x);
        }
    });
    Ok(xs)
}

fn check_increments<P: Fbsde>(problem: &P, grid: &TimeGrid, incs: &IncrementSet) -> Result<()> {
    if incs.steps() != grid.steps() {
        return Err(shape(format!(
            "{} increments per path for a grid of {} steps",
            incs.steps(),
            grid.steps()
        )));
    }
    if incs.dim() != problem.dim() {
        return Err(shape("increment dimension differs from the problem dimension"));
    }
    if (grid.horizon() - problem.horizon()).abs() > 1e-12 * problem.horizon() {
        return Err(invalid("grid horizon differs from the problem horizon"));
    }
    for (a, b) in incs.step_sizes().iter().zip(grid.step_sizes()) {
        if (a - b).abs() > 1e-12 * grid.horizon() {
            return Err(invalid("increment step sizes do not match the grid"));
        }
    }
    Ok(())
}

/// Fill `y`, `z` at all nodes of precomputed states.
fn evaluate_nodes<P: Fbsde>(
    problem: &P,
    grid: &TimeGrid,
    paths: usize,
    xs: Vec<f64>,
    source: &dyn SolutionSource,
) -> Result<TrackPaths> {
    let d = problem.dim();
    let nodes = grid.steps() + 1;
    let times: Vec<f64> = (0..paths).flat_map(|_| grid.points().iter().copied()).collect();
    let out = source.evaluate(&times, &xs, Order::Gradient)?;
    let mut z = vec![0.0; xs.len()];
    for p in 0..paths * nodes {
        let x = &xs[p * d..(p + 1) * d];
        let b = problem.diffusion(times[p], x, out.value[p]);
        z[p * d..(p + 1) * d].copy_from_slice(&hidden_from_gradient(&b, out.gradient(p)));
        if !out.value[p].is_finite() {
            return Err(Error::NonFinite { path: p / nodes, step: p % nodes });
        }
    }
    Ok(TrackPaths { x: xs, y: out.value, z })
}

/// Node-by-node stepping for problems whose forward coefficients depend on
/// `(Y, Z)`.
fn coupled_track<P: Fbsde>(
    problem: &P,
    grid: &TimeGrid,
    incs: &IncrementSet,
    source: &dyn SolutionSource,
) -> Result<TrackPaths> {
    let d = problem.dim();
    let m_paths = incs.paths();
    let nodes = grid.steps() + 1;
    let mut x = vec![0.0; m_paths * nodes * d];
    let mut y = vec![0.0; m_paths * nodes];
    let mut z = vec![0.0; m_paths * nodes * d];
    let x0 = problem.initial_state();
    let mut cur: Vec<f64> = (0..m_paths).flat_map(|_| x0.iter().copied()).collect();
    for n in 0..nodes {
        let t = grid.time(n);
        let out = source.evaluate(&vec![t; m_paths], &cur, Order::Gradient)?;
        let mut next = vec![0.0; m_paths * d];
        for m in 0..m_paths {
            let xm = &cur[m * d..(m + 1) * d];
            let ym = out.value[m];
            let b = problem.diffusion(t, xm, ym);
            let zm = hidden_from_gradient(&b, out.gradient(m));
            let o = m * nodes + n;
            x[o * d..(o + 1) * d].copy_from_slice(xm);
            y[o] = ym;
            z[o * d..(o + 1) * d].copy_from_slice(&zm);
            if n + 1 < nodes {
                let a = problem.drift(t, xm, ym, &zm);
                let xn = forward_update(d, xm, &a, &b, grid.step(n), incs.get(m, n));
                if xn.iter().any(|v| !v.is_finite()) || !ym.is_finite() {
                    return Err(Error::NonFinite { path: m, step: n + 1 });
                }
                next[m * d..(m + 1) * d].copy_from_slice(&xn);
            }
        }
        cur = next;
    }
    Ok(TrackPaths { x, y, z })
}

fn build_track<P: Fbsde>(
    problem: &P,
    grid: &TimeGrid,
    incs: &IncrementSet,
    source: &dyn SolutionSource,
    scheme: ForwardScheme,
) -> Result<TrackPaths> {
    if problem.forward_decoupled() {
        let xs = decoupled_forward_states(problem, grid, incs, scheme)?;
        evaluate_nodes(problem, grid, incs.paths(), xs, source)
    } else {
        if scheme != ForwardScheme::EulerMaruyama {
            return Err(Error::Unsupported("Milstein needs a decoupled forward process".into()));
        }
        coupled_track(problem, grid, incs, source)
    }
}

/// Dual-track path generation from shared increments.
pub fn generate_paths<P: Fbsde>(
    problem: &P,
    grid: &TimeGrid,
    incs: &IncrementSet,
    net: Option<&Mlp>,
    options: GenerateOptions,
) -> Result<PathBundle> {
    check_increments(problem, grid, incs)?;
    let want_exact = options.exact_track && problem.exact().is_some();
    let want_net = options.surrogate_track && net.is_some();
    if !want_exact && !want_net {
        return Err(invalid("neither the exact nor the surrogate track can be built"));
    }
    if let Some(n) = net {
        if n.state_dim() != problem.dim() {
            return Err(shape("network input dimension does not match the problem"));
        }
    }
    let exact = if want_exact {
        let src = ExactSource {
            solution: problem.exact().unwrap(),
            dim: problem.dim(),
        };
        Some(build_track(problem, grid, incs, &src, options.scheme)?)
    } else {
        None
    };
    let surrogate = if want_net {
        Some(build_track(problem, grid, incs, net.unwrap(), options.scheme)?)
    } else {
        None
    };
    Ok(PathBundle {
        grid: grid.clone(),
        paths: incs.paths(),
        dim: problem.dim(),
        increments: incs.clone(),
        exact,
        surrogate,
    })
}
