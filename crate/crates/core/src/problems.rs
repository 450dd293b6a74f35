//! FBSDE problem data, analytic solutions and PDE-operator diagnostics.
//!
//! Convention: the hidden process is `Z = bᵀ∇u`, so drivers receive `z` in
//! that form. For Black-Scholes-Barenblatt with `b = σ diag(x)` this means
//! `zᵀx` in the usual statement becomes `Σ_i z_i / σ`.

use std::fmt;
use std::sync::Arc;

use crate::autodiff::Real;
use crate::error::{invalid, Error, Result};
use crate::rng::CounterNormal;
use crate::stats::halton;
use crate::surrogate::{BatchOutput, Mlp, Order};

/// Coefficients `(a, b, φ, g)` of
/// `dX = a dt + b dW`, `dY = φ dt + Zᵀ dW`, `Y_T = g(X_T)`.
pub trait Fbsde: Sync + Send {
    fn dim(&self) -> usize;
    fn horizon(&self) -> f64;
    fn initial_state(&self) -> Vec<f64>;

    /// Drift `a(t, x, y, z) ∈ ℝ^d`.
    fn drift<S: Real>(&self, t: f64, x: &[f64], y: S, z: &[S]) -> Vec<S>;
    /// Diffusion `b(t, x, y) ∈ ℝ^{d×d}`, row-major.
    fn diffusion<S: Real>(&self, t: f64, x: &[f64], y: S) -> Vec<S>;
    /// Driver `φ(t, x, y, z)`.
    fn driver<S: Real>(&self, t: f64, x: &[f64], y: S, z: &[S]) -> S;

    fn terminal(&self, x: &[f64]) -> f64;
    fn terminal_gradient(&self, x: &[f64]) -> Option<Vec<f64>>;

    fn exact(&self) -> Option<&dyn ExactSolution> {
        None
    }

    /// Exact forward state at time `t` given the Brownian value `W_t`.
    fn exact_forward(&self, _t: f64, _w: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// `a` and `b` do not depend on `(y, z)`.
    fn forward_decoupled(&self) -> bool {
        true
    }

    /// `∂b/∂x` for `d = 1`, used by the Milstein correction.
    fn diffusion_derivative_1d(&self, _t: f64, _x: f64) -> Option<f64> {
        None
    }
}

/// Analytic solution `u(t, x)` and derivatives.
pub trait ExactSolution: Sync + Send {
    fn value(&self, t: f64, x: &[f64]) -> f64;
    fn gradient(&self, t: f64, x: &[f64]) -> Vec<f64>;
    fn time_derivative(&self, _t: f64, _x: &[f64]) -> Option<f64> {
        None
    }
    /// Spatial Hessian, row-major `d × d`.
    fn hessian(&self, _t: f64, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Terminal functional `g`.
#[derive(Clone)]
pub enum TerminalPayoff {
    /// `g(x) = |x|²`.
    SquaredNorm,
    Constant(f64),
    /// `g(x) = c + kᵀx`.
    Affine { c: f64, k: Vec<f64> },
    Custom {
        value: ScalarFn,
        gradient: Option<VectorFn>,
        hessian: Option<VectorFn>,
    },
}

impl fmt::Debug for TerminalPayoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalPayoff::SquaredNorm => write!(f, "SquaredNorm"),
            TerminalPayoff::Constant(c) => write!(f, "Constant({c})"),
            TerminalPayoff::Affine { c, k } => write!(f, "Affine({c}, {k:?})"),
            TerminalPayoff::Custom { gradient, .. } => {
                write!(f, "Custom(gradient: {})", gradient.is_some())
            }
        }
    }
}

impl TerminalPayoff {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            TerminalPayoff::SquaredNorm => x.iter().map(|v| v * v).sum(),
            TerminalPayoff::Constant(c) => *c,
            TerminalPayoff::Affine { c, k } => c + k.iter().zip(x).map(|(a, b)| a * b).sum::<f64>(),
            TerminalPayoff::Custom { value, .. } => value(x),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        match self {
            TerminalPayoff::SquaredNorm => Some(x.iter().map(|v| 2.0 * v).collect()),
            TerminalPayoff::Constant(_) => Some(vec![0.0; x.len()]),
            TerminalPayoff::Affine { k, .. } => Some(k.clone()),
            TerminalPayoff::Custom { gradient, .. } => gradient.as_ref().map(|g| g(x)),
        }
    }

    pub fn hessian(&self, x: &[f64]) -> Option<Vec<f64>> {
        let d = x.len();
        match self {
            TerminalPayoff::SquaredNorm => {
                let mut h = vec![0.0; d * d];
                (0..d).for_each(|i| h[i * d + i] = 2.0);
                Some(h)
            }
            TerminalPayoff::Constant(_) | TerminalPayoff::Affine { .. } => Some(vec![0.0; d * d]),
            TerminalPayoff::Custom { hessian, .. } => hessian.as_ref().map(|h| h(x)),
        }
    }
}

/// Constant-volatility Black-Scholes-Barenblatt problem:
/// `a = 0`, `b = σ diag(x)`, `φ = r(y − Σ z_i/σ)`,
/// `u(t, x) = exp((r + σ²)(T − t)) g(x)`.
#[derive(Debug, Clone)]
pub struct BlackScholesBarenblatt {
    pub dim: usize,
    pub rate: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub payoff: TerminalPayoff,
}

/// BSB problem with `X₀ = 1` in every component.
pub fn bsb_problem(
    dim: usize,
    rate: f64,
    sigma: f64,
    horizon: f64,
    payoff: TerminalPayoff,
) -> Result<BlackScholesBarenblatt> {
    BlackScholesBarenblatt::new(dim, rate, sigma, horizon, vec![1.0; dim], payoff)
}

impl BlackScholesBarenblatt {
    pub fn new(
        dim: usize,
        rate: f64,
        sigma: f64,
        horizon: f64,
        x0: Vec<f64>,
        payoff: TerminalPayoff,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dimension must be positive"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("sigma must be positive, got {sigma}")));
        }
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(invalid(format!("rate must be non-negative, got {rate}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if x0.len() != dim {
            return Err(invalid("initial state has the wrong dimension"));
        }
        if payoff.gradient(&x0).is_none() {
            log::warn!("terminal payoff has no analytic gradient; the terminal-gradient loss term is disabled");
        }
        Ok(BlackScholesBarenblatt {
            dim,
            rate,
            sigma,
            horizon,
            x0,
            payoff,
        })
    }

    /// Default experiment configuration: `d = 1, r = 0.05, σ = 0.4, g = x², X₀ = 1, T = 1`.
    pub fn default_1d() -> Self {
        bsb_problem(1, 0.05, 0.4, 1.0, TerminalPayoff::SquaredNorm).unwrap()
    }

    fn growth(&self, t: f64) -> f64 {
        ((self.rate + self.sigma * self.sigma) * (self.horizon - t)).exp()
    }
}

impl Fbsde for BlackScholesBarenblatt {
    fn dim(&self) -> usize {
        self.dim
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn initial_state(&self) -> Vec<f64> {
        self.x0.clone()
    }

    fn drift<S: Real>(&self, _t: f64, _x: &[f64], y: S, _z: &[S]) -> Vec<S> {
        vec![y.lift(0.0); self.dim]
    }

    fn diffusion<S: Real>(&self, _t: f64, x: &[f64], y: S) -> Vec<S> {
        let d = self.dim;
        let mut b = vec![y.lift(0.0); d * d];
        for i in 0..d {
            b[i * d + i] = y.lift(self.sigma * x[i]);
        }
        b
    }

    fn driver<S: Real>(&self, _t: f64, _x: &[f64], y: S, z: &[S]) -> S {
        let mut zx = y.lift(0.0);
        for &zi in z {
            zx = zx + zi;
        }
        (y - zx / self.sigma) * self.rate
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        self.payoff.value(x)
    }

    fn terminal_gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.payoff.gradient(x)
    }

    fn exact(&self) -> Option<&dyn ExactSolution> {
        Some(self)
    }

    fn exact_forward(&self, t: f64, w: &[f64]) -> Option<Vec<f64>> {
        Some(gbm_exact_state(&self.x0, self.sigma, t, w))
    }

    fn diffusion_derivative_1d(&self, _t: f64, _x: f64) -> Option<f64> {
        (self.dim == 1).then_some(self.sigma)
    }
}

impl ExactSolution for BlackScholesBarenblatt {
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        self.growth(t) * self.payoff.value(x)
    }

    fn gradient(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let e = self.growth(t);
        self.payoff
            .gradient(x)
            .expect("payoff without gradient")
            .into_iter()
            .map(|g| e * g)
            .collect()
    }

    fn time_derivative(&self, t: f64, x: &[f64]) -> Option<f64> {
        Some(-(self.rate + self.sigma * self.sigma) * self.value(t, x))
    }

    fn hessian(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        let e = self.growth(t);
        self.payoff
            .hessian(x)
            .map(|h| h.into_iter().map(|v| e * v).collect())
    }
}

/// Exact driftless geometric Brownian motion `X₀ exp(−½σ²t + σW_t)`.
pub fn gbm_exact_state(x0: &[f64], sigma: f64, t: f64, w: &[f64]) -> Vec<f64> {
    x0.iter()
        .zip(w)
        .map(|(x, wi)| x * (-0.5 * sigma * sigma * t + sigma * wi).exp())
        .collect()
}

/// Problem with a solution affine in `(t, x)`:
/// `u = c₀ + c_t t + kᵀx`, constant drift `a`, diffusion `β I`, and
/// `φ = c_t + a Σ k_i` so that `L u = φ`.
///
/// An identity-activation network represents `u` exactly, which makes the
/// surrogate and exact tracks comparable bit for bit.
#[derive(Debug, Clone)]
pub struct AffineManufactured {
    pub dim: usize,
    pub horizon: f64,
    pub drift: f64,
    pub beta: f64,
    pub c0: f64,
    pub ct: f64,
    pub k: Vec<f64>,
    pub x0: Vec<f64>,
}

impl AffineManufactured {
    /// Identity-activation network equal to `u` (inputs unscaled).
    pub fn exact_network(&self) -> Mlp {
        let mut w = ndarray::Array2::zeros((1, self.dim + 1));
        w[[0, 0]] = self.ct;
        for i in 0..self.dim {
            w[[0, i + 1]] = self.k[i];
        }
        Mlp::from_parts(
            crate::surrogate::Activation::Identity,
            vec![w],
            vec![ndarray::arr1(&[self.c0])],
            crate::surrogate::InputScaling::identity(self.dim + 1),
        )
        .expect("consistent shapes")
    }
}

impl Fbsde for AffineManufactured {
    fn dim(&self) -> usize {
        self.dim
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn initial_state(&self) -> Vec<f64> {
        self.x0.clone()
    }

    fn drift<S: Real>(&self, _t: f64, _x: &[f64], y: S, _z: &[S]) -> Vec<S> {
        vec![y.lift(self.drift); self.dim]
    }

    fn diffusion<S: Real>(&self, _t: f64, _x: &[f64], y: S) -> Vec<S> {
        let d = self.dim;
        let mut b = vec![y.lift(0.0); d * d];
        for i in 0..d {
            b[i * d + i] = y.lift(self.beta);
        }
        b
    }

    fn driver<S: Real>(&self, _t: f64, _x: &[f64], y: S, _z: &[S]) -> S {
        y.lift(self.ct + self.drift * self.k.iter().sum::<f64>())
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        self.value(self.horizon, x)
    }

    fn terminal_gradient(&self, _x: &[f64]) -> Option<Vec<f64>> {
        Some(self.k.clone())
    }

    fn exact(&self) -> Option<&dyn ExactSolution> {
        Some(self)
    }

    fn exact_forward(&self, t: f64, w: &[f64]) -> Option<Vec<f64>> {
        Some(
            self.x0
                .iter()
                .zip(w)
                .map(|(x, wi)| x + self.drift * t + self.beta * wi)
                .collect(),
        )
    }

    fn diffusion_derivative_1d(&self, _t: f64, _x: f64) -> Option<f64> {
        (self.dim == 1).then_some(0.0)
    }
}

impl ExactSolution for AffineManufactured {
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        self.c0 + self.ct * t + self.k.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    fn gradient(&self, _t: f64, _x: &[f64]) -> Vec<f64> {
        self.k.clone()
    }

    fn time_derivative(&self, _t: f64, _x: &[f64]) -> Option<f64> {
        Some(self.ct)
    }

    fn hessian(&self, _t: f64, _x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![0.0; self.dim * self.dim])
    }
}

/// Shape probes plus terminal consistency `u(T, x) = g(x)` at 100 random
/// points around `X₀`.
pub fn validate_problem<P: Fbsde>(problem: &P) -> Result<()> {
    let d = problem.dim();
    let x0 = problem.initial_state();
    if d == 0 || x0.len() != d {
        return Err(invalid("initial state does not match the dimension"));
    }
    if !(problem.horizon() > 0.0 && problem.horizon().is_finite()) {
        return Err(invalid("horizon must be positive"));
    }
    let z = vec![0.0; d];
    if problem.drift(0.0, &x0, 0.0, &z).len() != d {
        return Err(Error::Shape("drift must return d components".into()));
    }
    if problem.diffusion(0.0, &x0, 0.0).len() != d * d {
        return Err(Error::Shape("diffusion must return d×d components".into()));
    }
    if !problem.driver(0.0, &x0, 1.0, &z).is_finite() {
        return Err(invalid("driver is not finite at the initial state"));
    }
    if let Some(g) = problem.terminal_gradient(&x0) {
        if g.len() != d {
            return Err(Error::Shape("terminal gradient must have d components".into()));
        }
    }
    if let Some(u) = problem.exact() {
        let mut rng = CounterNormal::new(0x7e57, 0);
        let t = problem.horizon();
        for _ in 0..100 {
            let x: Vec<f64> = x0.iter().map(|v| v + 0.5 * rng.normal()).collect();
            let (a, b) = (u.value(t, &x), problem.terminal(&x));
            if (a - b).abs() > 1e-10 * b.abs().max(1.0) {
                return Err(invalid(format!(
                    "exact solution violates the terminal condition at {x:?}: {a} vs {b}"
                )));
            }
        }
    }
    Ok(())
}

/// `Z = bᵀ∇u`.
pub fn hidden_from_gradient(b: &[f64], grad: &[f64]) -> Vec<f64> {
    let d = grad.len();
    (0..d)
        .map(|j| (0..d).map(|i| b[i * d + j] * grad[i]).sum())
        .collect()
}

/// `L u − φ(t, x, u, bᵀ∇u)` with `L = ∂t + a·∇ + ½ tr(bbᵀ∇²)`.
pub fn pde_residual<P: Fbsde>(problem: &P, u: &dyn ExactSolution, t: f64, x: &[f64]) -> Result<f64> {
    let d = problem.dim();
    let missing = || Error::InvalidArgument("solution lacks time derivative or Hessian".into());
    let ut = u.time_derivative(t, x).ok_or_else(missing)?;
    let h = u.hessian(t, x).ok_or_else(missing)?;
    let v = u.value(t, x);
    let g = u.gradient(t, x);
    let b = problem.diffusion(t, x, v);
    let z = hidden_from_gradient(&b, &g);
    let a = problem.drift(t, x, v, &z);
    let mut lu = ut + a.iter().zip(&g).map(|(ai, gi)| ai * gi).sum::<f64>();
    for i in 0..d {
        for j in 0..d {
            let bbt: f64 = (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum();
            lu += 0.5 * bbt * h[i * d + j];
        }
    }
    Ok(lu - problem.driver(t, x, v, &z))
}

/// `(L₀u, L₁u)` with `L₀ = ∂t + a∂x + ½b²∂xx`, `L₁ = b∂x`, for `d = 1`.
pub fn l0_l1_apply<P: Fbsde>(problem: &P, u: &dyn ExactSolution, t: f64, x: f64) -> Result<(f64, f64)> {
    if problem.dim() != 1 {
        return Err(Error::Unsupported("L0/L1 operators are defined for d = 1".into()));
    }
    let xs = [x];
    let missing = || Error::InvalidArgument("solution lacks time derivative or Hessian".into());
    let ut = u.time_derivative(t, &xs).ok_or_else(missing)?;
    let uxx = u.hessian(t, &xs).ok_or_else(missing)?[0];
    let v = u.value(t, &xs);
    let ux = u.gradient(t, &xs)[0];
    let b = problem.diffusion(t, &xs, v)[0];
    let a = problem.drift(t, &xs, v, &[b * ux])[0];
    Ok((ut + a * ux + 0.5 * b * b * uxx, b * ux))
}

/// `|u(t, x) − û(t, x; θ)|`.
pub fn surrogate_residual(u: &dyn ExactSolution, net: &Mlp, t: f64, x: &[f64]) -> Result<f64> {
    Ok((u.value(t, x) - net.forward(t, x)?).abs())
}

/// Quasi-uniform `(t, x)` cloud: `t ∈ [0, T]`, each `x_i ∈ [lo, hi]`.
/// Returns `(times, states)` with states `[point][component]`.
pub fn epsilon_cloud(n: usize, dim: usize, horizon: f64, lo: f64, hi: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(hi > lo) {
        return Err(invalid("empty sampling box"));
    }
    let pts = halton(n, dim + 1)?;
    let times = pts.iter().map(|p| p[0] * horizon).collect();
    let states = pts
        .iter()
        .flat_map(|p| p[1..].iter().map(|v| lo + (hi - lo) * v).collect::<Vec<_>>())
        .collect();
    Ok((times, states))
}

/// Operational `ε̂_θ = max |u − û|` over a point cloud.
pub fn epsilon_estimate(u: &dyn ExactSolution, net: &Mlp, times: &[f64], states: &[f64]) -> Result<f64> {
    let d = net.state_dim();
    let out = net.evaluate_batch(times, states, Order::Value)?;
    Ok((0..times.len())
        .map(|p| (u.value(times[p], &states[p * d..(p + 1) * d]) - out.value[p]).abs())
        .fold(0.0, f64::max))
}

/// Batched access to `u` and its spatial derivatives, from either an exact
/// solution or a network.
pub trait SolutionSource: Sync {
    fn evaluate(&self, times: &[f64], states: &[f64], order: Order) -> Result<BatchOutput>;
}

impl SolutionSource for Mlp {
    fn evaluate(&self, times: &[f64], states: &[f64], order: Order) -> Result<BatchOutput> {
        self.evaluate_batch(times, states, order)
    }
}

/// Adapter evaluating an [`ExactSolution`] pointwise.
pub struct ExactSource<'a> {
    pub solution: &'a dyn ExactSolution,
    pub dim: usize,
}

impl SolutionSource for ExactSource<'_> {
    fn evaluate(&self, times: &[f64], states: &[f64], order: Order) -> Result<BatchOutput> {
        let d = self.dim;
        if states.len() != times.len() * d {
            return Err(Error::Shape("state layout does not match the dimension".into()));
        }
        let mut out = BatchOutput {
            order,
            dim: d,
            value: Vec::with_capacity(times.len()),
            grad: Vec::new(),
            hess: Vec::new(),
        };
        for (p, &t) in times.iter().enumerate() {
            let x = &states[p * d..(p + 1) * d];
            out.value.push(self.solution.value(t, x));
            if order >= Order::Gradient {
                out.grad.extend(self.solution.gradient(t, x));
            }
            if order == Order::Hessian {
                let h = self
                    .solution
                    .hessian(t, x)
                    .ok_or_else(|| Error::Unsupported("exact solution has no Hessian".into()))?;
                for i in 0..d {
                    for j in i..d {
                        out.hess.push(h[i * d + j]);
                    }
                }
            }
        }
        Ok(out)
    }
}
