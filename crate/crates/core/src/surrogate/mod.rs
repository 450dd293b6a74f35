//! Multilayer-perceptron approximation `û(t, x; θ)` of the PDE solution.
//!
//! Inputs are the concatenation `(t, x)` passed through a per-input affine
//! normalisation; hidden layers use a configurable activation and the output
//! layer is linear with a single unit.
//!
//! Three evaluation routes exist:
//!
//! * single-point [`Mlp::forward`], [`Mlp::input_gradient`] (reverse sweep)
//!   and [`Mlp::input_hessian`] (forward-over-reverse);
//! * batched evaluation ([`Mlp::evaluate_batch`]) propagating spatial
//!   tangents and second-order tangents forward through the layers;
//! * [`ParamTape`], which records batched outputs as tape leaves and
//!   back-propagates loss adjoints through value, gradient and Hessian
//!   outputs to the parameters.

mod adam;
mod batch;
mod checkpoint;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use batch::{BatchOutput, Order};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use tape::{BatchVars, ParamTape};

use ndarray::{Array1, Array2};

use crate::error::{invalid, shape, Error, Result};
use crate::rng::CounterNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sine,
    /// Forward and gradient only; the right derivative is used at 0.
    ReLU,
    /// Linear layers throughout; mainly for tests.
    Identity,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Sine => 1,
            Activation::ReLU => 2,
            Activation::Identity => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::Tanh,
            1 => Activation::Sine,
            2 => Activation::ReLU,
            3 => Activation::Identity,
            _ => return None,
        })
    }

    /// Whether second derivatives exist everywhere.
    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::ReLU)
    }

    #[inline]
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sine => z.sin(),
            Activation::ReLU => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// `(σ, σ', σ'', σ''')` at `z`.
    #[inline]
    pub fn derivatives(self, z: f64) -> [f64; 4] {
        match self {
            Activation::Tanh => {
                let s = z.tanh();
                let s1 = 1.0 - s * s;
                [s, s1, -2.0 * s * s1, -2.0 * s1 * (1.0 - 3.0 * s * s)]
            }
            Activation::Sine => {
                let (s, c) = z.sin_cos();
                [s, c, -s, -c]
            }
            Activation::ReLU => {
                if z >= 0.0 {
                    [z, 1.0, 0.0, 0.0]
                } else {
                    [0.0, 0.0, 0.0, 0.0]
                }
            }
            Activation::Identity => [z, 1.0, 0.0, 0.0],
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "sine" | "sin" => Ok(Activation::Sine),
            "relu" => Ok(Activation::ReLU),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(invalid(format!("unknown activation '{other}'"))),
        }
    }
}

/// Affine normalisation `ξ_i = (input_i - offset_i) · scale_i` of `(t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputScaling {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    pub fn identity(inputs: usize) -> Self {
        InputScaling {
            offset: vec![0.0; inputs],
            scale: vec![1.0; inputs],
        }
    }

    /// `t ↦ t/T`, `x ↦ (x - x_offset)·x_scale`.
    pub fn for_problem(dim: usize, horizon: f64, x_offset: f64, x_scale: f64) -> Self {
        let mut offset = vec![x_offset; dim + 1];
        let mut scale = vec![x_scale; dim + 1];
        offset[0] = 0.0;
        scale[0] = 1.0 / horizon;
        InputScaling { offset, scale }
    }
}

/// The network `û(t, x; θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    scaling: InputScaling,
}

impl Mlp {
    /// Fan-in scaled uniform weights `U(±√(3/fan_in))`, zero biases.
    pub fn new(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dims, activation)?;
        for (k, w) in net.weights.iter_mut().enumerate() {
            let bound = (3.0 / w.ncols() as f64).sqrt();
            let mut g = CounterNormal::new(seed, k as u64);
            w.iter_mut().for_each(|v| *v = bound * (2.0 * g.uniform() - 1.0));
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        validate_dims(dims)?;
        let weights = dims.windows(2).map(|w| Array2::zeros((w[1], w[0]))).collect();
        let biases = dims[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Mlp {
            dims: dims.to_vec(),
            activation,
            weights,
            biases,
            scaling: InputScaling::identity(dims[0]),
        })
    }

    /// Hidden layers of equal width for a `d`-dimensional state.
    pub fn with_hidden(dim: usize, hidden: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut dims = vec![dim + 1];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Self::new(&dims, activation, seed)
    }

    pub fn from_parts(
        activation: Activation,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        scaling: InputScaling,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(shape("need one bias per weight matrix"));
        }
        let mut dims = vec![weights[0].ncols()];
        for (k, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != dims[k] || b.len() != w.nrows() {
                return Err(shape(format!("layer {k} shapes do not chain")));
            }
            dims.push(w.nrows());
        }
        validate_dims(&dims)?;
        let net = Mlp {
            dims,
            activation,
            weights,
            biases,
            scaling: InputScaling::identity(0),
        };
        net.with_scaling(scaling)
    }

    pub fn with_scaling(mut self, scaling: InputScaling) -> Result<Self> {
        if scaling.offset.len() != self.dims[0] || scaling.scale.len() != self.dims[0] {
            return Err(shape("scaling length must equal the input dimension"));
        }
        if scaling.offset.iter().chain(&scaling.scale).any(|v| !v.is_finite()) {
            return Err(invalid("scaling must be finite"));
        }
        self.scaling = scaling;
        Ok(self)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn scaling(&self) -> &InputScaling {
        &self.scaling
    }

    /// State dimension `d` (inputs are `(t, x)`).
    pub fn state_dim(&self) -> usize {
        self.dims[0] - 1
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn num_params(&self) -> usize {
        self.dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    /// Parameters in layer order, each layer `W` row-major then `b`.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(shape(format!(
                "{} parameters given, network has {}",
                params.len(),
                self.num_params()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite parameter"));
        }
        let mut it = params.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|v| *v = it.next().unwrap());
            b.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }

    fn scaled_input(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.state_dim() {
            return Err(shape(format!(
                "state of dimension {} for a network expecting {}",
                x.len(),
                self.state_dim()
            )));
        }
        let s = &self.scaling;
        Ok(std::iter::once(t)
            .chain(x.iter().copied())
            .enumerate()
            .map(|(i, v)| (v - s.offset[i]) * s.scale[i])
            .collect())
    }

    /// `û(t, x)`.
    pub fn forward(&self, t: f64, x: &[f64]) -> Result<f64> {
        let xi = self.scaled_input(t, x)?;
        Ok(self.sweep::<f64>(&xi).0)
    }

    /// `(∂û/∂t, ∇ₓû)` by one reverse sweep.
    pub fn input_gradient(&self, t: f64, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let xi = self.scaled_input(t, x)?;
        let (_, g) = self.sweep::<f64>(&xi);
        let s = &self.scaling.scale;
        Ok((g[0] * s[0], (1..g.len()).map(|i| g[i] * s[i]).collect()))
    }

    /// Spatial Hessian `∇ₓ²û`, row-major `d × d`, by differentiating the
    /// reverse sweep along each coordinate direction.
    pub fn input_hessian(&self, t: f64, x: &[f64]) -> Result<Array2<f64>> {
        if !self.activation.is_smooth() {
            return Err(Error::Unsupported(format!(
                "Hessian requires a smooth activation, got {:?}",
                self.activation
            )));
        }
        let xi = self.scaled_input(t, x)?;
        let d = self.state_dim();
        let s = &self.scaling.scale;
        let mut h = Array2::zeros((d, d));
        for j in 0..d {
            let seed: Vec<Dual> = xi
                .iter()
                .enumerate()
                .map(|(i, &v)| Dual {
                    v,
                    d: if i == j + 1 { s[i] } else { 0.0 },
                })
                .collect();
            let (_, g) = self.sweep::<Dual>(&seed);
            for i in 0..d {
                h[[i, j]] = g[i + 1].d * s[i + 1];
            }
        }
        // average the two (equal up to rounding) mixed partials
        for i in 0..d {
            for j in 0..i {
                let m = 0.5 * (h[[i, j]] + h[[j, i]]);
                h[[i, j]] = m;
                h[[j, i]] = m;
            }
        }
        Ok(h)
    }

    /// Forward pass and reverse sweep on normalised inputs, returning the
    /// output and `∂û/∂ξ`.
    fn sweep<S: Lane>(&self, xi: &[S]) -> (S, Vec<S>) {
        let n_layers = self.weights.len();
        let mut acts: Vec<Vec<S>> = Vec::with_capacity(n_layers);
        let mut slopes: Vec<Vec<S>> = Vec::with_capacity(n_layers);
        let mut a: Vec<S> = xi.to_vec();
        for k in 0..n_layers {
            let w = &self.weights[k];
            let b = &self.biases[k];
            let z: Vec<S> = (0..w.nrows())
                .map(|r| {
                    let mut acc = S::from_f64(b[r]);
                    for (c, &ac) in a.iter().enumerate() {
                        acc = acc + ac.scale(w[[r, c]]);
                    }
                    acc
                })
                .collect();
            acts.push(a);
            if k + 1 < n_layers {
                let (next, slope): (Vec<S>, Vec<S>) =
                    z.iter().map(|&zz| zz.activate(self.activation)).unzip();
                slopes.push(slope);
                a = next;
            } else {
                a = z;
            }
        }
        let out = a[0];
        let mut zbar = vec![S::from_f64(1.0)];
        for k in (0..n_layers).rev() {
            let w = &self.weights[k];
            let mut abar = vec![S::from_f64(0.0); w.ncols()];
            for (r, &zb) in zbar.iter().enumerate() {
                for (c, ab) in abar.iter_mut().enumerate() {
                    *ab = *ab + zb.scale(w[[r, c]]);
                }
            }
            if k == 0 {
                return (out, abar);
            }
            zbar = abar
                .iter()
                .zip(&slopes[k - 1])
                .map(|(&ab, &sl)| ab * sl)
                .collect();
        }
        unreachable!()
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(invalid("network needs at least an input and an output layer"));
    }
    if dims.contains(&0) {
        return Err(invalid("layer widths must be positive"));
    }
    if dims[0] < 2 {
        return Err(invalid("input dimension must be d + 1 ≥ 2"));
    }
    if *dims.last().unwrap() != 1 {
        return Err(invalid("output dimension must be 1"));
    }
    Ok(())
}

/// Scalar lane used by the single-point sweeps: plain `f64` for gradients,
/// [`Dual`] for a directional derivative of the gradient.
trait Lane: Copy + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self> {
    fn from_f64(v: f64) -> Self;
    fn scale(self, c: f64) -> Self;
    /// `(σ(z), σ'(z))`.
    fn activate(self, act: Activation) -> (Self, Self);
}

impl Lane for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn scale(self, c: f64) -> Self {
        self * c
    }
    fn activate(self, act: Activation) -> (Self, Self) {
        let d = act.derivatives(self);
        (d[0], d[1])
    }
}

#[derive(Debug, Clone, Copy)]
struct Dual {
    v: f64,
    d: f64,
}

impl std::ops::Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual {
            v: self.v + o.v,
            d: self.d + o.d,
        }
    }
}

impl std::ops::Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Dual {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}

impl Lane for Dual {
    fn from_f64(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
    fn scale(self, c: f64) -> Self {
        Dual {
            v: self.v * c,
            d: self.d * c,
        }
    }
    fn activate(self, act: Activation) -> (Self, Self) {
        let s = act.derivatives(self.v);
        (
            Dual {
                v: s[0],
                d: s[1] * self.d,
            },
            Dual {
                v: s[1],
                d: s[2] * self.d,
            },
        )
    }
}

#[cfg(test)]
mod tests;
