//! Closed set of problems the driver can run.

use fbsde_core::problems::{AffineManufactured, BlackScholesBarenblatt, ExactSolution, Fbsde};
use fbsde_core::Real;

#[derive(Debug, Clone)]
pub enum AnyProblem {
    Bsb(BlackScholesBarenblatt),
    Affine(AffineManufactured),
}

macro_rules! delegate {
    ($self:ident, $p:ident => $e:expr) => {
        match $self {
            AnyProblem::Bsb($p) => $e,
            AnyProblem::Affine($p) => $e,
        }
    };
}

impl Fbsde for AnyProblem {
    fn dim(&self) -> usize {
        delegate!(self, p => p.dim())
    }
    fn horizon(&self) -> f64 {
        delegate!(self, p => p.horizon())
    }
    fn initial_state(&self) -> Vec<f64> {
        delegate!(self, p => p.initial_state())
    }
    fn drift<S: Real>(&self, t: f64, x: &[f64], y: S, z: &[S]) -> Vec<S> {
        delegate!(self, p => p.drift(t, x, y, z))
    }
    fn diffusion<S: Real>(&self, t: f64, x: &[f64], y: S) -> Vec<S> {
        delegate!(self, p => p.diffusion(t, x, y))
    }
    fn driver<S: Real>(&self, t: f64, x: &[f64], y: S, z: &[S]) -> S {
        delegate!(self, p => p.driver(t, x, y, z))
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        delegate!(self, p => p.terminal(x))
    }
    fn terminal_gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        delegate!(self, p => p.terminal_gradient(x))
    }
    fn exact(&self) -> Option<&dyn ExactSolution> {
        delegate!(self, p => p.exact())
    }
    fn exact_forward(&self, t: f64, w: &[f64]) -> Option<Vec<f64>> {
        delegate!(self, p => p.exact_forward(t, w))
    }
    fn forward_decoupled(&self) -> bool {
        delegate!(self, p => p.forward_decoupled())
    }
    fn diffusion_derivative_1d(&self, t: f64, x: f64) -> Option<f64> {
        delegate!(self, p => p.diffusion_derivative_1d(t, x))
    }
}
