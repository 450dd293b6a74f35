//! Simulation and training toolkit for forward-backward SDEs whose backward
//! process is generated from a (learned) PDE solution.
//!
//! The crate is organised bottom-up:
//!
//! * [`timegrid`] discretises `[0, T]` and interpolates discrete paths.
//! * [`brownian`] samples a counter-addressable Gaussian lattice and derives
//!   level-coupled Brownian increments from it.
//! * [`surrogate`] holds the MLP approximation `û(t, x; θ)` with exact input
//!   derivatives, parameter gradients, Adam, and checkpoints.
//! * [`problems`] defines FBSDE data, the Black-Scholes-Barenblatt instance,
//!   and PDE residual diagnostics.
//! * [`simulate`] runs Euler-Maruyama / Milstein steps and the dual-track
//!   path generator.
//! * [`loss`] evaluates the path-wise losses, remainder decompositions and
//!   the loss scaling scan.
//! * [`train`] drives single-level, multilevel-inspired and two-level
//!   telescoping training.
//! * [`mlmc`] builds coupled differences, multilevel estimates, strong
//!   errors and the variance-structure scan.

pub mod autodiff;
pub mod brownian;
pub mod csv;
pub mod loss;
pub mod mlmc;
pub mod problems;
pub mod rng;
pub mod simulate;
pub mod stats;
pub mod surrogate;
pub mod timegrid;
pub mod train;

pub mod error;

pub use autodiff::{Real, Tape, Var};
pub use brownian::{BrownianLattice, IncrementSet};
pub use error::{Error, Result};
pub use loss::{LossBreakdown, LossOptions, LossVariant, RemainderReport};
pub use mlmc::{DifferenceKind, DifferenceSample, LevelEstimate, StrongError};
pub use problems::{
    bsb_problem, AffineManufactured, BlackScholesBarenblatt, ExactSolution, Fbsde, SolutionSource,
    TerminalPayoff,
};
pub use simulate::{GenerateOptions, PathBundle, Track};
pub use surrogate::{Activation, AdamConfig, AdamState, BatchOutput, InputScaling, Mlp, Order, ParamTape};
pub use timegrid::{GridKind, TimeGrid};
pub use train::{TrainConfig, TrainReport};
