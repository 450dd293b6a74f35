//! Shared fixtures for the benchmarks.

use fbsde_core::surrogate::InputScaling;
use fbsde_core::{Activation, BlackScholesBarenblatt, Mlp};

pub fn bsb() -> BlackScholesBarenblatt {
    BlackScholesBarenblatt::default_1d()
}

/// The default 4×32 tanh network with inputs centred on `X₀ = 1`.
pub fn default_net(seed: u64) -> Mlp {
    Mlp::with_hidden(1, &[32; 4], Activation::Tanh, seed)
        .and_then(|n| n.with_scaling(InputScaling::for_problem(1, 1.0, 1.0, 1.0)))
        .expect("valid architecture")
}
