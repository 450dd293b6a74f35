//! Recording network outputs on a scalar tape and pulling loss adjoints back
//! to the parameters.

use std::cell::RefCell;

use ndarray::Array2;
use rayon::prelude::*;

use super::batch::{
    backward_chunk, check_inputs, chunk_bounds, forward_chunk, pair_index, reduce, ChunkCache,
    ChunkOut, Order,
};
use super::Mlp;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

struct Record {
    order: Order,
    caches: Vec<ChunkCache>,
    value_idx: Vec<usize>,
    grad_idx: Vec<usize>,
    hess_idx: Vec<usize>,
}

/// Scalar tape whose leaves are network outputs.
///
/// Every call to [`ParamTape::evaluate`] runs a batched forward pass, keeps
/// its intermediates, and returns the outputs as tape variables. A loss built
/// from them can then be differentiated with respect to all network
/// parameters by [`ParamTape::parameter_gradient`].
pub struct ParamTape<'n> {
    net: &'n Mlp,
    tape: Tape,
    records: RefCell<Vec<Record>>,
}

/// Network outputs at a batch of points, as tape variables.
pub struct BatchVars<'t> {
    dim: usize,
    pub value: Vec<Var<'t>>,
    grad: Vec<Var<'t>>,
    /// Full `d × d` Hessians per point; symmetric entries share one variable.
    hess: Vec<Var<'t>>,
}

impl<'t> BatchVars<'t> {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn gradient(&self, p: usize) -> &[Var<'t>] {
        &self.grad[p * self.dim..(p + 1) * self.dim]
    }

    pub fn hessian(&self, p: usize) -> &[Var<'t>] {
        let dd = self.dim * self.dim;
        &self.hess[p * dd..(p + 1) * dd]
    }
}

impl<'n> ParamTape<'n> {
    pub fn new(net: &'n Mlp) -> Self {
        ParamTape {
            net,
            tape: Tape::new(),
            records: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn net(&self) -> &Mlp {
        self.net
    }

    /// Evaluate the network at `times.len()` points and record the outputs.
    pub fn evaluate(&self, times: &[f64], states: &[f64], order: Order) -> Result<BatchVars<'_>> {
        let net = self.net;
        check_inputs(net, times, states, order)?;
        let d = net.state_dim();
        let np = order.pair_count(d);
        let results: Vec<(ChunkOut, Option<ChunkCache>)> = chunk_bounds(times.len())
            .into_par_iter()
            .map(|(s, c)| forward_chunk(net, times, states, s, c, order, true))
            .collect();
        let (outs, caches): (Vec<ChunkOut>, Vec<Option<ChunkCache>>) = results.into_iter().unzip();
        let out = super::batch::assemble(outs, d, order, times.len());

        let value: Vec<Var<'_>> = out.value.iter().map(|&v| self.tape.var(v)).collect();
        let grad: Vec<Var<'_>> = out.grad.iter().map(|&v| self.tape.var(v)).collect();
        let upper: Vec<Var<'_>> = out.hess.iter().map(|&v| self.tape.var(v)).collect();
        let mut hess = Vec::with_capacity(if np > 0 { times.len() * d * d } else { 0 });
        if np > 0 {
            for p in 0..times.len() {
                for i in 0..d {
                    for j in 0..d {
                        hess.push(upper[p * np + pair_index(d, i, j)]);
                    }
                }
            }
        }
        self.records.borrow_mut().push(Record {
            order,
            caches: caches.into_iter().map(Option::unwrap).collect(),
            value_idx: value.iter().map(|v| v.index()).collect(),
            grad_idx: grad.iter().map(|v| v.index()).collect(),
            hess_idx: upper.iter().map(|v| v.index()).collect(),
        });
        Ok(BatchVars {
            dim: d,
            value,
            grad,
            hess,
        })
    }

    /// Gradient of the recorded scalar `loss` with respect to the parameters,
    /// in [`Mlp::params_flat`] layout.
    pub fn parameter_gradient(&self, loss: Var<'_>) -> Result<Vec<f64>> {
        let records = self.records.borrow();
        if records.is_empty() {
            return Err(Error::InvalidArgument(
                "no network evaluations recorded on the tape".into(),
            ));
        }
        let adj = self.tape.gradient(loss);
        let net = self.net;
        let d = net.state_dim();
        let mut parts = Vec::new();
        for rec in records.iter() {
            let nt = rec.order.tangents(d);
            let np = rec.order.pair_count(d);
            let chunk_parts: Vec<Vec<f64>> = rec
                .caches
                .par_iter()
                .map(|cache| {
                    let (s, c) = (cache.start, cache.cols);
                    let ubar = Array2::from_shape_fn((1, c), |(_, k)| adj[rec.value_idx[s + k]]);
                    let udbar = (0..nt)
                        .map(|i| Array2::from_shape_fn((1, c), |(_, k)| adj[rec.grad_idx[(s + k) * nt + i]]))
                        .collect();
                    let uddbar = (0..np)
                        .map(|q| Array2::from_shape_fn((1, c), |(_, k)| adj[rec.hess_idx[(s + k) * np + q]]))
                        .collect();
                    backward_chunk(net, cache, ubar, udbar, uddbar)
                })
                .collect();
            parts.extend(chunk_parts);
        }
        Ok(reduce(parts, net.num_params()))
    }
}
