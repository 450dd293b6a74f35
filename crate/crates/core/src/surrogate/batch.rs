//! Batched evaluation with forward tangent propagation and its adjoint.
//!
//! Points are processed in fixed chunks of [`CHUNK`] columns. Chunks may run
//! on any thread, but their boundaries and the order in which chunk
//! gradients are summed never change, so results are independent of the
//! worker count.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Axis, Zip};
use rayon::prelude::*;

use super::Mlp;
use crate::error::{invalid, shape, Error, Result};

pub(crate) const CHUNK: usize = 256;

/// Which derivatives a batched evaluation produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    Value,
    Gradient,
    Hessian,
}

impl Order {
    pub(crate) fn tangents(self, d: usize) -> usize {
        if self >= Order::Gradient {
            d
        } else {
            0
        }
    }

    pub(crate) fn pair_count(self, d: usize) -> usize {
        if self == Order::Hessian {
            d * (d + 1) / 2
        } else {
            0
        }
    }
}

/// Upper-triangular index pairs `(i, j)`, `i ≤ j`.
pub(crate) fn pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect()
}

pub(crate) fn pair_index(d: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * d - i * (i + 1) / 2 + j
}

/// Values and spatial derivatives at a batch of points.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub order: Order,
    pub dim: usize,
    /// `û` per point.
    pub value: Vec<f64>,
    /// `∇ₓû`, `[point][component]` (empty for [`Order::Value`]).
    pub grad: Vec<f64>,
    /// Upper triangle of `∇ₓ²û`, `[point][pair]` (empty unless [`Order::Hessian`]).
    pub hess: Vec<f64>,
}

impl BatchOutput {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn gradient(&self, p: usize) -> &[f64] {
        &self.grad[p * self.dim..(p + 1) * self.dim]
    }

    pub fn hessian_entry(&self, p: usize, i: usize, j: usize) -> f64 {
        let np = self.dim * (self.dim + 1) / 2;
        self.hess[p * np + pair_index(self.dim, i, j)]
    }
}

/// Forward intermediates of one chunk, kept for the backward pass.
pub(crate) struct ChunkCache {
    pub start: usize,
    pub cols: usize,
    /// Layer inputs and their first/second-order tangents.
    a: Vec<Array2<f64>>,
    ad: Vec<Vec<Array2<f64>>>,
    add: Vec<Vec<Array2<f64>>>,
    /// Hidden-layer pre-activation tangents and activation derivatives.
    zd: Vec<Vec<Array2<f64>>>,
    zdd: Vec<Vec<Array2<f64>>>,
    s1: Vec<Array2<f64>>,
    s2: Vec<Array2<f64>>,
    s3: Vec<Array2<f64>>,
}

pub(crate) struct ChunkOut {
    value: Array2<f64>,
    grad: Vec<Array2<f64>>,
    hess: Vec<Array2<f64>>,
}

pub(crate) fn check_inputs(net: &Mlp, times: &[f64], states: &[f64], order: Order) -> Result<()> {
    let d = net.state_dim();
    if states.len() != times.len() * d {
        return Err(shape(format!(
            "{} state components for {} points of dimension {d}",
            states.len(),
            times.len()
        )));
    }
    if order == Order::Hessian && !net.activation().is_smooth() {
        return Err(Error::Unsupported(format!(
            "Hessian requires a smooth activation, got {:?}",
            net.activation()
        )));
    }
    if times.iter().chain(states).any(|v| !v.is_finite()) {
        return Err(invalid("non-finite network input"));
    }
    Ok(())
}

pub(crate) fn forward_chunk(
    net: &Mlp,
    times: &[f64],
    states: &[f64],
    start: usize,
    cols: usize,
    order: Order,
    keep: bool,
) -> (ChunkOut, Option<ChunkCache>) {
    let d = net.state_dim();
    let n_in = d + 1;
    let nt = order.tangents(d);
    let pr = pairs(d);
    let np = order.pair_count(d);
    let sc = net.scaling();

    let mut a = Array2::zeros((n_in, cols));
    for c in 0..cols {
        let p = start + c;
        a[[0, c]] = (times[p] - sc.offset[0]) * sc.scale[0];
        for i in 0..d {
            a[[i + 1, c]] = (states[p * d + i] - sc.offset[i + 1]) * sc.scale[i + 1];
        }
    }
    let mut ad: Vec<Array2<f64>> = (0..nt)
        .map(|i| {
            let mut m = Array2::zeros((n_in, cols));
            m.row_mut(i + 1).fill(sc.scale[i + 1]);
            m
        })
        .collect();
    let mut add: Vec<Array2<f64>> = (0..np).map(|_| Array2::zeros((n_in, cols))).collect();

    let mut cache = keep.then(|| ChunkCache {
        start,
        cols,
        a: Vec::new(),
        ad: Vec::new(),
        add: Vec::new(),
        zd: Vec::new(),
        zdd: Vec::new(),
        s1: Vec::new(),
        s2: Vec::new(),
        s3: Vec::new(),
    });

    let n_layers = net.layers();
    let act = net.activation();
    for k in 0..n_layers {
        let w = &net.weights()[k];
        let b = &net.biases()[k];
        let mut z = w.dot(&a);
        z += &b.view().insert_axis(Axis(1));
        let zd: Vec<Array2<f64>> = ad.iter().map(|m| w.dot(m)).collect();
        let zdd: Vec<Array2<f64>> = add.iter().map(|m| w.dot(m)).collect();
        if let Some(c) = cache.as_mut() {
            c.a.push(std::mem::take(&mut a));
            c.ad.push(std::mem::take(&mut ad));
            c.add.push(std::mem::take(&mut add));
        }
        if k + 1 == n_layers {
            return (
                ChunkOut {
                    value: z,
                    grad: zd,
                    hess: zdd,
                },
                cache,
            );
        }
        let shape = z.raw_dim();
        let mut s0 = Array2::zeros(shape);
        let mut s1 = Array2::zeros(shape);
        let mut s2 = Array2::zeros(shape);
        let mut s3 = Array2::zeros(shape);
        Zip::from(&z)
            .and(&mut s0)
            .and(&mut s1)
            .and(&mut s2)
            .and(&mut s3)
            .for_each(|&zz, o0, o1, o2, o3| {
                let s = act.derivatives(zz);
                *o0 = s[0];
                *o1 = s[1];
                *o2 = s[2];
                *o3 = s[3];
            });
        a = s0;
        ad = zd.iter().map(|m| m * &s1).collect();
        add = pr[..np]
            .iter()
            .zip(&zdd)
            .map(|(&(i, j), m)| &s2 * &zd[i] * &zd[j] + &s1 * m)
            .collect();
        if let Some(c) = cache.as_mut() {
            c.zd.push(zd);
            c.zdd.push(zdd);
            c.s1.push(s1);
            c.s2.push(s2);
            c.s3.push(s3);
        }
    }
    unreachable!("network has at least one layer")
}

/// Parameter gradient of one chunk given output adjoints (row vectors of
/// length `cols`). Returned in [`Mlp::params_flat`] layout.
pub(crate) fn backward_chunk(
    net: &Mlp,
    cache: &ChunkCache,
    ubar: Array2<f64>,
    udbar: Vec<Array2<f64>>,
    uddbar: Vec<Array2<f64>>,
) -> Vec<f64> {
    let d = net.state_dim();
    let pr = pairs(d);
    let n_layers = net.layers();
    let mut zbar = ubar;
    let mut zdbar = udbar;
    let mut zddbar = uddbar;
    let mut per_layer: Vec<(Array2<f64>, Vec<f64>)> = Vec::with_capacity(n_layers);
    for k in (0..n_layers).rev() {
        let mut gw = zbar.dot(&cache.a[k].t());
        for (zb, a) in zdbar.iter().zip(&cache.ad[k]) {
            general_mat_mul(1.0, zb, &a.t(), 1.0, &mut gw);
        }
        for (zb, a) in zddbar.iter().zip(&cache.add[k]) {
            general_mat_mul(1.0, zb, &a.t(), 1.0, &mut gw);
        }
        let gb = zbar.sum_axis(Axis(1)).to_vec();
        per_layer.push((gw, gb));
        if k == 0 {
            break;
        }
        let wt = net.weights()[k].t();
        let abar = wt.dot(&zbar);
        let adbar: Vec<Array2<f64>> = zdbar.iter().map(|m| wt.dot(m)).collect();
        let addbar: Vec<Array2<f64>> = zddbar.iter().map(|m| wt.dot(m)).collect();
        let h = k - 1;
        let (s1, s2, s3) = (&cache.s1[h], &cache.s2[h], &cache.s3[h]);
        let zd = &cache.zd[h];
        let zdd = &cache.zdd[h];

        let mut nz = &abar * s1;
        for (i, ab) in adbar.iter().enumerate() {
            nz += &(ab * s2 * &zd[i]);
        }
        for (p, ab) in addbar.iter().enumerate() {
            let (i, j) = pr[p];
            nz += &(ab * &(s3 * &zd[i] * &zd[j] + s2 * &zdd[p]));
        }
        let mut nzd: Vec<Array2<f64>> = adbar.iter().map(|ab| ab * s1).collect();
        for (p, ab) in addbar.iter().enumerate() {
            let (i, j) = pr[p];
            let t = ab * s2;
            nzd[i] += &(&t * &zd[j]);
            nzd[j] += &(&t * &zd[i]);
        }
        zddbar = addbar.iter().map(|ab| ab * s1).collect();
        zdbar = nzd;
        zbar = nz;
    }
    let mut out = Vec::with_capacity(net.num_params());
    for (gw, gb) in per_layer.into_iter().rev() {
        out.extend(gw.iter());
        out.extend(gb);
    }
    out
}

/// Sum chunk gradients in chunk order.
pub(crate) fn reduce(parts: Vec<Vec<f64>>, n: usize) -> Vec<f64> {
    let mut total = vec![0.0; n];
    for part in parts {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

pub(crate) fn chunk_bounds(points: usize) -> Vec<(usize, usize)> {
    (0..points)
        .step_by(CHUNK)
        .map(|s| (s, CHUNK.min(points - s)))
        .collect()
}

impl Mlp {
    /// `û`, `∇ₓû` and optionally `∇ₓ²û` at `times.len()` points; `states` is
    /// laid out `[point][component]`.
    pub fn evaluate_batch(&self, times: &[f64], states: &[f64], order: Order) -> Result<BatchOutput> {
        check_inputs(self, times, states, order)?;
        let d = self.state_dim();
        let outs: Vec<ChunkOut> = chunk_bounds(times.len())
            .into_par_iter()
            .map(|(s, c)| forward_chunk(self, times, states, s, c, order, false).0)
            .collect();
        Ok(assemble(outs, d, order, times.len()))
    }

    /// Gradient of `Σ_p w_p û(t_p, x_p)` with respect to the parameters.
    pub fn value_parameter_gradient(&self, times: &[f64], states: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
        check_inputs(self, times, states, Order::Value)?;
        if weights.len() != times.len() {
            return Err(shape("one weight per point required"));
        }
        let parts: Vec<Vec<f64>> = chunk_bounds(times.len())
            .into_par_iter()
            .map(|(s, c)| {
                let (_, cache) = forward_chunk(self, times, states, s, c, Order::Value, true);
                let ubar = Array2::from_shape_vec((1, c), weights[s..s + c].to_vec()).unwrap();
                backward_chunk(self, &cache.unwrap(), ubar, vec![], vec![])
            })
            .collect();
        Ok(reduce(parts, self.num_params()))
    }
}

pub(crate) fn assemble(outs: Vec<ChunkOut>, d: usize, order: Order, points: usize) -> BatchOutput {
    let nt = order.tangents(d);
    let np = order.pair_count(d);
    let mut value = Vec::with_capacity(points);
    let mut grad = Vec::with_capacity(points * nt);
    let mut hess = Vec::with_capacity(points * np);
    for o in outs {
        let cols = o.value.ncols();
        value.extend(o.value.iter());
        for c in 0..cols {
            for g in &o.grad {
                grad.push(g[[0, c]]);
            }
            for h in &o.hess {
                hess.push(h[[0, c]]);
            }
        }
    }
    BatchOutput {
        order,
        dim: d,
        value,
        grad,
        hess,
    }
}
