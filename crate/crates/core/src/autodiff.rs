//! Scalar reverse-mode differentiation for loss algebra.
//!
//! Problem data (drift, diffusion, driver) is written once against the
//! [`Real`] trait and evaluated either on plain `f64` during simulation or on
//! tape variables ([`Var`]) while a training loss is being recorded. Network
//! outputs enter the tape as leaves; see [`crate::surrogate::ParamTape`].

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic needed by problem definitions and residual formulas.
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;
    /// A constant living in the same context as `self`.
    fn lift(self, v: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn abs(self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn lift(self, v: f64) -> Self {
        v
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    parents: [usize; 2],
    partials: [f64; 2],
}

/// Wengert list of scalar operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(n)),
        }
    }

    /// Independent variable (leaf) with the given value.
    pub fn var(&self, value: f64) -> Var<'_> {
        let index = self.push(Node {
            parents: [0, 0],
            partials: [0.0, 0.0],
        });
        Var {
            tape: self,
            index,
            value,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn unary(&self, a: &Var<'_>, da: f64) -> usize {
        self.push(Node {
            parents: [a.index, a.index],
            partials: [da, 0.0],
        })
    }

    fn binary(&self, a: &Var<'_>, b: &Var<'_>, da: f64, db: f64) -> usize {
        self.push(Node {
            parents: [a.index, b.index],
            partials: [da, db],
        })
    }

    /// Adjoints of every node with respect to `output`.
    pub fn gradient(&self, output: Var<'_>) -> Vec<f64> {
        assert!(
            std::ptr::eq(output.tape, self),
            "variable belongs to a different tape"
        );
        let nodes = self.nodes.borrow();
        let mut adjoint = vec![0.0; nodes.len()];
        adjoint[output.index] = 1.0;
        for i in (0..=output.index).rev() {
            let a = adjoint[i];
            if a == 0.0 {
                continue;
            }
            let node = nodes[i];
            adjoint[node.parents[0]] += a * node.partials[0];
            adjoint[node.parents[1]] += a * node.partials[1];
        }
        adjoint
    }
}

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} = {})", self.index, self.value)
    }
}

impl<'t> Var<'t> {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn new_unary(&self, value: f64, da: f64) -> Self {
        let index = self.tape.unary(self, da);
        Var {
            tape: self.tape,
            index,
            value,
        }
    }

    fn new_binary(&self, other: &Self, value: f64, da: f64, db: f64) -> Self {
        debug_assert!(std::ptr::eq(self.tape, other.tape));
        let index = self.tape.binary(self, other, da, db);
        Var {
            tape: self.tape,
            index,
            value,
        }
    }
}

impl Add for Var<'_> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.new_binary(&rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.new_binary(&rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.new_binary(&rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl Div for Var<'_> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.value / rhs.value;
        self.new_binary(&rhs, q, 1.0 / rhs.value, -q / rhs.value)
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    fn neg(self) -> Self {
        self.new_unary(-self.value, -1.0)
    }
}

impl Add<f64> for Var<'_> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        self.new_unary(self.value + rhs, 1.0)
    }
}

impl Sub<f64> for Var<'_> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        self.new_unary(self.value - rhs, 1.0)
    }
}

impl Mul<f64> for Var<'_> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.new_unary(self.value * rhs, rhs)
    }
}

impl Div<f64> for Var<'_> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self.new_unary(self.value / rhs, 1.0 / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.new_unary(self - rhs.value, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

impl Real for Var<'_> {
    fn value(self) -> f64 {
        self.value
    }

    fn lift(self, v: f64) -> Self {
        self.tape.var(v)
    }

    fn exp(self) -> Self {
        let e = self.value.exp();
        self.new_unary(e, e)
    }

    fn ln(self) -> Self {
        self.new_unary(self.value.ln(), 1.0 / self.value)
    }

    fn sin(self) -> Self {
        self.new_unary(self.value.sin(), self.value.cos())
    }

    fn cos(self) -> Self {
        self.new_unary(self.value.cos(), -self.value.sin())
    }

    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.new_unary(t, 1.0 - t * t)
    }

    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.new_unary(s, 0.5 / s)
    }

    fn powi(self, n: i32) -> Self {
        let d = if n == 0 {
            0.0
        } else {
            n as f64 * self.value.powi(n - 1)
        };
        self.new_unary(self.value.powi(n), d)
    }

    fn abs(self) -> Self {
        // right derivative at the kink
        let d = if self.value < 0.0 { -1.0 } else { 1.0 };
        self.new_unary(self.value.abs(), d)
    }
}
