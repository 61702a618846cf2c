//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Every differentiable computation in the crate is written once, generically
//! over [`Real`], and evaluated either on plain `f64` (sampling, evaluation) or
//! on [`Var`] (gradients). A [`Tape`] is rebuilt for every gradient; nodes are
//! appended in evaluation order, so parents always precede children and a
//! single reverse sweep yields every adjoint.
//!
//! Conventions shared by both scalar types:
//! - `exp` and `tanh` clamp their input to `[-EXP_CLAMP, EXP_CLAMP]`; outside
//!   that range the derivative is the derivative of the clamped function (zero).
//! - `relu` has derivative 0 at exactly 0.
//!
//! The set of primitives is closed: a computation can only be expressed through
//! the methods of [`Real`], so an unsupported primitive cannot be recorded.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Inputs to `exp` and `tanh` are clamped to this magnitude.
pub const EXP_CLAMP: f64 = 60.0;

#[derive(Default)]
struct Nodes {
    values: Vec<f64>,
    /// `offsets[i]..offsets[i + 1]` indexes the parent edges of node `i`.
    offsets: Vec<usize>,
    parents: Vec<u32>,
    partials: Vec<f64>,
    fault: Option<&'static str>,
}

/// Append-only record of primitive operations.
///
/// A tape is single-owner; concurrent gradient evaluations each build their own.
pub struct Tape {
    nodes: RefCell<Nodes>,
}

/// A scalar recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} = {})", self.idx, self.val)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        let nodes = Nodes {
            offsets: vec![0],
            ..Default::default()
        };
        Tape {
            nodes: RefCell::new(nodes),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an independent input.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push("input", value, std::iter::empty())
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    fn push<I>(&self, op: &'static str, value: f64, edges: I) -> Var<'_>
    where
        I: IntoIterator<Item = (u32, f64)>,
    {
        let mut n = self.nodes.borrow_mut();
        let mut finite = value.is_finite();
        for (p, d) in edges {
            finite &= d.is_finite();
            n.parents.push(p);
            n.partials.push(d);
        }
        if !finite && n.fault.is_none() {
            n.fault = Some(op);
        }
        let idx = n.values.len() as u32;
        n.values.push(value);
        let end = n.parents.len();
        n.offsets.push(end);
        Var {
            tape: self,
            idx,
            val: value,
        }
    }

    /// The first primitive that produced a non-finite value or partial, if any.
    pub fn fault(&self) -> Option<&'static str> {
        self.nodes.borrow().fault
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.fault() {
            Some(op) => Err(Error::NumericDomain(op.to_string())),
            None => Ok(()),
        }
    }

    /// Reverse sweep seeded at `output`; returns the adjoint of every node.
    pub fn adjoints(&self, output: Var<'_>) -> Vec<f64> {
        let n = self.nodes.borrow();
        let mut adj = vec![0.0; n.values.len()];
        adj[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            for e in n.offsets[i]..n.offsets[i + 1] {
                adj[n.parents[e] as usize] += a * n.partials[e];
            }
        }
        adj
    }

    /// Gradient of `output` with respect to `wrt`.
    pub fn gradient(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Vec<f64> {
        let adj = self.adjoints(output);
        wrt.iter().map(|v| adj[v.idx as usize]).collect()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.val
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, op: &'static str, value: f64, d: f64) -> Var<'t> {
        self.tape.push(op, value, [(self.idx, d)])
    }

    fn binary(self, op: &'static str, value: f64, da: f64, other: Var<'t>, db: f64) -> Var<'t> {
        self.tape.push(op, value, [(self.idx, da), (other.idx, db)])
    }
}

/// Value and gradient of the scalar function `f` at `x`.
///
/// Fails with [`Error::NumericDomain`] naming the first primitive that produced
/// a non-finite intermediate.
pub fn grad<F>(x: &[f64], f: F) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let inputs = tape.vars(x);
    let out = f(&tape, &inputs)?;
    tape.check_finite()?;
    let g = tape.gradient(out, &inputs);
    Ok((out.val, g))
}

/// Value of `f` at `x`, evaluated on a tape.
pub fn value<F>(x: &[f64], f: F) -> Result<f64>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let inputs = tape.vars(x);
    let out = f(&tape, &inputs)?;
    tape.check_finite()?;
    Ok(out.val)
}

/// Largest relative discrepancy between the tape gradient and central finite
/// differences, `|ad - fd| / (|fd| + 1e-12)`, over all coordinates.
pub fn check_gradient_fd<F>(f: F, x: &[f64], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    check_gradient_fd_coords(f, x, step, &coords)
}

/// As [`check_gradient_fd`], restricted to the listed coordinates.
pub fn check_gradient_fd_coords<F>(f: F, x: &[f64], step: f64, coords: &[usize]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let (_, ad) = grad(x, &f)?;
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        probe[i] = x[i] + step;
        let up = value(&probe, &f)?;
        probe[i] = x[i] - step;
        let down = value(&probe, &f)?;
        probe[i] = x[i];
        let fd = (up - down) / (2.0 * step);
        worst = worst.max((ad[i] - fd).abs() / (fd.abs() + 1e-12));
    }
    Ok(worst)
}

/// Scalar arithmetic shared by `f64` and [`Var`].
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
    fn constant(self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn relu(self) -> Self;
    fn square(self) -> Self;
    fn sqrt(self) -> Self;
    /// `ln(1 + e^x)`, evaluated stably.
    fn softplus(self) -> Self;
    /// `bias + Σ ws[i] * xs[i]` as a single node.
    fn affine(bias: Self, ws: &[Self], xs: &[Self]) -> Self;
    /// `bias + Σ ws[i] * xs[i]` with constant `xs`.
    fn affine_const(bias: Self, ws: &[Self], xs: &[f64]) -> Self;
    /// `init + Σ xs[i]` as a single node.
    fn sum(init: Self, xs: &[Self]) -> Self;
}

fn softplus_f64(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Real for f64 {
    fn value(self) -> f64 {
        self
    }
    fn constant(self, c: f64) -> f64 {
        c
    }
    fn exp(self) -> f64 {
        self.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
    }
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    fn tanh(self) -> f64 {
        self.clamp(-EXP_CLAMP, EXP_CLAMP).tanh()
    }
    fn relu(self) -> f64 {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    fn square(self) -> f64 {
        self * self
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn softplus(self) -> f64 {
        softplus_f64(self)
    }
    fn affine(bias: f64, ws: &[f64], xs: &[f64]) -> f64 {
        debug_assert_eq!(ws.len(), xs.len());
        ws.iter().zip(xs).fold(bias, |acc, (w, x)| acc + w * x)
    }
    fn affine_const(bias: f64, ws: &[f64], xs: &[f64]) -> f64 {
        debug_assert_eq!(ws.len(), xs.len());
        ws.iter()
            .zip(xs)
            .filter(|(_, x)| **x != 0.0)
            .fold(bias, |acc, (w, x)| acc + w * x)
    }
    fn sum(init: f64, xs: &[f64]) -> f64 {
        xs.iter().fold(init, |acc, x| acc + x)
    }
}

impl<'t> Real for Var<'t> {
    fn value(self) -> f64 {
        self.val
    }
    fn constant(self, c: f64) -> Self {
        self.tape.push("constant", c, std::iter::empty())
    }
    fn exp(self) -> Self {
        let inside = self.val.abs() <= EXP_CLAMP;
        let v = Real::exp(self.val);
        self.unary("exp", v, if inside { v } else { 0.0 })
    }
    fn ln(self) -> Self {
        self.unary("ln", self.val.ln(), 1.0 / self.val)
    }
    fn tanh(self) -> Self {
        let inside = self.val.abs() <= EXP_CLAMP;
        let v = Real::tanh(self.val);
        self.unary("tanh", v, if inside { 1.0 - v * v } else { 0.0 })
    }
    fn relu(self) -> Self {
        if self.val > 0.0 {
            self.unary("relu", self.val, 1.0)
        } else {
            self.unary("relu", 0.0, 0.0)
        }
    }
    fn square(self) -> Self {
        self.unary("square", self.val * self.val, 2.0 * self.val)
    }
    fn sqrt(self) -> Self {
        let v = self.val.sqrt();
        self.unary("sqrt", v, 0.5 / v)
    }
    fn softplus(self) -> Self {
        self.unary("softplus", softplus_f64(self.val), sigmoid_f64(self.val))
    }
    fn affine(bias: Self, ws: &[Self], xs: &[Self]) -> Self {
        assert_eq!(ws.len(), xs.len(), "affine: operand lengths differ");
        let v = ws.iter().zip(xs).fold(bias.val, |acc, (w, x)| acc + w.val * x.val);
        let edges = std::iter::once((bias.idx, 1.0))
            .chain(ws.iter().zip(xs).flat_map(|(w, x)| [(w.idx, x.val), (x.idx, w.val)]));
        bias.tape.push("affine", v, edges)
    }
    fn affine_const(bias: Self, ws: &[Self], xs: &[f64]) -> Self {
        assert_eq!(ws.len(), xs.len(), "affine: operand lengths differ");
        let v = ws
            .iter()
            .zip(xs)
            .filter(|(_, x)| **x != 0.0)
            .fold(bias.val, |acc, (w, x)| acc + w.val * x);
        let edges = std::iter::once((bias.idx, 1.0))
            .chain(ws.iter().zip(xs).filter(|(_, x)| **x != 0.0).map(|(w, x)| (w.idx, *x)));
        bias.tape.push("affine", v, edges)
    }
    fn sum(init: Self, xs: &[Self]) -> Self {
        let v = xs.iter().fold(init.val, |acc, x| acc + x.val);
        let edges = std::iter::once((init.idx, 1.0)).chain(xs.iter().map(|x| (x.idx, 1.0)));
        init.tape.push("sum", v, edges)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary("add", self.val + rhs.val, 1.0, rhs, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary("sub", self.val - rhs.val, 1.0, rhs, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary("mul", self.val * rhs.val, rhs.val, rhs, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.val / rhs.val;
        self.binary("div", v, 1.0 / rhs.val, rhs, -v / rhs.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary("neg", -self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary("add", self.val + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary("sub", self.val - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary("mul", self.val * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.unary("div", self.val / rhs, 1.0 / rhs)
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
        rhs.unary("sub", self - rhs.val, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}
