//! Minimal reverse-mode tape over batch vectors.
//!
//! Every node holds a vector of either length 1 or the batch length;
//! binary ops broadcast length-1 operands. [`Real`] abstracts over plain
//! `f64` and tape variables so the flow code is written once.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// A constant living alongside `self`.
    fn lift(self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn sigmoid(self) -> Self;
    fn softplus(self) -> Self;
    /// Current values: one per batch element, or a single broadcast value.
    fn values(&self) -> Vec<f64>;
    /// Element `i` takes `cands[choice[i]][i]`; a single choice broadcasts.
    fn pick(cands: &[Self], choice: &[usize]) -> Self;
    /// `bias + sum_k ws[k] * xs[k]`.
    fn affine(bias: Self, ws: &[Self], xs: &[Self]) -> Self;
}

pub fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Real for f64 {
    fn lift(self, c: f64) -> Self {
        c
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sigmoid(self) -> Self {
        stable_sigmoid(self)
    }
    fn softplus(self) -> Self {
        stable_softplus(self)
    }
    fn values(&self) -> Vec<f64> {
        vec![*self]
    }
    fn pick(cands: &[Self], choice: &[usize]) -> Self {
        cands[choice[0]]
    }
    fn affine(bias: Self, ws: &[Self], xs: &[Self]) -> Self {
        ws.iter().zip(xs).fold(bias, |acc, (w, x)| acc + w * x)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    Sqrt(usize),
    Sigmoid(usize),
    Softplus(usize),
    Pick(Vec<usize>, Vec<usize>),
    Affine(usize, Vec<usize>, Vec<usize>),
    Sum(usize),
}

struct Node {
    val: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

#[inline]
fn at(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

#[inline]
fn acc(slot: &mut [f64], i: usize, g: f64) {
    if slot.len() == 1 {
        slot[0] += g;
    } else {
        slot[i] += g;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, val: Vec<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { val, op });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, val: Vec<f64>) -> Var<'_> {
        assert!(!val.is_empty(), "empty tape value");
        self.push(val, Op::Leaf)
    }

    pub fn scalar(&self, c: f64) -> Var<'_> {
        self.leaf(vec![c])
    }

    fn unary(&self, a: usize, f: impl Fn(f64) -> f64, op: Op) -> Var<'_> {
        let val = self.nodes.borrow()[a].val.iter().map(|x| f(*x)).collect();
        self.push(val, op)
    }

    fn binary(&self, a: usize, b: usize, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'_> {
        let val = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a].val, &nodes[b].val);
            let n = va.len().max(vb.len());
            debug_assert!(va.len() == 1 || vb.len() == 1 || va.len() == vb.len());
            (0..n).map(|i| f(at(va, i), at(vb, i))).collect()
        };
        self.push(val, op)
    }

    /// Sum of all elements of `v` as a length-1 node.
    pub fn sum(&self, v: Var<'_>) -> Var<'_> {
        let s = self.nodes.borrow()[v.idx].val.iter().sum();
        self.push(vec![s], Op::Sum(v.idx))
    }

    pub fn value(&self, v: Var<'_>) -> Vec<f64> {
        self.nodes.borrow()[v.idx].val.clone()
    }

    /// Gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.idx].val.len(), 1, "backward needs a scalar output");
        let mut g: Vec<Vec<f64>> = nodes.iter().map(|n| vec![0.0; n.val.len()]).collect();
        g[out.idx][0] = 1.0;
        for k in (0..=out.idx).rev() {
            let gk = std::mem::take(&mut g[k]);
            if gk.iter().all(|x| *x == 0.0) {
                g[k] = gk;
                continue;
            }
            let node = &nodes[k];
            let out_v = &node.val;
            let val = |i: usize| &nodes[i].val;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (i, gi) in gk.iter().enumerate() {
                        acc(&mut g[*a], i, *gi);
                        acc(&mut g[*b], i, *gi);
                    }
                }
                Op::Sub(a, b) => {
                    for (i, gi) in gk.iter().enumerate() {
                        acc(&mut g[*a], i, *gi);
                        acc(&mut g[*b], i, -gi);
                    }
                }
                Op::Mul(a, b) => {
                    for (i, gi) in gk.iter().enumerate() {
                        let (x, y) = (at(val(*a), i), at(val(*b), i));
                        acc(&mut g[*a], i, gi * y);
                        acc(&mut g[*b], i, gi * x);
                    }
                }
                Op::Div(a, b) => {
                    for (i, gi) in gk.iter().enumerate() {
                        let (x, y) = (at(val(*a), i), at(val(*b), i));
                        acc(&mut g[*a], i, gi / y);
                        acc(&mut g[*b], i, -gi * x / (y * y));
                    }
                }
                Op::Neg(a) => {
                    for (i, gi) in gk.iter().enumerate() {
                        acc(&mut g[*a], i, -gi);
                    }
                }
                Op::Exp(a) => {
                    for (i, gi) in gk.iter().enumerate() {
                        acc(&mut g[*a], i, gi * out_v[i]);
                    }
                }
                Op::Ln(a) => {
                    for (i, gi) in gk.iter().enumerate() {
                        acc(&mut g[*a], i, gi / at(val(*a), i));
                    }
                }
                Op::Tanh(a) => {
                    for (i, gi) in gk.iter().enumerate() {
                        acc(&mut g[*a], i, gi * (1.0 - out_v[i] * out_v[i]));
                    }
                }
                Op::Sqrt(a) => {
                    for (i, gi) in gk.iter().enumerate() {
                        acc(&mut g[*a], i, gi * 0.5 / out_v[i]);
                    }
                }
                Op::Sigmoid(a) => {
                    for (i, gi) in gk.iter().enumerate() {
                        acc(&mut g[*a], i, gi * out_v[i] * (1.0 - out_v[i]));
                    }
                }
                Op::Softplus(a) => {
                    for (i, gi) in gk.iter().enumerate() {
                        acc(&mut g[*a], i, gi * stable_sigmoid(at(val(*a), i)));
                    }
                }
                Op::Pick(cands, choice) => {
                    for (i, gi) in gk.iter().enumerate() {
                        let c = cands[at_usize(choice, i)];
                        acc(&mut g[c], i, *gi);
                    }
                }
                Op::Affine(bias, ws, xs) => {
                    for (i, gi) in gk.iter().enumerate() {
                        acc(&mut g[*bias], i, *gi);
                        for (w, x) in ws.iter().zip(xs) {
                            let (wv, xv) = (at(val(*w), i), at(val(*x), i));
                            acc(&mut g[*w], i, gi * xv);
                            acc(&mut g[*x], i, gi * wv);
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = g[*a].len();
                    for i in 0..n {
                        g[*a][i] += gk[0];
                    }
                }
            }
            g[k] = gk;
        }
        Grads { g }
    }
}

fn at_usize(v: &[usize], i: usize) -> usize {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

pub struct Grads {
    g: Vec<Vec<f64>>,
}

impl Grads {
    pub fn wrt(&self, v: Var<'_>) -> &[f64] {
        &self.g[v.idx]
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Vec<f64> {
        self.tape.value(*self)
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident, $op:ident, $f:expr) => {
        impl<'t> $tr for Var<'t> {
            type Output = Var<'t>;
            fn $m(self, rhs: Var<'t>) -> Var<'t> {
                debug_assert!(std::ptr::eq(self.tape, rhs.tape));
                self.tape.binary(self.idx, rhs.idx, $f, Op::$op(self.idx, rhs.idx))
            }
        }
    };
}

binop!(Add, add, Add, |a, b| a + b);
binop!(Sub, sub, Sub, |a, b| a - b);
binop!(Mul, mul, Mul, |a, b| a * b);
binop!(Div, div, Div, |a, b| a / b);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self.idx, |a| -a, Op::Neg(self.idx))
    }
}

impl<'t> Real for Var<'t> {
    fn lift(self, c: f64) -> Self {
        self.tape.scalar(c)
    }
    fn exp(self) -> Self {
        self.tape.unary(self.idx, f64::exp, Op::Exp(self.idx))
    }
    fn ln(self) -> Self {
        self.tape.unary(self.idx, f64::ln, Op::Ln(self.idx))
    }
    fn tanh(self) -> Self {
        self.tape.unary(self.idx, f64::tanh, Op::Tanh(self.idx))
    }
    fn sqrt(self) -> Self {
        self.tape.unary(self.idx, f64::sqrt, Op::Sqrt(self.idx))
    }
    fn sigmoid(self) -> Self {
        self.tape.unary(self.idx, stable_sigmoid, Op::Sigmoid(self.idx))
    }
    fn softplus(self) -> Self {
        self.tape.unary(self.idx, stable_softplus, Op::Softplus(self.idx))
    }
    fn values(&self) -> Vec<f64> {
        self.tape.value(*self)
    }
    fn pick(cands: &[Self], choice: &[usize]) -> Self {
        let tape = cands[0].tape;
        let idx: Vec<usize> = cands.iter().map(|c| c.idx).collect();
        let val = {
            let nodes = tape.nodes.borrow();
            let n = idx.iter().map(|i| nodes[*i].val.len()).max().unwrap_or(1).max(choice.len());
            (0..n).map(|i| at(&nodes[idx[at_usize(choice, i)]].val, i)).collect()
        };
        tape.push(val, Op::Pick(idx, choice.to_vec()))
    }
    fn affine(bias: Self, ws: &[Self], xs: &[Self]) -> Self {
        let tape = bias.tape;
        let val = {
            let nodes = tape.nodes.borrow();
            let n = ws
                .iter()
                .chain(xs)
                .map(|v| nodes[v.idx].val.len())
                .chain(std::iter::once(nodes[bias.idx].val.len()))
                .max()
                .unwrap_or(1);
            (0..n)
                .map(|i| {
                    ws.iter().zip(xs).fold(at(&nodes[bias.idx].val, i), |s, (w, x)| {
                        s + at(&nodes[w.idx].val, i) * at(&nodes[x.idx].val, i)
                    })
                })
                .collect()
        };
        tape.push(
            val,
            Op::Affine(bias.idx, ws.iter().map(|w| w.idx).collect(), xs.iter().map(|x| x.idx).collect()),
        )
    }
}
