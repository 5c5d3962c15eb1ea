//! Conditional normalizing flow over continuous adversary actions.
//!
//! Generative direction `z -> a`: a stack of autoregressive elementwise
//! transforms (affine and rational-quadratic spline layers alternate),
//! each conditioned on `[condition, earlier outputs of the same layer]`
//! through a small tanh network, followed by an optional logistic squash
//! onto the action box. Both directions are closed form, so sampling and
//! density evaluation are exact.

pub mod tape;

use std::path::Path;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{ActionSpace, Environment, State, TransitionRecord};
use crate::error::{Error, Result};
pub use tape::{Real, Tape, Var};

const MIN_BIN: f64 = 1e-3;
const MIN_DERIV: f64 = 1e-3;
const LOG_SCALE_BOUND: f64 = 4.0;
const SQUASH_EPS: f64 = 1e-12;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Transform count; even positions are affine, odd positions splines.
    pub layers: usize,
    /// Conditioner width; 0 makes each conditioner a linear map.
    pub hidden: usize,
    pub bins: usize,
    /// Splines act on `[-tail_bound, tail_bound]` and are identity outside.
    pub tail_bound: f64,
    /// Monte Carlo sample count per KL step.
    pub samples: usize,
    pub learning_rate: f64,
    /// Dense reward decay per step back from the terminal.
    pub dense_decay: f64,
    /// Weight on the freshly trained parameters when blending.
    pub momentum: f64,
    /// Bump std as a multiple of the ground-truth std.
    pub bump_scale: f64,
    pub beta_max: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            layers: 4,
            hidden: 16,
            bins: 8,
            tail_bound: 4.0,
            samples: 64,
            learning_rate: 3e-4,
            dense_decay: 0.9,
            momentum: 0.5,
            bump_scale: 1.0,
            beta_max: 10.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Usage(format!("flow config: {m}")));
        if self.layers == 0 {
            return bad("layers must be positive");
        }
        if self.bins < 2 || !(self.tail_bound > 0.0) {
            return bad("splines need >= 2 bins and a positive tail bound");
        }
        if self.samples == 0 || !(self.learning_rate >= 0.0) {
            return bad("samples must be positive and learning_rate nonnegative");
        }
        if !(self.dense_decay > 0.0 && self.dense_decay <= 1.0) {
            return bad("dense_decay must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1]");
        }
        if !(self.bump_scale > 0.0) || !(self.beta_max >= 0.0) {
            return bad("bump_scale must be positive and beta_max nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Affine,
    Spline,
}

#[derive(Clone, Debug)]
struct Block {
    offset: usize,
    inputs: usize,
    outputs: usize,
}

#[derive(Clone, Debug)]
struct Layer {
    kind: Kind,
    order: Vec<usize>,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug, Default)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Clone, Debug)]
pub struct Flow {
    action_dim: usize,
    cond_low: Vec<f64>,
    cond_high: Vec<f64>,
    action_box: Option<(Vec<f64>, Vec<f64>)>,
    hidden: usize,
    bins: usize,
    tail_bound: f64,
    layers: Vec<Layer>,
    params: Vec<f64>,
    adam: Adam,
}

/// Log density usable on and off the tape.
pub trait LogDensity {
    fn log_density<T: Real>(&self, a: &[T]) -> T;
}

fn log_addexp<T: Real>(x: T, y: T) -> T {
    x + (y - x).softplus()
}

fn std_normal_logpdf<T: Real>(z: &[T]) -> T {
    z.iter()
        .fold(z[0].lift(0.0), |s, zi| s - *zi * *zi * zi.lift(0.5) - zi.lift(HALF_LN_2PI))
}

fn lift_all<T: Real>(proto: T, xs: &[f64]) -> Vec<T> {
    xs.iter().map(|x| proto.lift(*x)).collect()
}

fn batch_len(vals: &[Vec<f64>]) -> usize {
    vals.iter().map(Vec::len).max().unwrap_or(1)
}

fn at(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

/// Clamps `x` into `[lo, hi]` elementwise (gradient stops at the clamp).
fn clamp<T: Real>(x: T, lo: f64, hi: f64) -> T {
    let vals = x.values();
    if vals.iter().all(|v| *v >= lo && *v <= hi) {
        return x;
    }
    let choice: Vec<usize> = vals
        .iter()
        .map(|v| if *v < lo { 1 } else if *v > hi { 2 } else { 0 })
        .collect();
    T::pick(&[x, x.lift(lo), x.lift(hi)], &choice)
}

struct Knots<T> {
    xs: Vec<T>,
    ys: Vec<T>,
    derivs: Vec<T>,
}

fn softmax_knots<T: Real>(raw: &[T], bound: f64) -> Vec<T> {
    let k = raw.len();
    let vals: Vec<Vec<f64>> = raw.iter().map(Real::values).collect();
    let n = batch_len(&vals);
    let argmax: Vec<usize> = (0..n)
        .map(|i| {
            (0..k)
                .max_by(|a, b| at(&vals[*a], i).total_cmp(&at(&vals[*b], i)))
                .unwrap_or(0)
        })
        .collect();
    let top = T::pick(raw, &argmax);
    let e: Vec<T> = raw.iter().map(|r| (*r - top).exp()).collect();
    let total = e[1..].iter().fold(e[0], |s, x| s + *x);
    let scale = top.lift(2.0 * bound * (1.0 - k as f64 * MIN_BIN));
    let floor = top.lift(2.0 * bound * MIN_BIN);
    let mut knots = Vec::with_capacity(k + 1);
    let mut cur = top.lift(-bound);
    knots.push(cur);
    for w in &e[..k - 1] {
        cur = cur + floor + scale * *w / total;
        knots.push(cur);
    }
    knots.push(top.lift(bound));
    knots
}

fn spline_knots<T: Real>(out: &[T], bins: usize, bound: f64) -> Knots<T> {
    let proto = out[0];
    let xs = softmax_knots(&out[..bins], bound);
    let ys = softmax_knots(&out[bins..2 * bins], bound);
    // raw 0 maps to derivative 1, so a zero conditioner is the identity
    let shift = ((1.0 - MIN_DERIV).exp() - 1.0).ln();
    let mut derivs = vec![proto.lift(1.0)];
    for r in &out[2 * bins..3 * bins - 1] {
        derivs.push(proto.lift(MIN_DERIV) + (*r + proto.lift(shift)).softplus());
    }
    derivs.push(proto.lift(1.0));
    Knots { xs, ys, derivs }
}

/// Bin index per element, or `None` for the identity tails.
fn locate(x: &[f64], knots: &[Vec<f64>], bound: f64) -> Vec<Option<usize>> {
    let bins = knots.len() - 1;
    let n = knots.iter().map(Vec::len).max().unwrap_or(1).max(x.len());
    (0..n)
        .map(|i| {
            let v = &at(x, i);
            if *v <= -bound || *v >= bound {
                None
            } else {
                let k = (1..bins).take_while(|k| at(&knots[*k], i) <= *v).count();
                Some(k)
            }
        })
        .collect()
}

struct Segment<T> {
    lo_x: T,
    lo_y: T,
    width: T,
    height: T,
    slope: T,
    d_lo: T,
    d_hi: T,
    tail: Vec<usize>,
}

fn segment<T: Real>(kn: &Knots<T>, bins: &[Option<usize>]) -> Segment<T> {
    let k = kn.xs.len() - 1;
    let idx: Vec<usize> = bins.iter().map(|b| b.unwrap_or(0)).collect();
    let tail: Vec<usize> = bins.iter().map(|b| b.is_none() as usize).collect();
    let lo_x = T::pick(&kn.xs[..k], &idx);
    let hi_x = T::pick(&kn.xs[1..], &idx);
    let lo_y = T::pick(&kn.ys[..k], &idx);
    let hi_y = T::pick(&kn.ys[1..], &idx);
    let width = hi_x - lo_x;
    let height = hi_y - lo_y;
    Segment {
        lo_x,
        lo_y,
        width,
        height,
        slope: height / width,
        d_lo: T::pick(&kn.derivs[..k], &idx),
        d_hi: T::pick(&kn.derivs[1..], &idx),
        tail,
    }
}

/// Forward log-derivative at bin position `xi`.
fn rq_logdet<T: Real>(sg: &Segment<T>, xi: T) -> (T, T) {
    let one = xi.lift(1.0);
    let two = xi.lift(2.0);
    let t = xi * (one - xi);
    let denom = sg.slope + (sg.d_hi + sg.d_lo - two * sg.slope) * t;
    let num = sg.slope
        * sg.slope
        * (sg.d_hi * xi * xi + two * sg.slope * t + sg.d_lo * (one - xi) * (one - xi));
    (num.ln() - two * denom.ln(), denom)
}

fn rq_forward<T: Real>(x: T, kn: &Knots<T>, bound: f64) -> (T, T) {
    let kv: Vec<Vec<f64>> = kn.xs.iter().map(Real::values).collect();
    let bins = locate(&x.values(), &kv, bound);
    if bins.iter().all(Option::is_none) {
        return (x, x.lift(0.0));
    }
    let sg = segment(kn, &bins);
    let xi_raw = (x - sg.lo_x) / sg.width;
    let xi = T::pick(&[xi_raw, x.lift(0.5)], &sg.tail);
    let (ld, denom) = rq_logdet(&sg, xi);
    let t = xi * (x.lift(1.0) - xi);
    let y = sg.lo_y + sg.height * (sg.slope * xi * xi + sg.d_lo * t) / denom;
    (
        T::pick(&[y, x], &sg.tail),
        T::pick(&[ld, x.lift(0.0)], &sg.tail),
    )
}

fn rq_inverse<T: Real>(y: T, kn: &Knots<T>, bound: f64) -> (T, T) {
    let kv: Vec<Vec<f64>> = kn.ys.iter().map(Real::values).collect();
    let bins = locate(&y.values(), &kv, bound);
    if bins.iter().all(Option::is_none) {
        return (y, y.lift(0.0));
    }
    let sg = segment(kn, &bins);
    let two = y.lift(2.0);
    let dy = T::pick(&[y - sg.lo_y, sg.height * y.lift(0.5)], &sg.tail);
    let mix = sg.d_hi + sg.d_lo - two * sg.slope;
    let a = sg.height * (sg.slope - sg.d_lo) + dy * mix;
    let b = sg.height * sg.d_lo - dy * mix;
    let c = -(sg.slope * dy);
    let disc = clamp(b * b - y.lift(4.0) * a * c, 0.0, f64::INFINITY);
    let xi = clamp(two * c / (-b - disc.sqrt()), 0.0, 1.0);
    let (ld, _) = rq_logdet(&sg, xi);
    let x = xi * sg.width + sg.lo_x;
    (
        T::pick(&[x, y], &sg.tail),
        T::pick(&[-ld, y.lift(0.0)], &sg.tail),
    )
}

impl Flow {
    /// Identity-initialized flow; `rng` seeds the hidden-layer weights.
    pub fn new(
        action_dim: usize,
        cond_bounds: (Vec<f64>, Vec<f64>),
        action_box: Option<(Vec<f64>, Vec<f64>)>,
        cfg: &FlowConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        cfg.validate()?;
        if action_dim == 0 {
            return Err(Error::Usage("flow needs at least one action dimension".into()));
        }
        if cond_bounds.0.len() != cond_bounds.1.len() {
            return Err(Error::Usage("condition bounds differ in length".into()));
        }
        if let Some((lo, hi)) = &action_box {
            if lo.len() != action_dim || hi.len() != action_dim || lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                return Err(Error::Usage(format!("bad action box {lo:?} / {hi:?}")));
            }
        }
        let cond_dim = cond_bounds.0.len();
        let mut offset = 0;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let kind = if l % 2 == 0 { Kind::Affine } else { Kind::Spline };
            let order: Vec<usize> = if l % 2 == 0 {
                (0..action_dim).collect()
            } else {
                (0..action_dim).rev().collect()
            };
            let outputs = match kind {
                Kind::Affine => 2,
                Kind::Spline => 3 * cfg.bins - 1,
            };
            let blocks = (0..action_dim)
                .map(|p| {
                    let inputs = cond_dim + p;
                    let b = Block { offset, inputs, outputs };
                    offset += if cfg.hidden > 0 {
                        cfg.hidden * (inputs + 1) + outputs * (cfg.hidden + 1)
                    } else {
                        outputs * (inputs + 1)
                    };
                    b
                })
                .collect();
            layers.push(Layer { kind, order, blocks });
        }
        let mut params = vec![0.0; offset];
        if cfg.hidden > 0 {
            for layer in &layers {
                for b in &layer.blocks {
                    let scale = 1.0 / (b.inputs.max(1) as f64).sqrt();
                    for p in &mut params[b.offset..b.offset + cfg.hidden * (b.inputs + 1)] {
                        *p = rng.random_range(-scale..scale);
                    }
                }
            }
        }
        Ok(Flow {
            action_dim,
            cond_low: cond_bounds.0,
            cond_high: cond_bounds.1,
            action_box,
            hidden: cfg.hidden,
            bins: cfg.bins,
            tail_bound: cfg.tail_bound,
            layers,
            adam: Adam::default(),
            params,
        })
    }

    /// Flow over an environment's continuous adversary box.
    pub fn for_env(env: &dyn Environment, cfg: &FlowConfig, rng: &mut dyn RngCore) -> Result<Self> {
        match env.adversary_space() {
            ActionSpace::Box { low, high } => {
                Flow::new(low.len(), env.condition_bounds(), Some((low, high)), cfg, rng)
            }
            ActionSpace::Discrete(_) => Err(Error::Usage(format!(
                "{} has a discrete adversary; use the tabular learner",
                env.name()
            ))),
        }
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_low.len()
    }

    pub fn action_box(&self) -> Option<&(Vec<f64>, Vec<f64>)> {
        self.action_box.as_ref()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("flow parameter vector rejected".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Scales a raw condition to `[-1, 1]` per the configured bounds.
    pub fn scale_condition(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.cond_low.iter().zip(&self.cond_high))
            .map(|(x, (lo, hi))| if hi > lo { 2.0 * (x - lo) / (hi - lo) - 1.0 } else { 0.0 })
            .collect()
    }

    /// Scaled condition `[a_A, s]`.
    pub fn embed(&self, agent_action: &[f64], s: &State) -> Vec<f64> {
        let raw: Vec<f64> = agent_action.iter().chain(&s.coords).copied().collect();
        self.scale_condition(&raw)
    }

    fn conditioner<T: Real>(&self, p: &[T], b: &Block, inputs: &[T]) -> Vec<T> {
        debug_assert_eq!(inputs.len(), b.inputs);
        let h = self.hidden;
        if h == 0 {
            return (0..b.outputs)
                .map(|o| {
                    let row = b.offset + o * (b.inputs + 1);
                    T::affine(p[row + b.inputs], &p[row..row + b.inputs], inputs)
                })
                .collect();
        }
        let hidden: Vec<T> = (0..h)
            .map(|j| {
                let row = b.offset + j * (b.inputs + 1);
                T::affine(p[row + b.inputs], &p[row..row + b.inputs], inputs).tanh()
            })
            .collect();
        let base = b.offset + h * (b.inputs + 1);
        (0..b.outputs)
            .map(|o| {
                let row = base + o * (h + 1);
                T::affine(p[row + h], &p[row..row + h], &hidden)
            })
            .collect()
    }

    fn element_forward<T: Real>(&self, kind: Kind, x: T, out: &[T]) -> (T, T) {
        match kind {
            Kind::Affine => {
                let ls = (out[1] / x.lift(LOG_SCALE_BOUND)).tanh() * x.lift(LOG_SCALE_BOUND);
                (x * ls.exp() + out[0], ls)
            }
            Kind::Spline => rq_forward(x, &spline_knots(out, self.bins, self.tail_bound), self.tail_bound),
        }
    }

    fn element_inverse<T: Real>(&self, kind: Kind, y: T, out: &[T]) -> (T, T) {
        match kind {
            Kind::Affine => {
                let ls = (out[1] / y.lift(LOG_SCALE_BOUND)).tanh() * y.lift(LOG_SCALE_BOUND);
                ((y - out[0]) * (-ls).exp(), -ls)
            }
            Kind::Spline => rq_inverse(y, &spline_knots(out, self.bins, self.tail_bound), self.tail_bound),
        }
    }

    /// `z -> a` with `log |det da/dz|`. `cond` is already scaled.
    pub fn transform_with<T: Real>(&self, p: &[T], z: &[T], cond: &[T]) -> (Vec<T>, T) {
        let mut x = z.to_vec();
        let mut logdet = z[0].lift(0.0);
        for layer in &self.layers {
            let mut y = x.clone();
            for (pos, (&dim, b)) in layer.order.iter().zip(&layer.blocks).enumerate() {
                let mut inputs = cond.to_vec();
                inputs.extend(layer.order[..pos].iter().map(|d| y[*d]));
                let out = self.conditioner(p, b, &inputs);
                let (v, ld) = self.element_forward(layer.kind, x[dim], &out);
                y[dim] = v;
                logdet = logdet + ld;
            }
            x = y;
        }
        if let Some((lo, hi)) = &self.action_box {
            for (j, u) in x.iter_mut().enumerate() {
                let span = hi[j] - lo[j];
                logdet = logdet + u.lift(span.ln()) - (-*u).softplus() - u.softplus();
                *u = u.lift(lo[j]) + u.lift(span) * u.sigmoid();
            }
        }
        (x, logdet)
    }

    /// `a -> z` with `log |det dz/da|`.
    pub fn inverse_with<T: Real>(&self, p: &[T], a: &[T], cond: &[T]) -> (Vec<T>, T) {
        let mut y = a.to_vec();
        let mut logdet = a[0].lift(0.0);
        if let Some((lo, hi)) = &self.action_box {
            for (j, v) in y.iter_mut().enumerate() {
                let span = hi[j] - lo[j];
                let q = clamp((*v - v.lift(lo[j])) / v.lift(span), SQUASH_EPS, 1.0 - SQUASH_EPS);
                let r = v.lift(1.0) - q;
                logdet = logdet - v.lift(span.ln()) - q.ln() - r.ln();
                *v = q.ln() - r.ln();
            }
        }
        for layer in self.layers.iter().rev() {
            let mut x = y.clone();
            for (pos, (&dim, b)) in layer.order.iter().zip(&layer.blocks).enumerate() {
                let mut inputs = cond.to_vec();
                inputs.extend(layer.order[..pos].iter().map(|d| y[*d]));
                let out = self.conditioner(p, b, &inputs);
                let (v, ld) = self.element_inverse(layer.kind, y[dim], &out);
                x[dim] = v;
                logdet = logdet + ld;
            }
            y = x;
        }
        (y, logdet)
    }

    pub fn log_prob_with<T: Real>(&self, p: &[T], a: &[T], cond: &[T]) -> T {
        let (z, ld) = self.inverse_with(p, a, cond);
        std_normal_logpdf(&z) + ld
    }

    pub fn forward(&self, z: &[f64], cond: &[f64]) -> Vec<f64> {
        self.transform_with(&self.params, z, cond).0
    }

    pub fn inverse(&self, a: &[f64], cond: &[f64]) -> Vec<f64> {
        self.inverse_with(&self.params, a, cond).0
    }

    pub fn log_prob(&self, a: &[f64], cond: &[f64]) -> f64 {
        self.log_prob_with(&self.params, a, cond)
    }

    /// Draws an action and its log density.
    pub fn sample(&self, cond: &[f64], rng: &mut dyn RngCore) -> Result<(Vec<f64>, f64)> {
        let z: Vec<f64> = (0..self.action_dim).map(|_| StandardNormal.sample(rng)).collect();
        let (a, ld) = self.transform_with(&self.params, &z, cond);
        let lp = std_normal_logpdf(&z) - ld;
        if a.iter().any(|x| !x.is_finite()) || !lp.is_finite() {
            return Err(Error::Numerical(format!("flow produced {a:?} with log density {lp}")));
        }
        Ok((a, lp))
    }

    /// Monte Carlo `KL(flow || target)` and its gradient at fixed base
    /// draws `zs` (one vector per action dimension, all of length M).
    pub fn kl_loss_grad<D: LogDensity>(&self, target: &D, cond: &[f64], zs: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let p: Vec<Var> = self.params.iter().map(|x| tape.scalar(*x)).collect();
        let m = zs[0].len() as f64;
        let z: Vec<Var> = zs.iter().map(|v| tape.leaf(v.clone())).collect();
        let c: Vec<Var> = cond.iter().map(|x| tape.scalar(*x)).collect();
        let (a, ld) = self.transform_with(&p, &z, &c);
        let per = std_normal_logpdf(&z) - ld - target.log_density(&a);
        let loss = tape.sum(per) * tape.scalar(1.0 / m);
        let value = loss.value()[0];
        let g = tape.backward(loss);
        let grad: Vec<f64> = p.iter().map(|v| g.wrt(*v)[0]).collect();
        if !value.is_finite() || grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite flow KL loss {value}")));
        }
        Ok((value, grad))
    }

    /// One Adam step on the sample-mean KL. Returns the loss before the
    /// step; a non-finite loss leaves the parameters untouched.
    pub fn kl_step<D: LogDensity>(
        &mut self,
        target: &D,
        cond: &[f64],
        samples: usize,
        learning_rate: f64,
        rng: &mut dyn RngCore,
    ) -> Result<f64> {
        if samples == 0 {
            return Err(Error::Usage("kl step needs at least one sample".into()));
        }
        let zs: Vec<Vec<f64>> = (0..self.action_dim)
            .map(|_| (0..samples).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let (loss, grad) = self.kl_loss_grad(target, cond, &zs)?;
        self.adam_step(&grad, learning_rate);
        Ok(loss)
    }

    fn adam_step(&mut self, grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        let n = self.params.len();
        let st = &mut self.adam;
        if st.m.len() != n {
            st.m = vec![0.0; n];
            st.v = vec![0.0; n];
            st.t = 0;
        }
        st.t += 1;
        let c1 = 1.0 - B1.powi(st.t as i32);
        let c2 = 1.0 - B2.powi(st.t as i32);
        for i in 0..n {
            st.m[i] = B1 * st.m[i] + (1.0 - B1) * grad[i];
            st.v[i] = B2 * st.v[i] + (1.0 - B2) * grad[i] * grad[i];
            self.params[i] -= lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + 1e-8);
        }
    }

    /// Fits the flow to `density(cond, a)` on the action box by
    /// likelihood-weighted maximum likelihood over uniform box draws;
    /// conditions come from `conds`. Returns the final weighted NLL.
    pub fn pretrain(
        &mut self,
        steps: usize,
        batch: usize,
        learning_rate: f64,
        rng: &mut dyn RngCore,
        conds: &mut dyn FnMut(&mut dyn RngCore) -> Vec<f64>,
        density: &dyn Fn(&[f64], &[f64]) -> f64,
    ) -> Result<f64> {
        let (lo, hi) = self
            .action_box
            .clone()
            .ok_or_else(|| Error::Usage("pretraining needs an action box".into()))?;
        let mut last = f64::NAN;
        for _ in 0..steps {
            let mut cs: Vec<Vec<f64>> = vec![Vec::with_capacity(batch); self.cond_dim()];
            let mut acts: Vec<Vec<f64>> = vec![Vec::with_capacity(batch); self.action_dim];
            let mut w = Vec::with_capacity(batch);
            for _ in 0..batch {
                let c = conds(rng);
                let a: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| rng.random_range(*l..*h)).collect();
                w.push(density(&c, &a));
                c.iter().zip(cs.iter_mut()).for_each(|(x, col)| col.push(*x));
                a.iter().zip(acts.iter_mut()).for_each(|(x, col)| col.push(*x));
            }
            let total: f64 = w.iter().sum();
            if !(total > 0.0) {
                continue;
            }
            let tape = Tape::new();
            let p: Vec<Var> = self.params.iter().map(|x| tape.scalar(*x)).collect();
            let c: Vec<Var> = cs.into_iter().map(|v| tape.leaf(v)).collect();
            let a: Vec<Var> = acts.into_iter().map(|v| tape.leaf(v)).collect();
            let wv = tape.leaf(w.iter().map(|x| x / total).collect());
            let nll = -tape.sum(wv * self.log_prob_with(&p, &a, &c));
            last = nll.value()[0];
            let g = tape.backward(nll);
            let grad: Vec<f64> = p.iter().map(|v| g.wrt(*v)[0]).collect();
            if !last.is_finite() || grad.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical("non-finite pretraining loss".into()));
            }
            self.adam_step(&grad, learning_rate);
        }
        Ok(last)
    }

    /// Writes `condition,a0..,density` rows over the product of `axes`
    /// for each scaled condition.
    pub fn write_density_grid(&self, path: &Path, conds: &[Vec<f64>], axes: &[Vec<f64>]) -> Result<()> {
        if axes.len() != self.action_dim {
            return Err(Error::Usage("one grid axis per action dimension".into()));
        }
        let err = |e: csv::Error| Error::io(path, e.into());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let mut header = vec!["condition".to_string()];
        header.extend((0..self.action_dim).map(|j| format!("a{j}")));
        header.push("density".into());
        w.write_record(&header).map_err(err)?;
        let total: usize = axes.iter().map(Vec::len).product();
        for (ci, c) in conds.iter().enumerate() {
            for flat in 0..total {
                let mut rest = flat;
                let a: Vec<f64> = axes
                    .iter()
                    .map(|ax| {
                        let v = ax[rest % ax.len()];
                        rest /= ax.len();
                        v
                    })
                    .collect();
                let mut row = vec![ci.to_string()];
                row.extend(a.iter().map(|x| x.to_string()));
                row.push(self.log_prob(&a, c).exp().to_string());
                w.write_record(&row).map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Retargeting step around one sampled action.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSpec {
    pub anchor: Vec<f64>,
    pub cond: Vec<f64>,
    pub bump_std: Vec<f64>,
    /// Plug-in density the anchor should have.
    pub desired: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl TargetSpec {
    pub fn is_noop(&self) -> bool {
        self.beta == 0.0
    }
}

/// Peak density of an axis-aligned Gaussian with the given stds.
fn gaussian_peak(std: &[f64]) -> f64 {
    std.iter().map(|s| 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * s)).product()
}

/// Mixture weight for the bump: `(desired - current) / peak`, clipped to
/// `[0, beta_max]`. Shrinking targets give 0.
pub fn bump_weight(desired: f64, current: f64, bump_std: &[f64], beta_max: f64) -> f64 {
    let beta = (desired - current) / gaussian_peak(bump_std);
    if beta.is_finite() {
        beta.clamp(0.0, beta_max)
    } else if beta > 0.0 {
        beta_max
    } else {
        0.0
    }
}

/// Builds the bump target for one transition. `value_floor` guards the
/// division by `v(s)`.
#[allow(clippy::too_many_arguments)]
pub fn make_target(
    flow: &Flow,
    cond: &[f64],
    anchor: &[f64],
    gt_density: f64,
    reward: f64,
    value_next: f64,
    value_here: f64,
    bump_std: &[f64],
    beta_max: f64,
) -> TargetSpec {
    let desired = gt_density * (reward + value_next) / value_here;
    let current = flow.log_prob(anchor, cond).exp();
    let beta = bump_weight(desired, current, bump_std, beta_max);
    TargetSpec {
        anchor: anchor.to_vec(),
        cond: cond.to_vec(),
        bump_std: bump_std.to_vec(),
        desired,
        beta,
        gamma: 1.0 / (1.0 + beta),
    }
}

/// `gamma (pi_frozen + beta N(anchor, bump_std))`, with the flow frozen at
/// construction.
pub struct BumpTarget {
    frozen: Flow,
    spec: TargetSpec,
}

impl BumpTarget {
    pub fn new(flow: &Flow, spec: TargetSpec) -> Self {
        BumpTarget {
            frozen: flow.clone(),
            spec,
        }
    }
}

impl LogDensity for BumpTarget {
    fn log_density<T: Real>(&self, a: &[T]) -> T {
        let proto = a[0];
        let p = lift_all(proto, &self.frozen.params);
        let c = lift_all(proto, &self.spec.cond);
        let base = self.frozen.log_prob_with(&p, a, &c);
        let lg = proto.lift(self.spec.gamma.ln());
        if self.spec.beta == 0.0 {
            return lg + base;
        }
        let bump = a
            .iter()
            .zip(self.spec.anchor.iter().zip(&self.spec.bump_std))
            .fold(proto.lift(self.spec.beta.ln()), |s, (x, (m, sd))| {
                let u = (*x - proto.lift(*m)) * proto.lift(1.0 / sd);
                s - u * u * proto.lift(0.5) - proto.lift(sd.ln() + HALF_LN_2PI)
            });
        lg + log_addexp(base, bump)
    }
}

/// One-dimensional Gaussian mixture `(weight, mean, std)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture1d(pub Vec<(f64, f64, f64)>);

impl Mixture1d {
    pub fn density(&self, x: f64) -> f64 {
        self.0
            .iter()
            .map(|(w, m, s)| w * (-0.5 * ((x - m) / s).powi(2)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * s))
            .sum()
    }
}

impl LogDensity for Mixture1d {
    fn log_density<T: Real>(&self, a: &[T]) -> T {
        let x = a[0];
        let terms: Vec<T> = self
            .0
            .iter()
            .map(|(w, m, s)| {
                let u = (x - x.lift(*m)) * x.lift(1.0 / s);
                x.lift(w.ln() - s.ln() - HALF_LN_2PI) - u * u * x.lift(0.5)
            })
            .collect();
        terms[1..].iter().fold(terms[0], |acc, t| log_addexp(acc, *t))
    }
}

/// Dense rewards `gamma_r^(tau - n) r_terminal` for `n = 1..tau`.
pub fn dense_rewards(tau: usize, terminal_reward: f64, decay: f64) -> Vec<f64> {
    (1..=tau).map(|n| decay.powi((tau - n) as i32) * terminal_reward).collect()
}

/// Inputs the dense-reward update needs besides the flow and episode.
pub struct DenseUpdate<'a> {
    pub env: &'a dyn Environment,
    pub value: &'a dyn Fn(&State) -> f64,
    /// Lower bound applied to `v(s)` before dividing.
    pub value_floor: f64,
    pub bump_std: Vec<f64>,
    pub cfg: &'a FlowConfig,
}

/// Retargets the flow along a rare episode with dense rewards, then blends
/// `theta <- momentum theta' + (1 - momentum) theta`. Non-rare episodes
/// leave the flow alone. Returns the number of KL steps taken.
pub fn densify_and_train(
    flow: &mut Flow,
    episode: &[TransitionRecord],
    up: &DenseUpdate<'_>,
    rng: &mut dyn RngCore,
) -> Result<usize> {
    let Some(last) = episode.last() else { return Ok(0) };
    if !(last.reward > 0.0) {
        return Ok(0);
    }
    let start = flow.params.clone();
    let rewards = dense_rewards(episode.len(), last.reward, up.cfg.dense_decay);
    let mut steps = 0;
    for (rec, r) in episode.iter().zip(rewards) {
        let agent = rec.a_agent.to_vec();
        let cond = flow.embed(&agent, &rec.s);
        let anchor = rec.a_adv.to_vec();
        let gt = up.env.gt_density(&rec.s, &rec.a_agent, &rec.a_adv);
        let next = if rec.s_next.is_terminal() { 0.0 } else { (up.value)(&rec.s_next) };
        let here = (up.value)(&rec.s).max(up.value_floor);
        let spec = make_target(flow, &cond, &anchor, gt, r, next, here, &up.bump_std, up.cfg.beta_max);
        if spec.is_noop() {
            continue;
        }
        let target = BumpTarget::new(flow, spec);
        flow.kl_step(&target, &cond, up.cfg.samples, up.cfg.learning_rate, rng)?;
        steps += 1;
    }
    let m = up.cfg.momentum;
    let blended: Vec<f64> = flow.params.iter().zip(&start).map(|(new, old)| m * new + (1.0 - m) * old).collect();
    flow.set_params(blended)?;
    Ok(steps)
}

/// Online variant: one KL step toward the target built from a single
/// transition, using its own reward, then the momentum blend. Returns
/// whether a step was taken.
pub fn online_step(
    flow: &mut Flow,
    rec: &TransitionRecord,
    up: &DenseUpdate<'_>,
    rng: &mut dyn RngCore,
) -> Result<bool> {
    let cond = flow.embed(&rec.a_agent.to_vec(), &rec.s);
    let gt = up.env.gt_density(&rec.s, &rec.a_agent, &rec.a_adv);
    let next = if rec.s_next.is_terminal() { 0.0 } else { (up.value)(&rec.s_next) };
    let here = (up.value)(&rec.s).max(up.value_floor);
    let spec = make_target(flow, &cond, &rec.a_adv.to_vec(), gt, rec.reward, next, here, &up.bump_std, up.cfg.beta_max);
    if spec.is_noop() {
        return Ok(false);
    }
    let start = flow.params.clone();
    let target = BumpTarget::new(flow, spec);
    flow.kl_step(&target, &cond, up.cfg.samples, up.cfg.learning_rate, rng)?;
    let m = up.cfg.momentum;
    let blended: Vec<f64> = flow.params.iter().zip(&start).map(|(new, old)| m * new + (1.0 - m) * old).collect();
    flow.set_params(blended)?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn unbounded(dim: usize, cond: usize, cfg: &FlowConfig, seed: u64) -> Flow {
        Flow::new(dim, (vec![-1.0; cond], vec![1.0; cond]), None, cfg, &mut seeded_rng(seed)).unwrap()
    }

    #[test]
    fn identity_flow_is_standard_normal() {
        let f = unbounded(1, 2, &FlowConfig::default(), 0);
        assert!((f.log_prob(&[0.0], &[0.3, -0.2]) + HALF_LN_2PI).abs() < 1e-12);
        assert_eq!(f.forward(&[1.7], &[0.0, 0.0]), vec![1.7]);
    }

    #[test]
    fn perturbed_flow_round_trips() {
        let mut f = unbounded(2, 3, &FlowConfig::default(), 1);
        let mut rng = seeded_rng(2);
        let p: Vec<f64> = f.params().iter().map(|_| rng.random_range(-0.5..0.5)).collect();
        f.set_params(p).unwrap();
        for _ in 0..200 {
            let z: Vec<f64> = (0..2).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let back = f.inverse(&f.forward(&z, &c), &c);
            assert!(z.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-8), "{z:?} {back:?}");
        }
    }

    #[test]
    fn bump_weight_plug_in() {
        let beta = bump_weight(5.0, 0.5, &[0.05], 10.0);
        assert!((beta - 0.563_991_361_8).abs() < 1e-9, "{beta}");
        assert_eq!(bump_weight(0.5, 0.5, &[0.05], 10.0), 0.0);
        assert_eq!(bump_weight(0.1, 0.5, &[0.05], 10.0), 0.0);
        assert_eq!(bump_weight(1e9, 0.5, &[0.05], 10.0), 10.0);
    }

    #[test]
    fn dense_reward_plug_in() {
        assert_eq!(dense_rewards(3, 1.0, 0.5), vec![0.25, 0.5, 1.0]);
    }

    #[test]
    fn mixture_log_density_matches_direct_sum() {
        let m = Mixture1d(vec![(0.3, -1.0, 0.4), (0.7, 1.5, 0.6)]);
        for x in [-2.0, 0.0, 0.7, 3.0] {
            assert!((m.log_density(&[x]) - m.density(x).ln()).abs() < 1e-12);
        }
    }
}
