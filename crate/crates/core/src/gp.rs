//! Gaussian-process value model trained online on TD targets.
//!
//! Kernel: `k(x, x') = w^2 exp(-1/2 sum_j w_j (x_j - x'_j)^2)` with `w_j`
//! the inverse lengthscales. Parameters live in log space. The Cholesky
//! factor of `K + sigma^2 I` is kept current: appends and evictions are
//! O(m^2) updates, parameter steps refactor from scratch.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::{State, TransitionRecord};
use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-4;
/// Predictive variances down to this far below zero are rounding noise.
pub const VARIANCE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams {
    log_scale: f64,
    log_inv_len: Vec<f64>,
    log_noise: f64,
}

impl KernelParams {
    pub fn new(scale: f64, inv_len: &[f64], noise: f64) -> Result<Self> {
        let ok = |x: f64| x > 0.0 && x.is_finite();
        if !ok(scale) || !ok(noise) || inv_len.is_empty() || !inv_len.iter().all(|w| ok(*w)) {
            return Err(Error::Usage(format!(
                "kernel parameters must be positive: scale {scale}, inverse lengthscales {inv_len:?}, noise {noise}"
            )));
        }
        Ok(KernelParams {
            log_scale: scale.ln(),
            log_inv_len: inv_len.iter().map(|w| w.ln()).collect(),
            log_noise: noise.ln(),
        })
    }

    pub fn dim(&self) -> usize {
        self.log_inv_len.len()
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn inv_lengthscales(&self) -> Vec<f64> {
        self.log_inv_len.iter().map(|l| l.exp()).collect()
    }

    pub fn noise(&self) -> f64 {
        self.log_noise.exp()
    }

    /// `[ln w, ln w_1 .. ln w_d, ln sigma]`.
    pub fn to_log_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim() + 2);
        v.push(self.log_scale);
        v.extend_from_slice(&self.log_inv_len);
        v.push(self.log_noise);
        v
    }

    pub fn from_log_vec(v: &[f64]) -> Result<Self> {
        if v.len() < 3 || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("bad log-parameter vector {v:?}")));
        }
        Ok(KernelParams {
            log_scale: v[0],
            log_inv_len: v[1..v.len() - 1].to_vec(),
            log_noise: v[v.len() - 1],
        })
    }

    pub fn kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), y.len());
        let q: f64 = self
            .log_inv_len
            .iter()
            .zip(x.iter().zip(y))
            .map(|(l, (a, b))| l.exp() * (a - b) * (a - b))
            .sum();
        (2.0 * self.log_scale - 0.5 * q).exp()
    }
}

/// Convenience wrapper over [`KernelParams::kernel`].
pub fn kernel(params: &KernelParams, x: &[f64], y: &[f64]) -> f64 {
    params.kernel(x, y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub output_scale: f64,
    /// Initial inverse lengthscale, shared by every state dimension.
    pub inv_lengthscale: f64,
    pub noise: f64,
    pub l1: f64,
    pub learning_rate: f64,
    pub capacity: usize,
    /// Appends stop once the buffer is full and the anchor estimate moved
    /// less than `early_stop_tol` (relative) over this many appends.
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            output_scale: 0.5,
            inv_lengthscale: 1.0,
            noise: 0.1,
            l1: 1e-3,
            learning_rate: 0.05,
            capacity: 1024,
            early_stop_window: 100,
            early_stop_tol: 0.005,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l1 >= 0.0) || !(self.learning_rate >= 0.0) || self.capacity < 2 {
            return Err(Error::Usage(format!(
                "gp needs l1 >= 0, learning_rate >= 0, capacity >= 2: {self:?}"
            )));
        }
        if self.early_stop_window == 0 || !(self.early_stop_tol >= 0.0) {
            return Err(Error::Usage("gp early stop needs a positive window".into()));
        }
        KernelParams::new(self.output_scale, &[self.inv_lengthscale], self.noise).map(|_| ())
    }

    pub fn params(&self, dim: usize) -> Result<KernelParams> {
        KernelParams::new(self.output_scale, &vec![self.inv_lengthscale; dim], self.noise)
    }
}

/// Lower Cholesky factor of `K + (sigma^2 + jitter) I` and `alpha = K^-1 y`.
#[derive(Clone, Debug)]
struct Factor {
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
}

#[derive(Clone, Debug)]
pub struct GpValueModel {
    params: KernelParams,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    capacity: usize,
    factor: Option<Factor>,
    appending: bool,
    anchor: Option<Vec<f64>>,
    recent: VecDeque<f64>,
    early_stop_window: usize,
    early_stop_tol: f64,
    skipped_appends: u64,
}

impl GpValueModel {
    pub fn new(params: KernelParams, capacity: usize) -> Self {
        GpValueModel {
            params,
            inputs: Vec::new(),
            targets: Vec::new(),
            capacity: capacity.max(1),
            factor: None,
            appending: true,
            anchor: None,
            recent: VecDeque::new(),
            early_stop_window: 100,
            early_stop_tol: 0.005,
            skipped_appends: 0,
        }
    }

    pub fn from_config(cfg: &GpConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut m = GpValueModel::new(cfg.params(dim)?, cfg.capacity);
        m.early_stop_window = cfg.early_stop_window;
        m.early_stop_tol = cfg.early_stop_tol;
        Ok(m)
    }

    /// Model over raw regression data: targets are stored unclamped and
    /// the early-stop rule is off.
    pub fn from_data(params: KernelParams, inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        if inputs.len() != targets.len() || inputs.iter().any(|x| x.len() != params.dim()) {
            return Err(Error::Usage("inputs and targets do not line up".into()));
        }
        let mut m = GpValueModel::new(params, inputs.len().max(1));
        m.inputs = inputs;
        m.targets = targets;
        m.refactor()?;
        Ok(m)
    }

    /// Enables the early-stop rule, tracking the estimate at `s`.
    pub fn with_anchor(mut self, s: &[f64]) -> Self {
        self.anchor = Some(s.to_vec());
        self
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn appending(&self) -> bool {
        self.appending
    }

    pub fn skipped_appends(&self) -> u64 {
        self.skipped_appends
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn jitter(&self) -> f64 {
        self.factor.as_ref().map_or(0.0, |f| f.jitter)
    }

    /// Replaces the kernel parameters and refactors.
    pub fn set_params(&mut self, params: KernelParams) -> Result<()> {
        if params.dim() != self.params.dim() {
            return Err(Error::Usage(format!(
                "parameter dimension {} does not match {}",
                params.dim(),
                self.params.dim()
            )));
        }
        let old = std::mem::replace(&mut self.params, params);
        if let Err(e) = self.refactor() {
            self.params = old;
            self.refactor()?;
            return Err(e);
        }
        Ok(())
    }

    /// Posterior mean at `x`, clamped to `[0, 1]`. The prior mean is 0.
    pub fn predict_mean(&self, x: &[f64]) -> f64 {
        match &self.factor {
            None => 0.0,
            Some(f) => {
                let m: f64 = self
                    .inputs
                    .iter()
                    .zip(f.alpha.iter())
                    .map(|(xi, a)| self.params.kernel(x, xi) * a)
                    .sum();
                m.clamp(0.0, 1.0)
            }
        }
    }

    /// Posterior mean (clamped to `[0, 1]`) and variance (floored at 0).
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let prior = self.params.kernel(x, x);
        match &self.factor {
            None => (0.0, prior),
            Some(f) => {
                let k = DVector::from_iterator(self.len(), self.inputs.iter().map(|xi| self.params.kernel(x, xi)));
                let mean = k.dot(&f.alpha).clamp(0.0, 1.0);
                let v = f.chol.solve_lower_triangular(&k).expect("factor has a positive diagonal");
                let var = prior - v.norm_squared();
                debug_assert!(var >= -VARIANCE_TOLERANCE * prior.max(1.0));
                (mean, var.max(0.0))
            }
        }
    }

    pub fn value(&self, s: &State) -> f64 {
        if s.is_terminal() {
            0.0
        } else {
            self.predict_mean(&s.coords)
        }
    }

    /// `(r + v(s')) rho` with terminal successors reading 0. Not clamped.
    pub fn td_target(&self, rec: &TransitionRecord) -> f64 {
        let tail = if rec.done { 0.0 } else { self.value(&rec.s_next) };
        (rec.reward + tail) * rec.rho
    }

    /// Stores `(x, target)` with negative targets raised to 0. Targets above
    /// 1 are kept: weighted returns exceed 1 and clipping them biases the
    /// mean down. Returns
    /// `false` (and counts a skip) once appends are disabled.
    pub fn append(&mut self, x: &[f64], target: f64) -> Result<bool> {
        if !self.appending {
            self.skipped_appends += 1;
            return Ok(false);
        }
        if x.len() != self.params.dim() {
            return Err(Error::Usage(format!("input dimension {} != {}", x.len(), self.params.dim())));
        }
        if !target.is_finite() || x.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gp pair ({x:?}, {target})")));
        }
        if self.len() >= self.capacity {
            self.remove(0)?;
        }
        self.push(x.to_vec(), target.max(0.0))?;
        self.check_early_stop();
        Ok(true)
    }

    fn check_early_stop(&mut self) {
        let Some(anchor) = &self.anchor else { return };
        if self.len() < self.capacity {
            self.recent.clear();
            return;
        }
        let est = self.predict_mean(anchor);
        self.recent.push_back(est);
        if self.recent.len() > self.early_stop_window {
            self.recent.pop_front();
        }
        if self.recent.len() == self.early_stop_window && est > 0.0 {
            let (lo, hi) = self
                .recent
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
            if hi - lo < self.early_stop_tol * est {
                self.appending = false;
            }
        }
    }

    fn push(&mut self, x: Vec<f64>, y: f64) -> Result<()> {
        let extended = match &self.factor {
            Some(f) => {
                let n = self.len();
                let k = DVector::from_iterator(n, self.inputs.iter().map(|xi| self.params.kernel(&x, xi)));
                let l = f.chol.solve_lower_triangular(&k).expect("positive diagonal");
                let d2 = self.params.kernel(&x, &x) + self.params.noise().powi(2) + f.jitter - l.norm_squared();
                if d2 > 0.0 && d2.is_finite() {
                    let mut chol = f.chol.clone().insert_row(n, 0.0).insert_column(n, 0.0);
                    chol.view_mut((n, 0), (1, n)).copy_from(&l.transpose());
                    chol[(n, n)] = d2.sqrt();
                    Some((chol, f.jitter))
                } else {
                    None
                }
            }
            None => None,
        };
        self.inputs.push(x);
        self.targets.push(y);
        match extended {
            Some((chol, jitter)) => {
                self.factor = Some(solve_alpha(chol, jitter, &self.targets));
                Ok(())
            }
            None => self.refactor_or_rollback(),
        }
    }

    fn refactor_or_rollback(&mut self) -> Result<()> {
        if let Err(e) = self.refactor() {
            self.inputs.pop();
            self.targets.pop();
            self.refactor()?;
            return Err(e);
        }
        Ok(())
    }

    fn remove(&mut self, i: usize) -> Result<()> {
        self.inputs.remove(i);
        self.targets.remove(i);
        let Some(f) = self.factor.take() else { return Ok(()) };
        if self.is_empty() {
            return Ok(());
        }
        let n = f.chol.nrows();
        let below: Vec<f64> = (i + 1..n).map(|r| f.chol[(r, i)]).collect();
        let mut chol = f.chol.remove_row(i).remove_column(i);
        if cholesky_rank_one_update(&mut chol, i, below) {
            self.factor = Some(solve_alpha(chol, f.jitter, &self.targets));
            Ok(())
        } else {
            self.refactor()
        }
    }

    /// Full factorization with escalating jitter.
    pub fn refactor(&mut self) -> Result<()> {
        if self.is_empty() {
            self.factor = None;
            return Ok(());
        }
        let base = self.gram_with_noise();
        let mut jitter = 0.0;
        loop {
            let mut k = base.clone();
            for i in 0..k.nrows() {
                k[(i, i)] += jitter;
            }
            if let Some(c) = k.cholesky() {
                self.factor = Some(solve_alpha(c.unpack(), jitter, &self.targets));
                return Ok(());
            }
            jitter = if jitter == 0.0 { JITTER_START } else { jitter * 2.0 };
            if jitter > JITTER_MAX {
                self.factor = None;
                return Err(Error::IllConditioned { jitter: JITTER_MAX });
            }
        }
    }

    fn gram_with_noise(&self) -> DMatrix<f64> {
        let n = self.len();
        let s2 = self.params.noise().powi(2);
        DMatrix::from_fn(n, n, |i, j| {
            self.params.kernel(&self.inputs[i], &self.inputs[j]) + if i == j { s2 } else { 0.0 }
        })
    }

    /// Penalized NLL per data point: `NLL / m + l1 sum_j w_j`.
    pub fn penalized_nll(&self, l1: f64) -> Result<f64> {
        let f = self.factor.as_ref().ok_or_else(|| Error::Usage("nll needs data".into()))?;
        let m = self.len() as f64;
        let y = DVector::from_column_slice(&self.targets);
        let logdet: f64 = (0..f.chol.nrows()).map(|i| f.chol[(i, i)].ln()).sum();
        let nll = 0.5 * y.dot(&f.alpha) + logdet + 0.5 * m * (2.0 * std::f64::consts::PI).ln();
        Ok(nll / m + l1 * self.params.inv_lengthscales().iter().sum::<f64>())
    }

    /// Gradient of [`penalized_nll`](Self::penalized_nll) with respect to
    /// the log-parameter vector.
    pub fn nll_gradient(&self, l1: f64) -> Result<Vec<f64>> {
        let f = self.factor.as_ref().ok_or_else(|| Error::Usage("nll needs data".into()))?;
        let n = self.len();
        let linv = f
            .chol
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::Numerical("singular factor".into()))?;
        // W = K^-1 - alpha alpha^T; dNLL = 1/2 tr(W dK)
        let w = linv.transpose() * &linv - &f.alpha * f.alpha.transpose();
        let inv_len = self.params.inv_lengthscales();
        let d = inv_len.len();
        let mut grad = vec![0.0; d + 2];
        for i in 0..n {
            for j in 0..n {
                let kf = self.params.kernel(&self.inputs[i], &self.inputs[j]);
                let wk = w[(i, j)] * kf;
                grad[0] += wk * 2.0;
                for (g, (dim, wl)) in grad[1..=d].iter_mut().zip(inv_len.iter().enumerate()) {
                    let diff = self.inputs[i][dim] - self.inputs[j][dim];
                    *g += wk * (-0.5 * wl * diff * diff);
                }
            }
        }
        grad[d + 1] = 2.0 * self.params.noise().powi(2) * w.diagonal().sum();
        let m = n as f64;
        for g in grad.iter_mut() {
            *g *= 0.5 / m;
        }
        for (g, wl) in grad[1..=d].iter_mut().zip(&inv_len) {
            *g += l1 * wl;
        }
        Ok(grad)
    }

    /// One gradient-descent step in log space. Needs at least two pairs.
    pub fn nll_step(&mut self, learning_rate: f64, l1: f64) -> Result<KernelParams> {
        if self.len() < 2 {
            return Err(Error::Usage(format!("nll step needs >= 2 pairs, have {}", self.len())));
        }
        let grad = self.nll_gradient(l1)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite nll gradient".into()));
        }
        if learning_rate == 0.0 {
            return Ok(self.params.clone());
        }
        let next: Vec<f64> = self
            .params
            .to_log_vec()
            .iter()
            .zip(&grad)
            .map(|(p, g)| p - learning_rate * g)
            .collect();
        self.set_params(KernelParams::from_log_vec(&next)?)?;
        Ok(self.params.clone())
    }

    /// Buffer snapshot: one row per pair, state coordinates then target.
    pub fn write_buffer_csv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let mut header: Vec<String> = (0..self.params.dim()).map(|i| format!("x{i}")).collect();
        header.push("target".into());
        w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            let row: Vec<String> = x.iter().chain(std::iter::once(y)).map(|v| v.to_string()).collect();
            w.write_record(&row).map_err(|e| Error::io(path, e.into()))?;
        }
        w.flush().map_err(io)
    }
}

fn solve_alpha(chol: DMatrix<f64>, jitter: f64, y: &[f64]) -> Factor {
    let y = DVector::from_column_slice(y);
    let z = chol.solve_lower_triangular(&y).expect("positive diagonal");
    let alpha = chol.tr_solve_lower_triangular(&z).expect("positive diagonal");
    Factor { chol, alpha, jitter }
}

/// In place: the trailing block of `l` starting at `from` becomes the
/// factor of `L L^T + x x^T`. Returns false on breakdown.
fn cholesky_rank_one_update(l: &mut DMatrix<f64>, from: usize, mut x: Vec<f64>) -> bool {
    let n = l.nrows();
    for k in 0..n - from {
        let kk = from + k;
        let lkk = l[(kk, kk)];
        let r = lkk.hypot(x[k]);
        if !(r > 0.0) || !r.is_finite() {
            return false;
        }
        let c = r / lkk;
        let s = x[k] / lkk;
        l[(kk, kk)] = r;
        for i in k + 1..n - from {
            let ii = from + i;
            l[(ii, kk)] = (l[(ii, kk)] + s * x[i]) / c;
            x[i] = c * x[i] - s * l[(ii, kk)];
        }
    }
    true
}
