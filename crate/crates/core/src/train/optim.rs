use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::model::{Param, ParamKind};
use crate::tensor::{shape_err, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    Lamb,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Lamb => "lamb",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adamw" => Ok(OptimizerKind::AdamW),
            "lamb" => Ok(OptimizerKind::Lamb),
            other => Err(format!("unknown optimizer '{other}' (expected adamw or lamb)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub pos_lr_mult: f64,
    pub sig_lr_mult: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05, pos_lr_mult: 1.0, sig_lr_mult: 1.0 }
    }
}

impl OptimConfig {
    fn lr_mult(&self, kind: ParamKind) -> f64 {
        match kind {
            ParamKind::DclsPosition => self.pos_lr_mult,
            ParamKind::DclsSigma => self.sig_lr_mult,
            _ => 1.0,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new<T: Real>(params: &[Param<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

fn check<T: Real>(params: &[Param<T>], grads: &[Tensor<T>], state: &OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err("optimizer", format!("{} params, {} grads, {} states", params.len(), grads.len(), state.m.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(shape_err("optimizer", format!("'{}': grad {:?} vs param {:?}", p.name, g.shape(), p.value.shape())));
        }
    }
    Ok(())
}

/// Updates moments in place and returns the bias-corrected Adam direction
/// `m̂/(√v̂ + ε)` for one tensor.
fn adam_direction(m: &mut [f64], v: &mut [f64], g: &[f64], step: u64, cfg: &OptimConfig) -> Vec<f64> {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    m.iter_mut()
        .zip(v.iter_mut())
        .zip(g)
        .map(|((m, v), &g)| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps)
        })
        .collect()
}

fn clamp<T: Real>(p: &mut Param<T>) {
    if let Some(b) = p.bound {
        let (lo, hi) = (T::lit(-b), T::lit(b));
        for v in p.value.data_mut() {
            *v = v.max(lo).min(hi);
        }
    }
}

/// AdamW with decoupled decay `w ← w − lr·wd·w` on weight tensors only;
/// bounded parameters (DCLS positions) are clamped afterwards.
pub fn adamw_step<T: Real>(params: &mut [Param<T>], grads: &[Tensor<T>], state: &mut OptimState, lr: f64, cfg: &OptimConfig) -> Result<()> {
    check(params, grads, state)?;
    state.step += 1;
    for (i, p) in params.iter_mut().enumerate() {
        let lr_p = lr * cfg.lr_mult(p.kind);
        let g: Vec<f64> = grads[i].data().iter().map(|v| v.as_f64()).collect();
        let dir = adam_direction(&mut state.m[i], &mut state.v[i], &g, state.step, cfg);
        let decay = if p.kind.decays() { lr_p * cfg.weight_decay } else { 0.0 };
        for (w, d) in p.value.data_mut().iter_mut().zip(&dir) {
            let x = w.as_f64();
            *w = T::lit(x - decay * x - lr_p * d);
        }
        clamp(p);
    }
    Ok(())
}

/// LAMB: the Adam direction plus decay, rescaled per tensor by the trust
/// ratio `‖w‖/‖u‖` (1 when either norm is zero).
pub fn lamb_step<T: Real>(params: &mut [Param<T>], grads: &[Tensor<T>], state: &mut OptimState, lr: f64, cfg: &OptimConfig) -> Result<()> {
    check(params, grads, state)?;
    state.step += 1;
    for (i, p) in params.iter_mut().enumerate() {
        let lr_p = lr * cfg.lr_mult(p.kind);
        let g: Vec<f64> = grads[i].data().iter().map(|v| v.as_f64()).collect();
        let mut u = adam_direction(&mut state.m[i], &mut state.v[i], &g, state.step, cfg);
        let wd = if p.kind.decays() { cfg.weight_decay } else { 0.0 };
        let w: Vec<f64> = p.value.data().iter().map(|v| v.as_f64()).collect();
        for (u, &w) in u.iter_mut().zip(&w) {
            *u += wd * w;
        }
        let w_norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let u_norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ratio = if w_norm > 0.0 && u_norm > 0.0 { w_norm / u_norm } else { 1.0 };
        for ((dst, &w), &u) in p.value.data_mut().iter_mut().zip(&w).zip(&u) {
            *dst = T::lit(w - lr_p * ratio * u);
        }
        clamp(p);
    }
    Ok(())
}

pub fn optimizer_step<T: Real>(
    kind: OptimizerKind,
    params: &mut [Param<T>],
    grads: &[Tensor<T>],
    state: &mut OptimState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    match kind {
        OptimizerKind::AdamW => adamw_step(params, grads, state, lr, cfg),
        OptimizerKind::Lamb => lamb_step(params, grads, state, lr, cfg),
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then a half
/// cosine from `base_lr` to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    let progress = if span == 0 { 1.0 } else { ((step - warmup_steps) as f64 / span as f64).min(1.0) };
    (0.5 * base_lr * (1.0 + (PI * progress).cos())).max(0.0)
}
