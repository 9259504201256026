//! Gradient clipping and parameter updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradSet, ParamSet};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    Adam,
}

/// Update rule and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        for (name, v) in [("momentum", self.momentum), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Moment buffers, flattened in the parameter set's visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    steps: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimState {
    pub fn new<P: ParamSet>(params: &P) -> Self {
        let n = params.param_count();
        OptimState {
            steps: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Scales `g` in place so its global L2 norm is at most `threshold`.
/// Returns the norm before clipping.
pub fn clip_in_place<P: ParamSet>(g: &mut GradSet<P>, threshold: f64) -> f64 {
    let norm = g.global_norm();
    if norm > threshold {
        g.scale(threshold / norm);
    }
    norm
}

pub fn clip_global<P: ParamSet>(mut g: GradSet<P>, threshold: f64) -> GradSet<P> {
    clip_in_place(&mut g, threshold);
    g
}

/// One update of `params` along `g`. Each stored array is visited once, so
/// a matrix shared between modalities moves exactly once per call.
pub fn step<P: ParamSet>(params: &mut P, g: &GradSet<P>, cfg: &OptimConfig, state: &mut OptimState) -> Result<()> {
    if !g.is_congruent(params) {
        return Err(Error::shape(
            "optimizer step",
            format!("{} parameters", params.param_count()),
            format!("{} gradient entries", g.inner().param_count()),
        ));
    }
    if state.m.len() != params.param_count() {
        return Err(Error::shape(
            "optimizer step",
            format!("{} parameters", params.param_count()),
            format!("{} state entries", state.m.len()),
        ));
    }
    state.steps += 1;
    let grads = g.inner().tensors();
    let mut offset = 0;
    match cfg.kind {
        OptimizerKind::SgdMomentum => {
            for (w, gt) in params.tensors_mut().into_iter().zip(&grads) {
                let m = &mut state.m[offset..offset + w.len()];
                for ((w, m), g) in w.iter_mut().zip(m).zip(gt.data) {
                    *m = cfg.momentum * *m + g;
                    *w -= cfg.lr * *m;
                }
                offset += gt.data.len();
            }
        }
        OptimizerKind::Adam => {
            let t = state.steps as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            for (w, gt) in params.tensors_mut().into_iter().zip(&grads) {
                let n = w.len();
                let m = &mut state.m[offset..offset + n];
                let v = &mut state.v[offset..offset + n];
                for (((w, m), v), g) in w.iter_mut().zip(m).zip(v).zip(gt.data) {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *w -= cfg.lr * mh / (vh.sqrt() + cfg.epsilon);
                }
                offset += n;
            }
        }
    }
    Ok(())
}
