//! Adam with global-norm clipping and an inverse-square-root schedule with
//! linear warmup.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensors, write_tensors, ParamGrads, ParamSet, Tensor};

/// `base_lr * step / W` up to `W`, then `base_lr * sqrt(W / step)`.
pub fn lr_at(step: u64, base_lr: f64, warmup: u64) -> f64 {
    if step == 0 {
        return 0.0;
    }
    if warmup == 0 {
        return base_lr;
    }
    let (s, w) = (step as f64, warmup as f64);
    if step <= warmup {
        base_lr * s / w
    } else {
        base_lr * (w / s).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 0.01,
            warmup: 500,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && self.base_lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip.map_or(true, |c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Adam moments for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Result<Self> {
        cfg.validate()?;
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Ok(Adam {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Completed updates.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update; parameters without a gradient are skipped.
    pub fn step(&mut self, params: &mut ParamSet, mut grads: ParamGrads) -> Result<StepReport> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Contract("optimizer state does not match the parameter set".into()));
        }
        let norm = grads.norm();
        if !norm.is_finite() {
            return Err(Error::Numeric { op: "adam_step" });
        }
        let clipped = matches!(self.cfg.clip, Some(c) if norm > c);
        if let (true, Some(c)) = (clipped, self.cfg.clip) {
            grads.scale(c / norm);
        }
        self.step += 1;
        let lr = lr_at(self.step, self.cfg.base_lr, self.cfg.warmup);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, (_, t)) in params.iter_mut().enumerate() {
            let Some(g) = grads.get(crate::tensor::ParamId(i)) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
        Ok(StepReport {
            step: self.step,
            lr,
            grad_norm: norm,
            clipped,
        })
    }

    /// Writes moments and the step counter for exact resumption.
    pub fn save<W: Write>(&self, w: &mut W, params: &ParamSet) -> Result<()> {
        let mut state = ParamSet::new();
        state.insert("step", Tensor::scalar(self.step as f64))?;
        for (i, (name, t)) in params.iter().enumerate() {
            state.insert(format!("m.{name}"), Tensor::new(t.shape().to_vec(), self.m[i].clone())?)?;
            state.insert(format!("v.{name}"), Tensor::new(t.shape().to_vec(), self.v[i].clone())?)?;
        }
        write_tensors(w, &state)
    }

    pub fn load<R: Read>(r: &mut R, cfg: AdamConfig, params: &ParamSet) -> Result<Self> {
        let state = read_tensors(r)?;
        let missing = |k: &str| Error::Format(format!("optimizer state lacks `{k}`"));
        let step = state.by_name("step").ok_or_else(|| missing("step"))?.data()[0] as u64;
        let mut opt = Adam::new(cfg, params)?;
        opt.step = step;
        for (i, (name, t)) in params.iter().enumerate() {
            for (prefix, dst) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                let key = format!("{prefix}.{name}");
                let src = state.by_name(&key).ok_or_else(|| missing(&key))?;
                if src.shape() != t.shape() {
                    return Err(Error::Format(format!("optimizer state `{key}` has the wrong shape")));
                }
                dst.copy_from_slice(src.data());
            }
        }
        Ok(opt)
    }
}
