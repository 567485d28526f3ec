use std::f64::consts::PI;

use crate::config::OptimizerKind;
use crate::nets::{Param, StoredTensor};

use super::TrainError;

const LARS_EPS: f64 = 1e-9;

fn check_finite(p: &Param) -> Result<(), TrainError> {
    if p.grad.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(TrainError::NonFiniteGradient(p.name.clone()))
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Layer-wise adaptive rate scaling on top of momentum SGD.
///
/// Per tensor: `local = trust * |theta| / (|g| + wd * |theta| + eps)` when
/// both norms are positive, else 1; then
/// `v <- m v + lr * local * (g + wd theta)` and `theta <- theta - v`.
pub fn lars_step(
    params: &mut [&mut Param],
    velocity: &mut [Vec<f32>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    trust_coefficient: f64,
) -> Result<(), TrainError> {
    for (p, v) in params.iter_mut().zip(velocity.iter_mut()) {
        check_finite(p)?;
        let wn = norm(&p.value);
        let gn = norm(&p.grad);
        let local = if wn > 0.0 && gn > 0.0 {
            trust_coefficient * wn / (gn + weight_decay * wn + LARS_EPS)
        } else {
            1.0
        };
        let scale = lr * local;
        for ((w, &g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
            let d = g as f64 + weight_decay * *w as f64;
            *vel = (momentum * *vel as f64 + scale * d) as f32;
            *w -= *vel;
        }
    }
    Ok(())
}

/// Momentum SGD with L2 weight decay.
pub fn sgd_step(
    params: &mut [&mut Param],
    velocity: &mut [Vec<f32>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    for (p, v) in params.iter_mut().zip(velocity.iter_mut()) {
        check_finite(p)?;
        for ((w, &g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
            let d = g as f64 + weight_decay * *w as f64;
            *vel = (momentum * *vel as f64 + d) as f32;
            *w -= (lr * *vel as f64) as f32;
        }
    }
    Ok(())
}

/// Adam with bias correction; `t` is the 1-based step count.
pub fn adam_step(
    params: &mut [&mut Param],
    m: &mut [Vec<f32>],
    v: &mut [Vec<f32>],
    t: u64,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let c1 = 1.0 - B1.powi(t as i32);
    let c2 = 1.0 - B2.powi(t as i32);
    for ((p, m), v) in params.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
        check_finite(p)?;
        for (((w, &g), mi), vi) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g as f64 + weight_decay * *w as f64;
            let mn = B1 * *mi as f64 + (1.0 - B1) * g;
            let vn = B2 * *vi as f64 + (1.0 - B2) * g * g;
            *mi = mn as f32;
            *vi = vn as f32;
            *w -= (lr * (mn / c1) / ((vn / c2).sqrt() + EPS)) as f32;
        }
    }
    Ok(())
}

/// Stateful wrapper dispatching to one of the update rules. Only trainable
/// parameters are passed in; state is indexed by position.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64, trust_coefficient: f64) -> Self {
        Self {
            kind,
            momentum,
            weight_decay,
            trust_coefficient,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn ensure_state(&mut self, params: &[&mut Param]) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
    }

    /// Applies one update to the trainable entries of `params`.
    pub fn step(&mut self, params: Vec<&mut Param>, lr: f64) -> Result<(), TrainError> {
        let mut params: Vec<&mut Param> = params.into_iter().filter(|p| p.trainable).collect();
        self.ensure_state(&params);
        self.t += 1;
        match self.kind {
            OptimizerKind::Lars => lars_step(
                &mut params,
                &mut self.m,
                lr,
                self.momentum,
                self.weight_decay,
                self.trust_coefficient,
            ),
            OptimizerKind::Sgd => sgd_step(&mut params, &mut self.m, lr, self.momentum, self.weight_decay),
            OptimizerKind::Adam => adam_step(&mut params, &mut self.m, &mut self.v, self.t, lr, self.weight_decay),
        }
    }

    /// Moment buffers for checkpointing, named after their parameters.
    pub fn state_tensors(&self, params: &[&Param]) -> Vec<StoredTensor> {
        let trainable: Vec<&&Param> = params.iter().filter(|p| p.trainable).collect();
        let mut out = Vec::new();
        for (i, p) in trainable.iter().enumerate() {
            if let Some(m) = self.m.get(i) {
                out.push(StoredTensor {
                    name: format!("m/{}", p.name),
                    shape: p.shape.clone(),
                    values: m.clone(),
                });
                out.push(StoredTensor {
                    name: format!("v/{}", p.name),
                    shape: p.shape.clone(),
                    values: self.v[i].clone(),
                });
            }
        }
        out
    }

    pub fn load_state(&mut self, params: &[&Param], stored: &[StoredTensor], t: u64) -> Result<(), TrainError> {
        let trainable: Vec<&&Param> = params.iter().filter(|p| p.trainable).collect();
        self.t = t;
        if stored.is_empty() {
            self.m.clear();
            self.v.clear();
            return Ok(());
        }
        if stored.len() != 2 * trainable.len() {
            return Err(TrainError::Invalid("optimizer state does not match parameters".into()));
        }
        self.m = Vec::with_capacity(trainable.len());
        self.v = Vec::with_capacity(trainable.len());
        for (p, pair) in trainable.iter().zip(stored.chunks(2)) {
            if pair[0].name != format!("m/{}", p.name) || pair[0].values.len() != p.len() {
                return Err(TrainError::Invalid(format!("optimizer state mismatch at {}", p.name)));
            }
            self.m.push(pair[0].values.clone());
            self.v.push(pair[1].values.clone());
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Warmup is capped at a tenth of the run so short runs still decay.
    pub fn new(base: f64, warmup_epochs: usize, epochs: usize, steps_per_epoch: usize) -> Self {
        let total_steps = epochs * steps_per_epoch;
        Self {
            base,
            warmup_steps: (warmup_epochs * steps_per_epoch).min(total_steps / 10),
            total_steps,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        self.base * 0.5 * (1.0 + (PI * progress.min(1.0)).cos())
    }
}
