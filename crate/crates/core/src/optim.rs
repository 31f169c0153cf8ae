//! Hypersphere-constrained AdamW and the warmup/constant/cooldown schedule.
//!
//! Norm-preserving parameters are updated as Riemannian Adam on the product
//! of row spheres: the Euclidean gradient of each row is projected onto the
//! tangent space at that row, Adam moments are built from the projected
//! gradient, the preconditioned step is taken in ambient space and the row is
//! renormalized. Standard parameters take the same Adam step without the
//! projection and renormalization. There is no weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{project_in_place, retract_in_place, UNIT_TOL_INPUT};
use crate::numcore::{norm, Matrix};

/// Rows drifting further than this from unit norm are an error rather than
/// being silently re-retracted.
pub const MAX_SILENT_DRIFT: f64 = 1e-6;

/// Name fragments that keep a 2D linear weight unconstrained.
pub const UNCONSTRAINED_PATTERNS: [&str; 3] = ["final_proj", "modulation.2", "dconv.weight"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    NormPreserving,
    Standard,
}

pub fn classify_param(name: &str, n_dims: usize, owner_is_linear: bool) -> ParamKind {
    debug_assert!(!name.is_empty());
    if n_dims == 2 && owner_is_linear && !UNCONSTRAINED_PATTERNS.iter().any(|p| name.contains(p)) {
        ParamKind::NormPreserving
    } else {
        ParamKind::Standard
    }
}

/// A named trainable tensor together with its Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Matrix,
    pub kind: ParamKind,
    /// Peak learning rate for this tensor; the schedule scales it over time.
    pub lr_multiplier: f64,
    pub m: Matrix,
    pub v: Matrix,
    /// Number of Adam steps taken, used for bias correction.
    pub step: u64,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Matrix, kind: ParamKind) -> Self {
        let (r, c) = value.shape();
        Self {
            name: name.into(),
            value,
            kind,
            lr_multiplier: 1.0,
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
            step: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok =
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "Adam needs 0 <= beta1, beta2 < 1 and eps > 0, got {self:?}"
            )))
        }
    }
}

/// One Adam step on `p`.
///
/// On any error `p` is left untouched. A learning rate of zero still advances
/// the moments and the step counter.
pub fn adam_step(p: &mut ParamTensor, grad: &Matrix, lr: f64, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::contract(format!(
            "learning rate must be finite and >= 0, got {lr}"
        )));
    }
    let (rows, cols) = p.shape();
    grad.expect_shape(rows, cols, &format!("gradient of `{}`", p.name))?;
    if let Some(index) = grad.as_slice().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            param: p.name.clone(),
            index,
        });
    }

    let mut value = p.value.clone();
    let mut g = grad.clone();
    if p.kind == ParamKind::NormPreserving {
        for i in 0..rows {
            let n = norm(value.row(i));
            let drift = (n - 1.0).abs();
            if !(drift <= MAX_SILENT_DRIFT) {
                return Err(Error::contract(format!(
                    "`{}` row {i} has norm {n}; drift beyond {MAX_SILENT_DRIFT}",
                    p.name
                )));
            }
            if drift > UNIT_TOL_INPUT {
                retract_in_place(value.row_mut(i), &format!("{} row {i}", p.name))?;
            }
            project_in_place(value.row(i), g.row_mut(i));
        }
    }

    let t = p.step + 1;
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    let mut m = p.m.clone();
    let mut v = p.v.clone();
    for (((w, gi), mi), vi) in value
        .as_mut_slice()
        .iter_mut()
        .zip(g.as_slice())
        .zip(m.as_mut_slice())
        .zip(v.as_mut_slice())
    {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    if p.kind == ParamKind::NormPreserving {
        for i in 0..rows {
            retract_in_place(value.row_mut(i), &format!("{} row {i}", p.name))?;
        }
    }

    p.value = value;
    p.m = m;
    p.v = v;
    p.step = t;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    #[serde(default = "default_cooldown_fraction")]
    pub cooldown_start_fraction: f64,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
}

fn default_cooldown_fraction() -> f64 {
    0.98
}

fn default_base_lr() -> f64 {
    0.01
}

impl ScheduleConfig {
    pub fn new(total_steps: usize, warmup_steps: usize) -> Self {
        Self {
            total_steps,
            warmup_steps,
            cooldown_start_fraction: default_cooldown_fraction(),
            base_lr: default_base_lr(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cooldown_start_fraction > 0.0 && self.cooldown_start_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "cooldown_start_fraction must be in (0, 1], got {}",
                self.cooldown_start_fraction
            )));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base_lr must be > 0, got {}",
                self.base_lr
            )));
        }
        Ok(())
    }

    pub fn cooldown_start(&self) -> f64 {
        self.cooldown_start_fraction * self.total_steps as f64
    }
}

/// Linear warmup to `base_lr`, constant, then linear decay to 0 at `total_steps`.
///
/// Where warmup and cooldown overlap the smaller of the two ramps applies.
/// Steps past `total_steps` get 0.
pub fn lr_at(step: usize, sched: &ScheduleConfig) -> f64 {
    let base = sched.base_lr;
    if step >= sched.total_steps {
        return 0.0;
    }
    let s = step as f64;
    let mut lr = base;
    if sched.warmup_steps > 0 && step < sched.warmup_steps {
        lr = lr.min(base * s / sched.warmup_steps as f64);
    }
    let start = sched.cooldown_start();
    let total = sched.total_steps as f64;
    if s >= start && total > start {
        lr = lr.min(base * (total - s) / (total - start));
    }
    lr
}
