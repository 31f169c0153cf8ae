//! In-memory training loop for the toy network under the sphere-constrained
//! optimizer and μP learning-rate rules.

use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::model::ToyNet;
use crate::mup::{assign_rules, step_lr, DynamicsRecord, MupRuleSet};
use crate::numcore::{rms, RngStream};
use crate::optim::{adam_step, AdamConfig, ParamTensor, ScheduleConfig};
use crate::task::{Sample, SyntheticTask};

#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// 1-based optimizer step just taken.
    pub step: usize,
    /// Training loss of the batch before the update.
    pub loss: f64,
    /// Schedule learning rate applied (before per-parameter multipliers).
    pub lr: f64,
    pub records: Vec<DynamicsRecord>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: ExperimentConfig,
    net: ToyNet,
    task: SyntheticTask,
    rules: MupRuleSet,
    sched: ScheduleConfig,
    adam: AdamConfig,
    data: RngStream,
    val: Vec<Sample>,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let root = RngStream::new(cfg.seed);
        let mut net = ToyNet::new(cfg.model_config()?, root.derive(0).seed())?;
        let rules = assign_rules(net.params_mut(), cfg.width, cfg.base_lr)?;
        let mc = net.config();
        let task = SyntheticTask::new(cfg.task, mc.d_in, mc.d_out, mc.n_tokens(), &root.derive(1))?;
        let val = task.batch(cfg.val_samples, &mut root.derive(2))?;
        Ok(Self {
            sched: cfg.schedule(),
            adam: cfg.adam(),
            cfg: cfg.clone(),
            net,
            task,
            rules,
            data: root.derive(3),
            val,
            step: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn net(&self) -> &ToyNet {
        &self.net
    }

    pub fn params(&self) -> &[ParamTensor] {
        self.net.params()
    }

    pub fn rules(&self) -> &MupRuleSet {
        &self.rules
    }

    pub fn schedule(&self) -> &ScheduleConfig {
        &self.sched
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Swaps in externally produced parameters (for example an averaged
    /// checkpoint) with the same names and shapes.
    pub fn set_params(&mut self, params: Vec<ParamTensor>) -> Result<()> {
        self.net.set_params(params)
    }

    /// One optimizer step on a fresh batch.
    ///
    /// The batch of step `s` depends only on the seed and `s`.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let s = self.step + 1;
        let lr = step_lr(s, &self.sched);
        let batch = self
            .task
            .batch(self.cfg.batch, &mut self.data.derive(s as u64))?;
        let w = self.net.weights()?;
        let bg = self.net.batch_grads(&w, &batch)?;
        if !bg.loss.is_finite() {
            return Err(Error::Divergence {
                step: s,
                loss: bg.loss,
            });
        }
        let base = self.sched.base_lr;
        let mut records = Vec::with_capacity(bg.grads.len());
        for (i, grad) in bg.grads.iter().enumerate() {
            let act = bg.activation_rms[self.net.owner(i)];
            let p = &mut self.net.params_mut()[i];
            let before = p.value.clone();
            adam_step(p, grad, p.lr_multiplier * lr / base, &self.adam)?;
            records.push(DynamicsRecord {
                step: s,
                param_name: p.name.clone(),
                grad_norm: grad.frobenius_norm(),
                weight_norm: p.value.frobenius_norm(),
                update_rms: rms(&p.value.sub(&before))?,
                activation_rms: act,
            });
        }
        self.step = s;
        Ok(StepOutcome {
            step: s,
            loss: bg.loss,
            lr,
            records,
        })
    }

    /// Mean squared error on the fixed validation set.
    pub fn eval_loss(&self) -> Result<f64> {
        let loss = self.net.loss(&self.net.weights()?, &self.val)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                loss,
            });
        }
        Ok(loss)
    }

    /// Mean RMS of the last block's output stream on the validation set.
    pub fn hidden_rms(&self) -> Result<f64> {
        let w = self.net.weights()?;
        let mut total = 0.0;
        for s in &self.val {
            let pass = self.net.forward(&w, &s.input, s.t)?;
            total += rms(pass.hidden.last().expect("depth >= 1"))?;
        }
        let r = total / self.val.len() as f64;
        if !r.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                loss: r,
            });
        }
        Ok(r)
    }
}
