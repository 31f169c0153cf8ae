//! Experiment configuration, artifact-writing training runs and learning
//! rate sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::GateOffset;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::mup::{
    write_trace, BandSpec, DynamicsRecord, MupRule, DEFAULT_LOWER_FACTOR, DEFAULT_UPPER_FACTOR,
};
use crate::optim::{AdamConfig, ParamKind, ScheduleConfig};
use crate::rope3d::FreqConfig;
use crate::task::TaskKind;
use crate::train::Trainer;

pub const RUN_FORMAT: &str = "spheretrain-run";
pub const RUN_MANIFEST: &str = "run.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint";
pub const CHECKPOINT_SERIES: &str = "checkpoints";

/// Input and output feature count of the synthetic tasks.
pub const TASK_FEATURES: usize = 16;
/// Token grid of every synthetic sample.
pub const TASK_GRID: (usize, usize, usize) = (2, 2, 2);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    InvSqrtDepth,
    Constant,
    Disabled,
}

/// Flat, JSON-serializable description of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub width: usize,
    pub depth: usize,
    pub steps: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub head_dim: usize,
    /// `None` means `min(100, steps / 10)`.
    pub warmup_steps: Option<usize>,
    pub cooldown_start_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub gate: GateMode,
    /// Offset used when `gate` is `constant`.
    pub gate_constant: f64,
    pub val_samples: usize,
    /// Trace rows are written every `log_every` steps and at the last step.
    pub log_every: usize,
    /// Periodic checkpoint interval for post-hoc averaging; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            task: TaskKind::SyntheticDenoise,
            width: 32,
            depth: 4,
            steps: 200,
            batch: 8,
            base_lr: 0.01,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            head_dim: 8,
            warmup_steps: None,
            cooldown_start_fraction: 0.98,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            gate: GateMode::InvSqrtDepth,
            gate_constant: 0.125,
            val_samples: 32,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid experiment config: {e}")))
    }

    pub fn gate_offset(&self) -> GateOffset {
        match self.gate {
            GateMode::InvSqrtDepth => GateOffset::InvSqrtDepth,
            GateMode::Constant => GateOffset::Constant(self.gate_constant),
            GateMode::Disabled => GateOffset::Disabled,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mc = ModelConfig {
            width: self.width,
            depth: self.depth,
            head_dim: self.head_dim,
            d_in: TASK_FEATURES,
            d_out: TASK_FEATURES,
            grid: TASK_GRID,
            gate: self.gate_offset(),
            rope: FreqConfig::default(),
        };
        mc.validate()?;
        Ok(mc)
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            total_steps: self.steps,
            warmup_steps: self.warmup_steps.unwrap_or((self.steps / 10).min(100)),
            cooldown_start_fraction: self.cooldown_start_fraction,
            base_lr: self.base_lr,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.batch == 0 {
            return Err(Error::Config("width, depth and batch must be >= 1".into()));
        }
        if self.val_samples == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "val_samples and log_every must be >= 1".into(),
            ));
        }
        if !self.gate_constant.is_finite() {
            return Err(Error::Config("gate_constant must be finite".into()));
        }
        self.model_config()?;
        self.schedule().validate()?;
        self.adam()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunParam {
    pub name: String,
    pub kind: ParamKind,
    pub rows: usize,
    pub cols: usize,
    /// Peak learning rate from the μP rules.
    pub lr_multiplier: f64,
    pub rule: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFiles {
    pub trace: String,
    pub loss: String,
    pub checkpoint: String,
    /// Periodic checkpoint directories, oldest first.
    pub checkpoints: Vec<String>,
}

/// Summary written next to the artifacts of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub schedule: ScheduleConfig,
    pub steps_completed: usize,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub rules: Vec<MupRule>,
    pub params: Vec<RunParam>,
    pub files: RunFiles,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.format != RUN_FORMAT {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("unexpected format tag `{}`", m.format),
            });
        }
        Ok(m)
    }

    /// Band whose reference is each parameter's peak learning rate, scaled
    /// along the run's schedule.
    pub fn band(&self) -> BandSpec {
        BandSpec {
            reference: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.lr_multiplier))
                .collect(),
            schedule: Some(self.schedule),
            lower_factor: DEFAULT_LOWER_FACTOR,
            upper_factor: DEFAULT_UPPER_FACTOR,
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn series_dir(step: usize) -> String {
    format!("{CHECKPOINT_SERIES}/step_{step:08}")
}

fn write_loss_csv(path: &Path, losses: &[(usize, f64)]) -> Result<()> {
    let mut text = String::from("step,train_loss\n");
    for (s, l) in losses {
        text.push_str(&format!("{s},{l}\n"));
    }
    write_file(path, text.as_bytes())
}

fn write_trace_file(path: &Path, records: &[DynamicsRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_trace(&mut buf, records)?;
    write_file(path, &buf)
}

/// Trains according to `cfg` and writes the trace, loss curve, checkpoints
/// and run manifest into `cfg.output_dir`.
///
/// On divergence the trace and loss curve up to the failing step are still
/// written before the error is returned.
pub fn run_train(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut trainer = Trainer::new(cfg)?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let initial_val_loss = trainer.eval_loss()?;
    let mut series = Vec::new();
    let save_periodic = |trainer: &Trainer, step: usize, series: &mut Vec<String>| -> Result<()> {
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            let rel = series_dir(step);
            checkpoint::save(&dir.join(&rel), step as u64, trainer.params())?;
            series.push(rel);
        }
        Ok(())
    };
    save_periodic(&trainer, 0, &mut series)?;

    let mut records = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let out = match trainer.step() {
            Ok(o) => o,
            Err(e) => {
                write_trace_file(&dir.join(TRACE_FILE), &records)?;
                write_loss_csv(&dir.join(LOSS_FILE), &losses)?;
                return Err(e);
            }
        };
        losses.push((out.step, out.loss));
        if out.step % cfg.log_every == 0 || out.step == cfg.steps {
            records.extend(out.records);
        }
        save_periodic(&trainer, out.step, &mut series)?;
    }
    write_trace_file(&dir.join(TRACE_FILE), &records)?;
    write_loss_csv(&dir.join(LOSS_FILE), &losses)?;
    checkpoint::save(
        &dir.join(FINAL_CHECKPOINT),
        trainer.steps_taken() as u64,
        trainer.params(),
    )?;
    let final_val_loss = trainer.eval_loss()?;

    let rules = trainer.rules();
    let params = trainer
        .params()
        .iter()
        .map(|p| {
            Ok(RunParam {
                name: p.name.clone(),
                kind: p.kind,
                rows: p.value.rows(),
                cols: p.value.cols(),
                lr_multiplier: p.lr_multiplier,
                rule: rules.rule_for(&p.name)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        format: RUN_FORMAT.into(),
        version: 1,
        config: cfg.clone(),
        schedule: *trainer.schedule(),
        steps_completed: trainer.steps_taken(),
        initial_val_loss,
        final_val_loss,
        rules: rules.rules().to_vec(),
        params,
        files: RunFiles {
            trace: TRACE_FILE.into(),
            loss: LOSS_FILE.into(),
            checkpoint: FINAL_CHECKPOINT.into(),
            checkpoints: series,
        },
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    write_file(&dir.join(RUN_MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

/// Trains in memory and returns the final validation loss.
pub fn final_loss(cfg: &ExperimentConfig) -> Result<f64> {
    let mut t = Trainer::new(cfg)?;
    for _ in 0..cfg.steps {
        t.step()?;
    }
    t.eval_loss()
}

/// Axes of a sweep; an empty axis keeps the base configuration's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub base_lrs: Vec<f64>,
    pub widths: Vec<usize>,
    pub batches: Vec<usize>,
    pub steps: Vec<usize>,
    /// One repeat per seed.
    pub seeds: Vec<u64>,
}

fn axis<T: Copy>(values: &[T], default: T) -> Vec<T> {
    if values.is_empty() {
        vec![default]
    } else {
        values.to_vec()
    }
}

impl SweepGrid {
    /// Cartesian product ordered by width, batch, steps, learning rate, seed.
    pub fn points(&self, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for &width in &axis(&self.widths, base.width) {
            for &batch in &axis(&self.batches, base.batch) {
                for &steps in &axis(&self.steps, base.steps) {
                    for &base_lr in &axis(&self.base_lrs, base.base_lr) {
                        for &seed in &axis(&self.seeds, base.seed) {
                            out.push(ExperimentConfig {
                                width,
                                batch,
                                steps,
                                base_lr,
                                seed,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn lr_values(&self, base: &ExperimentConfig) -> Vec<f64> {
        axis(&self.base_lrs, base.base_lr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub width: usize,
    pub depth: usize,
    pub batch: usize,
    pub steps: usize,
    pub base_lr: f64,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

/// Best learning rate of one (width, batch, steps) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestLr {
    pub width: usize,
    pub batch: usize,
    pub steps: usize,
    pub base_lr: f64,
    /// Position of `base_lr` in the sweep's learning-rate axis.
    pub lr_index: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub best: Vec<BestLr>,
}

/// Runs every grid point. Failed runs are recorded and the sweep goes on;
/// a learning rate with any failed repeat cannot be the argmin.
///
/// With `parallel` the points run on the rayon pool; results do not depend
/// on it.
pub fn run_sweep(
    base: &ExperimentConfig,
    grid: &SweepGrid,
    parallel: bool,
) -> Result<SweepSummary> {
    let points = grid.points(base);
    for p in &points {
        p.validate()?;
    }
    let run = |cfg: &ExperimentConfig| {
        let res = final_loss(cfg);
        SweepRow {
            width: cfg.width,
            depth: cfg.depth,
            batch: cfg.batch,
            steps: cfg.steps,
            base_lr: cfg.base_lr,
            seed: cfg.seed,
            final_loss: res.as_ref().ok().copied(),
            error: res.err().map(|e| e.to_string()),
        }
    };
    let rows: Vec<SweepRow> = if parallel {
        points.par_iter().map(run).collect()
    } else {
        points.iter().map(run).collect()
    };

    let lrs = grid.lr_values(base);
    // (width, batch, steps) -> per-lr (sum, count, failed)
    let mut groups: BTreeMap<(usize, usize, usize), Vec<(f64, usize, bool)>> = BTreeMap::new();
    for r in &rows {
        let g = groups
            .entry((r.width, r.batch, r.steps))
            .or_insert_with(|| vec![(0.0, 0, false); lrs.len()]);
        let i = lrs
            .iter()
            .position(|&l| l == r.base_lr)
            .expect("row lr comes from the grid");
        match r.final_loss {
            Some(l) => {
                g[i].0 += l;
                g[i].1 += 1;
            }
            None => g[i].2 = true,
        }
    }
    let best = groups
        .into_iter()
        .filter_map(|((width, batch, steps), per)| {
            per.iter()
                .enumerate()
                .filter(|(_, (_, n, failed))| *n > 0 && !failed)
                .map(|(i, (sum, n, _))| (i, sum / *n as f64))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, mean)| BestLr {
                    width,
                    batch,
                    steps,
                    base_lr: lrs[i],
                    lr_index: i,
                    mean_loss: mean,
                })
        })
        .collect();
    Ok(SweepSummary { rows, best })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut text = String::from("width,depth,batch,steps,base_lr,seed,final_loss,error\n");
    for r in rows {
        let loss = r.final_loss.map(|l| format!("{l:?}")).unwrap_or_default();
        let err = r
            .error
            .as_deref()
            .unwrap_or("")
            .replace(['"', ',', '\n'], " ");
        text.push_str(&format!(
            "{},{},{},{},{:?},{},{},{}\n",
            r.width, r.depth, r.batch, r.steps, r.base_lr, r.seed, loss, err
        ));
    }
    text
}
