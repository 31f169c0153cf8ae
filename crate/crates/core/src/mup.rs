//! μP learning-rate rules, batch/duration scaling, and the update-RMS band
//! monitor over training-dynamics traces.
//!
//! Rules are glob patterns over canonical parameter paths; the first rule
//! that matches a name decides its peak learning rate.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use globset::{Glob, GlobSet, GlobSetBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::optim::{lr_at, ParamKind, ParamTensor, ScheduleConfig};
use crate::train::Trainer;

pub const DEFAULT_BASE_LR: f64 = 0.01;
pub const DEFAULT_LOWER_FACTOR: f64 = 0.2;
pub const DEFAULT_UPPER_FACTOR: f64 = 5.0;

/// How a rule turns `base_lr` into a parameter's peak learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "factor")]
pub enum LrScaling {
    /// `factor · base_lr / fan_in`, fan-in being the column count.
    PerFanIn(f64),
    /// `factor · base_lr` at every width.
    WidthIndependent(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MupRule {
    pub pattern: String,
    pub scaling: LrScaling,
    /// The tensor starts at exactly zero.
    pub zero_init: bool,
}

impl MupRule {
    pub fn new(pattern: &str, scaling: LrScaling, zero_init: bool) -> Self {
        Self {
            pattern: pattern.to_string(),
            scaling,
            zero_init,
        }
    }
}

/// What a rule set decided for one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub name: String,
    pub rule: usize,
    pub lr: f64,
    pub zero_init: bool,
}

#[derive(Clone, Debug)]
pub struct MupRuleSet {
    pub base_lr: f64,
    /// Model width the rule set was instantiated for.
    pub width: usize,
    rules: Vec<MupRule>,
    matcher: GlobSet,
}

impl MupRuleSet {
    pub fn new(base_lr: f64, width: usize, rules: Vec<MupRule>) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("muP width must be >= 1".into()));
        }
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be > 0, got {base_lr}")));
        }
        let mut builder = GlobSetBuilder::new();
        for r in &rules {
            let glob = Glob::new(&r.pattern)
                .map_err(|e| Error::Config(format!("bad rule pattern `{}`: {e}", r.pattern)))?;
            builder.add(glob);
        }
        let matcher = builder
            .build()
            .map_err(|e| Error::Config(format!("cannot compile rule patterns: {e}")))?;
        Ok(Self {
            base_lr,
            width,
            rules,
            matcher,
        })
    }

    /// Rules for the toy network's parameter paths.
    ///
    /// Biases, value-residual scalars and positional embeddings train at
    /// `0.01 · base_lr`. The unified input projection and everything outside
    /// the blocks train at `base_lr / fan_in`; every other block-internal
    /// matrix at `0.1 · base_lr / fan_in`. Modulation output layers, residual
    /// projections and positional embeddings start at zero.
    pub fn standard(base_lr: f64, width: usize) -> Result<Self> {
        use LrScaling::*;
        let rules = vec![
            MupRule::new("*.bias", WidthIndependent(0.01), false),
            MupRule::new("*lambda*", WidthIndependent(0.01), false),
            MupRule::new("*pos_embed*", WidthIndependent(0.01), true),
            MupRule::new("*.modulation.2.weight", PerFanIn(0.1), true),
            MupRule::new("*.final_proj.weight", PerFanIn(0.1), true),
            MupRule::new("blocks.*.unified.weight", PerFanIn(1.0), false),
            MupRule::new("blocks.*", PerFanIn(0.1), false),
            MupRule::new("*", PerFanIn(1.0), false),
        ];
        Self::new(base_lr, width, rules)
    }

    pub fn rules(&self) -> &[MupRule] {
        &self.rules
    }

    /// Index of the first rule matching `name`.
    pub fn rule_for(&self, name: &str) -> Result<usize> {
        self.matcher
            .matches(name)
            .into_iter()
            .min()
            .ok_or_else(|| Error::Config(format!("no muP rule matches parameter `{name}`")))
    }

    pub fn assignment(&self, name: &str, fan_in: usize) -> Result<Assignment> {
        let rule = self.rule_for(name)?;
        let r = &self.rules[rule];
        let lr = match r.scaling {
            LrScaling::PerFanIn(k) => {
                if fan_in == 0 {
                    return Err(Error::Config(format!("parameter `{name}` has fan-in 0")));
                }
                k * self.base_lr / fan_in as f64
            }
            LrScaling::WidthIndependent(k) => k * self.base_lr,
        };
        Ok(Assignment {
            name: name.to_string(),
            rule,
            lr,
            zero_init: r.zero_init,
        })
    }

    /// Sets `lr_multiplier` on every parameter and zeroes the zero-init ones.
    ///
    /// Nothing is modified unless every parameter matches a rule.
    pub fn apply(&self, params: &mut [ParamTensor]) -> Result<Vec<Assignment>> {
        let assignments = params
            .iter()
            .map(|p| {
                let a = self.assignment(&p.name, p.value.cols())?;
                if a.zero_init && p.kind == ParamKind::NormPreserving {
                    return Err(Error::Config(format!(
                        "parameter `{}` is norm-preserving and cannot be zero-initialized",
                        p.name
                    )));
                }
                Ok(a)
            })
            .collect::<Result<Vec<_>>>()?;
        for (p, a) in params.iter_mut().zip(&assignments) {
            p.lr_multiplier = a.lr;
            if a.zero_init {
                p.value.as_mut_slice().fill(0.0);
            }
        }
        Ok(assignments)
    }
}

/// Applies [`MupRuleSet::standard`] to `params`.
pub fn assign_rules(params: &mut [ParamTensor], width: usize, base_lr: f64) -> Result<MupRuleSet> {
    let rules = MupRuleSet::standard(base_lr, width)?;
    rules.apply(params)?;
    Ok(rules)
}

/// `base_lr · √(batch/batch_ref) · √(steps_ref/steps)`
pub fn scale_lr(
    base_lr: f64,
    batch: usize,
    batch_ref: usize,
    steps: usize,
    steps_ref: usize,
) -> Result<f64> {
    if batch == 0 || batch_ref == 0 || steps == 0 || steps_ref == 0 {
        return Err(Error::contract("scale_lr counts must all be >= 1"));
    }
    let ratio = (batch as f64 * steps_ref as f64) / (batch_ref as f64 * steps as f64);
    Ok(base_lr * ratio.sqrt())
}

/// One row of a training-dynamics trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRecord {
    pub step: usize,
    pub param_name: String,
    pub grad_norm: f64,
    pub weight_norm: f64,
    pub update_rms: f64,
    pub activation_rms: f64,
}

impl DynamicsRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        let fields = [
            ("grad_norm", self.grad_norm),
            ("weight_norm", self.weight_norm),
            ("update_rms", self.update_rms),
            ("activation_rms", self.activation_rms),
        ];
        for (field, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{field} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

pub fn write_trace<W: Write>(out: W, records: &[DynamicsRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    if records.is_empty() {
        w.write_record([
            "step",
            "param_name",
            "grad_norm",
            "weight_norm",
            "update_rms",
            "activation_rms",
        ])
        .map_err(csv_io)?;
    }
    for r in records {
        w.serialize(r).map_err(csv_io)?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))
}

fn csv_io(e: csv::Error) -> Error {
    Error::io("<trace>", std::io::Error::other(e.to_string()))
}

/// Parses a trace CSV; `path` only labels errors.
pub fn read_trace<R: Read>(input: R, path: &Path) -> Result<Vec<DynamicsRecord>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(input);
    let mut out = Vec::new();
    for row in rdr.deserialize::<DynamicsRecord>() {
        let rec = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        // header is line 1, so record i sits on line i + 2
        let line = out.len() + 2;
        rec.validate().map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_trace_file(path: &Path) -> Result<Vec<DynamicsRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(std::io::BufReader::new(f), path)
}

/// Parameters outside the band by design.
pub fn is_band_exempt(name: &str) -> bool {
    name.contains("lambda") || name.contains("modulation")
}

/// Tolerated window `[lower · ref, upper · ref]` around the predicted update RMS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub lower_factor: f64,
    pub upper_factor: f64,
    /// Predicted update RMS at full schedule learning rate, per parameter.
    pub reference: BTreeMap<String, f64>,
    /// When present, the prediction at step `s` is scaled by the schedule
    /// learning rate used for that step relative to its base.
    pub schedule: Option<ScheduleConfig>,
}

impl BandSpec {
    /// Band whose reference is each parameter's peak learning rate.
    pub fn from_params(params: &[ParamTensor], schedule: Option<ScheduleConfig>) -> Self {
        Self {
            lower_factor: DEFAULT_LOWER_FACTOR,
            upper_factor: DEFAULT_UPPER_FACTOR,
            reference: params
                .iter()
                .map(|p| (p.name.clone(), p.lr_multiplier))
                .collect(),
            schedule,
        }
    }

    /// Band whose reference is the median positive update RMS of each parameter.
    pub fn from_trace_median(trace: &[DynamicsRecord]) -> Self {
        let mut per: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in trace {
            let e = per.entry(r.param_name.clone()).or_default();
            if r.update_rms > 0.0 {
                e.push(r.update_rms);
            }
        }
        let reference = per
            .into_iter()
            .map(|(name, mut v)| {
                v.sort_by(f64::total_cmp);
                let med = if v.is_empty() { 0.0 } else { v[v.len() / 2] };
                (name, med)
            })
            .collect();
        Self {
            lower_factor: DEFAULT_LOWER_FACTOR,
            upper_factor: DEFAULT_UPPER_FACTOR,
            reference,
            schedule: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower_factor > 0.0 && self.lower_factor < 1.0 && self.upper_factor > 1.0) {
            return Err(Error::Config(format!(
                "band factors need 0 < lower < 1 < upper, got {} and {}",
                self.lower_factor, self.upper_factor
            )));
        }
        if !self.upper_factor.is_finite() {
            return Err(Error::Config("upper band factor must be finite".into()));
        }
        Ok(())
    }

    /// Predicted update RMS of `param` at optimizer step `step` (1-based).
    pub fn predicted(&self, param: &str, step: usize) -> Option<f64> {
        let r = *self.reference.get(param)?;
        Some(match &self.schedule {
            Some(s) => r * step_lr(step, s) / s.base_lr,
            None => r,
        })
    }
}

/// Schedule learning rate applied by optimizer step `step` (1-based).
pub fn step_lr(step: usize, sched: &ScheduleConfig) -> f64 {
    lr_at(step.saturating_sub(1), sched)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BandStatus {
    InBand,
    Escaped(usize),
    Exempt,
}

/// Status per parameter, in order of first appearance in the trace.
///
/// Records whose prediction or gradient norm is zero carry no information
/// and are skipped.
pub fn band_report(trace: &[DynamicsRecord], band: &BandSpec) -> Result<Vec<(String, BandStatus)>> {
    if trace.is_empty() {
        return Err(Error::contract("band_report needs a nonempty trace"));
    }
    band.validate()?;
    let mut status: BTreeMap<String, BandStatus> = BTreeMap::new();
    let mut sorted: Vec<&DynamicsRecord> = trace.iter().collect();
    sorted.sort_by_key(|r| r.step);
    for r in sorted {
        let name = &r.param_name;
        if !status.contains_key(name) {
            let initial = if is_band_exempt(name) {
                BandStatus::Exempt
            } else if band.reference.contains_key(name) {
                BandStatus::InBand
            } else {
                return Err(Error::Config(format!(
                    "band has no reference for parameter `{name}`"
                )));
            };
            status.insert(name.clone(), initial);
        }
        if status[name] != BandStatus::InBand {
            continue;
        }
        let pred = band.predicted(name, r.step).unwrap_or(0.0);
        if pred <= 0.0 || r.grad_norm == 0.0 {
            continue;
        }
        if r.update_rms < band.lower_factor * pred || r.update_rms > band.upper_factor * pred {
            status.insert(name.clone(), BandStatus::Escaped(r.step));
        }
    }
    let mut first_seen: Vec<String> = Vec::new();
    for r in trace {
        if !first_seen.contains(&r.param_name) {
            first_seen.push(r.param_name.clone());
        }
    }
    Ok(first_seen
        .into_iter()
        .map(|n| (n.clone(), status[&n]))
        .collect())
}

/// Serialized form of one band-report line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub param: String,
    /// One of `in_band`, `escaped`, `exempt`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escape_step: Option<usize>,
}

impl ReportEntry {
    pub fn new(param: &str, status: BandStatus) -> Self {
        let (s, step) = match status {
            BandStatus::InBand => ("in_band", None),
            BandStatus::Escaped(k) => ("escaped", Some(k)),
            BandStatus::Exempt => ("exempt", None),
        };
        Self {
            param: param.to_string(),
            status: s.to_string(),
            escape_step: step,
        }
    }

    pub fn status(&self) -> Result<BandStatus> {
        match (self.status.as_str(), self.escape_step) {
            ("in_band", None) => Ok(BandStatus::InBand),
            ("exempt", None) => Ok(BandStatus::Exempt),
            ("escaped", Some(k)) => Ok(BandStatus::Escaped(k)),
            (s, k) => Err(Error::Config(format!(
                "invalid report entry status `{s}` with escape_step {k:?}"
            ))),
        }
    }
}

pub fn report_entries(report: &[(String, BandStatus)]) -> Vec<ReportEntry> {
    report
        .iter()
        .map(|(n, s)| ReportEntry::new(n, *s))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordEntry {
    pub width: usize,
    pub step: usize,
    pub activation_rms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordFailure {
    pub width: usize,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoordTable {
    pub entries: Vec<CoordEntry>,
    pub failures: Vec<CoordFailure>,
}

impl CoordTable {
    pub fn rms(&self, width: usize, step: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.width == width && e.step == step)
            .map(|e| e.activation_rms)
    }
}

/// Trains `base` at each width for `steps` steps and records the RMS of the
/// final hidden stream on the validation set after every step (step 0 is the
/// initialization). A width that fails is recorded and skipped.
pub fn coordinate_check(
    widths: &[usize],
    steps: usize,
    base: &ExperimentConfig,
    seed: u64,
) -> Result<CoordTable> {
    if widths.is_empty() {
        return Err(Error::contract("coordinate_check needs at least one width"));
    }
    let mut table = CoordTable::default();
    for &width in widths {
        let cfg = ExperimentConfig {
            width,
            steps,
            seed,
            ..base.clone()
        };
        let run = || -> Result<Vec<CoordEntry>> {
            let mut trainer = Trainer::new(&cfg)?;
            let mut rows = vec![CoordEntry {
                width,
                step: 0,
                activation_rms: trainer.hidden_rms()?,
            }];
            for _ in 0..steps {
                let out = trainer.step()?;
                rows.push(CoordEntry {
                    width,
                    step: out.step,
                    activation_rms: trainer.hidden_rms()?,
                });
            }
            Ok(rows)
        };
        match run() {
            Ok(rows) => table.entries.extend(rows),
            Err(e) => table.failures.push(CoordFailure {
                width,
                error: e.to_string(),
            }),
        }
    }
    Ok(table)
}
