//! Subcommand implementations. Each returns the exit code for runs that
//! complete but still report a failure.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spheretrain::checkpoint;
use spheretrain::dedup::{self, ClusterEvent, KmeansConfig};
use spheretrain::ema::{self, AlphaSweep, CheckpointRef, WeightEntry};
use spheretrain::experiment::{self, RunManifest, SweepGrid, CHECKPOINT_SERIES};
use spheretrain::mup::{self, BandSpec, BandStatus, ReportEntry};
use spheretrain::numcore::dmat;
use spheretrain::train::Trainer;
use spheretrain::{Error, Result};

use crate::{
    ClusterArgs, CoordArgs, EmaArgs, ReportArgs, RopeArgs, SweepArgs, TrainArgs, EXIT_NUMERICAL,
};

pub const REPORT_FORMAT: &str = "spheretrain-band-report";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SUMMARY: &str = "sweep.json";
pub const EMA_SUMMARY: &str = "ema.json";
pub const ASSIGNMENTS_CSV: &str = "assignments.csv";
pub const CENTROIDS_DMAT: &str = "centroids.dmat";
pub const CLUSTER_STATS: &str = "stats.json";
pub const COORDCHECK_CSV: &str = "coordcheck.csv";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

pub fn train(args: &TrainArgs) -> Result<u8> {
    let cfg = args.cfg.resolve()?;
    let m = experiment::run_train(&cfg)?;
    println!(
        "trained {} steps: val loss {} -> {}; artifacts in {}",
        m.steps_completed,
        m.initial_val_loss,
        m.final_val_loss,
        cfg.output_dir.display()
    );
    Ok(0)
}

pub fn sweep(args: &SweepArgs) -> Result<u8> {
    let base = args.cfg.resolve()?;
    let mut grid = match &args.grid {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str::<SweepGrid>(&text)
                .map_err(|e| Error::Config(format!("invalid sweep grid: {e}")))?
        }
        None => SweepGrid::default(),
    };
    if !args.lrs.is_empty() {
        grid.base_lrs = args.lrs.clone();
    }
    if !args.widths.is_empty() {
        grid.widths = args.widths.clone();
    }
    if !args.batches.is_empty() {
        grid.batches = args.batches.clone();
    }
    if !args.steps_grid.is_empty() {
        grid.steps = args.steps_grid.clone();
    }
    if !args.seeds.is_empty() {
        grid.seeds = args.seeds.clone();
    }
    let summary = experiment::run_sweep(&base, &grid, args.parallel)?;
    write(
        &base.output_dir.join(SWEEP_CSV),
        experiment::sweep_csv(&summary.rows),
    )?;
    write_json(&base.output_dir.join(SWEEP_SUMMARY), &summary)?;
    let failed = summary.rows.iter().filter(|r| r.error.is_some()).count();
    println!("{} runs, {failed} failed", summary.rows.len());
    for b in &summary.best {
        println!(
            "width {} batch {} steps {}: best base_lr {} (index {}), mean loss {}",
            b.width, b.batch, b.steps, b.base_lr, b.lr_index, b.mean_loss
        );
    }
    Ok(0)
}

/// Band report as written by `report`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub format: String,
    pub version: u32,
    pub trace: PathBuf,
    /// `run` when references come from a run manifest, `trace_median` otherwise.
    pub reference: String,
    pub lower_factor: f64,
    pub upper_factor: f64,
    pub params: Vec<ReportEntry>,
}

pub fn report(args: &ReportArgs) -> Result<u8> {
    let trace = mup::read_trace_file(&args.trace)?;
    let sibling = args.trace.with_file_name(experiment::RUN_MANIFEST);
    let run = args
        .run
        .clone()
        .or_else(|| sibling.is_file().then_some(sibling));
    let (mut band, source) = match &run {
        Some(run) => (RunManifest::read(run)?.band(), "run"),
        None => (BandSpec::from_trace_median(&trace), "trace_median"),
    };
    if let Some(f) = args.lower_factor {
        band.lower_factor = f;
    }
    if let Some(f) = args.upper_factor {
        band.upper_factor = f;
    }
    let statuses = mup::band_report(&trace, &band)?;
    let report = BandReport {
        format: REPORT_FORMAT.to_string(),
        version: 1,
        trace: args.trace.clone(),
        reference: source.to_string(),
        lower_factor: band.lower_factor,
        upper_factor: band.upper_factor,
        params: mup::report_entries(&statuses),
    };
    let out = args
        .output
        .clone()
        .unwrap_or_else(|| args.trace.with_file_name("report.json"));
    write_json(&out, &report)?;

    let (mut in_band, mut escaped, mut exempt) = (0, 0, 0);
    for (name, status) in &statuses {
        match status {
            BandStatus::InBand => in_band += 1,
            BandStatus::Exempt => exempt += 1,
            BandStatus::Escaped(step) => {
                escaped += 1;
                println!("ESCAPED {name} at step {step}");
            }
        }
    }
    println!(
        "{in_band} in band, {escaped} escaped, {exempt} exempt; report written to {}",
        out.display()
    );
    Ok(0)
}

/// Summary written beside an averaged checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaSummary {
    pub alpha: f64,
    pub weights: Vec<WeightEntry>,
    pub sweep: Option<AlphaSweep>,
}

fn series_dirs(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let series = run_dir.join(CHECKPOINT_SERIES);
    let entries = fs::read_dir(&series).map_err(|e| Error::Io {
        path: series.clone(),
        source: e,
    })?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io {
            path: series.clone(),
            source: e,
        })?;
        if entry.path().join(checkpoint::MANIFEST_FILE).is_file() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn ema_combine(args: &EmaArgs) -> Result<u8> {
    let dirs = match &args.run {
        Some(run) => series_dirs(run)?,
        None => args.checkpoint.clone(),
    };
    if dirs.is_empty() {
        return Err(Error::Config("no checkpoints to combine".into()));
    }
    let refs = dirs
        .iter()
        .map(|d| CheckpointRef::load(d))
        .collect::<Result<Vec<_>>>()?;
    let latest = dirs
        .iter()
        .zip(&refs)
        .max_by_key(|(_, r)| r.step)
        .map(|(d, _)| d)
        .expect("nonempty");
    let (step, template) = checkpoint::load(latest)?;

    let mut alpha = args.alpha;
    let mut sweep = None;
    if let Some(run) = &args.run {
        if !args.alphas.is_empty() {
            let manifest = RunManifest::read(&run.join(experiment::RUN_MANIFEST))?;
            let mut trainer = Trainer::new(&manifest.config)?;
            let result = ema::sweep_alpha(&refs, &args.alphas, |c| {
                trainer.set_params(c.to_params(&template)?)?;
                trainer.eval_loss()
            })?;
            alpha = result.best_alpha;
            sweep = Some(result);
        }
    }
    let combined = ema::combine(&refs, alpha)?;
    checkpoint::save(&args.output, step, &combined.to_params(&template)?)?;
    let summary = EmaSummary {
        alpha,
        weights: combined.weights,
        sweep,
    };
    write_json(&args.output.join(EMA_SUMMARY), &summary)?;
    println!(
        "combined {} checkpoints with alpha {alpha} into {}",
        refs.len(),
        args.output.display()
    );
    Ok(0)
}

/// Statistics written by `cluster`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub k: usize,
    pub points: usize,
    pub dim: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub counts: Vec<f64>,
    pub events: Vec<ClusterEvent>,
}

pub fn cluster(args: &ClusterArgs) -> Result<u8> {
    let x = dmat::read(&args.input)?;
    let mut cfg = KmeansConfig::new(args.k);
    cfg.batch_size = args.batch_size;
    cfg.iters = args.iters;
    let fit = dedup::fit(&x, &cfg, args.seed)?;

    let mut csv = String::from("row_index,cluster\n");
    for (i, c) in fit.assignments.iter().enumerate() {
        csv.push_str(&format!("{i},{c}\n"));
    }
    write(&args.output_dir.join(ASSIGNMENTS_CSV), csv)?;
    dmat::write(&args.output_dir.join(CENTROIDS_DMAT), &fit.centroids)?;
    let stats = ClusterStats {
        k: args.k,
        points: x.rows(),
        dim: x.cols(),
        iterations: fit.iterations,
        inertia: fit.inertia,
        counts: fit.counts,
        events: fit.events,
    };
    write_json(&args.output_dir.join(CLUSTER_STATS), &stats)?;
    println!(
        "k={} on {} points: inertia {}, {} maintenance events",
        stats.k,
        stats.points,
        stats.inertia,
        stats.events.len()
    );
    Ok(0)
}

pub fn rope_dump(args: &RopeArgs) -> Result<u8> {
    let cfg = args.cfg.resolve()?;
    let trainer = Trainer::new(&cfg)?;
    let rope = trainer.net().ropes().get(args.layer).ok_or_else(|| {
        Error::Config(format!(
            "layer {} out of range for depth {}",
            args.layer, cfg.depth
        ))
    })?;
    let csv = rope.to_csv();
    match &args.output {
        Some(path) => write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(0)
}

pub fn coordcheck(args: &CoordArgs) -> Result<u8> {
    let cfg = args.cfg.resolve()?;
    let table = mup::coordinate_check(&args.widths, args.check_steps, &cfg, cfg.seed)?;
    let mut csv = String::from("width,step,activation_rms\n");
    for e in &table.entries {
        csv.push_str(&format!("{},{},{}\n", e.width, e.step, e.activation_rms));
    }
    let out = args
        .output
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(COORDCHECK_CSV));
    write(&out, csv)?;
    for &w in &args.widths {
        if let Some(rms) = table.rms(w, args.check_steps) {
            println!(
                "width {w}: activation rms {rms} after {} steps",
                args.check_steps
            );
        }
    }
    for f in &table.failures {
        eprintln!("width {} failed: {}", f.width, f.error);
    }
    Ok(if table.failures.is_empty() {
        0
    } else {
        EXIT_NUMERICAL
    })
}
