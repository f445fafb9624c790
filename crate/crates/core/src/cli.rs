//! Command implementations behind the `ebkit` binary.
//!
//! A run writes exactly six entries under `<output_dir>/<run_id>/`:
//!
//! | entry            | contents                                            |
//! |------------------|-----------------------------------------------------|
//! | `report.json`    | [`RunReport`]                                       |
//! | `curves.csv`     | per-epoch metrics of every stage                    |
//! | `distances.csv`  | `epoch,distance` from epoch 2                       |
//! | `heatmap.csv`    | pairwise mask distances, epochs as headers          |
//! | `masks/`         | one mask archive + manifest per search epoch        |
//! | `checkpoints/`   | `start`, `retrained` and `baseline` weights         |
//!
//! The directory is assembled under a temporary name and renamed into place.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::earlybird;
use crate::error::Error;
use crate::io;
use crate::model::checkpoint;
use crate::pruning::{self, PruneMask};
use crate::trainer::{self, PipelineOutput, RunReport, RunStatus, HEATMAP_FILE};

pub const REPORT_FILE: &str = "report.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const DISTANCES_FILE: &str = "distances.csv";
pub const MASKS_DIR: &str = "masks";
pub const CHECKPOINTS_DIR: &str = "checkpoints";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RUN_ARTIFACTS: [&str; 6] = [
    REPORT_FILE,
    CURVES_FILE,
    DISTANCES_FILE,
    HEATMAP_FILE,
    MASKS_DIR,
    CHECKPOINTS_DIR,
];

pub const OUTPUT_DIR_ENV: &str = "EBKIT_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "runs";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

/// An error paired with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

impl CliError {
    pub fn config(error: Error) -> Self {
        CliError {
            code: EXIT_CONFIG,
            error,
        }
    }

    pub fn data(error: Error) -> Self {
        CliError {
            code: EXIT_DATA,
            error,
        }
    }

    pub fn other(error: Error) -> Self {
        let code = match error {
            Error::Config(_) => EXIT_CONFIG,
            Error::Diverged { .. } => EXIT_DIVERGED,
            _ => EXIT_FAILURE,
        };
        CliError { code, error }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Typed overrides from global flags, applied on top of `--set` pairs.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub p: Option<f64>,
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub window: Option<usize>,
    pub set: Vec<(String, String)>,
}

impl Overrides {
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out = self.set.clone();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("train.p", self.p.map(|v| format!("{v:?}")));
        push("train.seed", self.seed.map(|v| v.to_string()));
        push(
            "train.detector.epsilon",
            self.epsilon.map(|v| format!("{v:?}")),
        );
        push("train.detector.window", self.window.map(|v| v.to_string()));
        out
    }
}

pub fn load_config(path: &Path, overrides: &Overrides) -> CliResult<ExperimentConfig> {
    ExperimentConfig::load(path, &overrides.pairs()).map_err(CliError::config)
}

/// Output root: the flag, else the config's `output_dir`, else
/// `$EBKIT_OUTPUT_DIR`, else `runs`.
pub fn output_root(flag: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: RunReport,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        match self.report.status {
            RunStatus::Ok => EXIT_OK,
            RunStatus::Diverged => EXIT_DIVERGED,
        }
    }
}

fn claim_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        if !force {
            return Err(CliError::config(Error::Config(format!(
                "{} already exists; pass --force to replace it",
                dir.display()
            ))));
        }
        fs::remove_dir_all(dir).map_err(|e| CliError::other(e.into()))?;
    }
    Ok(())
}

/// Runs the pipeline and writes the run directory. A diverged run still
/// writes its artifacts; check [`RunOutcome::exit_code`].
pub fn cmd_run(config: &ExperimentConfig, root: &Path, force: bool) -> CliResult<RunOutcome> {
    config.validate().map_err(CliError::config)?;
    let dir = root.join(&config.run_id);
    claim_dir(&dir, force)?;
    let data = config.load_data().map_err(CliError::data)?;
    let start = trainer::start_model(config).map_err(|e| match e {
        Error::Config(_) => CliError::config(e),
        _ => CliError::data(e),
    })?;
    let out = trainer::run_stages(config, &data, start).map_err(CliError::other)?;
    write_run_dir(&out, &dir).map_err(CliError::other)?;
    Ok(RunOutcome {
        dir,
        report: out.report,
    })
}

pub fn write_run_dir(out: &PipelineOutput, dir: &Path) -> crate::Result<()> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("run");
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(tmp.join(MASKS_DIR))?;
    fs::create_dir_all(tmp.join(CHECKPOINTS_DIR))?;
    let r = &out.report;
    io::write_json_atomic(&tmp.join(REPORT_FILE), r)?;
    io::write_atomic(&tmp.join(CURVES_FILE), r.curves_csv().as_bytes())?;
    io::write_atomic(&tmp.join(DISTANCES_FILE), r.distances_csv().as_bytes())?;
    io::write_atomic(&tmp.join(HEATMAP_FILE), r.heatmap.to_csv().as_bytes())?;
    for m in &out.masks {
        pruning::save_mask(m, &tmp.join(MASKS_DIR).join(mask_stem(m)))?;
    }
    let seed = r.config.train.seed;
    let ck = tmp.join(CHECKPOINTS_DIR);
    checkpoint::save(&out.start, &ck.join("start"), seed, 0)?;
    if let Some(m) = &out.retrained {
        checkpoint::save(m, &ck.join("retrained"), seed, r.retrain_epochs)?;
    }
    if let Some(m) = &out.baseline {
        checkpoint::save(m, &ck.join("baseline"), seed, r.baseline_epochs)?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

pub fn mask_stem(mask: &PruneMask) -> String {
    format!("epoch_{:03}", mask.epoch())
}

/// One sweep child: its `(p, seed)` and either a report or the error that
/// stopped it before a report existed.
#[derive(Debug)]
pub struct SweepChild {
    pub p: f64,
    pub seed: u64,
    pub result: CliResult<RunOutcome>,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub dir: PathBuf,
    pub children: Vec<SweepChild>,
    pub summary: String,
}

impl SweepOutcome {
    /// First failing child's code, in (seed, p) order, or 0.
    pub fn worst_code(&self) -> i32 {
        self.children
            .iter()
            .map(|c| match &c.result {
                Ok(o) => o.exit_code(),
                Err(e) => e.code,
            })
            .find(|&c| c != EXIT_OK)
            .unwrap_or(EXIT_OK)
    }
}

pub fn child_run_id(run_id: &str, p: f64, seed: u64) -> String {
    format!("{run_id}-p{p}-s{seed}")
}

/// Runs the `ps` x `seeds` cross product in parallel (`threads` workers, 0
/// for the default) under `<root>/<run_id>/` and writes `summary.csv` there.
/// Failed children do not stop the others.
pub fn cmd_sweep(
    config: &ExperimentConfig,
    ps: &[f64],
    seeds: &[u64],
    root: &Path,
    threads: usize,
    force: bool,
) -> CliResult<SweepOutcome> {
    if ps.is_empty() || seeds.is_empty() {
        return Err(CliError::config(Error::Config(
            "sweep needs at least one p and one seed".into(),
        )));
    }
    config.validate().map_err(CliError::config)?;
    let dir = root.join(&config.run_id);
    claim_dir(&dir, force)?;
    fs::create_dir_all(&dir).map_err(|e| CliError::other(e.into()))?;
    let mut jobs = Vec::new();
    for &seed in seeds {
        for &p in ps {
            let mut child = config.clone();
            child.run_id = child_run_id(&config.run_id, p, seed);
            child.output_dir = None;
            child.train.p = p;
            child.train.seed = seed;
            jobs.push((p, seed, child));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::other(Error::Config(format!("thread pool: {e}"))))?;
    let children: Vec<SweepChild> = pool.install(|| {
        jobs.par_iter()
            .map(|(p, seed, child)| SweepChild {
                p: *p,
                seed: *seed,
                result: cmd_run(child, &dir, false),
            })
            .collect()
    });
    let rows: Vec<SummaryRow> = children.iter().map(SummaryRow::from_child).collect();
    let summary = summary_csv(&rows);
    io::write_atomic(&dir.join(SUMMARY_FILE), summary.as_bytes()).map_err(CliError::other)?;
    Ok(SweepOutcome {
        dir,
        children,
        summary,
    })
}

/// One child's contribution to the sweep summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub p: f64,
    pub seed: u64,
    pub status: String,
    pub ticket_epoch: Option<usize>,
    pub baseline_accuracy: Option<f64>,
    pub pruned_accuracy: Option<f64>,
    pub accuracy_delta: Option<f64>,
    pub memory_percent: Option<f64>,
}

impl SummaryRow {
    pub fn from_report(r: &RunReport) -> Self {
        SummaryRow {
            p: r.config.train.p,
            seed: r.config.train.seed,
            status: match r.status {
                RunStatus::Ok => "ok".into(),
                RunStatus::Diverged => "diverged".into(),
            },
            ticket_epoch: r.ticket_epoch,
            baseline_accuracy: r.baseline_accuracy,
            pruned_accuracy: r.pruned_accuracy,
            accuracy_delta: r.accuracy_delta,
            memory_percent: r.memory.as_ref().map(|m| m.percent_change),
        }
    }

    fn from_child(c: &SweepChild) -> Self {
        match &c.result {
            Ok(o) => Self::from_report(&o.report),
            Err(_) => SummaryRow {
                p: c.p,
                seed: c.seed,
                status: "error".into(),
                ticket_epoch: None,
                baseline_accuracy: None,
                pruned_accuracy: None,
                accuracy_delta: None,
                memory_percent: None,
            },
        }
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Summary CSV: per seed, one `baseline` row (the unpruned model does not
/// depend on p, so any successful child of that seed supplies it), then one
/// row per p. Seeds and ratios appear in first-seen order.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s =
        String::from("p,seed,status,ticket_epoch,baseline_acc,pruned_acc,delta,memory_pct\n");
    let mut seeds: Vec<u64> = Vec::new();
    for r in rows {
        if !seeds.contains(&r.seed) {
            seeds.push(r.seed);
        }
    }
    for seed in seeds {
        let of_seed: Vec<&SummaryRow> = rows.iter().filter(|r| r.seed == seed).collect();
        match of_seed.iter().find_map(|r| r.baseline_accuracy) {
            Some(acc) => writeln!(s, "baseline,{seed},ok,,{acc},,,0").unwrap(),
            None => writeln!(s, "baseline,{seed},missing,,,,,").unwrap(),
        }
        for r in of_seed {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.p,
                r.seed,
                r.status,
                opt(r.ticket_epoch),
                opt(r.baseline_accuracy),
                opt(r.pruned_accuracy),
                opt(r.accuracy_delta),
                opt(r.memory_percent)
            )
            .unwrap();
        }
    }
    s
}

/// Recomputes the heatmap CSV from a directory of stored masks.
pub fn cmd_heatmap(masks_dir: &Path) -> CliResult<String> {
    let stems = pruning::mask_stems(masks_dir).map_err(CliError::data)?;
    if stems.is_empty() {
        return Err(CliError::config(Error::Config(format!(
            "no mask files in {}",
            masks_dir.display()
        ))));
    }
    let mut masks = stems
        .iter()
        .map(|s| pruning::load_mask(s))
        .collect::<crate::Result<Vec<_>>>()
        .map_err(CliError::data)?;
    masks.sort_by_key(PruneMask::epoch);
    let p = masks[0].ratio();
    if let Some(m) = masks.iter().find(|m| m.ratio() != p) {
        return Err(CliError::config(Error::Config(format!(
            "masks mix p = {p} and p = {} (epoch {}); a heatmap needs one ratio",
            m.ratio(),
            m.epoch()
        ))));
    }
    let matrix = earlybird::heatmap(&masks).map_err(CliError::config)?;
    let epochs: Vec<usize> = masks.iter().map(PruneMask::epoch).collect();
    Ok(earlybird::heatmap_csv(&epochs, &matrix))
}

pub fn read_report(run_dir: &Path) -> CliResult<RunReport> {
    let missing: Vec<&str> = RUN_ARTIFACTS
        .iter()
        .copied()
        .filter(|a| !run_dir.join(a).exists())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::config(Error::Config(format!(
            "incomplete run {}: missing {}",
            run_dir.display(),
            missing.join(", ")
        ))));
    }
    let path = run_dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::data(e.into()))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(Error::format(&path, e.to_string())))
}

pub fn cmd_report(run_dir: &Path) -> CliResult<String> {
    Ok(format_report(&read_report(run_dir)?))
}

fn acc(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

/// Human-readable summary; the memory table follows the usual
/// original / pruned / percent-change layout.
pub fn format_report(r: &RunReport) -> String {
    let c = &r.config;
    let t = &c.train;
    let kind = serde_json::to_value(c.model.kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    let scope = serde_json::to_value(t.scope)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    let mut s = String::new();
    let mut line = |k: &str, v: String| writeln!(s, "{k:<16}{v}").unwrap();
    line("run", c.run_id.clone());
    line(
        "status",
        match &r.failure {
            None => "ok".into(),
            Some(f) => format!("diverged in {} at epoch {}: {}", f.stage, f.epoch, f.detail),
        },
    );
    line(
        "model",
        format!(
            "{kind}, depth {}, d_model {}, heads {}, {} parameters",
            c.model.depth,
            c.model.d_model,
            c.model.n_heads,
            r.memory
                .as_ref()
                .map(|m| m.total_parameters.to_string())
                .unwrap_or("?".into())
        ),
    );
    line("pruning", format!("p = {} ({scope})", t.p));
    line(
        "detector",
        format!(
            "epsilon = {}, window = {}, max_epochs = {}",
            t.detector.epsilon, t.detector.window, t.detector.max_epochs
        ),
    );
    line(
        "ticket epoch",
        match r.ticket_epoch {
            Some(e) => e.to_string(),
            None => "no early ticket (used final mask)".into(),
        },
    );
    line(
        "epochs",
        format!(
            "search {}, retrain {}, baseline {}",
            r.search_epochs, r.retrain_epochs, r.baseline_epochs
        ),
    );
    s.push('\n');
    writeln!(s, "{:<16}{:>10}", "accuracy", "val").unwrap();
    writeln!(s, "{:<16}{:>10}", "  baseline", acc(r.baseline_accuracy)).unwrap();
    writeln!(s, "{:<16}{:>10}", "  pruned", acc(r.pruned_accuracy)).unwrap();
    writeln!(
        s,
        "{:<16}{:>10}",
        "  delta",
        r.accuracy_delta
            .map(|v| format!("{v:+.4}"))
            .unwrap_or_else(|| "-".into())
    )
    .unwrap();
    s.push('\n');
    if let Some(m) = &r.memory {
        let pruned_col = format!("Pruned (p={})", t.p);
        let pct_col = format!("% Change (p={})", t.p);
        writeln!(
            s,
            "{:<16}{:>14}{:>20}{:>20}",
            "Memory (MB)", "Original", pruned_col, pct_col
        )
        .unwrap();
        writeln!(
            s,
            "{:<16}{:>14.4}{:>20.4}{:>20.1}",
            kind, m.dense_mb, m.pruned_mb, m.percent_change
        )
        .unwrap();
        writeln!(
            s,
            "{:<16}{:>14}{:>20}",
            "  bytes", m.dense_bytes, m.kept_payload_bytes
        )
        .unwrap();
        writeln!(
            s,
            "{:<16}{:>14}{:>20}",
            "  index bytes", "-", m.index_overhead_bytes
        )
        .unwrap();
    }
    s
}
