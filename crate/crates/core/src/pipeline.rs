//! Experiment orchestration: builds data, trains, analyzes, prunes and
//! writes every artifact of a run into the configured output directory.
//!
//! Artifacts (all written atomically):
//!
//! | file | columns / content |
//! |------|-------------------|
//! | `config.resolved.cfg` | every resolved `key = value`, sorted |
//! | `metrics.csv` | `iter,train_hinge,test_hinge,zero_one,attn_relevant` |
//! | `spectra.csv` | `iter,matrix,index,sigma` |
//! | `projections.csv` | `matrix,i,j,value` |
//! | `rank_sweep.csv` | `rank,hinge,zero_one,attn_relevant` |
//! | `prune_sweep.csv` | `order,rate,hinge,zero_one` |
//! | `theorem_report.json` | the full [`TheoremReport`] |
//! | `grad_report.json` | the full [`GradReport`](crate::gradients::GradReport) |
//! | `plotdata/fig1a.csv` | `rank,test_hinge` |
//! | `plotdata/fig1b.csv` | `rank,attn_relevant` |
//! | `plotdata/fig2.csv` | `iter,index,sigma` (spectrum of `ΔW_K`) |
//! | `plotdata/fig3a.csv` | `position,neuron,norm,group` (sorted `W_O` row norms) |
//! | `plotdata/fig3b.csv` | `order,rate,hinge,zero_one` |
//!
//! Weight snapshots and the generated datasets go to
//! `snapshots/<config-hash>-<seed>/`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::analysis::{delta, neuron_stats, projection_table, rank_sweep, spectrum, theorem_check, NeuronStats, TheoremReport};
use crate::config::ExperimentConfig;
use crate::datagen::{gen_dataset, gen_patterns, gen_testset, Dataset, PatternSet};
use crate::error::{Error, Result};
use crate::gradients::check_gradients;
use crate::io::{csv_text, fmt_f64, write_atomic};
use crate::model::{Metrics, MATRIX_NAMES};
use crate::pruning::{prune_sweep, prune_sweep_csv, PruneOrder, PrunePoint};
use crate::trainer::{train, TrainTrajectory};

/// What a CLI invocation should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    RankSweep,
    Spectra,
    PruneSweep,
    GradCheck,
    All,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Train,
        Command::RankSweep,
        Command::Spectra,
        Command::PruneSweep,
        Command::GradCheck,
        Command::All,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::RankSweep => "rank-sweep",
            Command::Spectra => "spectra",
            Command::PruneSweep => "prune-sweep",
            Command::GradCheck => "grad-check",
            Command::All => "all",
        }
    }

    fn needs_training(self) -> bool {
        !matches!(self, Command::GradCheck)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown subcommand `{s}`")))
    }
}

/// Patterns plus the train and test sets a config describes.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub patterns: PatternSet,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn build_data(config: &ExperimentConfig) -> Result<ExperimentData> {
    let patterns = gen_patterns(&config.data)?;
    let train = gen_dataset(config.data.n_train, &patterns, &config.data, config.data.seed)?;
    let test = gen_testset(config.train.test_size, &patterns, &config.data, config.data.seed)?;
    Ok(ExperimentData { patterns, train, test })
}

/// Data plus the trajectory trained on it.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub data: ExperimentData,
    pub trajectory: TrainTrajectory,
}

pub fn train_run(config: &ExperimentConfig) -> Result<TrainedRun> {
    let data = build_data(config)?;
    let trajectory = train(&config.train, &data.train, &data.test, &config.model)?;
    Ok(TrainedRun { data, trajectory })
}

/// Directory for weight snapshots and datasets of this config.
pub fn snapshot_dir(config: &ExperimentConfig) -> Result<PathBuf> {
    Ok(config
        .output_dir
        .join("snapshots")
        .join(format!("{}-{}", config.hash()?, config.train.seed)))
}

/// Files written by [`run_experiment`], relative to the output directory.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub written: Vec<PathBuf>,
}

struct Writer<'a> {
    root: &'a Path,
    summary: RunSummary,
}

impl Writer<'_> {
    fn put(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
        let rel = rel.as_ref();
        write_atomic(&self.root.join(rel), bytes)?;
        self.summary.written.push(rel.to_path_buf());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidInput(format!("encoding {rel}: {e}")))?;
        text.push('\n');
        self.put(rel, text.as_bytes())
    }
}

/// Runs `command` for `config`, writing its artifacts under `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig, command: Command) -> Result<RunSummary> {
    config.validate()?;
    let root = config.output_dir.clone();
    let mut w = Writer {
        root: &root,
        summary: RunSummary {
            output_dir: root.clone(),
            written: Vec::new(),
        },
    };
    w.put("config.resolved.cfg", config.resolved_text()?.as_bytes())?;

    let run = if command.needs_training() { Some(train_run(config)?) } else { None };
    if let Some(run) = &run {
        write_training(&mut w, config, run)?;
    }
    let all = command == Command::All;
    if let Some(run) = &run {
        if all || command == Command::RankSweep {
            let points = rank_sweep(&run.trajectory, &config.rank_sweep.ranks, &run.data.test)?;
            w.put("rank_sweep.csv", rank_sweep_csv(&points).as_bytes())?;
            w.put("plotdata/fig1a.csv", fig1a_csv(&points).as_bytes())?;
            w.put("plotdata/fig1b.csv", fig1b_csv(&points).as_bytes())?;
        }
        if all || command == Command::Spectra {
            w.put("spectra.csv", spectra_csv(&run.trajectory)?.as_bytes())?;
            w.put("projections.csv", projections_csv(&run.trajectory, &run.data.patterns)?.as_bytes())?;
            w.put("plotdata/fig2.csv", fig2_csv(&run.trajectory)?.as_bytes())?;
            let report = theorem_check(&run.trajectory, &run.data.patterns, &config.analysis)?;
            w.json("theorem_report.json", &report)?;
        }
        if all || command == Command::PruneSweep {
            let fin = &run.trajectory.final_params;
            let stats = neuron_stats(&fin.w_o, &fin.a, &run.data.patterns);
            let mut points = prune_sweep(fin, &config.prune_sweep.rates, PruneOrder::SmallestFirst, &run.data.test)?;
            points.extend(prune_sweep(fin, &config.prune_sweep.rates, PruneOrder::LargestFirst, &run.data.test)?);
            let csv = prune_sweep_csv(&points);
            w.put("prune_sweep.csv", csv.as_bytes())?;
            w.put("plotdata/fig3a.csv", fig3a_csv(&stats).as_bytes())?;
            w.put("plotdata/fig3b.csv", csv.as_bytes())?;
        }
    }
    if all || command == Command::GradCheck {
        let report = check_gradients(config.grad_check.trials, config.grad_check.seed)?;
        w.json("grad_report.json", &report)?;
    }
    Ok(w.summary)
}

fn write_training(w: &mut Writer<'_>, config: &ExperimentConfig, run: &TrainedRun) -> Result<()> {
    w.put("metrics.csv", run.trajectory.metrics_csv().as_bytes())?;
    let dir = snapshot_dir(config)?;
    let rel = dir.strip_prefix(&config.output_dir).unwrap_or(&dir).to_path_buf();
    w.put(rel.join("train.lrds"), &run.data.train.to_bytes())?;
    w.put(rel.join("test.lrds"), &run.data.test.to_bytes())?;
    let traj = &run.trajectory;
    let mut iters: Vec<usize> = traj.snapshots.iter().map(|(t, _)| *t).collect();
    iters.push(traj.iters);
    iters.sort_unstable();
    iters.dedup();
    for t in iters {
        let bytes = traj.params_at(t)?.to_bytes(t as u64);
        w.put(rel.join(format!("iter_{t:06}.lrws")), &bytes)?;
    }
    Ok(())
}

/// Iterations with stored weights, the final one included, ascending.
fn analysed_iters(traj: &TrainTrajectory) -> Vec<usize> {
    let mut iters: Vec<usize> = traj.snapshots.iter().map(|(t, _)| *t).filter(|&t| t > 0).collect();
    iters.push(traj.iters);
    iters.sort_unstable();
    iters.dedup();
    iters
}

/// Singular values of every `ΔW^(t)` at every stored iteration after 0.
pub fn spectra_csv(traj: &TrainTrajectory) -> Result<String> {
    let mut rows = Vec::new();
    for t in analysed_iters(traj) {
        let dw = delta(traj, t)?;
        for (name, m) in MATRIX_NAMES.iter().zip(dw.matrices()) {
            for (k, s) in spectrum(m)?.into_iter().enumerate() {
                rows.push(vec![t.to_string(), name.to_string(), (k + 1).to_string(), fmt_f64(s)]);
            }
        }
    }
    Ok(csv_text("iter,matrix,index,sigma", rows))
}

/// Pattern-basis tables of the final `ΔW_Q`, `ΔW_K`, `ΔW_V`, indices one-based.
pub fn projections_csv(traj: &TrainTrajectory, patterns: &PatternSet) -> Result<String> {
    let dw = delta(traj, traj.iters)?;
    let mut rows = Vec::new();
    for (name, m) in MATRIX_NAMES.iter().zip(dw.matrices()).take(3) {
        let table = projection_table(m, patterns)?;
        for i in 0..table.p.rows() {
            for j in 0..table.p.cols() {
                rows.push(vec![name.to_string(), (i + 1).to_string(), (j + 1).to_string(), fmt_f64(table.p[(i, j)])]);
            }
        }
    }
    Ok(csv_text("matrix,i,j,value", rows))
}

pub fn rank_sweep_csv(points: &[(usize, Metrics)]) -> String {
    csv_text(
        "rank,hinge,zero_one,attn_relevant",
        points.iter().map(|(r, m)| {
            vec![
                r.to_string(),
                fmt_f64(m.hinge),
                fmt_f64(m.zero_one_error),
                fmt_f64(m.attn_on_relevant),
            ]
        }),
    )
}

pub fn fig1a_csv(points: &[(usize, Metrics)]) -> String {
    csv_text("rank,test_hinge", points.iter().map(|(r, m)| vec![r.to_string(), fmt_f64(m.hinge)]))
}

pub fn fig1b_csv(points: &[(usize, Metrics)]) -> String {
    csv_text(
        "rank,attn_relevant",
        points.iter().map(|(r, m)| vec![r.to_string(), fmt_f64(m.attn_on_relevant)]),
    )
}

/// Spectrum of `ΔW_K` at every stored iteration after 0.
pub fn fig2_csv(traj: &TrainTrajectory) -> Result<String> {
    let mut rows = Vec::new();
    for t in analysed_iters(traj) {
        let dk = &delta(traj, t)?.d_k;
        for (k, s) in spectrum(dk)?.into_iter().enumerate() {
            rows.push(vec![t.to_string(), (k + 1).to_string(), fmt_f64(s)]);
        }
    }
    Ok(csv_text("iter,index,sigma", rows))
}

pub fn fig3a_csv(stats: &NeuronStats) -> String {
    let mut order: Vec<usize> = (0..stats.norms.len()).collect();
    order.sort_by(|&i, &j| stats.norms[i].total_cmp(&stats.norms[j]).then(i.cmp(&j)));
    csv_text(
        "position,neuron,norm,group",
        order.iter().enumerate().map(|(pos, &i)| {
            vec![
                pos.to_string(),
                i.to_string(),
                fmt_f64(stats.norms[i]),
                if stats.large[i] { "large" } else { "small" }.to_string(),
            ]
        }),
    )
}

/// Everything the acceptance suite and the Python bindings read from a run,
/// computed in memory without touching the filesystem.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub final_metrics: Metrics,
    pub ranks: Vec<(usize, Metrics)>,
    pub theorem: TheoremReport,
    pub neurons: NeuronStats,
    pub prune: Vec<PrunePoint>,
}

pub fn analyse(config: &ExperimentConfig, run: &TrainedRun) -> Result<Analysis> {
    let traj = &run.trajectory;
    let fin = &traj.final_params;
    let test = &run.data.test;
    let mut prune = prune_sweep(fin, &config.prune_sweep.rates, PruneOrder::SmallestFirst, test)?;
    prune.extend(prune_sweep(fin, &config.prune_sweep.rates, PruneOrder::LargestFirst, test)?);
    Ok(Analysis {
        final_metrics: crate::model::evaluate(fin, test)?,
        ranks: rank_sweep(traj, &config.rank_sweep.ranks, test)?,
        theorem: theorem_check(traj, &run.data.patterns, &config.analysis)?,
        neurons: neuron_stats(&fin.w_o, &fin.a, &run.data.patterns),
        prune,
    })
}
