//! Result files. Everything except the trace's wall-clock column is a pure
//! function of the config snapshot each file embeds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use deepcluster::autoencoder::Checkpoint;
use deepcluster::trainers::{TrainConfig, TrainTrace};
use serde::Serialize;

use crate::config::DataSpec;
use crate::CliError;

#[derive(Clone, Debug, Serialize)]
pub struct Snapshot {
    pub train: TrainConfig,
    pub data: DataSpec,
}

impl Snapshot {
    fn json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Metrics {
    pub method: String,
    pub nmi: Option<f64>,
    pub acc: Option<f64>,
    pub mi: f64,
    pub objective: f64,
    pub recon_loss: f64,
    pub initial_mi: f64,
    pub iterations: usize,
    pub samples: usize,
    pub rescued_clusters: usize,
    pub config: Snapshot,
}

impl Metrics {
    pub fn new(trace: &TrainTrace, snapshot: &Snapshot) -> Self {
        let last = trace.final_record();
        Metrics {
            method: trace.method.name().to_string(),
            nmi: last.and_then(|r| r.nmi),
            acc: last.and_then(|r| r.acc),
            mi: last.map_or(trace.initial_mi, |r| r.mi),
            objective: last.map_or(f64::NAN, |r| r.objective),
            recon_loss: last.map_or(f64::NAN, |r| r.recon_loss),
            initial_mi: trace.initial_mi,
            iterations: trace.records.len(),
            samples: trace.assignment.len(),
            rescued_clusters: trace.rescued_clusters,
            config: snapshot.clone(),
        }
    }
}

#[derive(Serialize)]
struct CheckpointFile<'a> {
    #[serde(flatten)]
    checkpoint: Checkpoint,
    config: &'a Snapshot,
}

#[derive(Serialize)]
struct ConfigLine<'a> {
    config: &'a Snapshot,
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `trace.jsonl`, `metrics.json`, `checkpoint.json` and `trajectory.csv`.
pub fn write_run(dir: &Path, trace: &TrainTrace, snapshot: &Snapshot) -> Result<Metrics, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;

    let mut jsonl = serde_json::to_string(&ConfigLine { config: snapshot }).expect("serializes");
    jsonl.push('\n');
    for r in &trace.records {
        jsonl.push_str(&serde_json::to_string(r).expect("record serializes"));
        jsonl.push('\n');
    }
    write(&dir.join("trace.jsonl"), &jsonl)?;

    let metrics = Metrics::new(trace, snapshot);
    let mut m = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    m.push('\n');
    write(&dir.join("metrics.json"), &m)?;

    let ckpt = CheckpointFile {
        checkpoint: Checkpoint::new(&trace.autoencoder, Some(&trace.head), snapshot.train.seed),
        config: snapshot,
    };
    write(&dir.join("checkpoint.json"), &serde_json::to_string(&ckpt).expect("checkpoint serializes"))?;

    let mut csv = format!("# config: {}\niteration,mi,objective,nmi,acc\n", snapshot.json());
    for r in &trace.records {
        let _ = writeln!(csv, "{},{},{},{},{}", r.iteration, r.mi, r.objective, opt(r.nmi), opt(r.acc));
    }
    write(&dir.join("trajectory.csv"), &csv)?;
    Ok(metrics)
}

fn fmt4(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Writes `comparison.md` and `comparison.csv`, one row per method.
pub fn write_comparison(dir: &Path, rows: &[Metrics], data: &DataSpec) -> Result<(), CliError> {
    let data_json = serde_json::to_string(data).expect("data spec serializes");
    let mut md = String::from("| method | NMI | ACC | MI | objective |\n|---|---|---|---|---|\n");
    let mut csv = format!("# data: {data_json}\nmethod,nmi,acc,mi,objective,config\n");
    for m in rows {
        let _ = writeln!(md, "| {} | {} | {} | {:.4} | {:.6} |", m.method, fmt4(m.nmi), fmt4(m.acc), m.mi, m.objective);
        let train = serde_json::to_string(&m.config.train).expect("config serializes").replace('"', "\"\"");
        let _ = writeln!(csv, "{},{},{},{},{},\"{train}\"", m.method, opt(m.nmi), opt(m.acc), m.mi, m.objective);
    }
    md.push_str("\nConfigs:\n\n```json\n");
    for m in rows {
        md.push_str(&m.config.json());
        md.push('\n');
    }
    md.push_str("```\n");
    write(&dir.join("comparison.md"), &md)?;
    write(&dir.join("comparison.csv"), &csv)
}
