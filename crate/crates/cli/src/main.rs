//! `deepcluster` command-line runner.

mod args;
mod config;
mod output;

use std::fmt;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use deepcluster::data::Dataset;
use deepcluster::eval::Scorer;
use deepcluster::trainers::{train, Method, TrainConfig};

use args::{Cli, Command, CommonArgs};
use config::{DataSpec, Manifest};
use output::{Metrics, Snapshot};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or data. Exit 2.
    Usage(String),
    /// Exit 3.
    Diverged(String),
    /// Exit 1.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Diverged(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<deepcluster::Error> for CliError {
    fn from(e: deepcluster::Error) -> Self {
        match e {
            deepcluster::Error::TrainingDiverged { .. } => CliError::Diverged(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

/// Data, labels and resolved settings shared by every method of one invocation.
struct Session {
    manifest: Manifest,
    data: Dataset,
    spec: DataSpec,
    scorer: Option<Scorer>,
    seed: u64,
    k: usize,
    out_dir: PathBuf,
}

impl Session {
    fn open(common: &CommonArgs) -> Result<Self, CliError> {
        let manifest = Manifest::load(common.config.as_deref())?;
        let f = &manifest.file;
        let seed = config::resolve_seed(common.seed, f.seed)?;
        let spec = config::data_spec(common, &f.data);
        let k_set = common.k.or(f.k);
        let data = config::load_dataset(&spec, k_set, seed)?;
        let k = k_set
            .or_else(|| data.num_classes())
            .ok_or_else(|| CliError::Usage("--k is required for unlabeled data".into()))?;
        let scorer = match &data.labels {
            Some(l) => Some(Scorer::new(l).map_err(|e| CliError::Usage(e.to_string()))?),
            None => None,
        };
        let out_dir = common.out_dir.clone().or_else(|| f.out_dir.clone()).unwrap_or_else(|| "deepcluster-out".into());
        Ok(Session { manifest, data, spec, scorer, seed, k, out_dir })
    }

    fn config(&self, method: Method, common: &CommonArgs) -> Result<TrainConfig, CliError> {
        config::train_config(method, self.k, self.seed, common, &self.manifest)
    }

    fn run(&self, config: &TrainConfig, dir: &std::path::Path) -> Result<Metrics, CliError> {
        let trace = train(&self.data.features, config, self.scorer.as_ref())?;
        let snapshot = Snapshot { train: config.clone(), data: self.spec.clone() };
        output::write_run(dir, &trace, &snapshot)
    }
}

/// Prints to stdout, tolerating a closed pipe.
fn say(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn summary(m: &Metrics) -> String {
    let score = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    format!("{:<10} nmi {} acc {} mi {:.4} objective {:.6}", m.method, score(m.nmi), score(m.acc), m.mi, m.objective)
}

fn run(method: Option<Method>, common: &CommonArgs) -> Result<(), CliError> {
    let session = Session::open(common)?;
    let method = method
        .or(session.manifest.file.method)
        .ok_or_else(|| CliError::Usage(format!("no method given (valid: {})", Method::valid_names())))?;
    let config = session.config(method, common)?;
    let metrics = session.run(&config, &session.out_dir)?;
    say(&summary(&metrics));
    say(&format!("wrote {}", session.out_dir.display()));
    Ok(())
}

fn compare(methods: &[Method], common: &CommonArgs) -> Result<(), CliError> {
    let session = Session::open(common)?;
    let methods = match (methods.is_empty(), &session.manifest.file.methods) {
        (false, _) => methods.to_vec(),
        (true, Some(m)) if !m.is_empty() => m.clone(),
        _ => Method::ALL.to_vec(),
    };
    let configs = methods.iter().map(|&m| session.config(m, common)).collect::<Result<Vec<_>, _>>()?;
    let results: Vec<Result<Metrics, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| {
                let dir = session.out_dir.join(c.method.name());
                let session = &session;
                s.spawn(move || session.run(c, &dir))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Runtime("worker panicked".into()))))
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    output::write_comparison(&session.out_dir, &rows, &session.spec)?;
    for m in &rows {
        say(&summary(m));
    }
    say(&format!("wrote {}", session.out_dir.join("comparison.md").display()));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match &cli.command {
        Command::Run(a) => run(a.method, &a.common),
        Command::Compare(a) => compare(&a.methods, &a.common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
