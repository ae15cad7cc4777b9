use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use deepcluster::trainers::Method;

use crate::config::DataSource;

/// Deep clustering experiments on blobs, IDX images or CSV features.
#[derive(Debug, Parser)]
#[command(name = "deepcluster", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one method and write trace, metrics, checkpoint and trajectory.
    Run(RunArgs),
    /// Train several methods on the same data and seed and tabulate NMI/ACC.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// mi-d, mi-adm, depict, sr-kmeans or admm-qp
    #[arg(long)]
    pub method: Option<Method>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Comma-separated method names (default: all)
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<Method>,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Flags shared by both subcommands. Unset flags fall back to the config file.
#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// TOML manifest; see README for the keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub data: Option<DataSource>,
    #[arg(long)]
    pub data_path: Option<PathBuf>,
    /// IDX label file
    #[arg(long)]
    pub labels_path: Option<PathBuf>,
    /// CSV column holding integer labels
    #[arg(long)]
    pub label_col: Option<usize>,
    /// CSV has a header row
    #[arg(long)]
    pub csv_header: bool,
    /// Keep only the first N samples
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub per_cluster: Option<usize>,
    #[arg(long)]
    pub blob_dim: Option<usize>,
    #[arg(long)]
    pub blob_sep: Option<f64>,
    #[arg(long)]
    pub blob_noise: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Falls back to the config file, then DEEPCLUSTER_SEED, then 0
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub recon_weight: Option<f64>,
    /// Comma-separated hidden widths, e.g. 500,500
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub inner_epochs: Option<usize>,
    #[arg(long)]
    pub admm_max_inner: Option<usize>,
    #[arg(long)]
    pub admm_tol: Option<f64>,
    #[arg(long)]
    pub init_restarts: Option<usize>,
    /// Default: ./deepcluster-out
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}
