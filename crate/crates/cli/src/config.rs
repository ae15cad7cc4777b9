//! Run manifests: an optional TOML file, command-line overrides, and the merged result.

use std::path::{Path, PathBuf};

use deepcluster::data::{gen_gaussian_blobs, load_csv, load_idx, Dataset};
use deepcluster::trainers::{Method, TrainConfig};
use deepcluster::Rng;
use serde::{Deserialize, Serialize};

use crate::args::CommonArgs;
use crate::CliError;

pub const SEED_ENV: &str = "DEEPCLUSTER_SEED";

/// Random stream of the synthetic data, disjoint from the trainer's streams.
const DATA_STREAM: u64 = 100;

/// Every key is optional; flags override whatever is set here.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub method: Option<Method>,
    pub methods: Option<Vec<Method>>,
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub rho: Option<f64>,
    pub epochs: Option<usize>,
    pub pretrain_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub dropout: Option<f64>,
    pub seed: Option<u64>,
    pub recon_weight: Option<f64>,
    pub hidden: Option<Vec<usize>>,
    pub embed_dim: Option<usize>,
    pub inner_epochs: Option<usize>,
    pub admm_max_inner: Option<usize>,
    pub admm_tol: Option<f64>,
    pub init_restarts: Option<usize>,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFile {
    pub source: Option<DataSource>,
    pub path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    pub label_col: Option<usize>,
    pub header: Option<bool>,
    pub limit: Option<usize>,
    pub per_cluster: Option<usize>,
    pub dim: Option<usize>,
    pub sep: Option<f64>,
    pub noise: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Blobs,
    Idx,
    Csv,
}

/// Where the features come from, fully resolved.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataSpec {
    pub source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_col: Option<usize>,
    pub header: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    pub per_cluster: usize,
    pub dim: usize,
    pub sep: f64,
    pub noise: f64,
}

/// Loaded TOML text kept around so errors can point at a line.
pub struct Manifest {
    pub path: Option<PathBuf>,
    pub text: String,
    pub file: FileConfig,
}

impl Manifest {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Manifest { path: None, text: String::new(), file: FileConfig::default() });
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let file: FileConfig = toml::from_str(&text).map_err(|e| {
            let at = e
                .span()
                .map(|s| format!(":{}", line_of_offset(&text, s.start)))
                .unwrap_or_default();
            CliError::Usage(format!("{}{at}: {}", path.display(), e.message()))
        })?;
        Ok(Manifest { path: Some(path.to_path_buf()), text, file })
    }

    /// `file:line: msg` when `key` is assigned in the file, plain `msg` otherwise.
    pub fn anchored(&self, key: &str, msg: &str) -> CliError {
        match (&self.path, self.line_of_key(key)) {
            (Some(p), Some(line)) => CliError::Usage(format!("{}:{line}: {msg}", p.display())),
            _ => CliError::Usage(msg.to_string()),
        }
    }

    fn line_of_key(&self, key: &str) -> Option<usize> {
        self.text.lines().position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Seed precedence: flag, then config file, then the environment, then 0.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}='{v}' is not a non-negative integer"))),
        Err(_) => Ok(0),
    }
}

pub fn data_spec(args: &CommonArgs, file: &DataFile) -> DataSpec {
    DataSpec {
        source: args.data.or(file.source).unwrap_or(DataSource::Blobs),
        path: args.data_path.clone().or_else(|| file.path.clone()),
        labels_path: args.labels_path.clone().or_else(|| file.labels_path.clone()),
        label_col: args.label_col.or(file.label_col),
        header: args.csv_header || file.header.unwrap_or(false),
        limit: args.limit.or(file.limit),
        per_cluster: args.per_cluster.or(file.per_cluster).unwrap_or(100),
        dim: args.blob_dim.or(file.dim).unwrap_or(20),
        sep: args.blob_sep.or(file.sep).unwrap_or(10.0),
        noise: args.blob_noise.or(file.noise).unwrap_or(1.0),
    }
}

/// Reads or generates the dataset. Every failure here is a usage error.
pub fn load_dataset(spec: &DataSpec, k: Option<usize>, seed: u64) -> Result<Dataset, CliError> {
    let usage = |e: deepcluster::Error| CliError::Usage(e.to_string());
    let data = match spec.source {
        DataSource::Blobs => {
            let k = k.unwrap_or(3);
            let mut rng = Rng::new(seed).fork(DATA_STREAM);
            gen_gaussian_blobs(k, spec.per_cluster, spec.dim, spec.sep, spec.noise, &mut rng).map_err(usage)?
        }
        DataSource::Idx => {
            let (Some(images), Some(labels)) = (&spec.path, &spec.labels_path) else {
                return Err(CliError::Usage("idx data needs --data-path and --labels-path".into()));
            };
            load_idx(images, labels, spec.limit).map_err(usage)?
        }
        DataSource::Csv => {
            let Some(path) = &spec.path else {
                return Err(CliError::Usage("csv data needs --data-path".into()));
            };
            let d = load_csv(path, spec.label_col, spec.header).map_err(usage)?;
            match spec.limit {
                Some(n) if n < d.len() => {
                    let rows: Vec<usize> = (0..n).collect();
                    let labels = d.labels.as_ref().map(|l| l[..n].to_vec());
                    Dataset::new(d.features.select_rows(&rows), labels, d.name.clone()).map_err(usage)?
                }
                _ => d,
            }
        }
    };
    Ok(data)
}

/// Merges defaults, file and flags into a validated training config.
pub fn train_config(
    method: Method,
    k: usize,
    seed: u64,
    args: &CommonArgs,
    manifest: &Manifest,
) -> Result<TrainConfig, CliError> {
    let f = &manifest.file;
    let mut c = TrainConfig::new(method, k);
    c.seed = seed;
    macro_rules! merge {
        ($($field:ident),*) => {
            $( if let Some(v) = args.$field.clone().or_else(|| f.$field.clone()) { c.$field = v; } )*
        };
    }
    merge!(lambda, gamma, rho, epochs, pretrain_epochs, batch_size, lr, dropout, recon_weight, hidden, embed_dim,
        inner_epochs, admm_max_inner, admm_tol, init_restarts);
    if let Err(e) = c.validate() {
        let msg = e.to_string();
        let words: Vec<&str> = msg.split(|ch: char| !(ch.is_alphanumeric() || ch == '_')).collect();
        let key = FIELDS.iter().find(|k| words.contains(k) && flag_unset(args, k)).copied();
        return Err(match key {
            Some(key) => manifest.anchored(key, &msg),
            None => CliError::Usage(msg),
        });
    }
    Ok(c)
}

const FIELDS: [&str; 16] = [
    "pretrain_epochs", "batch_size", "recon_weight", "embed_dim", "inner_epochs", "admm_max_inner",
    "admm_tol", "init_restarts", "lambda", "gamma", "rho", "epochs", "lr", "dropout", "hidden", "k",
];

fn flag_unset(args: &CommonArgs, key: &str) -> bool {
    match key {
        "k" => args.k.is_none(),
        "lambda" => args.lambda.is_none(),
        "gamma" => args.gamma.is_none(),
        "rho" => args.rho.is_none(),
        "epochs" => args.epochs.is_none(),
        "pretrain_epochs" => args.pretrain_epochs.is_none(),
        "batch_size" => args.batch_size.is_none(),
        "lr" => args.lr.is_none(),
        "dropout" => args.dropout.is_none(),
        "recon_weight" => args.recon_weight.is_none(),
        "hidden" => args.hidden.is_none(),
        "embed_dim" => args.embed_dim.is_none(),
        "inner_epochs" => args.inner_epochs.is_none(),
        "admm_max_inner" => args.admm_max_inner.is_none(),
        "admm_tol" => args.admm_tol.is_none(),
        "init_restarts" => args.init_restarts.is_none(),
        _ => true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(text: &str) -> Result<Manifest, CliError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, text).unwrap();
        Manifest::load(Some(&path))
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = manifest("k = 3\nlr = 0.1\nbogus = 1\n").err().unwrap();
        assert!(err.to_string().contains("run.toml:3:"), "{err}");
        let err = manifest("method = \"nope\"\n").err().unwrap();
        assert!(err.to_string().contains(":1:") && err.to_string().contains("mi-adm"), "{err}");
    }

    #[test]
    fn nested_data_table_parses() {
        let m = manifest("method = \"depict\"\n[data]\nsource = \"blobs\"\nper_cluster = 5\n").unwrap();
        assert_eq!(m.file.method, Some(Method::Depict));
        assert_eq!(m.file.data.per_cluster, Some(5));
    }

    #[test]
    fn validation_errors_point_at_the_key() {
        let m = manifest("k = 3\n\ndropout = 1.5\n").unwrap();
        let args = CommonArgs::default();
        let err = train_config(Method::MiAdm, 3, 0, &args, &m).err().unwrap();
        assert!(err.to_string().contains("run.toml:3:") && err.to_string().contains("dropout"), "{err}");
    }

    #[test]
    fn flags_override_file() {
        let m = manifest("lr = 0.5\nepochs = 7\n").unwrap();
        let args = CommonArgs { lr: Some(0.01), ..Default::default() };
        let c = train_config(Method::MiAdm, 3, 0, &args, &m).unwrap();
        assert_eq!((c.lr, c.epochs), (0.01, 7));
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some(2)).unwrap(), 1);
        assert_eq!(resolve_seed(None, Some(2)).unwrap(), 2);
    }
}
