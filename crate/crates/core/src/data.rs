//! Dataset ingestion: synthetic blobs, IDX image files, CSV tables, and mini-batch plans.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw inputs plus optional ground-truth labels. Labels are for evaluation only.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub name: String,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Option<Vec<usize>>, name: impl Into<String>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::invalid("dataset has no samples"));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::shape(format!(
                    "{} labels for {} samples",
                    l.len(),
                    features.rows()
                )));
            }
        }
        Ok(Dataset {
            features,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Number of distinct ground-truth classes (`max label + 1`).
    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    pub fn without_labels(&self) -> Dataset {
        Dataset {
            features: self.features.clone(),
            labels: None,
            name: self.name.clone(),
        }
    }

    /// Writes features (and labels as the last column, if present) as CSV.
    pub fn write_csv(&self, path: impl AsRef<Path>, header: bool) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        if header {
            let mut names: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
            if self.labels.is_some() {
                names.push("label".into());
            }
            w.write_record(&names).map_err(|e| csv_err(path, e))?;
        }
        for i in 0..self.len() {
            // `{}` on f64 prints the shortest string that parses back to the same bits.
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            if let Some(l) = &self.labels {
                rec.push(l[i].to_string());
            }
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Center of blob `c`: a staircase walk that advances `sep` along axis `j mod dim`
/// for each `j < c`, so consecutive blobs sit exactly `sep` apart and no two coincide.
fn blob_center(c: usize, dim: usize, sep: f64) -> Vec<f64> {
    let mut center = vec![0.0; dim];
    for j in 0..c {
        center[j % dim] += sep;
    }
    center
}

/// `k` isotropic Gaussian blobs of `per_cluster` points each, labels populated.
pub fn gen_gaussian_blobs(
    k: usize,
    per_cluster: usize,
    dim: usize,
    sep: f64,
    noise: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::invalid(format!("blobs need k >= 2, got {k}")));
    }
    if per_cluster == 0 || dim == 0 {
        return Err(Error::invalid("blobs need per_cluster >= 1 and dim >= 1"));
    }
    if !(sep > 0.0 && sep.is_finite()) || !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid("blobs need sep > 0 and finite noise >= 0"));
    }
    let n = k * per_cluster;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..k {
        let center = blob_center(c, dim, sep);
        for _ in 0..per_cluster {
            for &m in &center {
                data.push(m + noise * rng.normal());
            }
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(n, dim, data)?, Some(labels), "blobs")
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn read_u32(cur: &mut Cursor<&[u8]>, path: &Path, what: &str) -> Result<u32> {
    let offset = cur.position();
    cur.read_u32::<BigEndian>().map_err(|_| {
        Error::Format(format!(
            "{}: truncated while reading {what} at offset {offset}",
            path.display()
        ))
    })
}

/// Loads an IDX image file and its label file. Pixels are scaled to `[0, 1]`.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: Option<usize>,
) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let img_bytes = read_all(images_path)?;
    let lbl_bytes = read_all(labels_path)?;

    let mut cur = Cursor::new(img_bytes.as_slice());
    let magic = read_u32(&mut cur, images_path, "magic number")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}",
            images_path.display()
        )));
    }
    let count = read_u32(&mut cur, images_path, "image count")? as usize;
    let rows = read_u32(&mut cur, images_path, "row count")? as usize;
    let cols = read_u32(&mut cur, images_path, "column count")? as usize;

    let mut lcur = Cursor::new(lbl_bytes.as_slice());
    let lmagic = read_u32(&mut lcur, labels_path, "magic number")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad label magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}",
            labels_path.display()
        )));
    }
    let lcount = read_u32(&mut lcur, labels_path, "label count")? as usize;
    if lcount != count {
        return Err(Error::Format(format!(
            "{} holds {count} images but {} holds {lcount} labels",
            images_path.display(),
            labels_path.display()
        )));
    }

    let n = limit.map_or(count, |l| l.min(count));
    let dim = rows * cols;
    let pixel_start = 16usize;
    let needed = pixel_start + n * dim;
    if img_bytes.len() < needed {
        return Err(Error::Format(format!(
            "{}: truncated pixel data at offset {}, need {needed} bytes",
            images_path.display(),
            img_bytes.len()
        )));
    }
    if lbl_bytes.len() < 8 + n {
        return Err(Error::Format(format!(
            "{}: truncated label data at offset {}, need {} bytes",
            labels_path.display(),
            lbl_bytes.len(),
            8 + n
        )));
    }
    let features: Vec<f64> = img_bytes[pixel_start..needed]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = lbl_bytes[8..8 + n].iter().map(|&b| usize::from(b)).collect();
    let name = images_path
        .file_name()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(Matrix::from_vec(n, dim, features)?, Some(labels), name)
}

/// Loads a rectangular numeric CSV. `label_col`, if given, is pulled out as integer labels.
pub fn load_csv(path: impl AsRef<Path>, label_col: Option<usize>, header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                _ => unreachable!(),
            },
            _ => csv_err(path, e),
        })?;

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let cells = rec.len();
        match width {
            None => width = Some(cells),
            Some(w) if w != cells => {
                return Err(Error::Format(format!(
                    "{}: line {line}: expected {w} fields, found {cells}",
                    path.display()
                )))
            }
            _ => {}
        }
        if let Some(lc) = label_col {
            if lc >= cells {
                return Err(Error::Format(format!(
                    "{}: line {line}: label column {lc} out of range for {cells} fields",
                    path.display()
                )));
            }
        }
        for (j, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if Some(j) == label_col {
                let l: usize = cell.parse().map_err(|_| {
                    Error::Format(format!(
                        "{}: line {line}: label {cell:?} is not a nonnegative integer",
                        path.display()
                    ))
                })?;
                labels.push(l);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Format(format!(
                        "{}: line {line}: non-numeric cell {cell:?} in column {j}",
                        path.display()
                    ))
                })?;
                if !v.is_finite() {
                    return Err(Error::Format(format!(
                        "{}: line {line}: non-finite cell in column {j}",
                        path.display()
                    )));
                }
                data.push(v);
            }
        }
    }
    let width = width.ok_or_else(|| Error::Format(format!("{}: no data rows", path.display())))?;
    let cols = width - usize::from(label_col.is_some());
    let rows = if cols == 0 { labels.len() } else { data.len() / cols };
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(
        Matrix::from_vec(rows, cols, data)?,
        label_col.map(|_| labels),
        name,
    )
}

/// Shuffled visiting order for one epoch, chunked into mini-batches.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub order: Vec<usize>,
    pub rng_seed: u64,
}

impl BatchPlan {
    /// Plan for `epoch`, reseeded from the master seed so epochs differ but runs repeat.
    pub fn for_epoch(n: usize, batch_size: usize, master_seed: u64, epoch: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        let rng_seed = Rng::new(master_seed).fork(0xba7c_0000 + epoch).seed();
        let order = Rng::new(rng_seed).permutation(n);
        Ok(BatchPlan {
            batch_size,
            order,
            rng_seed,
        })
    }

    pub fn batches(&self) -> impl Iterator<Item = &[usize]> {
        self.order.chunks(self.batch_size)
    }
}
