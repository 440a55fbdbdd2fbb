//! Tabular dataset loading, label mapping, seeded splits and standardization.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use crate::error::{domain, Error, Result};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    /// Comma-separated features with the label in the last column.
    Csv,
    /// `label index:value ...` with 1-based indices.
    Svmlight,
}

impl DataFormat {
    pub fn from_name(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Some(Self::Csv),
            "svmlight" | "libsvm" => Some(Self::Svmlight),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Svmlight => "svmlight",
        }
    }
}

/// How raw label tokens map to `±1`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LabelSpec {
    /// Tokens must be `-1`, `+1`, `1` or `0` (`0` maps to `-1`).
    #[default]
    Numeric,
    /// The named class is `+1`, every other token `-1`.
    Positive(String),
}

/// Seeded uniform split into `train` rows and the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    /// Constant features keep scale 1.
    pub std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub path: PathBuf,
    /// Standardized features.
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub standardization: Standardization,
    /// Whether `0/1` labels were remapped.
    pub labels_remapped: bool,
}

impl DatasetBundle {
    fn rows(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), self.x.ncols(), |i, j| self.x[(idx[i], j)])
    }

    pub fn x_train(&self) -> DMatrix<f64> {
        self.rows(&self.train)
    }

    pub fn x_test(&self) -> DMatrix<f64> {
        self.rows(&self.test)
    }

    pub fn y_train(&self) -> Vec<f64> {
        self.train.iter().map(|&i| self.y[i]).collect()
    }

    pub fn y_test(&self) -> Vec<f64> {
        self.test.iter().map(|&i| self.y[i]).collect()
    }
}

/// Raw parse result before splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub labels_remapped: bool,
}

fn parse_label(tok: &str, spec: &LabelSpec) -> std::result::Result<(f64, bool), String> {
    let tok = tok.trim();
    match spec {
        LabelSpec::Positive(p) => Ok((if tok == p { 1.0 } else { -1.0 }, false)),
        LabelSpec::Numeric => match tok.parse::<f64>() {
            Ok(v) if v == 1.0 => Ok((1.0, false)),
            Ok(v) if v == -1.0 => Ok((-1.0, false)),
            Ok(v) if v == 0.0 => Ok((-1.0, true)),
            _ => Err(format!("label '{tok}' is not one of -1, +1, 0, 1")),
        },
    }
}

/// Parses a table from text.
pub fn parse_table(text: &str, path: &Path, format: DataFormat, labels: &LabelSpec) -> Result<RawTable> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut y = Vec::new();
    let mut remapped = false;
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (features, label) = match format {
            DataFormat::Csv => {
                let toks: Vec<&str> = line.split(',').collect();
                let (label, feats) = toks.split_last().expect("split yields at least one token");
                let feats = feats
                    .iter()
                    .map(|t| t.trim().parse::<f64>().map_err(|_| err(ln, format!("bad number '{}'", t.trim()))))
                    .collect::<Result<Vec<_>>>()?;
                (feats, *label)
            }
            DataFormat::Svmlight => {
                let mut toks = line.split_whitespace();
                let label = toks.next().expect("line is nonempty");
                let mut feats = Vec::new();
                for t in toks {
                    let (k, v) = t
                        .split_once(':')
                        .ok_or_else(|| err(ln, format!("expected index:value, got '{t}'")))?;
                    let k: usize = k.parse().map_err(|_| err(ln, format!("bad index '{k}'")))?;
                    if k == 0 {
                        return Err(err(ln, "indices are 1-based".into()));
                    }
                    let v: f64 = v.parse().map_err(|_| err(ln, format!("bad value '{v}'")))?;
                    if feats.len() < k {
                        feats.resize(k, 0.0);
                    }
                    feats[k - 1] = v;
                }
                (feats, label)
            }
        };
        if features.iter().any(|v| !v.is_finite()) {
            return Err(err(ln, "non-finite feature".into()));
        }
        if format == DataFormat::Csv {
            match width {
                None => width = Some(features.len()),
                Some(w) if w != features.len() => {
                    return Err(err(ln, format!("expected {w} features, found {}", features.len())));
                }
                _ => {}
            }
        }
        let (lab, r) = parse_label(label, labels).map_err(|m| err(ln, m))?;
        remapped |= r;
        rows.push(features);
        y.push(lab);
    }
    if rows.is_empty() {
        return Err(domain(format!("{} contains no rows", path.display())));
    }
    let d = rows.iter().map(Vec::len).max().unwrap_or(0);
    let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i].get(j).copied().unwrap_or(0.0));
    if remapped {
        info!("{}: mapped 0/1 labels to -1/+1", path.display());
    }
    Ok(RawTable {
        x,
        y,
        labels_remapped: remapped,
    })
}

/// Seeded permutation split; both index lists are sorted.
pub fn split_indices(n: usize, spec: SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if spec.train == 0 || spec.train > n {
        return Err(domain(format!("train size {} must lie in [1, {n}]", spec.train)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(spec.seed, 0, 0xD5_5917));
    let mut train = order[..spec.train].to_vec();
    let mut test = order[spec.train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Per-feature mean and standard deviation over `rows`.
pub fn fit_standardization(x: &DMatrix<f64>, rows: &[usize]) -> Standardization {
    let n = rows.len() as f64;
    let d = x.ncols();
    let mut mean = vec![0.0; d];
    let mut std = vec![1.0; d];
    for j in 0..d {
        let mu = rows.iter().map(|&i| x[(i, j)]).sum::<f64>() / n;
        let var = rows.iter().map(|&i| (x[(i, j)] - mu).powi(2)).sum::<f64>() / n;
        mean[j] = mu;
        if var > 0.0 {
            std[j] = var.sqrt();
        }
    }
    Standardization { mean, std }
}

impl Standardization {
    pub fn apply(&self, x: &mut DMatrix<f64>) {
        for (j, mut col) in x.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.mean[j]);
            col /= self.std[j];
        }
    }
}

/// Loads, splits, and standardizes with train-row statistics.
pub fn load_dataset(path: &Path, format: DataFormat, labels: &LabelSpec, split: SplitSpec) -> Result<DatasetBundle> {
    let text = fs::read_to_string(path)?;
    let raw = parse_table(&text, path, format, labels)?;
    let (train, test) = split_indices(raw.x.nrows(), split)?;
    let standardization = fit_standardization(&raw.x, &train);
    let mut x = raw.x;
    standardization.apply(&mut x);
    Ok(DatasetBundle {
        path: path.to_path_buf(),
        x,
        y: raw.y,
        train,
        test,
        standardization,
        labels_remapped: raw.labels_remapped,
    })
}
