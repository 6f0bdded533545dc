//! Synthetic datasets and their persistence.
//!
//! The source domain is a pair of concentric circles (positive class on the
//! inner circle, negative on the outer); the target domain is produced by
//! shifting features horizontally and dropping labels. CSV round-trips are
//! bit-exact: floats are written with 17 significant digits.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inner-circle radius of the positive class.
pub const INNER_RADIUS: f64 = 1.0;
/// Outer-circle radius of the negative class. The 0.8 radius ratio follows
/// the usual two-circles generator; it keeps a horizontal shift of a few
/// tenths a genuine domain gap (shifted inner points cross the ring a
/// source-trained boundary occupies) while the classes stay separable.
pub const OUTER_RADIUS: f64 = 1.35;

/// Dense row-major `rows x cols` matrix of features.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Matrix {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::new(idx.len(), self.cols, data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows, self.cols, self.data.clone())
    }
}

/// Examples with features, optional class labels, and a domain tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub domain_tag: String,
    /// Class count of the underlying task; 0 when unknown (label-free CSV).
    pub k: usize,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn without_labels(&self) -> Dataset {
        Dataset {
            labels: None,
            ..self.clone()
        }
    }

    pub fn with_domain_tag(mut self, tag: &str) -> Dataset {
        self.domain_tag = tag.to_string();
        self
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|ls| idx.iter().map(|&i| ls[i]).collect()),
            domain_tag: self.domain_tag.clone(),
            k: self.k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(labels) = &self.labels {
            if labels.len() != self.n() {
                return Err(Error::contract(format!(
                    "{} labels for {} rows",
                    labels.len(),
                    self.n()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= self.k) {
                return Err(Error::contract(format!(
                    "label {bad} outside [0, {})",
                    self.k
                )));
            }
        }
        if let Some(bad) = self.features.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite feature value {bad}")));
        }
        Ok(())
    }
}

/// Sample the concentric-circles source domain: `n_pos` positives on the
/// inner circle, `n_neg` negatives on the outer circle, Gaussian radial noise.
pub fn generate_circles(
    n_pos: usize,
    n_neg: usize,
    noise_sd: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::config("class counts must be positive"));
    }
    if noise_sd < 0.0 {
        return Err(Error::config("noise_sd must be non-negative"));
    }
    let n = n_pos + n_neg;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    let sample = |radius: f64,
                  label: usize,
                  count: usize,
                  data: &mut Vec<f64>,
                  labels: &mut Vec<usize>,
                  rng: &mut ChaCha8Rng| {
        for _ in 0..count {
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            let eps: f64 = rng.sample(StandardNormal);
            let r = radius + noise_sd * eps;
            data.push(r * theta.cos());
            data.push(r * theta.sin());
            labels.push(label);
        }
    };
    sample(INNER_RADIUS, 1, n_pos, &mut data, &mut labels, rng);
    sample(OUTER_RADIUS, 0, n_neg, &mut data, &mut labels, rng);
    Ok(Dataset {
        features: Matrix::new(n, 2, data),
        labels: Some(labels),
        domain_tag: "source".to_string(),
        k: 2,
    })
}

/// Shift feature column 0 by `dx` on every row. Labels are dropped (the
/// shifted domain is unlabeled) unless `keep_labels` asks for retention, which
/// exists solely so held-out shifted data can be scored.
pub fn shift(data: &Dataset, dx: f64, keep_labels: bool) -> Dataset {
    let mut features = data.features.clone();
    for i in 0..features.rows() {
        let v = features.get(i, 0);
        features.set(i, 0, v + dx);
    }
    Dataset {
        features,
        labels: if keep_labels {
            data.labels.clone()
        } else {
            None
        },
        domain_tag: data.domain_tag.clone(),
        k: data.k,
    }
}

/// Disjoint, exhaustive train/test split; stratified by class when labels are
/// present. Each side keeps rows in their original order.
pub fn split(
    data: &Dataset,
    train_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = data.n();
    let mut train_idx: Vec<usize> = Vec::new();
    match &data.labels {
        Some(labels) => {
            let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); data.k.max(1)];
            for (i, &y) in labels.iter().enumerate() {
                per_class[y].push(i);
            }
            for (class, idx) in per_class.iter_mut().enumerate() {
                if idx.is_empty() {
                    continue;
                }
                if idx.len() < 2 {
                    return Err(Error::Stratify {
                        class,
                        count: idx.len(),
                    });
                }
                idx.shuffle(rng);
                let take =
                    ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len() - 1);
                train_idx.extend_from_slice(&idx[..take]);
            }
        }
        None => {
            if n < 2 {
                return Err(Error::Stratify { class: 0, count: n });
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            let take = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
            train_idx.extend_from_slice(&idx[..take]);
        }
    }
    train_idx.sort_unstable();
    let mut in_train = vec![false; n];
    for &i in &train_idx {
        in_train[i] = true;
    }
    let test_idx: Vec<usize> = (0..n).filter(|&i| !in_train[i]).collect();
    Ok((data.select(&train_idx), data.select(&test_idx)))
}

fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_rows(out: &mut String, data: &Dataset) {
    let d = data.dim();
    for i in 0..data.n() {
        for j in 0..d {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format_float(data.features.get(i, j)));
        }
        out.push(',');
        if let Some(labels) = &data.labels {
            let _ = write!(out, "{}", labels[i]);
        }
        let _ = write!(out, ",{}", data.domain_tag);
        out.push('\n');
    }
}

/// Write one dataset as CSV: header `x0,...,x{d-1},label,domain`, label cells
/// empty when the dataset is unlabeled, LF line endings.
pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    save_csv_multi(&[data], path)
}

/// Write several datasets (for example source + target test sets) into a
/// single CSV, distinguished by the domain column.
pub fn save_csv_multi(parts: &[&Dataset], path: &Path) -> Result<()> {
    assert!(!parts.is_empty(), "nothing to save");
    let d = parts[0].dim();
    for p in parts {
        assert_eq!(p.dim(), d, "feature widths differ across parts");
    }
    let mut out = String::new();
    for j in 0..d {
        let _ = write!(out, "x{j},");
    }
    out.push_str("label,domain\n");
    for p in parts {
        write_rows(&mut out, p);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Load a CSV written by [`save_csv`]; the file must contain one domain.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut parts = load_csv_multi(path)?;
    if parts.len() != 1 {
        return Err(Error::contract(format!(
            "{} contains {} domains; use load_csv_multi",
            path.display(),
            parts.len()
        )));
    }
    Ok(parts.remove(0))
}

/// Load a CSV, grouping rows by domain tag (order of first appearance).
///
/// The label column may be missing entirely, in which case every group is
/// unlabeled. `k` is inferred as `max(label) + 1` over the whole file and 0
/// when no labels exist.
pub fn load_csv_multi(path: &Path) -> Result<Vec<Dataset>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        msg: "empty file".to_string(),
    })?;
    let header = header?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    let mut d = 0;
    while d < cols.len() && cols[d] == format!("x{d}") {
        d += 1;
    }
    if d == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected feature columns x0..., got header '{header}'"),
        });
    }
    let rest: Vec<&str> = cols[d..].to_vec();
    let (has_label, has_domain) = match rest.as_slice() {
        [] => (false, false),
        ["label"] => (true, false),
        ["domain"] => (false, true),
        ["label", "domain"] => (true, true),
        other => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unexpected trailing columns {other:?}"),
            });
        }
    };

    struct Group {
        tag: String,
        data: Vec<f64>,
        labels: Vec<Option<usize>>,
    }
    let mut groups: Vec<Group> = Vec::new();

    for (idx, line) in lines {
        let line_no = idx + 1; // 1-based
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let expected = d + usize::from(has_label) + usize::from(has_domain);
        if fields.len() != expected {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {expected} fields, got {}", fields.len()),
            });
        }
        let mut row = Vec::with_capacity(d);
        for (j, cell) in fields[..d].iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("non-numeric feature x{j}: '{cell}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite feature x{j}: '{cell}'"),
                });
            }
            row.push(v);
        }
        let label = if has_label {
            let cell = fields[d];
            if cell.is_empty() {
                None
            } else {
                Some(cell.parse::<usize>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("invalid label '{cell}'"),
                })?)
            }
        } else {
            None
        };
        let tag = if has_domain {
            fields[d + usize::from(has_label)].to_string()
        } else {
            "default".to_string()
        };
        let group = match groups.iter_mut().find(|g| g.tag == tag) {
            Some(g) => g,
            None => {
                groups.push(Group {
                    tag,
                    data: Vec::new(),
                    labels: Vec::new(),
                });
                groups.last_mut().unwrap()
            }
        };
        group.data.extend_from_slice(&row);
        group.labels.push(label);
    }

    let file_k = groups
        .iter()
        .flat_map(|g| g.labels.iter().flatten())
        .max()
        .map_or(0, |&m| m + 1);

    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        let n = g.labels.len();
        let labeled = g.labels.iter().filter(|l| l.is_some()).count();
        let labels = if labeled == 0 {
            None
        } else if labeled == n {
            Some(g.labels.into_iter().map(|l| l.unwrap()).collect())
        } else {
            return Err(Error::contract(format!(
                "domain '{}' mixes labeled and unlabeled rows",
                g.tag
            )));
        };
        out.push(Dataset {
            features: Matrix::new(n, d, g.data),
            labels,
            domain_tag: g.tag,
            k: file_k,
        });
    }
    Ok(out)
}
