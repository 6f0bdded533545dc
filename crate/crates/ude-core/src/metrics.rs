//! Evaluation protocol: per-domain accuracy, expanded-domain accuracy
//! (unweighted mean over domains), per-class F1, confusion matrices, rank
//! AUC, retrieval precision, and the decision-boundary / feature exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Matrix};
use crate::error::{Error, Result};
use crate::models::{Mode, Network};

/// Anything that maps feature rows to class-probability rows.
pub trait ProbPredictor {
    fn class_count(&self) -> usize;
    fn predict_probs(&self, x: &Matrix) -> Result<Matrix>;
}

impl ProbPredictor for Network {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn predict_probs(&self, x: &Matrix) -> Result<Matrix> {
        let out = self.forward(&x.to_tensor(), Mode::Eval)?;
        Ok(Matrix::new(x.rows(), self.class_count, out.probs.values()))
    }
}

/// Index of the row maximum; ties break toward the lowest class index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict_classes(p: &impl ProbPredictor, x: &Matrix) -> Result<Vec<usize>> {
    let probs = p.predict_probs(x)?;
    Ok((0..probs.rows())
        .map(|i| argmax_row(probs.row(i)))
        .collect())
}

fn require_labels<'a>(testset: &'a Dataset, op: &'static str) -> Result<&'a [usize]> {
    testset
        .labels
        .as_deref()
        .ok_or_else(|| Error::contract(format!("{op} requires a labeled test set")))
}

/// Fraction of examples whose argmax prediction matches the label.
pub fn accuracy(p: &impl ProbPredictor, testset: &Dataset) -> Result<f64> {
    let labels = require_labels(testset, "accuracy")?;
    let preds = predict_classes(p, &testset.features)?;
    let correct = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Confusion counts indexed `[actual][predicted]`.
pub fn confusion(p: &impl ProbPredictor, testset: &Dataset) -> Result<Vec<Vec<u64>>> {
    let labels = require_labels(testset, "confusion")?;
    let k = p.class_count();
    let preds = predict_classes(p, &testset.features)?;
    let mut c = vec![vec![0u64; k]; k];
    for (&pred, &actual) in preds.iter().zip(labels) {
        c[actual][pred] += 1;
    }
    Ok(c)
}

pub fn accuracy_from_confusion(c: &[Vec<u64>]) -> f64 {
    let total: u64 = c.iter().flatten().sum();
    let diag: u64 = c.iter().enumerate().map(|(i, row)| row[i]).sum();
    diag as f64 / total as f64
}

/// Expanded-domain accuracy: the unweighted arithmetic mean of the per-domain
/// accuracies, for any number of domains.
pub fn expanded_accuracy(per_domain: &[f64]) -> f64 {
    assert!(!per_domain.is_empty(), "expanded_accuracy over no domains");
    per_domain.iter().sum::<f64>() / per_domain.len() as f64
}

/// Per-class F1 = 2PR/(P+R). A class with neither predictions nor actual
/// examples (or with P+R = 0) scores 0.
pub fn f1_per_class(c: &[Vec<u64>]) -> Vec<f64> {
    let k = c.len();
    (0..k)
        .map(|y| {
            let tp = c[y][y] as f64;
            let actual: f64 = c[y].iter().sum::<u64>() as f64;
            let predicted: f64 = (0..k).map(|a| c[a][y]).sum::<u64>() as f64;
            if actual == 0.0 && predicted == 0.0 {
                return 0.0;
            }
            let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let recall = if actual > 0.0 { tp / actual } else { 0.0 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect()
}

/// Rank-based (Mann-Whitney) AUC with midranks for ties: the probability that
/// a random positive outscores a random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "auc",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::contract("auc requires both classes in the test set"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("non-finite score"));
    // midranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean precision-at-N of nearest-neighbor retrieval by Euclidean distance;
/// distance ties break by corpus index.
pub fn retrieval_precision(
    query_feats: &Matrix,
    query_labels: &[usize],
    corpus_feats: &Matrix,
    corpus_labels: &[usize],
    n: usize,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::contract("retrieval N must be positive"));
    }
    if n > corpus_feats.rows() {
        return Err(Error::contract(format!(
            "retrieval N = {n} exceeds corpus size {}",
            corpus_feats.rows()
        )));
    }
    if query_feats.cols() != corpus_feats.cols() {
        return Err(Error::shape(
            "retrieval_precision",
            format!(
                "feature widths differ: {} vs {}",
                query_feats.cols(),
                corpus_feats.cols()
            ),
        ));
    }
    let mut total = 0.0;
    for (q, &query_label) in query_labels.iter().enumerate() {
        let qrow = query_feats.row(q);
        let mut dists: Vec<(f64, usize)> = (0..corpus_feats.rows())
            .map(|c| {
                let dist: f64 = qrow
                    .iter()
                    .zip(corpus_feats.row(c))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (dist, c)
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).expect("non-finite distance"));
        let hits = dists[..n]
            .iter()
            .filter(|(_, c)| corpus_labels[*c] == query_label)
            .count();
        total += hits as f64 / n as f64;
    }
    Ok(total / query_feats.rows() as f64)
}

/// One lattice cell of a decision-boundary export.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub class: usize,
    /// For binary models, the probability of class 1 (so the p = 0.5 contour
    /// is the decision boundary); otherwise the predicted-class probability.
    pub prob: f64,
}

/// Evaluate a 2-input network on a `resolution x resolution` lattice.
pub fn boundary_grid(
    net: &Network,
    x_range: (f64, f64),
    y_range: (f64, f64),
    resolution: usize,
) -> Result<Vec<GridPoint>> {
    if net.input_dim() != 2 {
        return Err(Error::contract(format!(
            "boundary_grid requires a 2-input model, got input width {}",
            net.input_dim()
        )));
    }
    if resolution == 0 {
        return Err(Error::contract("resolution must be positive"));
    }
    let axis = |range: (f64, f64)| -> Vec<f64> {
        if resolution == 1 {
            vec![range.0]
        } else {
            (0..resolution)
                .map(|i| range.0 + (range.1 - range.0) * i as f64 / (resolution - 1) as f64)
                .collect()
        }
    };
    let xs = axis(x_range);
    let ys = axis(y_range);
    let mut coords = Vec::with_capacity(resolution * resolution * 2);
    for &y in &ys {
        for &x in &xs {
            coords.push(x);
            coords.push(y);
        }
    }
    let grid = Matrix::new(resolution * resolution, 2, coords);
    let probs = net.predict_probs(&grid)?;
    let mut out = Vec::with_capacity(grid.rows());
    for i in 0..grid.rows() {
        let row = probs.row(i);
        let class = argmax_row(row);
        let prob = if net.class_count == 2 {
            row[1]
        } else {
            row[class]
        };
        out.push(GridPoint {
            x: grid.get(i, 0),
            y: grid.get(i, 1),
            class,
            prob,
        });
    }
    Ok(out)
}

/// CSV `x,y,class,prob` for external contour plotting.
pub fn write_boundary_csv(points: &[GridPoint], path: &Path) -> Result<()> {
    let mut out = String::from("x,y,class,prob\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.x, p.y, p.class, p.prob);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Rows of features `z = F(x)` in eval mode.
pub fn export_features(net: &Network, data: &Dataset) -> Result<Matrix> {
    let out = net.forward(&data.features.to_tensor(), Mode::Eval)?;
    Ok(Matrix::new(
        data.n(),
        net.feature_dim,
        out.features.values(),
    ))
}

/// CSV `z0..z{d_z-1},label,domain`; label cells empty when unlabeled.
pub fn write_features_csv(
    features: &Matrix,
    labels: Option<&[usize]>,
    domain: &str,
    path: &Path,
) -> Result<()> {
    let d = features.cols();
    let mut out = String::new();
    for j in 0..d {
        let _ = write!(out, "z{j},");
    }
    out.push_str("label,domain\n");
    for i in 0..features.rows() {
        for j in 0..d {
            let _ = write!(out, "{},", features.get(i, j));
        }
        if let Some(ls) = labels {
            let _ = write!(out, "{}", ls[i]);
        }
        let _ = writeln!(out, ",{domain}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Full evaluation over one or more labeled per-domain test sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_domain_accuracy: BTreeMap<String, f64>,
    pub expanded_accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
    pub auc: Option<f64>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Evaluate on each domain's test set: per-domain accuracies, their
/// unweighted mean as the expanded accuracy, pooled confusion and F1, and
/// (for binary tasks) pooled AUC over the probability of class 1.
pub fn evaluate(p: &impl ProbPredictor, testsets: &[&Dataset]) -> Result<EvalReport> {
    if testsets.is_empty() {
        return Err(Error::contract("evaluate needs at least one test set"));
    }
    let k = p.class_count();
    let mut per_domain = BTreeMap::new();
    let mut pooled = vec![vec![0u64; k]; k];
    let mut scores = Vec::new();
    let mut bin_labels = Vec::new();
    let mut domain_accs = Vec::new();
    for ds in testsets {
        let acc = accuracy(p, ds)?;
        if per_domain.insert(ds.domain_tag.clone(), acc).is_some() {
            return Err(Error::contract(format!(
                "duplicate domain tag '{}' in evaluation",
                ds.domain_tag
            )));
        }
        domain_accs.push(acc);
        let c = confusion(p, ds)?;
        for (pool_row, row) in pooled.iter_mut().zip(&c) {
            for (pool_cell, cell) in pool_row.iter_mut().zip(row) {
                *pool_cell += cell;
            }
        }
        if k == 2 {
            let probs = p.predict_probs(&ds.features)?;
            let labels = require_labels(ds, "evaluate")?;
            for (i, &label) in labels.iter().enumerate() {
                scores.push(probs.get(i, 1));
                bin_labels.push(label == 1);
            }
        }
    }
    let auc_value = if k == 2 {
        Some(auc(&scores, &bin_labels)?)
    } else {
        None
    };
    Ok(EvalReport {
        expanded_accuracy: expanded_accuracy(&domain_accs),
        per_domain_accuracy: per_domain,
        per_class_f1: f1_per_class(&pooled),
        confusion: pooled,
        auc: auc_value,
    })
}
