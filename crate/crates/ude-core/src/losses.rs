//! Objective terms: classification cross-entropy, mean-feature discrepancy,
//! adversarial domain losses (binary and m-way), and the distillation losses.
//!
//! Everything returns a [`LossValue`] whose tensor is a differentiable scalar;
//! trainers combine these with [`Tensor`] arithmetic and call `backward`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named differentiable scalar.
pub struct LossValue {
    pub loss: Tensor,
    pub name: &'static str,
}

impl LossValue {
    pub fn value(&self) -> f64 {
        self.loss.scalar_value()
    }
}

/// Mean cross-entropy of true classes, computed from raw logits through
/// log-softmax for numerical stability.
pub fn classification_loss(logits: &Tensor, labels: &[usize]) -> Result<LossValue> {
    let loss = logits.log_softmax().nll_from_log_probs(labels)?;
    Ok(LossValue {
        loss,
        name: "classification",
    })
}

/// Mean negative log of the true-class probability, for callers that already
/// hold probabilities. Logs are clamped, so a perfect one-hot prediction
/// scores exactly zero.
pub fn nll_on_probs(probs: &Tensor, labels: &[usize]) -> Result<LossValue> {
    let loss = probs.ln_clamped().nll_from_log_probs(labels)?;
    Ok(LossValue {
        loss,
        name: "classification",
    })
}

/// Squared Euclidean distance between the mean feature vectors of two
/// batches (linear-kernel MMD; the first-order discrepancy).
pub fn ddc_loss(z_source: &Tensor, z_target: &Tensor) -> Result<LossValue> {
    let (n_s, d_s) = z_source.dims2();
    let (n_t, d_t) = z_target.dims2();
    if d_s != d_t {
        return Err(Error::shape(
            "ddc_loss",
            format!("feature widths differ: {d_s} vs {d_t}"),
        ));
    }
    if n_s == 0 || n_t == 0 {
        return Err(Error::contract("ddc_loss: empty batch".to_string()));
    }
    let diff = z_source.mean_axis0()?.sub(&z_target.mean_axis0()?)?;
    let loss = diff.mul(&diff)?.sum_all();
    Ok(LossValue { loss, name: "ddc" })
}

/// Multilinear conditioning: per-row flattened outer product of features and
/// predicted class probabilities, `[n, d_z] x [n, k] -> [n, d_z * k]`.
pub fn cdan_condition(z: &Tensor, probs: &Tensor) -> Result<Tensor> {
    z.row_outer(probs)
}

/// Binary domain-confusion loss over discriminator outputs (probability of
/// coming from the source domain). Per-domain means are averaged so the two
/// domains weigh equally regardless of batch sizes:
/// `0.5 * (-mean log D(s)) + 0.5 * (-mean log(1 - D(t)))`.
///
/// A discriminator that is exactly right everywhere scores 0; one that
/// outputs 0.5 everywhere scores ln 2.
pub fn domain_adversarial_loss(d_out_source: &Tensor, d_out_target: &Tensor) -> Result<LossValue> {
    for (name, t) in [("source", d_out_source), ("target", d_out_target)] {
        if t.numel() == 0 {
            return Err(Error::contract(format!(
                "domain_adversarial_loss: empty {name} batch"
            )));
        }
        if t.values().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::contract(format!(
                "domain_adversarial_loss: {name} output outside [0, 1]; pass probabilities"
            )));
        }
    }
    let source_term = d_out_source.ln_clamped().mean_all().scale(-1.0);
    let target_term = d_out_target
        .affine(-1.0, 1.0)
        .ln_clamped()
        .mean_all()
        .scale(-1.0);
    let loss = source_term.add(&target_term)?.scale(0.5);
    Ok(LossValue {
        loss,
        name: "domain_adversarial",
    })
}

/// m-way generalization for multi-target adaptation: cross-entropy of each
/// domain's discriminator logits against its domain index, averaged with
/// equal domain weights. A uniform discriminator scores ln m.
pub fn multiway_domain_loss(logits_by_domain: &[&Tensor]) -> Result<LossValue> {
    let m = logits_by_domain.len();
    if m < 2 {
        return Err(Error::contract(
            "multiway_domain_loss needs at least 2 domains".to_string(),
        ));
    }
    let mut acc: Option<Tensor> = None;
    for (d, logits) in logits_by_domain.iter().enumerate() {
        let (n, cols) = logits.dims2();
        if cols != m {
            return Err(Error::shape(
                "multiway_domain_loss",
                format!("{m} domains but discriminator emits {cols} logits"),
            ));
        }
        let nll = logits.log_softmax().nll_from_log_probs(&vec![d; n])?;
        acc = Some(match acc {
            Some(a) => a.add(&nll)?,
            None => nll,
        });
    }
    let loss = acc.unwrap().scale(1.0 / m as f64);
    Ok(LossValue {
        loss,
        name: "domain_adversarial_multiway",
    })
}

/// Distillation loss family. The teacher is treated as a constant: no
/// gradient ever flows into it.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KdVariant {
    /// Mean over examples of `sum_c t_c * ln(t_c / s_c)`.
    Kl,
    /// Mean over examples of `-sum_c t_c * ln(s_c)`.
    Ce,
    /// Mean over examples of `sum_c (t_c - s_c)^2`.
    L2,
}

fn require_row_stochastic(op: &'static str, t: &Tensor) -> Result<()> {
    let (rows, cols) = t.dims2();
    let v = t.values();
    for i in 0..rows {
        let s: f64 = v[i * cols..(i + 1) * cols].iter().sum();
        if (s - 1.0).abs() > 1e-6 || v[i * cols..(i + 1) * cols].iter().any(|&p| p < 0.0) {
            return Err(Error::contract(format!(
                "{op}: row {i} is not a probability distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Knowledge distillation loss between per-example probability rows.
pub fn kd_loss(
    teacher_probs: &Tensor,
    student_probs: &Tensor,
    variant: KdVariant,
) -> Result<LossValue> {
    if teacher_probs.shape() != student_probs.shape() {
        return Err(Error::shape(
            "kd_loss",
            format!("{:?} vs {:?}", teacher_probs.shape(), student_probs.shape()),
        ));
    }
    require_row_stochastic("kd_loss", teacher_probs)?;
    require_row_stochastic("kd_loss", student_probs)?;
    let n = teacher_probs.dims2().0 as f64;
    let teacher = teacher_probs.detach();
    let (loss, name) = match variant {
        KdVariant::Kl => {
            let log_ratio = teacher.ln_clamped().sub(&student_probs.ln_clamped())?;
            (teacher.mul(&log_ratio)?.sum_all().scale(1.0 / n), "kd_kl")
        }
        KdVariant::Ce => (
            teacher
                .mul(&student_probs.ln_clamped())?
                .sum_all()
                .scale(-1.0 / n),
            "kd_ce",
        ),
        KdVariant::L2 => {
            let diff = teacher.sub(student_probs)?;
            (diff.mul(&diff)?.sum_all().scale(1.0 / n), "kd_l2")
        }
    };
    Ok(LossValue { loss, name })
}
