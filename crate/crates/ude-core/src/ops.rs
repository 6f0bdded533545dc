//! Forward ops and their backward steps.
//!
//! The op set is exactly what an MLP with batch normalization, a sigmoid or
//! softmax discriminator head, and the losses in [`crate::losses`] need:
//! matmul, bias add, elementwise arithmetic, relu, sigmoid, clamped log,
//! softmax / log-softmax, reductions, the per-row outer product used for
//! conditioned adversarial features, and gradient reversal.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied inside every logarithm; keeps losses finite without
/// disturbing values anywhere near test tolerances.
pub const LOG_EPS: f64 = 1e-7;

fn require_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tensor {
    /// Matrix product `self · rhs` for `[n,m] · [m,p] -> [n,p]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (n, m) = match self.shape().as_slice() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::shape(
                    "matmul",
                    format!("lhs must be rank 2, got {s:?}"),
                ));
            }
        };
        let (m2, p) = match rhs.shape().as_slice() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::shape(
                    "matmul",
                    format!("rhs must be rank 2, got {s:?}"),
                ));
            }
        };
        if m != m2 {
            return Err(Error::shape(
                "matmul",
                format!("[{n},{m}] x [{m2},{p}]: inner dimensions differ"),
            ));
        }
        let a = self.values();
        let b = rhs.values();
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            for k in 0..m {
                let aik = a[i * m + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &b[k * p..(k + 1) * p];
                let orow = &mut out[i * p..(i + 1) * p];
                for j in 0..p {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let lhs_t = self.clone();
        let rhs_t = rhs.clone();
        Ok(Tensor::from_op(
            out,
            vec![n, p],
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _v, store| {
                let a = lhs_t.values();
                let b = rhs_t.values();
                // dA = G · Bᵀ
                store.add(&lhs_t, |da| {
                    for i in 0..n {
                        for k in 0..m {
                            let mut acc = 0.0;
                            for j in 0..p {
                                acc += g[i * p + j] * b[k * p + j];
                            }
                            da[i * m + k] += acc;
                        }
                    }
                });
                // dB = Aᵀ · G
                store.add(&rhs_t, |db| {
                    for k in 0..m {
                        for i in 0..n {
                            let aik = a[i * m + k];
                            if aik == 0.0 {
                                continue;
                            }
                            for j in 0..p {
                                db[k * p + j] += aik * g[i * p + j];
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Broadcast-add a bias vector `[d]` to every row of `[n,d]`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (n, d) = match self.shape().as_slice() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::shape(
                    "add_bias",
                    format!("input must be rank 2, got {s:?}"),
                ));
            }
        };
        if bias.shape() != [d] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match row width {d}", bias.shape()),
            ));
        }
        let x = self.values();
        let b = bias.values();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = x[i * d + j] + b[j];
            }
        }
        let xt = self.clone();
        let bt = bias.clone();
        Ok(Tensor::from_op(
            out,
            vec![n, d],
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _v, store| {
                store.add(&xt, |dx| {
                    for (dxi, gi) in dx.iter_mut().zip(g) {
                        *dxi += gi;
                    }
                });
                store.add(&bt, |db| {
                    for i in 0..n {
                        for j in 0..d {
                            db[j] += g[i * d + j];
                        }
                    }
                });
            }),
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        require_same_shape("add", self, rhs)?;
        let out = self
            .values()
            .iter()
            .zip(rhs.values().iter())
            .map(|(a, b)| a + b)
            .collect();
        let at = self.clone();
        let bt = rhs.clone();
        Ok(Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _v, store| {
                store.add(&at, |da| {
                    for (x, gi) in da.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
                store.add(&bt, |db| {
                    for (x, gi) in db.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        require_same_shape("sub", self, rhs)?;
        let out = self
            .values()
            .iter()
            .zip(rhs.values().iter())
            .map(|(a, b)| a - b)
            .collect();
        let at = self.clone();
        let bt = rhs.clone();
        Ok(Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _v, store| {
                store.add(&at, |da| {
                    for (x, gi) in da.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
                store.add(&bt, |db| {
                    for (x, gi) in db.iter_mut().zip(g) {
                        *x -= gi;
                    }
                });
            }),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        require_same_shape("mul", self, rhs)?;
        let out = self
            .values()
            .iter()
            .zip(rhs.values().iter())
            .map(|(a, b)| a * b)
            .collect();
        let at = self.clone();
        let bt = rhs.clone();
        Ok(Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _v, store| {
                let a = at.values();
                let b = bt.values();
                store.add(&at, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * b[i];
                    }
                });
                store.add(&bt, |db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * a[i];
                    }
                });
            }),
        ))
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&self, mul: f64, add: f64) -> Tensor {
        let out = self.values().iter().map(|x| mul * x + add).collect();
        let at = self.clone();
        Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, _v, store| {
                store.add(&at, |da| {
                    for (x, gi) in da.iter_mut().zip(g) {
                        *x += mul * gi;
                    }
                });
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.affine(c, 0.0)
    }

    pub fn relu(&self) -> Tensor {
        let vals = self.values();
        let out = vals
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let at = self.clone();
        Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, _v, store| {
                let x = at.values();
                store.add(&at, |da| {
                    for i in 0..da.len() {
                        if x[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                });
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self
            .values()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let at = self.clone();
        Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, v, store| {
                store.add(&at, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * v[i] * (1.0 - v[i]);
                    }
                });
            }),
        )
    }

    /// `ln(max(x, LOG_EPS))`; flat (zero gradient) below the floor.
    pub fn ln_clamped(&self) -> Tensor {
        let x = self.values();
        let out = x.iter().map(|&v| v.max(LOG_EPS).ln()).collect();
        let at = self.clone();
        Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, _v, store| {
                let x = at.values();
                store.add(&at, |da| {
                    for i in 0..da.len() {
                        if x[i] > LOG_EPS {
                            da[i] += g[i] / x[i];
                        }
                    }
                });
            }),
        )
    }

    /// Row-wise softmax; a vector is treated as a single row.
    pub fn softmax(&self) -> Tensor {
        let (rows, cols) = self.dims2();
        let x = self.values();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &x[i * cols..(i + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (row[j] - max).exp();
                out[i * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                out[i * cols + j] /= sum;
            }
        }
        let at = self.clone();
        Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, v, store| {
                store.add(&at, |da| {
                    for i in 0..rows {
                        let gr = &g[i * cols..(i + 1) * cols];
                        let yr = &v[i * cols..(i + 1) * cols];
                        let dot: f64 = gr.iter().zip(yr).map(|(gi, yi)| gi * yi).sum();
                        for j in 0..cols {
                            da[i * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }),
        )
    }

    /// Row-wise log-softmax, computed with the max-shift trick.
    pub fn log_softmax(&self) -> Tensor {
        let (rows, cols) = self.dims2();
        let x = self.values();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &x[i * cols..(i + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..cols {
                out[i * cols + j] = row[j] - max - log_sum;
            }
        }
        let at = self.clone();
        Tensor::from_op(
            out,
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, v, store| {
                store.add(&at, |da| {
                    for i in 0..rows {
                        let gr = &g[i * cols..(i + 1) * cols];
                        let lr = &v[i * cols..(i + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..cols {
                            da[i * cols + j] += gr[j] - lr[j].exp() * gsum;
                        }
                    }
                });
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.values().iter().sum();
        let at = self.clone();
        Tensor::from_op(
            vec![total],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _v, store| {
                let gi = g[0];
                store.add(&at, |da| {
                    for x in da.iter_mut() {
                        *x += gi;
                    }
                });
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        let total: f64 = self.values().iter().sum();
        let at = self.clone();
        Tensor::from_op(
            vec![total / n],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _v, store| {
                let gi = g[0] / n;
                store.add(&at, |da| {
                    for x in da.iter_mut() {
                        *x += gi;
                    }
                });
            }),
        )
    }

    /// Column means of a `[n,d]` matrix, as a `[d]` vector.
    pub fn mean_axis0(&self) -> Result<Tensor> {
        let (n, d) = match self.shape().as_slice() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::shape(
                    "mean_axis0",
                    format!("input must be rank 2, got {s:?}"),
                ));
            }
        };
        if n == 0 {
            return Err(Error::shape("mean_axis0", "empty batch".to_string()));
        }
        let x = self.values();
        let mut out = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                out[j] += x[i * d + j];
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        let at = self.clone();
        Ok(Tensor::from_op(
            out,
            vec![d],
            vec![self.clone()],
            Box::new(move |g, _v, store| {
                store.add(&at, |da| {
                    for i in 0..n {
                        for j in 0..d {
                            da[i * d + j] += g[j] / n as f64;
                        }
                    }
                });
            }),
        ))
    }

    /// Per-row flattened outer product: `[n,d] ⊗ [n,k] -> [n, d·k]`, feature
    /// index major (`out[i, f·k + c] = lhs[i,f] · rhs[i,c]`).
    pub fn row_outer(&self, rhs: &Tensor) -> Result<Tensor> {
        let (n, d) = match self.shape().as_slice() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::shape(
                    "row_outer",
                    format!("lhs must be rank 2, got {s:?}"),
                ));
            }
        };
        let (n2, k) = match rhs.shape().as_slice() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::shape(
                    "row_outer",
                    format!("rhs must be rank 2, got {s:?}"),
                ));
            }
        };
        if n != n2 {
            return Err(Error::shape(
                "row_outer",
                format!("row counts differ: {n} vs {n2}"),
            ));
        }
        let z = self.values();
        let p = rhs.values();
        let mut out = vec![0.0; n * d * k];
        for i in 0..n {
            for f in 0..d {
                for c in 0..k {
                    out[i * d * k + f * k + c] = z[i * d + f] * p[i * k + c];
                }
            }
        }
        let zt = self.clone();
        let pt = rhs.clone();
        Ok(Tensor::from_op(
            out,
            vec![n, d * k],
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _v, store| {
                let z = zt.values();
                let p = pt.values();
                store.add(&zt, |dz| {
                    for i in 0..n {
                        for f in 0..d {
                            let mut acc = 0.0;
                            for c in 0..k {
                                acc += g[i * d * k + f * k + c] * p[i * k + c];
                            }
                            dz[i * d + f] += acc;
                        }
                    }
                });
                store.add(&pt, |dp| {
                    for i in 0..n {
                        for c in 0..k {
                            let mut acc = 0.0;
                            for f in 0..d {
                                acc += g[i * d * k + f * k + c] * z[i * d + f];
                            }
                            dp[i * k + c] += acc;
                        }
                    }
                });
            }),
        ))
    }

    /// Gradient reversal: identity forward, backward multiplies the gradient
    /// flowing to the input by `-lambda`.
    pub fn grad_reverse(&self, lambda: f64) -> Tensor {
        let at = self.clone();
        Tensor::from_op(
            self.values(),
            self.shape(),
            vec![self.clone()],
            Box::new(move |g, _v, store| {
                store.add(&at, |da| {
                    for (x, gi) in da.iter_mut().zip(g) {
                        *x += -lambda * gi;
                    }
                });
            }),
        )
    }

    /// Mean negative log-likelihood of the true classes, taking row-wise log
    /// probabilities (output of [`Tensor::log_softmax`]).
    pub fn nll_from_log_probs(&self, labels: &[usize]) -> Result<Tensor> {
        let (n, k) = match self.shape().as_slice() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::shape(
                    "nll_from_log_probs",
                    format!("log probs must be rank 2, got {s:?}"),
                ));
            }
        };
        if labels.len() != n {
            return Err(Error::shape(
                "nll_from_log_probs",
                format!("{n} rows but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let lp = self.values();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            total -= lp[i * k + y];
        }
        let at = self.clone();
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            vec![total / n as f64],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _v, store| {
                let gi = g[0] / n as f64;
                store.add(&at, |da| {
                    for (i, &y) in labels.iter().enumerate() {
                        da[i * k + y] -= gi;
                    }
                });
            }),
        ))
    }
}

/// Batch normalization over the rows of `[n,d]`, training mode: normalizes
/// each feature with the batch mean and (biased) batch variance, then applies
/// the affine `gamma * xhat + beta`. Returns the output together with the
/// batch statistics so the owning layer can update its running estimates.
pub fn batchnorm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, d) = match x.shape().as_slice() {
        [r, c] => (*r, *c),
        s => {
            return Err(Error::shape(
                "batchnorm",
                format!("input must be rank 2, got {s:?}"),
            ));
        }
    };
    if n < 2 {
        return Err(Error::contract(format!(
            "batchnorm training mode needs a batch of at least 2 rows, got {n}"
        )));
    }
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "batchnorm",
            format!(
                "gamma {:?} / beta {:?} do not match feature width {d}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let xv = x.values();
    let g = gamma.values();
    let b = beta.values();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += xv[i * d + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    for i in 0..n {
        for j in 0..d {
            let c = xv[i * d + j] - mean[j];
            var[j] += c * c;
        }
    }
    for v in var.iter_mut() {
        *v /= n as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; n * d];
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            let h = (xv[i * d + j] - mean[j]) * inv_std[j];
            xhat[i * d + j] = h;
            out[i * d + j] = g[j] * h + b[j];
        }
    }

    let xt = x.clone();
    let gt = gamma.clone();
    let bt = beta.clone();
    let xhat_saved = xhat;
    let inv_std_saved = inv_std;
    let y = Tensor::from_op(
        out,
        vec![n, d],
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |gout, _v, store| {
            let gamma_v = gt.values();
            store.add(&gt, |dg| {
                for i in 0..n {
                    for j in 0..d {
                        dg[j] += gout[i * d + j] * xhat_saved[i * d + j];
                    }
                }
            });
            store.add(&bt, |db| {
                for i in 0..n {
                    for j in 0..d {
                        db[j] += gout[i * d + j];
                    }
                }
            });
            store.add(&xt, |dx| {
                // dL/dx = gamma * inv_std * (g - mean(g) - xhat * mean(g*xhat)),
                // means over the batch, per feature.
                for j in 0..d {
                    let mut g_mean = 0.0;
                    let mut gx_mean = 0.0;
                    for i in 0..n {
                        g_mean += gout[i * d + j];
                        gx_mean += gout[i * d + j] * xhat_saved[i * d + j];
                    }
                    g_mean /= n as f64;
                    gx_mean /= n as f64;
                    let scale = gamma_v[j] * inv_std_saved[j];
                    for i in 0..n {
                        dx[i * d + j] +=
                            scale * (gout[i * d + j] - g_mean - xhat_saved[i * d + j] * gx_mean);
                    }
                }
            });
        }),
    );
    Ok((y, mean, var))
}

/// Batch normalization, eval mode: a pure per-row function of the input and
/// the frozen running statistics.
pub fn batchnorm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let (n, d) = match x.shape().as_slice() {
        [r, c] => (*r, *c),
        s => {
            return Err(Error::shape(
                "batchnorm",
                format!("input must be rank 2, got {s:?}"),
            ));
        }
    };
    if gamma.shape() != [d]
        || beta.shape() != [d]
        || running_mean.len() != d
        || running_var.len() != d
    {
        return Err(Error::shape(
            "batchnorm",
            format!("statistics do not match feature width {d}"),
        ));
    }
    let xv = x.values();
    let g = gamma.values();
    let b = beta.values();
    let inv_std: Vec<f64> = running_var
        .iter()
        .map(|&v| 1.0 / (v + eps).sqrt())
        .collect();
    let mean = running_mean.to_vec();
    let mut out = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            let h = (xv[i * d + j] - mean[j]) * inv_std[j];
            xhat[i * d + j] = h;
            out[i * d + j] = g[j] * h + b[j];
        }
    }
    let xt = x.clone();
    let gt = gamma.clone();
    let bt = beta.clone();
    let inv_std_saved = inv_std;
    let xhat_saved = xhat;
    Ok(Tensor::from_op(
        out,
        vec![n, d],
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |gout, _v, store| {
            let gamma_v = gt.values();
            store.add(&gt, |dg| {
                for i in 0..n {
                    for j in 0..d {
                        dg[j] += gout[i * d + j] * xhat_saved[i * d + j];
                    }
                }
            });
            store.add(&bt, |db| {
                for i in 0..n {
                    for j in 0..d {
                        db[j] += gout[i * d + j];
                    }
                }
            });
            store.add(&xt, |dx| {
                for i in 0..n {
                    for j in 0..d {
                        dx[i * d + j] += gout[i * d + j] * gamma_v[j] * inv_std_saved[j];
                    }
                }
            });
        }),
    ))
}
