//! Shared test machinery: the central finite-difference gradient oracle and
//! the audit that runs it against every layer type and every loss.
//!
//! The oracle only ever evaluates forward passes, so it stays independent of
//! the backward implementation it checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ude_core::losses::{self, KdVariant};
use ude_core::models::{grl_forward, BatchNorm1d, Linear, Mode};
use ude_core::ops::{batchnorm_eval, batchnorm_train};
use ude_core::rng::named_stream;
use ude_core::Tensor;

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Central finite differences of `f` with respect to `param`'s entries.
/// Restores the original values afterwards.
pub fn finite_diff_grad(param: &Tensor, eps: f64, f: &dyn Fn() -> f64) -> Vec<f64> {
    let base = param.values();
    let mut grad = vec![0.0; base.len()];
    let mut work = base.clone();
    for i in 0..base.len() {
        work[i] = base[i] + eps;
        param.set_values(&work);
        let fp = f();
        work[i] = base[i] - eps;
        param.set_values(&work);
        let fm = f();
        work[i] = base[i];
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    param.set_values(&base);
    grad
}

/// Worst relative disagreement; the denominator is floored so that gradient
/// entries near zero are compared absolutely against the noise floor of
/// central differences.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// One gradient-audit scenario: parameters to differentiate, a loss builder
/// that reconstructs the graph from current parameter values, and the factor
/// relating the analytic gradient to the plain forward derivative (1 almost
/// everywhere; `-lambda` on paths that cross gradient reversal).
pub struct GradScenario {
    pub name: String,
    pub params: Vec<Tensor>,
    pub build: Box<dyn Fn() -> Tensor>,
    pub numeric_scale: f64,
}

impl GradScenario {
    /// Max relative error between analytic and (scaled) finite-difference
    /// gradients over all checked parameters.
    pub fn check(&self) -> f64 {
        for p in &self.params {
            p.zero_grad();
        }
        let loss = (self.build)();
        loss.backward().expect("backward failed");
        let mut worst = 0.0f64;
        for p in &self.params {
            let analytic = p
                .grad()
                .unwrap_or_else(|| panic!("{}: missing gradient", self.name));
            let f = &self.build;
            let value_fn = move || f().scalar_value();
            let numeric: Vec<f64> = finite_diff_grad(p, FD_EPS, &value_fn)
                .iter()
                .map(|g| g * self.numeric_scale)
                .collect();
            worst = worst.max(max_rel_err(&analytic, &numeric));
        }
        // leave no stale gradients behind
        for p in &self.params {
            p.zero_grad();
        }
        worst
    }
}

fn rng_for(name: &str, instance: u64) -> ChaCha8Rng {
    named_stream(instance, &format!("gradcheck/{name}"))
}

/// Random matrix with entries pushed away from zero (ReLU kinks) by at least
/// `margin`.
fn rand_param(rng: &mut ChaCha8Rng, rows: usize, cols: usize, margin: f64) -> Tensor {
    let vals: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            if v.abs() < margin {
                v + margin.copysign(if v == 0.0 { 1.0 } else { v })
            } else {
                v
            }
        })
        .collect();
    if rows == 1 {
        Tensor::param(vals, &[cols])
    } else {
        Tensor::param(vals, &[rows, cols])
    }
}

fn rand_const(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let vals: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    if rows == 1 {
        Tensor::constant(vals, &[cols])
    } else {
        Tensor::constant(vals, &[rows, cols])
    }
}

fn rand_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

fn rand_stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut vals = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.random::<f64>() + 0.05).collect();
        let sum: f64 = raw.iter().sum();
        vals.extend(raw.iter().map(|v| v / sum));
    }
    Tensor::constant(vals, &[rows, cols])
}

/// Weighted sum against fixed random coefficients: scalarizes an op output
/// without the symmetric-gradient blind spots of a plain sum.
fn weighted_sum(t: &Tensor, weights: &Tensor) -> Tensor {
    t.mul(weights).unwrap().sum_all()
}

struct MiniNet {
    l1: Linear,
    bn: BatchNorm1d,
    l2: Linear,
}

impl MiniNet {
    fn new(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize, out_dim: usize) -> MiniNet {
        let net = MiniNet {
            l1: Linear::new(in_dim, hidden, rng),
            bn: BatchNorm1d::new(hidden),
            l2: Linear::new(hidden, out_dim, rng),
        };
        // randomize the affine so its gradients are not trivially symmetric
        let g: Vec<f64> = (0..hidden)
            .map(|_| 1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let b: Vec<f64> = (0..hidden)
            .map(|_| 0.2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        net.bn.gamma.set_values(&g);
        net.bn.beta.set_values(&b);
        net
    }

    fn params(&self) -> Vec<Tensor> {
        let mut out = self.extractor_params();
        out.push(self.l2.weight.clone());
        out.push(self.l2.bias.clone());
        out
    }

    /// Parameters that participate when only `features` is evaluated.
    fn extractor_params(&self) -> Vec<Tensor> {
        vec![
            self.l1.weight.clone(),
            self.l1.bias.clone(),
            self.bn.gamma.clone(),
            self.bn.beta.clone(),
        ]
    }

    fn features(&self, x: &Tensor) -> Tensor {
        let h = self.l1.forward(x).unwrap();
        self.bn.forward(&h, Mode::Train).unwrap().relu()
    }

    fn logits(&self, x: &Tensor) -> Tensor {
        self.l2.forward(&self.features(x)).unwrap()
    }
}

struct MiniDisc {
    l1: Linear,
    l2: Linear,
}

impl MiniDisc {
    fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> MiniDisc {
        let disc = MiniDisc {
            l1: Linear::new(in_dim, 4, rng),
            l2: Linear::new(4, out_dim, rng),
        };
        // an all-zero feature row (everything negative before relu) would put
        // zero-initialized biases exactly on the relu kink, where central
        // differences are undefined; keep them clear of it
        disc.l1
            .bias
            .set_values(&rand_param(rng, 1, 4, 0.05).values());
        disc.l2
            .bias
            .set_values(&rand_param(rng, 1, out_dim, 0.05).values());
        disc
    }

    fn params(&self) -> Vec<Tensor> {
        vec![
            self.l1.weight.clone(),
            self.l1.bias.clone(),
            self.l2.weight.clone(),
            self.l2.bias.clone(),
        ]
    }

    fn forward(&self, h: &Tensor) -> Tensor {
        self.l2
            .forward(&self.l1.forward(h).unwrap().relu())
            .unwrap()
    }

    fn forward_sigmoid(&self, h: &Tensor) -> Tensor {
        self.forward(h).sigmoid()
    }
}

/// Every layer-type and loss scenario for one instance seed.
pub fn scenarios(instance: u64) -> Vec<GradScenario> {
    let mut out: Vec<GradScenario> = Vec::new();

    // --- layer types -----------------------------------------------------
    {
        let mut rng = rng_for("linear", instance);
        let x = rand_param(&mut rng, 4, 3, 1e-3);
        let w = rand_param(&mut rng, 3, 5, 0.0);
        let b = rand_param(&mut rng, 1, 5, 0.0);
        let r = rand_const(&mut rng, 4, 5);
        out.push(GradScenario {
            name: "layer/linear".into(),
            params: vec![x.clone(), w.clone(), b.clone()],
            build: Box::new(move || weighted_sum(&x.matmul(&w).unwrap().add_bias(&b).unwrap(), &r)),
            numeric_scale: 1.0,
        });
    }
    {
        let mut rng = rng_for("relu", instance);
        let x = rand_param(&mut rng, 4, 5, 1e-3);
        let r = rand_const(&mut rng, 4, 5);
        out.push(GradScenario {
            name: "layer/relu".into(),
            params: vec![x.clone()],
            build: Box::new(move || weighted_sum(&x.relu(), &r)),
            numeric_scale: 1.0,
        });
    }
    {
        let mut rng = rng_for("batchnorm_train", instance);
        let x = rand_param(&mut rng, 6, 4, 0.0);
        let gamma = rand_param(&mut rng, 1, 4, 0.1);
        let beta = rand_param(&mut rng, 1, 4, 0.0);
        let r = rand_const(&mut rng, 6, 4);
        out.push(GradScenario {
            name: "layer/batchnorm_train".into(),
            params: vec![x.clone(), gamma.clone(), beta.clone()],
            build: Box::new(move || {
                let (y, _, _) = batchnorm_train(&x, &gamma, &beta, 1e-5).unwrap();
                weighted_sum(&y, &r)
            }),
            numeric_scale: 1.0,
        });
    }
    {
        let mut rng = rng_for("batchnorm_eval", instance);
        let x = rand_param(&mut rng, 5, 3, 0.0);
        let gamma = rand_param(&mut rng, 1, 3, 0.1);
        let beta = rand_param(&mut rng, 1, 3, 0.0);
        let rm: Vec<f64> = (0..3)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let rv: Vec<f64> = (0..3).map(|_| 0.5 + rng.random::<f64>()).collect();
        let r = rand_const(&mut rng, 5, 3);
        out.push(GradScenario {
            name: "layer/batchnorm_eval".into(),
            params: vec![x.clone(), gamma.clone(), beta.clone()],
            build: Box::new(move || {
                weighted_sum(
                    &batchnorm_eval(&x, &gamma, &beta, &rm, &rv, 1e-5).unwrap(),
                    &r,
                )
            }),
            numeric_scale: 1.0,
        });
    }
    {
        let mut rng = rng_for("softmax", instance);
        let x = rand_param(&mut rng, 3, 4, 0.0);
        let r = rand_const(&mut rng, 3, 4);
        out.push(GradScenario {
            name: "layer/softmax".into(),
            params: vec![x.clone()],
            build: Box::new(move || weighted_sum(&x.softmax(), &r)),
            numeric_scale: 1.0,
        });
    }
    {
        let mut rng = rng_for("log_softmax", instance);
        let x = rand_param(&mut rng, 3, 4, 0.0);
        let r = rand_const(&mut rng, 3, 4);
        out.push(GradScenario {
            name: "layer/log_softmax".into(),
            params: vec![x.clone()],
            build: Box::new(move || weighted_sum(&x.log_softmax(), &r)),
            numeric_scale: 1.0,
        });
    }
    {
        let mut rng = rng_for("sigmoid", instance);
        let x = rand_param(&mut rng, 4, 3, 0.0);
        let r = rand_const(&mut rng, 4, 3);
        out.push(GradScenario {
            name: "layer/sigmoid".into(),
            params: vec![x.clone()],
            build: Box::new(move || weighted_sum(&x.sigmoid(), &r)),
            numeric_scale: 1.0,
        });
    }
    {
        let mut rng = rng_for("log_clamped", instance);
        let raw = rand_param(&mut rng, 3, 3, 0.0);
        let shifted: Vec<f64> = raw.values().iter().map(|v| v.abs() + 0.1).collect();
        raw.set_values(&shifted);
        let r = rand_const(&mut rng, 3, 3);
        out.push(GradScenario {
            name: "layer/log_clamped".into(),
            params: vec![raw.clone()],
            build: Box::new(move || weighted_sum(&raw.ln_clamped(), &r)),
            numeric_scale: 1.0,
        });
    }
    {
        let mut rng = rng_for("outer_product", instance);
        let z = rand_param(&mut rng, 3, 4, 0.0);
        let p = rand_param(&mut rng, 3, 2, 0.0);
        let r = rand_const(&mut rng, 3, 8);
        out.push(GradScenario {
            name: "layer/outer_product".into(),
            params: vec![z.clone(), p.clone()],
            build: Box::new(move || weighted_sum(&z.row_outer(&p).unwrap(), &r)),
            numeric_scale: 1.0,
        });
    }
    {
        let mut rng = rng_for("reductions", instance);
        let x = rand_param(&mut rng, 4, 3, 0.0);
        out.push(GradScenario {
            name: "layer/reductions".into(),
            params: vec![x.clone()],
            build: Box::new(move || {
                let col_means = x.mean_axis0().unwrap();
                x.mean_all()
                    .add(&x.sum_all().scale(0.3))
                    .unwrap()
                    .add(&col_means.mul(&col_means).unwrap().sum_all())
                    .unwrap()
            }),
            numeric_scale: 1.0,
        });
    }
    {
        // forward derivative is the identity path; analytic must be -lambda times it
        let mut rng = rng_for("grl", instance);
        let z = rand_param(&mut rng, 3, 4, 0.0);
        let r = rand_const(&mut rng, 3, 4);
        let lambda = 3.7;
        out.push(GradScenario {
            name: "layer/gradient_reversal".into(),
            params: vec![z.clone()],
            build: Box::new(move || weighted_sum(&grl_forward(&z, lambda), &r)),
            numeric_scale: -lambda,
        });
    }

    // --- losses ----------------------------------------------------------
    {
        let mut rng = rng_for("clf_loss", instance);
        let net = MiniNet::new(&mut rng, 3, 5, 4);
        let x = rand_const(&mut rng, 8, 3);
        let labels = rand_labels(&mut rng, 8, 4);
        let params = net.params();
        out.push(GradScenario {
            name: "loss/classification".into(),
            params,
            build: Box::new(move || {
                losses::classification_loss(&net.logits(&x), &labels)
                    .unwrap()
                    .loss
            }),
            numeric_scale: 1.0,
        });
    }
    {
        let mut rng = rng_for("ddc_loss", instance);
        let net = MiniNet::new(&mut rng, 3, 5, 4);
        let xs = rand_param(&mut rng, 6, 3, 0.0);
        let xt = rand_const(&mut rng, 4, 3);
        let mut params = net.extractor_params();
        params.push(xs.clone());
        out.push(GradScenario {
            name: "loss/ddc".into(),
            params,
            build: Box::new(move || {
                losses::ddc_loss(&net.features(&xs), &net.features(&xt))
                    .unwrap()
                    .loss
            }),
            numeric_scale: 1.0,
        });
    }
    {
        // adversarial losses split per parameter group: the discriminator path
        // matches plain finite differences; every extractor path runs through
        // gradient reversal with factor 1, so its analytic gradient is the
        // negated forward derivative.
        for (scale, group) in [(1.0, "disc"), (-1.0, "extractor")] {
            let mut rng = rng_for("dann_loss", instance);
            let net = MiniNet::new(&mut rng, 3, 5, 4);
            let disc = MiniDisc::new(&mut rng, 5, 1);
            let xs = rand_const(&mut rng, 6, 3);
            let xt = rand_const(&mut rng, 5, 3);
            let params = if group == "disc" {
                disc.params()
            } else {
                net.extractor_params()
            };
            out.push(GradScenario {
                name: format!("loss/dann_adversarial[{group}]"),
                params,
                build: Box::new(move || {
                    let d_s = disc.forward_sigmoid(&grl_forward(&net.features(&xs), 1.0));
                    let d_t = disc.forward_sigmoid(&grl_forward(&net.features(&xt), 1.0));
                    losses::domain_adversarial_loss(&d_s, &d_t).unwrap().loss
                }),
                numeric_scale: scale,
            });
        }
    }
    {
        for (scale, group) in [(1.0, "disc"), (-1.0, "extractor")] {
            let mut rng = rng_for("cdan_loss", instance);
            let net = MiniNet::new(&mut rng, 3, 5, 4);
            let disc = MiniDisc::new(&mut rng, 20, 1);
            let xs = rand_const(&mut rng, 6, 3);
            let xt = rand_const(&mut rng, 5, 3);
            let params = if group == "disc" {
                disc.params()
            } else {
                net.params()
            };
            out.push(GradScenario {
                name: format!("loss/cdan_adversarial[{group}]"),
                params,
                build: Box::new(move || {
                    let conditioned = |x: &Tensor| {
                        let z = net.features(x);
                        let probs = net.l2.forward(&z).unwrap().softmax();
                        losses::cdan_condition(&z, &probs).unwrap()
                    };
                    let d_s = disc.forward_sigmoid(&grl_forward(&conditioned(&xs), 1.0));
                    let d_t = disc.forward_sigmoid(&grl_forward(&conditioned(&xt), 1.0));
                    losses::domain_adversarial_loss(&d_s, &d_t).unwrap().loss
                }),
                numeric_scale: scale,
            });
        }
    }
    {
        for (scale, group) in [(1.0, "disc"), (-1.0, "extractor")] {
            let mut rng = rng_for("cdan_plus_loss", instance);
            let net = MiniNet::new(&mut rng, 3, 5, 4);
            let disc = MiniDisc::new(&mut rng, 20, 3);
            let x0 = rand_const(&mut rng, 5, 3);
            let x1 = rand_const(&mut rng, 4, 3);
            let x2 = rand_const(&mut rng, 6, 3);
            let params = if group == "disc" {
                disc.params()
            } else {
                net.params()
            };
            out.push(GradScenario {
                name: format!("loss/cdan_plus_multiway[{group}]"),
                params,
                build: Box::new(move || {
                    let logits_for = |x: &Tensor| {
                        let z = net.features(x);
                        let probs = net.l2.forward(&z).unwrap().softmax();
                        let h = losses::cdan_condition(&z, &probs).unwrap();
                        disc.forward(&grl_forward(&h, 1.0))
                    };
                    let l0 = logits_for(&x0);
                    let l1 = logits_for(&x1);
                    let l2 = logits_for(&x2);
                    losses::multiway_domain_loss(&[&l0, &l1, &l2]).unwrap().loss
                }),
                numeric_scale: scale,
            });
        }
    }
    for (variant, tag) in [
        (KdVariant::Kl, "kl"),
        (KdVariant::Ce, "ce"),
        (KdVariant::L2, "l2"),
    ] {
        let mut rng = rng_for(&format!("kd_{tag}"), instance);
        let net = MiniNet::new(&mut rng, 3, 5, 4);
        let x = rand_const(&mut rng, 6, 3);
        let teacher = rand_stochastic(&mut rng, 6, 4);
        let params = net.params();
        out.push(GradScenario {
            name: format!("loss/kd_{tag}"),
            params,
            build: Box::new(move || {
                let student = net.logits(&x).softmax();
                losses::kd_loss(&teacher, &student, variant).unwrap().loss
            }),
            numeric_scale: 1.0,
        });
    }

    out
}
