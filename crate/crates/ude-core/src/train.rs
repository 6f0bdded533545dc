//! The three training procedures: supervised source training, domain-adapted
//! training (one mini-batch per domain per iteration, single combined update
//! through gradient reversal), and teacher-student distillation into a
//! domain-expanded model. Plus the learning-rate and lambda schedules.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Matrix};
use crate::error::{Error, Result};
use crate::losses::{self, KdVariant};
use crate::models::{self, grl_forward, Discriminator, Mode, Network};
use crate::optim::Sgd;
use crate::rng::named_stream;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Source,
    Ddc,
    Dann,
    Cdan,
    CdanPlus,
}

impl Method {
    pub fn is_adversarial(self) -> bool {
        matches!(self, Method::Dann | Method::Cdan | Method::CdanPlus)
    }
}

/// Trade-off weight for the domain loss: a fixed constant, or the standard
/// ramp `2 / (1 + exp(-10 p)) - 1` over training progress `p`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LambdaMode {
    Constant(f64),
    Dynamic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub step_epochs: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub lambda: LambdaMode,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: Option<LrDecay>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub kd_variant: KdVariant,
}

impl TrainConfig {
    /// Generic toy defaults: supervised settings for `Method::Source`,
    /// adaptation settings otherwise.
    pub fn toy(method: Method, seed: u64) -> TrainConfig {
        match method {
            Method::Source => TrainConfig::toy_source(seed),
            m => TrainConfig::toy_da(m, seed),
        }
    }

    /// Supervised stage defaults for the concentric-circles experiment.
    pub fn toy_source(seed: u64) -> TrainConfig {
        TrainConfig {
            method: Method::Source,
            lambda: LambdaMode::Constant(10.0),
            max_epochs: 400,
            batch_size: 32,
            learning_rate: 0.02,
            lr_decay: Some(LrDecay {
                step_epochs: 150,
                factor: 0.1,
            }),
            momentum: 0.9,
            weight_decay: 5e-4,
            seed,
            kd_variant: KdVariant::Kl,
        }
    }

    /// Adaptation stage defaults: lambda fixed at 10 with a longer, flatter
    /// schedule (the adversarial game converges more slowly than plain
    /// supervised training).
    pub fn toy_da(method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            max_epochs: 800,
            learning_rate: 0.01,
            lr_decay: None,
            ..TrainConfig::toy_source(seed)
        }
    }

    /// Distillation stage defaults.
    pub fn toy_kdde(seed: u64) -> TrainConfig {
        TrainConfig::toy_source(seed)
    }

    pub fn validate(&self, has_batchnorm: bool) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if has_batchnorm && self.batch_size < 2 {
            return Err(Error::config(
                "batch_size must be at least 2 when the model uses batch normalization",
            ));
        }
        if let LambdaMode::Constant(l) = self.lambda {
            if l < 0.0 {
                return Err(Error::config("lambda must be non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::config("learning_rate must be non-negative"));
        }
        if let Some(d) = &self.lr_decay {
            if d.step_epochs == 0 {
                return Err(Error::config("lr_decay.step_epochs must be positive"));
            }
            if d.factor <= 0.0 {
                return Err(Error::config("lr_decay.factor must be positive"));
            }
        }
        Ok(())
    }
}

/// Per-run training log, serialized next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub epochs_completed: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_clf: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_da: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_kd: Vec<f64>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    fn new(config: &TrainConfig) -> RunRecord {
        RunRecord {
            config: config.clone(),
            epochs_completed: 0,
            loss_clf: Vec::new(),
            loss_da: Vec::new(),
            loss_kd: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<RunRecord> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Lambda ramp at training progress `p` in [0, 1].
pub fn lambda_schedule(progress: f64) -> f64 {
    assert!(
        (0.0..=1.0).contains(&progress),
        "progress must be in [0, 1]"
    );
    2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0
}

fn lambda_at(config: &TrainConfig, progress: f64) -> f64 {
    match config.lambda {
        LambdaMode::Constant(l) => l,
        LambdaMode::Dynamic => lambda_schedule(progress),
    }
}

/// Step-decayed learning rate: `base * factor^floor(epoch / step_epochs)`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    match &config.lr_decay {
        None => config.learning_rate,
        Some(d) => config.learning_rate * d.factor.powi((epoch / d.step_epochs) as i32),
    }
}

/// Iterations per epoch: ceiling division, so every example is seen each
/// epoch and the final mini-batch may be short.
pub fn iters_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Without-replacement mini-batch sampler that reshuffles whenever its
/// examples are exhausted, which lets a smaller dataset cycle while a larger
/// one drives the iteration count.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, batch_size: usize, mut rng: ChaCha8Rng) -> Batcher {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Batcher {
            order,
            pos: 0,
            batch_size,
            rng,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        idx
    }
}

fn check_finite(name: &str, value: f64, epoch: usize) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::Divergence(format!(
            "{name} loss became {value} at epoch {epoch}"
        )));
    }
    Ok(value)
}

fn guard_short_batches(net: &Network, n: usize, batch_size: usize) -> Result<()> {
    if net.has_batchnorm() && n % batch_size == 1 {
        return Err(Error::config(format!(
            "batch_size {batch_size} leaves a single-example batch over {n} rows, \
             which batch normalization cannot consume"
        )));
    }
    Ok(())
}

fn batch_features(features: &Matrix, idx: &[usize]) -> Tensor {
    features.select_rows(idx).to_tensor()
}

/// Supervised training on the labeled source domain: minimizes the
/// classification loss by mini-batch SGD.
pub fn train_source(
    config: &TrainConfig,
    net: Network,
    source: &Dataset,
) -> Result<(Network, RunRecord)> {
    let labels = source
        .labels
        .as_ref()
        .ok_or_else(|| Error::contract("train_source requires a labeled dataset"))?;
    config.validate(net.has_batchnorm())?;
    guard_short_batches(&net, source.n(), config.batch_size)?;

    let start = Instant::now();
    let mut record = RunRecord::new(config);
    let params = net.parameters();
    let mut opt = Sgd::new(
        config.learning_rate,
        config.momentum,
        config.weight_decay,
        &params,
    );
    let mut batcher = Batcher::new(
        source.n(),
        config.batch_size,
        named_stream(config.seed, "batch/source"),
    );
    let iters = iters_per_epoch(source.n(), config.batch_size);

    for epoch in 0..config.max_epochs {
        opt.set_learning_rate(lr_at_epoch(config, epoch));
        let mut epoch_loss = 0.0;
        for _ in 0..iters {
            let idx = batcher.next();
            let x = batch_features(&source.features, &idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let out = net.forward(&x, Mode::Train)?;
            let loss = losses::classification_loss(&out.logits, &y)?;
            epoch_loss += check_finite(loss.name, loss.value(), epoch)?;
            loss.loss.backward()?;
            opt.step(&params)?;
        }
        record.loss_clf.push(epoch_loss / iters as f64);
        record.epochs_completed = epoch + 1;
    }
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((net, record))
}

/// Domain-adapted training: per iteration, one mini-batch from the source and
/// one from each target; the combined objective `L_clf + lambda * L_da` is
/// minimized in a single SGD update. The adversarial methods route the
/// discriminator input through gradient reversal, so the same update
/// simultaneously improves the discriminator and confuses it at the feature
/// extractor. Target labels are never read.
pub fn train_da(
    config: &TrainConfig,
    net: Network,
    source: &Dataset,
    targets: &[&Dataset],
) -> Result<(Network, RunRecord)> {
    if config.method == Method::Source {
        return Err(Error::contract(
            "train_da requires a domain-adaptation method, not `source`",
        ));
    }
    if config.method == Method::CdanPlus {
        if targets.is_empty() {
            return Err(Error::contract(
                "cdan_plus needs at least one target domain",
            ));
        }
    } else if targets.len() != 1 {
        return Err(Error::contract(format!(
            "method {:?} adapts to exactly one target domain, got {}",
            config.method,
            targets.len()
        )));
    }
    let labels = source
        .labels
        .as_ref()
        .ok_or_else(|| Error::contract("train_da requires a labeled source dataset"))?;
    config.validate(net.has_batchnorm())?;
    guard_short_batches(&net, source.n(), config.batch_size)?;
    for t in targets {
        guard_short_batches(&net, t.n(), config.batch_size)?;
        if t.dim() != source.dim() {
            return Err(Error::shape(
                "train_da",
                format!("target width {} vs source width {}", t.dim(), source.dim()),
            ));
        }
    }

    let start = Instant::now();
    let mut record = RunRecord::new(config);

    let disc: Option<Discriminator> = match config.method {
        Method::Ddc | Method::Source => None,
        Method::Dann => Some(models::toy_discriminator_from_rng(
            net.feature_dim,
            1,
            &mut named_stream(config.seed, "init/discriminator"),
        )),
        Method::Cdan => Some(models::toy_discriminator_from_rng(
            net.feature_dim * net.class_count,
            1,
            &mut named_stream(config.seed, "init/discriminator"),
        )),
        Method::CdanPlus => Some(models::toy_discriminator_from_rng(
            net.feature_dim * net.class_count,
            1 + targets.len(),
            &mut named_stream(config.seed, "init/discriminator"),
        )),
    };

    let mut params = net.parameters();
    if let Some(d) = &disc {
        params.extend(d.parameters());
    }
    let mut opt = Sgd::new(
        config.learning_rate,
        config.momentum,
        config.weight_decay,
        &params,
    );

    let mut source_batcher = Batcher::new(
        source.n(),
        config.batch_size,
        named_stream(config.seed, "batch/source"),
    );
    let mut target_batchers: Vec<Batcher> = targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            Batcher::new(
                t.n(),
                config.batch_size,
                named_stream(config.seed, &format!("batch/target/{i}")),
            )
        })
        .collect();

    let iters = iters_per_epoch(source.n(), config.batch_size);
    let total_iters = (config.max_epochs * iters).max(1);

    for epoch in 0..config.max_epochs {
        opt.set_learning_rate(lr_at_epoch(config, epoch));
        let mut epoch_clf = 0.0;
        let mut epoch_da = 0.0;
        for iter in 0..iters {
            let progress = (epoch * iters + iter) as f64 / total_iters as f64;
            let lambda = lambda_at(config, progress);

            let s_idx = source_batcher.next();
            let xs = batch_features(&source.features, &s_idx);
            let ys: Vec<usize> = s_idx.iter().map(|&i| labels[i]).collect();
            let out_s = net.forward(&xs, Mode::Train)?;
            let l_clf = losses::classification_loss(&out_s.logits, &ys)?;

            let mut outs_t = Vec::with_capacity(targets.len());
            for (t, b) in targets.iter().zip(target_batchers.iter_mut()) {
                let xt = batch_features(&t.features, &b.next());
                outs_t.push(net.forward(&xt, Mode::Train)?);
            }

            let l_da = match config.method {
                Method::Ddc => losses::ddc_loss(&out_s.features, &outs_t[0].features)?,
                Method::Dann => {
                    let d = disc.as_ref().unwrap();
                    let d_s = d.forward(&grl_forward(&out_s.features, 1.0))?;
                    let d_t = d.forward(&grl_forward(&outs_t[0].features, 1.0))?;
                    losses::domain_adversarial_loss(&d_s, &d_t)?
                }
                Method::Cdan => {
                    let d = disc.as_ref().unwrap();
                    let h_s = losses::cdan_condition(&out_s.features, &out_s.probs)?;
                    let h_t = losses::cdan_condition(&outs_t[0].features, &outs_t[0].probs)?;
                    let d_s = d.forward(&grl_forward(&h_s, 1.0))?;
                    let d_t = d.forward(&grl_forward(&h_t, 1.0))?;
                    losses::domain_adversarial_loss(&d_s, &d_t)?
                }
                Method::CdanPlus => {
                    let d = disc.as_ref().unwrap();
                    let mut logits = Vec::with_capacity(1 + outs_t.len());
                    let h_s = losses::cdan_condition(&out_s.features, &out_s.probs)?;
                    logits.push(d.forward(&grl_forward(&h_s, 1.0))?);
                    for out_t in &outs_t {
                        let h_t = losses::cdan_condition(&out_t.features, &out_t.probs)?;
                        logits.push(d.forward(&grl_forward(&h_t, 1.0))?);
                    }
                    let refs: Vec<&Tensor> = logits.iter().collect();
                    losses::multiway_domain_loss(&refs)?
                }
                Method::Source => unreachable!(),
            };

            epoch_clf += check_finite(l_clf.name, l_clf.value(), epoch)?;
            epoch_da += check_finite(l_da.name, l_da.value(), epoch)?;

            let total = l_clf.loss.add(&l_da.loss.scale(lambda))?;
            total.backward()?;
            opt.step(&params)?;
        }
        record.loss_clf.push(epoch_clf / iters as f64);
        record.loss_da.push(epoch_da / iters as f64);
        record.epochs_completed = epoch + 1;
    }
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((net, record))
}

/// Distill two frozen teachers into a freshly initialized student: the
/// soft-label loss `kd(teacher_src(X_s), student(X_s)) +
/// kd(teacher_da(X_t), student(X_t))` is minimized over the student only.
/// Teachers run in eval mode (frozen weights and statistics); the data enters
/// as bare feature matrices, so labels cannot be touched. Iterations per
/// epoch are driven by the larger of the two sets and the smaller one cycles.
pub fn train_kdde(
    config: &TrainConfig,
    student: Network,
    teacher_src: &Network,
    teacher_da: &Network,
    x_source: &Matrix,
    x_target: &Matrix,
) -> Result<(Network, RunRecord)> {
    if teacher_src.class_count != student.class_count
        || teacher_da.class_count != student.class_count
    {
        return Err(Error::contract(format!(
            "class counts differ: teachers {}/{}, student {}",
            teacher_src.class_count, teacher_da.class_count, student.class_count
        )));
    }
    config.validate(student.has_batchnorm())?;
    if x_source.rows() == 0 || x_target.rows() == 0 {
        return Err(Error::contract("train_kdde: empty training set"));
    }
    let driver = x_source.rows().max(x_target.rows());
    guard_short_batches(&student, driver, config.batch_size)?;

    let start = Instant::now();
    let mut record = RunRecord::new(config);
    let params = student.parameters();
    let mut opt = Sgd::new(
        config.learning_rate,
        config.momentum,
        config.weight_decay,
        &params,
    );
    let mut src_batcher = Batcher::new(
        x_source.rows(),
        config.batch_size,
        named_stream(config.seed, "batch/kdde/source"),
    );
    let mut tgt_batcher = Batcher::new(
        x_target.rows(),
        config.batch_size,
        named_stream(config.seed, "batch/kdde/target"),
    );
    let iters = iters_per_epoch(driver, config.batch_size);

    for epoch in 0..config.max_epochs {
        opt.set_learning_rate(lr_at_epoch(config, epoch));
        let mut epoch_kd = 0.0;
        for _ in 0..iters {
            let xs = batch_features(x_source, &src_batcher.next());
            let xt = batch_features(x_target, &tgt_batcher.next());

            let t_src = teacher_src.forward(&xs, Mode::Eval)?.probs.detach();
            let t_da = teacher_da.forward(&xt, Mode::Eval)?.probs.detach();

            let s_src = student.forward(&xs, Mode::Train)?.probs;
            let s_tgt = student.forward(&xt, Mode::Train)?.probs;

            let kd_src = losses::kd_loss(&t_src, &s_src, config.kd_variant)?;
            let kd_tgt = losses::kd_loss(&t_da, &s_tgt, config.kd_variant)?;
            let l_kd = kd_src.loss.add(&kd_tgt.loss)?;
            epoch_kd += check_finite("kd", l_kd.scalar_value(), epoch)?;
            l_kd.backward()?;
            opt.step(&params)?;
        }
        record.loss_kd.push(epoch_kd / iters as f64);
        record.epochs_completed = epoch + 1;
    }
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((student, record))
}
