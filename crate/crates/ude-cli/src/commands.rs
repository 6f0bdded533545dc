//! Implementations of the CLI subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use ude_core::baselines::{self, SelectorSystem};
use ude_core::data::{self, Dataset};
use ude_core::metrics::{self, ProbPredictor};
use ude_core::models::{build_toy_backbone, toy_backbone_from_rng};
use ude_core::rng::named_stream;
use ude_core::train::{self, LambdaMode, Method, TrainConfig};
use ude_core::{Error, EvalReport, Network, Result};

use crate::config::{ExperimentConfig, Stage};

pub const SOURCE_TRAIN: &str = "source_train.csv";
pub const SOURCE_TEST: &str = "source_test.csv";
pub const TARGET_TRAIN: &str = "target_train.csv";
pub const TARGET_TEST: &str = "target_test.csv";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn require_file(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "required file {} does not exist (run `ude gen` first?)",
            path.display()
        )));
    }
    Ok(())
}

fn load_dataset(dir: &Path, name: &str) -> Result<Dataset> {
    let path = dir.join(name);
    require_file(&path)?;
    data::load_csv(&path)
}

/// Generate the four toy CSVs: labeled source train/test, unlabeled target
/// train, labeled target test (labels retained only for scoring).
pub fn cmd_gen(cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    let dir = cfg.data_dir();
    ensure_dir(&dir)?;

    let source_full = data::generate_circles(
        cfg.data.n_pos,
        cfg.data.n_neg,
        cfg.data.noise_sd,
        &mut named_stream(seed, "data/source"),
    )?;
    let target_full = data::shift(
        &data::generate_circles(
            cfg.data.n_pos,
            cfg.data.n_neg,
            cfg.data.noise_sd,
            &mut named_stream(seed, "data/target"),
        )?,
        cfg.data.shift_dx,
        true,
    )
    .with_domain_tag("target");

    let (s_train, s_test) = data::split(
        &source_full,
        cfg.data.train_fraction,
        &mut named_stream(seed, "split/source"),
    )?;
    let (t_train_labeled, t_test) = data::split(
        &target_full,
        cfg.data.train_fraction,
        &mut named_stream(seed, "split/target"),
    )?;
    let t_train = t_train_labeled.without_labels();

    for (name, ds) in [
        (SOURCE_TRAIN, &s_train),
        (SOURCE_TEST, &s_test),
        (TARGET_TRAIN, &t_train),
        (TARGET_TEST, &t_test),
    ] {
        data::save_csv(ds, &dir.join(name))?;
        info!("wrote {} ({} rows)", dir.join(name).display(), ds.n());
    }
    Ok(())
}

fn stage_weight_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Source => "source_model.json",
        Stage::Da => "da_model.json",
        Stage::Kdde => "kdde_model.json",
    }
}

fn stage_record_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Source => "source_model.run.json",
        Stage::Da => "da_model.run.json",
        Stage::Kdde => "kdde_model.run.json",
    }
}

/// Train one stage and persist weights + run record into the output dir.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    stage: Stage,
    seed: u64,
    out_dir: &Path,
    teacher_src: Option<&Path>,
    teacher_da: Option<&Path>,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let dir = cfg.data_dir();
    let train_cfg = cfg.train_config(stage, seed)?;

    let (net, record) = match stage {
        Stage::Source => {
            let source = load_dataset(&dir, SOURCE_TRAIN)?;
            train::train_source(&train_cfg, build_toy_backbone(seed), &source)?
        }
        Stage::Da => {
            let source = load_dataset(&dir, SOURCE_TRAIN)?;
            let target = load_dataset(&dir, TARGET_TRAIN)?;
            train::train_da(&train_cfg, build_toy_backbone(seed), &source, &[&target])?
        }
        Stage::Kdde => {
            let t_src = teacher_src
                .ok_or_else(|| Error::Config("stage kdde requires --teacher-src".to_string()))?;
            let t_da = teacher_da
                .ok_or_else(|| Error::Config("stage kdde requires --teacher-da".to_string()))?;
            require_file(t_src)?;
            require_file(t_da)?;
            let teacher_src = Network::load(t_src)?;
            let teacher_da = Network::load(t_da)?;
            let source = load_dataset(&dir, SOURCE_TRAIN)?;
            let target = load_dataset(&dir, TARGET_TRAIN)?;
            let student = toy_backbone_from_rng(&mut named_stream(seed, "init/student"));
            train::train_kdde(
                &train_cfg,
                student,
                &teacher_src,
                &teacher_da,
                &source.features,
                &target.features,
            )?
        }
    };

    let weights_path = out_dir.join(stage_weight_name(stage));
    net.save(&weights_path)?;
    record.save(&out_dir.join(stage_record_name(stage)))?;
    info!(
        "trained stage {:?} in {:.1}s -> {}",
        stage,
        record.wall_clock_secs,
        weights_path.display()
    );
    Ok(())
}

fn eval_testsets(cfg: &ExperimentConfig) -> Result<Vec<Dataset>> {
    let dir = cfg.data_dir();
    cfg.eval
        .domains
        .iter()
        .map(|d| match d.as_str() {
            "source" => load_dataset(&dir, SOURCE_TEST),
            "target" => load_dataset(&dir, TARGET_TEST),
            other => Err(Error::Config(format!("unknown eval domain '{other}'"))),
        })
        .collect()
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".to_string())
}

fn report_line(name: &str, report: &EvalReport) -> String {
    let mut domains = String::new();
    for (tag, acc) in &report.per_domain_accuracy {
        let _ = write!(domains, "{tag} {acc:.4} ");
    }
    format!(
        "{name}: {domains}expanded {:.4}{}",
        report.expanded_accuracy,
        report
            .auc
            .map(|a| format!(" auc {a:.4}"))
            .unwrap_or_default()
    )
}

/// Evaluate each weights file on the configured domains; when both member
/// models are supplied, also evaluate the selector (with a freshly trained
/// domain classifier), the oracle selector, and the late-fusion ensemble.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
    weights: &[PathBuf],
    teacher_src: Option<&Path>,
    teacher_da: Option<&Path>,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let testsets = eval_testsets(cfg)?;
    let testset_refs: Vec<&Dataset> = testsets.iter().collect();
    if weights.is_empty() && (teacher_src.is_none() || teacher_da.is_none()) {
        return Err(Error::Config(
            "nothing to evaluate: pass weights files and/or both --teacher-src and --teacher-da"
                .to_string(),
        ));
    }

    for path in weights {
        require_file(path)?;
        let net = Network::load(path)?;
        let report = metrics::evaluate(&net, &testset_refs)?;
        let name = file_stem(path);
        report.save(&out_dir.join(format!("eval_{name}.json")))?;
        info!("{}", report_line(&name, &report));

        for &n in &cfg.eval.retrieval_n {
            let csv = retrieval_probe(cfg, &net, n)?;
            std::fs::write(out_dir.join(format!("retrieval_{name}_p{n}.csv")), csv)?;
        }
    }

    if let (Some(ts), Some(td)) = (teacher_src, teacher_da) {
        require_file(ts)?;
        require_file(td)?;
        let g_s = Network::load(ts)?;
        let g_da = Network::load(td)?;

        // member models themselves
        for (tag, net) in [("member_src", &g_s), ("member_da", &g_da)] {
            let report = metrics::evaluate(net, &testset_refs)?;
            report.save(&out_dir.join(format!("eval_{tag}.json")))?;
            info!("{}", report_line(tag, &report));
        }

        // selector with a trained domain classifier
        let dir = cfg.data_dir();
        let s_train = load_dataset(&dir, SOURCE_TRAIN)?;
        let t_train = load_dataset(&dir, TARGET_TRAIN)?;
        let clf_cfg = cfg.train_config(Stage::Source, seed)?;
        let (domain_clf, _) = baselines::train_domain_classifier(
            &clf_cfg,
            build_toy_backbone(seed),
            &s_train,
            &t_train,
        )?;
        domain_clf.save(&out_dir.join("domain_clf.json"))?;
        let selector = SelectorSystem::new(domain_clf, g_s.clone_weights(), g_da.clone_weights())?;
        let report = metrics::evaluate(&selector, &testset_refs)?;
        report.save(&out_dir.join("eval_selector.json"))?;
        info!("{}", report_line("selector", &report));

        // oracle selector: route each domain's test set by its true tag
        let oracle = oracle_report(&g_s, &g_da, &testset_refs)?;
        oracle.save(&out_dir.join("eval_selector_oracle.json"))?;
        info!("{}", report_line("selector_oracle", &oracle));

        // late average fusion
        let ensemble = baselines::Ensemble::new(&g_s, &g_da)?;
        let report = metrics::evaluate(&ensemble, &testset_refs)?;
        report.save(&out_dir.join("eval_ensemble.json"))?;
        info!("{}", report_line("ensemble", &report));
    }
    Ok(())
}

/// Assemble an eval report for ground-truth routing: the source test set is
/// scored by the source member, everything else by the adapted member.
fn oracle_report(g_s: &Network, g_da: &Network, testsets: &[&Dataset]) -> Result<EvalReport> {
    let k = g_s.class_count;
    let mut per_domain = BTreeMap::new();
    let mut pooled = vec![vec![0u64; k]; k];
    let mut scores = Vec::new();
    let mut bin_labels = Vec::new();
    let mut accs = Vec::new();
    for ds in testsets {
        let member: &Network = if ds.domain_tag == "source" { g_s } else { g_da };
        let acc = metrics::accuracy(member, ds)?;
        per_domain.insert(ds.domain_tag.clone(), acc);
        accs.push(acc);
        let c = metrics::confusion(member, ds)?;
        for (pool_row, row) in pooled.iter_mut().zip(&c) {
            for (pool_cell, cell) in pool_row.iter_mut().zip(row) {
                *pool_cell += cell;
            }
        }
        if k == 2 {
            let probs = member.predict_probs(&ds.features)?;
            let labels = ds.labels.as_ref().expect("eval sets are labeled");
            for (i, &label) in labels.iter().enumerate() {
                scores.push(probs.get(i, 1));
                bin_labels.push(label == 1);
            }
        }
    }
    Ok(EvalReport {
        expanded_accuracy: metrics::expanded_accuracy(&accs),
        per_domain_accuracy: per_domain,
        per_class_f1: metrics::f1_per_class(&pooled),
        confusion: pooled,
        auc: if k == 2 {
            Some(metrics::auc(&scores, &bin_labels)?)
        } else {
            None
        },
    })
}

/// Cross-domain retrieval: query each source-test example against the
/// target-test corpus and vice versa, in the model's feature space.
fn retrieval_probe(cfg: &ExperimentConfig, net: &Network, n: usize) -> Result<String> {
    let dir = cfg.data_dir();
    let s_test = load_dataset(&dir, SOURCE_TEST)?;
    let t_test = load_dataset(&dir, TARGET_TEST)?;
    let s_feats = metrics::export_features(net, &s_test)?;
    let t_feats = metrics::export_features(net, &t_test)?;
    let s_labels = s_test
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("retrieval needs labeled test sets".to_string()))?;
    let t_labels = t_test
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("retrieval needs labeled test sets".to_string()))?;

    let s_on_t = metrics::retrieval_precision(&s_feats, s_labels, &t_feats, t_labels, n)?;
    let t_on_s = metrics::retrieval_precision(&t_feats, t_labels, &s_feats, s_labels, n)?;
    Ok(format!(
        "direction,n,precision\nquery_source_on_target,{n},{s_on_t}\nquery_target_on_source,{n},{t_on_s}\n"
    ))
}

/// One row of the lambda sweep table.
struct SweepRow {
    lambda: f64,
    seed: u64,
    acc_source: f64,
    acc_target: f64,
    acc_expanded: f64,
    bn_max_delta: f64,
}

/// Train the DA model across a lambda grid (and seed list), recording
/// per-domain and expanded accuracy plus how far the batchnorm running means
/// moved from an identically trained source-only reference.
pub fn cmd_sweep_lambda(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<()> {
    ensure_dir(out_dir)?;
    let dir = cfg.data_dir();
    let s_train = load_dataset(&dir, SOURCE_TRAIN)?;
    let t_train = load_dataset(&dir, TARGET_TRAIN)?;
    let s_test = load_dataset(&dir, SOURCE_TEST)?;
    let t_test = load_dataset(&dir, TARGET_TEST)?;

    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one lambda and one seed".into(),
        ));
    }
    for &l in lambdas {
        if l < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {l}"
            )));
        }
    }

    // per-seed source-only references, trained with the DA stage's schedule
    // so the batchnorm comparison is like for like
    let references: Vec<(u64, Vec<Vec<f64>>)> = seeds
        .par_iter()
        .map(|&seed| {
            let da_cfg = cfg.train_config(Stage::Da, seed)?;
            let src_cfg = TrainConfig {
                method: Method::Source,
                ..da_cfg
            };
            let (net, _) = train::train_source(&src_cfg, build_toy_backbone(seed), &s_train)?;
            Ok((seed, net.batchnorm_running_means()))
        })
        .collect::<Result<Vec<_>>>()?;
    let reference_means: BTreeMap<u64, Vec<Vec<f64>>> = references.into_iter().collect();

    let mut cells: Vec<(usize, f64, u64)> = Vec::new();
    for (i, &l) in lambdas.iter().enumerate() {
        for &s in seeds {
            cells.push((i, l, s));
        }
    }

    let mut rows: Vec<(usize, SweepRow)> = cells
        .par_iter()
        .map(|&(order, lambda, seed)| {
            let mut da_cfg = cfg.train_config(Stage::Da, seed)?;
            da_cfg.lambda = LambdaMode::Constant(lambda);
            let cell_dir = out_dir.join(format!("sweep/lambda_{lambda}_seed_{seed}"));
            ensure_dir(&cell_dir)?;
            let (net, record) =
                train::train_da(&da_cfg, build_toy_backbone(seed), &s_train, &[&t_train])?;
            net.save(&cell_dir.join("weights.json"))?;
            record.save(&cell_dir.join("run.json"))?;

            let acc_source = metrics::accuracy(&net, &s_test)?;
            let acc_target = metrics::accuracy(&net, &t_test)?;
            let bn_max_delta = reference_means[&seed]
                .iter()
                .flatten()
                .zip(net.batchnorm_running_means().iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            Ok((
                order,
                SweepRow {
                    lambda,
                    seed,
                    acc_source,
                    acc_target,
                    acc_expanded: metrics::expanded_accuracy(&[acc_source, acc_target]),
                    bn_max_delta,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    rows.sort_by_key(|(order, row)| (*order, row.seed));
    let mut csv = String::from(
        "lambda,seed,acc_source,acc_target,acc_expanded,bn_running_mean_max_delta,bn_stats_differ\n",
    );
    for (_, r) in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.lambda,
            r.seed,
            r.acc_source,
            r.acc_target,
            r.acc_expanded,
            r.bn_max_delta,
            r.bn_max_delta > 1e-8
        );
    }
    let path = out_dir.join("sweep_lambda.csv");
    std::fs::write(&path, csv)?;
    info!("wrote {} ({} rows)", path.display(), rows.len());
    Ok(())
}

/// Export feature rows `z = F(x)` for every configured eval domain.
pub fn cmd_export_features(cfg: &ExperimentConfig, out_dir: &Path, weights: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    require_file(weights)?;
    let net = Network::load(weights)?;
    let name = file_stem(weights);
    for ds in eval_testsets(cfg)? {
        let feats = metrics::export_features(&net, &ds)?;
        let path = out_dir.join(format!("features_{name}_{}.csv", ds.domain_tag));
        metrics::write_features_csv(&feats, ds.labels.as_deref(), &ds.domain_tag, &path)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

/// Export the decision-boundary lattice defined by `[eval.boundary]`.
pub fn cmd_export_boundary(cfg: &ExperimentConfig, out_dir: &Path, weights: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    require_file(weights)?;
    let spec = cfg.eval.boundary.as_ref().ok_or_else(|| {
        Error::Config("export-boundary needs an [eval.boundary] section".to_string())
    })?;
    let net = Network::load(weights)?;
    let grid = metrics::boundary_grid(
        &net,
        (spec.x_min, spec.x_max),
        (spec.y_min, spec.y_max),
        spec.resolution,
    )?;
    let path = out_dir.join(format!("boundary_{}.csv", file_stem(weights)));
    metrics::write_boundary_csv(&grid, &path)?;
    info!("wrote {} ({} cells)", path.display(), grid.len());
    Ok(())
}
