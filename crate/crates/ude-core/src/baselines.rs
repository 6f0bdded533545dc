//! Comparison systems for the expanded domain: routing test examples to a
//! source or target model via a trained (or oracle) domain classifier, and
//! late average fusion of the two models' probabilities.

use crate::data::{Dataset, Matrix};
use crate::error::{Error, Result};
use crate::metrics::ProbPredictor;
use crate::models::Network;
use crate::train::{train_source, RunRecord, TrainConfig};

/// Three-model system: a binary domain classifier over raw inputs
/// (class 0 = source, class 1 = target) routing between a source-only model
/// and a domain-adapted model.
pub struct SelectorSystem {
    pub domain_clf: Network,
    pub model_source: Network,
    pub model_target: Network,
}

impl SelectorSystem {
    pub fn new(
        domain_clf: Network,
        model_source: Network,
        model_target: Network,
    ) -> Result<SelectorSystem> {
        if model_source.class_count != model_target.class_count {
            return Err(Error::contract(format!(
                "member class counts differ: {} vs {}",
                model_source.class_count, model_target.class_count
            )));
        }
        if domain_clf.class_count != 2 {
            return Err(Error::contract(
                "domain classifier must be binary (source=0, target=1)",
            ));
        }
        let widths = [
            domain_clf.input_dim(),
            model_source.input_dim(),
            model_target.input_dim(),
        ];
        if widths[0] != widths[1] || widths[1] != widths[2] {
            return Err(Error::contract(format!(
                "selector members disagree on input width: {widths:?}"
            )));
        }
        Ok(SelectorSystem {
            domain_clf,
            model_source,
            model_target,
        })
    }
}

/// Train a binary domain classifier on raw inputs: source examples labeled 0,
/// target examples labeled 1, optimized with the supervised trainer.
pub fn train_domain_classifier(
    config: &TrainConfig,
    net: Network,
    source: &Dataset,
    target: &Dataset,
) -> Result<(Network, RunRecord)> {
    if source.n() == 0 || target.n() == 0 {
        return Err(Error::contract("both domains must be nonempty"));
    }
    if source.dim() != target.dim() {
        return Err(Error::shape(
            "train_domain_classifier",
            format!("{} vs {} features", source.dim(), target.dim()),
        ));
    }
    if net.class_count != 2 {
        return Err(Error::contract(
            "domain classifier network must have 2 outputs",
        ));
    }
    let mut data = Vec::with_capacity((source.n() + target.n()) * source.dim());
    data.extend_from_slice(source.features.data());
    data.extend_from_slice(target.features.data());
    let mut labels = vec![0usize; source.n()];
    labels.extend(vec![1usize; target.n()]);
    let combined = Dataset {
        features: Matrix::new(source.n() + target.n(), source.dim(), data),
        labels: Some(labels),
        domain_tag: "domains".to_string(),
        k: 2,
    };
    train_source(config, net, &combined)
}

/// Route each row to the source or target model given an externally supplied
/// probability of coming from the source domain; ties at exactly 0.5 go to
/// the source model.
pub fn route_predict(
    prob_source: &[f64],
    model_source: &Network,
    model_target: &Network,
    x: &Matrix,
) -> Result<Matrix> {
    if prob_source.len() != x.rows() {
        return Err(Error::shape(
            "route_predict",
            format!("{} scores for {} rows", prob_source.len(), x.rows()),
        ));
    }
    let from_source = model_source.predict_probs(x)?;
    let from_target = model_target.predict_probs(x)?;
    let k = from_source.cols();
    let mut out = Vec::with_capacity(x.rows() * k);
    for (i, &p_src) in prob_source.iter().enumerate() {
        let row = if p_src >= 0.5 {
            from_source.row(i)
        } else {
            from_target.row(i)
        };
        out.extend_from_slice(row);
    }
    Ok(Matrix::new(x.rows(), k, out))
}

/// Model-selection prediction: consult the trained domain classifier, then
/// delegate each example to the corresponding member model.
pub fn select_predict(sys: &SelectorSystem, x: &Matrix) -> Result<Matrix> {
    let domain_probs = sys.domain_clf.predict_probs(x)?;
    let prob_source: Vec<f64> = (0..x.rows()).map(|i| domain_probs.get(i, 0)).collect();
    route_predict(&prob_source, &sys.model_source, &sys.model_target, x)
}

impl ProbPredictor for SelectorSystem {
    fn class_count(&self) -> usize {
        self.model_source.class_count
    }

    fn predict_probs(&self, x: &Matrix) -> Result<Matrix> {
        select_predict(self, x)
    }
}

/// Ground-truth routing: the whole batch is known to come from the source
/// (or target) domain, so it goes to the corresponding model unconditionally.
pub fn oracle_select_predict(
    from_source: bool,
    model_source: &Network,
    model_target: &Network,
    x: &Matrix,
) -> Result<Matrix> {
    if from_source {
        model_source.predict_probs(x)
    } else {
        model_target.predict_probs(x)
    }
}

/// Late average fusion of two models' probability outputs.
pub struct Ensemble<'a> {
    pub model_a: &'a Network,
    pub model_b: &'a Network,
}

impl<'a> Ensemble<'a> {
    pub fn new(model_a: &'a Network, model_b: &'a Network) -> Result<Ensemble<'a>> {
        if model_a.class_count != model_b.class_count {
            return Err(Error::contract(format!(
                "ensemble members disagree on class count: {} vs {}",
                model_a.class_count, model_b.class_count
            )));
        }
        Ok(Ensemble { model_a, model_b })
    }
}

pub fn ensemble_predict(model_a: &Network, model_b: &Network, x: &Matrix) -> Result<Matrix> {
    Ensemble::new(model_a, model_b)?.predict_probs(x)
}

impl ProbPredictor for Ensemble<'_> {
    fn class_count(&self) -> usize {
        self.model_a.class_count
    }

    fn predict_probs(&self, x: &Matrix) -> Result<Matrix> {
        let a = self.model_a.predict_probs(x)?;
        let b = self.model_b.predict_probs(x)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(pa, pb)| 0.5 * (pa + pb))
            .collect();
        Ok(Matrix::new(a.rows(), a.cols(), data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_circles, shift, split};
    use crate::metrics::accuracy;
    use crate::models::build_toy_backbone;
    use crate::rng::named_stream;
    use crate::train::{Method, TrainConfig};

    fn toy_pair(seed: u64) -> (Dataset, Dataset) {
        let s = generate_circles(60, 60, 0.1, &mut named_stream(seed, "data/source")).unwrap();
        let t = shift(
            &generate_circles(60, 60, 0.1, &mut named_stream(seed, "data/target")).unwrap(),
            0.4,
            true,
        )
        .with_domain_tag("target");
        (s, t)
    }

    fn quick_config(seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: 40,
            batch_size: 32,
            ..TrainConfig::toy(Method::Source, seed)
        }
    }

    #[test]
    fn domain_classifier_beats_chance_on_shifted_domains() {
        let (s, t) = toy_pair(3);
        let (s_train, s_test) = split(&s, 0.5, &mut named_stream(3, "split/source")).unwrap();
        let (t_train, t_test) = split(&t, 0.5, &mut named_stream(3, "split/target")).unwrap();
        let cfg = quick_config(3);
        let (clf, _) =
            train_domain_classifier(&cfg, build_toy_backbone(3), &s_train, &t_train).unwrap();

        let mut data = s_test.features.data().to_vec();
        data.extend_from_slice(t_test.features.data());
        let held_out = Dataset {
            features: Matrix::new(s_test.n() + t_test.n(), 2, data),
            labels: Some(
                std::iter::repeat_n(0usize, s_test.n())
                    .chain(std::iter::repeat_n(1usize, t_test.n()))
                    .collect(),
            ),
            domain_tag: "domains".to_string(),
            k: 2,
        };
        let acc = accuracy(&clf, &held_out).unwrap();
        assert!(acc > 0.5, "domain classifier should beat chance, got {acc}");
    }

    #[test]
    fn identical_domains_cap_accuracy_at_chance() {
        // every feature row appears once per domain label, so any
        // deterministic classifier scores exactly 0.5
        let (s, _) = toy_pair(5);
        let cfg = TrainConfig {
            max_epochs: 5,
            ..quick_config(5)
        };
        let (clf, _) = train_domain_classifier(&cfg, build_toy_backbone(5), &s, &s).unwrap();
        let mut data = s.features.data().to_vec();
        data.extend_from_slice(s.features.data());
        let duplicated = Dataset {
            features: Matrix::new(2 * s.n(), 2, data),
            labels: Some(
                std::iter::repeat_n(0usize, s.n())
                    .chain(std::iter::repeat_n(1usize, s.n()))
                    .collect(),
            ),
            domain_tag: "domains".to_string(),
            k: 2,
        };
        let acc = accuracy(&clf, &duplicated).unwrap();
        assert!((acc - 0.5).abs() < 1e-12, "{acc}");
    }

    #[test]
    fn selector_rejects_mismatched_input_widths() {
        use crate::models::{Layer, Linear, Stack};
        let wide = Network {
            extractor: Stack { layers: Vec::new() },
            classifier: Stack {
                layers: vec![Layer::Linear(Linear::new(3, 2, &mut named_stream(0, "t")))],
            },
            feature_dim: 3,
            class_count: 2,
        };
        let err = SelectorSystem::new(build_toy_backbone(1), build_toy_backbone(2), wide);
        assert!(err.is_err());
    }

    #[test]
    fn tie_routes_to_source_model() {
        let g_s = build_toy_backbone(1);
        let g_t = build_toy_backbone(2);
        let x = Matrix::new(1, 2, vec![0.3, -0.4]);
        let routed = route_predict(&[0.5], &g_s, &g_t, &x).unwrap();
        assert_eq!(routed.data(), g_s.predict_probs(&x).unwrap().data());
    }

    #[test]
    fn degenerate_routing_reduces_to_members() {
        let g_s = build_toy_backbone(1);
        let g_t = build_toy_backbone(2);
        let x = Matrix::new(3, 2, vec![0.1, 0.2, -1.0, 0.5, 2.0, -0.3]);
        let always_source = route_predict(&[1.0, 1.0, 1.0], &g_s, &g_t, &x).unwrap();
        assert_eq!(always_source.data(), g_s.predict_probs(&x).unwrap().data());
        let always_target = route_predict(&[0.0, 0.0, 0.0], &g_s, &g_t, &x).unwrap();
        assert_eq!(always_target.data(), g_t.predict_probs(&x).unwrap().data());
    }

    #[test]
    fn oracle_routes_by_tag() {
        let g_s = build_toy_backbone(1);
        let g_t = build_toy_backbone(2);
        let x = Matrix::new(2, 2, vec![0.1, 0.2, -1.0, 0.5]);
        assert_eq!(
            oracle_select_predict(true, &g_s, &g_t, &x).unwrap().data(),
            g_s.predict_probs(&x).unwrap().data()
        );
        assert_eq!(
            oracle_select_predict(false, &g_s, &g_t, &x).unwrap().data(),
            g_t.predict_probs(&x).unwrap().data()
        );
    }

    #[test]
    fn oracle_accuracy_matches_member_accuracy() {
        let (s, _) = toy_pair(7);
        let g_s = build_toy_backbone(1);
        let g_t = build_toy_backbone(2);
        let oracle_probs = oracle_select_predict(true, &g_s, &g_t, &s.features).unwrap();
        let member_probs = g_s.predict_probs(&s.features).unwrap();
        assert_eq!(oracle_probs.data(), member_probs.data());
    }

    #[test]
    fn ensemble_of_identical_models_is_identity() {
        let g = build_toy_backbone(4);
        let g2 = g.clone_weights();
        let x = Matrix::new(2, 2, vec![0.5, -0.5, 1.0, 1.0]);
        let fused = ensemble_predict(&g, &g2, &x).unwrap();
        assert_eq!(fused.data(), g.predict_probs(&x).unwrap().data());
    }

    #[test]
    fn ensemble_rows_remain_stochastic() {
        let a = build_toy_backbone(5);
        let b = build_toy_backbone(6);
        let x = Matrix::new(4, 2, vec![0.0, 0.1, 0.4, -0.2, 1.5, 0.3, -0.7, 0.9]);
        let fused = ensemble_predict(&a, &b, &x).unwrap();
        for i in 0..fused.rows() {
            let sum: f64 = fused.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(fused.row(i).iter().all(|&p| p >= 0.0));
        }
    }
}
