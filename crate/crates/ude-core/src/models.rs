//! Network definitions: MLP feature extractor + classifier head, the
//! adversarial discriminator, and versioned weight serialization.
//!
//! The toy backbone is a five-layer perceptron `2 -> [32,32,32,32] -> k`;
//! each hidden layer is linear -> batch normalization -> ReLU, the final layer
//! produces raw logits, and the 32-wide activations entering the classifier
//! head are the features `z`.

use std::cell::RefCell;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{batchnorm_eval, batchnorm_train};
use crate::rng::named_stream;
use crate::tensor::Tensor;

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

/// Batch-statistics behavior of batchnorm layers.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct Linear {
    pub weight: Tensor, // [in_dim, out_dim], row-major
    pub bias: Tensor,   // [out_dim]
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// He-style init: weights from N(0, 2/fan_in), zero biases.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Linear {
        let std = (2.0 / in_dim as f64).sqrt();
        let weight: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Linear {
            weight: Tensor::param(weight, &[in_dim, out_dim]),
            bias: Tensor::param(vec![0.0; out_dim], &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_bias(&self.bias)
    }
}

pub struct BatchNorm1d {
    pub gamma: Tensor, // [dim]
    pub beta: Tensor,  // [dim]
    running_mean: RefCell<Vec<f64>>,
    running_var: RefCell<Vec<f64>>,
    pub eps: f64,
    pub momentum: f64,
    pub dim: usize,
}

impl BatchNorm1d {
    pub fn new(dim: usize) -> BatchNorm1d {
        BatchNorm1d {
            gamma: Tensor::param(vec![1.0; dim], &[dim]),
            beta: Tensor::param(vec![0.0; dim], &[dim]),
            running_mean: RefCell::new(vec![0.0; dim]),
            running_var: RefCell::new(vec![1.0; dim]),
            eps: 1e-5,
            momentum: 0.1,
            dim,
        }
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates (exponential moving average, unbiased variance);
    /// eval mode is a pure function of the input and the running statistics.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Train => {
                let n = x.dims2().0 as f64;
                let (y, mean, var) = batchnorm_train(x, &self.gamma, &self.beta, self.eps)?;
                let mut rm = self.running_mean.borrow_mut();
                let mut rv = self.running_var.borrow_mut();
                let unbias = n / (n - 1.0);
                for j in 0..self.dim {
                    rm[j] = (1.0 - self.momentum) * rm[j] + self.momentum * mean[j];
                    rv[j] = (1.0 - self.momentum) * rv[j] + self.momentum * var[j] * unbias;
                }
                Ok(y)
            }
            Mode::Eval => batchnorm_eval(
                x,
                &self.gamma,
                &self.beta,
                &self.running_mean.borrow(),
                &self.running_var.borrow(),
                self.eps,
            ),
        }
    }

    pub fn running_mean(&self) -> Vec<f64> {
        self.running_mean.borrow().clone()
    }

    pub fn running_var(&self) -> Vec<f64> {
        self.running_var.borrow().clone()
    }
}

pub enum Layer {
    Linear(Linear),
    BatchNorm(BatchNorm1d),
    Relu,
}

impl Layer {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::BatchNorm(bn) => bn.forward(x, mode),
            Layer::Relu => Ok(x.relu()),
        }
    }

    fn collect_params(&self, out: &mut Vec<Tensor>) {
        match self {
            Layer::Linear(l) => {
                out.push(l.weight.clone());
                out.push(l.bias.clone());
            }
            Layer::BatchNorm(bn) => {
                out.push(bn.gamma.clone());
                out.push(bn.beta.clone());
            }
            Layer::Relu => {}
        }
    }
}

pub struct Stack {
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, mode)?;
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.collect_params(&mut out);
        }
        out
    }
}

/// Everything a forward pass produces: features `z` entering the classifier
/// head, raw logits, and softmax probabilities.
pub struct ForwardPass {
    pub features: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

/// Feature extractor + classifier head.
pub struct Network {
    pub extractor: Stack,
    pub classifier: Stack,
    pub feature_dim: usize,
    pub class_count: usize,
}

impl Network {
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<ForwardPass> {
        let features = self.extractor.forward(x, mode)?;
        let logits = self.classifier.forward(&features, mode)?;
        let probs = logits.softmax();
        Ok(ForwardPass {
            features,
            logits,
            probs,
        })
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut out = self.extractor.params();
        out.extend(self.classifier.params());
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    pub fn input_dim(&self) -> usize {
        for l in &self.extractor.layers {
            if let Layer::Linear(lin) = l {
                return lin.in_dim;
            }
        }
        for l in &self.classifier.layers {
            if let Layer::Linear(lin) = l {
                return lin.in_dim;
            }
        }
        0
    }

    pub fn has_batchnorm(&self) -> bool {
        self.extractor
            .layers
            .iter()
            .chain(self.classifier.layers.iter())
            .any(|l| matches!(l, Layer::BatchNorm(_)))
    }

    /// Running means of every batchnorm layer, in network order.
    pub fn batchnorm_running_means(&self) -> Vec<Vec<f64>> {
        self.extractor
            .layers
            .iter()
            .chain(self.classifier.layers.iter())
            .filter_map(|l| match l {
                Layer::BatchNorm(bn) => Some(bn.running_mean()),
                _ => None,
            })
            .collect()
    }

    /// Deep copy: fresh parameter tensors holding identical values.
    pub fn clone_weights(&self) -> Network {
        Network::from_doc(&self.to_doc()).expect("round trip through doc cannot fail")
    }

    pub fn weights_equal(&self, other: &Network) -> bool {
        self.to_doc() == other.to_doc()
    }

    pub fn to_doc(&self) -> NetworkDoc {
        NetworkDoc {
            format_version: WEIGHTS_FORMAT_VERSION,
            feature_dim: self.feature_dim,
            class_count: self.class_count,
            extractor: stack_to_doc(&self.extractor),
            classifier: stack_to_doc(&self.classifier),
        }
    }

    pub fn from_doc(doc: &NetworkDoc) -> Result<Network> {
        if doc.format_version != WEIGHTS_FORMAT_VERSION {
            return Err(Error::config(format!(
                "weights format_version {} not supported (expected {})",
                doc.format_version, WEIGHTS_FORMAT_VERSION
            )));
        }
        let feature_width = stack_output_width(&doc.extractor, None)?;
        if let Some(w) = feature_width {
            if w != doc.feature_dim {
                return Err(Error::config(format!(
                    "extractor emits width {w} but feature_dim says {}",
                    doc.feature_dim
                )));
            }
        }
        let class_width = stack_output_width(&doc.classifier, Some(doc.feature_dim))?;
        if let Some(w) = class_width {
            if w != doc.class_count {
                return Err(Error::config(format!(
                    "classifier emits width {w} but class_count says {}",
                    doc.class_count
                )));
            }
        }
        Ok(Network {
            extractor: stack_from_doc(&doc.extractor)?,
            classifier: stack_from_doc(&doc.classifier)?,
            feature_dim: doc.feature_dim,
            class_count: doc.class_count,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_doc())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Network> {
        let json = std::fs::read_to_string(path)?;
        let doc: NetworkDoc = serde_json::from_str(&json)?;
        Network::from_doc(&doc)
    }
}

/// Discriminator output head: binary sigmoid or an m-way softmax.
pub enum DiscriminatorHead {
    /// Output in (0, 1): probability the input came from the source domain.
    Sigmoid,
    /// Raw logits over `m >= 2` domains.
    Softmax(usize),
}

/// Feed-forward domain discriminator.
pub struct Discriminator {
    pub hidden: Linear,
    pub output: Linear,
    pub head: DiscriminatorHead,
    pub input_dim: usize,
}

impl Discriminator {
    /// Sigmoid head: `[n, input_dim] -> [n, 1]` probabilities.
    /// Softmax head: `[n, input_dim] -> [n, m]` logits.
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let a = self.hidden.forward(h)?.relu();
        let out = self.output.forward(&a)?;
        match self.head {
            DiscriminatorHead::Sigmoid => Ok(out.sigmoid()),
            DiscriminatorHead::Softmax(_) => Ok(out),
        }
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        vec![
            self.hidden.weight.clone(),
            self.hidden.bias.clone(),
            self.output.weight.clone(),
            self.output.bias.clone(),
        ]
    }
}

/// The toy backbone: `2 -> [32,32,32,32] -> 2` with batchnorm + ReLU after
/// every hidden linear layer and a plain linear classifier head.
pub fn build_toy_backbone(seed: u64) -> Network {
    toy_backbone_from_rng(&mut named_stream(seed, "init/backbone"))
}

pub fn toy_backbone_from_rng(rng: &mut ChaCha8Rng) -> Network {
    const HIDDEN: usize = 32;
    const CLASSES: usize = 2;
    let mut layers = Vec::new();
    let mut in_dim = 2;
    for _ in 0..4 {
        layers.push(Layer::Linear(Linear::new(in_dim, HIDDEN, rng)));
        layers.push(Layer::BatchNorm(BatchNorm1d::new(HIDDEN)));
        layers.push(Layer::Relu);
        in_dim = HIDDEN;
    }
    Network {
        extractor: Stack { layers },
        classifier: Stack {
            layers: vec![Layer::Linear(Linear::new(HIDDEN, CLASSES, rng))],
        },
        feature_dim: HIDDEN,
        class_count: CLASSES,
    }
}

/// Three-layer discriminator `input_dim -> 32 -> 1` with a sigmoid output.
pub fn build_toy_discriminator(input_dim: usize, seed: u64) -> Discriminator {
    toy_discriminator_from_rng(input_dim, 1, &mut named_stream(seed, "init/discriminator"))
}

/// Same body with an m-way softmax head (domain index classification).
pub fn build_toy_discriminator_multiway(
    input_dim: usize,
    domains: usize,
    seed: u64,
) -> Discriminator {
    assert!(
        domains >= 2,
        "softmax discriminator needs at least 2 domains"
    );
    toy_discriminator_from_rng(
        input_dim,
        domains,
        &mut named_stream(seed, "init/discriminator"),
    )
}

pub fn toy_discriminator_from_rng(
    input_dim: usize,
    out_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Discriminator {
    assert!(input_dim > 0);
    const HIDDEN: usize = 32;
    Discriminator {
        hidden: Linear::new(input_dim, HIDDEN, rng),
        output: Linear::new(HIDDEN, out_classes, rng),
        head: if out_classes == 1 {
            DiscriminatorHead::Sigmoid
        } else {
            DiscriminatorHead::Softmax(out_classes)
        },
        input_dim,
    }
}

/// Gradient reversal coupling: identity forward; the gradient flowing back to
/// the features is multiplied by `-lambda_adv`, which turns the adversarial
/// minimax into a single minimization.
pub fn grl_forward(features: &Tensor, lambda_adv: f64) -> Tensor {
    features.grad_reverse(lambda_adv)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkDoc {
    pub format_version: u32,
    pub feature_dim: usize,
    pub class_count: usize,
    pub extractor: Vec<LayerDoc>,
    pub classifier: Vec<LayerDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDoc {
    Linear {
        in_dim: usize,
        out_dim: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    BatchNorm {
        dim: usize,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        eps: f64,
        momentum: f64,
    },
    Relu,
}

fn stack_to_doc(stack: &Stack) -> Vec<LayerDoc> {
    stack
        .layers
        .iter()
        .map(|l| match l {
            Layer::Linear(lin) => LayerDoc::Linear {
                in_dim: lin.in_dim,
                out_dim: lin.out_dim,
                weight: lin.weight.values(),
                bias: lin.bias.values(),
            },
            Layer::BatchNorm(bn) => LayerDoc::BatchNorm {
                dim: bn.dim,
                gamma: bn.gamma.values(),
                beta: bn.beta.values(),
                running_mean: bn.running_mean(),
                running_var: bn.running_var(),
                eps: bn.eps,
                momentum: bn.momentum,
            },
            Layer::Relu => LayerDoc::Relu,
        })
        .collect()
}

/// Trace layer widths through a stack doc, verifying adjacent layers agree.
/// Returns the output width, or `None` if the stack never pins one.
fn stack_output_width(docs: &[LayerDoc], input: Option<usize>) -> Result<Option<usize>> {
    let mut width = input;
    for doc in docs {
        match doc {
            LayerDoc::Linear {
                in_dim, out_dim, ..
            } => {
                if let Some(w) = width {
                    if w != *in_dim {
                        return Err(Error::config(format!(
                            "linear layer expects width {in_dim}, previous layer emits {w}"
                        )));
                    }
                }
                width = Some(*out_dim);
            }
            LayerDoc::BatchNorm { dim, .. } => {
                if let Some(w) = width {
                    if w != *dim {
                        return Err(Error::config(format!(
                            "batchnorm over {dim} features, previous layer emits {w}"
                        )));
                    }
                }
                width = Some(*dim);
            }
            LayerDoc::Relu => {}
        }
    }
    Ok(width)
}

fn stack_from_doc(docs: &[LayerDoc]) -> Result<Stack> {
    let mut layers = Vec::with_capacity(docs.len());
    for doc in docs {
        layers.push(match doc {
            LayerDoc::Linear {
                in_dim,
                out_dim,
                weight,
                bias,
            } => {
                if weight.len() != in_dim * out_dim || bias.len() != *out_dim {
                    return Err(Error::config("linear layer sizes are inconsistent"));
                }
                Layer::Linear(Linear {
                    weight: Tensor::param(weight.clone(), &[*in_dim, *out_dim]),
                    bias: Tensor::param(bias.clone(), &[*out_dim]),
                    in_dim: *in_dim,
                    out_dim: *out_dim,
                })
            }
            LayerDoc::BatchNorm {
                dim,
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                momentum,
            } => {
                if [gamma, beta, running_mean, running_var]
                    .iter()
                    .any(|v| v.len() != *dim)
                {
                    return Err(Error::config("batchnorm layer sizes are inconsistent"));
                }
                Layer::BatchNorm(BatchNorm1d {
                    gamma: Tensor::param(gamma.clone(), &[*dim]),
                    beta: Tensor::param(beta.clone(), &[*dim]),
                    running_mean: RefCell::new(running_mean.clone()),
                    running_var: RefCell::new(running_var.clone()),
                    eps: *eps,
                    momentum: *momentum,
                    dim: *dim,
                })
            }
            LayerDoc::Relu => Layer::Relu,
        });
    }
    Ok(Stack { layers })
}
