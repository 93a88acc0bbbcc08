//! Minimal dense network stack: per-modality embedding networks, a fusion
//! layer in the middle, a joint head, and a softmax classifier, trained
//! with plain SGD or SGD with momentum in a two-stage schedule.
//!
//! Everything is f64 and row-major `Vec<f64>`. There is no autograd; the
//! backward pass is written out layer by layer, which keeps gradients
//! exact and the dependency surface small.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionOperator, FusionSpec};
use crate::rng::{derive_seed, rng_from, tags};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative as a function of the pre-activation. ReLU takes the
    /// right-hand derivative 0 at exactly zero.
    fn grad(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer, weights row-major: `weights[o * in_dim + i]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// He-uniform initialization: weights from U(-limit, limit) with
    /// limit = sqrt(6 / in_dim), biases zero.
    pub fn init(in_dim: usize, out_dim: usize, activation: Activation, seed: u64) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("layer dimensions must be >= 1"));
        }
        let limit = (6.0 / in_dim as f64).sqrt();
        let mut rng = rng_from(seed, &[tags::MODEL_INIT]);
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Ok(DenseLayer {
            in_dim,
            out_dim,
            weights,
            biases: vec![0.0; out_dim],
            activation,
        })
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut pre = self.biases.clone();
        for (o, p) in pre.iter_mut().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = *p;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *p = acc;
        }
        let post = pre.iter().map(|&z| self.activation.apply(z)).collect();
        (pre, post)
    }

    /// Backward through activation and affine map. Accumulates parameter
    /// gradients into `grads` and returns the gradient w.r.t. the input.
    fn backward(
        &self,
        x: &[f64],
        pre: &[f64],
        grad_post: &[f64],
        grads: &mut LayerGrads,
    ) -> Vec<f64> {
        let mut grad_x = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let gz = grad_post[o] * self.activation.grad(pre[o]);
            grads.biases[o] += gz;
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let grad_row = &mut grads.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grad_row[i] += gz * x[i];
                grad_x[i] += gz * row[i];
            }
        }
        grad_x
    }

    /// Shape and finiteness checks for parameters coming from disk.
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::invalid("layer dimensions must be >= 1"));
        }
        if self.weights.len() != self.in_dim * self.out_dim {
            return Err(Error::dim(
                "layer weights",
                self.in_dim * self.out_dim,
                self.weights.len(),
            ));
        }
        if self.biases.len() != self.out_dim {
            return Err(Error::dim("layer biases", self.out_dim, self.biases.len()));
        }
        if self
            .weights
            .iter()
            .chain(&self.biases)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Value("non-finite layer parameter".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerGrads {
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl LayerGrads {
    fn zeros(layer: &DenseLayer) -> Self {
        LayerGrads {
            weights: vec![0.0; layer.weights.len()],
            biases: vec![0.0; layer.biases.len()],
        }
    }

    fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
        for b in &mut self.biases {
            *b *= factor;
        }
    }
}

/// Embedding network for one modality: hidden ReLU layers followed by a
/// ReLU embedding layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModalityNetwork {
    pub layers: Vec<DenseLayer>,
}

impl ModalityNetwork {
    pub fn init(
        input_dim: usize,
        hidden_dims: &[usize],
        embedding_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if embedding_dim == 0 {
            return Err(Error::invalid("embedding_dim must be >= 1"));
        }
        let mut layers = Vec::with_capacity(hidden_dims.len() + 1);
        let mut in_dim = input_dim;
        for (i, &h) in hidden_dims.iter().enumerate() {
            layers.push(DenseLayer::init(
                in_dim,
                h,
                Activation::Relu,
                derive_seed(seed, &[i as u64]),
            )?);
            in_dim = h;
        }
        layers.push(DenseLayer::init(
            in_dim,
            embedding_dim,
            Activation::Relu,
            derive_seed(seed, &[hidden_dims.len() as u64]),
        )?);
        Ok(ModalityNetwork { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    fn forward(&self, x: &[f64]) -> NetworkTrace {
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut posts = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for layer in &self.layers {
            let (pre, post) = layer.forward(&current);
            pres.push(pre);
            current = post.clone();
            posts.push(post);
        }
        NetworkTrace {
            input: x.to_vec(),
            pres,
            posts,
        }
    }

    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).posts.last().unwrap().clone()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("modality network has no layers"));
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        for pair in self.layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::dim(
                    "chained layer dims",
                    pair[0].out_dim,
                    pair[1].in_dim,
                ));
            }
        }
        Ok(())
    }
}

struct NetworkTrace {
    input: Vec<f64>,
    pres: Vec<Vec<f64>>,
    posts: Vec<Vec<f64>>,
}

impl NetworkTrace {
    fn output(&self) -> &[f64] {
        self.posts.last().unwrap()
    }
}

/// One labeled multimodal example: one raw feature vector per modality,
/// in the model's modality order, plus a class index.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub inputs: Vec<Vec<f64>>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    SgdMomentum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Double,
    Single,
}

/// Two-stage training schedule. Stage 1 trains only the joint head and
/// classifier with the modality networks frozen; stage 2 trains everything.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs_stage1: usize,
    #[serde(default = "default_epochs")]
    pub epochs_stage2: usize,
    #[serde(default = "default_lr_stage1")]
    pub learning_rate_stage1: f64,
    #[serde(default = "default_lr_stage2")]
    pub learning_rate_stage2: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(skip, default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    10
}
fn default_lr_stage1() -> f64 {
    0.01
}
fn default_lr_stage2() -> f64 {
    0.001
}
fn default_batch() -> usize {
    32
}
fn default_optimizer() -> Optimizer {
    Optimizer::SgdMomentum
}
fn default_momentum() -> f64 {
    0.9
}
fn default_precision() -> Precision {
    Precision::Double
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_stage1: default_epochs(),
            epochs_stage2: default_epochs(),
            learning_rate_stage1: default_lr_stage1(),
            learning_rate_stage2: default_lr_stage2(),
            batch_size: default_batch(),
            optimizer: default_optimizer(),
            momentum: default_momentum(),
            precision: default_precision(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for (name, lr) in [
            ("learning_rate_stage1", self.learning_rate_stage1),
            ("learning_rate_stage2", self.learning_rate_stage2),
        ] {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Per-epoch training metrics, reported for both stages.
#[derive(Clone, Debug, Serialize)]
pub struct EpochMetrics {
    pub stage: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// The full classifier: modality networks, fusion, joint head, softmax
/// output layer.
#[derive(Clone, Debug)]
pub struct Model {
    pub networks: Vec<ModalityNetwork>,
    pub fusion: FusionOperator,
    pub joint: DenseLayer,
    pub classifier: DenseLayer,
}

struct ForwardTrace {
    network_traces: Vec<NetworkTrace>,
    embeddings: Vec<Vec<f64>>,
    fused: Vec<f64>,
    joint_pre: Vec<f64>,
    joint_post: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

struct ModelGrads {
    networks: Vec<Vec<LayerGrads>>,
    joint: LayerGrads,
    classifier: LayerGrads,
}

impl ModelGrads {
    fn zeros(model: &Model) -> Self {
        ModelGrads {
            networks: model
                .networks
                .iter()
                .map(|n| n.layers.iter().map(LayerGrads::zeros).collect())
                .collect(),
            joint: LayerGrads::zeros(&model.joint),
            classifier: LayerGrads::zeros(&model.classifier),
        }
    }

    fn scale(&mut self, factor: f64) {
        for net in &mut self.networks {
            for layer in net {
                layer.scale(factor);
            }
        }
        self.joint.scale(factor);
        self.classifier.scale(factor);
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the maximum value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Builds a freshly initialized model. Modality input dimensions come
    /// from `input_dims`; all modalities share the hidden layout and
    /// embedding size but have independently seeded weights. `joint_dim`
    /// is the width of the post-fusion representation layer.
    pub fn init(
        input_dims: &[usize],
        hidden_dims: &[usize],
        embedding_dim: usize,
        joint_dim: usize,
        num_classes: usize,
        fusion_spec: FusionSpec,
        seed: u64,
    ) -> Result<Self> {
        if input_dims.is_empty() {
            return Err(Error::invalid("model needs at least one modality"));
        }
        if joint_dim == 0 {
            return Err(Error::invalid("joint_dim must be >= 1"));
        }
        if num_classes < 2 {
            return Err(Error::invalid("model needs at least two classes"));
        }
        let networks = input_dims
            .iter()
            .enumerate()
            .map(|(m, &dim)| {
                ModalityNetwork::init(
                    dim,
                    hidden_dims,
                    embedding_dim,
                    derive_seed(seed, &[tags::MODEL_INIT, m as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let embedding_dims = vec![embedding_dim; input_dims.len()];
        let fusion = FusionOperator::new(fusion_spec, &embedding_dims)?;
        let joint = DenseLayer::init(
            fusion.output_dim(),
            joint_dim,
            Activation::Relu,
            derive_seed(seed, &[tags::MODEL_INIT, 0x100]),
        )?;
        let classifier = DenseLayer::init(
            joint_dim,
            num_classes,
            Activation::Identity,
            derive_seed(seed, &[tags::MODEL_INIT, 0x101]),
        )?;
        Ok(Model {
            networks,
            fusion,
            joint,
            classifier,
        })
    }

    pub fn from_parts(
        networks: Vec<ModalityNetwork>,
        fusion: FusionOperator,
        joint: DenseLayer,
        classifier: DenseLayer,
    ) -> Result<Self> {
        if networks.is_empty() {
            return Err(Error::invalid("model needs at least one modality"));
        }
        if networks.len() != fusion.input_dims().len() {
            return Err(Error::dim(
                "fusion inputs",
                networks.len(),
                fusion.input_dims().len(),
            ));
        }
        for (m, net) in networks.iter().enumerate() {
            if net.embedding_dim() != fusion.input_dims()[m] {
                return Err(Error::dim(
                    format!("embedding dim of modality {m}"),
                    fusion.input_dims()[m],
                    net.embedding_dim(),
                ));
            }
        }
        if joint.in_dim != fusion.output_dim() {
            return Err(Error::dim("joint input", fusion.output_dim(), joint.in_dim));
        }
        if classifier.in_dim != joint.out_dim {
            return Err(Error::dim("classifier input", joint.out_dim, classifier.in_dim));
        }
        Ok(Model {
            networks,
            fusion,
            joint,
            classifier,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.networks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.networks.iter().map(|n| n.input_dim()).collect()
    }

    fn check_sample_inputs(&self, inputs: &[Vec<f64>]) -> Result<()> {
        if inputs.len() != self.networks.len() {
            return Err(Error::dim("sample modalities", self.networks.len(), inputs.len()));
        }
        for (m, (x, net)) in inputs.iter().zip(&self.networks).enumerate() {
            if x.len() != net.input_dim() {
                return Err(Error::dim(
                    format!("input dim of modality {m}"),
                    net.input_dim(),
                    x.len(),
                ));
            }
        }
        Ok(())
    }

    fn forward_trace(&self, inputs: &[Vec<f64>]) -> Result<ForwardTrace> {
        let network_traces: Vec<NetworkTrace> = self
            .networks
            .iter()
            .zip(inputs)
            .map(|(net, x)| net.forward(x))
            .collect();
        let embeddings: Vec<Vec<f64>> = network_traces
            .iter()
            .map(|t| t.output().to_vec())
            .collect();
        let embedding_refs: Vec<&[f64]> = embeddings.iter().map(|e| e.as_slice()).collect();
        let fused = self.fusion.fuse(&embedding_refs)?.values;
        let (joint_pre, joint_post) = self.joint.forward(&fused);
        let (logits, _) = self.classifier.forward(&joint_post);
        let probs = softmax(&logits);
        Ok(ForwardTrace {
            network_traces,
            embeddings,
            fused,
            joint_pre,
            joint_post,
            logits,
            probs,
        })
    }

    /// Class probabilities for one sample.
    pub fn predict_proba(&self, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_sample_inputs(inputs)?;
        Ok(self.forward_trace(inputs)?.probs)
    }

    pub fn predict(&self, inputs: &[Vec<f64>]) -> Result<usize> {
        Ok(argmax(&self.predict_proba(inputs)?))
    }

    /// Cross-entropy loss and gradient accumulation for one sample. With
    /// `freeze_networks` the modality networks (and the fusion backward)
    /// are skipped; their parameters receive no gradient.
    fn accumulate_sample(
        &self,
        sample: &TrainSample,
        grads: &mut ModelGrads,
        freeze_networks: bool,
    ) -> Result<(f64, bool)> {
        if sample.label >= self.num_classes() {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                sample.label,
                self.num_classes()
            )));
        }
        let trace = self.forward_trace(&sample.inputs)?;
        let loss = -trace.probs[sample.label].max(1e-300).ln();
        let correct = argmax(&trace.probs) == sample.label;

        // d(cross entropy)/d(logits) for softmax: probs - onehot.
        let mut grad_logits = trace.probs.clone();
        grad_logits[sample.label] -= 1.0;

        let grad_joint_post = self.classifier.backward(
            &trace.joint_post,
            &trace.logits,
            &grad_logits,
            &mut grads.classifier,
        );
        let grad_fused = self.joint.backward(
            &trace.fused,
            &trace.joint_pre,
            &grad_joint_post,
            &mut grads.joint,
        );
        if freeze_networks {
            return Ok((loss, correct));
        }
        let embedding_refs: Vec<&[f64]> = trace.embeddings.iter().map(|e| e.as_slice()).collect();
        let grad_embeddings = self.fusion.backward(&grad_fused, &embedding_refs)?;
        for ((net, net_trace), (grad_embed, net_grads)) in self
            .networks
            .iter()
            .zip(&trace.network_traces)
            .zip(grad_embeddings.into_iter().zip(&mut grads.networks))
        {
            let mut grad = grad_embed;
            for (l, layer) in net.layers.iter().enumerate().rev() {
                let layer_input = if l == 0 {
                    &net_trace.input
                } else {
                    &net_trace.posts[l - 1]
                };
                grad = layer.backward(layer_input, &net_trace.pres[l], &grad, &mut net_grads[l]);
            }
        }
        Ok((loss, correct))
    }
}

/// Cross-entropy loss and its gradient for one sample, parameters
/// flattened per layer as (weights, biases): modality networks in order,
/// then the joint layer, then the classifier. Matches the block order of
/// [`parameter_blocks`].
pub fn loss_gradients(model: &Model, sample: &TrainSample) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut grads = ModelGrads::zeros(model);
    let (loss, _) = model.accumulate_sample(sample, &mut grads, false)?;
    let mut blocks = Vec::new();
    for net in grads.networks {
        for layer in net {
            blocks.push(layer.weights);
            blocks.push(layer.biases);
        }
    }
    blocks.push(grads.joint.weights);
    blocks.push(grads.joint.biases);
    blocks.push(grads.classifier.weights);
    blocks.push(grads.classifier.biases);
    Ok((loss, blocks))
}

/// Mutable views of every parameter block, in [`loss_gradients`] order.
pub fn parameter_blocks(model: &mut Model) -> Vec<&mut Vec<f64>> {
    let mut blocks: Vec<&mut Vec<f64>> = Vec::new();
    for net in &mut model.networks {
        for layer in &mut net.layers {
            blocks.push(&mut layer.weights);
            blocks.push(&mut layer.biases);
        }
    }
    blocks.push(&mut model.joint.weights);
    blocks.push(&mut model.joint.biases);
    blocks.push(&mut model.classifier.weights);
    blocks.push(&mut model.classifier.biases);
    blocks
}

/// Cross-entropy loss of one sample under the current parameters.
pub fn sample_loss(model: &Model, sample: &TrainSample) -> Result<f64> {
    let probs = model.predict_proba(&sample.inputs)?;
    if sample.label >= probs.len() {
        return Err(Error::invalid(format!(
            "label {} out of range for {} classes",
            sample.label,
            probs.len()
        )));
    }
    Ok(-probs[sample.label].max(1e-300).ln())
}

/// Smallest |pre-activation| across every ReLU in the model for the given
/// inputs. Finite-difference checks reject samples where this is tiny:
/// the central difference straddles the kink there.
pub fn min_relu_gap(model: &Model, inputs: &[Vec<f64>]) -> Result<f64> {
    model.check_sample_inputs(inputs)?;
    let trace = model.forward_trace(inputs)?;
    let gap = trace
        .network_traces
        .iter()
        .flat_map(|t| t.pres.iter().flatten())
        .chain(trace.joint_pre.iter())
        .fold(f64::INFINITY, |acc, &z| acc.min(z.abs()));
    Ok(gap)
}

/// Optimizer state mirroring the parameter layout.
struct Velocity {
    networks: Vec<Vec<LayerGrads>>,
    joint: LayerGrads,
    classifier: LayerGrads,
}

impl Velocity {
    fn zeros(model: &Model) -> Self {
        Velocity {
            networks: model
                .networks
                .iter()
                .map(|n| n.layers.iter().map(LayerGrads::zeros).collect())
                .collect(),
            joint: LayerGrads::zeros(&model.joint),
            classifier: LayerGrads::zeros(&model.classifier),
        }
    }
}

fn round_single(v: f64) -> f64 {
    v as f32 as f64
}

struct UpdateContext {
    lr: f64,
    momentum: f64,
    use_momentum: bool,
    single: bool,
}

fn update_layer(
    layer: &mut DenseLayer,
    grads: &LayerGrads,
    velocity: &mut LayerGrads,
    ctx: &UpdateContext,
) {
    let apply = |param: &mut f64, grad: f64, vel: &mut f64| {
        let step = if ctx.use_momentum {
            *vel = ctx.momentum * *vel - ctx.lr * grad;
            if ctx.single {
                *vel = round_single(*vel);
            }
            *vel
        } else {
            -ctx.lr * grad
        };
        *param += step;
        if ctx.single {
            *param = round_single(*param);
        }
    };
    for ((w, &g), v) in layer
        .weights
        .iter_mut()
        .zip(&grads.weights)
        .zip(&mut velocity.weights)
    {
        apply(w, g, v);
    }
    for ((b, &g), v) in layer
        .biases
        .iter_mut()
        .zip(&grads.biases)
        .zip(&mut velocity.biases)
    {
        apply(b, g, v);
    }
}

/// Trains the model in place with the two-stage schedule and returns the
/// per-epoch metrics. Stage 1 leaves every modality network bit-identical
/// to its initial state.
pub fn train_two_step(
    model: &mut Model,
    samples: &[TrainSample],
    config: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for sample in samples {
        model.check_sample_inputs(&sample.inputs)?;
        if sample.label >= model.num_classes() {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                sample.label,
                model.num_classes()
            )));
        }
    }

    let mut metrics = Vec::with_capacity(config.epochs_stage1 + config.epochs_stage2);
    let stages = [
        (1usize, config.epochs_stage1, config.learning_rate_stage1, true),
        (2usize, config.epochs_stage2, config.learning_rate_stage2, false),
    ];
    for (stage, epochs, lr, freeze) in stages {
        // Momentum does not carry across the stage boundary.
        let mut velocity = Velocity::zeros(model);
        let ctx = UpdateContext {
            lr,
            momentum: config.momentum,
            use_momentum: config.optimizer == Optimizer::SgdMomentum,
            single: config.precision == Precision::Single,
        };
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            let mut shuffle_rng = rng_from(
                config.seed,
                &[tags::TRAIN_SHUFFLE, stage as u64, epoch as u64],
            );
            order.shuffle(&mut shuffle_rng);

            let mut loss_sum = 0.0;
            let mut correct = 0usize;
            for batch in order.chunks(config.batch_size) {
                let mut grads = ModelGrads::zeros(model);
                for &idx in batch {
                    let (loss, ok) =
                        model.accumulate_sample(&samples[idx], &mut grads, freeze)?;
                    loss_sum += loss;
                    correct += ok as usize;
                }
                grads.scale(1.0 / batch.len() as f64);
                if !freeze {
                    for (net, (net_grads, net_vel)) in model
                        .networks
                        .iter_mut()
                        .zip(grads.networks.iter().zip(&mut velocity.networks))
                    {
                        for (layer, (lg, lv)) in net
                            .layers
                            .iter_mut()
                            .zip(net_grads.iter().zip(net_vel.iter_mut()))
                        {
                            update_layer(layer, lg, lv, &ctx);
                        }
                    }
                }
                update_layer(&mut model.joint, &grads.joint, &mut velocity.joint, &ctx);
                update_layer(
                    &mut model.classifier,
                    &grads.classifier,
                    &mut velocity.classifier,
                    &ctx,
                );
            }
            metrics.push(EpochMetrics {
                stage,
                epoch,
                mean_loss: loss_sum / samples.len() as f64,
                accuracy: correct as f64 / samples.len() as f64,
            });
        }
    }
    Ok(metrics)
}
