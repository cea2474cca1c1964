//! Feedforward network engine: training, per-layer replacement with lookup
//! operators, and incremental whole-network conversion.
//!
//! The incremental loop walks from the input layer toward the classifier:
//! replace layer `l` on activations computed through the already-replaced
//! prefix, freeze it, fine-tune the dense layers above it, repeat.

use crate::data_io::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix, Rng};
use crate::partition::{naive_partition, opq_partition, r2_partition, PartitionSpec};
use crate::table::{fit_amm_operator, Activation, AmmOperator, FitConfig};

const MOMENTUM: f64 = 0.9;
const LR_DECAY: f64 = 0.5;
const LR_DECAY_EVERY: usize = 5;

/// Codebooks per subspace used when a partition strategy needs an inner
/// quantizer (the rotation fit), matching the encoder's bucket count.
const OPQ_FIT_K: usize = 16;
const OPQ_FIT_ITERS: usize = 10;

/// How to assign input dimensions to subspaces when replacing a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionStrategy {
    Naive,
    Opq,
    R2,
}

impl PartitionStrategy {
    pub fn fit(&self, a: &Matrix, c: usize, rng: &mut Rng) -> Result<PartitionSpec> {
        match self {
            PartitionStrategy::Naive => naive_partition(a.cols(), c),
            PartitionStrategy::Opq => opq_partition(a, c, OPQ_FIT_K, OPQ_FIT_ITERS, rng),
            PartitionStrategy::R2 => r2_partition(a, c),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PartitionStrategy::Naive => "naive",
            PartitionStrategy::Opq => "opq",
            PartitionStrategy::R2 => "r2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(PartitionStrategy::Naive),
            "opq" => Ok(PartitionStrategy::Opq),
            "r2" => Ok(PartitionStrategy::R2),
            other => Err(Error::InvalidParam(format!(
                "unknown partition strategy '{other}' (expected naive, opq or r2)"
            ))),
        }
    }
}

/// One exact dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = matmul(x, &self.weights)?;
        for i in 0..z.rows() {
            for (v, &b) in z.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        self.activation.apply(&mut z);
        Ok(z)
    }
}

/// Either an exact dense layer or its lookup-accumulate replacement.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Amm(AmmOperator),
}

impl Layer {
    pub fn input_dims(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weights.rows(),
            Layer::Amm(op) => op.input_dims(),
        }
    }

    pub fn output_dims(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weights.cols(),
            Layer::Amm(op) => op.output_dims(),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Layer::Dense(d) => d.activation,
            Layer::Amm(op) => op.activation,
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, Layer::Dense(_))
    }

    pub fn forward(&self, x: &Matrix, quantized: bool) -> Result<Matrix> {
        match self {
            Layer::Dense(d) => d.forward(x),
            Layer::Amm(op) => op.apply(x, quantized),
        }
    }
}

/// Training hyperparameters (also stored in model archives for provenance).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learn_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            learn_rate: 0.1,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be positive".into()));
        }
        if !(self.learn_rate >= 0.0 && self.learn_rate.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "learn_rate must be finite and non-negative, got {}",
                self.learn_rate
            )));
        }
        Ok(())
    }
}

/// Ordered layers plus the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    pub meta: TrainConfig,
}

impl MlpModel {
    /// Fresh dense MLP: hidden layers ReLU, final layer softmax. Weights are
    /// seeded uniform (He-style fan-in limit on ReLU layers), biases zero.
    pub fn new_mlp(arch: &[usize], seed: u64) -> Result<Self> {
        if arch.len() < 2 {
            return Err(Error::InvalidParam(
                "architecture needs at least input and output sizes".into(),
            ));
        }
        let rng = Rng::new(seed);
        let mut layers = Vec::with_capacity(arch.len() - 1);
        for l in 0..arch.len() - 1 {
            let (d, m) = (arch[l], arch[l + 1]);
            if d == 0 || m == 0 {
                return Err(Error::InvalidParam("zero-width layer".into()));
            }
            let last = l == arch.len() - 2;
            let activation = if last {
                Activation::Softmax
            } else {
                Activation::Relu
            };
            let limit = if last {
                (6.0 / (d + m) as f64).sqrt()
            } else {
                (6.0 / d as f64).sqrt()
            };
            let mut layer_rng = rng.derive(l as u64);
            let weights = Matrix::from_fn(d, m, |_, _| (layer_rng.next_f64() * 2.0 - 1.0) * limit);
            layers.push(Layer::Dense(DenseLayer {
                weights,
                bias: vec![0.0; m],
                activation,
            }));
        }
        Ok(MlpModel {
            layers,
            meta: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
        })
    }

    pub fn input_dims(&self) -> usize {
        self.layers[0].input_dims()
    }

    pub fn output_dims(&self) -> usize {
        self.layers.last().expect("non-empty model").output_dims()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidParam("model has no layers".into()));
        }
        for w in self.layers.windows(2) {
            if w[0].output_dims() != w[1].input_dims() {
                return Err(Error::ShapeMismatch(
                    "adjacent layer dimensions do not chain".into(),
                ));
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.activation() == Activation::Softmax && l + 1 != self.layers.len() {
                return Err(Error::InvalidParam(
                    "softmax is only valid on the final layer".into(),
                ));
            }
        }
        Ok(())
    }

    /// Output only (float lookup path for replaced layers).
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.predict_with(x, false)
    }

    pub fn predict_with(&self, x: &Matrix, quantized: bool) -> Result<Matrix> {
        let mut cur = self.layers[0].forward(x, quantized)?;
        for layer in &self.layers[1..] {
            cur = layer.forward(&cur, quantized)?;
        }
        Ok(cur)
    }

    /// Input that layer `l` would see for this data.
    pub fn forward_to(&self, x: &Matrix, l: usize) -> Result<Matrix> {
        let mut cur = x.clone();
        for layer in &self.layers[..l] {
            cur = layer.forward(&cur, false)?;
        }
        Ok(cur)
    }

    /// Fraction of rows whose argmax matches the label.
    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        self.accuracy_with(data, false)
    }

    pub fn accuracy_with(&self, data: &LabeledDataset, quantized: bool) -> Result<f64> {
        let out = self.predict_with(&data.features, quantized)?;
        let mut hits = 0usize;
        for (i, &label) in data.labels.iter().enumerate() {
            let row = out.row(i);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label as usize {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.labels.len().max(1) as f64)
    }
}

/// Forward pass that also hands back every layer's input (index `l` holds the
/// input of layer `l`), as needed when fitting replacements.
pub fn forward(model: &MlpModel, x: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut cur = x.clone();
    for layer in &model.layers {
        let next = layer.forward(&cur, false)?;
        inputs.push(cur);
        cur = next;
    }
    Ok((cur, inputs))
}

/// Result of a training run: the trained model and the mean cross-entropy
/// per epoch.
pub struct TrainRun {
    pub model: MlpModel,
    pub epoch_loss: Vec<f64>,
}

/// Train every layer by mini-batch SGD with momentum (0.9), halving the
/// learning rate every 5 epochs. Requires an all-dense model ending in
/// softmax; deterministic given the config seed.
pub fn train(model: MlpModel, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainRun> {
    train_suffix(model, data, cfg, 0)
}

/// Freeze layers `0..first` (dense or lookup) and train the dense layers
/// `first..` on cross-entropy. `first == num_layers` is a no-op.
pub fn finetune_suffix(
    model: MlpModel,
    first: usize,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<MlpModel> {
    if first >= model.layers.len() {
        return Ok(model);
    }
    train_suffix(model, data, cfg, first).map(|run| run.model)
}

fn train_suffix(
    mut model: MlpModel,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    first: usize,
) -> Result<TrainRun> {
    cfg.validate()?;
    model.validate()?;
    data.validate()?;
    for (l, layer) in model.layers.iter().enumerate().skip(first) {
        if !layer.is_dense() {
            return Err(Error::InvalidParam(format!(
                "layer {l} is not dense; only dense layers are trainable"
            )));
        }
    }
    if model.layers.last().map(|l| l.activation()) != Some(Activation::Softmax) {
        return Err(Error::InvalidParam(
            "training requires a softmax output layer".into(),
        ));
    }
    let n = data.features.rows();
    if n == 0 {
        return Err(Error::InvalidParam("empty training set".into()));
    }
    // Frozen prefix outputs never change; compute them once.
    let features_storage;
    let features: &Matrix = if first == 0 {
        &data.features
    } else {
        features_storage = model.forward_to(&data.features, first)?;
        &features_storage
    };

    let suffix_len = model.layers.len() - first;
    let mut momentum: Vec<(Matrix, Vec<f64>)> = model.layers[first..]
        .iter()
        .map(|l| {
            (
                Matrix::zeros(l.input_dims(), l.output_dims()),
                vec![0.0; l.output_dims()],
            )
        })
        .collect();

    let mut rng = Rng::new(cfg.seed ^ 0x7261696e); // distinct stream from init
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.learn_rate;
    for epoch in 0..cfg.epochs {
        if epoch > 0 && epoch % LR_DECAY_EVERY == 0 {
            lr *= LR_DECAY;
        }
        rng.shuffle(&mut order);
        let mut total_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let x0 = features.select_rows(batch);
            let labels: Vec<u32> = batch.iter().map(|&i| data.labels[i]).collect();
            // Forward, keeping each suffix layer's input. The final layer
            // contributes logits; its softmax is folded into the loss.
            let mut acts: Vec<Matrix> = Vec::with_capacity(suffix_len + 1);
            acts.push(x0);
            for (j, layer) in model.layers[first..].iter().enumerate() {
                let Layer::Dense(d) = layer else {
                    unreachable!("suffix is all dense")
                };
                let mut z = matmul(acts.last().unwrap(), &d.weights)?;
                for i in 0..z.rows() {
                    for (v, &b) in z.row_mut(i).iter_mut().zip(&d.bias) {
                        *v += b;
                    }
                }
                if j + 1 < suffix_len {
                    d.activation.apply(&mut z);
                }
                acts.push(z);
            }

            let logits = acts.last().unwrap();
            let bs = batch.len();
            // Stable cross-entropy and softmax gradient.
            let mut delta = logits.clone();
            for (i, &label) in labels.iter().enumerate() {
                let row = delta.row_mut(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let logit_y = logits.row(i)[label as usize];
                total_loss += -(logit_y - max - sum.ln());
                let inv = 1.0 / sum;
                for v in row.iter_mut() {
                    *v *= inv;
                }
                row[label as usize] -= 1.0;
                for v in row.iter_mut() {
                    *v /= bs as f64;
                }
            }
            if !total_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: "train".into(),
                    step: epoch,
                });
            }
            // Backward through the suffix.
            let mut grad_out = delta;
            for j in (0..suffix_len).rev() {
                let input = &acts[j];
                let (grad_next, grad_w, grad_b) = {
                    let Layer::Dense(d) = &model.layers[first + j] else {
                        unreachable!()
                    };
                    let grad_w = matmul(&input.transpose(), &grad_out)?;
                    let mut grad_b = vec![0.0f64; d.bias.len()];
                    for i in 0..grad_out.rows() {
                        for (g, &v) in grad_b.iter_mut().zip(grad_out.row(i)) {
                            *g += v;
                        }
                    }
                    let grad_next = if j > 0 {
                        let mut g = matmul(&grad_out, &d.weights.transpose())?;
                        // Hidden activations are ReLU or identity; mask on
                        // the post-activation values.
                        if model.layers[first + j - 1].activation() == Activation::Relu {
                            for (gv, &a) in g.data_mut().iter_mut().zip(input.data()) {
                                if a <= 0.0 {
                                    *gv = 0.0;
                                }
                            }
                        }
                        Some(g)
                    } else {
                        None
                    };
                    (grad_next, grad_w, grad_b)
                };
                {
                    let Layer::Dense(d) = &mut model.layers[first + j] else {
                        unreachable!()
                    };
                    let (vel_w, vel_b) = &mut momentum[j];
                    for (v, &g) in vel_w.data_mut().iter_mut().zip(grad_w.data()) {
                        *v = MOMENTUM * *v - lr * g;
                    }
                    for (w, &v) in d.weights.data_mut().iter_mut().zip(vel_w.data()) {
                        *w += v;
                    }
                    for (v, &g) in vel_b.iter_mut().zip(&grad_b) {
                        *v = MOMENTUM * *v - lr * g;
                    }
                    for (b, &v) in d.bias.iter_mut().zip(vel_b.iter()) {
                        *b += v;
                    }
                }
                if let Some(g) = grad_next {
                    grad_out = g;
                }
            }
        }
        epoch_loss.push(total_loss / n as f64);
    }
    Ok(TrainRun { model, epoch_loss })
}

/// Replace dense layer `l` with a lookup operator fit on this data's
/// activations (flowing through any already-replaced earlier layers).
pub fn replace_layer(
    model: &MlpModel,
    l: usize,
    data: &Matrix,
    c: usize,
    strategy: PartitionStrategy,
    cfg: &FitConfig,
    rng: &mut Rng,
) -> Result<MlpModel> {
    if l >= model.layers.len() {
        return Err(Error::InvalidParam(format!(
            "replace_layer: layer {l} out of range"
        )));
    }
    let dense = match &model.layers[l] {
        Layer::Dense(d) => d.clone(),
        Layer::Amm(_) => return Err(Error::LayerAlreadyReplaced(l)),
    };
    let d_in = dense.weights.rows();
    if c == 0 || c > d_in {
        return Err(Error::InvalidParam(format!(
            "replace_layer: c={c} not in [1, {d_in}]"
        )));
    }
    let activations = model.forward_to(data, l)?;
    // Cap the fitting rows (partitioning and table optimization only need a
    // representative sample).
    let fit_data = if cfg.fit_samples > 0 && activations.rows() > cfg.fit_samples {
        let mut idx = rng.sample_indices(activations.rows(), cfg.fit_samples);
        idx.sort_unstable();
        activations.select_rows(&idx)
    } else {
        activations
    };
    let spec = strategy.fit(&fit_data, c, rng)?;
    let op = fit_amm_operator(
        &fit_data,
        &dense.weights,
        &dense.bias,
        dense.activation,
        &spec,
        cfg,
        rng,
    )?;
    let mut out = model.clone();
    out.layers[l] = Layer::Amm(op);
    Ok(out)
}

pub(crate) fn step_rng(seed: u64, l: usize) -> Rng {
    Rng::new(seed).derive(0x5eed_0000 + l as u64)
}

/// Incrementally convert the whole network: for each layer from input to
/// classifier, replace it on the current model's activations, then (when
/// enabled) fine-tune the dense layers above it. Returns the converted model
/// and the accuracy after each step, measured on `eval` when given (else on
/// the training data).
#[allow(clippy::too_many_arguments)]
pub fn incremental_replace_all(
    model: &MlpModel,
    data: &LabeledDataset,
    c: usize,
    strategy: PartitionStrategy,
    fit_cfg: &FitConfig,
    train_cfg: &TrainConfig,
    finetune: bool,
    eval: Option<&LabeledDataset>,
) -> Result<(MlpModel, Vec<f64>)> {
    if model.layers.iter().any(|l| !l.is_dense()) {
        return Err(Error::InvalidParam(
            "incremental replacement expects an all-dense model".into(),
        ));
    }
    let num_layers = model.layers.len();
    let mut current = model.clone();
    let mut trajectory = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let mut rng = step_rng(train_cfg.seed, l);
        current = replace_layer(
            &current,
            l,
            &data.features,
            c.min(current.layers[l].input_dims()),
            strategy,
            fit_cfg,
            &mut rng,
        )?;
        if finetune && l + 1 < num_layers {
            current = finetune_suffix(current, l + 1, data, train_cfg)?;
        }
        let acc_data = eval.unwrap_or(data);
        trajectory.push(current.accuracy(acc_data)?);
    }
    Ok((current, trajectory))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{quantize_lut, EncoderKind, Objective};

    fn toy_blobs(n_per: usize, seed: u64) -> LabeledDataset {
        // Three well-separated 8-D blobs.
        let mut rng = Rng::new(seed);
        let centers = [
            [2.0, 0.0, 1.0, -1.0, 0.5, 0.0, -2.0, 1.0],
            [-2.0, 1.5, -1.0, 1.0, -0.5, 1.0, 2.0, -1.0],
            [0.0, -2.0, 2.0, 0.0, 1.5, -1.5, 0.0, 0.0],
        ];
        let n = 3 * n_per;
        let mut feats = Matrix::zeros(n, 8);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let cls = i % 3;
            labels.push(cls as u32);
            for j in 0..8 {
                feats.set(i, j, centers[cls][j] + 0.3 * (rng.next_f64() - 0.5));
            }
        }
        LabeledDataset::new(feats, labels, 3).unwrap()
    }

    #[test]
    fn forward_identity_layer_passes_through() {
        let model = MlpModel {
            layers: vec![Layer::Dense(DenseLayer {
                weights: Matrix::identity(4),
                bias: vec![0.0; 4],
                activation: Activation::Identity,
            })],
            meta: TrainConfig::default(),
        };
        let mut rng = Rng::new(1);
        let x = Matrix::from_fn(5, 4, |_, _| rng.next_f64());
        let (out, inputs) = forward(&model, &x).unwrap();
        assert_eq!(out, x);
        assert_eq!(inputs.len(), 1);
        assert_eq!(inputs[0], x);
    }

    #[test]
    fn forward_zero_softmax_is_uniform() {
        let model = MlpModel {
            layers: vec![Layer::Dense(DenseLayer {
                weights: Matrix::zeros(3, 5),
                bias: vec![0.0; 5],
                activation: Activation::Softmax,
            })],
            meta: TrainConfig::default(),
        };
        let x = Matrix::from_fn(2, 3, |i, j| (i + j) as f64);
        let (out, _) = forward(&model, &x).unwrap();
        for i in 0..2 {
            for &v in out.row(i) {
                assert!((v - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_matches_composition_oracle() {
        let mut rng = Rng::new(2);
        let model = MlpModel::new_mlp(&[6, 4, 3], 9).unwrap();
        let x = Matrix::from_fn(7, 6, |_, _| rng.next_f64() * 2.0 - 1.0);
        let (out, inputs) = forward(&model, &x).unwrap();
        // Oracle: explicit matmul + activation composition.
        let Layer::Dense(l0) = &model.layers[0] else {
            unreachable!()
        };
        let Layer::Dense(l1) = &model.layers[1] else {
            unreachable!()
        };
        let mut h = matmul(&x, &l0.weights).unwrap();
        for i in 0..h.rows() {
            for (v, &b) in h.row_mut(i).iter_mut().zip(&l0.bias) {
                *v += b;
            }
        }
        Activation::Relu.apply(&mut h);
        assert!(inputs[1].max_abs_diff(&h) < 1e-12);
        let mut z = matmul(&h, &l1.weights).unwrap();
        for i in 0..z.rows() {
            for (v, &b) in z.row_mut(i).iter_mut().zip(&l1.bias) {
                *v += b;
            }
        }
        Activation::Softmax.apply(&mut z);
        assert!(out.max_abs_diff(&z) < 1e-6);
    }

    #[test]
    fn train_linearly_separable_to_full_accuracy() {
        // Two 2-D classes across a margin, one softmax layer.
        let mut rng = Rng::new(3);
        let n = 60;
        let mut feats = Matrix::zeros(n, 2);
        let mut labels = Vec::new();
        for i in 0..n {
            let cls = i % 2;
            labels.push(cls as u32);
            let off = if cls == 0 { -1.5 } else { 1.5 };
            feats.set(i, 0, off + 0.5 * (rng.next_f64() - 0.5));
            feats.set(i, 1, rng.next_f64());
        }
        let data = LabeledDataset::new(feats, labels, 2).unwrap();
        let model = MlpModel::new_mlp(&[2, 2], 4).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 8,
            learn_rate: 0.5,
            seed: 5,
        };
        let run = train(model, &data, &cfg).unwrap();
        assert_eq!(run.model.accuracy(&data).unwrap(), 1.0);
        assert!(run.epoch_loss.last().unwrap() <= &run.epoch_loss[0]);
    }

    #[test]
    fn train_is_deterministic_given_seed() {
        let data = toy_blobs(20, 50);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            learn_rate: 0.1,
            seed: 51,
        };
        let a = train(MlpModel::new_mlp(&[8, 6, 3], 52).unwrap(), &data, &cfg).unwrap();
        let b = train(MlpModel::new_mlp(&[8, 6, 3], 52).unwrap(), &data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_loss, b.epoch_loss);
    }

    #[test]
    fn train_zero_learn_rate_changes_nothing() {
        let data = toy_blobs(10, 6);
        let model = MlpModel::new_mlp(&[8, 6, 3], 7).unwrap();
        let before = model.clone();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            learn_rate: 0.0,
            seed: 8,
        };
        let run = train(model, &data, &cfg).unwrap();
        assert_eq!(run.model, before);
    }

    #[test]
    fn train_divergence_reports_epoch() {
        let data = toy_blobs(20, 9);
        let model = MlpModel::new_mlp(&[8, 6, 3], 10).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 8,
            learn_rate: 1e12,
            seed: 11,
        };
        match train(model, &data, &cfg) {
            Err(Error::NonFiniteLoss { .. }) => {}
            other => panic!("expected NonFiniteLoss, got {:?}", other.map(|r| r.epoch_loss)),
        }
    }

    #[test]
    fn replace_layer_pq_exact_keeps_outputs() {
        // Inputs with at most 16 distinct subvectors per chunk: PQ encoding
        // reconstructs exactly, so replacing a layer changes nothing.
        let mut rng = Rng::new(12);
        let patterns: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..6).map(|_| rng.next_f64() * 2.0).collect())
            .collect();
        let x = Matrix::from_fn(160, 6, |i, j| patterns[i % 16][j]);
        let model = MlpModel::new_mlp(&[6, 5, 3], 13).unwrap();
        let cfg = FitConfig {
            objective: Objective::Baseline,
            encoder: EncoderKind::Pq,
            lambda: 1e-6,
            fit_samples: 0,
            ..FitConfig::default()
        };
        let replaced = replace_layer(
            &model,
            0,
            &x,
            2,
            PartitionStrategy::Naive,
            &cfg,
            &mut Rng::new(14),
        )
        .unwrap();
        let want = model.predict(&x).unwrap();
        let got = replaced.predict(&x).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn replace_layer_rejects_double_replacement_and_bad_c() {
        let data = toy_blobs(30, 15);
        let model = MlpModel::new_mlp(&[8, 6, 3], 16).unwrap();
        let cfg = FitConfig {
            fit_samples: 0,
            ..FitConfig::default()
        };
        let once = replace_layer(
            &model,
            0,
            &data.features,
            2,
            PartitionStrategy::Naive,
            &cfg,
            &mut Rng::new(17),
        )
        .unwrap();
        match replace_layer(
            &once,
            0,
            &data.features,
            2,
            PartitionStrategy::Naive,
            &cfg,
            &mut Rng::new(18),
        ) {
            Err(Error::LayerAlreadyReplaced(0)) => {}
            other => panic!("expected LayerAlreadyReplaced, got {:?}", other.is_ok()),
        }
        assert!(replace_layer(
            &model,
            0,
            &data.features,
            9,
            PartitionStrategy::Naive,
            &cfg,
            &mut Rng::new(19),
        )
        .is_err());
    }

    #[test]
    fn finetune_full_suffix_is_noop() {
        let data = toy_blobs(10, 20);
        let model = MlpModel::new_mlp(&[8, 5, 3], 21).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let tuned = finetune_suffix(model.clone(), 2, &data, &cfg).unwrap();
        assert_eq!(tuned, model);
    }

    #[test]
    fn finetune_does_not_touch_frozen_layers() {
        let data = toy_blobs(40, 22);
        let model = MlpModel::new_mlp(&[8, 6, 3], 23).unwrap();
        let cfg = FitConfig {
            fit_samples: 0,
            ..FitConfig::default()
        };
        let replaced = replace_layer(
            &model,
            0,
            &data.features,
            4,
            PartitionStrategy::Naive,
            &cfg,
            &mut Rng::new(24),
        )
        .unwrap();
        let frozen_before = replaced.layers[0].clone();
        let tuned = finetune_suffix(
            replaced,
            1,
            &data,
            &TrainConfig {
                epochs: 8,
                batch_size: 16,
                learn_rate: 0.05,
                seed: 25,
            },
        )
        .unwrap();
        // Bit-identical frozen layer (tables, encoders, partition).
        assert_eq!(tuned.layers[0], frozen_before);
        // The tuned layers did change.
        let Layer::Dense(orig) = &model.layers[1] else {
            unreachable!()
        };
        let Layer::Dense(new) = &tuned.layers[1] else {
            unreachable!()
        };
        assert!(orig.weights.max_abs_diff(&new.weights) > 0.0);
    }

    #[test]
    fn finetune_recovers_accuracy_after_coarse_replacement() {
        let data = toy_blobs(60, 26);
        let model = MlpModel::new_mlp(&[8, 10, 3], 27).unwrap();
        let trained = train(
            model,
            &data,
            &TrainConfig {
                epochs: 25,
                batch_size: 16,
                learn_rate: 0.2,
                seed: 28,
            },
        )
        .unwrap()
        .model;
        assert!(trained.accuracy(&data).unwrap() > 0.95);
        let cfg = FitConfig {
            fit_samples: 0,
            ..FitConfig::default()
        };
        let damaged = replace_layer(
            &trained,
            0,
            &data.features,
            1,
            PartitionStrategy::Naive,
            &cfg,
            &mut Rng::new(29),
        )
        .unwrap();
        let acc_damaged = damaged.accuracy(&data).unwrap();
        let tuned = finetune_suffix(
            damaged,
            1,
            &data,
            &TrainConfig {
                epochs: 20,
                batch_size: 16,
                learn_rate: 0.05,
                seed: 30,
            },
        )
        .unwrap();
        let acc_tuned = tuned.accuracy(&data).unwrap();
        assert!(
            acc_tuned >= acc_damaged,
            "finetune {acc_tuned} < damaged {acc_damaged}"
        );
    }

    #[test]
    fn incremental_uses_replaced_prefix_activations() {
        let data = toy_blobs(60, 31);
        let model = MlpModel::new_mlp(&[8, 6, 3], 32).unwrap();
        let fit_cfg = FitConfig {
            fit_samples: 0,
            ..FitConfig::default()
        };
        let train_cfg = TrainConfig {
            epochs: 0,
            batch_size: 16,
            learn_rate: 0.02,
            seed: 33,
        };
        let (converted, trajectory) = incremental_replace_all(
            &model,
            &data,
            2,
            PartitionStrategy::Naive,
            &fit_cfg,
            &train_cfg,
            false,
            None,
        )
        .unwrap();
        assert_eq!(trajectory.len(), 2);
        assert!(converted.layers.iter().all(|l| !l.is_dense()));

        // The layer-1 activations under the replaced prefix differ from the
        // pristine ones, and the incremental fit used the former: refitting
        // layer 1 on the partially-replaced model with the same derived seed
        // reproduces its operator bit for bit, while a fit on the pristine
        // model does not.
        let step0 = replace_layer(
            &model,
            0,
            &data.features,
            2,
            PartitionStrategy::Naive,
            &fit_cfg,
            &mut step_rng(train_cfg.seed, 0),
        )
        .unwrap();
        let replaced_acts = step0.forward_to(&data.features, 1).unwrap();
        let pristine_acts = model.forward_to(&data.features, 1).unwrap();
        assert!(replaced_acts.max_abs_diff(&pristine_acts) > 1e-9);

        let refit = replace_layer(
            &step0,
            1,
            &data.features,
            2,
            PartitionStrategy::Naive,
            &fit_cfg,
            &mut step_rng(train_cfg.seed, 1),
        )
        .unwrap();
        assert_eq!(refit.layers[1], converted.layers[1]);

        let from_pristine = replace_layer(
            &model,
            1,
            &data.features,
            2,
            PartitionStrategy::Naive,
            &fit_cfg,
            &mut step_rng(train_cfg.seed, 1),
        )
        .unwrap();
        assert_ne!(from_pristine.layers[1], converted.layers[1]);
    }

    #[test]
    fn quantized_forward_path_works() {
        let data = toy_blobs(40, 34);
        let model = MlpModel::new_mlp(&[8, 6, 3], 35).unwrap();
        let cfg = FitConfig {
            fit_samples: 0,
            ..FitConfig::default()
        };
        let mut replaced = replace_layer(
            &model,
            0,
            &data.features,
            4,
            PartitionStrategy::Naive,
            &cfg,
            &mut Rng::new(36),
        )
        .unwrap();
        if let Layer::Amm(op) = &mut replaced.layers[0] {
            op.table = quantize_lut(&op.table);
        }
        let float_acc = replaced.accuracy_with(&data, false).unwrap();
        let quant_acc = replaced.accuracy_with(&data, true).unwrap();
        assert!((float_acc - quant_acc).abs() <= 0.5);
    }
}
