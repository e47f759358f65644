//! Small CNN assembly (conv stack + dense head), minibatch training, and
//! evaluation. All conv layers use kernel 3, stride 2, ReLU; the head is a
//! dense layer with 2 nodes (centroid regression) or 3 nodes (classifier).

use std::io::{Read, Write};
use std::path::Path;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::{Dataset, Task};
use crate::error::{GeoError, Result};
use crate::layers::{count_flops, layer_backward, layer_forward, FlopReport, LayerCache, LayerParams, LayerSpec, LayerVariant};
use crate::nn::{cross_entropy, dense_backward, dense_forward, euclidean_loss, kaiming_uniform, Activation, Optimizer, OptimizerConfig};
use crate::tensor::{ConvGeometry, Tensor};

pub const CONV_KERNEL: usize = 3;
pub const CONV_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Head {
    /// Dense(2) regression head trained with the Euclidean loss.
    Centroid,
    /// Dense(n) classifier head trained with cross entropy.
    Classifier(usize),
}

impl Head {
    pub fn dim(&self) -> usize {
        match self {
            Head::Centroid => 2,
            Head::Classifier(n) => *n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FilterPlan {
    /// Every layer has the same number of filters (the i x j ablation models).
    Constant(usize),
    /// Layer n has 2^(n-1) filters (the Greek-numeral models).
    Doubling,
}

impl FilterPlan {
    pub fn filters_for_layer(&self, layer: usize) -> usize {
        match self {
            FilterPlan::Constant(j) => *j,
            FilterPlan::Doubling => 1 << layer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    pub variant: LayerVariant,
    pub n_layers: usize,
    pub filters: FilterPlan,
    pub head: Head,
    pub input_size: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(GeoError::Config("model needs at least one layer".into()));
        }
        if matches!(self.filters, FilterPlan::Constant(0)) {
            return Err(GeoError::Config("model needs at least one filter per layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub layer_specs: Vec<LayerSpec>,
    pub layer_params: Vec<LayerParams>,
    pub dense_weights: Tensor,
    pub dense_bias: Tensor,
    /// Per-layer FLOP/param accounting at build time.
    pub layer_flops: Vec<FlopReport>,
}

pub struct ForwardCache {
    layer_caches: Vec<LayerCache>,
    flat_features: Tensor,
}

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer_specs = Vec::new();
    let mut layer_params = Vec::new();
    let mut layer_flops = Vec::new();

    let mut size = spec.input_size;
    let mut channels = 1usize;
    for layer in 0..spec.n_layers {
        let out_channels = spec.filters.filters_for_layer(layer);
        let geom = ConvGeometry {
            kernel_h: CONV_KERNEL,
            kernel_w: CONV_KERNEL,
            stride: CONV_STRIDE,
            padding: 0,
            in_channels: channels,
            out_channels,
        };
        if size + 2 * geom.padding < CONV_KERNEL {
            return Err(GeoError::Config(format!(
                "feature map collapsed below the kernel at layer {layer} ({size}x{size})"
            )));
        }
        let lspec = LayerSpec::new(spec.variant, geom, Activation::Relu);
        layer_flops.push(count_flops(&lspec, (size, size))?);
        layer_params.push(lspec.init_params(&mut rng));
        size = (size - CONV_KERNEL) / CONV_STRIDE + 1;
        channels = out_channels;
        layer_specs.push(lspec);
    }

    let flat = size * size * channels;
    let mut dense_weights = Tensor::zeros(&[spec.head.dim(), flat]);
    kaiming_uniform(&mut dense_weights, flat, &mut rng);
    let dense_bias = Tensor::zeros(&[spec.head.dim()]);
    Ok(Model { spec: *spec, layer_specs, layer_params, dense_weights, dense_bias, layer_flops })
}

impl Model {
    pub fn total_params(&self) -> u64 {
        let conv: u64 = self.layer_flops.iter().map(|f| f.params).sum();
        conv + self.dense_weights.len() as u64 + self.dense_bias.len() as u64
    }

    pub fn total_flops(&self) -> u64 {
        self.layer_flops.iter().map(|f| f.flops).sum()
    }

    pub fn forward(&self, input: &Tensor, rng: &mut impl rand::Rng, training: bool) -> Result<(Tensor, ForwardCache)> {
        let mut x = input.clone();
        let mut layer_caches = Vec::with_capacity(self.layer_specs.len());
        for (lspec, params) in self.layer_specs.iter().zip(&self.layer_params) {
            let (out, cache) = layer_forward(lspec, &x, params, rng, training)?;
            layer_caches.push(cache);
            x = out;
        }
        let flat_features = x.flattened();
        let out = dense_forward(&flat_features, &self.dense_weights, &self.dense_bias)?;
        Ok((out, ForwardCache { layer_caches, flat_features }))
    }

    /// Gradients in the same order as [`Model::params_mut`].
    pub fn backward(&self, cache: &ForwardCache, output_grad: &Tensor) -> Result<Vec<Tensor>> {
        let (grad_flat, grad_w, grad_b) = dense_backward(&cache.flat_features, &self.dense_weights, output_grad)?;
        let mut per_layer = vec![None; self.layer_specs.len()];
        let mut upstream_flat = grad_flat;
        for idx in (0..self.layer_specs.len()).rev() {
            let lcache = &cache.layer_caches[idx];
            let upstream = upstream_flat.reshaped(lcache.output_shape())?;
            let grads = layer_backward(&self.layer_specs[idx], &self.layer_params[idx], lcache, &upstream)?;
            upstream_flat = grads.grad_input.flattened();
            per_layer[idx] = Some((grads.grad_filters, grads.grad_bias));
        }
        let mut out = Vec::with_capacity(2 * self.layer_specs.len() + 2);
        for pair in per_layer {
            let (gf, gb) = pair.expect("filled above");
            out.push(gf);
            out.push(gb);
        }
        out.push(grad_w);
        out.push(grad_b);
        Ok(out)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.layer_params.len() + 2);
        for p in &mut self.layer_params {
            out.push(&mut p.filters);
            out.push(&mut p.bias);
        }
        out.push(&mut self.dense_weights);
        out.push(&mut self.dense_bias);
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.layer_params.len() + 2);
        for p in &self.layer_params {
            out.push(&p.filters);
            out.push(&p.bias);
        }
        out.push(&self.dense_weights);
        out.push(&self.dense_bias);
        out
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(GeoError::Config("epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    /// Desk-scale defaults: 30 epochs, Adam lr 1e-3, batch 64.
    fn default() -> TrainConfig {
        TrainConfig { epochs: 30, batch_size: 64, optimizer: OptimizerConfig::adam(1e-3), seed: 0 }
    }
}

fn sample_loss_and_grad(head: Head, output: &Tensor, label: &[f32]) -> Result<(f32, Tensor)> {
    match head {
        Head::Centroid => euclidean_loss(output, &Tensor::new(&[2], label.to_vec())?),
        Head::Classifier(_) => cross_entropy(output, label[0] as usize),
    }
}

fn check_task(model: &Model, ds: &Dataset) -> Result<()> {
    let ok = matches!(
        (model.spec.head, ds.meta.task),
        (Head::Centroid, Task::MassCentre) | (Head::Classifier(_), Task::Greek)
    );
    if !ok {
        return Err(GeoError::Config(format!(
            "model head {:?} does not match dataset task {:?}",
            model.spec.head, ds.meta.task
        )));
    }
    if ds.image_hw().0 != model.spec.input_size {
        return Err(GeoError::Config(format!(
            "model expects {}x{} inputs, dataset has {}x{}",
            model.spec.input_size,
            model.spec.input_size,
            ds.image_hw().0,
            ds.image_hw().1
        )));
    }
    Ok(())
}

/// Minibatch training; returns the per-epoch mean train loss.
pub fn train(model: &mut Model, ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<f32>> {
    cfg.validate()?;
    check_task(model, ds)?;
    if ds.is_empty() {
        return Err(GeoError::Config("cannot train on an empty dataset".into()));
    }
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(7));
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad_acc: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let img = ds.image(i);
                let (out, cache) = model.forward(&img, &mut rng, true)?;
                let (loss, out_grad) = sample_loss_and_grad(model.spec.head, &out, ds.label(i))?;
                if !loss.is_finite() {
                    return Err(GeoError::Diverged { epoch, batch: batch_idx, lr: cfg.optimizer.learning_rate() });
                }
                batch_loss += loss as f64;
                let grads = model.backward(&cache, &out_grad)?;
                match &mut grad_acc {
                    None => grad_acc = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                                *av += gv;
                            }
                        }
                    }
                }
            }
            let mut grads = grad_acc.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f32;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            epoch_loss += batch_loss;
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            let mut params = model.params_mut();
            opt.step(&mut params, &grad_refs)
                .map_err(|e| match e {
                    GeoError::Internal(msg) if msg.contains("non-finite") => {
                        GeoError::Diverged { epoch, batch: batch_idx, lr: cfg.optimizer.learning_rate() }
                    }
                    other => other,
                })?;
        }
        history.push((epoch_loss / ds.len() as f64) as f32);
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalMetrics {
    pub mean_loss: f32,
    pub accuracy: Option<f32>,
}

/// Mean per-sample loss (and accuracy for classifier heads); GeoConv shifts
/// take their eval value.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<EvalMetrics> {
    check_task(model, ds)?;
    if ds.is_empty() {
        return Err(GeoError::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0f64;
    let mut correct = 0usize;
    for i in 0..ds.len() {
        let img = ds.image(i);
        let (out, _) = model.forward(&img, &mut rng, false)?;
        let (loss, _) = sample_loss_and_grad(model.spec.head, &out, ds.label(i))?;
        total += loss as f64;
        if matches!(model.spec.head, Head::Classifier(_)) {
            let pred = out
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if pred == ds.label(i)[0] as usize {
                correct += 1;
            }
        }
    }
    let accuracy = matches!(model.spec.head, Head::Classifier(_)).then(|| correct as f32 / ds.len() as f32);
    Ok(EvalMetrics { mean_loss: (total / ds.len() as f64) as f32, accuracy })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointManifest {
    spec: ModelSpec,
    /// (name, shape) in blob order.
    index: Vec<(String, Vec<usize>)>,
}

/// Checkpoint = u32 manifest length, JSON manifest, raw little-endian f32
/// parameter blob in index order.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut index = Vec::new();
    for (i, p) in model.layer_params.iter().enumerate() {
        index.push((format!("layer{i}.filters"), p.filters.shape().to_vec()));
        index.push((format!("layer{i}.bias"), p.bias.shape().to_vec()));
    }
    index.push(("dense.weights".into(), model.dense_weights.shape().to_vec()));
    index.push(("dense.bias".into(), model.dense_bias.shape().to_vec()));
    let manifest = serde_json::to_vec(&CheckpointManifest { spec: model.spec, index })
        .map_err(|e| GeoError::Internal(e.to_string()))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    buf.extend_from_slice(&manifest);
    for p in model.params() {
        for &v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 4 {
        return Err(GeoError::Format { offset: 0, message: "truncated checkpoint".into() });
    }
    let mlen = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    if buf.len() < 4 + mlen {
        return Err(GeoError::Format { offset: 4, message: "truncated manifest".into() });
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&buf[4..4 + mlen])
        .map_err(|e| GeoError::Format { offset: 4, message: e.to_string() })?;

    let mut model = build_model(&manifest.spec, 0)?;
    let mut pos = 4 + mlen;
    {
        let mut params = model.params_mut();
        if manifest.index.len() != params.len() {
            return Err(GeoError::Format { offset: 4, message: "parameter index does not match architecture".into() });
        }
        for ((name, shape), p) in manifest.index.iter().zip(params.iter_mut()) {
            if shape != p.shape() {
                return Err(GeoError::Format {
                    offset: pos,
                    message: format!("{name}: shape {shape:?} does not match built {:?}", p.shape()),
                });
            }
            for v in p.data_mut() {
                if pos + 4 > buf.len() {
                    return Err(GeoError::Format { offset: pos, message: format!("truncated blob in {name}") });
                }
                *v = f32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap());
                pos += 4;
            }
        }
    }
    if pos != buf.len() {
        return Err(GeoError::Format { offset: pos, message: format!("{} trailing bytes", buf.len() - pos) });
    }
    Ok(model)
}
