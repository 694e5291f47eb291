//! Small quantizable models: MLP, a four-conv CNN, and a tiny residual
//! network.
//!
//! Every parameterized (dense/conv) layer owns one signed weight
//! quantizer and one unsigned activation quantizer applied to the layer
//! *input*. The first and last parameterized layers are pinned at 8 bits
//! for both weights and activations and are excluded from the search
//! space; the layers in between are searchable, indexed in model order.
//!
//! Quantized forward per layer: quantize the input activations, normalize
//! then fake-quantize the weights, run the linear op, add the
//! full-precision bias. Full-precision mode bypasses all of that and uses
//! the raw weights. Biases and batch-norm parameters are never quantized.

use crate::error::{Error, Result};
use crate::quant::{
    fake_quant_acts, fake_quant_weights, normalize_weights, NormalizationStats, QuantSpec,
};
use crate::rng::{stream, StreamTag};
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};
use std::cell::RefCell;

/// Bit width of the pinned first/last layers.
pub const PINNED_BITS: u32 = 8;
/// Initial clipping scale for activation quantizers.
pub const ALPHA_X_INIT: f64 = 8.0;
const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

/// Forward numeric regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Quantized,
    FullPrecision,
}

/// Whether batch-norm layers use (and update) batch statistics or frozen
/// running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Registered model families and their size parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arch {
    /// `input -> hidden` (pinned), `hidden -> hidden` x hidden_layers
    /// (searchable), `hidden -> classes` (pinned).
    Mlp {
        input: usize,
        hidden: usize,
        hidden_layers: usize,
        classes: usize,
    },
    /// Four 3x3 conv+batchnorm blocks (first conv pinned) with two
    /// pooling stages, then a pinned dense classifier.
    CnnSmall {
        input_shape: [usize; 3],
        channels: [usize; 4],
        classes: usize,
    },
    /// Pinned stem conv, residual blocks of two searchable convs with
    /// batch norm, pooling, pinned dense classifier.
    ResnetTiny {
        input_shape: [usize; 3],
        width: usize,
        blocks: usize,
        classes: usize,
    },
}

impl Arch {
    /// Per-sample input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Arch::Mlp { input, .. } => vec![*input],
            Arch::CnnSmall { input_shape, .. } | Arch::ResnetTiny { input_shape, .. } => {
                input_shape.to_vec()
            }
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Arch::Mlp { classes, .. }
            | Arch::CnnSmall { classes, .. }
            | Arch::ResnetTiny { classes, .. } => *classes,
        }
    }
}

pub struct DenseLayer {
    pub w: Tensor, // (in, out)
    pub b: Tensor, // (out)
    pub weight_spec: QuantSpec,
    pub act_spec: QuantSpec,
    pub pinned: bool,
}

pub struct ConvLayer {
    pub w: Tensor, // (cout, cin, k, k)
    pub b: Tensor, // (cout)
    pub stride: usize,
    pub padding: usize,
    pub weight_spec: QuantSpec,
    pub act_spec: QuantSpec,
    pub pinned: bool,
}

pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: RefCell<Vec<f64>>,
    pub running_var: RefCell<Vec<f64>>,
    pub momentum: f64,
    pub eps: f64,
}

pub enum Layer {
    Dense(DenseLayer),
    Conv(ConvLayer),
    Relu,
    BatchNorm(BatchNormLayer),
    MaxPool { k: usize, stride: usize },
    Flatten,
    /// Adds the output of an earlier layer (by output index).
    ResidualAdd { from: usize },
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::MaxPool { .. } => "pool",
            Layer::Flatten => "flatten",
            Layer::ResidualAdd { .. } => "residual-add",
        }
    }

    fn quant_specs(&self) -> Option<(&QuantSpec, &QuantSpec, bool)> {
        match self {
            Layer::Dense(d) => Some((&d.weight_spec, &d.act_spec, d.pinned)),
            Layer::Conv(c) => Some((&c.weight_spec, &c.act_spec, c.pinned)),
            _ => None,
        }
    }
}

/// Weight-parameter count of one parameterized layer (bias excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParamCount {
    pub layer_index: usize,
    pub weights: usize,
    pub pinned: bool,
}

/// Mutable view of one trainable parameter. `positive` marks clipping
/// scales, which the optimizer must keep strictly positive.
pub struct ParamSlot<'a> {
    pub tensor: &'a mut Tensor,
    pub positive: bool,
}

/// One row of the per-layer report produced by the eval command.
#[derive(Debug, Clone)]
pub struct LayerBitsRow {
    pub layer_index: usize,
    pub kind: &'static str,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub weight_count: usize,
    pub pinned: bool,
}

pub struct Model {
    pub arch: Arch,
    pub layers: Vec<Layer>,
    /// Indices (into `layers`) of the searchable quantizable layers, in
    /// model order. Its length is L; the search vector is 2L long.
    searchable: Vec<usize>,
}

/// Builds a model of the given family with deterministic weight
/// initialization from `seed`.
pub fn build_model(arch: &Arch, seed: u64) -> Result<Model> {
    let mut rng = stream(seed, StreamTag::WeightInit, 0, 0);
    let mut normal = move |n: usize, std: f64| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect()
    };

    let mut layers: Vec<Layer> = Vec::new();
    match arch {
        Arch::Mlp {
            input,
            hidden,
            hidden_layers,
            classes,
        } => {
            if *input == 0 || *hidden == 0 || *classes == 0 {
                return Err(Error::Config("mlp sizes must be positive".into()));
            }
            layers.push(dense(*input, *hidden, true, &mut normal)?);
            layers.push(Layer::Relu);
            for _ in 0..*hidden_layers {
                layers.push(dense(*hidden, *hidden, false, &mut normal)?);
                layers.push(Layer::Relu);
            }
            layers.push(dense(*hidden, *classes, true, &mut normal)?);
        }
        Arch::CnnSmall {
            input_shape,
            channels,
            classes,
        } => {
            let [c_in, h, w] = *input_shape;
            // Batch norm after every conv keeps activation scales inside
            // the quantizer range; normalized weights have unit spread,
            // so a plain conv stack would saturate the clipping scales.
            layers.push(conv(c_in, channels[0], 1, 1, true, &mut normal)?);
            layers.push(batch_norm(channels[0]));
            layers.push(Layer::Relu);
            layers.push(conv(channels[0], channels[1], 1, 1, false, &mut normal)?);
            layers.push(batch_norm(channels[1]));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool { k: 2, stride: 2 });
            layers.push(conv(channels[1], channels[2], 1, 1, false, &mut normal)?);
            layers.push(batch_norm(channels[2]));
            layers.push(Layer::Relu);
            layers.push(conv(channels[2], channels[3], 1, 1, false, &mut normal)?);
            layers.push(batch_norm(channels[3]));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool { k: 2, stride: 2 });
            layers.push(Layer::Flatten);
            let (fh, fw) = (h / 2 / 2, w / 2 / 2);
            if fh == 0 || fw == 0 {
                return Err(Error::Config(format!(
                    "cnn-small input {h}x{w} too small for two pooling stages"
                )));
            }
            layers.push(dense(channels[3] * fh * fw, *classes, true, &mut normal)?);
        }
        Arch::ResnetTiny {
            input_shape,
            width,
            blocks,
            classes,
        } => {
            let [c_in, h, w] = *input_shape;
            layers.push(conv(c_in, *width, 1, 1, true, &mut normal)?);
            layers.push(Layer::Relu);
            for _ in 0..*blocks {
                // Output index of the layer feeding this block.
                let base = layers.len() - 1;
                layers.push(conv(*width, *width, 1, 1, false, &mut normal)?);
                layers.push(batch_norm(*width));
                layers.push(Layer::Relu);
                layers.push(conv(*width, *width, 1, 1, false, &mut normal)?);
                layers.push(batch_norm(*width));
                layers.push(Layer::ResidualAdd { from: base });
                layers.push(Layer::Relu);
            }
            layers.push(Layer::MaxPool { k: 2, stride: 2 });
            layers.push(Layer::Flatten);
            let (fh, fw) = (h / 2, w / 2);
            if fh == 0 || fw == 0 {
                return Err(Error::Config(format!(
                    "resnet-tiny input {h}x{w} too small for pooling"
                )));
            }
            layers.push(dense(width * fh * fw, *classes, true, &mut normal)?);
        }
    }

    let searchable = layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l.quant_specs() {
            Some((_, _, false)) => Some(i),
            _ => None,
        })
        .collect();
    Ok(Model {
        arch: arch.clone(),
        layers,
        searchable,
    })
}

fn dense(
    n_in: usize,
    n_out: usize,
    pinned: bool,
    normal: &mut dyn FnMut(usize, f64) -> Vec<f64>,
) -> Result<Layer> {
    let std = (2.0 / n_in as f64).sqrt();
    let w = Tensor::parameter(&[n_in, n_out], &normal(n_in * n_out, std))?;
    let b = Tensor::parameter(&[n_out], &vec![0.0; n_out])?;
    let (weight_spec, act_spec) = make_specs(&w)?;
    Ok(Layer::Dense(DenseLayer {
        w,
        b,
        weight_spec,
        act_spec,
        pinned,
    }))
}

fn conv(
    c_in: usize,
    c_out: usize,
    stride: usize,
    padding: usize,
    pinned: bool,
    normal: &mut dyn FnMut(usize, f64) -> Vec<f64>,
) -> Result<Layer> {
    let k = 3;
    let fan_in = c_in * k * k;
    let std = (2.0 / fan_in as f64).sqrt();
    let w = Tensor::parameter(&[c_out, c_in, k, k], &normal(c_out * fan_in, std))?;
    let b = Tensor::parameter(&[c_out], &vec![0.0; c_out])?;
    let (weight_spec, act_spec) = make_specs(&w)?;
    Ok(Layer::Conv(ConvLayer {
        w,
        b,
        stride,
        padding,
        weight_spec,
        act_spec,
        pinned,
    }))
}

/// Weight alpha starts at three standard deviations of the normalized
/// weights (which have roughly unit spread); activation alpha starts at a
/// fixed wide value. Both are learned afterwards.
fn make_specs(w: &Tensor) -> Result<(QuantSpec, QuantSpec)> {
    let normalized = normalize_weights(w);
    let stats = NormalizationStats::compute(normalized.data());
    let alpha_w = (3.0 * stats.sigma).max(1e-3);
    Ok((
        QuantSpec::signed_weights(PINNED_BITS, alpha_w)?,
        QuantSpec::unsigned_acts(PINNED_BITS, ALPHA_X_INIT)?,
    ))
}

fn batch_norm(channels: usize) -> Layer {
    Layer::BatchNorm(BatchNormLayer {
        gamma: Tensor::parameter(&[channels], &vec![1.0; channels]).unwrap(),
        beta: Tensor::parameter(&[channels], &vec![0.0; channels]).unwrap(),
        running_mean: RefCell::new(vec![0.0; channels]),
        running_var: RefCell::new(vec![1.0; channels]),
        momentum: BN_MOMENTUM,
        eps: BN_EPS,
    })
}

impl Model {
    /// Number of searchable layers L.
    pub fn searchable_len(&self) -> usize {
        self.searchable.len()
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.arch.input_shape()
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    /// Forward pass over a batch (leading dimension = batch size).
    pub fn forward(&self, batch: &Tensor, mode: Mode, phase: Phase) -> Result<Tensor> {
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Dense(d) => {
                    if x.shape().len() != 2 {
                        return Err(Error::Shape(format!(
                            "dense layer fed rank-{} input",
                            x.shape().len()
                        )));
                    }
                    let (xq, wq) = quantize_pair(&x, &d.w, &d.act_spec, &d.weight_spec, mode)?;
                    xq.matmul(&wq)?.add_bias(&d.b)?
                }
                Layer::Conv(c) => {
                    let (xq, wq) = quantize_pair(&x, &c.w, &c.act_spec, &c.weight_spec, mode)?;
                    xq.conv2d(&wq, c.stride, c.padding)?.add_bias(&c.b)?
                }
                Layer::Relu => x.relu(),
                Layer::BatchNorm(bn) => match phase {
                    Phase::Train => {
                        let (out, mean, var) = x.batch_norm_train(&bn.gamma, &bn.beta, bn.eps)?;
                        let mut rm = bn.running_mean.borrow_mut();
                        let mut rv = bn.running_var.borrow_mut();
                        for (r, m) in rm.iter_mut().zip(&mean) {
                            *r = (1.0 - bn.momentum) * *r + bn.momentum * m;
                        }
                        for (r, v) in rv.iter_mut().zip(&var) {
                            *r = (1.0 - bn.momentum) * *r + bn.momentum * v;
                        }
                        out
                    }
                    Phase::Eval => {
                        let rm = bn.running_mean.borrow();
                        let rv = bn.running_var.borrow();
                        x.batch_norm_eval(&bn.gamma, &bn.beta, &rm, &rv, bn.eps)?
                    }
                },
                Layer::MaxPool { k, stride } => x.max_pool2d(*k, *stride)?,
                Layer::Flatten => {
                    let n = x.shape()[0];
                    let rest: usize = x.shape()[1..].iter().product();
                    x.reshape(&[n, rest])?
                }
                Layer::ResidualAdd { from } => x.add(&outputs[*from])?,
            };
            outputs.push(x.clone());
        }
        let logits = outputs.pop().expect("model has layers");
        if logits.shape() != [batch.shape()[0], self.classes()] {
            return Err(Error::Internal(format!(
                "forward produced {:?}, expected ({}, {})",
                logits.shape(),
                batch.shape()[0],
                self.classes()
            )));
        }
        Ok(logits)
    }

    /// Installs per-layer bit widths on the searchable layers. Pinned
    /// layers are untouched by construction.
    pub fn set_bit_allocation(&mut self, r_w: &[u32], r_x: &[u32]) -> Result<()> {
        let l = self.searchable.len();
        if r_w.len() != l || r_x.len() != l {
            return Err(Error::Shape(format!(
                "bit allocation needs {l} weight and {l} activation entries, got {} and {}",
                r_w.len(),
                r_x.len()
            )));
        }
        if let Some(&bad) = r_w.iter().find(|&&b| b < 2) {
            return Err(Error::Domain(format!("weight bits {bad} below 2")));
        }
        if let Some(&bad) = r_x.iter().find(|&&b| b < 1) {
            return Err(Error::Domain(format!("activation bits {bad} below 1")));
        }
        let searchable = self.searchable.clone();
        for (slot, (&wb, &xb)) in searchable.iter().zip(r_w.iter().zip(r_x)) {
            match &mut self.layers[*slot] {
                Layer::Dense(d) => {
                    d.weight_spec.set_bits(wb)?;
                    d.act_spec.set_bits(xb)?;
                }
                Layer::Conv(c) => {
                    c.weight_spec.set_bits(wb)?;
                    c.act_spec.set_bits(xb)?;
                }
                _ => unreachable!("searchable indices point at parameterized layers"),
            }
        }
        Ok(())
    }

    /// Sets every searchable layer to the same static precision.
    pub fn set_static_bits(&mut self, bits: u32) -> Result<()> {
        let l = self.searchable.len();
        self.set_bit_allocation(&vec![bits; l], &vec![bits; l])
    }

    /// Current (weight, activation) bit widths of the searchable layers.
    pub fn bit_allocation(&self) -> (Vec<u32>, Vec<u32>) {
        let mut r_w = Vec::with_capacity(self.searchable.len());
        let mut r_x = Vec::with_capacity(self.searchable.len());
        for &i in &self.searchable {
            let (ws, xs, _) = self.layers[i].quant_specs().unwrap();
            r_w.push(ws.bits());
            r_x.push(xs.bits());
        }
        (r_w, r_x)
    }

    /// Exact weight-parameter counts per parameterized layer.
    pub fn param_counts(&self) -> Vec<LayerParamCount> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::Dense(d) => Some(LayerParamCount {
                    layer_index: i,
                    weights: d.w.len(),
                    pinned: d.pinned,
                }),
                Layer::Conv(c) => Some(LayerParamCount {
                    layer_index: i,
                    weights: c.w.len(),
                    pinned: c.pinned,
                }),
                _ => None,
            })
            .collect()
    }

    /// All trainable parameters in a stable order.
    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_>> {
        let mut slots = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    slots.push(ParamSlot {
                        tensor: &mut d.w,
                        positive: false,
                    });
                    slots.push(ParamSlot {
                        tensor: &mut d.b,
                        positive: false,
                    });
                    slots.push(ParamSlot {
                        tensor: d.weight_spec.alpha_tensor_mut(),
                        positive: true,
                    });
                    slots.push(ParamSlot {
                        tensor: d.act_spec.alpha_tensor_mut(),
                        positive: true,
                    });
                }
                Layer::Conv(c) => {
                    slots.push(ParamSlot {
                        tensor: &mut c.w,
                        positive: false,
                    });
                    slots.push(ParamSlot {
                        tensor: &mut c.b,
                        positive: false,
                    });
                    slots.push(ParamSlot {
                        tensor: c.weight_spec.alpha_tensor_mut(),
                        positive: true,
                    });
                    slots.push(ParamSlot {
                        tensor: c.act_spec.alpha_tensor_mut(),
                        positive: true,
                    });
                }
                Layer::BatchNorm(bn) => {
                    slots.push(ParamSlot {
                        tensor: &mut bn.gamma,
                        positive: false,
                    });
                    slots.push(ParamSlot {
                        tensor: &mut bn.beta,
                        positive: false,
                    });
                }
                _ => {}
            }
        }
        slots
    }

    /// Clears accumulated gradients on all parameters.
    pub fn zero_grads(&mut self) {
        for slot in self.params_mut() {
            slot.tensor.clear_grad();
        }
    }

    /// Snapshot of all trainable state (params plus batch-norm running
    /// statistics), restorable with [`Model::load_state`].
    pub fn clone_state(&mut self) -> ModelState {
        let params = self
            .params_mut()
            .iter()
            .map(|s| s.tensor.data().to_vec())
            .collect();
        let bn_stats = self
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm(bn) => Some((
                    bn.running_mean.borrow().clone(),
                    bn.running_var.borrow().clone(),
                )),
                _ => None,
            })
            .collect();
        ModelState { params, bn_stats }
    }

    pub fn load_state(&mut self, state: &ModelState) -> Result<()> {
        let slots = self.params_mut();
        if slots.len() != state.params.len() {
            return Err(Error::State(format!(
                "state has {} parameter tensors, model has {}",
                state.params.len(),
                slots.len()
            )));
        }
        for (slot, data) in slots.into_iter().zip(&state.params) {
            *slot.tensor = slot.tensor.with_data(data.clone())?;
        }
        let mut idx = 0;
        for layer in &self.layers {
            if let Layer::BatchNorm(bn) = layer {
                let (mean, var) = state
                    .bn_stats
                    .get(idx)
                    .ok_or_else(|| Error::State("missing batch-norm stats".into()))?;
                *bn.running_mean.borrow_mut() = mean.clone();
                *bn.running_var.borrow_mut() = var.clone();
                idx += 1;
            }
        }
        Ok(())
    }

    /// CRC-32 over all trainable state; used to assert that phases which
    /// must not touch weights really do not.
    pub fn state_hash(&mut self) -> u32 {
        let state = self.clone_state();
        let mut h = crc32fast::Hasher::new();
        for p in &state.params {
            for v in p {
                h.update(&v.to_le_bytes());
            }
        }
        for (m, v) in &state.bn_stats {
            for x in m.iter().chain(v) {
                h.update(&x.to_le_bytes());
            }
        }
        h.finalize()
    }

    /// Per-layer bit table for reporting: L searchable rows plus the
    /// pinned rows.
    pub fn layer_bits_table(&self) -> Vec<LayerBitsRow> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                let (ws, xs, pinned) = l.quant_specs()?;
                let weight_count = match l {
                    Layer::Dense(d) => d.w.len(),
                    Layer::Conv(c) => c.w.len(),
                    _ => unreachable!(),
                };
                Some(LayerBitsRow {
                    layer_index: i,
                    kind: l.kind_name(),
                    weight_bits: ws.bits(),
                    act_bits: xs.bits(),
                    weight_count,
                    pinned,
                })
            })
            .collect()
    }
}

/// Trainable state snapshot: parameter tensors in `params_mut` order plus
/// batch-norm running statistics in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: Vec<Vec<f64>>,
    pub bn_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

fn quantize_pair(
    x: &Tensor,
    w: &Tensor,
    act_spec: &QuantSpec,
    weight_spec: &QuantSpec,
    mode: Mode,
) -> Result<(Tensor, Tensor)> {
    match mode {
        Mode::FullPrecision => Ok((x.clone(), w.clone())),
        Mode::Quantized => {
            let xq = fake_quant_acts(x, act_spec)?;
            let wq = fake_quant_weights(&normalize_weights(w), weight_spec)?;
            Ok((xq, wq))
        }
    }
}

/// Row-wise argmax of (N,C) logits.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    (0..n)
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap()
        })
        .collect()
}
