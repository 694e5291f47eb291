//! Forward operations and their backward rules.

use super::Tensor;
use crate::error::{Error, Result};
use std::rc::Rc;

/// Custom backward rule for ops defined outside this module (the fake
/// quantizers and weight normalization). Returns one gradient per input;
/// `None` marks inputs that receive no gradient.
pub trait CustomVjp {
    fn backward(&self, upstream: &[f64], inputs: &[Tensor]) -> Vec<Option<Vec<f64>>>;
}

pub(crate) enum Rule {
    Add,
    /// rhs is a bias broadcast over the leading axes; `sum_stride` and
    /// `group` describe how output positions map onto bias slots.
    AddBias,
    Mul,
    Scale(f64),
    Matmul,
    Conv2d {
        stride: usize,
        padding: usize,
    },
    Relu,
    Mean,
    Reshape,
    MaxPool2d {
        argmax: Vec<usize>,
    },
    /// Saved softmax plus targets; `target_mass[n]` is the total target
    /// weight of row n (1 for hard labels).
    CrossEntropy {
        softmax: Vec<f64>,
        targets: Vec<f64>,
        target_mass: Vec<f64>,
    },
    BatchNormTrain {
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        scale: Vec<f64>,
        x_hat: Vec<f64>,
    },
    StraightThrough,
    Custom(Rc<dyn CustomVjp>),
}

impl Rule {
    pub(crate) fn backward(
        &self,
        upstream: &[f64],
        inputs: &[Tensor],
        out_shape: &[usize],
    ) -> Vec<Option<Vec<f64>>> {
        match self {
            Rule::Add => vec![
                Some(upstream.to_vec()),
                Some(upstream.to_vec()),
            ],
            Rule::AddBias => {
                let x = &inputs[0];
                let bias_len = inputs[1].len();
                let mut db = vec![0.0; bias_len];
                match x.shape().len() {
                    2 => {
                        let cols = x.shape()[1];
                        for (i, g) in upstream.iter().enumerate() {
                            db[i % cols] += g;
                        }
                    }
                    4 => {
                        let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                        let plane = h * w;
                        for (i, g) in upstream.iter().enumerate() {
                            db[(i / plane) % c] += g;
                        }
                    }
                    _ => unreachable!("add_bias validated rank"),
                }
                vec![Some(upstream.to_vec()), Some(db)]
            }
            Rule::Mul => {
                let a = inputs[0].data();
                let b = inputs[1].data();
                let da = upstream.iter().zip(b).map(|(g, y)| g * y).collect();
                let db = upstream.iter().zip(a).map(|(g, x)| g * x).collect();
                vec![Some(da), Some(db)]
            }
            Rule::Scale(c) => vec![Some(upstream.iter().map(|g| g * c).collect())],
            Rule::Matmul => {
                let a = &inputs[0];
                let b = &inputs[1];
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                // dA = G . B^T, dB = A^T . G
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                let (ad, bd) = (a.data(), b.data());
                for i in 0..m {
                    for j in 0..n {
                        let g = upstream[i * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += g * bd[p * n + j];
                            db[p * n + j] += g * ad[i * k + p];
                        }
                    }
                }
                vec![Some(da), Some(db)]
            }
            Rule::Conv2d { stride, padding } => {
                let x = &inputs[0];
                let kern = &inputs[1];
                let (n, cin, h, w) = dims4(x.shape());
                let (cout, _, kh, kw) = dims4(kern.shape());
                let (ho, wo) = (out_shape[2], out_shape[3]);
                let mut dx = vec![0.0; x.len()];
                let mut dk = vec![0.0; kern.len()];
                let (xd, kd) = (x.data(), kern.data());
                for b in 0..n {
                    for co in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = upstream[((b * cout + co) * ho + oy) * wo + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - *padding as isize;
                                        if iy < 0 || iy as usize >= h {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix =
                                                (ox * stride + kx) as isize - *padding as isize;
                                            if ix < 0 || ix as usize >= w {
                                                continue;
                                            }
                                            let xi = ((b * cin + ci) * h + iy as usize) * w
                                                + ix as usize;
                                            let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                            dx[xi] += g * kd[ki];
                                            dk[ki] += g * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(dx), Some(dk)]
            }
            Rule::Relu => {
                let x = inputs[0].data();
                let dx = upstream
                    .iter()
                    .zip(x)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![Some(dx)]
            }
            Rule::Mean => {
                let n = inputs[0].len() as f64;
                let g = upstream[0] / n;
                vec![Some(vec![g; inputs[0].len()])]
            }
            Rule::Reshape => vec![Some(upstream.to_vec())],
            Rule::MaxPool2d { argmax } => {
                let mut dx = vec![0.0; inputs[0].len()];
                for (g, &src) in upstream.iter().zip(argmax) {
                    dx[src] += g;
                }
                vec![Some(dx)]
            }
            Rule::CrossEntropy {
                softmax,
                targets,
                target_mass,
            } => {
                let classes = inputs[0].shape()[1];
                let rows = inputs[0].shape()[0] as f64;
                let g = upstream[0] / rows;
                let dl = softmax
                    .iter()
                    .zip(targets)
                    .enumerate()
                    .map(|(i, (s, t))| g * (target_mass[i / classes] * s - t))
                    .collect();
                vec![Some(dl), None]
            }
            Rule::BatchNormTrain { x_hat, inv_std } => {
                let x = &inputs[0];
                let gamma = inputs[1].data();
                let (n, c, h, w) = dims4(x.shape());
                let m = (n * h * w) as f64;
                let plane = h * w;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, g) in upstream.iter().enumerate() {
                    let ch = (i / plane) % c;
                    dgamma[ch] += g * x_hat[i];
                    dbeta[ch] += g;
                    sum_g[ch] += g;
                    sum_gx[ch] += g * x_hat[i];
                }
                let mut dx = vec![0.0; x.len()];
                for (i, g) in upstream.iter().enumerate() {
                    let ch = (i / plane) % c;
                    dx[i] = gamma[ch] * inv_std[ch] / m
                        * (m * g - sum_g[ch] - x_hat[i] * sum_gx[ch]);
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            Rule::BatchNormEval { scale, x_hat } => {
                let x = &inputs[0];
                let (_, c, h, w) = dims4(x.shape());
                let plane = h * w;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; x.len()];
                for (i, g) in upstream.iter().enumerate() {
                    let ch = (i / plane) % c;
                    dx[i] = g * scale[ch];
                    dgamma[ch] += g * x_hat[i];
                    dbeta[ch] += g;
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            Rule::StraightThrough => vec![Some(upstream.to_vec())],
            Rule::Custom(vjp) => vjp.backward(upstream, inputs),
        }
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shapes {:?} and {:?} do not conform",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape(self, rhs, "add")?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Rule::Add,
            vec![self.clone(), rhs.clone()],
        ))
    }

    /// Adds a bias vector to a (N,F) tensor (per feature) or a (N,C,H,W)
    /// tensor (per channel).
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let ok = match self.shape().len() {
            2 => bias.shape() == [self.shape()[1]],
            4 => bias.shape() == [self.shape()[1]],
            _ => false,
        };
        if !ok {
            return Err(Error::Shape(format!(
                "add_bias: bias {:?} does not fit input {:?}",
                bias.shape(),
                self.shape()
            )));
        }
        let mut data = self.data().to_vec();
        match self.shape().len() {
            2 => {
                let cols = self.shape()[1];
                for (i, v) in data.iter_mut().enumerate() {
                    *v += bias.data()[i % cols];
                }
            }
            _ => {
                let (c, h, w) = (self.shape()[1], self.shape()[2], self.shape()[3]);
                let plane = h * w;
                for (i, v) in data.iter_mut().enumerate() {
                    *v += bias.data()[(i / plane) % c];
                }
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Rule::AddBias,
            vec![self.clone(), bias.clone()],
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape(self, rhs, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Rule::Mul,
            vec![self.clone(), rhs.clone()],
        ))
    }

    /// Elementwise multiplication by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Rule::Scale(c),
            vec![self.clone()],
        )
    }

    /// (m,k) x (k,n) matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 2 || rhs.shape().len() != 2 {
            return Err(Error::Shape("matmul needs rank-2 tensors".into()));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (rhs.shape()[0], rhs.shape()[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dims {k} and {k2} differ"
            )));
        }
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let row = &b[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (o, bv) in dst.iter_mut().zip(row) {
                    *o += av * bv;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            Rule::Matmul,
            vec![self.clone(), rhs.clone()],
        ))
    }

    /// 2-d convolution of a (N,Cin,H,W) input with a (Cout,Cin,kH,kW)
    /// kernel, zero padding.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        if self.shape().len() != 4 || kernel.shape().len() != 4 {
            return Err(Error::Shape("conv2d needs 4-d input and kernel".into()));
        }
        if stride == 0 {
            return Err(Error::Domain("conv2d stride must be >= 1".into()));
        }
        let (n, cin, h, w) = dims4(self.shape());
        let (cout, kcin, kh, kw) = dims4(kernel.shape());
        if cin != kcin {
            return Err(Error::Shape(format!(
                "conv2d: input channels {cin} != kernel channels {kcin}"
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Shape("conv2d: kernel larger than padded input".into()));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let (xd, kd) = (self.data(), kernel.data());
        let mut out = vec![0.0; n * cout * ho * wo];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    acc += xd[((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * kd[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((b * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, cout, ho, wo],
            out,
            Rule::Conv2d { stride, padding },
            vec![self.clone(), kernel.clone()],
        ))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Rule::Relu,
            vec![self.clone()],
        )
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        let m = self.data().iter().sum::<f64>() / n;
        Tensor::from_op(vec![1], vec![m], Rule::Mean, vec![self.clone()])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            Rule::Reshape,
            vec![self.clone()],
        ))
    }

    /// Max pooling over (N,C,H,W) with a square window.
    pub fn max_pool2d(&self, k: usize, stride: usize) -> Result<Tensor> {
        if self.shape().len() != 4 {
            return Err(Error::Shape("max_pool2d needs a 4-d input".into()));
        }
        if k == 0 || stride == 0 {
            return Err(Error::Domain("max_pool2d window and stride must be >= 1".into()));
        }
        let (n, c, h, w) = dims4(self.shape());
        if h < k || w < k {
            return Err(Error::Shape("max_pool2d window larger than input".into()));
        }
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let xd = self.data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..n {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let i = ((b * c + ch) * h + oy * stride + ky) * w
                                    + ox * stride
                                    + kx;
                                if xd[i] > best {
                                    best = xd[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = ((b * c + ch) * ho + oy) * wo + ox;
                        out[o] = best;
                        argmax[o] = best_i;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, ho, wo],
            out,
            Rule::MaxPool2d { argmax },
            vec![self.clone()],
        ))
    }

    /// Mean cross-entropy of (N,C) logits against integer class labels.
    /// Uses the log-sum-exp form, so extreme logits stay finite.
    pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let (n, c) = ce_dims(logits, labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Value(format!("label {bad} out of range for {c} classes")));
        }
        let mut targets = vec![0.0; n * c];
        for (row, &l) in labels.iter().enumerate() {
            targets[row * c + l] = 1.0;
        }
        Self::cross_entropy_targets(logits, targets)
    }

    /// Mean cross-entropy against soft target rows (used by mixup).
    pub fn cross_entropy_soft(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
        same_shape(logits, targets, "cross_entropy_soft")?;
        Self::cross_entropy_targets(logits, targets.data().to_vec())
    }

    fn cross_entropy_targets(logits: &Tensor, targets: Vec<f64>) -> Result<Tensor> {
        let (n, c) = (logits.shape()[0], logits.shape()[1]);
        let ld = logits.data();
        let mut softmax = vec![0.0; n * c];
        let mut target_mass = vec![0.0; n];
        let mut loss = 0.0;
        for row in 0..n {
            let r = &ld[row * c..(row + 1) * c];
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = r.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            for j in 0..c {
                softmax[row * c + j] = (r[j] - lse).exp();
                let t = targets[row * c + j];
                target_mass[row] += t;
                loss += t * (lse - r[j]);
            }
        }
        loss /= n as f64;
        let targets_t = Tensor::leaf(vec![n, c], targets.clone(), false);
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            Rule::CrossEntropy {
                softmax,
                targets,
                target_mass,
            },
            vec![logits.clone(), targets_t],
        ))
    }

    /// Applies an elementwise map in the forward pass while the backward
    /// pass treats it as the identity (straight-through estimator).
    pub fn straight_through<F: Fn(f64) -> f64>(&self, forward_map: F) -> Tensor {
        let data = self.data().iter().map(|&v| forward_map(v)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Rule::StraightThrough,
            vec![self.clone()],
        )
    }

    /// Batch normalization over (N,C,H,W) using batch statistics.
    /// Returns the output plus the per-channel batch mean/variance so the
    /// caller can maintain running statistics.
    pub fn batch_norm_train(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let (n, c, h, w) = self.bn_check(gamma, beta)?;
        let m = (n * h * w) as f64;
        let plane = h * w;
        let xd = self.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, v) in xd.iter().enumerate() {
            mean[(i / plane) % c] += v;
        }
        for mu in mean.iter_mut() {
            *mu /= m;
        }
        for (i, v) in xd.iter().enumerate() {
            let ch = (i / plane) % c;
            var[ch] += (v - mean[ch]).powi(2);
        }
        for s in var.iter_mut() {
            *s /= m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut x_hat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, v) in xd.iter().enumerate() {
            let ch = (i / plane) % c;
            x_hat[i] = (v - mean[ch]) * inv_std[ch];
            out[i] = gamma.data()[ch] * x_hat[i] + beta.data()[ch];
        }
        let t = Tensor::from_op(
            self.shape().to_vec(),
            out,
            Rule::BatchNormTrain {
                x_hat,
                inv_std,
            },
            vec![self.clone(), gamma.clone(), beta.clone()],
        );
        Ok((t, mean, var))
    }

    /// Batch normalization using fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Tensor> {
        let (_, c, h, w) = self.bn_check(gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape("batch_norm_eval: stats length mismatch".into()));
        }
        let plane = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let scale: Vec<f64> = gamma
            .data()
            .iter()
            .zip(&inv_std)
            .map(|(g, s)| g * s)
            .collect();
        let xd = self.data();
        let mut x_hat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, v) in xd.iter().enumerate() {
            let ch = (i / plane) % c;
            x_hat[i] = (v - mean[ch]) * inv_std[ch];
            out[i] = gamma.data()[ch] * x_hat[i] + beta.data()[ch];
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Rule::BatchNormEval { scale, x_hat },
            vec![self.clone(), gamma.clone(), beta.clone()],
        ))
    }

    fn bn_check(&self, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize, usize)> {
        if self.shape().len() != 4 {
            return Err(Error::Shape("batch norm needs a 4-d input".into()));
        }
        let dims = dims4(self.shape());
        if gamma.shape() != [dims.1] || beta.shape() != [dims.1] {
            return Err(Error::Shape("batch norm: gamma/beta must be per-channel".into()));
        }
        Ok(dims)
    }

    /// Entry point for custom-differentiable ops (quantizers).
    pub(crate) fn custom_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        vjp: Rc<dyn CustomVjp>,
    ) -> Tensor {
        Tensor::from_op(shape, data, Rule::Custom(vjp), inputs)
    }
}

fn ce_dims(logits: &Tensor, n_labels: usize) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape("cross_entropy needs (N,C) logits".into()));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if n != n_labels {
        return Err(Error::Shape(format!(
            "cross_entropy: {n} logit rows vs {n_labels} labels"
        )));
    }
    Ok((n, c))
}
