//! Uniform fake quantization with learnable clipping scales.
//!
//! Weights are quantized symmetrically to signed grids, activations to
//! unsigned grids. Both follow clip -> scale -> round: values are clipped
//! to `[-alpha, alpha]` (signed) or `[0, alpha]` (unsigned), mapped to the
//! unit interval, rounded onto a uniform grid of `2^b` levels, and scaled
//! back. The rounding is invisible to the backward pass (straight-through);
//! the clipping scale `alpha` receives its own closed-form gradient so it
//! can be trained together with the weights.
//!
//! Rounding ties go away from zero, which keeps the signed grid symmetric:
//! `Q(-x) == -Q(x)`.

use crate::error::{Error, Result};
use crate::tensor::{CustomVjp, Tensor};
use std::rc::Rc;

/// Epsilon in the weight-normalization denominator.
pub const NORM_EPSILON: f64 = 1e-6;

/// Per-tensor quantization description: signedness, bit count, and the
/// learnable clipping scale.
#[derive(Debug, Clone)]
pub struct QuantSpec {
    signed: bool,
    bits: u32,
    alpha: Tensor,
}

impl QuantSpec {
    /// Signed spec for weight tensors. Needs at least 2 bits: one sign
    /// bit plus at least a ternary magnitude grid.
    pub fn signed_weights(bits: u32, alpha: f64) -> Result<QuantSpec> {
        if bits < 2 {
            return Err(Error::Domain(format!(
                "signed quantization needs bits >= 2, got {bits}"
            )));
        }
        Ok(QuantSpec {
            signed: true,
            bits,
            alpha: alpha_param(alpha)?,
        })
    }

    /// Unsigned spec for (post-ReLU) activation tensors.
    pub fn unsigned_acts(bits: u32, alpha: f64) -> Result<QuantSpec> {
        if bits < 1 {
            return Err(Error::Domain(format!(
                "unsigned quantization needs bits >= 1, got {bits}"
            )));
        }
        Ok(QuantSpec {
            signed: false,
            bits,
            alpha: alpha_param(alpha)?,
        })
    }

    pub fn signed(&self) -> bool {
        self.signed
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.data()[0]
    }

    /// The learnable clipping-scale parameter.
    pub fn alpha_tensor(&self) -> &Tensor {
        &self.alpha
    }

    pub(crate) fn alpha_tensor_mut(&mut self) -> &mut Tensor {
        &mut self.alpha
    }

    pub(crate) fn set_bits(&mut self, bits: u32) -> Result<()> {
        let min = if self.signed { 2 } else { 1 };
        if bits < min {
            return Err(Error::Domain(format!(
                "bit width {bits} below minimum {min}"
            )));
        }
        if bits > 32 {
            return Err(Error::Domain(format!("bit width {bits} above 32")));
        }
        self.bits = bits;
        Ok(())
    }

    /// Number of grid steps on the magnitude axis: `2^b - 1` unsigned,
    /// `2^(b-1) - 1` signed.
    fn levels(&self) -> f64 {
        let eff = if self.signed { self.bits - 1 } else { self.bits };
        ((1u64 << eff) - 1) as f64
    }
}

fn alpha_param(alpha: f64) -> Result<Tensor> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    Tensor::parameter(&[1], &[alpha])
}

/// Mean and population standard deviation of a weight tensor, as used by
/// weight normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationStats {
    pub mu: f64,
    pub sigma: f64,
    pub epsilon: f64,
}

impl NormalizationStats {
    pub fn compute(values: &[f64]) -> NormalizationStats {
        let n = values.len() as f64;
        let mu = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        NormalizationStats {
            mu,
            sigma: var.sqrt(),
            epsilon: NORM_EPSILON,
        }
    }
}

/// The basic quantization operator: rounds `x` in the unit interval onto
/// the uniform grid `{ k / (2^b - 1) }`. Ties round away from zero.
pub fn quantize_unit(x: f64, b: u32) -> Result<f64> {
    if b < 1 {
        return Err(Error::Domain(format!("quantize_unit needs b >= 1, got {b}")));
    }
    let levels = ((1u64 << b) - 1) as f64;
    Ok((levels * x).round() / levels)
}

/// Signed fake quantization of a weight tensor:
/// `alpha * Q_{b-1}(clip(w / alpha, -1, 1))` elementwise, taped with the
/// straight-through backward rule (see [`ste_weight_gradients`]).
pub fn fake_quant_weights(w: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    if !spec.signed {
        return Err(Error::Usage(
            "fake_quant_weights needs a signed QuantSpec".into(),
        ));
    }
    fake_quant(w, spec)
}

/// Unsigned fake quantization of an activation tensor:
/// `alpha * Q_b(clip(x / alpha, 0, 1))` elementwise. Negative inputs map
/// to zero.
pub fn fake_quant_acts(x: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    if spec.signed {
        return Err(Error::Usage(
            "fake_quant_acts needs an unsigned QuantSpec".into(),
        ));
    }
    fake_quant(x, spec)
}

fn fake_quant(x: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    let alpha = spec.alpha();
    let levels = spec.levels();
    let signed = spec.signed;
    let data: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| alpha * quantize_clipped(v, alpha, levels, signed))
        .collect();
    Ok(Tensor::custom_op(
        x.shape().to_vec(),
        data,
        vec![x.clone(), spec.alpha_tensor().clone()],
        Rc::new(FakeQuantVjp { signed, levels }),
    ))
}

fn quantize_clipped(v: f64, alpha: f64, levels: f64, signed: bool) -> f64 {
    let lo = if signed { -1.0 } else { 0.0 };
    let hat = (v / alpha).clamp(lo, 1.0);
    (levels * hat).round() / levels
}

struct FakeQuantVjp {
    signed: bool,
    levels: f64,
}

impl CustomVjp for FakeQuantVjp {
    fn backward(&self, upstream: &[f64], inputs: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        let alpha = inputs[1].data()[0];
        let mut dx = vec![0.0; x.len()];
        let mut dalpha = 0.0;
        for (i, (&v, &g)) in x.iter().zip(upstream).enumerate() {
            let (dv, da) = ste_gradients(v, alpha, self.levels, self.signed);
            dx[i] = g * dv;
            dalpha += g * da;
        }
        vec![Some(dx), Some(vec![dalpha])]
    }
}

/// Closed-form straight-through gradients of the fake quantizer with
/// respect to the input value and the clipping scale.
///
/// Signed case (`w_hat = clip(w/alpha, -1, 1)`, `q = Q(w_hat)`):
/// `d/dw = 1` inside the clip range, else 0; `d/dalpha = q - w_hat`
/// inside, else `sign(w)`. The unsigned case clips to `[0, 1]` and its
/// upper branch yields `d/dalpha = 1`.
pub fn ste_weight_gradients(w: f64, spec: &QuantSpec) -> (f64, f64) {
    ste_gradients(w, spec.alpha(), spec.levels(), spec.signed)
}

fn ste_gradients(v: f64, alpha: f64, levels: f64, signed: bool) -> (f64, f64) {
    if signed {
        if v.abs() < alpha {
            let hat = v / alpha;
            let q = (levels * hat).round() / levels;
            (1.0, q - hat)
        } else {
            (0.0, sign_away(v))
        }
    } else if v >= alpha {
        (0.0, 1.0)
    } else {
        // Covers both the interior and the clipped-below region; below
        // zero q == hat == 0, so the alpha gradient vanishes there.
        let hat = (v / alpha).max(0.0);
        let q = (levels * hat).round() / levels;
        let dv = if v > 0.0 { 1.0 } else { 0.0 };
        (dv, q - hat)
    }
}

fn sign_away(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Weight normalization `(w - mu) / (sigma + eps)` with mean and
/// population standard deviation of the tensor, differentiable through
/// both statistics.
pub fn normalize_weights(w: &Tensor) -> Tensor {
    let stats = NormalizationStats::compute(w.data());
    let denom = stats.sigma + stats.epsilon;
    let data: Vec<f64> = w.data().iter().map(|v| (v - stats.mu) / denom).collect();
    Tensor::custom_op(
        w.shape().to_vec(),
        data,
        vec![w.clone()],
        Rc::new(WeightNormVjp),
    )
}

struct WeightNormVjp;

impl CustomVjp for WeightNormVjp {
    fn backward(&self, upstream: &[f64], inputs: &[Tensor]) -> Vec<Option<Vec<f64>>> {
        let w = inputs[0].data();
        let stats = NormalizationStats::compute(w);
        let n = w.len() as f64;
        let denom = stats.sigma + stats.epsilon;
        let g_mean = upstream.iter().sum::<f64>() / n;
        // Contribution through sigma: sum_i g_i * (w_i - mu).
        let g_dot_centered: f64 = upstream
            .iter()
            .zip(w)
            .map(|(g, v)| g * (v - stats.mu))
            .sum();
        let sigma_term = if stats.sigma > 0.0 {
            g_dot_centered / (n * stats.sigma * denom * denom)
        } else {
            0.0
        };
        let dw = upstream
            .iter()
            .zip(w)
            .map(|(g, v)| (g - g_mean) / denom - sigma_term * (v - stats.mu))
            .collect();
        vec![Some(dw)]
    }
}

/// Integer grid indices `k` and scale `s` with `s * k` equal to the fake
/// quantizer's output. Exists for size accounting and verification, not
/// for an integer inference path.
pub fn integer_codes(x: &Tensor, spec: &QuantSpec) -> (Vec<i64>, f64) {
    let alpha = spec.alpha();
    let levels = spec.levels();
    let lo = if spec.signed { -1.0 } else { 0.0 };
    let codes = x
        .data()
        .iter()
        .map(|&v| (levels * (v / alpha).clamp(lo, 1.0)).round() as i64)
        .collect();
    (codes, alpha / levels)
}
