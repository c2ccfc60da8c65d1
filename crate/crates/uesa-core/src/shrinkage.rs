//! Hard shrinkage gating: averaged directional-attention evidence is
//! compared against a threshold to produce a binary mask, and the mask
//! multiplies the prior convolutional feature. The comparison is not
//! differentiable; the gate is treated as a constant during backpropagation
//! (straight-through).

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Threshold-gate configuration.
///
/// Equality with the threshold passes the gate (maps to 1). With
/// `normalize_before_gate` set, the evidence tensor is min-max normalized to
/// [0,1] per channel before the comparison; a constant channel (max == min)
/// gates to all-ones so constant evidence never erases the prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShrinkageConfig {
    pub th: f64,
    pub normalize_before_gate: bool,
}

impl ShrinkageConfig {
    pub fn new(th: f64) -> Result<Self> {
        if !th.is_finite() {
            return Err(Error::invalid(format!("shrinkage threshold {th} not finite")));
        }
        Ok(ShrinkageConfig {
            th,
            normalize_before_gate: true,
        })
    }

    pub fn without_normalization(mut self) -> Self {
        self.normalize_before_gate = false;
        self
    }
}

/// Elementwise arithmetic mean of the three directional outputs, in the
/// fixed summation order fH + fV + fD.
pub fn average_directions(f_h: &Tensor, f_v: &Tensor, f_d: &Tensor) -> Result<Tensor> {
    if f_h.shape() != f_v.shape() || f_h.shape() != f_d.shape() {
        return Err(Error::invalid(format!(
            "average_directions shape mismatch: {:?}, {:?}, {:?}",
            f_h.shape(),
            f_v.shape(),
            f_d.shape()
        )));
    }
    let sum = tensor::add(&tensor::add(f_h, f_v)?, f_d)?;
    tensor::scale(&sum, 1.0 / 3.0)
}

/// Mean of two tensors, used by the decoder's pairwise fusion.
pub fn average_pair(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    tensor::scale(&tensor::add(a, b)?, 0.5)
}

/// Binary gate from averaged evidence: 1 where the (optionally normalized)
/// value reaches `cfg.th`, 0 below it. Output contains only 0.0 and 1.0.
pub fn shrink_gate(f_avg: &Tensor, cfg: &ShrinkageConfig) -> Result<Tensor> {
    if f_avg.rank() == 0 {
        return Err(Error::invalid("shrink_gate needs a non-scalar tensor"));
    }
    let channels = f_avg.shape()[0];
    let span = f_avg.numel() / channels;
    let mut gate = vec![0.0; f_avg.numel()];

    for c in 0..channels {
        let slice = &f_avg.data()[c * span..(c + 1) * span];
        let out = &mut gate[c * span..(c + 1) * span];
        if cfg.normalize_before_gate {
            let min = slice.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == min {
                // constant channel: normalization is undefined, keep the prior
                out.fill(1.0);
                continue;
            }
            let inv = 1.0 / (max - min);
            for (o, &v) in out.iter_mut().zip(slice) {
                *o = if (v - min) * inv >= cfg.th { 1.0 } else { 0.0 };
            }
        } else {
            for (o, &v) in out.iter_mut().zip(slice) {
                *o = if v >= cfg.th { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(Tensor::from_raw(f_avg.shape().to_vec(), gate))
}

/// Fuse the prior feature with a binary gate: elementwise product, so gated
/// positions are exactly zero and open positions carry `f_em` bit-exactly.
pub fn fuse_prior(f_em: &Tensor, gate: &Tensor) -> Result<Tensor> {
    if f_em.shape() != gate.shape() {
        return Err(Error::invalid(format!(
            "fuse_prior shape mismatch: {:?} vs {:?}",
            f_em.shape(),
            gate.shape()
        )));
    }
    if !gate.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        return Err(Error::invalid("fuse_prior gate must be binary"));
    }
    tensor::mul(f_em, gate)
}

/// The full encoder-side shrinkage integration: gate the averaged
/// directional evidence, fuse with the prior, max-pool. Returns
/// `(f_ta, f_mp)` — the skip-connection export and the next block's input.
pub fn shrink_integrate(
    f_em: &Tensor,
    f_h: &Tensor,
    f_v: &Tensor,
    f_d: &Tensor,
    cfg: &ShrinkageConfig,
) -> Result<(Tensor, Tensor)> {
    if f_em.shape() != f_h.shape() {
        return Err(Error::invalid(format!(
            "shrink_integrate: prior shape {:?} does not match attention shape {:?}",
            f_em.shape(),
            f_h.shape()
        )));
    }
    let avg = average_directions(f_h, f_v, f_d)?;
    let gate = shrink_gate(&avg, cfg)?;
    let f_ta = fuse_prior(f_em, &gate)?;
    let f_mp = tensor::maxpool2d(&f_ta)?;
    Ok((f_ta, f_mp))
}
