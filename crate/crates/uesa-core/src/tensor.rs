//! Dense row-major tensor values and the small set of forward operations the
//! architecture is built from.
//!
//! Everything here is pure and deterministic: same inputs give bit-identical
//! outputs. Every operation checks its result for NaN/Inf and reports the
//! offending op by name, so a numerical blow-up is caught where it happens.

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating that `data` matches `shape` and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("Tensor::new"));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for values produced by ops that already validated
    /// shape arithmetic. Finiteness is still the caller's responsibility.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![0.0; n])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Value at a multi-dimensional index. Panics on out-of-range indices;
    /// meant for tests and oracles, not hot loops.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} (dim {dim})");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// View the tensor as [rows, cols] without copying, if the element count
    /// allows it.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.numel(),
                shape
            )));
        }
        Ok(Tensor::from_raw(shape.to_vec(), self.data.clone()))
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn check_finite(op: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(op))
    }
}

/// Reorder the axes of `t`. `order` must be a permutation of `0..rank`.
pub fn permute(t: &Tensor, order: &[usize]) -> Result<Tensor> {
    let rank = t.rank();
    if order.len() != rank {
        return Err(Error::invalid(format!(
            "permutation {order:?} has wrong length for rank {rank}"
        )));
    }
    let mut seen = vec![false; rank];
    for &axis in order {
        if axis >= rank || seen[axis] {
            return Err(Error::invalid(format!(
                "{order:?} is not a permutation of 0..{rank}"
            )));
        }
        seen[axis] = true;
    }

    let out_shape: Vec<usize> = order.iter().map(|&a| t.shape[a]).collect();
    let in_strides = t.strides();
    // stride in the input for each output axis
    let moved_strides: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();

    let mut out = vec![0.0; t.numel()];
    let mut index = vec![0usize; rank];
    for slot in out.iter_mut() {
        let src: usize = index
            .iter()
            .zip(&moved_strides)
            .map(|(&ix, &s)| ix * s)
            .sum();
        *slot = t.data[src];
        // odometer increment over out_shape
        for axis in (0..rank).rev() {
            index[axis] += 1;
            if index[axis] < out_shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    Ok(Tensor::from_raw(out_shape, out))
}

/// Inverse of a permutation, for undoing `permute`.
pub fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; order.len()];
    for (i, &a) in order.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Matrix product of `a` [N,D] and `b` [D,M].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::invalid(format!(
            "matmul expects rank-2 tensors, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (n, d) = (a.shape[0], a.shape[1]);
    let (d2, m) = (b.shape[0], b.shape[1]);
    if d != d2 {
        return Err(Error::invalid(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let a_row = &a.data[i * d..(i + 1) * d];
        let out_row = &mut out[i * m..(i + 1) * m];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * m..(k + 1) * m];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    let t = Tensor::from_raw(vec![n, m], out);
    check_finite("matmul", &t)?;
    Ok(t)
}

/// Row-wise softmax of a rank-2 tensor, stabilized by max subtraction.
pub fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    if t.rank() != 2 {
        return Err(Error::invalid(format!(
            "softmax_rows expects a rank-2 tensor, got {:?}",
            t.shape
        )));
    }
    let (n, m) = (t.shape[0], t.shape[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &t.data[i * m..(i + 1) * m];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out_row = &mut out[i * m..(i + 1) * m];
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    let t = Tensor::from_raw(vec![n, m], out);
    check_finite("softmax_rows", &t)?;
    Ok(t)
}

/// Spatial zero padding for [C,H,W] inputs. `top/bottom` pad rows,
/// `left/right` pad columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }
}

/// Output spatial size of a convolution along one axis; errors unless the
/// stride divides exactly.
pub(crate) fn conv_out_dim(input: usize, pad_lo: usize, pad_hi: usize, k: usize, stride: usize) -> Result<usize> {
    let padded = input + pad_lo + pad_hi;
    if padded < k {
        return Err(Error::invalid(format!(
            "kernel size {k} exceeds padded input extent {padded}"
        )));
    }
    let span = padded - k;
    if span % stride != 0 {
        return Err(Error::invalid(format!(
            "convolution output size is not integral: (({input} + {pad_lo} + {pad_hi}) - {k}) / {stride}"
        )));
    }
    Ok(span / stride + 1)
}

/// 2D cross-correlation of `input` [C_in,H,W] with `kernels`
/// [C_out,C_in,k,k] plus per-output-channel `bias` [C_out].
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    conv2d_padded(input, kernels, bias, stride, Padding::uniform(padding))
}

/// `conv2d` with independent padding per side. The 2x2 decoder convolution
/// needs (0,1,0,1) padding to preserve spatial size; a symmetric integer pad
/// cannot do that for even kernels.
pub fn conv2d_padded(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: Padding,
) -> Result<Tensor> {
    if input.rank() != 3 || kernels.rank() != 4 || bias.rank() != 1 {
        return Err(Error::invalid(format!(
            "conv2d expects input [C,H,W], kernels [O,C,k,k], bias [O]; got {:?}, {:?}, {:?}",
            input.shape, kernels.shape, bias.shape
        )));
    }
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (c_out, kc, kh, kw) = (
        kernels.shape[0],
        kernels.shape[1],
        kernels.shape[2],
        kernels.shape[3],
    );
    if kc != c_in {
        return Err(Error::invalid(format!(
            "kernel expects {kc} input channels, input has {c_in}"
        )));
    }
    if kh != kw || !(1..=3).contains(&kh) {
        return Err(Error::invalid(format!(
            "kernel must be square with size in 1..=3, got {kh}x{kw}"
        )));
    }
    if bias.shape[0] != c_out {
        return Err(Error::invalid(format!(
            "bias has {} entries for {} output channels",
            bias.shape[0], c_out
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let oh = conv_out_dim(h, pad.top, pad.bottom, kh, stride)?;
    let ow = conv_out_dim(w, pad.left, pad.right, kw, stride)?;

    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        let b = bias.data[co];
        out[co * oh * ow..(co + 1) * oh * ow].fill(b);
        for ci in 0..c_in {
            let plane = &input.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let kval = kernels.data[((co * c_in + ci) * kh + ky) * kw + kx];
                    if kval == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad.top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out[(co * oh + oy) * ow..(co * oh + oy + 1) * ow];
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad.left as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out_row[ox] += kval * in_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    let t = Tensor::from_raw(vec![c_out, oh, ow], out);
    check_finite("conv2d", &t)?;
    Ok(t)
}

/// 2x2 max pooling with stride 2 on a [C,H,W] tensor. H and W must be even.
pub fn maxpool2d(t: &Tensor) -> Result<Tensor> {
    maxpool2d_with_argmax(t).map(|(out, _)| out)
}

/// Max pooling that also reports, per output element, the flat input index of
/// the maximum (first occurrence in row-major window order on ties). The
/// backward pass routes gradient through these indices.
pub fn maxpool2d_with_argmax(t: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if t.rank() != 3 {
        return Err(Error::invalid(format!(
            "maxpool2d expects a [C,H,W] tensor, got {:?}",
            t.shape
        )));
    }
    let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "maxpool2d requires even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ci * h * w + (2 * oy) * w + 2 * ox;
                // row-major window order: (0,0), (0,1), (1,0), (1,1)
                let candidates = [base, base + 1, base + w, base + w + 1];
                let mut best = candidates[0];
                let mut best_val = t.data[best];
                for &idx in &candidates[1..] {
                    if t.data[idx] > best_val {
                        best = idx;
                        best_val = t.data[idx];
                    }
                }
                let o = (ci * oh + oy) * ow + ox;
                out[o] = best_val;
                argmax[o] = best;
            }
        }
    }
    Ok((Tensor::from_raw(vec![c, oh, ow], out), argmax))
}

/// Nearest-neighbor 2x upsampling of a [C,H,W] tensor: every element becomes
/// a 2x2 block, so `maxpool2d(upsample_nearest(t)) == t` exactly.
pub fn upsample_nearest(t: &Tensor) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(Error::invalid(format!(
            "upsample_nearest expects a [C,H,W] tensor, got {:?}",
            t.shape
        )));
    }
    let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = t.data[(ci * h + y) * w + x];
                let base = ci * oh * ow + (2 * y) * ow + 2 * x;
                out[base] = v;
                out[base + 1] = v;
                out[base + ow] = v;
                out[base + ow + 1] = v;
            }
        }
    }
    Ok(Tensor::from_raw(vec![c, oh, ow], out))
}

/// Elementwise sum; shapes must match.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_elementwise("add", a, b, |x, y| x + y)
}

/// Elementwise product; shapes must match.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_elementwise("mul", a, b, |x, y| x * y)
}

/// Multiply every element by a constant.
pub fn scale(t: &Tensor, factor: f64) -> Result<Tensor> {
    let out: Vec<f64> = t.data.iter().map(|v| v * factor).collect();
    let t = Tensor::from_raw(t.shape.clone(), out);
    check_finite("scale", &t)?;
    Ok(t)
}

fn zip_elementwise(op: &str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::invalid(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let out: Vec<f64> = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    let t = Tensor::from_raw(a.shape.clone(), out);
    check_finite(op, &t)?;
    Ok(t)
}
