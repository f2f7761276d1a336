//! Layer kernels: forward maps and their exact gradients.
//!
//! The free functions are stateless and generic over [`Scalar`]; the layer
//! structs at the bottom wrap them with a forward cache for training.

use super::tensor::{axpy, dot, Scalar, Tensor3};
use super::NnError;

/// Geometry of a 1D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Zero padding that keeps length at stride 1 (odd kernels).
    pub fn same(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: (kernel - 1) / 2,
        }
    }

    /// `1 + floor((n + 2p - k) / s)`, or `None` when the kernel does not fit.
    pub fn output_len(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        (padded >= self.kernel && self.stride >= 1).then(|| 1 + (padded - self.kernel) / self.stride)
    }

    /// Output positions `i` for which tap `t` reads inside the input.
    fn valid_range(&self, t: usize, n: usize, n_out: usize) -> (usize, usize) {
        // input index = i*s + t - p must lie in [0, n)
        let s = self.stride as isize;
        let off = t as isize - self.padding as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = if (n as isize) - off <= 0 {
            0
        } else {
            ((n as isize - off) + s - 1) / s
        };
        let lo = lo.max(0) as usize;
        let hi = (hi.max(0) as usize).min(n_out);
        (lo.min(hi), hi)
    }
}

fn conv_shapes<T: Scalar>(
    input: &Tensor3<T>,
    filters: &[T],
    bias: &[T],
    out_channels: usize,
    geom: &ConvGeometry,
) -> Result<(usize, usize), NnError> {
    if out_channels == 0 || bias.len() != out_channels {
        return Err(NnError::ShapeMismatch(format!(
            "bias has {} entries for {out_channels} filters",
            bias.len()
        )));
    }
    let expected = out_channels * input.channels * geom.kernel;
    if filters.len() != expected {
        return Err(NnError::ShapeMismatch(format!(
            "filters hold {} values, {out_channels} filters × {} input channels × kernel {} need {expected}",
            filters.len(),
            input.channels,
            geom.kernel
        )));
    }
    let n_out = geom.output_len(input.len).ok_or_else(|| {
        NnError::ShapeMismatch(format!(
            "input length {} with padding {} is shorter than kernel {}",
            input.len, geom.padding, geom.kernel
        ))
    })?;
    Ok((input.channels, n_out))
}

const TILE: usize = 64;

/// Row length of the padded scratch buffer used by the unit-stride kernels.
fn padded_row(n_out: usize, kernel: usize) -> usize {
    n_out.div_ceil(TILE) * TILE + kernel - 1
}

/// Copies every channel of one sample into `buf` at offset `pad`; the rest of
/// each row stays zero.
fn fill_padded<T: Scalar>(sample: &[T], channels: usize, n: usize, pad: usize, row: usize, buf: &mut [T]) {
    for c in 0..channels {
        buf[c * row + pad..c * row + pad + n].copy_from_slice(&sample[c * n..(c + 1) * n]);
    }
}

/// Stride-1 convolution computed in register-sized output tiles.
fn conv_unit_stride<T: Scalar>(
    input: &Tensor3<T>,
    filters: &[T],
    bias: &[T],
    out_channels: usize,
    k: usize,
    pad: usize,
    n_out: usize,
) -> Tensor3<T> {
    let (cin, n) = (input.channels, input.len);
    let row = padded_row(n_out, k);
    let mut xpad = vec![T::zero(); cin * row];
    let mut out = Tensor3::zeros(input.batch, out_channels, n_out);
    for b in 0..input.batch {
        fill_padded(input.sample(b), cin, n, pad, row, &mut xpad);
        let y = out.sample_mut(b);
        for f in 0..out_channels {
            let wf = &filters[f * cin * k..(f + 1) * cin * k];
            let yf = &mut y[f * n_out..(f + 1) * n_out];
            for i0 in (0..n_out).step_by(TILE) {
                let mut acc = [bias[f]; TILE];
                for (c, wc) in wf.chunks_exact(k).enumerate() {
                    let xr = &xpad[c * row + i0..c * row + i0 + TILE + k - 1];
                    for (t, &w) in wc.iter().enumerate() {
                        let xs: &[T; TILE] = xr[t..t + TILE].try_into().expect("tile-sized window");
                        for (a, &v) in acc.iter_mut().zip(xs) {
                            *a += w * v;
                        }
                    }
                }
                let m = (n_out - i0).min(TILE);
                yf[i0..i0 + m].copy_from_slice(&acc[..m]);
            }
        }
    }
    out
}

/// Unit-stride gradients. The input gradient is itself a convolution of the
/// output gradient with the flipped, transposed filters.
fn conv_unit_stride_backward<T: Scalar>(grad_out: &Tensor3<T>, input: &Tensor3<T>, filters: &[T], k: usize, pad: usize) -> ConvGrads<T> {
    let (cin, n) = (input.channels, input.len);
    let (f_out, n_out) = (grad_out.channels, grad_out.len);
    let mut flipped = vec![T::zero(); filters.len()];
    for f in 0..f_out {
        for c in 0..cin {
            for t in 0..k {
                flipped[(c * f_out + f) * k + (k - 1 - t)] = filters[(f * cin + c) * k + t];
            }
        }
    }
    let g_in = conv_unit_stride(grad_out, &flipped, &vec![T::zero(); cin], cin, k, k - 1 - pad, n);

    let row = padded_row(n_out, k);
    let mut xpad = vec![T::zero(); cin * row];
    let mut g_w = vec![T::zero(); filters.len()];
    let mut g_b = vec![T::zero(); f_out];
    for b in 0..input.batch {
        fill_padded(input.sample(b), cin, n, pad, row, &mut xpad);
        let g = grad_out.sample(b);
        for f in 0..f_out {
            let gf = &g[f * n_out..(f + 1) * n_out];
            g_b[f] += gf.iter().copied().sum::<T>();
            for c in 0..cin {
                let xr = &xpad[c * row..(c + 1) * row];
                for t in 0..k {
                    g_w[(f * cin + c) * k + t] += dot(gf, &xr[t..t + n_out]);
                }
            }
        }
    }
    ConvGrads {
        input: g_in,
        filters: g_w,
        bias: g_b,
    }
}

/// Cross-correlation of the zero-padded input with each filter, plus bias.
///
/// `filters` is laid out `out_channels × in_channels × kernel`.
pub fn conv1d_forward<T: Scalar>(
    input: &Tensor3<T>,
    filters: &[T],
    bias: &[T],
    out_channels: usize,
    geom: &ConvGeometry,
) -> Result<Tensor3<T>, NnError> {
    let (cin, n_out) = conv_shapes(input, filters, bias, out_channels, geom)?;
    if geom.stride == 1 {
        return Ok(conv_unit_stride(input, filters, bias, out_channels, geom.kernel, geom.padding, n_out));
    }
    let (n, k, s, p) = (input.len, geom.kernel, geom.stride, geom.padding);
    let mut out = Tensor3::zeros(input.batch, out_channels, n_out);
    for b in 0..input.batch {
        let x = input.sample(b);
        let y = out.sample_mut(b);
        for f in 0..out_channels {
            let yf = &mut y[f * n_out..(f + 1) * n_out];
            yf.fill(bias[f]);
            for c in 0..cin {
                let xc = &x[c * n..(c + 1) * n];
                let w = &filters[(f * cin + c) * k..(f * cin + c + 1) * k];
                for (t, &wt) in w.iter().enumerate() {
                    let (lo, hi) = geom.valid_range(t, n, n_out);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * s + t - p;
                    if s == 1 {
                        axpy(wt, &xc[start..start + (hi - lo)], &mut yf[lo..hi]);
                    } else {
                        for (j, yi) in yf[lo..hi].iter_mut().enumerate() {
                            *yi += wt * xc[start + j * s];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input, filters and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor3<T>,
    pub filters: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv1d_backward<T: Scalar>(
    grad_out: &Tensor3<T>,
    input: &Tensor3<T>,
    filters: &[T],
    geom: &ConvGeometry,
) -> Result<ConvGrads<T>, NnError> {
    let f_out = grad_out.channels;
    let bias_shape = vec![T::zero(); f_out];
    let (cin, n_out) = conv_shapes(input, filters, &bias_shape, f_out, geom)?;
    if grad_out.batch != input.batch || grad_out.len != n_out {
        return Err(NnError::ShapeMismatch(format!(
            "gradient shape {:?} does not match forward output [{}, {f_out}, {n_out}]",
            grad_out.shape(),
            input.batch
        )));
    }
    if geom.stride == 1 && geom.padding < geom.kernel {
        return Ok(conv_unit_stride_backward(grad_out, input, filters, geom.kernel, geom.padding));
    }
    let (n, k, s, p) = (input.len, geom.kernel, geom.stride, geom.padding);
    let mut g_in = Tensor3::zeros(input.batch, cin, n);
    let mut g_w = vec![T::zero(); filters.len()];
    let mut g_b = vec![T::zero(); f_out];
    for b in 0..input.batch {
        let x = input.sample(b);
        let g = grad_out.sample(b);
        let gx = g_in.sample_mut(b);
        for f in 0..f_out {
            let gf = &g[f * n_out..(f + 1) * n_out];
            g_b[f] += gf.iter().copied().sum::<T>();
            for c in 0..cin {
                let xc = &x[c * n..(c + 1) * n];
                let gxc = &mut gx[c * n..(c + 1) * n];
                let base = (f * cin + c) * k;
                for t in 0..k {
                    let (lo, hi) = geom.valid_range(t, n, n_out);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * s + t - p;
                    let wt = filters[base + t];
                    if s == 1 {
                        let len = hi - lo;
                        g_w[base + t] += dot(&gf[lo..hi], &xc[start..start + len]);
                        axpy(wt, &gf[lo..hi], &mut gxc[start..start + len]);
                    } else {
                        for (j, &gi) in gf[lo..hi].iter().enumerate() {
                            g_w[base + t] += gi * xc[start + j * s];
                            gxc[start + j * s] += wt * gi;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: g_in,
        filters: g_w,
        bias: g_b,
    })
}

/// `x` for `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu<T: Scalar>(x: &[T], slope: T) -> Vec<T> {
    x.iter()
        .map(|&v| v * if v >= T::zero() { T::one() } else { slope })
        .collect()
}

/// Gradient is 1 for `x >= 0` (including exactly 0) and `slope` below.
pub fn leaky_relu_backward<T: Scalar>(grad_out: &[T], x: &[T], slope: T) -> Vec<T> {
    grad_out
        .iter()
        .zip(x)
        .map(|(&g, &v)| g * if v >= T::zero() { T::one() } else { slope })
        .collect()
}

/// Non-overlapping max pooling along the length axis. A trailing partial
/// window is dropped; ties keep the earliest index. Returned indices are flat
/// positions into `x.data`.
pub fn maxpool1d<T: Scalar>(x: &Tensor3<T>, width: usize) -> Result<(Tensor3<T>, Vec<u32>), NnError> {
    if width == 0 || x.len < width {
        return Err(NnError::ShapeMismatch(format!(
            "cannot pool length {} with width {width}",
            x.len
        )));
    }
    let n_out = x.len / width;
    let mut out = Tensor3::zeros(x.batch, x.channels, n_out);
    let mut idx = Vec::with_capacity(out.data.len());
    for row in 0..x.batch * x.channels {
        let src = &x.data[row * x.len..(row + 1) * x.len];
        let dst = &mut out.data[row * n_out..(row + 1) * n_out];
        if width == 2 {
            for (j, (d, pair)) in dst.iter_mut().zip(src.chunks_exact(2)).enumerate() {
                let second = pair[1] > pair[0];
                *d = if second { pair[1] } else { pair[0] };
                idx.push((row * x.len + 2 * j + usize::from(second)) as u32);
            }
            continue;
        }
        for (j, d) in dst.iter_mut().enumerate() {
            let window = &src[j * width..(j + 1) * width];
            let mut best = 0;
            for (w, &v) in window.iter().enumerate().skip(1) {
                if v > window[best] {
                    best = w;
                }
            }
            *d = window[best];
            idx.push((row * x.len + j * width + best) as u32);
        }
    }
    Ok((out, idx))
}

/// Routes each output gradient to the input position that won the max.
pub fn maxpool1d_backward<T: Scalar>(
    grad_out: &Tensor3<T>,
    argmax: &[u32],
    input_shape: [usize; 3],
) -> Result<Tensor3<T>, NnError> {
    if grad_out.data.len() != argmax.len() {
        return Err(NnError::ShapeMismatch("pool gradient and argmax differ in size".into()));
    }
    let [b, c, n] = input_shape;
    let mut g = Tensor3::zeros(b, c, n);
    for (&i, &v) in argmax.iter().zip(&grad_out.data) {
        g.data[i as usize] += v;
    }
    Ok(g)
}

/// `y = x Wᵀ + b` for `x: batch × in_dim`, `W: out_dim × in_dim`.
pub fn dense_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    weights: &[T],
    bias: &[T],
) -> Result<Vec<T>, NnError> {
    let out_dim = bias.len();
    if batch == 0 || !x.len().is_multiple_of(batch) || out_dim == 0 {
        return Err(NnError::ShapeMismatch(format!(
            "dense input of {} values does not split into {batch} rows",
            x.len()
        )));
    }
    let in_dim = x.len() / batch;
    if weights.len() != out_dim * in_dim {
        return Err(NnError::ShapeMismatch(format!(
            "dense weights hold {} values, expected {out_dim} × {in_dim}",
            weights.len()
        )));
    }
    let mut y = Vec::with_capacity(batch * out_dim);
    for row in x.chunks_exact(in_dim) {
        for (o, w) in weights.chunks_exact(in_dim).enumerate() {
            y.push(bias[o] + dot(w, row));
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads<T> {
    pub input: Vec<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

pub fn dense_backward<T: Scalar>(
    grad_out: &[T],
    x: &[T],
    batch: usize,
    weights: &[T],
) -> Result<DenseGrads<T>, NnError> {
    if batch == 0 || !grad_out.len().is_multiple_of(batch) || !x.len().is_multiple_of(batch) {
        return Err(NnError::ShapeMismatch("dense gradient batch mismatch".into()));
    }
    let out_dim = grad_out.len() / batch;
    let in_dim = x.len() / batch;
    if weights.len() != out_dim * in_dim {
        return Err(NnError::ShapeMismatch("dense weights do not match gradient".into()));
    }
    let mut g_x = vec![T::zero(); x.len()];
    let mut g_w = vec![T::zero(); weights.len()];
    let mut g_b = vec![T::zero(); out_dim];
    for b in 0..batch {
        let xb = &x[b * in_dim..(b + 1) * in_dim];
        let gb = &grad_out[b * out_dim..(b + 1) * out_dim];
        let gxb = &mut g_x[b * in_dim..(b + 1) * in_dim];
        for (o, &g) in gb.iter().enumerate() {
            g_b[o] += g;
            if g == T::zero() {
                continue;
            }
            axpy(g, xb, &mut g_w[o * in_dim..(o + 1) * in_dim]);
            axpy(g, &weights[o * in_dim..(o + 1) * in_dim], gxb);
        }
    }
    Ok(DenseGrads {
        input: g_x,
        weights: g_w,
        bias: g_b,
    })
}

/// Mean softmax cross-entropy `-Ψ[τ] + log Σ exp Ψ[i]` over the batch, and
/// its gradient `(softmax(Ψ) - onehot(τ)) / batch`.
pub fn cross_entropy<T: Scalar>(
    scores: &[T],
    labels: &[usize],
    classes: usize,
) -> Result<(T, Vec<T>), NnError> {
    let batch = labels.len();
    if batch == 0 || classes == 0 || scores.len() != batch * classes {
        return Err(NnError::ShapeMismatch(format!(
            "{} scores for {batch} labels × {classes} classes",
            scores.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(NnError::NonFinite(format!("score {i}")));
    }
    let inv_b = T::one() / T::from_usize(batch).expect("batch fits");
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(scores.len());
    for (row, &label) in scores.chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(NnError::LabelOutOfRange { label, classes });
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&s| (s - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        loss += sum.ln() + max - row[label];
        for (i, e) in exps.iter().enumerate() {
            let p = *e / sum;
            let onehot = if i == label { T::one() } else { T::zero() };
            grad.push((p - onehot) * inv_b);
        }
    }
    Ok((loss * inv_b, grad))
}

/// Convolution with a forward cache.
#[derive(Debug, Clone)]
pub struct Conv1d<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeometry,
    cache: Option<Tensor3<T>>,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(weight: Vec<T>, bias: Vec<T>, in_channels: usize, geom: ConvGeometry) -> Self {
        let out_channels = bias.len();
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            geom,
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor3<T>) -> Result<Tensor3<T>, NnError> {
        conv1d_forward(x, &self.weight, &self.bias, self.out_channels, &self.geom)
    }

    pub fn forward(&mut self, x: Tensor3<T>) -> Result<Tensor3<T>, NnError> {
        let y = self.infer(&x)?;
        self.cache = Some(x);
        Ok(y)
    }

    /// Consumes the cache left by [`Conv1d::forward`].
    pub fn backward(&mut self, grad_out: &Tensor3<T>) -> Result<ConvGrads<T>, NnError> {
        let x = self.cache.take().ok_or(NnError::MissingCache("conv1d"))?;
        conv1d_backward(grad_out, &x, &self.weight, &self.geom)
    }
}

#[derive(Debug, Clone)]
pub struct LeakyRelu<T> {
    pub slope: T,
    cache: Option<Tensor3<T>>,
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(slope: T) -> Self {
        Self { slope, cache: None }
    }

    pub fn infer(&self, x: &Tensor3<T>) -> Tensor3<T> {
        Tensor3 {
            batch: x.batch,
            channels: x.channels,
            len: x.len,
            data: leaky_relu(&x.data, self.slope),
        }
    }

    pub fn forward(&mut self, x: Tensor3<T>) -> Tensor3<T> {
        let y = self.infer(&x);
        self.cache = Some(x);
        y
    }

    pub fn backward(&mut self, grad_out: &Tensor3<T>) -> Result<Tensor3<T>, NnError> {
        let x = self.cache.take().ok_or(NnError::MissingCache("leaky_relu"))?;
        if x.shape() != grad_out.shape() {
            return Err(NnError::ShapeMismatch("activation gradient shape".into()));
        }
        Ok(Tensor3 {
            batch: x.batch,
            channels: x.channels,
            len: x.len,
            data: leaky_relu_backward(&grad_out.data, &x.data, self.slope),
        })
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool1d {
    pub width: usize,
    cache: Option<([usize; 3], Vec<u32>)>,
}

impl MaxPool1d {
    pub fn new(width: usize) -> Self {
        Self { width, cache: None }
    }

    pub fn infer<T: Scalar>(&self, x: &Tensor3<T>) -> Result<Tensor3<T>, NnError> {
        maxpool1d(x, self.width).map(|(y, _)| y)
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor3<T>) -> Result<Tensor3<T>, NnError> {
        let (y, idx) = maxpool1d(x, self.width)?;
        self.cache = Some((x.shape(), idx));
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, grad_out: &Tensor3<T>) -> Result<Tensor3<T>, NnError> {
        let (shape, idx) = self.cache.take().ok_or(NnError::MissingCache("maxpool1d"))?;
        maxpool1d_backward(grad_out, &idx, shape)
    }
}

#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub in_dim: usize,
    pub out_dim: usize,
    cache: Option<(Vec<T>, usize)>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(weight: Vec<T>, bias: Vec<T>) -> Self {
        let out_dim = bias.len();
        let in_dim = weight.len().checked_div(out_dim).unwrap_or(0);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
            cache: None,
        }
    }

    pub fn infer(&self, x: &[T], batch: usize) -> Result<Vec<T>, NnError> {
        if x.len() != batch * self.in_dim {
            return Err(NnError::ShapeMismatch(format!(
                "dense expects {} features per row, got {}",
                self.in_dim,
                x.len() / batch.max(1)
            )));
        }
        dense_forward(x, batch, &self.weight, &self.bias)
    }

    pub fn forward(&mut self, x: Vec<T>, batch: usize) -> Result<Vec<T>, NnError> {
        let y = self.infer(&x, batch)?;
        self.cache = Some((x, batch));
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &[T]) -> Result<DenseGrads<T>, NnError> {
        let (x, batch) = self.cache.take().ok_or(NnError::MissingCache("dense"))?;
        dense_backward(grad_out, &x, batch, &self.weight)
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{ArchConfig, Network};
    use crate::rng::substream;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, b: usize, c: usize, n: usize) -> Tensor3<f64> {
        Tensor3::from_vec(b, c, n, random_vec(rng, b * c * n)).unwrap()
    }

    /// Largest deviation divided by the largest magnitude.
    fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        assert_eq!(analytic.len(), numeric.len());
        let scale = analytic
            .iter()
            .chain(numeric)
            .fold(1e-12f64, |m, v| m.max(v.abs()));
        let dev = analytic
            .iter()
            .zip(numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        dev / scale
    }

    /// Central differences of `f` at every coordinate of `x`.
    fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut x = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = x[i];
                x[i] = orig + H;
                let up = f(&x);
                x[i] = orig - H;
                let down = f(&x);
                x[i] = orig;
                (up - down) / (2.0 * H)
            })
            .collect()
    }

    fn weighted_sum(y: &[f64], r: &[f64]) -> f64 {
        y.iter().zip(r).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn output_length_formula() {
        let g = ConvGeometry::same(3);
        assert_eq!(g.output_len(1024), Some(1024));
        let g = ConvGeometry { kernel: 3, stride: 2, padding: 0 };
        assert_eq!(g.output_len(8), Some(3));
        let g = ConvGeometry { kernel: 5, stride: 1, padding: 0 };
        assert_eq!(g.output_len(4), None);
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor3::<f64>::zeros(2, 3, 10);
        let w = vec![0.7; 4 * 3 * 3];
        let y = conv1d_forward(&x, &w, &[1.0, -2.0, 0.5, 3.0], 4, &ConvGeometry::same(3)).unwrap();
        assert_eq!(y.shape(), [2, 4, 10]);
        for b in 0..2 {
            for (f, &bias) in [1.0, -2.0, 0.5, 3.0].iter().enumerate() {
                assert!(y.sample(b)[f * 10..(f + 1) * 10].iter().all(|&v| v == bias));
            }
        }
    }

    #[test]
    fn impulse_response_matches_direct_loop() {
        let n = 8;
        let filt = [1.0, 2.0, 3.0];
        let mut x = vec![0.0; n];
        x[4] = 1.0;
        let t = Tensor3::from_vec(1, 1, n, x.clone()).unwrap();
        let y = conv1d_forward(&t, &filt, &[0.0], 1, &ConvGeometry::same(3)).unwrap();
        let mut expected = vec![0.0; n];
        for (i, e) in expected.iter_mut().enumerate() {
            for (t, w) in filt.iter().enumerate() {
                let j = i as isize + t as isize - 1;
                if (0..n as isize).contains(&j) {
                    *e += w * x[j as usize];
                }
            }
        }
        assert_eq!(y.data, expected);
        assert_eq!(expected, vec![0.0, 0.0, 0.0, 3.0, 2.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn full_size_layer_shape() {
        let x = Tensor3::<f32>::zeros(1, 2, 1024);
        let y = conv1d_forward(&x, &vec![0.0; 25 * 2 * 3], &[0.0; 25], 25, &ConvGeometry::same(3)).unwrap();
        assert_eq!(y.shape(), [1, 25, 1024]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor3::<f64>::zeros(1, 2, 8);
        let err = conv1d_forward(&x, &[0.0; 3], &[0.0], 1, &ConvGeometry::same(3));
        assert!(matches!(err, Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = substream(1, &[]);
        let x = random_tensor(&mut rng, 2, 2, 16);
        let w = random_vec(&mut rng, 2 * 2 * 3);
        let g = conv1d_backward(&Tensor3::zeros(2, 2, 16), &x, &w, &ConvGeometry::same(3)).unwrap();
        assert!(g.input.data.iter().chain(&g.filters).chain(&g.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_passes_gradient_through() {
        let mut rng = substream(2, &[]);
        let x = random_tensor(&mut rng, 1, 1, 12);
        let g = random_tensor(&mut rng, 1, 1, 12);
        let y = conv1d_forward(&x, &[0.0, 1.0, 0.0], &[0.0], 1, &ConvGeometry::same(3)).unwrap();
        assert_eq!(y.data, x.data);
        let grads = conv1d_backward(&g, &x, &[0.0, 1.0, 0.0], &ConvGeometry::same(3)).unwrap();
        assert_eq!(grads.input.data, g.data);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for case in 0..24u64 {
            let mut rng = substream(100, &[case]);
            let batch = rng.random_range(1..=3);
            let cin = rng.random_range(1..=3);
            let f = rng.random_range(1..=4);
            let k = [1, 3, 5][rng.random_range(0..3)];
            let geom = ConvGeometry {
                kernel: k,
                stride: rng.random_range(1..=3),
                padding: rng.random_range(0..=k / 2 + 1),
            };
            let n = rng.random_range(k..=20);
            let x = random_tensor(&mut rng, batch, cin, n);
            let w = random_vec(&mut rng, f * cin * k);
            let bias = random_vec(&mut rng, f);
            let y = conv1d_forward(&x, &w, &bias, f, &geom).unwrap();
            let r = random_vec(&mut rng, y.data.len());
            let g_out = Tensor3::from_vec(y.batch, y.channels, y.len, r.clone()).unwrap();
            let grads = conv1d_backward(&g_out, &x, &w, &geom).unwrap();

            let num_x = numeric_grad(&x.data, |xd| {
                let xt = Tensor3::from_vec(batch, cin, n, xd.to_vec()).unwrap();
                weighted_sum(&conv1d_forward(&xt, &w, &bias, f, &geom).unwrap().data, &r)
            });
            let num_w = numeric_grad(&w, |wd| weighted_sum(&conv1d_forward(&x, wd, &bias, f, &geom).unwrap().data, &r));
            let num_b = numeric_grad(&bias, |bd| weighted_sum(&conv1d_forward(&x, &w, bd, f, &geom).unwrap().data, &r));
            assert!(rel_error(&grads.input.data, &num_x) < 1e-4, "case {case} input");
            assert!(rel_error(&grads.filters, &num_w) < 1e-4, "case {case} filters");
            assert!(rel_error(&grads.bias, &num_b) < 1e-4, "case {case} bias");
        }
    }

    #[test]
    fn leaky_relu_values_and_slopes() {
        assert_eq!(leaky_relu(&[-1.0f64, 0.0, 2.0], 0.1), vec![-0.1, 0.0, 2.0]);
        assert_eq!(leaky_relu_backward(&[1.0f64, 1.0, 1.0], &[-1.0, 0.0, 2.0], 0.1), vec![0.1, 1.0, 1.0]);
    }

    #[test]
    fn leaky_relu_gradient_matches_finite_differences() {
        let mut rng = substream(3, &[]);
        for _ in 0..20 {
            let x: Vec<f64> = random_vec(&mut rng, 30).into_iter().filter(|v| v.abs() > 1e-3).collect();
            let r = random_vec(&mut rng, x.len());
            let num = numeric_grad(&x, |xd| weighted_sum(&leaky_relu(xd, 0.1), &r));
            assert!(rel_error(&leaky_relu_backward(&r, &x, 0.1), &num) < 1e-4);
        }
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor3::from_vec(1, 1, 4, vec![1.0f64, 3.0, 2.0, 5.0]).unwrap();
        let (y, idx) = maxpool1d(&x, 2).unwrap();
        assert_eq!(y.data, vec![3.0, 5.0]);
        assert_eq!(idx, vec![1, 3]);

        let x = Tensor3::from_vec(1, 1, 2, vec![7.0f64, 7.0]).unwrap();
        let (y, idx) = maxpool1d(&x, 2).unwrap();
        assert_eq!(y.data, vec![7.0]);
        let g = maxpool1d_backward(&Tensor3::from_vec(1, 1, 1, vec![1.0]).unwrap(), &idx, [1, 1, 2]).unwrap();
        assert_eq!(g.data, vec![1.0, 0.0]);

        let x = Tensor3::from_vec(1, 1, 5, vec![1.0f64, 2.0, 3.0, 4.0, 99.0]).unwrap();
        assert_eq!(maxpool1d(&x, 2).unwrap().0.data, vec![2.0, 4.0]);
        assert!(maxpool1d(&Tensor3::<f64>::zeros(1, 1, 1), 2).is_err());
    }

    #[test]
    fn maxpool_matches_pairwise_max() {
        let mut rng = substream(4, &[]);
        let x = random_tensor(&mut rng, 2, 3, 64);
        let (y, _) = maxpool1d(&x, 2).unwrap();
        let expected: Vec<f64> = x.data.chunks(2).map(|p| p[0].max(p[1])).collect();
        assert_eq!(y.data, expected);
    }

    #[test]
    fn maxpool_gradient_matches_finite_differences() {
        for case in 0..20u64 {
            let mut rng = substream(5, &[case]);
            let n = rng.random_range(2..=17);
            let x = random_tensor(&mut rng, 2, 2, n);
            let (y, idx) = maxpool1d(&x, 2).unwrap();
            let r = random_vec(&mut rng, y.data.len());
            let g = maxpool1d_backward(&Tensor3::from_vec(2, 2, y.len, r.clone()).unwrap(), &idx, x.shape()).unwrap();
            let num = numeric_grad(&x.data, |xd| {
                let xt = Tensor3::from_vec(2, 2, n, xd.to_vec()).unwrap();
                weighted_sum(&maxpool1d(&xt, 2).unwrap().0.data, &r)
            });
            assert!(rel_error(&g.data, &num) < 1e-4, "case {case}");
        }
    }

    #[test]
    fn dense_identity() {
        let mut w = vec![0.0f64; 16];
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        let x = vec![1.0, -2.0, 3.0, 0.5, 4.0, 4.0, 4.0, 4.0];
        assert_eq!(dense_forward(&x, 2, &w, &[0.0; 4]).unwrap(), x);
        assert!(dense_forward(&x, 2, &w[..12], &[0.0; 4]).is_err());
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        for case in 0..20u64 {
            let mut rng = substream(6, &[case]);
            let batch = rng.random_range(1..=4);
            let d = rng.random_range(1..=12);
            let c = rng.random_range(2..=6);
            let x = random_vec(&mut rng, batch * d);
            let w = random_vec(&mut rng, c * d);
            let b = random_vec(&mut rng, c);
            let r = random_vec(&mut rng, batch * c);
            let g = dense_backward(&r, &x, batch, &w).unwrap();
            let nx = numeric_grad(&x, |xd| weighted_sum(&dense_forward(xd, batch, &w, &b).unwrap(), &r));
            let nw = numeric_grad(&w, |wd| weighted_sum(&dense_forward(&x, batch, wd, &b).unwrap(), &r));
            let nb = numeric_grad(&b, |bd| weighted_sum(&dense_forward(&x, batch, &w, bd).unwrap(), &r));
            assert!(rel_error(&g.input, &nx) < 1e-4);
            assert!(rel_error(&g.weights, &nw) < 1e-4);
            assert!(rel_error(&g.bias, &nb) < 1e-4);
        }
    }

    #[test]
    fn cross_entropy_fixed_points() {
        let (loss, _) = cross_entropy(&[0.0f64; 4], &[2], 4).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let (loss, _) = cross_entropy(&[1000.0f64, 0.0, 0.0], &[0], 3).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&[f64::NAN, 0.0], &[0], 2),
            Err(NnError::NonFinite(_))
        ));
        assert!(matches!(
            cross_entropy(&[0.0f64, 0.0], &[2], 2),
            Err(NnError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = substream(7, &[]);
        let batch = 6;
        let scores: Vec<f64> = (0..batch * 10).map(|_| rng.random_range(-5.0..5.0)).collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..10)).collect();
        let (loss, grad) = cross_entropy(&scores, &labels, 10).unwrap();
        let direct: f64 = scores
            .chunks(10)
            .zip(&labels)
            .map(|(row, &t)| -row[t] + row.iter().map(|s| s.exp()).sum::<f64>().ln())
            .sum::<f64>()
            / batch as f64;
        assert!((loss - direct).abs() < 1e-10);
        for row in grad.chunks(10) {
            assert!(row.iter().sum::<f64>().abs() < 1e-9);
        }
        let num = numeric_grad(&scores, |s| cross_entropy(s, &labels, 10).unwrap().0);
        assert!(rel_error(&grad, &num) < 1e-4);
    }

    #[test]
    fn whole_network_gradient_matches_finite_differences() {
        for (case, blocks) in [1usize, 2, 3].into_iter().enumerate() {
            let mut arch = ArchConfig::new(16, 3).with_blocks(blocks);
            arch.filters = 3;
            let mut net: Network<f64> = Network::init(&arch, case as u64).unwrap();
            let mut rng = substream(8, &[case as u64]);
            let x = random_tensor(&mut rng, 2, 2, 16);
            let labels = vec![0, 2];
            let scores = net.forward(x.clone()).unwrap();
            let (_, g) = cross_entropy(&scores, &labels, 3).unwrap();
            let analytic = net.backward(&g).unwrap().concat();
            let flat = net.flat_params();
            let mut probe = net.clone();
            let num = numeric_grad(&flat, |p| {
                probe.set_flat_params(p).unwrap();
                cross_entropy(&probe.predict(&x).unwrap(), &labels, 3).unwrap().0
            });
            assert!(rel_error(&analytic, &num) < 1e-4, "blocks {blocks}");
        }
    }
}
