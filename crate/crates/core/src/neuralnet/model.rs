//! Network architecture and composition of the layer stack.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{ConvGeometry, Conv1d, Dense, LeakyRelu, MaxPool1d};
use super::tensor::{Scalar, Tensor3};
use super::NnError;
use crate::rng::{purpose, substream};

/// Shape-defining hyperparameters of the classifier: `M` blocks of
/// Conv1D → LeakyReLU → MaxPool, then flatten → dense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub num_conv_blocks: usize,
    pub filters: usize,
    pub kernel_size: usize,
    pub input_len: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub leaky_slope: f64,
    pub stride: usize,
    pub pool_width: usize,
}

impl ArchConfig {
    /// Two blocks of 25 filters with kernel 3 on 2-channel I/Q input.
    pub fn new(input_len: usize, num_classes: usize) -> Self {
        Self {
            num_conv_blocks: 2,
            filters: 25,
            kernel_size: 3,
            input_len,
            input_channels: 2,
            num_classes,
            leaky_slope: 0.1,
            stride: 1,
            pool_width: 2,
        }
    }

    pub fn with_blocks(mut self, m: usize) -> Self {
        self.num_conv_blocks = m;
        self
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            kernel: self.kernel_size,
            stride: self.stride,
            padding: (self.kernel_size.saturating_sub(1)) / 2,
        }
    }

    /// Length entering each block, followed by the flattened per-channel
    /// length after the last pool.
    pub fn block_lengths(&self) -> Result<Vec<usize>, NnError> {
        let geom = self.geometry();
        let mut lens = vec![self.input_len];
        let mut n = self.input_len;
        for block in 0..self.num_conv_blocks {
            let conv = geom.output_len(n).ok_or_else(|| {
                NnError::InvalidArch(format!("block {block}: length {n} shorter than kernel"))
            })?;
            if conv < self.pool_width || conv % self.pool_width != 0 {
                return Err(NnError::InvalidArch(format!(
                    "block {block}: length {conv} does not halve evenly (input_len must be divisible by {}^{})",
                    self.pool_width, self.num_conv_blocks
                )));
            }
            n = conv / self.pool_width;
            lens.push(n);
        }
        Ok(lens)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidArch(m.to_string()));
        if !(1..=3).contains(&self.num_conv_blocks) {
            return bad("num_conv_blocks must be 1, 2 or 3");
        }
        if self.filters == 0 || self.input_channels == 0 {
            return bad("filters and input_channels must be positive");
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return bad("kernel_size must be odd");
        }
        if self.stride == 0 || self.pool_width == 0 {
            return bad("stride and pool_width must be positive");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if !self.leaky_slope.is_finite() {
            return bad("leaky_slope must be finite");
        }
        self.block_lengths().map(|_| ())
    }

    /// Input width of the dense layer.
    pub fn flatten_dim(&self) -> Result<usize, NnError> {
        Ok(self.filters * *self.block_lengths()?.last().expect("non-empty"))
    }

    /// Parameter tensors in declaration order: per block conv weight
    /// `[F, Cin, k]` and bias `[F]`, then dense weight `[C, D]` and bias `[C]`.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>, NnError> {
        self.validate()?;
        let mut shapes = Vec::new();
        let mut cin = self.input_channels;
        for b in 0..self.num_conv_blocks {
            shapes.push((format!("conv{b}.weight"), vec![self.filters, cin, self.kernel_size]));
            shapes.push((format!("conv{b}.bias"), vec![self.filters]));
            cin = self.filters;
        }
        let d = self.flatten_dim()?;
        shapes.push(("dense.weight".into(), vec![self.num_classes, d]));
        shapes.push(("dense.bias".into(), vec![self.num_classes]));
        Ok(shapes)
    }

    pub fn param_count(&self) -> Result<usize, NnError> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }
}

/// The classifier. `T = f32` for training, `f64` for gradient checks.
#[derive(Debug, Clone)]
pub struct Network<T> {
    arch: ArchConfig,
    convs: Vec<Conv1d<T>>,
    acts: Vec<LeakyRelu<T>>,
    pools: Vec<MaxPool1d>,
    dense: Dense<T>,
}

impl<T: Scalar> Network<T> {
    /// Glorot-uniform weights, zero biases, drawn from `seed`.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self, NnError> {
        let shapes = arch.param_shapes()?;
        let mut rng = substream(seed, &[purpose::INIT]);
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in &shapes {
            let count: usize = shape.iter().product();
            if name.ends_with(".bias") {
                params.push(vec![T::zero(); count]);
                continue;
            }
            let (fan_in, fan_out) = match shape.as_slice() {
                [f, cin, k] => (cin * k, f * k),
                [c, d] => (*d, *c),
                _ => unreachable!("weights are rank 2 or 3"),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.push((0..count).map(|_| T::lit(rng.random_range(-limit..=limit))).collect());
        }
        Self::from_params(arch, params)
    }

    pub fn from_params(arch: &ArchConfig, params: Vec<Vec<T>>) -> Result<Self, NnError> {
        let shapes = arch.param_shapes()?;
        if params.len() != shapes.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} parameter tensors, architecture needs {}",
                params.len(),
                shapes.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.len() != shape.iter().product::<usize>() {
                return Err(NnError::ShapeMismatch(format!("{name}: {} values for shape {shape:?}", p.len())));
            }
        }
        let geom = arch.geometry();
        let mut it = params.into_iter();
        let mut convs = Vec::new();
        let mut cin = arch.input_channels;
        for _ in 0..arch.num_conv_blocks {
            let w = it.next().expect("checked");
            let b = it.next().expect("checked");
            convs.push(Conv1d::new(w, b, cin, geom));
            cin = arch.filters;
        }
        let dense = Dense::new(it.next().expect("checked"), it.next().expect("checked"));
        let slope = T::lit(arch.leaky_slope);
        Ok(Self {
            arch: arch.clone(),
            acts: (0..arch.num_conv_blocks).map(|_| LeakyRelu::new(slope)).collect(),
            pools: (0..arch.num_conv_blocks).map(|_| MaxPool1d::new(arch.pool_width)).collect(),
            convs,
            dense,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.push(&self.dense.weight);
        out.push(&self.dense.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = Vec::new();
        for c in self.convs.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.dense.weight);
        out.push(&mut self.dense.bias);
        out
    }

    /// Flat copy of every parameter in declaration order.
    pub fn flat_params(&self) -> Vec<T> {
        self.params().concat()
    }

    /// Overwrites all parameters from a flat vector.
    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<(), NnError> {
        let total: usize = self.params().iter().map(|p| p.len()).sum();
        if flat.len() != total {
            return Err(NnError::ShapeMismatch(format!("{} values for {total} parameters", flat.len())));
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor3<T>) -> Result<(), NnError> {
        if x.channels != self.arch.input_channels || x.len != self.arch.input_len || x.batch == 0 {
            return Err(NnError::ShapeMismatch(format!(
                "input {:?}, network expects [B, {}, {}]",
                x.shape(),
                self.arch.input_channels,
                self.arch.input_len
            )));
        }
        Ok(())
    }

    /// Class scores `B × C` without touching any cache.
    pub fn predict(&self, x: &Tensor3<T>) -> Result<Vec<T>, NnError> {
        self.check_input(x)?;
        let mut h = self.convs[0].infer(x)?;
        for b in 0..self.arch.num_conv_blocks {
            if b > 0 {
                h = self.convs[b].infer(&h)?;
            }
            h = self.acts[b].infer(&h);
            h = self.pools[b].infer(&h)?;
        }
        self.dense.infer(&h.data, h.batch)
    }

    /// Training forward pass; caches activations for [`Network::backward`].
    pub fn forward(&mut self, x: Tensor3<T>) -> Result<Vec<T>, NnError> {
        self.check_input(&x)?;
        let mut h = x;
        for b in 0..self.arch.num_conv_blocks {
            let c = self.convs[b].forward(h)?;
            let a = self.acts[b].forward(c);
            h = self.pools[b].forward(&a)?;
        }
        let batch = h.batch;
        self.dense.forward(h.data, batch)
    }

    /// Parameter gradients for `grad_scores`, in declaration order.
    pub fn backward(&mut self, grad_scores: &[T]) -> Result<Vec<Vec<T>>, NnError> {
        let dg = self.dense.backward(grad_scores)?;
        let lens = self.arch.block_lengths()?;
        let last = *lens.last().expect("non-empty");
        let batch = dg.input.len() / (self.arch.filters * last);
        let mut g = Tensor3::from_vec(batch, self.arch.filters, last, dg.input)
            .ok_or_else(|| NnError::ShapeMismatch("flatten gradient".into()))?;
        let mut conv_grads = Vec::with_capacity(self.arch.num_conv_blocks);
        for b in (0..self.arch.num_conv_blocks).rev() {
            let gp = self.pools[b].backward(&g)?;
            let ga = self.acts[b].backward(&gp)?;
            let gc = self.convs[b].backward(&ga)?;
            g = gc.input;
            conv_grads.push((gc.filters, gc.bias));
        }
        let mut out = Vec::with_capacity(2 * conv_grads.len() + 2);
        for (w, b) in conv_grads.into_iter().rev() {
            out.push(w);
            out.push(b);
        }
        out.push(dg.weights);
        out.push(dg.bias);
        Ok(out)
    }
}
