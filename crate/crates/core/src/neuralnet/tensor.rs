use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Element type of the network. `f32` trains; `f64` checks gradients.
pub trait Scalar:
    Float + FromPrimitive + Debug + Default + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + Debug + Default + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
}

/// Dense `batch × channels × len` tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    pub batch: usize,
    pub channels: usize,
    pub len: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor3<T> {
    pub fn zeros(batch: usize, channels: usize, len: usize) -> Self {
        Self {
            batch,
            channels,
            len,
            data: vec![T::zero(); batch * channels * len],
        }
    }

    pub fn from_vec(batch: usize, channels: usize, len: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == batch * channels * len).then_some(Self {
            batch,
            channels,
            len,
            data,
        })
    }

    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.channels * self.len;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.channels * self.len;
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.channels, self.len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Dot product over sixteen independent lanes so the loop vectorises.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 16];
    let mut ca = a.chunks_exact(16);
    let mut cb = b.chunks_exact(16);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..16 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x * *y;
    }
    for w in [8, 4, 2, 1] {
        for l in 0..w {
            acc[l] += acc[l + w];
        }
    }
    acc[0] + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
