//! Minimal CPU tensor engine for small 3D CNNs.
//!
//! Everything is per-sample: a [`Tensor`] is `channels x depth x height x
//! width`, stored channel-major then z-major. Networks are static DAGs
//! ([`Graph`]) evaluated in construction order, with reverse-mode gradients.
//! Kernels are generic over [`Scalar`] so the same code trains in `f32` and
//! is gradient-checked in `f64`.

mod graph;
pub mod kernels;

pub use graph::{Activations, Graph, Mode, Node, NodeId, Op, Param, ParamId};

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;

/// A short SIMD vector of scalars.
pub trait Lanes<S>: Copy {
    const N: usize;
    fn splat(v: S) -> Self;
    /// Loads the first `N` elements of `s`.
    fn load(s: &[S]) -> Self;
    fn store(self, out: &mut [S]);
    /// `self * m + a`.
    fn mul_add(self, m: Self, a: Self) -> Self;
    fn sum(self) -> S;
}

macro_rules! lanes {
    ($v:ty, $s:ty, $n:literal) => {
        impl Lanes<$s> for $v {
            const N: usize = $n;
            #[inline(always)]
            fn splat(v: $s) -> Self {
                <$v>::splat(v)
            }
            #[inline(always)]
            fn load(s: &[$s]) -> Self {
                <$v>::new(s[..$n].try_into().expect("lane block"))
            }
            #[inline(always)]
            fn store(self, out: &mut [$s]) {
                out[..$n].copy_from_slice(self.as_array());
            }
            #[inline(always)]
            fn mul_add(self, m: Self, a: Self) -> Self {
                <$v>::mul_add(self, m, a)
            }
            #[inline(always)]
            fn sum(self) -> $s {
                self.reduce_add()
            }
        }
    };
}

lanes!(wide::f32x16, f32, 16);
lanes!(wide::f64x8, f64, 8);

pub trait Scalar: Float + AddAssign + MulAssign + Default + Debug + Send + Sync + 'static {
    type V: Lanes<Self>;
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Little-endian f32 bytes (checkpoint storage precision).
    fn to_f32(self) -> f32 {
        self.as_f64() as f32
    }
}

impl Scalar for f32 {
    type V = wide::f32x16;
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    type V = wide::f64x8;
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense per-sample activation `[channels, depth, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Tensor { shape, data }
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// `(depth, height, width)`.
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn channel_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.channel_len();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s = e.iter().fold(T::zero(), |a, &b| a + b);
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy of `softmax(logits)` against class `target`, and its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], target: usize) -> (T, Vec<T>) {
    let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = logits.iter().fold(T::zero(), |a, &l| a + (l - m).exp()).ln() + m;
    let loss = lse - logits[target];
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| (l - lse).exp() - if i == target { T::one() } else { T::zero() })
        .collect();
    (loss, grad)
}
