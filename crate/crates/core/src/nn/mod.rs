//! Layers with hand-written forward and backward passes.

pub mod conv;
pub mod dense;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub use conv::{
    conv_backward, conv_forward, Activation, CacheMode, ConvCache, ConvLayerSpec, ConvParams,
    Sampling,
};
pub use dense::{DenseParams, Mlp, MlpCache};

/// A fixed, ordered collection of named parameter tensors. Gradients use
/// the same type so optimizers and checkpoints can walk both in lockstep.
pub trait ParamSet: Clone {
    fn named(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += alpha * other`
    fn add_scaled(&mut self, alpha: f64, other: &Self) {
        let src: Vec<&Tensor> = other.named().into_iter().map(|(_, t)| t).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.axpy(alpha, s).expect("parameter sets share layout");
        }
    }

    fn scale_in_place(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    fn sum_sq(&self) -> f64 {
        self.named().iter().map(|(_, t)| t.sum_sq()).sum()
    }

    fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.round_to_f32();
        }
    }
}

impl ParamSet for ConvParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl ParamSet for DenseParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl ParamSet for Mlp {
    fn named(&self) -> Vec<(String, &Tensor)> {
        prefixed("hidden", self.hidden.named())
            .into_iter()
            .chain(prefixed("output", self.output.named()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.hidden.tensors_mut();
        v.extend(self.output.tensors_mut());
        v
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, items: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// Fill `t` from `U(−b, b)` with `b = gain·√(3 / fan_in)`, rounded to f32.
pub fn kaiming_uniform(t: &mut Tensor, fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = rng.random_range(-bound..=bound) as f32 as f64;
    }
}

pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
