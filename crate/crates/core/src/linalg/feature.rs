use crate::error::{Error, Result};
use crate::gemm::Transpose;
use crate::tensor::Tensor;

/// A `C×N` vectorized feature map with its per-channel means.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    values: Tensor,
    channel_means: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        let (c, n) = values.dims2()?;
        let channel_means = (0..c)
            .map(|i| values.data()[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        Ok(Self {
            values,
            channel_means,
        })
    }

    pub fn from_rows(channels: usize, length: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(vec![channels, length], data)?)
    }

    /// Flatten a `C×H×W` feature map into `C×(H·W)`.
    pub fn from_feature_map(map: &Tensor) -> Result<Self> {
        let (c, h, w) = map.dims3()?;
        Self::new(map.clone().reshape(&[c, h * w])?)
    }

    /// Reshape back into a `C×H×W` map.
    pub fn to_feature_map(&self, height: usize, width: usize) -> Result<Tensor> {
        if height * width != self.length() {
            return Err(Error::dim(format!(
                "cannot fold length {} into {height}×{width}",
                self.length()
            )));
        }
        self.values.clone().reshape(&[self.channels(), height, width])
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn length(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn channel_means(&self) -> &[f64] {
        &self.channel_means
    }

    /// `values − channel_means` broadcast along each row.
    pub fn centered(&self) -> Tensor {
        let n = self.length();
        let mut out = self.values.clone();
        for (row, &mean) in out.data_mut().chunks_mut(n).zip(&self.channel_means) {
            for v in row {
                *v -= mean;
            }
        }
        out
    }
}

/// `F̄F̄ᵀ / N` for the centered features.
pub fn covariance(f: &FeatureMatrix) -> Result<Tensor> {
    let n = f.length();
    if n == 0 {
        return Err(Error::dim("covariance of zero-length features"));
    }
    let centered = f.centered();
    let cov = centered
        .matmul_t(Transpose::No, &centered, Transpose::Yes)?
        .scale(1.0 / n as f64);
    cov.symmetrize()
}

/// Gradient of a scalar loss with respect to the raw features, given the
/// gradient `g` with respect to `covariance(f)`.
pub fn covariance_backward(f: &FeatureMatrix, g: &Tensor) -> Result<Tensor> {
    let c = f.channels();
    let n = f.length();
    if g.shape() != [c, c] {
        return Err(Error::dim(format!(
            "covariance gradient shape {:?}, expected [{c}, {c}]",
            g.shape()
        )));
    }
    let gs = g.add(&g.transpose()?)?;
    let mut dx = gs.matmul(&f.centered())?.scale(1.0 / n as f64);
    // Adjoint of centering: remove the row mean of the incoming gradient.
    for row in dx.data_mut().chunks_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        for v in row {
            *v -= mean;
        }
    }
    Ok(dx)
}

/// Gradient with respect to raw features from gradients with respect to
/// the centered features (the adjoint of the centering projection).
pub fn centering_backward(grad_centered: &Tensor) -> Result<Tensor> {
    let (_, n) = grad_centered.dims2()?;
    let mut dx = grad_centered.clone();
    for row in dx.data_mut().chunks_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        for v in row {
            *v -= mean;
        }
    }
    Ok(dx)
}
