//! Fully-connected layers and the two-layer perceptrons used by the
//! transform branches and the variation module.

use crate::error::{Error, Result};
use crate::gemm::{gemm, Transpose};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    /// `out × in`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseParams {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (o, i) = (self.outputs(), self.inputs());
        if x.len() != i {
            return Err(Error::dim(format!("dense layer expects {i} inputs, got {}", x.len())));
        }
        let mut y = self.bias.data().to_vec();
        gemm(o, i, 1, 1.0, self.weight.data(), i, Transpose::No, x, 1, Transpose::No, 1.0, &mut y);
        Ok(y)
    }

    /// Returns `(param_grads, input_grad)`.
    pub fn backward(&self, x: &[f64], g: &[f64]) -> Result<(DenseParams, Vec<f64>)> {
        let (o, i) = (self.outputs(), self.inputs());
        if x.len() != i || g.len() != o {
            return Err(Error::dim(format!(
                "dense backward: input {} / grad {} vs layer {i}→{o}",
                x.len(),
                g.len()
            )));
        }
        let mut dw = vec![0.0; o * i];
        gemm(o, 1, i, 1.0, g, 1, Transpose::No, x, i, Transpose::No, 0.0, &mut dw);
        let mut dx = vec![0.0; i];
        gemm(i, o, 1, 1.0, self.weight.data(), i, Transpose::Yes, g, 1, Transpose::No, 0.0, &mut dx);
        Ok((
            DenseParams {
                weight: Tensor::new(vec![o, i], dw)?,
                bias: Tensor::new(vec![o], g.to_vec())?,
            },
            dx,
        ))
    }

    /// Largest singular value, by power iteration on `WᵀW`.
    pub fn operator_norm(&self) -> f64 {
        let (o, i) = (self.outputs(), self.inputs());
        let w = self.weight.data();
        let mut v = vec![1.0 / (i as f64).sqrt(); i];
        let mut sigma = 0.0;
        for _ in 0..200 {
            let mut wv = vec![0.0; o];
            gemm(o, i, 1, 1.0, w, i, Transpose::No, &v, 1, Transpose::No, 0.0, &mut wv);
            let mut wtwv = vec![0.0; i];
            gemm(i, o, 1, 1.0, w, i, Transpose::Yes, &wv, 1, Transpose::No, 0.0, &mut wtwv);
            let norm = wtwv.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            sigma = norm.sqrt();
            v = wtwv.iter().map(|x| x / norm).collect();
        }
        sigma
    }
}

/// `x → W₂·relu(W₁x + b₁) + b₂`
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: DenseParams,
    pub output: DenseParams,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
}

impl Mlp {
    pub fn zeros(inputs: usize, hidden: usize, outputs: usize) -> Self {
        Self {
            hidden: DenseParams::zeros(inputs, hidden),
            output: DenseParams::zeros(hidden, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.hidden.inputs()
    }

    pub fn outputs(&self) -> usize {
        self.output.outputs()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        let mut h = self.hidden.forward(x)?;
        for v in &mut h {
            *v = v.max(0.0);
        }
        let y = self.output.forward(&h)?;
        Ok((
            y,
            MlpCache {
                input: x.to_vec(),
                hidden: h,
            },
        ))
    }

    pub fn backward(&self, cache: &MlpCache, g: &[f64]) -> Result<(Mlp, Vec<f64>)> {
        let (d_out, mut dh) = self.output.backward(&cache.hidden, g)?;
        for (d, &h) in dh.iter_mut().zip(&cache.hidden) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        let (d_hidden, dx) = self.hidden.backward(&cache.input, &dh)?;
        Ok((
            Mlp {
                hidden: d_hidden,
                output: d_out,
            },
            dx,
        ))
    }

    /// Upper bound on the Lipschitz constant (ReLU is 1-Lipschitz).
    pub fn lipschitz_bound(&self) -> f64 {
        self.hidden.operator_norm() * self.output.operator_norm()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mlp(rng: &mut ChaCha8Rng, i: usize, h: usize, o: usize) -> Mlp {
        let mut m = Mlp::zeros(i, h, o);
        for t in [
            &mut m.hidden.weight,
            &mut m.hidden.bias,
            &mut m.output.weight,
            &mut m.output.bias,
        ] {
            for v in t.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        m
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_mlp(&mut rng, 5, 7, 3);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |m: &Mlp, x: &[f64]| {
            let (y, _) = m.forward(x).unwrap();
            y.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = m.forward(&x).unwrap();
        let (g, dx) = m.backward(&cache, &probe).unwrap();
        let h = 1e-6;
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            assert!(((loss(&m, &xp) - loss(&m, &xm)) / (2.0 * h) - dx[i]).abs() < 1e-6);
        }
        for i in 0..m.hidden.weight.len() {
            let mut mp = m.clone();
            mp.hidden.weight.data_mut()[i] += h;
            let mut mm = m.clone();
            mm.hidden.weight.data_mut()[i] -= h;
            let fd = (loss(&mp, &x) - loss(&mm, &x)) / (2.0 * h);
            assert!((fd - g.hidden.weight.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn operator_norm_of_diagonal() {
        let mut d = DenseParams::zeros(3, 3);
        d.weight = Tensor::diag(&[1.0, -4.0, 2.0]);
        assert!((d.operator_norm() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let m = Mlp::zeros(4, 8, 2);
        assert_eq!(m.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap().0, vec![0.0, 0.0]);
        assert!(m.forward(&[1.0]).is_err());
    }
}
