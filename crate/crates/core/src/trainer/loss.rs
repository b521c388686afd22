use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{covariance, covariance_backward, FeatureMatrix};
use crate::tensor::Tensor;

/// Weights of the VLT objective `content + λ·style + β·KL`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_style: f64,
    pub beta_kl: f64,
    /// Exponent on the Frobenius norm of the covariance gap.
    pub style_order_l: u32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_style: 1.0,
            beta_kl: 0.01,
            style_order_l: 2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_style >= 0.0 && self.beta_kl >= 0.0) || !self.lambda_style.is_finite() || !self.beta_kl.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative (λ={}, β={})",
                self.lambda_style, self.beta_kl
            )));
        }
        if self.style_order_l == 0 {
            return Err(Error::InvalidArgument("style order must be positive".into()));
        }
        Ok(())
    }
}

/// Mean absolute difference and its gradient with respect to `a`.
pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor)> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "L1 loss between {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.len() as f64;
    let mut grad = Tensor::zeros(a.shape());
    let mut sum = 0.0;
    for ((g, x), y) in grad.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        let d = x - y;
        sum += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((sum / n, grad))
}

/// L1 distance between stylized and content features.
pub fn content_loss(stylized: &Tensor, content: &Tensor) -> Result<(f64, Tensor)> {
    l1_loss(stylized, content)
}

/// `(1/C)·‖cov(stylized) − cov(style)‖_F^l` and its gradient with respect
/// to the stylized feature values.
pub fn style_loss(stylized: &FeatureMatrix, style: &FeatureMatrix, l: u32) -> Result<(f64, Tensor)> {
    let cov_s = covariance(style)?;
    style_loss_against(stylized, &cov_s, l)
}

/// As [`style_loss`] with a precomputed target covariance.
pub fn style_loss_against(stylized: &FeatureMatrix, target_cov: &Tensor, l: u32) -> Result<(f64, Tensor)> {
    let c = stylized.channels();
    if target_cov.shape() != [c, c] {
        return Err(Error::dim(format!(
            "style loss: {c}-channel features against covariance {:?}",
            target_cov.shape()
        )));
    }
    if l == 0 {
        return Err(Error::InvalidArgument("style order must be positive".into()));
    }
    let diff = covariance(stylized)?.sub(target_cov)?;
    let norm = diff.frobenius();
    let value = norm.powi(l as i32) / c as f64;
    let coef = match l {
        2 => 2.0 / c as f64,
        _ if norm == 0.0 => 0.0,
        _ => l as f64 * norm.powi(l as i32 - 2) / c as f64,
    };
    let grad = covariance_backward(stylized, &diff.scale(coef))?;
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(c: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[c, n], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn content_loss_values() {
        let a = random(4, 9, 1);
        assert_eq!(content_loss(&a, &a).unwrap().0, 0.0);
        let b = a.map(|v| v + 0.5);
        assert!((content_loss(&a, &b).unwrap().0 - 0.5).abs() < 1e-12);
        assert!(content_loss(&a, &random(3, 9, 1)).is_err());
    }

    #[test]
    fn style_loss_values() {
        let f = FeatureMatrix::new(random(8, 50, 2)).unwrap();
        assert_eq!(style_loss(&f, &f, 2).unwrap().0, 0.0);
        // cov diff = identity, C = 8 → (1/8)·(√8)² = 1
        let cov = covariance(&f).unwrap();
        let target = cov.sub(&Tensor::identity(8)).unwrap();
        let (v, _) = style_loss_against(&f, &target, 2).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    fn check_fd(loss: impl Fn(&Tensor) -> f64, x: &Tensor, grad: &Tensor) {
        let h = 1e-3;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let a = grad.data()[i];
            assert!((fd - a).abs() <= 1e-3 * fd.abs().max(a.abs()).max(1e-8), "coord {i}: fd {fd} vs {a}");
        }
    }

    #[test]
    fn style_loss_gradients() {
        let x = random(5, 12, 3);
        let s = FeatureMatrix::new(random(5, 20, 4).scale(2.0)).unwrap();
        for l in [1, 2, 3] {
            let f = |x: &Tensor| style_loss(&FeatureMatrix::new(x.clone()).unwrap(), &s, l).unwrap().0;
            let (_, g) = style_loss(&FeatureMatrix::new(x.clone()).unwrap(), &s, l).unwrap();
            check_fd(f, &x, &g);
        }
    }

    #[test]
    fn content_loss_gradient() {
        let x = random(3, 7, 5);
        let y = random(3, 7, 6);
        let (_, g) = content_loss(&x, &y).unwrap();
        check_fd(|x| content_loss(x, &y).unwrap().0, &x, &g);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            lambda_style: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
