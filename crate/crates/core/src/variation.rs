//! Diagonal-Gaussian latent codes for style statistics, and blending of
//! several styles by convex interpolation of their codes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{kaiming_uniform, prefixed, Mlp, MlpCache, ParamSet, RELU_GAIN};
use crate::tensor::Tensor;

pub const LOG_VAR_CLAMP: f64 = 20.0;
pub const DEFAULT_LATENT_DIM: usize = 256;
/// Tolerance on `Σw = 1` for strict weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    pub z: Vec<f64>,
}

impl StyleCode {
    /// Deterministic code: `z = mu`. `log_var` is clamped to ±20.
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() || mu.is_empty() {
            return Err(Error::dim(format!(
                "mu has {} entries, log_var {}",
                mu.len(),
                log_var.len()
            )));
        }
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP))
            .collect();
        Ok(Self {
            z: mu.clone(),
            mu,
            log_var,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.len()
    }
}

/// `z = mu + exp(log_var / 2) ⊙ ε`, `ε ~ N(0, I)` from a generator seeded
/// with `seed`.
pub fn reparameterize(code: &StyleCode, seed: u64) -> StyleCode {
    let eps = standard_normal(seed, code.latent_dim());
    let z = code
        .mu
        .iter()
        .zip(&code.log_var)
        .zip(&eps)
        .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
        .collect();
    StyleCode {
        z,
        ..code.clone()
    }
}

/// The `ε` used by [`reparameterize`] for `seed`.
pub fn standard_normal(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `KL[N(mu, σ²) ‖ N(0, I)] = ½ Σ (mu² + σ² − log σ² − 1)`
pub fn kl_divergence(code: &StyleCode) -> f64 {
    code.mu
        .iter()
        .zip(&code.log_var)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
        * 0.5
}

/// Gradients of [`kl_divergence`] with respect to `(mu, log_var)`.
pub fn kl_divergence_grad(code: &StyleCode) -> (Vec<f64>, Vec<f64>) {
    let dmu = code.mu.clone();
    let dlv = code.log_var.iter().map(|lv| 0.5 * (lv.exp() - 1.0)).collect();
    (dmu, dlv)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlendWeights {
    w: Vec<f64>,
}

impl BlendWeights {
    /// Rescales to unit sum. Rejects negative, non-finite, empty or all-zero
    /// input.
    pub fn normalized(w: Vec<f64>) -> Result<Self> {
        Self::check(&w)?;
        let sum: f64 = w.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidArgument("blend weights sum to zero".into()));
        }
        Ok(Self {
            w: w.into_iter().map(|v| v / sum).collect(),
        })
    }

    /// Accepts only weights already summing to 1 within 1e-6.
    pub fn strict(w: Vec<f64>) -> Result<Self> {
        Self::check(&w)?;
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidArgument(format!(
                "blend weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self { w })
    }

    fn check(w: &[f64]) -> Result<()> {
        if w.is_empty() {
            return Err(Error::InvalidArgument("no blend weights".into()));
        }
        if let Some(bad) = w.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!("invalid blend weight {bad}")));
        }
        Ok(())
    }

    pub fn single() -> Self {
        Self { w: vec![1.0] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Index of a weight that is exactly 1, if any.
    pub fn dominant(&self) -> Option<usize> {
        self.w.iter().position(|&v| v == 1.0)
    }

    /// `(1 − α, α)`, for `α ∈ [0, 1]`.
    pub fn pair(alpha: f64) -> Result<Self> {
        Self::strict(vec![1.0 - alpha, alpha])
    }
}

fn convex<'a>(rows: impl Iterator<Item = &'a [f64]>, w: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (row, &wk) in rows.zip(w) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += wk * v;
        }
    }
    out
}

/// Convex combination of codes: `z` and `mu` blend linearly, variances blend
/// as `σ²_mix = Σ w_k σ²_k`. A weight of exactly 1 returns that code.
pub fn blend_codes(codes: &[StyleCode], w: &BlendWeights) -> Result<StyleCode> {
    let first = codes
        .first()
        .ok_or_else(|| Error::InvalidArgument("no style codes to blend".into()))?;
    if codes.len() != w.len() {
        return Err(Error::InvalidArgument(format!(
            "{} style codes but {} weights",
            codes.len(),
            w.len()
        )));
    }
    let l = first.latent_dim();
    if codes.iter().any(|c| c.latent_dim() != l) {
        return Err(Error::dim("style codes disagree on latent dimension"));
    }
    if let Some(k) = w.dominant() {
        return Ok(codes[k].clone());
    }
    let ws = w.as_slice();
    let mu = convex(codes.iter().map(|c| c.mu.as_slice()), ws, l);
    let z = convex(codes.iter().map(|c| c.z.as_slice()), ws, l);
    let var: Vec<Vec<f64>> = codes
        .iter()
        .map(|c| c.log_var.iter().map(|v| v.exp()).collect())
        .collect();
    let log_var = convex(var.iter().map(Vec::as_slice), ws, l)
        .into_iter()
        .map(|v| v.ln().clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP))
        .collect();
    Ok(StyleCode { mu, log_var, z })
}

/// Convex blend of per-style vectors (style means).
pub fn blend_vectors(vs: &[Vec<f64>], w: &BlendWeights) -> Result<Vec<f64>> {
    let first = vs
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to blend".into()))?;
    if vs.len() != w.len() || vs.iter().any(|v| v.len() != first.len()) {
        return Err(Error::dim("blend inputs disagree in count or length"));
    }
    if let Some(k) = w.dominant() {
        return Ok(vs[k].clone());
    }
    Ok(convex(vs.iter().map(Vec::as_slice), w.as_slice(), first.len()))
}

/// Encoder `[vec(cov), mean] → (mu, log_var)` and decoder `z → T₁ input`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationParams {
    pub style_encoder: Mlp,
    pub latent_decoder: Mlp,
}

#[derive(Clone, Debug)]
pub struct EncodeCache {
    mlp: MlpCache,
    raw_log_var: Vec<f64>,
}

impl VariationParams {
    pub fn zeros(channels: usize, hidden: usize, latent: usize, condition: usize) -> Self {
        Self {
            style_encoder: Mlp::zeros(channels * channels + channels, hidden, 2 * latent),
            latent_decoder: Mlp::zeros(latent, hidden, condition),
        }
    }

    pub fn init(channels: usize, hidden: usize, latent: usize, condition: usize, seed: u64) -> Self {
        let mut p = Self::zeros(channels, hidden, latent, condition);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_in = p.style_encoder.inputs();
        kaiming_uniform(&mut p.style_encoder.hidden.weight, enc_in, RELU_GAIN, &mut rng);
        kaiming_uniform(&mut p.style_encoder.output.weight, hidden, 1.0, &mut rng);
        kaiming_uniform(&mut p.latent_decoder.hidden.weight, latent, RELU_GAIN, &mut rng);
        kaiming_uniform(&mut p.latent_decoder.output.weight, hidden, 1.0, &mut rng);
        p
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_decoder.inputs()
    }

    pub fn channels(&self) -> usize {
        let n = self.style_encoder.inputs();
        // n = c² + c
        (((4 * n + 1) as f64).sqrt() as usize - 1) / 2
    }

    fn encoder_input(&self, cov: &Tensor, mean: &[f64]) -> Result<Vec<f64>> {
        let c = self.channels();
        if cov.shape() != [c, c] || mean.len() != c {
            return Err(Error::dim(format!(
                "style encoder expects {c}×{c} covariance and {c} means, got {:?} and {}",
                cov.shape(),
                mean.len()
            )));
        }
        let mut x = cov.data().to_vec();
        x.extend_from_slice(mean);
        Ok(x)
    }

    pub fn encode_traced(&self, cov: &Tensor, mean: &[f64]) -> Result<(StyleCode, EncodeCache)> {
        let x = self.encoder_input(cov, mean)?;
        let (mut out, mlp) = self.style_encoder.forward(&x)?;
        let raw_log_var = out.split_off(self.latent_dim());
        let code = StyleCode::new(out, raw_log_var.clone())?;
        Ok((code, EncodeCache { mlp, raw_log_var }))
    }

    /// Gradients from `(dmu, dlog_var)` back to the encoder weights and to
    /// `(d vec(cov), d mean)`.
    pub fn encode_backward(&self, cache: &EncodeCache, dmu: &[f64], dlog_var: &[f64]) -> Result<(Mlp, Tensor, Vec<f64>)> {
        let mut g = dmu.to_vec();
        g.extend(cache.raw_log_var.iter().zip(dlog_var).map(|(raw, d)| {
            if raw.abs() > LOG_VAR_CLAMP {
                0.0
            } else {
                *d
            }
        }));
        let (grads, mut dx) = self.style_encoder.backward(&cache.mlp, &g)?;
        let c = self.channels();
        let dmean = dx.split_off(c * c);
        Ok((grads, Tensor::new(vec![c, c], dx)?, dmean))
    }

    pub fn decode_traced(&self, z: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        if z.len() != self.latent_dim() {
            return Err(Error::dim(format!(
                "latent has {} entries, decoder expects {}",
                z.len(),
                self.latent_dim()
            )));
        }
        self.latent_decoder.forward(z)
    }
}

impl ParamSet for VariationParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        prefixed("style_encoder", self.style_encoder.named())
            .into_iter()
            .chain(prefixed("latent_decoder", self.latent_decoder.named()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.style_encoder.tensors_mut();
        v.extend(self.latent_decoder.tensors_mut());
        v
    }
}

/// Deterministic code (`z = mu`) for a style's covariance and mean.
pub fn encode_style(p: &VariationParams, style_cov: &Tensor, style_mean: &[f64]) -> Result<StyleCode> {
    Ok(p.encode_traced(style_cov, style_mean)?.0)
}

/// Conditioning vector for the style branch of the transform net.
pub fn decode_latent(p: &VariationParams, z: &[f64]) -> Result<Vec<f64>> {
    Ok(p.decode_traced(z)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn code(mu: Vec<f64>, lv: Vec<f64>) -> StyleCode {
        StyleCode::new(mu, lv).unwrap()
    }

    #[test]
    fn kl_analytic_values() {
        assert_eq!(kl_divergence(&code(vec![0.0; 4], vec![0.0; 4])), 0.0);
        assert!((kl_divergence(&code(vec![1.0; 256], vec![0.0; 256])) - 128.0).abs() < 1e-12);
        let e = std::f64::consts::E;
        assert!((kl_divergence(&code(vec![0.0], vec![1.0])) - 0.5 * (e - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let c = code(vec![0.3, -1.2], vec![0.5, -0.7]);
        let (dmu, dlv) = kl_divergence_grad(&c);
        let h = 1e-6;
        for i in 0..2 {
            let mut p = c.clone();
            p.mu[i] += h;
            let mut m = c.clone();
            m.mu[i] -= h;
            assert!(((kl_divergence(&p) - kl_divergence(&m)) / (2.0 * h) - dmu[i]).abs() < 1e-6);
            let mut p = c.clone();
            p.log_var[i] += h;
            let mut m = c.clone();
            m.log_var[i] -= h;
            assert!(((kl_divergence(&p) - kl_divergence(&m)) / (2.0 * h) - dlv[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn log_var_is_clamped() {
        let c = code(vec![0.0, 0.0], vec![-1e9, 50.0]);
        assert_eq!(c.log_var, vec![-20.0, 20.0]);
        assert!(kl_divergence(&c).is_finite());
    }

    #[test]
    fn vanishing_variance_reparameterizes_to_mean() {
        let c = code(vec![0.5, -2.0, 3.0], vec![-20.0; 3]);
        let r = reparameterize(&c, 9);
        for (z, m) in r.z.iter().zip(&c.mu) {
            assert!((z - m).abs() < 1e-4);
        }
        assert_eq!(r, reparameterize(&c, 9));
        assert_ne!(reparameterize(&code(vec![0.0], vec![0.0]), 1).z, reparameterize(&code(vec![0.0], vec![0.0]), 2).z);
    }

    #[test]
    fn reparameterized_samples_are_standard_normal() {
        let c = code(vec![0.0; 4], vec![0.0; 4]);
        let n = 10_000;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for s in 0..n {
            let z = reparameterize(&c, s as u64).z;
            for i in 0..4 {
                sum[i] += z[i];
                sq[i] += z[i] * z[i];
            }
        }
        for i in 0..4 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!(mean.abs() < 0.05, "mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn weights_normalize_and_strict_rejects() {
        assert_eq!(BlendWeights::normalized(vec![1.0, 3.0]).unwrap().as_slice(), &[0.25, 0.75]);
        assert!(BlendWeights::normalized(vec![1.0, -0.1]).is_err());
        assert!(BlendWeights::normalized(vec![0.0, 0.0]).is_err());
        assert!(BlendWeights::normalized(vec![]).is_err());
        assert!(BlendWeights::strict(vec![0.6, 0.5]).is_err());
        assert!(BlendWeights::strict(vec![0.6, 0.4]).is_ok());
        assert!(BlendWeights::strict(vec![f64::NAN]).is_err());
    }

    #[test]
    fn degenerate_blend_returns_code_exactly() {
        let a = code(vec![0.1, 0.2], vec![-0.3, 0.4]);
        let b = code(vec![5.0, -1.0], vec![1.0, 2.0]);
        let w = BlendWeights::strict(vec![1.0, 0.0]).unwrap();
        assert_eq!(blend_codes(&[a.clone(), b], &w).unwrap(), a);
    }

    #[test]
    fn midpoint_blend() {
        let a = code(vec![1.0, 0.0], vec![0.0, 0.0]);
        let b = code(vec![0.0, 1.0], vec![0.0, 0.0]);
        let m = blend_codes(&[a, b], &BlendWeights::pair(0.5).unwrap()).unwrap();
        assert_eq!(m.z, vec![0.5, 0.5]);
        assert_eq!(m.mu, vec![0.5, 0.5]);
        assert!(m.log_var.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn variance_blends_in_variance_domain() {
        let a = code(vec![0.0], vec![0.0]);
        let b = code(vec![0.0], vec![3.0f64.ln()]);
        let m = blend_codes(&[a, b], &BlendWeights::pair(0.5).unwrap()).unwrap();
        assert!((m.log_var[0] - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn blend_errors() {
        let a = code(vec![1.0], vec![0.0]);
        assert!(blend_codes(&[], &BlendWeights::single()).is_err());
        assert!(blend_codes(&[a.clone()], &BlendWeights::pair(0.5).unwrap()).is_err());
        let b = code(vec![1.0, 2.0], vec![0.0, 0.0]);
        assert!(blend_codes(&[a, b], &BlendWeights::pair(0.5).unwrap()).is_err());
    }

    #[test]
    fn three_way_blend_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let codes: Vec<StyleCode> = (0..3)
            .map(|_| {
                code(
                    (0..8).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    (0..8).map(|_| rng.random_range(-2.0..2.0)).collect(),
                )
            })
            .collect();
        let third = 1.0 / 3.0;
        let all = blend_codes(&codes, &BlendWeights::normalized(vec![1.0; 3]).unwrap()).unwrap();
        let ab = blend_codes(&codes[..2], &BlendWeights::pair(0.5).unwrap()).unwrap();
        let seq = blend_codes(&[ab, codes[2].clone()], &BlendWeights::pair(third).unwrap()).unwrap();
        for (x, y) in all.z.iter().zip(&seq.z) {
            assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in all.log_var.iter().zip(&seq.log_var) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_network_codes_and_decodes_to_zero() {
        let p = VariationParams::zeros(4, 8, 6, 16);
        assert_eq!(p.channels(), 4);
        let c = encode_style(&p, &Tensor::identity(4), &[1.0; 4]).unwrap();
        assert_eq!(c.mu, vec![0.0; 6]);
        assert_eq!(c.log_var, vec![0.0; 6]);
        assert_eq!(c.z, c.mu);
        assert_eq!(decode_latent(&p, &[1.0; 6]).unwrap(), vec![0.0; 16]);
        assert!(decode_latent(&p, &[1.0; 5]).is_err());
        assert!(encode_style(&p, &Tensor::identity(3), &[1.0; 3]).is_err());
    }

    #[test]
    fn encoding_is_deterministic() {
        let p = VariationParams::init(4, 16, 8, 16, 1);
        let cov = Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.37).sin());
        let a = encode_style(&p, &cov, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(a, encode_style(&p, &cov, &[0.1, 0.2, 0.3, 0.4]).unwrap());
        let z: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        assert_eq!(decode_latent(&p, &z).unwrap(), decode_latent(&p, &z).unwrap());
    }

    #[test]
    fn decoder_respects_lipschitz_bound() {
        let p = VariationParams::init(4, 32, 8, 16, 2);
        let lip = p.latent_decoder.lipschitz_bound();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let z: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let d: Vec<f64> = (0..8).map(|_| rng.random_range(-0.1..0.1)).collect();
            let z2: Vec<f64> = z.iter().zip(&d).map(|(a, b)| a + b).collect();
            let y1 = decode_latent(&p, &z).unwrap();
            let y2 = decode_latent(&p, &z2).unwrap();
            let dist = y1.iter().zip(&y2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(dist <= lip * dn * (1.0 + 1e-9));
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let p = VariationParams::init(3, 10, 4, 9, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cov = Tensor::from_fn(&[3, 3], |_| rng.random_range(-1.0..1.0));
        let mean: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |cov: &Tensor, mean: &[f64]| kl_divergence(&encode_style(&p, cov, mean).unwrap());
        let (c, cache) = p.encode_traced(&cov, &mean).unwrap();
        let (dmu, dlv) = kl_divergence_grad(&c);
        let (_, dcov, dmean) = p.encode_backward(&cache, &dmu, &dlv).unwrap();
        let h = 1e-6;
        for i in 0..9 {
            let mut a = cov.clone();
            a.data_mut()[i] += h;
            let mut b = cov.clone();
            b.data_mut()[i] -= h;
            let fd = (loss(&a, &mean) - loss(&b, &mean)) / (2.0 * h);
            assert!((fd - dcov.data()[i]).abs() < 1e-6);
        }
        for i in 0..3 {
            let mut a = mean.clone();
            a[i] += h;
            let mut b = mean.clone();
            b[i] -= h;
            let fd = (loss(&cov, &a) - loss(&cov, &b)) / (2.0 * h);
            assert!((fd - dmean[i]).abs() < 1e-6);
        }
    }
}
