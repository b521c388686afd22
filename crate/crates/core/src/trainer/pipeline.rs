//! Forward and backward pass of the VLT objective for one (content, style)
//! pair through a frozen autoencoder.

use crate::error::{Error, Result};
use crate::iae::{IaeParams, IaeSession};
use crate::linalg::{covariance, covariance_backward, FeatureMatrix};
use crate::model::VltParams;
use crate::tensor::Tensor;
use crate::variation::{kl_divergence, kl_divergence_grad, standard_normal, StyleCode, VariationParams};
use crate::vlt::{apply_transform, apply_transform_backward, pointwise_backward, CompressionParams, TransformMatrix};

use super::loss::{content_loss, style_loss_against, LossWeights};

/// Precomputed encoder features of one training pair.
#[derive(Clone, Debug)]
pub struct VltExample<'a> {
    /// `ψ(x_c)`, `C_f×h×w`.
    pub content: &'a Tensor,
    /// `ψ(x_s)`, `C_f×h'×w'`.
    pub style: &'a Tensor,
    /// `cov(ψ(x_s))`, the style-loss target.
    pub style_cov: &'a Tensor,
    /// Seed for `ε` in `z = mu + σ ⊙ ε`; `None` uses `z = mu`.
    pub noise_seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub content: f64,
    pub style: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossParts {
    pub fn add(&mut self, o: &LossParts) {
        self.content += o.content;
        self.style += o.style;
        self.kl += o.kl;
        self.total += o.total;
    }

    pub fn scale(&mut self, s: f64) {
        self.content *= s;
        self.style *= s;
        self.kl *= s;
        self.total *= s;
    }
}

/// An autoencoder pinned for the second training phase, with the digest of
/// its tensor bytes taken at construction.
pub struct FrozenIae {
    params: IaeParams,
    digest: String,
}

impl FrozenIae {
    pub fn new(params: IaeParams) -> Self {
        let digest = iae_digest(&params);
        Self { params, digest }
    }

    pub fn params(&self) -> &IaeParams {
        &self.params
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// State error if the parameters no longer hash to the recorded digest.
    pub fn verify(&self) -> Result<()> {
        let now = iae_digest(&self.params);
        if now != self.digest {
            return Err(Error::State(format!(
                "frozen autoencoder changed during training ({} → {now})",
                self.digest
            )));
        }
        Ok(())
    }

    pub fn into_params(self) -> IaeParams {
        self.params
    }
}

/// Hex SHA-256 of the autoencoder's f32 tensor bytes.
pub fn iae_digest(p: &IaeParams) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(p.tensor_bytes()))
}

/// `content + λ·style + β·KL` for one pair and, if `want_grad`, its
/// gradient with respect to every VLT parameter.
pub fn total_vlt_loss(
    iae: &FrozenIae,
    vlt: &VltParams,
    ex: &VltExample,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<(LossParts, Option<VltParams>)> {
    let iae = iae.params();
    let comp = &vlt.compression;
    let (_, h, w) = ex.content.dims3()?;
    let cc = FeatureMatrix::from_feature_map(&comp.compress(ex.content)?)?;
    let cs = FeatureMatrix::from_feature_map(&comp.compress(ex.style)?)?;
    let cov_c = covariance(&cc)?;
    let cov_s = covariance(&cs)?;

    let (code, enc_cache) = vlt.variation.encode_traced(&cov_s, cs.channel_means())?;
    let eps = ex.noise_seed.map(|s| standard_normal(s, code.latent_dim()));
    let z = match &eps {
        Some(e) => sample(&code, e),
        None => code.mu.clone(),
    };
    let (cond, dec_cache) = vlt.variation.decode_traced(&z)?;
    let (t, t_cache) = vlt.transform.forward(&cond, &cov_c)?;
    let tm = TransformMatrix::new(t, cs.channel_means().to_vec())?;
    let d_map = apply_transform(&tm, &cc)?.to_feature_map(h, w)?;
    let dec_in = comp.decompress(&d_map)?;

    let mut dec = IaeSession::frozen(iae);
    let img = dec.decode(&dec_in)?;
    let mut enc = IaeSession::frozen(iae);
    let psi = enc.encode(&img)?;

    let (lc, gc) = content_loss(&psi, ex.content)?;
    let psi_fm = FeatureMatrix::from_feature_map(&psi)?;
    let (ls, gs) = style_loss_against(&psi_fm, ex.style_cov, weights.style_order_l)?;
    let kl = kl_divergence(&code);
    let parts = LossParts {
        content: lc,
        style: ls,
        kl,
        total: lc + weights.lambda_style * ls + weights.beta_kl * kl,
    };
    if !parts.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite VLT loss {parts:?}")));
    }
    if !want_grad {
        return Ok((parts, None));
    }

    let mut g_psi = gc;
    g_psi.axpy(weights.lambda_style, &gs.reshape(psi.shape())?)?;
    let g_img = enc.backward(&g_psi)?.input;
    let g_dec_in = dec.backward(&g_img)?.input;

    let (g_decompress, g_d_map) = pointwise_backward(&comp.decompress, &d_map, &g_dec_in)?;
    let r = cc.channels();
    let g_d = g_d_map.reshape(&[r, cc.length()])?;
    let (dt, dmean_from_apply, dcc_apply) = apply_transform_backward(&tm, &cc, &g_d)?;
    let (g_transform, dcond, dcov_c) = vlt.transform.backward(&t_cache, &dt)?;

    let (g_latent_decoder, dz) = vlt.variation.latent_decoder.backward(&dec_cache, &dcond)?;
    let (kl_mu, kl_lv) = kl_divergence_grad(&code);
    let beta = weights.beta_kl;
    let dmu: Vec<f64> = dz.iter().zip(&kl_mu).map(|(a, b)| a + beta * b).collect();
    let dlv: Vec<f64> = match &eps {
        Some(e) => dz
            .iter()
            .zip(&code.log_var)
            .zip(e)
            .zip(&kl_lv)
            .map(|(((d, lv), e), k)| d * 0.5 * (lv / 2.0).exp() * e + beta * k)
            .collect(),
        None => kl_lv.iter().map(|k| beta * k).collect(),
    };
    let (g_style_encoder, dcov_s, dmean_from_code) = vlt.variation.encode_backward(&enc_cache, &dmu, &dlv)?;

    let dcc = dcc_apply.add(&covariance_backward(&cc, &dcov_c)?)?;
    let mut dcs = covariance_backward(&cs, &dcov_s)?;
    let ns = cs.length();
    for ((row, a), b) in dcs
        .data_mut()
        .chunks_mut(ns)
        .zip(&dmean_from_apply)
        .zip(&dmean_from_code)
    {
        let share = (a + b) / ns as f64;
        for v in row {
            *v += share;
        }
    }
    let (gc1, _) = pointwise_backward(&comp.compress, ex.content, &dcc.reshape(&[r, h, w])?)?;
    let style_shape = [r, ex.style.shape()[1], ex.style.shape()[2]];
    let (gc2, _) = pointwise_backward(&comp.compress, ex.style, &dcs.reshape(&style_shape)?)?;
    let grads = VltParams {
        compression: CompressionParams {
            compress: gc1.add(&gc2)?,
            decompress: g_decompress,
        },
        transform: g_transform,
        variation: VariationParams {
            style_encoder: g_style_encoder,
            latent_decoder: g_latent_decoder,
        },
    };
    Ok((parts, Some(grads)))
}

fn sample(code: &StyleCode, eps: &[f64]) -> Vec<f64> {
    code.mu
        .iter()
        .zip(&code.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iae::IaeArchitecture;
    use crate::imageio::{to_tensor, Image};
    use crate::model::VltConfig;
    use crate::nn::ParamSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(side: usize, phase: f32) -> Image {
        Image::from_fn(side, side, |x, y| {
            let u = x as f32 / side as f32;
            let v = y as f32 / side as f32;
            [
                0.5 + 0.4 * (5.0 * u + phase).sin(),
                0.5 + 0.4 * (4.0 * v * u - phase).cos(),
                0.5 + 0.3 * (7.0 * (u + v) + phase).sin(),
            ]
        })
        .unwrap()
    }

    pub(crate) fn narrow_arch() -> IaeArchitecture {
        use crate::nn::{Activation::Relu, ConvLayerSpec, Sampling};
        IaeArchitecture {
            encoder: vec![
                ConvLayerSpec::new(3, 8, Sampling::Same, Relu),
                ConvLayerSpec::new(8, 8, Sampling::Down2, Relu),
                ConvLayerSpec::new(8, 16, Sampling::Same, Relu),
                ConvLayerSpec::new(16, 16, Sampling::Down2, Relu),
            ],
        }
    }

    pub(crate) struct Fixture {
        pub iae: FrozenIae,
        pub vlt: VltParams,
        pub content: Tensor,
        pub style: Tensor,
        pub style_cov: Tensor,
    }

    pub(crate) fn fixture() -> Fixture {
        let iae = IaeParams::init(narrow_arch(), 11).unwrap();
        let content = iae.encode(&to_tensor(&image(8, 0.3))).unwrap();
        let style = iae.encode(&to_tensor(&image(8, 2.1))).unwrap();
        let style_cov = covariance(&FeatureMatrix::from_feature_map(&style).unwrap()).unwrap();
        let cfg = VltConfig {
            reduced_channels: 8,
            latent_dim: 6,
            transform_hidden: 12,
            variation_hidden: 12,
        };
        let samples = vec![
            FeatureMatrix::from_feature_map(&content).unwrap(),
            FeatureMatrix::from_feature_map(&style).unwrap(),
        ];
        let vlt = VltParams::init(&cfg, &samples, 5).unwrap();
        Fixture {
            iae: FrozenIae::new(iae),
            vlt,
            content,
            style,
            style_cov,
        }
    }

    fn fd_pass_rate(weights: LossWeights, noise: Option<u64>, probes: usize, seed: u64) -> f64 {
        let fx = fixture();
        let ex = VltExample {
            content: &fx.content,
            style: &fx.style,
            style_cov: &fx.style_cov,
            noise_seed: noise,
        };
        let (_, g) = total_vlt_loss(&fx.iae, &fx.vlt, &ex, &weights, true).unwrap();
        let g = g.unwrap();
        let grads: Vec<f64> = g.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let sizes: Vec<usize> = fx.vlt.named().iter().map(|(_, t)| t.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-3;
        let mut pass = 0;
        for _ in 0..probes {
            let flat = rng.random_range(0..grads.len());
            let (mut ti, mut j) = (0, flat);
            while j >= sizes[ti] {
                j -= sizes[ti];
                ti += 1;
            }
            let eval = |delta: f64| {
                let mut p = fx.vlt.clone();
                p.tensors_mut()[ti].data_mut()[j] += delta;
                total_vlt_loss(&fx.iae, &p, &ex, &weights, false).unwrap().0.total
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grads[flat];
            if (fd - a).abs() <= 1e-3 * fd.abs().max(a.abs()).max(1e-8) {
                pass += 1;
            }
        }
        pass as f64 / probes as f64
    }

    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        for seed in 1..4 {
            let rate = fd_pass_rate(LossWeights::default(), Some(7), 100, seed);
            assert!(rate >= 0.95, "pass rate {rate}");
        }
    }

    #[test]
    fn zero_weights_reduce_to_content_loss() {
        let fx = fixture();
        let ex = VltExample {
            content: &fx.content,
            style: &fx.style,
            style_cov: &fx.style_cov,
            noise_seed: None,
        };
        let w = LossWeights {
            lambda_style: 0.0,
            beta_kl: 0.0,
            style_order_l: 2,
        };
        let (parts, _) = total_vlt_loss(&fx.iae, &fx.vlt, &ex, &w, false).unwrap();
        assert_eq!(parts.total, parts.content);
        let (full, _) = total_vlt_loss(&fx.iae, &fx.vlt, &ex, &LossWeights::default(), false).unwrap();
        assert!(full.total >= full.content && full.style >= 0.0 && full.kl >= 0.0);
        fx.iae.verify().unwrap();
    }
}
