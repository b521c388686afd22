//! A complete stylization model: autoencoder, compression, transform nets
//! and the variation module, with single-style, blended and closed-form
//! inference paths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iae::IaeParams;
use crate::imageio::{from_tensor, to_tensor, Image};
use crate::linalg::{covariance, FeatureMatrix};
use crate::nn::{prefixed, ParamSet};
use crate::tensor::Tensor;
use crate::variation::{
    blend_codes, blend_vectors, decode_latent, encode_style, reparameterize, BlendWeights,
    StyleCode, VariationParams, DEFAULT_LATENT_DIM,
};
use crate::vlt::{
    apply_transform, closed_form_transform, CompressionParams, TransformMatrix,
    TransformNetParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VltConfig {
    pub reduced_channels: usize,
    pub latent_dim: usize,
    pub transform_hidden: usize,
    pub variation_hidden: usize,
}

impl Default for VltConfig {
    fn default() -> Self {
        Self {
            reduced_channels: 32,
            latent_dim: DEFAULT_LATENT_DIM,
            transform_hidden: 256,
            variation_hidden: 512,
        }
    }
}

impl VltConfig {
    pub fn validate(&self, feature_channels: usize) -> Result<()> {
        if self.reduced_channels == 0 || self.reduced_channels >= feature_channels {
            return Err(Error::Contract(format!(
                "compressed width {} must be in 1..{feature_channels}",
                self.reduced_channels
            )));
        }
        if self.latent_dim == 0 || self.transform_hidden == 0 || self.variation_hidden == 0 {
            return Err(Error::Contract("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Everything trained in the second phase.
#[derive(Clone, Debug, PartialEq)]
pub struct VltParams {
    pub compression: CompressionParams,
    pub transform: TransformNetParams,
    pub variation: VariationParams,
}

impl VltParams {
    pub fn zeros(cfg: &VltConfig, feature_channels: usize) -> Self {
        let r = cfg.reduced_channels;
        Self {
            compression: CompressionParams {
                compress: Tensor::zeros(&[r, feature_channels]),
                decompress: Tensor::zeros(&[feature_channels, r]),
            },
            transform: TransformNetParams::zeros(r, cfg.transform_hidden),
            variation: VariationParams::zeros(r, cfg.variation_hidden, cfg.latent_dim, r * r),
        }
    }

    /// Compression from the principal axes of `feature_samples`; transform
    /// and variation nets seeded from `seed`.
    pub fn init(cfg: &VltConfig, feature_samples: &[FeatureMatrix], seed: u64) -> Result<Self> {
        let first = feature_samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("no feature samples for compression".into()))?;
        cfg.validate(first.channels())?;
        let r = cfg.reduced_channels;
        Ok(Self {
            compression: CompressionParams::from_principal_axes(feature_samples, r)?,
            transform: TransformNetParams::init(r, cfg.transform_hidden, seed),
            variation: VariationParams::init(
                r,
                cfg.variation_hidden,
                cfg.latent_dim,
                r * r,
                seed.wrapping_add(1),
            ),
        })
    }
}

impl ParamSet for VltParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("vlt.compression", self.compression.named());
        v.extend(prefixed("vlt.transform", self.transform.named()));
        v.extend(prefixed("vlt.variation", self.variation.named()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.compression.tensors_mut();
        v.extend(self.transform.tensors_mut());
        v.extend(self.variation.tensors_mut());
        v
    }
}

/// How latent codes become the `z` fed to the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LatentMode {
    /// `z = mu`.
    #[default]
    Deterministic,
    /// Sample every code with the same seed, then blend the samples.
    SampleThenBlend { seed: u64 },
    /// Blend `(mu, σ²)` first, then sample once.
    BlendThenSample { seed: u64 },
}

/// A style reduced to what inference needs: its latent code and its mean in
/// the compressed feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedStyle {
    pub code: StyleCode,
    pub mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleModel {
    pub iae: IaeParams,
    pub vlt: VltParams,
    pub config: VltConfig,
}

impl StyleModel {
    pub fn new(iae: IaeParams, vlt: VltParams, config: VltConfig) -> Result<Self> {
        config.validate(iae.architecture().feature_channels())?;
        Ok(Self { iae, vlt, config })
    }

    pub fn features(&self, img: &Image) -> Result<Tensor> {
        self.iae.encode(&to_tensor(img))
    }

    /// Compressed features as a `C_r×N` matrix.
    pub fn compressed(&self, feat: &Tensor) -> Result<FeatureMatrix> {
        FeatureMatrix::from_feature_map(&self.vlt.compression.compress(feat)?)
    }

    pub fn encode_style_features(&self, feat: &Tensor) -> Result<EncodedStyle> {
        let fm = self.compressed(feat)?;
        let cov = covariance(&fm)?;
        let code = encode_style(&self.vlt.variation, &cov, fm.channel_means())?;
        Ok(EncodedStyle {
            code,
            mean: fm.channel_means().to_vec(),
        })
    }

    pub fn encode_style_image(&self, img: &Image) -> Result<EncodedStyle> {
        self.encode_style_features(&self.features(img)?)
    }

    /// Transform for compressed content features and a latent sample.
    pub fn transform_from_latent(&self, content: &FeatureMatrix, z: &[f64], mean: Vec<f64>) -> Result<TransformMatrix> {
        let cond = decode_latent(&self.vlt.variation, z)?;
        let (t, _) = self.vlt.transform.forward(&cond, &covariance(content)?)?;
        TransformMatrix::new(t, mean)
    }

    /// Apply `tm` in compressed space and decode to an (unclamped) image
    /// tensor.
    pub fn render(&self, content_feat: &Tensor, tm: &TransformMatrix) -> Result<Tensor> {
        let (_, h, w) = content_feat.dims3()?;
        let fm = self.compressed(content_feat)?;
        let d = apply_transform(tm, &fm)?.to_feature_map(h, w)?;
        self.iae.decode(&self.vlt.compression.decompress(&d)?)
    }

    fn latent(&self, code: &StyleCode, mode: LatentMode) -> Vec<f64> {
        match mode {
            LatentMode::Deterministic => code.mu.clone(),
            LatentMode::SampleThenBlend { seed } | LatentMode::BlendThenSample { seed } => {
                reparameterize(code, seed).z
            }
        }
    }

    /// Single-style stylization; does not go through blending.
    pub fn stylize_encoded(&self, content_feat: &Tensor, style: &EncodedStyle, mode: LatentMode) -> Result<Tensor> {
        let (_, h, w) = content_feat.dims3()?;
        let fm = self.compressed(content_feat)?;
        let z = self.latent(&style.code, mode);
        let tm = self.transform_from_latent(&fm, &z, style.mean.clone())?;
        let d = apply_transform(&tm, &fm)?.to_feature_map(h, w)?;
        self.iae.decode(&self.vlt.compression.decompress(&d)?)
    }

    pub fn stylize(&self, content: &Image, style: &Image, mode: LatentMode) -> Result<Image> {
        let enc = self.encode_style_image(style)?;
        from_tensor(&self.stylize_encoded(&self.features(content)?, &enc, mode)?)
    }

    /// Blend the codes (and the style means) of several styles.
    pub fn blend_encoded(&self, content_feat: &Tensor, styles: &[EncodedStyle], w: &BlendWeights, mode: LatentMode) -> Result<Tensor> {
        let (_, h, w_) = content_feat.dims3()?;
        let codes: Vec<StyleCode> = match mode {
            LatentMode::SampleThenBlend { seed } => styles
                .iter()
                .map(|s| reparameterize(&s.code, seed))
                .collect(),
            _ => styles.iter().map(|s| s.code.clone()).collect(),
        };
        let mixed = blend_codes(&codes, w)?;
        let z = match mode {
            LatentMode::Deterministic => mixed.mu,
            LatentMode::SampleThenBlend { .. } => mixed.z,
            LatentMode::BlendThenSample { seed } => reparameterize(&mixed, seed).z,
        };
        let means: Vec<Vec<f64>> = styles.iter().map(|s| s.mean.clone()).collect();
        let mean = blend_vectors(&means, w)?;
        let fm = self.compressed(content_feat)?;
        let tm = self.transform_from_latent(&fm, &z, mean)?;
        let d = apply_transform(&tm, &fm)?.to_feature_map(h, w_)?;
        self.iae.decode(&self.vlt.compression.decompress(&d)?)
    }

    pub fn blend(&self, content: &Image, styles: &[Image], w: &BlendWeights, mode: LatentMode) -> Result<Image> {
        let enc = styles
            .iter()
            .map(|s| self.encode_style_image(s))
            .collect::<Result<Vec<_>>>()?;
        from_tensor(&self.blend_encoded(&self.features(content)?, &enc, w, mode)?)
    }

    /// Eleven frames blending `a` into `b`: `w = (1 − α, α)` for `α = 0, 0.1, …, 1`.
    pub fn sweep(&self, content: &Image, a: &Image, b: &Image, mode: LatentMode) -> Result<Vec<Image>> {
        let feat = self.features(content)?;
        let enc = [self.encode_style_image(a)?, self.encode_style_image(b)?];
        (0..=10)
            .map(|i| {
                let w = BlendWeights::pair(i as f64 / 10.0)?;
                from_tensor(&self.blend_encoded(&feat, &enc, &w, mode)?)
            })
            .collect()
    }
}

/// Training-free stylization with the exact whitening/coloring transform on
/// the full-width encoder features.
pub fn stylize_closed_form(iae: &IaeParams, content: &Image, style: &Image) -> Result<Image> {
    let fc = iae.encode(&to_tensor(content))?;
    let fs = iae.encode(&to_tensor(style))?;
    let (_, h, w) = fc.dims3()?;
    let content_fm = FeatureMatrix::from_feature_map(&fc)?;
    let tm = closed_form_transform(&content_fm, &FeatureMatrix::from_feature_map(&fs)?)?;
    let d = apply_transform(&tm, &content_fm)?.to_feature_map(h, w)?;
    from_tensor(&iae.decode(&d)?)
}
