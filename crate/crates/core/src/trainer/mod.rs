//! Two-phase training: autoencoder reconstruction, then the VLT objective
//! against the frozen autoencoder.

pub mod adam;
pub mod checkpoint;
pub mod loss;
pub mod pipeline;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iae::{IaeArchitecture, IaeParams, IaeSession};
use crate::imageio::{random_crop_augment, to_tensor, AugmentationConfig, Image};
use crate::linalg::{covariance, FeatureMatrix};
use crate::model::{VltConfig, VltParams};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub use adam::{clip_global_norm, tree_sum, AdamConfig, OptimizerState};
pub use checkpoint::{
    architecture_hash, load_checkpoint, save_checkpoint, Architecture, Checkpoint, Metadata, Phase,
    TensorEntry,
};
pub use loss::{content_loss, l1_loss, style_loss, style_loss_against, LossWeights};
pub use pipeline::{iae_digest, total_vlt_loss, FrozenIae, LossParts, VltExample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub clip_norm: f64,
    /// Square training crop side (autoencoder phase).
    pub crop_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 0,
            clip_norm: 5.0,
            crop_size: 64,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument("learning rate and clip norm must be positive".into()));
        }
        Ok(())
    }

    fn summary(&self, weights: Option<&LossWeights>) -> serde_json::Value {
        serde_json::json!({
            "steps": self.steps,
            "batch_size": self.batch_size,
            "adam": self.adam,
            "clip_norm": self.clip_norm,
            "crop_size": self.crop_size,
            "loss_weights": weights,
        })
    }
}

/// Worker pool honoring `STVAE_THREADS`.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("STVAE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidArgument(format!("STVAE_THREADS={v} is not a positive integer")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::State(format!("thread pool: {e}")))
}

/// Crop the top-left corner so both sides are multiples of `m`.
pub fn crop_to_multiple(img: &Image, m: usize) -> Result<Image> {
    let w = img.width() / m * m;
    let h = img.height() / m * m;
    if w == img.width() && h == img.height() {
        return Ok(img.clone());
    }
    img.crop(0, 0, w, h)
}

fn mean_grads<P: ParamSet>(grads: Vec<P>) -> P {
    let n = grads.len() as f64;
    let mut g = tree_sum(grads).expect("non-empty batch");
    g.scale_in_place(1.0 / n);
    g
}

/// Reconstruction L1 training of a fresh autoencoder.
pub fn train_iae(
    corpus: &[Image],
    arch: IaeArchitecture,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<Checkpoint> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    cfg.validate()?;
    let mut params = IaeParams::init(arch.clone(), cfg.seed)?;
    let f = arch.downsample();
    if cfg.crop_size % f != 0 {
        return Err(Error::InvalidArgument(format!(
            "crop size {} is not a multiple of {f}",
            cfg.crop_size
        )));
    }
    let mut opt = OptimizerState::new(&params, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1ae0_5eed);
    let pool = thread_pool()?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Tensor> = (0..cfg.batch_size)
            .map(|_| {
                let img = &corpus[rng.random_range(0..corpus.len())];
                let aug = AugmentationConfig {
                    crop_size: cfg.crop_size,
                    flip: true,
                    rotate: true,
                    seed: rng.random(),
                };
                random_crop_augment(img, &aug).map(|i| to_tensor(&i))
            })
            .collect::<Result<_>>()?;
        let p = &params;
        let results: Vec<(f64, IaeParams)> = pool.install(|| {
            batch
                .par_iter()
                .map(|x| {
                    let mut s = IaeSession::new(p);
                    let y = s.reconstruct(x)?;
                    let (loss, g) = l1_loss(&y, x)?;
                    Ok((loss, s.backward(&g)?.params))
                })
                .collect::<Result<_>>()
        })?;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("reconstruction loss diverged at step {step}")));
        }
        let mut g = mean_grads(results.into_iter().map(|r| r.1).collect());
        clip_global_norm(&mut g, cfg.clip_norm);
        opt.update(&mut params, &g);
        history.push(loss);
        on_step(step, loss);
    }
    let arch = Architecture { iae: arch, vlt: None };
    let mut meta = Metadata::new(Phase::Iae, &arch, cfg.seed);
    meta.step = cfg.steps as u64;
    meta.loss_history = history;
    meta.training = Some(cfg.summary(None));
    Ok(Checkpoint::from_iae(&params, meta))
}

/// Encoder features and style targets for a corpus, computed once since the
/// autoencoder does not change in this phase.
pub struct FeatureBank {
    pub features: Vec<Tensor>,
    pub covariances: Vec<Tensor>,
}

impl FeatureBank {
    pub fn new(iae: &IaeParams, images: &[Image]) -> Result<Self> {
        let f = iae.architecture().downsample();
        let features = images
            .iter()
            .map(|img| iae.encode(&to_tensor(&crop_to_multiple(img, f)?)))
            .collect::<Result<Vec<_>>>()?;
        let covariances = features
            .iter()
            .map(|t| covariance(&FeatureMatrix::from_feature_map(t)?))
            .collect::<Result<_>>()?;
        Ok(Self {
            features,
            covariances,
        })
    }

    pub fn feature_matrices(&self) -> Result<Vec<FeatureMatrix>> {
        self.features.iter().map(FeatureMatrix::from_feature_map).collect()
    }
}

/// VLT and variation training against the autoencoder in `iae_ckpt`, whose
/// tensors are left untouched.
pub fn train_vlt(
    iae_ckpt: &Checkpoint,
    content: &[Image],
    style: &[Image],
    vlt_cfg: VltConfig,
    weights: &LossWeights,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(usize, &LossParts),
) -> Result<Checkpoint> {
    if content.is_empty() || style.is_empty() {
        return Err(Error::InvalidArgument("content and style corpora must be nonempty".into()));
    }
    cfg.validate()?;
    weights.validate()?;
    let frozen = FrozenIae::new(iae_ckpt.iae()?);
    let iae_arch = frozen.params().architecture().clone();
    vlt_cfg.validate(iae_arch.feature_channels())?;
    let content_bank = FeatureBank::new(frozen.params(), content)?;
    let style_bank = FeatureBank::new(frozen.params(), style)?;
    let mut samples = content_bank.feature_matrices()?;
    samples.extend(style_bank.feature_matrices()?);
    let mut vlt = VltParams::init(&vlt_cfg, &samples, cfg.seed)?;
    let mut opt = OptimizerState::new(&vlt, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x71_7500);
    let pool = thread_pool()?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picks: Vec<(usize, usize, u64)> = (0..cfg.batch_size)
            .map(|_| {
                (
                    rng.random_range(0..content.len()),
                    rng.random_range(0..style.len()),
                    rng.random(),
                )
            })
            .collect();
        let v = &vlt;
        let fz = &frozen;
        let results: Vec<(LossParts, VltParams)> = pool.install(|| {
            picks
                .par_iter()
                .map(|&(ci, si, noise)| {
                    let ex = VltExample {
                        content: &content_bank.features[ci],
                        style: &style_bank.features[si],
                        style_cov: &style_bank.covariances[si],
                        noise_seed: Some(noise),
                    };
                    let (parts, g) = total_vlt_loss(fz, v, &ex, weights, true)?;
                    Ok((parts, g.expect("gradients requested")))
                })
                .collect::<Result<_>>()
        })?;
        let mut parts = LossParts::default();
        for (p, _) in &results {
            parts.add(p);
        }
        parts.scale(1.0 / results.len() as f64);
        let mut g = mean_grads(results.into_iter().map(|r| r.1).collect());
        clip_global_norm(&mut g, cfg.clip_norm);
        opt.update(&mut vlt, &g);
        history.push(parts.total);
        on_step(step, &parts);
    }
    frozen.verify()?;
    let arch = Architecture {
        iae: iae_arch,
        vlt: Some(vlt_cfg),
    };
    let mut meta = Metadata::new(Phase::Vlt, &arch, cfg.seed);
    meta.step = cfg.steps as u64;
    meta.loss_history = history;
    meta.training = Some(cfg.summary(Some(weights)));
    let model = crate::model::StyleModel::new(frozen.into_params(), vlt, vlt_cfg)?;
    Ok(Checkpoint::from_model(&model, meta))
}
