//! Image autoencoder: a symmetric conv encoder/decoder with no skip
//! connections. Its encoder output is the feature space in which all style
//! statistics are computed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv_backward, conv_forward, kaiming_uniform, prefixed, Activation, CacheMode, ConvCache,
    ConvLayerSpec, ConvParams, ParamSet, Sampling, RELU_GAIN,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IaeArchitecture {
    pub encoder: Vec<ConvLayerSpec>,
}

impl Default for IaeArchitecture {
    fn default() -> Self {
        Self::desk()
    }
}

impl IaeArchitecture {
    /// 3→32 → 32↓ → 64 → 64↓, all 3×3 ReLU.
    pub fn desk() -> Self {
        use Activation::Relu;
        Self {
            encoder: vec![
                ConvLayerSpec::new(3, 32, Sampling::Same, Relu),
                ConvLayerSpec::new(32, 32, Sampling::Down2, Relu),
                ConvLayerSpec::new(32, 64, Sampling::Same, Relu),
                ConvLayerSpec::new(64, 64, Sampling::Down2, Relu),
            ],
        }
    }

    /// Reversed, transposed encoder; the final layer emits pixels linearly.
    pub fn decoder(&self) -> Vec<ConvLayerSpec> {
        let n = self.encoder.len();
        self.encoder
            .iter()
            .rev()
            .enumerate()
            .map(|(i, s)| {
                let mut t = s.transposed();
                t.activation = if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                t
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .encoder
            .first()
            .ok_or_else(|| Error::Contract("encoder has no layers".into()))?;
        if first.in_channels != 3 {
            return Err(Error::Contract(format!(
                "encoder must take 3 channels, takes {}",
                first.in_channels
            )));
        }
        for (i, pair) in self.encoder.windows(2).enumerate() {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::Contract(format!(
                    "encoder layer {i} emits {} channels but layer {} takes {}",
                    pair[0].out_channels,
                    i + 1,
                    pair[1].in_channels
                )));
            }
        }
        if let Some(s) = self.encoder.iter().find(|s| s.kernel != 3 || s.sampling == Sampling::Up2) {
            return Err(Error::Contract(format!("unsupported encoder layer {s:?}")));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.encoder.last().map_or(0, |s| s.out_channels)
    }

    /// Spatial contraction per side.
    pub fn downsample(&self) -> usize {
        self.encoder
            .iter()
            .filter(|s| s.sampling == Sampling::Down2)
            .map(|_| 2)
            .product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IaeParams {
    arch: IaeArchitecture,
    pub encoder: Vec<ConvParams>,
    pub decoder: Vec<ConvParams>,
}

impl IaeParams {
    pub fn zeros(arch: IaeArchitecture) -> Result<Self> {
        arch.validate()?;
        let encoder = arch.encoder.iter().map(ConvParams::zeros).collect();
        let decoder = arch.decoder().iter().map(ConvParams::zeros).collect();
        Ok(Self {
            arch,
            encoder,
            decoder,
        })
    }

    /// Kaiming-uniform weights (fan-in), zero biases.
    pub fn init(arch: IaeArchitecture, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs: Vec<ConvLayerSpec> = p.arch.encoder.iter().copied().chain(p.arch.decoder()).collect();
        for (spec, layer) in specs.iter().zip(p.encoder.iter_mut().chain(p.decoder.iter_mut())) {
            let gain = if spec.activation == Activation::Relu { RELU_GAIN } else { 1.0 };
            kaiming_uniform(&mut layer.weight, spec.in_channels * 9, gain, &mut rng);
        }
        Ok(p)
    }

    pub fn architecture(&self) -> &IaeArchitecture {
        &self.arch
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = x.dims3()?;
        let f = self.arch.downsample();
        if c != 3 {
            return Err(Error::dim(format!("encoder takes 3 channels, got {c}")));
        }
        if h % f != 0 || w % f != 0 {
            return Err(Error::dim(format!(
                "image {h}×{w} not divisible by {f}; no implicit padding"
            )));
        }
        Ok(())
    }

    fn check_features(&self, f: &Tensor) -> Result<()> {
        let (c, _, _) = f.dims3()?;
        if c != self.arch.feature_channels() {
            return Err(Error::dim(format!(
                "decoder takes {} channels, got {c}",
                self.arch.feature_channels()
            )));
        }
        Ok(())
    }

    /// `3×H×W → C_f×H/4×W/4`
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_image(x)?;
        Ok(run_stack(&self.arch.encoder, &self.encoder, x, CacheMode::None)?.0)
    }

    /// `C_f×h×w → 3×4h×4w`, unclamped.
    pub fn decode(&self, f: &Tensor) -> Result<Tensor> {
        self.check_features(f)?;
        Ok(run_stack(&self.arch.decoder(), &self.decoder, f, CacheMode::None)?.0)
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?)
    }

    /// Little-endian f32 bytes of every tensor, in parameter order.
    pub fn tensor_bytes(&self) -> Vec<u8> {
        self.named()
            .iter()
            .flat_map(|(_, t)| t.to_f32_vec())
            .flat_map(f32::to_le_bytes)
            .collect()
    }
}

impl ParamSet for IaeParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.extend(prefixed(&format!("iae.encoder.{i}"), l.named()));
        }
        for (i, l) in self.decoder.iter().enumerate() {
            out.extend(prefixed(&format!("iae.decoder.{i}"), l.named()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|l| l.tensors_mut())
            .collect()
    }
}

fn run_stack(
    specs: &[ConvLayerSpec],
    params: &[ConvParams],
    x: &Tensor,
    mode: CacheMode,
) -> Result<(Tensor, Vec<ConvCache>)> {
    let mut caches = Vec::new();
    let mut h = x.clone();
    for (spec, p) in specs.iter().zip(params) {
        let (out, cache) = conv_forward(spec, p, &h, mode)?;
        caches.extend(cache);
        h = out;
    }
    Ok((h, caches))
}

fn backprop_stack(
    specs: &[ConvLayerSpec],
    params: &[ConvParams],
    caches: &[ConvCache],
    grad: Tensor,
    want_params: bool,
) -> Result<(Vec<ConvParams>, Tensor)> {
    let mut g = grad;
    let mut grads = Vec::with_capacity(specs.len());
    for ((spec, p), cache) in specs.iter().zip(params).zip(caches).rev() {
        let (pg, dx) = conv_backward(spec, p, cache, &g, want_params)?;
        grads.push(pg.unwrap_or_else(|| ConvParams::zeros(spec)));
        g = dx;
    }
    grads.reverse();
    Ok((grads, g))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Route {
    Encode,
    Decode,
    Reconstruct,
}

struct Tape {
    route: Route,
    encoder: Vec<ConvCache>,
    decoder: Vec<ConvCache>,
    output_shape: Vec<usize>,
}

/// Forward/backward over one parameter snapshot. The session records the
/// most recent forward pass; [`IaeSession::backward`] differentiates it.
pub struct IaeSession<'p> {
    params: &'p IaeParams,
    mode: CacheMode,
    tape: Option<Tape>,
}

pub struct IaeGrads {
    /// Zero for halves not on the recorded route, or when the session only
    /// tracks input gradients.
    pub params: IaeParams,
    pub input: Tensor,
}

impl<'p> IaeSession<'p> {
    /// Session that produces parameter and input gradients.
    pub fn new(params: &'p IaeParams) -> Self {
        Self {
            params,
            mode: CacheMode::Full,
            tape: None,
        }
    }

    /// Session for a frozen network: input gradients only.
    pub fn frozen(params: &'p IaeParams) -> Self {
        Self {
            params,
            mode: CacheMode::InputGrad,
            tape: None,
        }
    }

    pub fn encode(&mut self, x: &Tensor) -> Result<Tensor> {
        self.params.check_image(x)?;
        let (y, caches) = run_stack(&self.params.arch.encoder, &self.params.encoder, x, self.mode)?;
        self.tape = Some(Tape {
            route: Route::Encode,
            encoder: caches,
            decoder: Vec::new(),
            output_shape: y.shape().to_vec(),
        });
        Ok(y)
    }

    pub fn decode(&mut self, f: &Tensor) -> Result<Tensor> {
        self.params.check_features(f)?;
        let (y, caches) = run_stack(&self.params.arch.decoder(), &self.params.decoder, f, self.mode)?;
        self.tape = Some(Tape {
            route: Route::Decode,
            encoder: Vec::new(),
            decoder: caches,
            output_shape: y.shape().to_vec(),
        });
        Ok(y)
    }

    pub fn reconstruct(&mut self, x: &Tensor) -> Result<Tensor> {
        self.params.check_image(x)?;
        let (f, enc) = run_stack(&self.params.arch.encoder, &self.params.encoder, x, self.mode)?;
        let (y, dec) = run_stack(&self.params.arch.decoder(), &self.params.decoder, &f, self.mode)?;
        self.tape = Some(Tape {
            route: Route::Reconstruct,
            encoder: enc,
            decoder: dec,
            output_shape: y.shape().to_vec(),
        });
        Ok(y)
    }

    pub fn backward(&self, upstream: &Tensor) -> Result<IaeGrads> {
        let tape = self
            .tape
            .as_ref()
            .ok_or_else(|| Error::State("backward called before any forward pass".into()))?;
        if upstream.shape() != tape.output_shape.as_slice() {
            return Err(Error::dim(format!(
                "upstream gradient {:?} does not match recorded output {:?}",
                upstream.shape(),
                tape.output_shape
            )));
        }
        let want = self.mode == CacheMode::Full;
        let p = self.params;
        let mut grads = p.zeros_like();
        let mut g = upstream.clone();
        if matches!(tape.route, Route::Decode | Route::Reconstruct) {
            let (pg, dx) = backprop_stack(&p.arch.decoder(), &p.decoder, &tape.decoder, g, want)?;
            grads.decoder = pg;
            g = dx;
        }
        if matches!(tape.route, Route::Encode | Route::Reconstruct) {
            let (pg, dx) = backprop_stack(&p.arch.encoder, &p.encoder, &tape.encoder, g, want)?;
            grads.encoder = pg;
            g = dx;
        }
        Ok(IaeGrads {
            params: grads,
            input: g,
        })
    }
}
