//! 3×3 convolution with reflect padding, lowered to GEMM via im2col.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::{gemm, Transpose};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Stride 1, spatial size preserved.
    Same,
    /// Stride 2, spatial size halved.
    Down2,
    /// Nearest-neighbour 2× upsampling followed by a stride-1 conv.
    Up2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub sampling: Sampling,
    pub activation: Activation,
}

impl ConvLayerSpec {
    pub fn new(in_channels: usize, out_channels: usize, sampling: Sampling, activation: Activation) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: KERNEL,
            sampling,
            activation,
        }
    }

    pub fn stride(&self) -> usize {
        match self.sampling {
            Sampling::Down2 => 2,
            Sampling::Same | Sampling::Up2 => 1,
        }
    }

    /// The mirror layer: channels swapped, downsampling turned into
    /// upsampling. Activation is left to the caller.
    pub fn transposed(&self) -> Self {
        Self {
            in_channels: self.out_channels,
            out_channels: self.in_channels,
            kernel: self.kernel,
            sampling: match self.sampling {
                Sampling::Same => Sampling::Same,
                Sampling::Down2 => Sampling::Up2,
                Sampling::Up2 => Sampling::Down2,
            },
            activation: self.activation,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match self.sampling {
            Sampling::Same => Ok((h, w)),
            Sampling::Up2 => Ok((2 * h, 2 * w)),
            Sampling::Down2 => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::dim(format!(
                        "stride-2 conv needs even extents, got {h}×{w}"
                    )));
                }
                Ok((h / 2, w / 2))
            }
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, KERNEL, KERNEL]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `out × in × 3 × 3`
    pub weight: Tensor,
    /// `out`
    pub bias: Tensor,
}

impl ConvParams {
    pub fn zeros(spec: &ConvLayerSpec) -> Self {
        Self {
            weight: Tensor::zeros(&spec.weight_shape()),
            bias: Tensor::zeros(&[spec.out_channels]),
        }
    }
}

/// What the forward pass keeps for the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheMode {
    /// Nothing; inference only.
    None,
    /// Activation masks for input gradients.
    InputGrad,
    /// Masks plus the im2col buffer for weight gradients.
    Full,
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    /// One im2col buffer per pass.
    cols: Option<Vec<Vec<f64>>>,
    output: Tensor,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// One im2col + GEMM sweep. Same and stride-2 layers use a single pass with
/// the 3×3 kernel. Nearest upsampling followed by a 3×3 conv equals four
/// 2×2 convs over the low-resolution input (one per output parity) with
/// summed taps and clamped borders, which is what Up2 layers run.
struct Pass {
    /// Source row for each pass-output row, per row tap.
    rows: Vec<Vec<usize>>,
    /// Source column for each pass-output column, per column tap.
    cols: Vec<Vec<usize>>,
    /// `(dst, src, len)` runs of consecutive source columns, per column tap.
    runs: Vec<Vec<(usize, usize, usize)>>,
    /// Pass pixel `(i, j)` lands on output `(step·i + dy, step·j + dx)`.
    step: usize,
    dy: usize,
    dx: usize,
    /// Pass tap index that each 3×3 kernel tap contributes to.
    tap_of: [[usize; KERNEL]; KERNEL],
}

fn runs(map: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (d, &s) in map.iter().enumerate() {
        match out.last_mut() {
            Some((d0, s0, len)) if *d0 + *len == d && *s0 + *len == s => *len += 1,
            _ => out.push((d, s, 1)),
        }
    }
    out
}

impl Pass {
    fn new(rows: Vec<Vec<usize>>, cols: Vec<Vec<usize>>, step: usize, dy: usize, dx: usize, tap_of: [[usize; KERNEL]; KERNEL]) -> Self {
        let runs = cols.iter().map(|m| runs(m)).collect();
        Self {
            rows,
            cols,
            runs,
            step,
            dy,
            dx,
            tap_of,
        }
    }

    fn plan(spec: &ConvLayerSpec, h: usize, w: usize) -> Result<Vec<Pass>> {
        let (ho, wo) = spec.output_hw(h, w)?;
        let full = |n_out: usize, n_in: usize, s: usize| -> Vec<Vec<usize>> {
            (0..KERNEL)
                .map(|k| (0..n_out).map(|o| reflect((o * s + k) as isize - 1, n_in)).collect())
                .collect()
        };
        Ok(match spec.sampling {
            Sampling::Same | Sampling::Down2 => {
                let s = spec.stride();
                let tap_of = std::array::from_fn(|ky| std::array::from_fn(|kx| ky * KERNEL + kx));
                vec![Pass::new(full(ho, h, s), full(wo, w, s), 1, 0, 0, tap_of)]
            }
            Sampling::Up2 => {
                // Low-res offset of merged tap `a` for parity `p` is a + p − 1.
                let half = |n: usize, p: usize| -> Vec<Vec<usize>> {
                    (0..2)
                        .map(|a| {
                            (0..n)
                                .map(|i| (i as isize + a as isize + p as isize - 1).clamp(0, n as isize - 1) as usize)
                                .collect()
                        })
                        .collect()
                };
                let merged = |p: usize, k: usize| (p + k + 1) / 2 - p;
                (0..4)
                    .map(|par| {
                        let (py, px) = (par / 2, par % 2);
                        let tap_of = std::array::from_fn(|ky| std::array::from_fn(|kx| merged(py, ky) * 2 + merged(px, kx)));
                        Pass::new(half(h, py), half(w, px), 2, py, px, tap_of)
                    })
                    .collect()
            }
        })
    }

    fn taps(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    fn out_hw(&self) -> (usize, usize) {
        (self.rows[0].len(), self.cols[0].len())
    }

    /// `cout × (cin·taps)` weights for this pass.
    fn weights<'w>(&self, spec: &ConvLayerSpec, weight: &'w [f64]) -> Cow<'w, [f64]> {
        let t = self.taps();
        if t == TAPS {
            return Cow::Borrowed(weight);
        }
        let mut out = vec![0.0; spec.out_channels * spec.in_channels * t];
        for (o, ch) in (0..spec.out_channels).flat_map(|o| (0..spec.in_channels).map(move |c| (o, c))) {
            let src = &weight[(o * spec.in_channels + ch) * TAPS..][..TAPS];
            let dst = &mut out[(o * spec.in_channels + ch) * t..][..t];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    dst[self.tap_of[ky][kx]] += src[ky * KERNEL + kx];
                }
            }
        }
        Cow::Owned(out)
    }

    /// Columns for pass rows `y0..y1`, laid out `(c·taps) × ((y1−y0)·width)`.
    fn im2col(&self, src: &[f64], channels: usize, sw: usize, y0: usize, y1: usize, dst: &mut [f64]) {
        let (_, pw) = self.out_hw();
        let n = (y1 - y0) * pw;
        let plane = src.len() / channels;
        let mut r = 0;
        for ch in 0..channels {
            let plane = &src[ch * plane..(ch + 1) * plane];
            for rows in &self.rows {
                for runs in &self.runs {
                    let d = &mut dst[r * n..(r + 1) * n];
                    for (oy, out) in (y0..y1).zip(d.chunks_mut(pw)) {
                        let line = &plane[rows[oy] * sw..(rows[oy] + 1) * sw];
                        if runs.len() == pw {
                            for (v, &(_, s, _)) in out.iter_mut().zip(runs) {
                                *v = line[s];
                            }
                        } else {
                            for &(d, s, len) in runs {
                                out[d..d + len].copy_from_slice(&line[s..s + len]);
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }

    /// Adjoint of [`Pass::im2col`] over all pass rows, accumulated into `dst`.
    fn col2im(&self, cols: &[f64], channels: usize, sw: usize, dst: &mut [f64]) {
        let (ph, pw) = self.out_hw();
        let n = ph * pw;
        let plane = dst.len() / channels;
        let mut r = 0;
        for ch in 0..channels {
            let plane = &mut dst[ch * plane..(ch + 1) * plane];
            for rows in &self.rows {
                for runs in &self.runs {
                    let src = &cols[r * n..(r + 1) * n];
                    for (oy, g) in src.chunks(pw).enumerate() {
                        let line = &mut plane[rows[oy] * sw..(rows[oy] + 1) * sw];
                        if runs.len() == pw {
                            for (v, &(_, s, _)) in g.iter().zip(runs) {
                                line[s] += v;
                            }
                        } else {
                            for &(d, s, len) in runs {
                                for (t, v) in line[s..s + len].iter_mut().zip(&g[d..d + len]) {
                                    *t += v;
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// im2col buffer elements per band for the uncached forward pass.
const BAND_ELEMS: usize = 1 << 16;

pub fn conv_forward(
    spec: &ConvLayerSpec,
    p: &ConvParams,
    x: &Tensor,
    mode: CacheMode,
) -> Result<(Tensor, Option<ConvCache>)> {
    let (c, h, w) = x.dims3()?;
    if c != spec.in_channels {
        return Err(Error::dim(format!(
            "conv expects {} input channels, got {c}",
            spec.in_channels
        )));
    }
    if h < 2 || w < 2 {
        return Err(Error::dim(format!("reflect padding needs ≥2×2 input, got {h}×{w}")));
    }
    let (ho, wo) = spec.output_hw(h, w)?;
    let npix = ho * wo;
    let cout = spec.out_channels;
    let passes = Pass::plan(spec, h, w)?;
    let mut out = vec![0.0; cout * npix];
    let mut cached = Vec::new();
    for pass in &passes {
        let (ph, pw) = pass.out_hw();
        let k = c * pass.taps();
        let weights = pass.weights(spec, p.weight.data());
        let band = if mode == CacheMode::Full {
            ph
        } else {
            (BAND_ELEMS / (k * pw)).clamp(1, ph)
        };
        let direct = pass.step == 1 && band == ph;
        let mut cols = vec![0.0; k * band * pw];
        let mut tile = vec![0.0; if direct { 0 } else { cout * band * pw }];
        for y0 in (0..ph).step_by(band) {
            let y1 = (y0 + band).min(ph);
            let n = (y1 - y0) * pw;
            pass.im2col(x.data(), c, w, y0, y1, &mut cols[..k * n]);
            let acc = if direct { &mut out[..] } else { &mut tile[..cout * n] };
            for (o, row) in acc.chunks_mut(n).enumerate() {
                row.fill(p.bias.data()[o]);
            }
            gemm(
                cout,
                k,
                n,
                1.0,
                &weights,
                k,
                Transpose::No,
                &cols[..k * n],
                n,
                Transpose::No,
                1.0,
                acc,
            );
            if !direct {
                for (o, plane) in tile[..cout * n].chunks(n).enumerate() {
                    for (i, row) in (y0..y1).zip(plane.chunks(pw)) {
                        let base = o * npix + (pass.step * i + pass.dy) * wo + pass.dx;
                        for (j, v) in row.iter().enumerate() {
                            out[base + pass.step * j] = *v;
                        }
                    }
                }
            }
        }
        if mode == CacheMode::Full {
            cached.push(cols);
        }
    }
    if spec.activation == Activation::Relu {
        for v in &mut out {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    let output = Tensor::new(vec![cout, ho, wo], out)?;
    let cache = match mode {
        CacheMode::None => None,
        CacheMode::InputGrad => Some(ConvCache {
            in_hw: (h, w),
            out_hw: (ho, wo),
            cols: None,
            output: output.clone(),
        }),
        CacheMode::Full => Some(ConvCache {
            in_hw: (h, w),
            out_hw: (ho, wo),
            cols: Some(cached),
            output: output.clone(),
        }),
    };
    Ok((output, cache))
}

/// Returns `(param_grads, input_grad)`; parameter gradients are only
/// available when the forward pass ran with [`CacheMode::Full`].
pub fn conv_backward(
    spec: &ConvLayerSpec,
    p: &ConvParams,
    cache: &ConvCache,
    grad_out: &Tensor,
    want_params: bool,
) -> Result<(Option<ConvParams>, Tensor)> {
    let (ho, wo) = cache.out_hw;
    let cout = spec.out_channels;
    if grad_out.shape() != [cout, ho, wo] {
        return Err(Error::dim(format!(
            "conv upstream gradient {:?}, expected [{cout}, {ho}, {wo}]",
            grad_out.shape()
        )));
    }
    let npix = ho * wo;
    let mut g = grad_out.data().to_vec();
    if spec.activation == Activation::Relu {
        for (gv, &o) in g.iter_mut().zip(cache.output.data()) {
            if o <= 0.0 {
                *gv = 0.0;
            }
        }
    }
    let cached = if want_params {
        Some(cache.cols.as_ref().ok_or_else(|| {
            Error::State("conv weight gradient requested without a full forward cache".into())
        })?)
    } else {
        None
    };
    let c = spec.in_channels;
    let (h, w) = cache.in_hw;
    let passes = Pass::plan(spec, h, w)?;
    let mut dx = vec![0.0; c * h * w];
    let mut dw = vec![0.0; cout * c * TAPS];
    for (pi, pass) in passes.iter().enumerate() {
        let (ph, pw) = pass.out_hw();
        let n = ph * pw;
        let t = pass.taps();
        let k = c * t;
        let gp: Cow<[f64]> = if pass.step == 1 {
            Cow::Borrowed(&g)
        } else {
            let mut gp = vec![0.0; cout * n];
            for (o, plane) in gp.chunks_mut(n).enumerate() {
                for (i, row) in plane.chunks_mut(pw).enumerate() {
                    let base = o * npix + (pass.step * i + pass.dy) * wo + pass.dx;
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = g[base + pass.step * j];
                    }
                }
            }
            Cow::Owned(gp)
        };
        if let Some(cached) = cached {
            let mut dwp = vec![0.0; cout * k];
            gemm(
                cout,
                n,
                k,
                1.0,
                &gp,
                n,
                Transpose::No,
                &cached[pi],
                n,
                Transpose::Yes,
                0.0,
                &mut dwp,
            );
            if t == TAPS {
                dw = dwp;
            } else {
                for oc in 0..cout * c {
                    for ky in 0..KERNEL {
                        for kx in 0..KERNEL {
                            dw[oc * TAPS + ky * KERNEL + kx] += dwp[oc * t + pass.tap_of[ky][kx]];
                        }
                    }
                }
            }
        }
        let weights = pass.weights(spec, p.weight.data());
        let mut dcols = vec![0.0; k * n];
        gemm(
            k,
            cout,
            n,
            1.0,
            &weights,
            k,
            Transpose::Yes,
            &gp,
            n,
            Transpose::No,
            0.0,
            &mut dcols,
        );
        pass.col2im(&dcols, c, w, &mut dx);
    }
    let param_grads = if want_params {
        let db: Vec<f64> = g.chunks(npix).map(|row| row.iter().sum()).collect();
        Some(ConvParams {
            weight: Tensor::new(spec.weight_shape().to_vec(), dw)?,
            bias: Tensor::new(vec![cout], db)?,
        })
    } else {
        None
    };
    Ok((param_grads, Tensor::new(vec![c, h, w], dx)?))
}
