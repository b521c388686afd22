//! Linear transformation of centered content features so their covariance
//! matches a style's: a closed-form whitening/coloring path and a learned
//! feed-forward path `T = T₁(style) · T₂(content)`, plus the 1×1
//! compression that shrinks the channel count before either.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gemm::Transpose;
use crate::linalg::{
    centering_backward, covariance, default_floor, matrix_power_sym, sym_eigen, FeatureMatrix,
    FLOOR_SCALE,
};
use crate::nn::{kaiming_uniform, prefixed, Mlp, MlpCache, ParamSet, RELU_GAIN};
use crate::tensor::Tensor;

/// 1×1 convolutions between the feature width `C_f` and the compressed
/// width `C_r`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressionParams {
    /// `C_r × C_f`
    pub compress: Tensor,
    /// `C_f × C_r`
    pub decompress: Tensor,
}

impl CompressionParams {
    /// Square identity pair, for `C_r == C_f`.
    pub fn identity(channels: usize) -> Self {
        Self {
            compress: Tensor::identity(channels),
            decompress: Tensor::identity(channels),
        }
    }

    /// Project onto the top `reduced` eigenvectors of the uncentered second
    /// moment of `samples`, with the transpose as the way back.
    pub fn from_principal_axes(samples: &[FeatureMatrix], reduced: usize) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("no feature samples".into()))?;
        let c = first.channels();
        if reduced == 0 || reduced > c {
            return Err(Error::InvalidArgument(format!(
                "cannot compress {c} channels to {reduced}"
            )));
        }
        let mut moment = Tensor::zeros(&[c, c]);
        let mut total = 0usize;
        for f in samples {
            if f.channels() != c {
                return Err(Error::dim("feature samples disagree on channel count"));
            }
            let v = f.values();
            moment.axpy(1.0, &v.matmul_t(Transpose::No, v, Transpose::Yes)?)?;
            total += f.length();
        }
        let moment = moment.scale(1.0 / total as f64).symmetrize()?;
        let eig = sym_eigen(&moment, f64::NEG_INFINITY)?;
        let e = eig.eigenvectors();
        let mut decompress = Tensor::from_fn(&[c, reduced], |i| e.at2(i / reduced, i % reduced));
        decompress.round_to_f32();
        let compress = decompress.transpose()?;
        Ok(Self {
            compress,
            decompress,
        })
    }

    pub fn full_channels(&self) -> usize {
        self.compress.shape()[1]
    }

    pub fn reduced_channels(&self) -> usize {
        self.compress.shape()[0]
    }

    pub fn compress(&self, feat: &Tensor) -> Result<Tensor> {
        pointwise(&self.compress, feat)
    }

    pub fn decompress(&self, feat: &Tensor) -> Result<Tensor> {
        pointwise(&self.decompress, feat)
    }
}

impl ParamSet for CompressionParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("compress".into(), &self.compress),
            ("decompress".into(), &self.decompress),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.compress, &mut self.decompress]
    }
}

/// Per-pixel linear map `W·x` on a `C×N` or `C×H×W` tensor.
pub fn pointwise(weight: &Tensor, feat: &Tensor) -> Result<Tensor> {
    let (out_c, in_c) = weight.dims2()?;
    let c = feat.shape()[0];
    if c != in_c || !(2..=3).contains(&feat.rank()) {
        return Err(Error::dim(format!(
            "1×1 conv takes {in_c} channels, got shape {:?}",
            feat.shape()
        )));
    }
    let n = feat.len() / c;
    let y = weight.matmul(&feat.clone().reshape(&[c, n])?)?;
    let mut shape = feat.shape().to_vec();
    shape[0] = out_c;
    y.reshape(&shape)
}

/// Gradients of `y = W·x` given `dy`: returns `(dW, dx)`.
pub fn pointwise_backward(weight: &Tensor, feat: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (out_c, in_c) = weight.dims2()?;
    let n = feat.len() / in_c;
    let x = feat.clone().reshape(&[in_c, n])?;
    let g = grad_out.clone().reshape(&[out_c, n])?;
    let dw = g.matmul_t(Transpose::No, &x, Transpose::Yes)?;
    let dx = weight
        .matmul_t(Transpose::Yes, &g, Transpose::No)?
        .reshape(feat.shape())?;
    Ok((dw, dx))
}

/// `F_d = t · F̄_c + style_mean`
#[derive(Clone, Debug, PartialEq)]
pub struct TransformMatrix {
    pub t: Tensor,
    pub style_mean: Vec<f64>,
}

impl TransformMatrix {
    pub fn new(t: Tensor, style_mean: Vec<f64>) -> Result<Self> {
        let (r, c) = t.dims2()?;
        if r != c || style_mean.len() != r {
            return Err(Error::dim(format!(
                "transform {r}×{c} with mean of length {}",
                style_mean.len()
            )));
        }
        t.ensure_finite("transform matrix")?;
        Ok(Self { t, style_mean })
    }

    /// `t = I` with the given target mean.
    pub fn identity(style_mean: Vec<f64>) -> Self {
        Self {
            t: Tensor::identity(style_mean.len()),
            style_mean,
        }
    }

    pub fn channels(&self) -> usize {
        self.style_mean.len()
    }
}

fn floored_eigen(cov: &Tensor, eps: f64) -> Result<crate::linalg::SymEigen> {
    let raw = sym_eigen(cov, f64::NEG_INFINITY)?;
    let top = raw.eigenvalues().first().copied().unwrap_or(0.0);
    let floor = eps * top.max(1.0);
    sym_eigen(cov, floor)
}

/// `E_c·D_c^{−1/2}·E_cᵀ·F̄`. Eigenvalues are floored at
/// `eps·max(λ_max, 1)`.
pub fn whiten(f: &FeatureMatrix, eps: f64) -> Result<FeatureMatrix> {
    let w = matrix_power_sym(&floored_eigen(&covariance(f)?, eps)?, -0.5)?;
    FeatureMatrix::new(w.matmul(&f.centered())?)
}

/// `E_s·D_s^{1/2}·E_sᵀ·white + style_mean`; expects `white` to have
/// (near-)identity covariance.
pub fn color(white: &FeatureMatrix, style_cov: &Tensor, style_mean: &[f64]) -> Result<FeatureMatrix> {
    let c = white.channels();
    if style_cov.shape() != [c, c] || style_mean.len() != c {
        return Err(Error::dim(format!(
            "coloring {c}-channel features with covariance {:?} and mean of length {}",
            style_cov.shape(),
            style_mean.len()
        )));
    }
    let root = matrix_power_sym(&floored_eigen(style_cov, FLOOR_SCALE)?, 0.5)?;
    let colored = root.matmul(white.values())?;
    FeatureMatrix::new(add_column(colored, style_mean))
}

fn add_column(mut m: Tensor, v: &[f64]) -> Tensor {
    let n = m.shape()[1];
    for (row, &b) in m.data_mut().chunks_mut(n).zip(v) {
        for x in row {
            *x += b;
        }
    }
    m
}

/// `t = C_s^{1/2} · C_c^{−1/2}`: the rotation-free solution of
/// `t·C_c·tᵀ = C_s`.
pub fn closed_form_transform(content: &FeatureMatrix, style: &FeatureMatrix) -> Result<TransformMatrix> {
    if content.channels() != style.channels() {
        return Err(Error::dim(format!(
            "content has {} channels, style {}",
            content.channels(),
            style.channels()
        )));
    }
    let cov_c = covariance(content)?;
    let cov_s = covariance(style)?;
    let ec = sym_eigen(&cov_c, f64::NEG_INFINITY)?;
    let es = sym_eigen(&cov_s, f64::NEG_INFINITY)?;
    let floor_c = default_floor(ec.eigenvalues()[0]);
    let floor_s = default_floor(es.eigenvalues()[0]);
    let inv_root_c = matrix_power_sym(&sym_eigen(&cov_c, floor_c)?, -0.5)?;
    let root_s = matrix_power_sym(&sym_eigen(&cov_s, floor_s)?, 0.5)?;
    let t = root_s.matmul(&inv_root_c)?;
    t.ensure_finite("closed-form transform").map_err(|e| match e {
        Error::Numerical(m) => Error::Singular(m),
        other => other,
    })?;
    TransformMatrix::new(t, style.channel_means().to_vec())
}

/// `output = t · centered(content) + style_mean`
pub fn apply_transform(tm: &TransformMatrix, content: &FeatureMatrix) -> Result<FeatureMatrix> {
    if content.channels() != tm.channels() {
        return Err(Error::dim(format!(
            "transform is {0}×{0}, content has {1} channels",
            tm.channels(),
            content.channels()
        )));
    }
    FeatureMatrix::new(add_column(tm.t.matmul(&content.centered())?, &tm.style_mean))
}

/// Gradients of [`apply_transform`]: `(dt, d_style_mean, d_content)`.
pub fn apply_transform_backward(
    tm: &TransformMatrix,
    content: &FeatureMatrix,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<f64>, Tensor)> {
    let centered = content.centered();
    let dt = grad_out.matmul_t(Transpose::No, &centered, Transpose::Yes)?;
    let n = content.length();
    let dmean = grad_out.data().chunks(n).map(|r| r.iter().sum()).collect();
    let dcentered = tm.t.matmul_t(Transpose::Yes, grad_out, Transpose::No)?;
    Ok((dt, dmean, centering_backward(&dcentered)?))
}

/// Two branch networks, each `C_r² → hidden → C_r²`, reading a flattened
/// covariance (or a conditioning vector of the same size) row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformNetParams {
    /// T₁: style branch.
    pub style_branch: Mlp,
    /// T₂: content branch.
    pub content_branch: Mlp,
}

#[derive(Clone, Debug)]
pub struct TransformNetCache {
    style: MlpCache,
    content: MlpCache,
    style_out: Tensor,
    content_out: Tensor,
}

impl TransformNetParams {
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        let d = channels * channels;
        Self {
            style_branch: Mlp::zeros(d, hidden, d),
            content_branch: Mlp::zeros(d, hidden, d),
        }
    }

    /// Random hidden layers; output layers start near zero with an identity
    /// bias, so an untrained net yields `t ≈ I`.
    pub fn init(channels: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(channels, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = channels * channels;
        for branch in [&mut p.style_branch, &mut p.content_branch] {
            kaiming_uniform(&mut branch.hidden.weight, d, RELU_GAIN, &mut rng);
            kaiming_uniform(&mut branch.output.weight, hidden, 0.1, &mut rng);
            branch.output.bias = Tensor::identity(channels).reshape(&[d]).expect("square");
        }
        p
    }

    pub fn channels(&self) -> usize {
        (self.content_branch.inputs() as f64).sqrt().round() as usize
    }

    /// Style conditioning width expected by T₁.
    pub fn condition_len(&self) -> usize {
        self.style_branch.inputs()
    }

    fn check_cov(&self, cov: &Tensor) -> Result<()> {
        let c = self.channels();
        if cov.shape() != [c, c] {
            return Err(Error::dim(format!(
                "transform net expects {c}×{c} covariance, got {:?}",
                cov.shape()
            )));
        }
        Ok(())
    }

    /// `t = T₁(condition) · T₂(vec cov_c)`
    pub fn forward(&self, condition: &[f64], content_cov: &Tensor) -> Result<(Tensor, TransformNetCache)> {
        self.check_cov(content_cov)?;
        let c = self.channels();
        let (a, style) = self.style_branch.forward(condition)?;
        let (b, content) = self.content_branch.forward(content_cov.data())?;
        let a = Tensor::new(vec![c, c], a)?;
        let b = Tensor::new(vec![c, c], b)?;
        let t = a.matmul(&b)?;
        Ok((
            t,
            TransformNetCache {
                style,
                content,
                style_out: a,
                content_out: b,
            },
        ))
    }

    /// Returns `(param_grads, d_condition, d_content_cov)`.
    pub fn backward(&self, cache: &TransformNetCache, dt: &Tensor) -> Result<(Self, Vec<f64>, Tensor)> {
        let c = self.channels();
        let da = dt.matmul_t(Transpose::No, &cache.content_out, Transpose::Yes)?;
        let db = cache.style_out.matmul_t(Transpose::Yes, dt, Transpose::No)?;
        let (gs, dcond) = self.style_branch.backward(&cache.style, da.data())?;
        let (gc, dcov) = self.content_branch.backward(&cache.content, db.data())?;
        Ok((
            Self {
                style_branch: gs,
                content_branch: gc,
            },
            dcond,
            Tensor::new(vec![c, c], dcov)?,
        ))
    }
}

impl ParamSet for TransformNetParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        prefixed("style_branch", self.style_branch.named())
            .into_iter()
            .chain(prefixed("content_branch", self.content_branch.named()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.style_branch.tensors_mut();
        v.extend(self.content_branch.tensors_mut());
        v
    }
}

/// `t = T₁(vec cov_s) · T₂(vec cov_c)`, with the style mean carried over.
pub fn learned_transform(
    net: &TransformNetParams,
    content: &FeatureMatrix,
    style: &FeatureMatrix,
) -> Result<TransformMatrix> {
    if content.channels() != net.channels() || style.channels() != net.channels() {
        return Err(Error::dim(format!(
            "transform net is {0}-channel; content {1}, style {2}",
            net.channels(),
            content.channels(),
            style.channels()
        )));
    }
    let cov_s = covariance(style)?;
    let (t, _) = net.forward(cov_s.data(), &covariance(content)?)?;
    TransformMatrix::new(t, style.channel_means().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn correlated(c: usize, n: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix = Tensor::from_fn(&[c, c], |_| rng.random_range(-1.0..1.0));
        let raw = Tensor::from_fn(&[c, n], |_| rng.random_range(-1.0..1.0));
        let mut v = mix.matmul(&raw).unwrap();
        for (i, row) in v.data_mut().chunks_mut(n).enumerate() {
            for x in row {
                *x += i as f64 * 0.3 - 1.0;
            }
        }
        FeatureMatrix::new(v).unwrap()
    }

    fn rel(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).unwrap().frobenius() / b.frobenius()
    }

    #[test]
    fn whitening_identity_covariance_input_is_centering() {
        // Rows ±1 alternating in orthogonal patterns: covariance exactly I.
        let n = 4;
        let data = vec![1., -1., 1., -1., 1., 1., -1., -1.];
        let f = FeatureMatrix::from_rows(2, n, data).unwrap();
        assert!(rel(&covariance(&f).unwrap(), &Tensor::identity(2)) < 1e-12);
        let w = whiten(&f, FLOOR_SCALE).unwrap();
        assert!(w.values().max_abs_diff(&f.centered()).unwrap() < 1e-4);
    }

    #[test]
    fn whitened_covariance_is_identity() {
        let f = correlated(16, 256, 1);
        let w = whiten(&f, FLOOR_SCALE).unwrap();
        let cov = covariance(&w).unwrap();
        assert!(cov.sub(&Tensor::identity(16)).unwrap().frobenius() < 1e-3);
        assert!(w.channel_means().iter().all(|m| m.abs() < 1e-9));
    }

    #[test]
    fn constant_features_whiten_without_nan() {
        let f = FeatureMatrix::from_rows(4, 10, vec![3.0; 40]).unwrap();
        let w = whiten(&f, FLOOR_SCALE).unwrap();
        assert!(w.values().all_finite());
        assert!(w.values().data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn coloring_with_identity_is_identity() {
        let f = whiten(&correlated(6, 100, 2), FLOOR_SCALE).unwrap();
        let out = color(&f, &Tensor::identity(6), &[0.0; 6]).unwrap();
        assert!(out.values().max_abs_diff(f.values()).unwrap() < 1e-9);
    }

    #[test]
    fn coloring_matches_target_statistics() {
        let white = whiten(&correlated(8, 400, 3), FLOOR_SCALE).unwrap();
        let target = correlated(8, 300, 4);
        let cov_s = covariance(&target).unwrap();
        let out = color(&white, &cov_s, target.channel_means()).unwrap();
        assert!(rel(&covariance(&out).unwrap(), &cov_s) < 1e-3);
        for (a, b) in out.channel_means().iter().zip(target.channel_means()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn whiten_color_round_trip() {
        let f = correlated(8, 200, 5);
        let back = color(&whiten(&f, FLOOR_SCALE).unwrap(), &covariance(&f).unwrap(), f.channel_means()).unwrap();
        assert!(rel(back.values(), f.values()) < 1e-3);
    }

    #[test]
    fn closed_form_on_equal_statistics_is_identity() {
        let f = correlated(8, 200, 6);
        let tm = closed_form_transform(&f, &f).unwrap();
        assert!(tm.t.sub(&Tensor::identity(8)).unwrap().frobenius() < 1e-3);
    }

    #[test]
    fn closed_form_residual() {
        let c = correlated(8, 512, 7);
        let s = correlated(8, 512, 8);
        let tm = closed_form_transform(&c, &s).unwrap();
        let cov_c = covariance(&c).unwrap();
        let cov_s = covariance(&s).unwrap();
        let pushed = tm.t.matmul(&cov_c).unwrap().matmul(&tm.t.transpose().unwrap()).unwrap();
        assert!(rel(&pushed, &cov_s) < 1e-3);
        let out = apply_transform(&tm, &c).unwrap();
        assert!(rel(&covariance(&out).unwrap(), &cov_s) < 1e-3);
    }

    #[test]
    fn closed_form_scaling() {
        let c = correlated(6, 300, 9);
        let s = FeatureMatrix::new(c.values().scale(2.0)).unwrap();
        let tm = closed_form_transform(&c, &s).unwrap();
        assert!(tm.t.sub(&Tensor::identity(6).scale(2.0)).unwrap().frobenius() < 1e-3);
    }

    #[test]
    fn apply_identity_and_zero() {
        let c = correlated(4, 50, 10);
        let id = TransformMatrix::identity(c.channel_means().to_vec());
        let out = apply_transform(&id, &c).unwrap();
        assert!(out.values().max_abs_diff(c.values()).unwrap() < 1e-12);
        let zero = TransformMatrix::new(Tensor::zeros(&[4, 4]), vec![1., 2., 3., 4.]).unwrap();
        let out = apply_transform(&zero, &c).unwrap();
        for (i, row) in out.values().data().chunks(50).enumerate() {
            assert!(row.iter().all(|&v| v == (i + 1) as f64));
        }
        assert!(apply_transform(&zero, &correlated(3, 10, 1)).is_err());
    }

    #[test]
    fn apply_transform_is_affine_in_centered_content() {
        let a = correlated(5, 40, 11);
        let b = correlated(5, 40, 12);
        let tm = closed_form_transform(&a, &b).unwrap();
        let alpha = 0.3;
        let mix = FeatureMatrix::new(
            a.values().scale(alpha).add(&b.values().scale(1.0 - alpha)).unwrap(),
        )
        .unwrap();
        let lhs = apply_transform(&tm, &mix).unwrap();
        let ya = apply_transform(&tm, &a).unwrap();
        let yb = apply_transform(&tm, &b).unwrap();
        let rhs = ya.values().scale(alpha).add(&yb.values().scale(1.0 - alpha)).unwrap();
        assert!(lhs.values().max_abs_diff(&rhs).unwrap() < 1e-9);
    }

    #[test]
    fn zero_nets_give_zero_transform() {
        let net = TransformNetParams::zeros(4, 8);
        let c = correlated(4, 30, 13);
        let s = correlated(4, 30, 14);
        let tm = learned_transform(&net, &c, &s).unwrap();
        assert!(tm.t.data().iter().all(|&v| v == 0.0));
        let out = apply_transform(&tm, &c).unwrap();
        for (row, m) in out.values().data().chunks(30).zip(s.channel_means()) {
            assert!(row.iter().all(|v| v == m));
        }
        assert!(learned_transform(&net, &correlated(5, 30, 1), &s).is_err());
    }

    #[test]
    fn initialized_nets_start_near_identity() {
        let net = TransformNetParams::init(4, 16, 3);
        let c = correlated(4, 30, 15);
        let s = correlated(4, 30, 16);
        let a = learned_transform(&net, &c, &s).unwrap();
        assert_eq!(a, learned_transform(&net, &c, &s).unwrap());
        assert!(a.t.sub(&Tensor::identity(4)).unwrap().frobenius() < 0.5);
    }

    #[test]
    fn compression_shapes_and_identity() {
        let id = CompressionParams::identity(8);
        let x = Tensor::from_fn(&[8, 3, 3], |i| i as f64);
        assert_eq!(id.compress(&x).unwrap(), x);
        let samples = [correlated(64, 256, 17)];
        let p = CompressionParams::from_principal_axes(&samples, 32).unwrap();
        let f = Tensor::zeros(&[64, 16, 16]);
        let r = p.compress(&f).unwrap();
        assert_eq!(r.shape(), &[32, 16, 16]);
        assert_eq!(p.decompress(&r).unwrap().shape(), &[64, 16, 16]);
        assert!(p.compress(&Tensor::zeros(&[32, 4, 4])).is_err());
    }

    #[test]
    fn compression_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let w = Tensor::from_fn(&[3, 5], |_| rng.random_range(-1.0..1.0));
        let x = Tensor::from_fn(&[5, 2, 3], |_| rng.random_range(-1.0..1.0));
        let probe = Tensor::from_fn(&[3, 2, 3], |_| rng.random_range(-1.0..1.0));
        let loss = |w: &Tensor, x: &Tensor| {
            let y = pointwise(w, x).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (dw, dx) = pointwise_backward(&w, &x, &probe).unwrap();
        let h = 1e-3;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[i] += h;
            let mut wm = w.clone();
            wm.data_mut()[i] -= h;
            let fd = (loss(&wp, &x) - loss(&wm, &x)) / (2.0 * h);
            assert!((fd - dw.data()[i]).abs() <= 1e-3 * fd.abs().max(1e-8));
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&w, &xp) - loss(&w, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() <= 1e-3 * fd.abs().max(1e-8));
        }
    }

    #[test]
    fn transform_net_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut net = TransformNetParams::init(3, 6, 5);
        for t in net.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let cond: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cov = Tensor::from_fn(&[3, 3], |_| rng.random_range(-1.0..1.0));
        let probe = Tensor::from_fn(&[3, 3], |_| rng.random_range(-1.0..1.0));
        let loss = |net: &TransformNetParams, cond: &[f64], cov: &Tensor| {
            let (t, _) = net.forward(cond, cov).unwrap();
            t.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = net.forward(&cond, &cov).unwrap();
        let (g, dcond, dcov) = net.backward(&cache, &probe).unwrap();
        let h = 1e-6;
        for i in 0..9 {
            let mut cp = cond.clone();
            cp[i] += h;
            let mut cm = cond.clone();
            cm[i] -= h;
            let fd = (loss(&net, &cp, &cov) - loss(&net, &cm, &cov)) / (2.0 * h);
            assert!((fd - dcond[i]).abs() < 1e-6);
            let mut vp = cov.clone();
            vp.data_mut()[i] += h;
            let mut vm = cov.clone();
            vm.data_mut()[i] -= h;
            let fd = (loss(&net, &cond, &vp) - loss(&net, &cond, &vm)) / (2.0 * h);
            assert!((fd - dcov.data()[i]).abs() < 1e-6);
        }
        let grads: Vec<f64> = g.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let mut idx = 0;
        for ti in 0..net.named().len() {
            let len = net.named()[ti].1.len();
            for j in (0..len).step_by(7) {
                let mut np = net.clone();
                np.tensors_mut()[ti].data_mut()[j] += h;
                let mut nm = net.clone();
                nm.tensors_mut()[ti].data_mut()[j] -= h;
                let fd = (loss(&np, &cond, &cov) - loss(&nm, &cond, &cov)) / (2.0 * h);
                assert!((fd - grads[idx + j]).abs() < 1e-6);
            }
            idx += len;
        }
    }
}
