use proptest::prelude::*;
use stvae_core::imageio::{decode_image, encode_png, Image};
use stvae_core::linalg::{covariance, matrix_power_sym, sym_eigen, FeatureMatrix, FLOOR_SCALE};
use stvae_core::trainer::{l1_loss, style_loss};
use stvae_core::variation::{blend_codes, blend_vectors, kl_divergence, BlendWeights, StyleCode};
use stvae_core::vlt::{apply_transform, closed_form_transform, whiten};
use stvae_core::Tensor;

fn features(c: usize, n: usize) -> impl Strategy<Value = FeatureMatrix> {
    prop::collection::vec(-3.0f64..3.0, c * n).prop_map(move |d| FeatureMatrix::from_rows(c, n, d).unwrap())
}

fn code(l: usize) -> impl Strategy<Value = StyleCode> {
    (prop::collection::vec(-4.0f64..4.0, l), prop::collection::vec(-5.0f64..5.0, l))
        .prop_map(|(mu, lv)| StyleCode::new(mu, lv).unwrap())
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_is_symmetric_psd(f in features(5, 12)) {
        let cov = covariance(&f).unwrap();
        prop_assert!(cov.max_abs_diff(&cov.transpose().unwrap()).unwrap() < 1e-12);
        let e = sym_eigen(&cov, f64::NEG_INFINITY).unwrap();
        let top = e.eigenvalues()[0].max(1.0);
        prop_assert!(e.eigenvalues().iter().all(|&l| l >= -1e-10 * top));
    }

    #[test]
    fn matrix_powers_compose(f in features(4, 40)) {
        let cov = covariance(&f).unwrap();
        let e = sym_eigen(&cov, f64::NEG_INFINITY).unwrap();
        prop_assume!(e.eigenvalues()[3] > 1e-2 * e.eigenvalues()[0]);
        let half = matrix_power_sym(&e, 0.5).unwrap();
        let inv_half = matrix_power_sym(&e, -0.5).unwrap();
        let back = half.matmul(&half).unwrap();
        prop_assert!(back.max_abs_diff(&cov).unwrap() < 1e-9 * (1.0 + cov.frobenius()));
        let ident = inv_half.matmul(&cov).unwrap().matmul(&inv_half).unwrap();
        prop_assert!(ident.max_abs_diff(&Tensor::identity(4)).unwrap() < 1e-8);
    }

    #[test]
    fn whitening_gives_identity_covariance(f in features(4, 64)) {
        let e = sym_eigen(&covariance(&f).unwrap(), f64::NEG_INFINITY).unwrap();
        prop_assume!(e.eigenvalues()[3] > 1e-2 * e.eigenvalues()[0]);
        let w = whiten(&f, FLOOR_SCALE).unwrap();
        let cov = covariance(&w).unwrap();
        prop_assert!(cov.max_abs_diff(&Tensor::identity(4)).unwrap() < 1e-8);
    }

    #[test]
    fn closed_form_matches_style_statistics(c in features(4, 64), s in features(4, 64)) {
        for f in [&c, &s] {
            let e = sym_eigen(&covariance(f).unwrap(), f64::NEG_INFINITY).unwrap();
            prop_assume!(e.eigenvalues()[3] > 1e-2 * e.eigenvalues()[0]);
        }
        let tm = closed_form_transform(&c, &s).unwrap();
        let out = apply_transform(&tm, &c).unwrap();
        let (got, want) = (covariance(&out).unwrap(), covariance(&s).unwrap());
        prop_assert!(got.sub(&want).unwrap().frobenius() < 1e-8 * want.frobenius());
        prop_assert!(close(out.channel_means(), s.channel_means(), 1e-10));
    }

    #[test]
    fn kl_is_nonnegative(c in code(6)) {
        prop_assert!(kl_divergence(&c) >= 0.0);
    }

    #[test]
    fn kl_vanishes_only_at_prior(c in code(3)) {
        let at_prior = c.mu.iter().all(|&m| m == 0.0) && c.log_var.iter().all(|&v| v == 0.0);
        prop_assert_eq!(kl_divergence(&c) == 0.0, at_prior);
    }

    #[test]
    fn normalized_weights_sum_to_one(w in prop::collection::vec(0.0f64..10.0, 1..8)) {
        prop_assume!(w.iter().sum::<f64>() > 1e-9);
        let b = BlendWeights::normalized(w).unwrap();
        prop_assert!((b.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(BlendWeights::strict(b.as_slice().to_vec()).is_ok());
    }

    #[test]
    fn negative_weights_rejected(w in prop::collection::vec(0.0f64..1.0, 1..5), i in 0usize..5, neg in -5.0f64..-1e-9) {
        let mut w = w;
        let i = i % w.len();
        w[i] = neg;
        prop_assert!(BlendWeights::normalized(w.clone()).is_err());
        prop_assert!(BlendWeights::strict(w).is_err());
    }

    #[test]
    fn blend_stays_in_convex_hull(a in code(5), b in code(5), alpha in 0.0f64..1.0) {
        let m = blend_codes(&[a.clone(), b.clone()], &BlendWeights::pair(alpha).unwrap()).unwrap();
        for i in 0..5 {
            let (lo, hi) = (a.mu[i].min(b.mu[i]), a.mu[i].max(b.mu[i]));
            prop_assert!(m.mu[i] >= lo - 1e-12 && m.mu[i] <= hi + 1e-12);
            let (lo, hi) = (a.log_var[i].min(b.log_var[i]), a.log_var[i].max(b.log_var[i]));
            prop_assert!(m.log_var[i] >= lo - 1e-9 && m.log_var[i] <= hi + 1e-9);
        }
    }

    #[test]
    fn blending_is_associative(a in code(4), b in code(4), c in code(4), w in prop::collection::vec(0.05f64..1.0, 3)) {
        let full = blend_codes(&[a.clone(), b.clone(), c.clone()], &BlendWeights::normalized(w.clone()).unwrap()).unwrap();
        let ab = blend_codes(&[a, b], &BlendWeights::normalized(vec![w[0], w[1]]).unwrap()).unwrap();
        let nested = blend_codes(&[ab, c], &BlendWeights::normalized(vec![w[0] + w[1], w[2]]).unwrap()).unwrap();
        prop_assert!(close(&full.mu, &nested.mu, 1e-10));
        prop_assert!(close(&full.z, &nested.z, 1e-10));
        prop_assert!(close(&full.log_var, &nested.log_var, 1e-9));
    }

    #[test]
    fn unit_weight_returns_that_style(vs in prop::collection::vec(prop::collection::vec(-9.0f64..9.0, 3), 2..5), k in 0usize..5) {
        let k = k % vs.len();
        let mut w = vec![0.0; vs.len()];
        w[k] = 1.0;
        prop_assert_eq!(blend_vectors(&vs, &BlendWeights::strict(w).unwrap()).unwrap(), vs[k].clone());
    }

    #[test]
    fn losses_are_nonnegative(a in features(3, 10), b in features(3, 10), l in 1u32..4) {
        prop_assert!(style_loss(&a, &b, l).unwrap().0 >= 0.0);
        prop_assert!(l1_loss(a.values(), b.values()).unwrap().0 >= 0.0);
        prop_assert!(style_loss(&a, &a, l).unwrap().0 < 1e-20);
    }

    #[test]
    fn png_round_trip_is_exact(w in 8usize..20, h in 8usize..20, seed in any::<u64>()) {
        let bytes: Vec<u8> = (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
        let img = Image::from_rgb8(w, h, &bytes).unwrap();
        let back = decode_image(&encode_png(&img).unwrap()).unwrap();
        prop_assert_eq!(back.to_rgb8(), bytes);
    }
}
