//! Procedural image corpora: smooth "scene" content images and periodic
//! texture style images, both seeded.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imageio::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    Content,
    Style,
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn smoothstep(x: f32) -> f32 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Gradient sky over a ground band with a few soft blobs.
pub fn content_image(side: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = color(&mut rng);
    let bottom = color(&mut rng);
    let ground = color(&mut rng);
    let horizon: f32 = rng.random_range(0.5..0.8);
    let blobs: Vec<([f32; 3], f32, f32, f32, f32)> = (0..rng.random_range(2..5))
        .map(|_| {
            (
                color(&mut rng),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.08..0.25),
                rng.random_range(0.6..1.6),
            )
        })
        .collect();
    let ripple: f32 = rng.random_range(0.0..0.06);
    let freq: f32 = rng.random_range(6.0..14.0);
    Image::from_fn(side, side, |x, y| {
        let u = (x as f32 + 0.5) / side as f32;
        let v = (y as f32 + 0.5) / side as f32;
        let mut c = mix(top, bottom, v);
        c = mix(c, ground, smoothstep((v - horizon) * 12.0));
        for &(bc, cx, cy, r, aspect) in &blobs {
            let d = (((u - cx) / r).powi(2) + ((v - cy) / (r * aspect)).powi(2)).sqrt();
            c = mix(c, bc, 1.0 - smoothstep((d - 0.8) * 5.0));
        }
        let t = ripple * (freq * 2.0 * PI * (u + 0.3 * v)).sin();
        [c[0] + t, c[1] + t, c[2] + t].map(|x| x.clamp(0.0, 1.0))
    })
}

/// Stripes, checkers, dots or waves in a random two- or three-color palette.
pub fn style_image(side: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pattern = rng.random_range(0..4u8);
    let a = color(&mut rng);
    let b = color(&mut rng);
    let c = color(&mut rng);
    let period: f32 = rng.random_range(4.0..16.0) / side as f32;
    let angle: f32 = rng.random_range(0.0..PI);
    let (sa, ca) = angle.sin_cos();
    Image::from_fn(side, side, |x, y| {
        let u = x as f32 / side as f32;
        let v = y as f32 / side as f32;
        let s = (u * ca + v * sa) / period;
        let t = (-u * sa + v * ca) / period;
        let px = match pattern {
            0 => mix(a, b, smoothstep(((2.0 * PI * s).sin() + 0.2) * 4.0)),
            1 => {
                let k = (s.floor() as i64 + t.floor() as i64).rem_euclid(2) as f32;
                mix(a, b, k)
            }
            2 => {
                let fx = s - s.floor() - 0.5;
                let fy = t - t.floor() - 0.5;
                mix(mix(a, c, v), b, 1.0 - smoothstep(((fx * fx + fy * fy).sqrt() - 0.25) * 12.0))
            }
            _ => {
                let w = (2.0 * PI * s + 1.5 * (2.0 * PI * t).sin()).sin() * 0.5 + 0.5;
                mix(mix(a, b, w), c, 0.5 * ((2.0 * PI * t * 0.5).cos() * 0.5 + 0.5))
            }
        };
        px.map(|x| x.clamp(0.0, 1.0))
    })
}

/// `count` images; image `i` uses seed `seed + i`.
pub fn generate(kind: CorpusKind, count: usize, side: usize, seed: u64) -> Result<Vec<Image>> {
    (0..count as u64)
        .map(|i| {
            let s = seed.wrapping_add(i);
            match kind {
                CorpusKind::Content => content_image(side, s),
                CorpusKind::Style => style_image(side, s),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct() {
        let a = generate(CorpusKind::Style, 3, 32, 7).unwrap();
        assert_eq!(a, generate(CorpusKind::Style, 3, 32, 7).unwrap());
        assert_ne!(a[0], a[1]);
        let c = generate(CorpusKind::Content, 2, 64, 1).unwrap();
        assert_eq!(c[0].width(), 64);
        assert_ne!(c[0], c[1]);
    }
}
