//! Wall-clock timing of the stylization path across resolutions.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{content_image, style_image};
use crate::error::{Error, Result};
use crate::model::{LatentMode, StyleModel};

pub const DEFAULT_SIDES: [usize; 3] = [64, 128, 256];
pub const DEFAULT_RUNS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionTiming {
    pub side: usize,
    pub runs: usize,
    /// First call at this resolution, not counted in the warm statistics.
    pub cold_ms: f64,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub cold_minus_median_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub resolutions: Vec<ResolutionTiming>,
    /// median(256²) / median(128²) when both were measured.
    pub scaling_256_over_128: Option<f64>,
}

/// Nearest-rank percentile of an unsorted sample, `q` in [0, 1].
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1]
}

pub fn median(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Times end-to-end deterministic stylization (both encodes, transform,
/// decode) of synthetic square images at each side length.
pub fn run_bench(model: &StyleModel, sides: &[usize], runs: usize, seed: u64) -> Result<BenchReport> {
    if runs == 0 {
        return Err(Error::InvalidArgument("bench needs at least one run".into()));
    }
    let mut resolutions = Vec::with_capacity(sides.len());
    for &side in sides {
        let content = content_image(side, seed)?;
        let style = style_image(side, seed.wrapping_add(1))?;
        let time_once = || -> Result<f64> {
            let t0 = Instant::now();
            std::hint::black_box(model.stylize(&content, &style, LatentMode::Deterministic)?);
            Ok(t0.elapsed().as_secs_f64() * 1e3)
        };
        let cold_ms = time_once()?;
        let warm = (0..runs).map(|_| time_once()).collect::<Result<Vec<_>>>()?;
        let median_ms = median(&warm);
        resolutions.push(ResolutionTiming {
            side,
            runs,
            cold_ms,
            median_ms,
            p90_ms: percentile(&warm, 0.9),
            cold_minus_median_ms: cold_ms - median_ms,
        });
    }
    let find = |s: usize| resolutions.iter().find(|r| r.side == s).map(|r| r.median_ms);
    let scaling_256_over_128 = match (find(256), find(128)) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    };
    Ok(BenchReport {
        resolutions,
        scaling_256_over_128,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_statistics() {
        let s = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(median(&s), 3.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 10.0]), 2.5);
        assert_eq!(percentile(&s, 0.9), 5.0);
        let twenty: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&twenty, 0.9), 18.0);
        assert_eq!(percentile(&twenty, 0.0), 1.0);
    }
}
