//! Per-pixel likelihood confidences derived from matching costs.
//!
//! Each valid disparity hypothesis gets the Gaussian weight
//! `exp(-(C(d) - C_min)^2 / (2*sigma^2))`, normalized so the weights of the
//! valid hypotheses of a pixel sum to 1. Invalid hypotheses take part in
//! neither the minimum nor the normalizing sum.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matchers::CostVolume;

/// Gaussian bandwidth per matcher, on each matcher's raw cost scale.
#[derive(Debug, Clone)]
pub struct SigmaConfig {
    pub ncc: f64,
    pub zsad: f64,
    pub census: f64,
    pub sobel: f64,
}

impl Default for SigmaConfig {
    fn default() -> Self {
        SigmaConfig { ncc: 0.1, zsad: 100.0, census: 8.0, sobel: 100.0 }
    }
}

/// Likelihoods for every `(d, y, x)` hypothesis, laid out like a `CostVolume`.
#[derive(Debug, Clone)]
pub struct LikelihoodVolume {
    pub d_max: usize,
    pub width: usize,
    pub height: usize,
    /// Row-major `[d][y][x]`; invalid entries hold 0.
    pub lik: Vec<f64>,
    pub valid: Vec<bool>,
}

impl LikelihoodVolume {
    #[inline]
    pub fn idx(&self, d: usize, y: usize, x: usize) -> usize {
        (d * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, d: usize, y: usize, x: usize) -> f64 {
        self.lik[self.idx(d, y, x)]
    }

    #[inline]
    pub fn is_valid(&self, d: usize, y: usize, x: usize) -> bool {
        self.valid[self.idx(d, y, x)]
    }
}

/// Converts a cost volume into normalized per-pixel likelihoods.
///
/// Subtracting the per-pixel minimum cost before exponentiating makes the
/// result invariant to constant cost shifts and keeps the largest weight at
/// exactly `exp(0) = 1`, so the best hypothesis always carries likelihood
/// `1 / (sum of weights) >= 1/d_max`.
pub fn likelihood(costs: &CostVolume, sigma: f64) -> Result<LikelihoodVolume> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be finite and > 0, got {}", sigma)));
    }
    let (d_max, w, h) = (costs.d_max, costs.width, costs.height);
    let plane = w * h;
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);

    // Pass 1: per-pixel minimum cost over valid hypotheses.
    let mut cmin = vec![f64::INFINITY; plane];
    for d in 0..d_max {
        let cost = &costs.cost[d * plane..(d + 1) * plane];
        let valid = &costs.valid[d * plane..(d + 1) * plane];
        cmin.par_iter_mut().zip(cost.par_iter()).zip(valid.par_iter()).for_each(
            |((m, &c), &v)| {
                if v && c < *m {
                    *m = c;
                }
            },
        );
    }

    // Pass 2: unnormalized weights and the per-pixel normalizing sum,
    // accumulated in ascending d order so results are thread-count independent.
    let mut lik = vec![0.0f64; d_max * plane];
    let mut denom = vec![0.0f64; plane];
    for d in 0..d_max {
        let out = &mut lik[d * plane..(d + 1) * plane];
        let cost = &costs.cost[d * plane..(d + 1) * plane];
        let valid = &costs.valid[d * plane..(d + 1) * plane];
        out.par_iter_mut()
            .zip(cost.par_iter())
            .zip(valid.par_iter())
            .zip(cmin.par_iter())
            .for_each(|(((o, &c), &v), &m)| {
                if v {
                    let delta = c - m;
                    *o = (-delta * delta * inv_two_sigma_sq).exp();
                }
            });
        let contrib = &lik[d * plane..(d + 1) * plane];
        denom.par_iter_mut().zip(contrib.par_iter()).for_each(|(s, &wgt)| *s += wgt);
    }

    // Pass 3: normalize. Pixels with no valid hypothesis have denom 0 and stay
    // all-zero, all-invalid.
    for d in 0..d_max {
        let out = &mut lik[d * plane..(d + 1) * plane];
        out.par_iter_mut().zip(denom.par_iter()).for_each(|(o, &s)| {
            if s > 0.0 {
                *o /= s;
            }
        });
    }

    Ok(LikelihoodVolume { d_max, width: w, height: h, lik, valid: costs.valid.clone() })
}
