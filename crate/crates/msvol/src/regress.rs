//! Disparity regression over cost volumes, and training losses.
//!
//! `soft_argmin` turns a cost curve into the softmax-weighted average
//! disparity `sum_d d * softmax(-sharpness * C)_d`; `wta` takes the plain
//! argmin. Losses are masked means over pixels valid in both maps.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imagio::DisparityMap;
use crate::volume::MatchingVolume;

/// Softmax sharpness used by the classical (hand-built cost) pipeline.
pub const DEFAULT_SHARPNESS_CLASSICAL: f64 = 20.0;
/// Softmax sharpness used on learned network outputs.
pub const DEFAULT_SHARPNESS_TOYNET: f64 = 1.0;

/// A single-channel regularized cost volume ready for regression,
/// row-major `[d][y][x]`, lower cost = better match.
#[derive(Debug, Clone)]
pub struct RegCostVolume {
    pub d_max: usize,
    pub width: usize,
    pub height: usize,
    pub cost: Vec<f64>,
    pub valid: Vec<bool>,
}

impl RegCostVolume {
    #[inline]
    pub fn idx(&self, d: usize, y: usize, x: usize) -> usize {
        (d * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, d: usize, y: usize, x: usize) -> f64 {
        self.cost[self.idx(d, y, x)]
    }
}

/// Per-stage loss weights for multi-head training.
#[derive(Debug, Clone)]
pub struct LossWeights {
    pub weights: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { weights: [0.5, 0.7, 1.0] }
    }
}

/// Combined classical cost: the unweighted mean of the four normalized cost
/// channels of a matching volume.
pub fn mean_cost_volume(vol: &MatchingVolume) -> RegCostVolume {
    let entries = vol.d_max * vol.height * vol.width;
    let mut cost = vec![0.0f64; entries];
    cost.par_iter_mut().enumerate().for_each(|(i, c)| {
        if vol.valid[i] {
            let base = i * vol.n_features;
            let s = vol.data[base] as f64
                + vol.data[base + 1] as f64
                + vol.data[base + 2] as f64
                + vol.data[base + 3] as f64;
            *c = s / 4.0;
        }
    });
    RegCostVolume {
        d_max: vol.d_max,
        width: vol.width,
        height: vol.height,
        cost,
        valid: vol.valid.clone(),
    }
}

/// Winner-takes-all: per-pixel argmin over valid hypotheses, first index on
/// ties. Pixels with no valid hypothesis come out invalid.
pub fn wta(vol: &RegCostVolume) -> DisparityMap {
    let plane = vol.width * vol.height;
    let mut disp = vec![0.0f32; plane];
    let mut valid = vec![false; plane];
    disp.par_iter_mut().zip(valid.par_iter_mut()).enumerate().for_each(|(p, (o, ov))| {
        let mut best = f64::INFINITY;
        let mut best_d: Option<usize> = None;
        for d in 0..vol.d_max {
            let i = d * plane + p;
            if vol.valid[i] && vol.cost[i] < best {
                best = vol.cost[i];
                best_d = Some(d);
            }
        }
        if let Some(d) = best_d {
            *o = d as f32;
            *ov = true;
        }
    });
    DisparityMap { width: vol.width, height: vol.height, disp, valid }
}

/// Moment sum about the curve center, accumulated in mirrored pairs
/// `(i - c) * (w_i - w_j)`, `j = n-1-i`. Mirrored weights of a symmetric
/// curve are bitwise equal, so each pair cancels to an exact zero; the
/// middle element of an odd-length curve sits on the center and contributes
/// exactly nothing.
#[inline]
fn paired_moment(weights: &[f64], center: f64) -> f64 {
    let n = weights.len();
    let mut num = 0.0;
    for i in 0..n / 2 {
        let j = n - 1 - i;
        num += (i as f64 - center) * (weights[i] - weights[j]);
    }
    num
}

/// Soft argmin of one dense cost curve (index d = position in the slice).
///
/// Weights are computed with the max-exponent subtracted so large sharpness
/// cannot overflow, and the moment sum is taken about the curve center so
/// uniform and symmetric curves regress to the exact center.
pub fn soft_argmin_curve(costs: &[f64], sharpness: f64) -> f64 {
    debug_assert!(!costs.is_empty());
    let center = (costs.len() - 1) as f64 / 2.0;
    let mut m = f64::NEG_INFINITY;
    for &c in costs {
        m = m.max(-sharpness * c);
    }
    let mut weights = Vec::with_capacity(costs.len());
    let mut den = 0.0;
    for &c in costs {
        let w = (-sharpness * c - m).exp();
        weights.push(w);
        den += w;
    }
    center + paired_moment(&weights, center) / den
}

/// Soft argmin of a dense curve together with its gradient
/// `d(dhat)/dC_k = -sharpness * p_k * (k - dhat)`.
pub fn soft_argmin_grad_curve(costs: &[f64], sharpness: f64) -> (f64, Vec<f64>) {
    debug_assert!(!costs.is_empty());
    let center = (costs.len() - 1) as f64 / 2.0;
    let mut m = f64::NEG_INFINITY;
    for &c in costs {
        m = m.max(-sharpness * c);
    }
    let mut weights = Vec::with_capacity(costs.len());
    let mut den = 0.0;
    for &c in costs {
        let w = (-sharpness * c - m).exp();
        weights.push(w);
        den += w;
    }
    let dhat = center + paired_moment(&weights, center) / den;
    let grad = weights
        .iter()
        .enumerate()
        .map(|(k, &w)| -sharpness * (w / den) * (k as f64 - dhat))
        .collect();
    (dhat, grad)
}

/// Softmax-weighted disparity regression over a cost volume.
pub fn soft_argmin(vol: &RegCostVolume, sharpness: f64) -> Result<DisparityMap> {
    if !(sharpness.is_finite() && sharpness > 0.0) {
        return Err(Error::Config(format!(
            "sharpness must be finite and > 0, got {}",
            sharpness
        )));
    }
    let plane = vol.width * vol.height;
    let d_limit = (vol.d_max - 1) as f64;
    let mut disp = vec![0.0f32; plane];
    let mut valid = vec![false; plane];
    disp.par_iter_mut().zip(valid.par_iter_mut()).enumerate().for_each(|(p, (o, ov))| {
        // Gather the valid hypotheses of this pixel.
        let mut lo = None;
        let mut hi = 0usize;
        for d in 0..vol.d_max {
            if vol.valid[d * plane + p] {
                lo.get_or_insert(d);
                hi = d;
            }
        }
        let Some(lo) = lo else { return };
        let center = (lo + hi) as f64 / 2.0;
        let mut m = f64::NEG_INFINITY;
        for d in lo..=hi {
            if vol.valid[d * plane + p] {
                m = m.max(-sharpness * vol.cost[d * plane + p]);
            }
        }
        let w = |d: usize| (-sharpness * vol.cost[d * plane + p] - m).exp();
        let mut den = 0.0;
        for d in lo..=hi {
            if vol.valid[d * plane + p] {
                den += w(d);
            }
        }
        // Moment sum in mirrored pairs about the center (see paired_moment);
        // a symmetric cost curve cancels to an exact zero.
        let mut num = 0.0;
        let mut i = lo;
        let mut j = hi;
        loop {
            while i < j && !vol.valid[i * plane + p] {
                i += 1;
            }
            while j > i && !vol.valid[j * plane + p] {
                j -= 1;
            }
            if i == j {
                if vol.valid[i * plane + p] {
                    let a = i as f64 - center;
                    if a != 0.0 {
                        num += a * w(i);
                    }
                }
                break;
            }
            let a = i as f64 - center;
            let b = j as f64 - center;
            if a == -b {
                num += a * (w(i) - w(j));
            } else {
                num += a * w(i) + b * w(j);
            }
            i += 1;
            j -= 1;
            if i > j {
                break;
            }
        }
        let dhat = (center + num / den).clamp(0.0, d_limit);
        *o = dhat as f32;
        *ov = true;
    });
    Ok(DisparityMap { width: vol.width, height: vol.height, disp, valid })
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Smooth-L1 (Huber with unit transition): `0.5*x^2` for `|x| < 1`,
/// `|x| - 0.5` otherwise.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Derivative of [`smooth_l1`]: `x` inside the quadratic region, `sign(x)`
/// outside.
pub fn smooth_l1_deriv(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

fn masked_mean(
    pred: &DisparityMap,
    gt: &DisparityMap,
    f: impl Fn(f64) -> f64,
) -> Result<f64> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Size(format!(
            "prediction {}x{} and ground truth {}x{} differ",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.disp.len() {
        if pred.valid[i] && gt.valid[i] {
            sum += f(gt.disp[i] as f64 - pred.disp[i] as f64);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Eval("no jointly valid pixels".to_string()));
    }
    Ok(sum / n as f64)
}

/// Mean absolute disparity error over jointly valid pixels.
pub fn loss_l1(pred: &DisparityMap, gt: &DisparityMap) -> Result<f64> {
    masked_mean(pred, gt, f64::abs)
}

/// Mean smooth-L1 disparity error over jointly valid pixels.
pub fn loss_smooth_l1(pred: &DisparityMap, gt: &DisparityMap) -> Result<f64> {
    masked_mean(pred, gt, smooth_l1)
}

/// Weighted sum of per-stage losses.
pub fn total_loss(stage_losses: [f64; 3], w: &LossWeights) -> f64 {
    stage_losses.iter().zip(w.weights.iter()).map(|(l, w)| l * w).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_volume(curves: &[Vec<f64>]) -> RegCostVolume {
        let width = curves.len();
        let d_max = curves[0].len();
        let mut cost = vec![0.0; d_max * width];
        for (x, curve) in curves.iter().enumerate() {
            for (d, &c) in curve.iter().enumerate() {
                cost[d * width + x] = c;
            }
        }
        RegCostVolume { d_max, width, height: 1, cost, valid: vec![true; d_max * width] }
    }

    #[test]
    fn uniform_curve_regresses_to_exact_midpoint() {
        assert_eq!(soft_argmin_curve(&[2.0, 2.0, 2.0, 2.0], 5.0), 1.5);
        let map = soft_argmin(&dense_volume(&[vec![1.0; 8]]), 20.0).unwrap();
        assert_eq!(map.disp[0], 3.5);
    }

    #[test]
    fn symmetric_curve_regresses_to_exact_center() {
        assert_eq!(soft_argmin_curve(&[3.0, 1.0, 3.0], 1.0), 1.0);
        assert_eq!(soft_argmin_curve(&[0.2, 9.0, 0.2], 2.0), 1.0);
        // Even and odd lengths with arbitrary (non-dyadic) values.
        assert_eq!(soft_argmin_curve(&[0.3, 1.7, 1.7, 0.3], 1.3), 1.5);
        assert_eq!(soft_argmin_curve(&[2.9, 0.11, 7.3, 0.11, 2.9], 0.7), 2.0);
        // Random mirrored curves of various lengths.
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 40) as f64 / 256.0 - 30.0
        };
        for n in 2..12usize {
            let mut curve = vec![0.0; n];
            for i in 0..n.div_ceil(2) {
                let v = next();
                curve[i] = v;
                curve[n - 1 - i] = v;
            }
            let dhat = soft_argmin_curve(&curve, 4.0);
            assert_eq!(dhat, (n - 1) as f64 / 2.0, "n={} curve {:?}", n, curve);
        }
    }

    #[test]
    fn volume_soft_argmin_handles_validity_gaps() {
        // Valid hypotheses {0, 1, 4} out of five: the estimate must match a
        // plain softmax over exactly those entries.
        let mut vol = dense_volume(&[vec![1.0, 0.5, -100.0, -100.0, 2.0]]);
        vol.valid[2] = false;
        vol.valid[3] = false;
        let s = 1.25;
        let (mut num, mut den) = (0.0, 0.0);
        for d in [0usize, 1, 4] {
            let w = (-s * vol.cost[d]).exp();
            num += d as f64 * w;
            den += w;
        }
        let map = soft_argmin(&vol, s).unwrap();
        assert!((map.disp[0] as f64 - num / den).abs() < 1e-6);

        // Two valid entries that straddle an invalid middle.
        let mut vol = dense_volume(&[vec![0.0, -100.0, 0.0]]);
        vol.valid[1] = false;
        let map = soft_argmin(&vol, 2.0).unwrap();
        assert_eq!(map.disp[0], 1.0); // symmetric pair -> exact center
    }

    #[test]
    fn dominant_minimum_pins_the_estimate() {
        // Costs [-10, 0, 0] at sharpness 1: weights [1, e^-10, e^-10],
        // dhat = 3*e^-10 / (1 + 2*e^-10) ~ 1.362e-4.
        let dhat = soft_argmin_curve(&[-10.0, 0.0, 0.0], 1.0);
        assert!((dhat - 1.362e-4).abs() < 1e-6, "got {}", dhat);
    }

    #[test]
    fn curve_gradient_matches_finite_differences() {
        let costs = [0.4, 0.1, 0.7, 0.3];
        let s = 2.5;
        let (_, grad) = soft_argmin_grad_curve(&costs, s);
        let h = 1e-6;
        for k in 0..costs.len() {
            let mut up = costs;
            let mut dn = costs;
            up[k] += h;
            dn[k] -= h;
            let fd = (soft_argmin_curve(&up, s) - soft_argmin_curve(&dn, s)) / (2.0 * h);
            assert!((grad[k] - fd).abs() < 1e-8, "k={} analytic {} fd {}", k, grad[k], fd);
        }
    }

    #[test]
    fn shift_invariance_of_soft_argmin() {
        // Dyadic costs and an integer shift keep the additions lossless.
        let base = [0.25, 1.5, 0.0625, 0.75];
        let shifted: Vec<f64> = base.iter().map(|c| c + 11.0).collect();
        assert_eq!(soft_argmin_curve(&base, 3.0), soft_argmin_curve(&shifted, 3.0));
    }

    #[test]
    fn wta_takes_first_index_on_ties() {
        let vol = dense_volume(&[vec![4.0, 1.0, 1.0, 3.0]]);
        let map = wta(&vol);
        assert_eq!(map.disp[0], 1.0);
        assert!(map.valid[0]);
    }

    #[test]
    fn wta_respects_validity_and_marks_empty_pixels_invalid() {
        let mut vol = dense_volume(&[vec![4.0, 1.0, 2.0]]);
        vol.valid[1] = false; // knock out the minimum at d=1
        let map = wta(&vol);
        assert_eq!(map.disp[0], 2.0);

        let mut empty = dense_volume(&[vec![1.0, 2.0]]);
        empty.valid.fill(false);
        let map = wta(&empty);
        assert!(!map.valid[0]);
    }

    #[test]
    fn high_sharpness_soft_argmin_approaches_wta() {
        // Costs on a 0.01 grid: any unique minimum is separated by >= 0.01,
        // which sharpness 1e4 turns into a weight ratio of e^-100.
        let mut state = 123456789u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) % 101) as f64 * 0.01
        };
        for _ in 0..100 {
            let curve: Vec<f64> = (0..7).map(|_| next()).collect();
            let vol = dense_volume(&[curve.clone()]);
            let hard = wta(&vol);
            let min = curve.iter().cloned().fold(f64::INFINITY, f64::min);
            if curve.iter().filter(|&&c| c == min).count() > 1 {
                continue; // tied minima: WTA picks by convention, skip
            }
            let soft = soft_argmin(&vol, 1e4).unwrap();
            assert!(
                (soft.disp[0] - hard.disp[0]).abs() < 0.01,
                "soft {} vs wta {}",
                soft.disp[0],
                hard.disp[0]
            );
        }
    }

    #[test]
    fn nonpositive_sharpness_is_rejected() {
        let vol = dense_volume(&[vec![1.0, 2.0]]);
        assert!(matches!(soft_argmin(&vol, 0.0), Err(Error::Config(_))));
        assert!(matches!(soft_argmin(&vol, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn smooth_l1_known_values_and_continuity() {
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        let eps = 1e-9;
        assert!((smooth_l1(1.0 + eps) - smooth_l1(1.0 - eps)).abs() < 1e-8);
        assert_eq!(smooth_l1_deriv(0.5), 0.5);
        assert_eq!(smooth_l1_deriv(3.0), 1.0);
        assert_eq!(smooth_l1_deriv(-3.0), -1.0);
    }

    #[test]
    fn losses_are_masked_means() {
        let pred = DisparityMap::new(
            3,
            1,
            vec![1.0, 5.0, 2.0],
            vec![true, true, false],
        )
        .unwrap();
        let gt = DisparityMap::new(
            3,
            1,
            vec![2.0, 5.0, 9.0],
            vec![true, true, true],
        )
        .unwrap();
        // Jointly valid: pixels 0 and 1, errors [1, 0].
        assert_eq!(loss_l1(&pred, &gt).unwrap(), 0.5);
        assert_eq!(loss_smooth_l1(&pred, &gt).unwrap(), 0.25);
        // Identical maps: zero loss.
        assert_eq!(loss_l1(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn loss_errors_on_disjoint_masks_and_dim_mismatch() {
        let a = DisparityMap::new(2, 1, vec![1.0, 1.0], vec![true, false]).unwrap();
        let b = DisparityMap::new(2, 1, vec![1.0, 1.0], vec![false, true]).unwrap();
        assert!(matches!(loss_l1(&a, &b), Err(Error::Eval(_))));
        let c = DisparityMap::new(3, 1, vec![1.0; 3], vec![true; 3]).unwrap();
        assert!(matches!(loss_l1(&a, &c), Err(Error::Size(_))));
    }

    #[test]
    fn total_loss_weights_stages() {
        let w = LossWeights::default();
        assert!((total_loss([1.0, 1.0, 1.0], &w) - 2.2).abs() < 1e-15);
        assert_eq!(total_loss([0.0, 0.0, 2.0], &w), 2.0);
    }
}
