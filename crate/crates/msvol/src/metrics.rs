//! Benchmark-style disparity error metrics and a synthetic random-dot
//! stereo generator that provides exact ground truth for tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imagio::{DisparityMap, GrayImage};

/// Which pixels an evaluation covered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    All,
    Noc,
}

impl MaskMode {
    pub fn label(&self) -> &'static str {
        match self {
            MaskMode::All => "all",
            MaskMode::Noc => "noc",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    /// Percentage (0..=100) of evaluated pixels with error strictly above
    /// the threshold.
    pub bad_rate: f64,
    /// Mean absolute disparity error over evaluated pixels.
    pub avg_err: f64,
    pub n_evaluated: usize,
    pub threshold: f64,
    pub mask_mode: MaskMode,
}

/// Bad-x error rate: over pixels valid in ground truth AND prediction AND
/// the optional non-occlusion mask, the percentage with `|pred - gt| > x`
/// (strict), plus the mean absolute error.
pub fn bad_x(
    pred: &DisparityMap,
    gt: &DisparityMap,
    x: f64,
    noc_mask: Option<&[bool]>,
) -> Result<EvalResult> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Size(format!(
            "prediction {}x{} and ground truth {}x{} differ",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::Config(format!("threshold must be finite and > 0, got {}", x)));
    }
    let plane = gt.disp.len();
    if let Some(m) = noc_mask {
        if m.len() != plane {
            return Err(Error::Size(format!(
                "mask has {} entries, expected {}",
                m.len(),
                plane
            )));
        }
    }
    let mut n = 0usize;
    let mut bad = 0usize;
    let mut err_sum = 0.0f64;
    for i in 0..plane {
        if !(pred.valid[i] && gt.valid[i]) {
            continue;
        }
        if let Some(m) = noc_mask {
            if !m[i] {
                continue;
            }
        }
        let e = (pred.disp[i] as f64 - gt.disp[i] as f64).abs();
        n += 1;
        err_sum += e;
        if e > x {
            bad += 1;
        }
    }
    if n == 0 {
        return Err(Error::Eval("no pixels to evaluate".to_string()));
    }
    Ok(EvalResult {
        bad_rate: 100.0 * bad as f64 / n as f64,
        avg_err: err_sum / n as f64,
        n_evaluated: n,
        threshold: x,
        mask_mode: if noc_mask.is_some() { MaskMode::Noc } else { MaskMode::All },
    })
}

/// For each right-image column hit by at least one left pixel, the largest
/// disparity (= nearest layer) that lands there; usize::MAX where nothing
/// lands. Index layout matches the images, `[y][x_right]`.
fn winner_disparities(gt: &DisparityMap) -> Vec<usize> {
    let (w, h) = (gt.width, gt.height);
    let mut winner = vec![usize::MAX; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !gt.valid[i] {
                continue;
            }
            let d = gt.disp[i] as usize;
            if d > x {
                continue;
            }
            let t = y * w + (x - d);
            if winner[t] == usize::MAX || d > winner[t] {
                winner[t] = d;
            }
        }
    }
    winner
}

/// Synthetic rectified stereo pair with exact integer ground truth: a binary
/// random-dot texture over a zero-disparity background with three rectangular
/// layers at ascending disparities up to `d_max` (the maximum disparity
/// value). The right image is rendered by shifting each pixel left by its
/// disparity; where several layers land on one pixel the nearest (largest
/// disparity) wins, and never-hit pixels get fresh noise. Ground truth is
/// invalid where the right-image source would fall outside the frame.
pub fn random_dot_pair(
    width: usize,
    height: usize,
    d_max: usize,
    seed: u64,
) -> Result<(GrayImage, GrayImage, DisparityMap)> {
    if width == 0 || height == 0 {
        return Err(Error::Size("image dimensions must be nonzero".to_string()));
    }
    if d_max >= width.div_ceil(4).max(1) {
        return Err(Error::Config(format!(
            "maximum disparity {} too large for width {} (must stay below a quarter)",
            d_max, width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut left_px = vec![0.0f32; width * height];
    for v in left_px.iter_mut() {
        *v = (rng.gen_range(0..2u32) * 255) as f32;
    }

    // Three layers at ascending disparities, later (nearer) layers painted
    // over earlier ones.
    let mut disp = vec![0.0f32; width * height];
    for layer in 0..3usize {
        let d = (d_max * (layer + 1)).div_ceil(3).min(d_max);
        let rw = rng.gen_range(width / 4..=width / 2);
        let rh = rng.gen_range(height / 4..=height / 2);
        let x0 = rng.gen_range(0..=width - rw);
        let y0 = rng.gen_range(0..=height - rh);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                disp[y * width + x] = d as f32;
            }
        }
    }
    let valid: Vec<bool> = disp
        .iter()
        .enumerate()
        .map(|(i, &d)| (i % width) >= d as usize)
        .collect();
    let gt = DisparityMap::new(width, height, disp, valid)?;

    // Render the right view; disoccluded pixels get fresh noise, drawn in
    // row-major order to stay deterministic.
    let winner = winner_disparities(&gt);
    let mut right_px = vec![0.0f32; width * height];
    for y in 0..height {
        for xr in 0..width {
            let t = y * width + xr;
            right_px[t] = if winner[t] == usize::MAX {
                (rng.gen_range(0..2u32) * 255) as f32
            } else {
                left_px[y * width + xr + winner[t]]
            };
        }
    }

    let left = GrayImage::new(width, height, left_px)?;
    let right = GrayImage::new(width, height, right_px)?;
    Ok((left, right, gt))
}

/// Pixels of `gt` that are valid and visible in the right view, i.e. not
/// covered there by a nearer layer.
pub fn non_occluded_mask(gt: &DisparityMap) -> Vec<bool> {
    let winner = winner_disparities(gt);
    let w = gt.width;
    gt.valid
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !v {
                return false;
            }
            let d = gt.disp[i] as usize;
            let x = i % w;
            x >= d && winner[i - d] == d
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: usize, h: usize, disp: Vec<f32>) -> DisparityMap {
        let valid = vec![true; w * h];
        DisparityMap::new(w, h, disp, valid).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let gt = map(4, 2, (0..8).map(|i| i as f32).collect());
        let r = bad_x(&gt, &gt, 3.0, None).unwrap();
        assert_eq!(r.bad_rate, 0.0);
        assert_eq!(r.avg_err, 0.0);
        assert_eq!(r.n_evaluated, 8);
        assert_eq!(r.mask_mode, MaskMode::All);
    }

    #[test]
    fn threshold_straddle_is_strict() {
        let gt = map(2, 1, vec![10.0, 10.0]);
        let pred = map(2, 1, vec![12.9, 13.1]);
        let r = bad_x(&pred, &gt, 3.0, None).unwrap();
        assert_eq!(r.bad_rate, 50.0);
        assert!((r.avg_err - 3.0).abs() < 1e-6);
    }

    #[test]
    fn bad_rate_is_monotone_in_threshold() {
        let gt = map(5, 1, vec![0.0; 5]);
        let pred = map(5, 1, vec![0.5, 1.5, 2.5, 3.5, 4.5]);
        let mut last = 100.0;
        for x in [1.0, 2.0, 3.0, 4.0, 5.0] {
            let r = bad_x(&pred, &gt, x, None).unwrap();
            assert!(r.bad_rate <= last);
            last = r.bad_rate;
        }
        // Just below the max error, at least one pixel must still be bad.
        let r = bad_x(&pred, &gt, 4.4999, None).unwrap();
        assert!(r.bad_rate > 0.0);
    }

    #[test]
    fn masks_and_invalid_pixels_are_excluded() {
        let gt = DisparityMap::new(3, 1, vec![0.0, 0.0, 0.0], vec![true, true, false]).unwrap();
        let pred = map(3, 1, vec![9.0, 0.0, 9.0]);
        let r = bad_x(&pred, &gt, 1.0, None).unwrap();
        assert_eq!(r.n_evaluated, 2);
        assert_eq!(r.bad_rate, 50.0);
        let r = bad_x(&pred, &gt, 1.0, Some(&[false, true, true])).unwrap();
        assert_eq!(r.n_evaluated, 1);
        assert_eq!(r.bad_rate, 0.0);
        assert_eq!(r.mask_mode, MaskMode::Noc);
    }

    #[test]
    fn degenerate_evaluations_error() {
        let gt = DisparityMap::new(2, 1, vec![0.0; 2], vec![false; 2]).unwrap();
        let pred = map(2, 1, vec![0.0; 2]);
        assert!(matches!(bad_x(&pred, &gt, 1.0, None), Err(Error::Eval(_))));
        let small = map(1, 1, vec![0.0]);
        assert!(matches!(bad_x(&small, &pred, 1.0, None), Err(Error::Size(_))));
        assert!(matches!(bad_x(&pred, &pred, 0.0, None), Err(Error::Config(_))));
        assert!(matches!(bad_x(&pred, &pred, 1.0, Some(&[true])), Err(Error::Size(_))));
    }

    #[test]
    fn zero_disparity_pair_is_a_clone() {
        let (l, r, gt) = random_dot_pair(32, 16, 0, 7).unwrap();
        assert_eq!(l.data, r.data);
        assert!(gt.disp.iter().all(|&d| d == 0.0));
        assert!(gt.valid.iter().all(|&v| v));
    }

    #[test]
    fn generator_is_deterministic_and_binary() {
        let a = random_dot_pair(40, 24, 6, 11).unwrap();
        let b = random_dot_pair(40, 24, 6, 11).unwrap();
        assert_eq!(a.0.data, b.0.data);
        assert_eq!(a.1.data, b.1.data);
        assert_eq!(a.2.disp, b.2.disp);
        let c = random_dot_pair(40, 24, 6, 12).unwrap();
        assert!(a.0.data != c.0.data || a.2.disp != c.2.disp);
        assert!(a.0.data.iter().all(|&v| v == 0.0 || v == 255.0));
        assert!(a.1.data.iter().all(|&v| v == 0.0 || v == 255.0));
    }

    #[test]
    fn ground_truth_geometry_is_exact() {
        let (l, r, gt) = random_dot_pair(48, 32, 8, 3).unwrap();
        let noc = non_occluded_mask(&gt);
        let mut checked = 0;
        for y in 0..32 {
            for x in 0..48 {
                let i = y * 48 + x;
                let d = gt.disp[i] as usize;
                // Validity is exactly "source stays in frame".
                assert_eq!(gt.valid[i], x >= d);
                if noc[i] {
                    assert_eq!(r.data[i - d], l.data[i], "at ({}, {}) d={}", x, y, d);
                    checked += 1;
                }
            }
        }
        assert!(checked > 48 * 32 / 2, "only {} non-occluded pixels", checked);
        // Layers above the background must create some occlusions.
        assert!(noc.iter().filter(|&&v| !v).count() > 0);
        assert!(gt.disp.iter().any(|&d| d > 0.0));
    }

    #[test]
    fn oversized_disparity_request_is_rejected() {
        assert!(matches!(random_dot_pair(32, 32, 8, 0), Err(Error::Config(_))));
        assert!(random_dot_pair(33, 32, 8, 0).is_ok());
        assert!(matches!(random_dot_pair(0, 32, 0, 0), Err(Error::Size(_))));
    }
}
