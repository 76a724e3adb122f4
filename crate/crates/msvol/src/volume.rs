//! Assembly of the 4D matching-space volume and its binary file format.
//!
//! The volume stacks, for every disparity hypothesis, the four matching costs
//! (each min-max normalized to [0, 1] over its valid entries) and the four
//! likelihood confidences, in a fixed feature order. Layout is row-major
//! `[d][y][x][f]` with a shared `[d][y][x]` validity mask.

use rayon::prelude::*;

use std::io::Read;
use std::io::Write as _;
use std::path::Path;

use crate::confidence::{likelihood, SigmaConfig};
use crate::error::{Error, Result};
use crate::imagio::GrayImage;
use crate::matchers::{cost_census, cost_ncc, cost_sobel, cost_zsad, CostVolume, MatcherConfig};

/// Fixed feature order of the assembled volume.
pub const FEATURE_NAMES: [&str; 8] = [
    "ncc_cost",
    "zsad_cost",
    "census_cost",
    "sobel_cost",
    "ncc_lik",
    "zsad_lik",
    "census_lik",
    "sobel_lik",
];

/// The assembled `D x H x W x F` matching-space volume (F = 8).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingVolume {
    /// Number of disparity hypotheses D.
    pub d_max: usize,
    pub width: usize,
    pub height: usize,
    pub n_features: usize,
    /// Row-major `[d][y][x][f]`; invalid entries hold 0.
    pub data: Vec<f32>,
    /// Row-major `[d][y][x]`, shared across features.
    pub valid: Vec<bool>,
    pub feature_names: Vec<String>,
}

impl MatchingVolume {
    #[inline]
    pub fn vidx(&self, d: usize, y: usize, x: usize) -> usize {
        (d * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, d: usize, y: usize, x: usize, f: usize) -> f32 {
        self.data[self.vidx(d, y, x) * self.n_features + f]
    }

    #[inline]
    pub fn is_valid(&self, d: usize, y: usize, x: usize) -> bool {
        self.valid[self.vidx(d, y, x)]
    }
}

/// Raw (pre-normalization) per-channel value ranges, for reporting.
#[derive(Debug, Clone)]
pub struct VolumeStats {
    pub channel_min: [f64; 8],
    pub channel_max: [f64; 8],
}

/// Halves an image with 2x2 mean pooling; odd trailing rows/columns are
/// dropped (floor semantics).
pub fn downsample2(img: &GrayImage) -> Result<GrayImage> {
    let (hw, hh) = (img.width / 2, img.height / 2);
    if hw == 0 || hh == 0 {
        return Err(Error::Size(format!(
            "image {}x{} is too small to halve",
            img.width, img.height
        )));
    }
    let mut data = Vec::with_capacity(hw * hh);
    for y in 0..hh {
        for x in 0..hw {
            let s = img.get(2 * x, 2 * y) as f64
                + img.get(2 * x + 1, 2 * y) as f64
                + img.get(2 * x, 2 * y + 1) as f64
                + img.get(2 * x + 1, 2 * y + 1) as f64;
            data.push((s / 4.0) as f32);
        }
    }
    GrayImage::new(hw, hh, data)
}

/// Builds the 8-feature matching-space volume.
///
/// `d_max` always refers to the full-resolution disparity range; with
/// `half_res` the images are halved with 2x2 mean pooling and the volume gets
/// `ceil(d_max / 2)` hypothesis levels.
pub fn build_matching_volume(
    left: &GrayImage,
    right: &GrayImage,
    d_max: usize,
    matcher: &MatcherConfig,
    sigma: &SigmaConfig,
    half_res: bool,
) -> Result<MatchingVolume> {
    build_matching_volume_with_stats(left, right, d_max, matcher, sigma, half_res)
        .map(|(vol, _)| vol)
}

/// Like [`build_matching_volume`], additionally returning the raw per-channel
/// value ranges seen before normalization.
pub fn build_matching_volume_with_stats(
    left: &GrayImage,
    right: &GrayImage,
    d_max: usize,
    matcher: &MatcherConfig,
    sigma: &SigmaConfig,
    half_res: bool,
) -> Result<(MatchingVolume, VolumeStats)> {
    if left.width != right.width || left.height != right.height {
        return Err(Error::Size(format!(
            "left {}x{} and right {}x{} differ",
            left.width, left.height, right.width, right.height
        )));
    }
    if d_max == 0 {
        return Err(Error::Config("d_max must be >= 1".to_string()));
    }
    let (l, r, d_levels) = if half_res {
        (downsample2(left)?, downsample2(right)?, d_max.div_ceil(2))
    } else {
        (left.clone(), right.clone(), d_max)
    };
    if d_levels > l.width {
        return Err(Error::Size(format!(
            "{} disparity levels exceed image width {}",
            d_levels, l.width
        )));
    }

    let (w, h) = (l.width, l.height);
    let n_features = FEATURE_NAMES.len();
    let plane = w * h;
    let entries = d_levels * plane;
    let mut data = vec![0.0f32; entries * n_features];
    let mut valid: Option<Vec<bool>> = None;
    let mut stats =
        VolumeStats { channel_min: [f64::INFINITY; 8], channel_max: [f64::NEG_INFINITY; 8] };

    type MatcherFn = fn(&GrayImage, &GrayImage, usize, &MatcherConfig) -> Result<CostVolume>;
    let stages: [(MatcherFn, f64); 4] = [
        (cost_ncc, sigma.ncc),
        (cost_zsad, sigma.zsad),
        (cost_census, sigma.census),
        (cost_sobel, sigma.sobel),
    ];

    for (k, (run, sig)) in stages.iter().enumerate() {
        let cost = run(&l, &r, d_levels, matcher)?;
        let lik = likelihood(&cost, *sig)?;

        let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut lmn, mut lmx) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..entries {
            if cost.valid[i] {
                mn = mn.min(cost.cost[i]);
                mx = mx.max(cost.cost[i]);
                lmn = lmn.min(lik.lik[i]);
                lmx = lmx.max(lik.lik[i]);
            }
        }
        stats.channel_min[k] = mn;
        stats.channel_max[k] = mx;
        stats.channel_min[k + 4] = lmn;
        stats.channel_max[k + 4] = lmx;

        // Degenerate channels (all valid costs equal) normalize to all zeros.
        let scale = if mx > mn { 1.0 / (mx - mn) } else { 0.0 };
        data.par_chunks_mut(n_features)
            .zip(cost.cost.par_iter())
            .zip(cost.valid.par_iter())
            .zip(lik.lik.par_iter())
            .for_each(|(((feat, &c), &v), &p)| {
                if v {
                    feat[k] = ((c - mn) * scale) as f32;
                    feat[k + 4] = p as f32;
                }
            });

        match &valid {
            None => valid = Some(cost.valid),
            Some(prev) => debug_assert_eq!(prev, &cost.valid, "matchers must agree on validity"),
        }
    }

    let vol = MatchingVolume {
        d_max: d_levels,
        width: w,
        height: h,
        n_features,
        data,
        valid: valid.expect("at least one matcher ran"),
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    Ok((vol, stats))
}

// ---------------------------------------------------------------------------
// MSV1 binary format
// ---------------------------------------------------------------------------
//
// magic "MSV1"
// u32 LE: D, H, W, F
// F null-terminated feature-name strings
// D*H*W validity bytes (1 = valid, 0 = invalid)
// D*H*W*F little-endian f32 payload in [d][y][x][f] order

const MSV_MAGIC: &[u8; 4] = b"MSV1";

/// Serializes a volume to the MSV1 binary format.
pub fn write_msv(vol: &MatchingVolume, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(32 + vol.valid.len() + vol.data.len() * 4);
    out.extend_from_slice(MSV_MAGIC);
    for dim in [vol.d_max, vol.height, vol.width, vol.n_features] {
        let v = u32::try_from(dim)
            .map_err(|_| Error::Size(format!("dimension {} exceeds u32", dim)))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for name in &vol.feature_names {
        out.extend_from_slice(name.as_bytes());
        out.push(0);
    }
    out.extend(vol.valid.iter().map(|&v| v as u8));
    for v in &vol.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads an MSV1 volume, validating magic, dimensions and exact payload size.
pub fn read_msv(path: &Path) -> Result<MatchingVolume> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_msv(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {}", path.display(), msg)),
        other => other,
    })
}

fn parse_msv(bytes: &[u8]) -> Result<MatchingVolume> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format("truncated volume file".to_string()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 4)? != MSV_MAGIC {
        return Err(Error::Format("bad magic (not an MSV1 file)".to_string()));
    }
    let mut dims = [0usize; 4];
    for dim in dims.iter_mut() {
        let raw = take(&mut pos, 4)?;
        *dim = u32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]) as usize;
    }
    let [d_max, height, width, n_features] = dims;
    if d_max == 0 || height == 0 || width == 0 || n_features == 0 {
        return Err(Error::Format("zero dimension in header".to_string()));
    }

    let mut feature_names = Vec::with_capacity(n_features);
    for _ in 0..n_features {
        let start = pos;
        while pos < bytes.len() && bytes[pos] != 0 {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(Error::Format("unterminated feature name".to_string()));
        }
        let name = String::from_utf8(bytes[start..pos].to_vec())
            .map_err(|_| Error::Format("feature name is not UTF-8".to_string()))?;
        feature_names.push(name);
        pos += 1; // the terminating NUL
    }

    let entries = d_max
        .checked_mul(height)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| Error::Format("dimensions overflow".to_string()))?;
    let valid_bytes = take(&mut pos, entries)?;
    let mut valid = Vec::with_capacity(entries);
    for &b in valid_bytes {
        match b {
            0 => valid.push(false),
            1 => valid.push(true),
            other => {
                return Err(Error::Format(format!("validity byte must be 0 or 1, got {}", other)))
            }
        }
    }

    let payload_len = entries
        .checked_mul(n_features)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("payload size overflows".to_string()))?;
    let payload = take(&mut pos, payload_len)?;
    if pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - pos)));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    Ok(MatchingVolume { d_max, width, height, n_features, data, valid, feature_names })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_pair(w: usize, h: usize) -> (GrayImage, GrayImage) {
        let left = GrayImage::from_fn(w, h, |x, y| ((x * 97 + y * 53 + 11) % 251) as f32);
        let right = GrayImage::from_fn(w, h, |x, y| ((x * 61 + y * 41 + 3) % 249) as f32);
        (left, right)
    }

    #[test]
    fn downsample2_means_2x2_blocks() {
        let img = GrayImage::new(2, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let half = downsample2(&img).unwrap();
        assert_eq!((half.width, half.height), (1, 1));
        assert_eq!(half.get(0, 0), 4.0);
    }

    #[test]
    fn downsample2_floors_odd_dimensions() {
        let img = GrayImage::from_fn(5, 3, |x, y| (x + y) as f32);
        let half = downsample2(&img).unwrap();
        assert_eq!((half.width, half.height), (2, 1));
        assert!(downsample2(&GrayImage::new(1, 4, vec![0.0; 4]).unwrap()).is_err());
    }

    #[test]
    fn half_res_halves_dims_and_ceils_levels() {
        let (l, r) = noise_pair(16, 12);
        let vol = build_matching_volume(
            &l,
            &r,
            5,
            &MatcherConfig::default(),
            &SigmaConfig::default(),
            true,
        )
        .unwrap();
        assert_eq!((vol.d_max, vol.height, vol.width, vol.n_features), (3, 6, 8, 8));
    }

    #[test]
    fn self_match_zeroes_cost_channels_at_d0() {
        let (l, _) = noise_pair(14, 10);
        let vol = build_matching_volume(
            &l,
            &l,
            4,
            &MatcherConfig::default(),
            &SigmaConfig::default(),
            false,
        )
        .unwrap();
        // Identical images: every matcher's minimum cost sits at d=0, so the
        // normalized cost channels are ~0 across the d=0 slice.
        for y in 0..vol.height {
            for x in 0..vol.width {
                for f in 0..4 {
                    assert!(vol.at(0, y, x, f).abs() < 1e-6, "f={} at ({},{})", f, x, y);
                }
            }
        }
    }

    #[test]
    fn entries_are_normalized_and_likelihoods_sum_to_one() {
        let (l, r) = noise_pair(12, 9);
        let vol = build_matching_volume(
            &l,
            &r,
            6,
            &MatcherConfig::default(),
            &SigmaConfig::default(),
            false,
        )
        .unwrap();
        for i in 0..vol.valid.len() {
            for f in 0..8 {
                let v = vol.data[i * 8 + f];
                if vol.valid[i] {
                    assert!((0.0..=1.0).contains(&v));
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        for y in 0..vol.height {
            for x in 0..vol.width {
                for f in 4..8 {
                    let sum: f64 = (0..vol.d_max)
                        .filter(|&d| vol.is_valid(d, y, x))
                        .map(|d| vol.at(d, y, x, f) as f64)
                        .sum();
                    assert!((sum - 1.0).abs() < 1e-5, "f={} ({},{}) sum={}", f, x, y, sum);
                }
            }
        }
    }

    #[test]
    fn degenerate_channels_normalize_to_zero() {
        // Constant images: every matcher yields a flat cost channel.
        let l = GrayImage::new(8, 6, vec![50.0; 48]).unwrap();
        let (vol, stats) = build_matching_volume_with_stats(
            &l,
            &l,
            3,
            &MatcherConfig::default(),
            &SigmaConfig::default(),
            false,
        )
        .unwrap();
        for i in 0..vol.valid.len() {
            for f in 0..4 {
                assert_eq!(vol.data[i * 8 + f], 0.0);
            }
        }
        assert_eq!(stats.channel_min[0], stats.channel_max[0]);
    }

    #[test]
    fn stats_report_raw_ranges() {
        let (l, r) = noise_pair(10, 8);
        let (_, stats) = build_matching_volume_with_stats(
            &l,
            &r,
            4,
            &MatcherConfig::default(),
            &SigmaConfig::default(),
            false,
        )
        .unwrap();
        for f in 0..8 {
            assert!(stats.channel_min[f] <= stats.channel_max[f]);
        }
        assert!(stats.channel_max[0] <= 2.0, "raw ncc cost range");
        assert!(stats.channel_max[2] <= 120.0, "raw census cost range");
    }

    #[test]
    fn dmax_wider_than_image_is_an_error() {
        let (l, r) = noise_pair(6, 6);
        let err = build_matching_volume(
            &l,
            &r,
            7,
            &MatcherConfig::default(),
            &SigmaConfig::default(),
            false,
        );
        assert!(matches!(err, Err(Error::Size(_))));
    }

    #[test]
    fn msv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.msv");
        let (l, r) = noise_pair(9, 7);
        let vol = build_matching_volume(
            &l,
            &r,
            3,
            &MatcherConfig::default(),
            &SigmaConfig::default(),
            false,
        )
        .unwrap();
        write_msv(&vol, &path).unwrap();
        let back = read_msv(&path).unwrap();
        assert_eq!(back, vol);
        assert_eq!(back.feature_names, FEATURE_NAMES.to_vec());
    }

    #[test]
    fn msv_rejects_bad_magic_truncation_and_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.msv");
        let (l, r) = noise_pair(6, 5);
        let vol = build_matching_volume(
            &l,
            &r,
            2,
            &MatcherConfig::default(),
            &SigmaConfig::default(),
            false,
        )
        .unwrap();
        write_msv(&vol, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        assert!(matches!(parse_msv(&[]), Err(Error::Format(_))), "empty file");
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(parse_msv(&bad_magic), Err(Error::Format(_))));
        let truncated = &good[..good.len() - 3];
        assert!(matches!(parse_msv(truncated), Err(Error::Format(_))));
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(parse_msv(&trailing), Err(Error::Format(_))));
    }
}
