//! Window-based stereo matching costs over left-to-right disparity hypotheses.
//!
//! All four matchers share the same conventions:
//! - disparity `d` pairs left pixel `(x, y)` with right pixel `(x - d, y)`;
//!   hypotheses with `x - d < 0` are flagged invalid, never given sentinel
//!   costs,
//! - windows are square, `(2r+1) x (2r+1)`, with replicate (clamp-to-edge)
//!   padding at image borders,
//! - lower cost means a better match; NCC is mapped to `1 - ncc` so its range
//!   is [0, 2] like the difference-based costs are nonnegative.
//!
//! The implementations use incremental box sums and summed-area tables and are
//! checked against naive per-window references in the integration tests.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imagio::GrayImage;

/// Per-matcher window radii and the NCC variance guard.
#[derive(Debug, Clone)]
pub struct MatcherConfig {
    /// NCC window radius (default 1, a 3x3 window).
    pub ncc_radius: usize,
    /// ZSAD window radius (default 2, a 5x5 window).
    pub zsad_radius: usize,
    /// CENSUS window radius (default 5, an 11x11 window).
    pub census_radius: usize,
    /// Sobel-SAD window radius (default 2, a 5x5 window).
    pub sobel_radius: usize,
    /// Windows whose intensity variance falls below this are treated as
    /// textureless: their NCC is defined as 0 (cost 1).
    pub variance_epsilon: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            ncc_radius: 1,
            zsad_radius: 2,
            census_radius: 5,
            sobel_radius: 2,
            variance_epsilon: 1e-6,
        }
    }
}

/// One left-to-right matching hypothesis: left pixel `(x_left, y)` against
/// right pixel `(x_left - d, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchingHypothesis {
    pub x_left: usize,
    pub y: usize,
    pub d: usize,
}

impl MatchingHypothesis {
    /// The right-image column this hypothesis refers to, if it is in range.
    #[inline]
    pub fn x_right(&self) -> Option<usize> {
        self.x_left.checked_sub(self.d)
    }

    /// True when the right-image column exists (`x_left - d >= 0`).
    #[inline]
    pub fn in_range(&self) -> bool {
        self.d <= self.x_left
    }
}

/// Matching costs for every `(d, y, x)` hypothesis, row-major `[d][y][x]`.
///
/// `d_max` is the number of disparity hypotheses; slice `d` covers disparity
/// `d` for `d in 0..d_max`. Entries with `x - d < 0` are invalid; their cost
/// slot holds 0 and must be ignored.
#[derive(Debug, Clone)]
pub struct CostVolume {
    pub d_max: usize,
    pub width: usize,
    pub height: usize,
    pub cost: Vec<f64>,
    pub valid: Vec<bool>,
}

impl CostVolume {
    fn new_invalid(d_max: usize, width: usize, height: usize) -> Self {
        CostVolume {
            d_max,
            width,
            height,
            cost: vec![0.0; d_max * width * height],
            valid: vec![false; d_max * width * height],
        }
    }

    #[inline]
    pub fn idx(&self, d: usize, y: usize, x: usize) -> usize {
        (d * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, d: usize, y: usize, x: usize) -> f64 {
        self.cost[self.idx(d, y, x)]
    }

    #[inline]
    pub fn is_valid(&self, d: usize, y: usize, x: usize) -> bool {
        self.valid[self.idx(d, y, x)]
    }
}

fn check_pair(left: &GrayImage, right: &GrayImage, d_max: usize) -> Result<()> {
    if left.width != right.width || left.height != right.height {
        return Err(Error::Size(format!(
            "left {}x{} and right {}x{} differ",
            left.width, left.height, right.width, right.height
        )));
    }
    if d_max == 0 {
        return Err(Error::Config("d_max must be >= 1".to_string()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Box sums and padding
// ---------------------------------------------------------------------------

/// Sum of each `(2*radius+1)^2` window with replicate padding, O(1) per pixel.
pub fn box_sum(plane: &[f64], width: usize, height: usize, radius: usize) -> Vec<f64> {
    assert_eq!(plane.len(), width * height, "plane length must be width*height");
    let r = radius as isize;
    let cx = |i: isize| i.clamp(0, width as isize - 1) as usize;
    let cy = |j: isize| j.clamp(0, height as isize - 1) as usize;

    // Horizontal pass: sliding window along each row.
    let mut horiz = vec![0.0f64; width * height];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        let mut s = 0.0;
        for u in -r..=r {
            s += row[cx(u)];
        }
        horiz[y * width] = s;
        for x in 1..width {
            let xi = x as isize;
            s += row[cx(xi + r)] - row[cx(xi - 1 - r)];
            horiz[y * width + x] = s;
        }
    }

    // Vertical pass: sliding window down the rows, a whole row at a time.
    let mut out = vec![0.0f64; width * height];
    let mut acc = vec![0.0f64; width];
    for v in -r..=r {
        let src = &horiz[cy(v) * width..cy(v) * width + width];
        for x in 0..width {
            acc[x] += src[x];
        }
    }
    out[..width].copy_from_slice(&acc);
    for y in 1..height {
        let yi = y as isize;
        let add = &horiz[cy(yi + r) * width..cy(yi + r) * width + width];
        let sub = &horiz[cy(yi - 1 - r) * width..cy(yi - 1 - r) * width + width];
        for x in 0..width {
            acc[x] += add[x] - sub[x];
        }
        out[y * width..(y + 1) * width].copy_from_slice(&acc);
    }
    out
}

/// A plane expanded by `r` on every side with replicate padding, so window
/// loops can index without clamping.
struct Padded {
    w: usize,
    r: usize,
    data: Vec<f64>,
}

impl Padded {
    fn from_plane(plane: &[f64], width: usize, height: usize, r: usize) -> Self {
        let pw = width + 2 * r;
        let ph = height + 2 * r;
        let mut data = vec![0.0f64; pw * ph];
        for pj in 0..ph {
            let sy = (pj as isize - r as isize).clamp(0, height as isize - 1) as usize;
            for pi in 0..pw {
                let sx = (pi as isize - r as isize).clamp(0, width as isize - 1) as usize;
                data[pj * pw + pi] = plane[sy * width + sx];
            }
        }
        Padded { w: width, r, data }
    }

    fn from_image(img: &GrayImage, r: usize) -> Self {
        let plane: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
        Padded::from_plane(&plane, img.width, img.height, r)
    }

    #[inline]
    fn stride(&self) -> usize {
        self.w + 2 * self.r
    }

    /// Sample at padded coordinates (column `pi`, row `pj`); padded coordinate
    /// `k + r` corresponds to image coordinate `k`.
    #[inline]
    fn at(&self, pi: usize, pj: usize) -> f64 {
        self.data[pj * self.stride() + pi]
    }
}

/// Summed-area table with a zero top row and left column, so any rectangle sum
/// is four lookups.
fn sat_from(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let sw = w + 1;
    let mut sat = vec![0.0f64; sw * (h + 1)];
    for j in 0..h {
        let mut rowsum = 0.0;
        for i in 0..w {
            rowsum += plane[j * w + i];
            sat[(j + 1) * sw + (i + 1)] = sat[j * sw + (i + 1)] + rowsum;
        }
    }
    sat
}

/// Sum of the half-open rectangle `[i0, i1) x [j0, j1)`.
#[inline]
fn sat_window(sat: &[f64], sw: usize, i0: usize, j0: usize, i1: usize, j1: usize) -> f64 {
    sat[j1 * sw + i1] - sat[j0 * sw + i1] - sat[j1 * sw + i0] + sat[j0 * sw + i0]
}

// ---------------------------------------------------------------------------
// NCC
// ---------------------------------------------------------------------------

/// Normalized cross-correlation cost, `1 - ncc`, range [0, 2].
///
/// Windows whose variance falls below `cfg.variance_epsilon` get `ncc = 0`
/// (cost 1) instead of dividing by a vanishing denominator.
pub fn cost_ncc(
    left: &GrayImage,
    right: &GrayImage,
    d_max: usize,
    cfg: &MatcherConfig,
) -> Result<CostVolume> {
    check_pair(left, right, d_max)?;
    let r = cfg.ncc_radius;
    let (w, h) = (left.width, left.height);
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let eps = cfg.variance_epsilon;

    let lf: Vec<f64> = left.data.iter().map(|&v| v as f64).collect();
    let rf: Vec<f64> = right.data.iter().map(|&v| v as f64).collect();
    let lf2: Vec<f64> = lf.iter().map(|v| v * v).collect();
    let rf2: Vec<f64> = rf.iter().map(|v| v * v).collect();
    let s_l = box_sum(&lf, w, h, r);
    let s_ll = box_sum(&lf2, w, h, r);
    let s_r = box_sum(&rf, w, h, r);
    let s_rr = box_sum(&rf2, w, h, r);
    let lp = Padded::from_image(left, r);
    let rp = Padded::from_image(right, r);

    let mut vol = CostVolume::new_invalid(d_max, w, h);
    let plane = w * h;
    vol.cost
        .par_chunks_mut(plane)
        .zip(vol.valid.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(d, (cost, valid))| {
            if d >= w {
                return;
            }
            // Cross-term plane T[j][i] = Lpad[j][i] * Rpad[j][i - d] for
            // padded columns i >= d; a window centered on image pixel (x, y)
            // covers padded rows [y, y+2r] and columns [x, x+2r], which stay
            // inside the plane whenever x >= d.
            let tw = w + 2 * r - d;
            let th = h + 2 * r;
            let mut t = vec![0.0f64; tw * th];
            for j in 0..th {
                for il in 0..tw {
                    t[j * tw + il] = lp.at(il + d, j) * rp.at(il, j);
                }
            }
            let sat = sat_from(&t, tw, th);
            let sw = tw + 1;
            let win = 2 * r + 1;
            for y in 0..h {
                for x in d..w {
                    let sl = s_l[y * w + x];
                    let sll = s_ll[y * w + x];
                    let sr = s_r[y * w + x - d];
                    let srr = s_rr[y * w + x - d];
                    let slr = sat_window(&sat, sw, x - d, y, x - d + win, y + win);
                    let var_l = sll - sl * sl / n;
                    let var_r = srr - sr * sr / n;
                    let ncc = if var_l < eps || var_r < eps {
                        0.0
                    } else {
                        ((slr - sl * sr / n) / (var_l * var_r).sqrt()).clamp(-1.0, 1.0)
                    };
                    cost[y * w + x] = 1.0 - ncc;
                    valid[y * w + x] = true;
                }
            }
        });
    Ok(vol)
}

// ---------------------------------------------------------------------------
// ZSAD
// ---------------------------------------------------------------------------

/// Zero-mean sum of absolute differences:
/// `sum_window |(L - mean_L) - (R - mean_R)|`.
pub fn cost_zsad(
    left: &GrayImage,
    right: &GrayImage,
    d_max: usize,
    cfg: &MatcherConfig,
) -> Result<CostVolume> {
    check_pair(left, right, d_max)?;
    let r = cfg.zsad_radius;
    let (w, h) = (left.width, left.height);
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;

    let lf: Vec<f64> = left.data.iter().map(|&v| v as f64).collect();
    let rf: Vec<f64> = right.data.iter().map(|&v| v as f64).collect();
    let mean_l: Vec<f64> = box_sum(&lf, w, h, r).iter().map(|s| s / n).collect();
    let mean_r: Vec<f64> = box_sum(&rf, w, h, r).iter().map(|s| s / n).collect();
    let lp = Padded::from_image(left, r);
    let rp = Padded::from_image(right, r);

    let mut vol = CostVolume::new_invalid(d_max, w, h);
    let plane = w * h;
    let win = 2 * r + 1;
    vol.cost
        .par_chunks_mut(plane)
        .zip(vol.valid.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(d, (cost, valid))| {
            for y in 0..h {
                for x in d.min(w)..w {
                    // The mean difference depends on the center pixel, so this
                    // window cannot be folded into one box filter; the means
                    // themselves are box sums.
                    let dm = mean_l[y * w + x] - mean_r[y * w + x - d];
                    let mut s = 0.0;
                    for v in 0..win {
                        for u in 0..win {
                            s += (lp.at(x + u, y + v) - rp.at(x - d + u, y + v) - dm).abs();
                        }
                    }
                    cost[y * w + x] = s;
                    valid[y * w + x] = true;
                }
            }
        });
    Ok(vol)
}

// ---------------------------------------------------------------------------
// CENSUS
// ---------------------------------------------------------------------------

/// Census bit strings, one `(2r+1)^2 - 1` bit word sequence per pixel.
struct CensusBits {
    words: usize,
    bits: Vec<u64>,
}

fn census_transform(img: &GrayImage, r: usize) -> CensusBits {
    let (w, h) = (img.width, img.height);
    let n_bits = (2 * r + 1) * (2 * r + 1) - 1;
    let words = n_bits.div_ceil(64);
    let mut bits = vec![0u64; w * h * words];
    let ri = r as isize;
    for y in 0..h {
        for x in 0..w {
            let center = img.get(x, y);
            let base = (y * w + x) * words;
            let mut k = 0usize;
            for v in -ri..=ri {
                let sy = (y as isize + v).clamp(0, h as isize - 1) as usize;
                for u in -ri..=ri {
                    if v == 0 && u == 0 {
                        continue;
                    }
                    let sx = (x as isize + u).clamp(0, w as isize - 1) as usize;
                    // Strict comparison: ties contribute a 0 bit, so flat
                    // regions produce all-zero strings.
                    if img.get(sx, sy) < center {
                        bits[base + k / 64] |= 1u64 << (k % 64);
                    }
                    k += 1;
                }
            }
        }
    }
    CensusBits { words, bits }
}

/// Census cost: Hamming distance between left and right census bit strings.
/// Costs are integers in `[0, (2r+1)^2 - 1]` stored as floats.
pub fn cost_census(
    left: &GrayImage,
    right: &GrayImage,
    d_max: usize,
    cfg: &MatcherConfig,
) -> Result<CostVolume> {
    check_pair(left, right, d_max)?;
    let r = cfg.census_radius;
    let (w, h) = (left.width, left.height);
    let tl = census_transform(left, r);
    let tr = census_transform(right, r);
    let words = tl.words;

    let mut vol = CostVolume::new_invalid(d_max, w, h);
    let plane = w * h;
    vol.cost
        .par_chunks_mut(plane)
        .zip(vol.valid.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(d, (cost, valid))| {
            for y in 0..h {
                for x in d.min(w)..w {
                    let lbase = (y * w + x) * words;
                    let rbase = (y * w + x - d) * words;
                    let mut ham = 0u32;
                    for k in 0..words {
                        ham += (tl.bits[lbase + k] ^ tr.bits[rbase + k]).count_ones();
                    }
                    cost[y * w + x] = ham as f64;
                    valid[y * w + x] = true;
                }
            }
        });
    Ok(vol)
}

// ---------------------------------------------------------------------------
// SOBEL
// ---------------------------------------------------------------------------

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

/// Horizontal Sobel response with replicate padding.
fn sobel_x_plane(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (v, krow) in SOBEL_X.iter().enumerate() {
                let sy = (y as isize + v as isize - 1).clamp(0, h as isize - 1) as usize;
                for (u, &kv) in krow.iter().enumerate() {
                    if kv == 0.0 {
                        continue;
                    }
                    let sx = (x as isize + u as isize - 1).clamp(0, w as isize - 1) as usize;
                    s += kv * img.get(sx, sy) as f64;
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// SAD over horizontal Sobel responses:
/// `sum_window |SobelX(L)(x+u, y+v) - SobelX(R)(x-d+u, y+v)|`.
pub fn cost_sobel(
    left: &GrayImage,
    right: &GrayImage,
    d_max: usize,
    cfg: &MatcherConfig,
) -> Result<CostVolume> {
    check_pair(left, right, d_max)?;
    let r = cfg.sobel_radius;
    let (w, h) = (left.width, left.height);
    let gl = sobel_x_plane(left);
    let gr = sobel_x_plane(right);
    let lp = Padded::from_plane(&gl, w, h, r);
    let rp = Padded::from_plane(&gr, w, h, r);

    let mut vol = CostVolume::new_invalid(d_max, w, h);
    let plane = w * h;
    let win = 2 * r + 1;
    vol.cost
        .par_chunks_mut(plane)
        .zip(vol.valid.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(d, (cost, valid))| {
            if d >= w {
                return;
            }
            // Absolute gradient difference plane over padded columns i >= d,
            // then one summed-area table turns window sums into 4 lookups.
            let tw = w + 2 * r - d;
            let th = h + 2 * r;
            let mut t = vec![0.0f64; tw * th];
            for j in 0..th {
                for il in 0..tw {
                    t[j * tw + il] = (lp.at(il + d, j) - rp.at(il, j)).abs();
                }
            }
            let sat = sat_from(&t, tw, th);
            let sw = tw + 1;
            for y in 0..h {
                for x in d..w {
                    cost[y * w + x] = sat_window(&sat, sw, x - d, y, x - d + win, y + win);
                    valid[y * w + x] = true;
                }
            }
        });
    Ok(vol)
}
