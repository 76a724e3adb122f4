//! Shared helpers for integration tests: brute-force reference
//! implementations of every optimized kernel, written with no shared code
//! paths so the optimized versions can be checked against them.

#![allow(dead_code)]

use msvol::imagio::GrayImage;
use msvol::matchers::MatcherConfig;
use msvol::toynet::Tensor4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random 8-bit-valued grayscale image.
pub fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let data: Vec<f32> = (0..w * h).map(|_| rng.gen_range(0..256u32) as f32).collect();
    GrayImage::new(w, h, data).unwrap()
}

#[inline]
fn clampi(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Replicate-padded sample of an image.
#[inline]
fn sample(img: &GrayImage, x: isize, y: isize) -> f64 {
    img.data[clampi(y, img.height) * img.width + clampi(x, img.width)] as f64
}

/// Direct windowed sum with replicate padding.
pub fn naive_box_sum(plane: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for v in -(r as isize)..=r as isize {
                for u in -(r as isize)..=r as isize {
                    s += plane[clampi(y as isize + v, h) * w + clampi(x as isize + u, w)];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Window samples of the left image at (x, y) and the right image at
/// (x - d, y), each clamped independently.
fn windows(
    left: &GrayImage,
    right: &GrayImage,
    x: usize,
    y: usize,
    d: usize,
    r: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut lw = Vec::with_capacity((2 * r + 1) * (2 * r + 1));
    let mut rw = Vec::with_capacity(lw.capacity());
    for v in -(r as isize)..=r as isize {
        for u in -(r as isize)..=r as isize {
            lw.push(sample(left, x as isize + u, y as isize + v));
            rw.push(sample(right, x as isize - d as isize + u, y as isize + v));
        }
    }
    (lw, rw)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-hypothesis normalized-cross-correlation cost, brute force.
pub fn naive_ncc(
    left: &GrayImage,
    right: &GrayImage,
    d_max: usize,
    cfg: &MatcherConfig,
) -> (Vec<f64>, Vec<bool>) {
    let (w, h, r) = (left.width, left.height, cfg.ncc_radius);
    let mut cost = vec![0.0; d_max * w * h];
    let mut valid = vec![false; d_max * w * h];
    for d in 0..d_max {
        for y in 0..h {
            for x in 0..w {
                if x < d {
                    continue;
                }
                let (lw, rw) = windows(left, right, x, y, d, r);
                let (ml, mr) = (mean(&lw), mean(&rw));
                let var_l: f64 = lw.iter().map(|v| (v - ml) * (v - ml)).sum();
                let var_r: f64 = rw.iter().map(|v| (v - mr) * (v - mr)).sum();
                let ncc = if var_l < cfg.variance_epsilon || var_r < cfg.variance_epsilon {
                    0.0
                } else {
                    let cov: f64 =
                        lw.iter().zip(rw.iter()).map(|(a, b)| (a - ml) * (b - mr)).sum();
                    (cov / (var_l * var_r).sqrt()).clamp(-1.0, 1.0)
                };
                let i = (d * h + y) * w + x;
                cost[i] = 1.0 - ncc;
                valid[i] = true;
            }
        }
    }
    (cost, valid)
}

/// Zero-mean sum of absolute differences, brute force.
pub fn naive_zsad(
    left: &GrayImage,
    right: &GrayImage,
    d_max: usize,
    cfg: &MatcherConfig,
) -> (Vec<f64>, Vec<bool>) {
    let (w, h, r) = (left.width, left.height, cfg.zsad_radius);
    let mut cost = vec![0.0; d_max * w * h];
    let mut valid = vec![false; d_max * w * h];
    for d in 0..d_max {
        for y in 0..h {
            for x in 0..w {
                if x < d {
                    continue;
                }
                let (lw, rw) = windows(left, right, x, y, d, r);
                let (ml, mr) = (mean(&lw), mean(&rw));
                let s: f64 =
                    lw.iter().zip(rw.iter()).map(|(a, b)| ((a - ml) - (b - mr)).abs()).sum();
                let i = (d * h + y) * w + x;
                cost[i] = s;
                valid[i] = true;
            }
        }
    }
    (cost, valid)
}

/// Hamming distance of census bit strings (strict less-than, center
/// excluded), brute force.
pub fn naive_census(
    left: &GrayImage,
    right: &GrayImage,
    d_max: usize,
    cfg: &MatcherConfig,
) -> (Vec<f64>, Vec<bool>) {
    let (w, h, r) = (left.width, left.height, cfg.census_radius);
    let bits = |img: &GrayImage, x: usize, y: usize| -> Vec<bool> {
        let center = img.data[y * img.width + x] as f64;
        let mut out = Vec::new();
        for v in -(r as isize)..=r as isize {
            for u in -(r as isize)..=r as isize {
                if v == 0 && u == 0 {
                    continue;
                }
                out.push(sample(img, x as isize + u, y as isize + v) < center);
            }
        }
        out
    };
    let mut cost = vec![0.0; d_max * w * h];
    let mut valid = vec![false; d_max * w * h];
    for d in 0..d_max {
        for y in 0..h {
            for x in 0..w {
                if x < d {
                    continue;
                }
                let lb = bits(left, x, y);
                let rb = bits(right, x - d, y);
                let ham = lb.iter().zip(rb.iter()).filter(|(a, b)| a != b).count();
                let i = (d * h + y) * w + x;
                cost[i] = ham as f64;
                valid[i] = true;
            }
        }
    }
    (cost, valid)
}

/// SAD of horizontal Sobel responses, brute force. The gradient plane is
/// computed with replicate padding and then windowed with replicate padding
/// again, matching the two-stage pipeline.
pub fn naive_sobel(
    left: &GrayImage,
    right: &GrayImage,
    d_max: usize,
    cfg: &MatcherConfig,
) -> (Vec<f64>, Vec<bool>) {
    let (w, h, r) = (left.width, left.height, cfg.sobel_radius);
    let grad = |img: &GrayImage| -> Vec<f64> {
        let k = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let mut g = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (j, row) in k.iter().enumerate() {
                    for (i, &kv) in row.iter().enumerate() {
                        s += kv
                            * sample(img, x as isize + i as isize - 1, y as isize + j as isize - 1);
                    }
                }
                g[y * w + x] = s;
            }
        }
        g
    };
    let gl = grad(left);
    let gr = grad(right);
    let at = |g: &[f64], x: isize, y: isize| g[clampi(y, h) * w + clampi(x, w)];
    let mut cost = vec![0.0; d_max * w * h];
    let mut valid = vec![false; d_max * w * h];
    for d in 0..d_max {
        for y in 0..h {
            for x in 0..w {
                if x < d {
                    continue;
                }
                let mut s = 0.0;
                for v in -(r as isize)..=r as isize {
                    for u in -(r as isize)..=r as isize {
                        let a = at(&gl, x as isize + u, y as isize + v);
                        let b = at(&gr, x as isize - d as isize + u, y as isize + v);
                        s += (a - b).abs();
                    }
                }
                let i = (d * h + y) * w + x;
                cost[i] = s;
                valid[i] = true;
            }
        }
    }
    (cost, valid)
}

/// Direct seven-loop 3x3x3 convolution with zero padding 1.
pub fn naive_conv3d(x: &Tensor4, w: &[f64], b: &[f64], c_out: usize, stride: usize) -> Tensor4 {
    let (od, oh, ow) =
        (x.d.div_ceil(stride), x.h.div_ceil(stride), x.w.div_ceil(stride));
    let mut out = Tensor4::zeros(c_out, od, oh, ow);
    for co in 0..c_out {
        for zo in 0..od {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..x.c {
                        for kz in 0..3usize {
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    let zi = (zo * stride + kz) as isize - 1;
                                    let yi = (yo * stride + ky) as isize - 1;
                                    let xi = (xo * stride + kx) as isize - 1;
                                    if zi < 0
                                        || yi < 0
                                        || xi < 0
                                        || zi >= x.d as isize
                                        || yi >= x.h as isize
                                        || xi >= x.w as isize
                                    {
                                        continue;
                                    }
                                    acc += w[(((co * x.c + ci) * 3 + kz) * 3 + ky) * 3 + kx]
                                        * x.at(ci, zi as usize, yi as usize, xi as usize);
                                }
                            }
                        }
                    }
                    let i = ((co * od + zo) * oh + yo) * ow + xo;
                    out.data[i] = acc;
                }
            }
        }
    }
    out
}

/// Direct stride-2 transposed 3x3x3 convolution (padding 1, output padding
/// 1), scatter form: output j = 2i + k - 1 along each axis.
pub fn naive_tconv3d(x: &Tensor4, w: &[f64], b: &[f64], c_out: usize) -> Tensor4 {
    let (od, oh, ow) = (2 * x.d, 2 * x.h, 2 * x.w);
    let mut out = Tensor4::zeros(c_out, od, oh, ow);
    for co in 0..c_out {
        for i in 0..od * oh * ow {
            out.data[co * od * oh * ow + i] = b[co];
        }
        for ci in 0..x.c {
            for zi in 0..x.d {
                for yi in 0..x.h {
                    for xi in 0..x.w {
                        let xv = x.at(ci, zi, yi, xi);
                        for kz in 0..3usize {
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    let jz = (2 * zi + kz) as isize - 1;
                                    let jy = (2 * yi + ky) as isize - 1;
                                    let jx = (2 * xi + kx) as isize - 1;
                                    if jz < 0 || jy < 0 || jx < 0 {
                                        continue;
                                    }
                                    let (jz, jy, jx) = (jz as usize, jy as usize, jx as usize);
                                    if jz >= od || jy >= oh || jx >= ow {
                                        continue;
                                    }
                                    let i = ((co * od + jz) * oh + jy) * ow + jx;
                                    out.data[i] +=
                                        w[(((co * x.c + ci) * 3 + kz) * 3 + ky) * 3 + kx] * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Independent per-pixel recount of the bad-x statistics.
pub fn naive_bad_x(
    pred_disp: &[f32],
    pred_valid: &[bool],
    gt_disp: &[f32],
    gt_valid: &[bool],
    mask: Option<&[bool]>,
    x: f64,
) -> Option<(usize, usize, f64)> {
    let mut n = 0usize;
    let mut bad = 0usize;
    let mut sum = 0.0f64;
    for i in 0..gt_disp.len() {
        if !pred_valid[i] || !gt_valid[i] {
            continue;
        }
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        let e = (pred_disp[i] as f64 - gt_disp[i] as f64).abs();
        n += 1;
        sum += e;
        if e > x {
            bad += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some((n, bad, sum / n as f64))
    }
}

/// Random tensor with entries in [-1, 1).
pub fn random_tensor(c: usize, d: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor4 {
    let mut t = Tensor4::zeros(c, d, h, w);
    for v in t.data.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    t
}

pub fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
