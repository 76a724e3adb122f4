//! A miniature trainable 3-D encoder-decoder that regularizes a matching
//! volume into per-disparity costs.
//!
//! Everything is implemented from scratch in f64 with hand-derived
//! backward passes: 3x3x3 convolutions (stride 1 or 2, zero padding 1),
//! stride-2 transposed convolutions that exactly double each spatial axis,
//! max(0,x) nonlinearities, skip additions, and plain gradient descent.
//! Forward and backward parallelize over channels with a fixed per-element
//! summation order, so results are bit-identical for any thread count.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imagio::DisparityMap;
use crate::regress::{
    smooth_l1, smooth_l1_deriv, soft_argmin_grad_curve, LossWeights, RegCostVolume,
    DEFAULT_SHARPNESS_TOYNET,
};
use crate::volume::MatchingVolume;

/// Dense rank-4 activation tensor, row-major `[c][d][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(c: usize, d: usize, h: usize, w: usize) -> Self {
        Tensor4 { c, d, h, w, data: vec![0.0; c * d * h * w] }
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.d * self.h * self.w
    }

    #[inline]
    pub fn idx(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.d + z) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, c: usize, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, z, y, x)]
    }
}

/// Network head arrangement: one hourglass with a single output, or three
/// chained hourglasses each with an intermediate supervision head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Gc,
    Psm,
}

#[derive(Debug, Clone)]
pub struct ToyNetConfig {
    pub in_features: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub variant: Variant,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        ToyNetConfig { in_features: 8, base_channels: 4, levels: 2, variant: Variant::Psm }
    }
}

impl ToyNetConfig {
    /// Channel count entering encoder level `i` (level 0 sees the raw
    /// feature volume; each level doubles from `base_channels`).
    pub fn channels(&self, i: usize) -> usize {
        if i == 0 {
            self.in_features
        } else {
            self.base_channels << (i - 1)
        }
    }

    pub fn n_hourglasses(&self) -> usize {
        match self.variant {
            Variant::Gc => 1,
            Variant::Psm => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_features == 0 || self.base_channels == 0 || self.levels == 0 {
            return Err(Error::Config(format!(
                "in_features, base_channels and levels must all be >= 1, got {}/{}/{}",
                self.in_features, self.base_channels, self.levels
            )));
        }
        Ok(())
    }
}

/// One named parameter tensor with its gradient accumulator. Convolution
/// weights are rank-5 `[c_out][c_in][3][3][3]`, biases rank-1, so shapes are
/// kept as a dims vector rather than a fixed-rank tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

const MSNP_MAGIC: &[u8; 4] = b"MSNP";

impl ParamStore {
    /// Seeded initialization: every parameter is drawn uniformly from
    /// ±sqrt(1/fan_in) with fan_in = c_in * 27, in a fixed creation order,
    /// so a seed fully determines the network.
    pub fn init(cfg: &ToyNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore { params: Vec::new() };
        for (name, dims, fan_in) in layer_shapes(cfg) {
            let bound = (1.0 / fan_in as f64).sqrt();
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            store.params.push(Param { name, dims, grad: vec![0.0; n], data });
        }
        Ok(store)
    }

    /// All-zero parameters (useful as a fixed point: the network then
    /// outputs exactly its biases, i.e. zero).
    pub fn zeroed(cfg: &ToyNetConfig) -> Result<Self> {
        cfg.validate()?;
        let params = layer_shapes(cfg)
            .into_iter()
            .map(|(name, dims, _)| {
                let n: usize = dims.iter().product();
                Param { name, dims, data: vec![0.0; n], grad: vec![0.0; n] }
            })
            .collect();
        Ok(ParamStore { params })
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::Config(format!("missing parameter {:?}", name)))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// One in-place gradient-descent update: `p -= lr * grad`.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in &mut self.params {
            for (v, g) in p.data.iter_mut().zip(p.grad.iter()) {
                *v -= lr * g;
            }
        }
    }

    /// Serialize to the MSNP checkpoint format: magic, parameter count,
    /// then per parameter name, dims and an f64 little-endian payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MSNP_MAGIC);
        let count = u32::try_from(self.params.len())
            .map_err(|_| Error::Size("too many parameters for checkpoint".to_string()))?;
        buf.extend_from_slice(&count.to_le_bytes());
        for p in &self.params {
            let name_len = u32::try_from(p.name.len())
                .map_err(|_| Error::Size(format!("parameter name {:?} too long", p.name)))?;
            buf.extend_from_slice(&name_len.to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            let ndim = u32::try_from(p.dims.len())
                .map_err(|_| Error::Size("parameter rank too large".to_string()))?;
            buf.extend_from_slice(&ndim.to_le_bytes());
            for &dim in &p.dims {
                let dim = u32::try_from(dim)
                    .map_err(|_| Error::Size(format!("dimension {} too large", dim)))?;
                buf.extend_from_slice(&dim.to_le_bytes());
            }
            for &v in &p.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, &buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        Self::parse(&buf)
    }

    fn parse(buf: &[u8]) -> Result<Self> {
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            let end = off
                .checked_add(n)
                .filter(|&e| e <= buf.len())
                .ok_or_else(|| Error::Format("checkpoint truncated".to_string()))?;
            let s = &buf[*off..end];
            *off = end;
            Ok(s)
        };
        let take_u32 = |off: &mut usize| -> Result<u32> {
            let b = take(off, 4)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        if take(&mut off, 4)? != MSNP_MAGIC {
            return Err(Error::Format("bad checkpoint magic, expected MSNP".to_string()));
        }
        let count = take_u32(&mut off)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = take_u32(&mut off)? as usize;
            let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".to_string()))?;
            if params.iter().any(|p: &Param| p.name == name) {
                return Err(Error::Format(format!("duplicate parameter {:?}", name)));
            }
            let ndim = take_u32(&mut off)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(take_u32(&mut off)? as usize);
            }
            let n: usize = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(
                || Error::Format(format!("parameter {:?} dims overflow", name)),
            )?;
            let payload = take(&mut off, n * 8)?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            params.push(Param { name, dims, grad: vec![0.0; n], data });
        }
        if off != buf.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} trailing bytes",
                buf.len() - off
            )));
        }
        Ok(ParamStore { params })
    }
}

/// (name, dims, fan_in) for every parameter, in creation order.
fn layer_shapes(cfg: &ToyNetConfig) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    for k in 0..cfg.n_hourglasses() {
        for i in 0..cfg.levels {
            let (ci, co) = (cfg.channels(i), cfg.channels(i + 1));
            out.push((format!("hg{}.enc{}.w", k, i), vec![co, ci, 3, 3, 3], ci * 27));
            out.push((format!("hg{}.enc{}.b", k, i), vec![co], ci * 27));
        }
        for i in (0..cfg.levels).rev() {
            let (ci, co) = (cfg.channels(i + 1), cfg.channels(i));
            out.push((format!("hg{}.dec{}.w", k, i), vec![co, ci, 3, 3, 3], ci * 27));
            out.push((format!("hg{}.dec{}.b", k, i), vec![co], ci * 27));
        }
        let ci = cfg.channels(0);
        out.push((format!("hg{}.head.w", k), vec![1, ci, 3, 3, 3], ci * 27));
        out.push((format!("hg{}.head.b", k), vec![1], ci * 27));
    }
    out
}

// ---------------------------------------------------------------------------
// Convolution primitives
// ---------------------------------------------------------------------------

#[inline]
fn widx(c_in: usize, co: usize, ci: usize, kz: usize, ky: usize, kx: usize) -> usize {
    (((co * c_in + ci) * 3 + kz) * 3 + ky) * 3 + kx
}

fn check_conv_shapes(x: &Tensor4, w: &[f64], b: &[f64], c_out: usize) -> Result<()> {
    if w.len() != c_out * x.c * 27 {
        return Err(Error::Size(format!(
            "weight length {} does not match {}x{}x3x3x3",
            w.len(),
            c_out,
            x.c
        )));
    }
    if b.len() != c_out {
        return Err(Error::Size(format!("bias length {} != {}", b.len(), c_out)));
    }
    Ok(())
}

/// 3x3x3 cross-correlation with zero padding 1. Output spatial dims are
/// `ceil(in/stride)`; stride must be 1 or 2.
pub fn conv3d_forward(
    x: &Tensor4,
    w: &[f64],
    b: &[f64],
    c_out: usize,
    stride: usize,
) -> Result<Tensor4> {
    if stride != 1 && stride != 2 {
        return Err(Error::Config(format!("stride must be 1 or 2, got {}", stride)));
    }
    check_conv_shapes(x, w, b, c_out)?;
    let (d, h, wd) = (x.d, x.h, x.w);
    let (od, oh, ow) = (d.div_ceil(stride), h.div_ceil(stride), wd.div_ceil(stride));
    let mut out = Tensor4::zeros(c_out, od, oh, ow);
    let oplane = od * oh * ow;
    let xplane = d * h * wd;
    out.data.par_chunks_mut(oplane).enumerate().for_each(|(co, dst)| {
        dst.fill(b[co]);
        for ci in 0..x.c {
            let src = &x.data[ci * xplane..(ci + 1) * xplane];
            for kz in 0..3 {
                let (zlo, zhi) = tap_bounds(d, od, kz, stride);
                for ky in 0..3 {
                    let (ylo, yhi) = tap_bounds(h, oh, ky, stride);
                    for kx in 0..3 {
                        let (xlo, xhi) = tap_bounds(wd, ow, kx, stride);
                        let wv = w[widx(x.c, co, ci, kz, ky, kx)];
                        for zo in zlo..zhi {
                            let zi = zo * stride + kz - 1;
                            for yo in ylo..yhi {
                                let yi = yo * stride + ky - 1;
                                let srow = (zi * h + yi) * wd;
                                let drow = (zo * oh + yo) * ow;
                                for xo in xlo..xhi {
                                    let xi = xo * stride + kx - 1;
                                    dst[drow + xo] += wv * src[srow + xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`, i.e.
/// positions where `o*stride + k - 1` lands inside `[0, n)`.
#[inline]
fn tap_bounds(n: usize, on: usize, k: usize, stride: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    if n + 1 <= k {
        return (0, 0); // degenerate axis shorter than the tap reach
    }
    let hi = ((n - k) / stride + 1).min(on);
    (lo.min(hi), hi)
}

/// Gradients of [`conv3d_forward`] with respect to input, weights and bias,
/// given the gradient of a scalar objective w.r.t. the output.
pub fn conv3d_backward(
    x: &Tensor4,
    w: &[f64],
    c_out: usize,
    stride: usize,
    grad_out: &Tensor4,
) -> Result<(Tensor4, Vec<f64>, Vec<f64>)> {
    if stride != 1 && stride != 2 {
        return Err(Error::Config(format!("stride must be 1 or 2, got {}", stride)));
    }
    check_conv_shapes(x, w, &vec![0.0; c_out], c_out)?;
    let (d, h, wd) = (x.d, x.h, x.w);
    let (od, oh, ow) = (d.div_ceil(stride), h.div_ceil(stride), wd.div_ceil(stride));
    if grad_out.c != c_out || grad_out.d != od || grad_out.h != oh || grad_out.w != ow {
        return Err(Error::Size(format!(
            "output gradient dims {}x{}x{}x{} do not match forward output {}x{}x{}x{}",
            grad_out.c, grad_out.d, grad_out.h, grad_out.w, c_out, od, oh, ow
        )));
    }
    let oplane = od * oh * ow;
    let xplane = d * h * wd;

    let mut grad_b = vec![0.0f64; c_out];
    grad_b.par_iter_mut().enumerate().for_each(|(co, gb)| {
        *gb = grad_out.data[co * oplane..(co + 1) * oplane].iter().sum();
    });

    let mut grad_w = vec![0.0f64; w.len()];
    grad_w.par_chunks_mut(x.c * 27).enumerate().for_each(|(co, gw)| {
        let go = &grad_out.data[co * oplane..(co + 1) * oplane];
        for ci in 0..x.c {
            let src = &x.data[ci * xplane..(ci + 1) * xplane];
            for kz in 0..3 {
                let (zlo, zhi) = tap_bounds(d, od, kz, stride);
                for ky in 0..3 {
                    let (ylo, yhi) = tap_bounds(h, oh, ky, stride);
                    for kx in 0..3 {
                        let (xlo, xhi) = tap_bounds(wd, ow, kx, stride);
                        let mut acc = 0.0;
                        for zo in zlo..zhi {
                            let zi = zo * stride + kz - 1;
                            for yo in ylo..yhi {
                                let yi = yo * stride + ky - 1;
                                let srow = (zi * h + yi) * wd;
                                let grow = (zo * oh + yo) * ow;
                                for xo in xlo..xhi {
                                    let xi = xo * stride + kx - 1;
                                    acc += go[grow + xo] * src[srow + xi];
                                }
                            }
                        }
                        gw[(ci * 3 + kz) * 9 + ky * 3 + kx] = acc;
                    }
                }
            }
        }
    });

    let mut grad_x = Tensor4::zeros(x.c, d, h, wd);
    grad_x.data.par_chunks_mut(xplane).enumerate().for_each(|(ci, gx)| {
        for co in 0..c_out {
            let go = &grad_out.data[co * oplane..(co + 1) * oplane];
            for kz in 0..3 {
                let (zlo, zhi) = tap_bounds(d, od, kz, stride);
                for ky in 0..3 {
                    let (ylo, yhi) = tap_bounds(h, oh, ky, stride);
                    for kx in 0..3 {
                        let (xlo, xhi) = tap_bounds(wd, ow, kx, stride);
                        let wv = w[widx(x.c, co, ci, kz, ky, kx)];
                        for zo in zlo..zhi {
                            let zi = zo * stride + kz - 1;
                            for yo in ylo..yhi {
                                let yi = yo * stride + ky - 1;
                                let xrow = (zi * h + yi) * wd;
                                let grow = (zo * oh + yo) * ow;
                                for xo in xlo..xhi {
                                    let xi = xo * stride + kx - 1;
                                    gx[xrow + xi] += wv * go[grow + xo];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    Ok((grad_x, grad_w, grad_b))
}

/// Stride-2 transposed 3x3x3 convolution with padding 1 and output padding 1:
/// every spatial axis exactly doubles. Output position `j` receives input
/// `i` through kernel offset `k` whenever `j = 2i + k - 1`.
pub fn tconv3d_forward(x: &Tensor4, w: &[f64], b: &[f64], c_out: usize) -> Result<Tensor4> {
    check_conv_shapes(x, w, b, c_out)?;
    let (d, h, wd) = (x.d, x.h, x.w);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
    let mut out = Tensor4::zeros(c_out, od, oh, ow);
    let oplane = od * oh * ow;
    let xplane = d * h * wd;
    out.data.par_chunks_mut(oplane).enumerate().for_each(|(co, dst)| {
        dst.fill(b[co]);
        for ci in 0..x.c {
            let src = &x.data[ci * xplane..(ci + 1) * xplane];
            for kz in 0..3 {
                let zlo = usize::from(kz == 0);
                for ky in 0..3 {
                    let ylo = usize::from(ky == 0);
                    for kx in 0..3 {
                        let xlo = usize::from(kx == 0);
                        let wv = w[widx(x.c, co, ci, kz, ky, kx)];
                        for zi in zlo..d {
                            let jz = 2 * zi + kz - 1;
                            for yi in ylo..h {
                                let jy = 2 * yi + ky - 1;
                                let srow = (zi * h + yi) * wd;
                                let drow = (jz * oh + jy) * ow;
                                for xi in xlo..wd {
                                    let jx = 2 * xi + kx - 1;
                                    dst[drow + jx] += wv * src[srow + xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of [`tconv3d_forward`].
pub fn tconv3d_backward(
    x: &Tensor4,
    w: &[f64],
    c_out: usize,
    grad_out: &Tensor4,
) -> Result<(Tensor4, Vec<f64>, Vec<f64>)> {
    check_conv_shapes(x, w, &vec![0.0; c_out], c_out)?;
    let (d, h, wd) = (x.d, x.h, x.w);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
    if grad_out.c != c_out || grad_out.d != od || grad_out.h != oh || grad_out.w != ow {
        return Err(Error::Size(format!(
            "output gradient dims {}x{}x{}x{} do not match forward output {}x{}x{}x{}",
            grad_out.c, grad_out.d, grad_out.h, grad_out.w, c_out, od, oh, ow
        )));
    }
    let oplane = od * oh * ow;
    let xplane = d * h * wd;

    let mut grad_b = vec![0.0f64; c_out];
    grad_b.par_iter_mut().enumerate().for_each(|(co, gb)| {
        *gb = grad_out.data[co * oplane..(co + 1) * oplane].iter().sum();
    });

    let mut grad_w = vec![0.0f64; w.len()];
    grad_w.par_chunks_mut(x.c * 27).enumerate().for_each(|(co, gw)| {
        let go = &grad_out.data[co * oplane..(co + 1) * oplane];
        for ci in 0..x.c {
            let src = &x.data[ci * xplane..(ci + 1) * xplane];
            for kz in 0..3 {
                let zlo = usize::from(kz == 0);
                for ky in 0..3 {
                    let ylo = usize::from(ky == 0);
                    for kx in 0..3 {
                        let xlo = usize::from(kx == 0);
                        let mut acc = 0.0;
                        for zi in zlo..d {
                            let jz = 2 * zi + kz - 1;
                            for yi in ylo..h {
                                let jy = 2 * yi + ky - 1;
                                let srow = (zi * h + yi) * wd;
                                let grow = (jz * oh + jy) * ow;
                                for xi in xlo..wd {
                                    let jx = 2 * xi + kx - 1;
                                    acc += src[srow + xi] * go[grow + jx];
                                }
                            }
                        }
                        gw[(ci * 3 + kz) * 9 + ky * 3 + kx] = acc;
                    }
                }
            }
        }
    });

    let mut grad_x = Tensor4::zeros(x.c, d, h, wd);
    grad_x.data.par_chunks_mut(xplane).enumerate().for_each(|(ci, gx)| {
        for co in 0..c_out {
            let go = &grad_out.data[co * oplane..(co + 1) * oplane];
            for kz in 0..3 {
                let zlo = usize::from(kz == 0);
                for ky in 0..3 {
                    let ylo = usize::from(ky == 0);
                    for kx in 0..3 {
                        let xlo = usize::from(kx == 0);
                        let wv = w[widx(x.c, co, ci, kz, ky, kx)];
                        for zi in zlo..d {
                            let jz = 2 * zi + kz - 1;
                            for yi in ylo..h {
                                let jy = 2 * yi + ky - 1;
                                let xrow = (zi * h + yi) * wd;
                                let grow = (jz * oh + jy) * ow;
                                for xi in xlo..wd {
                                    let jx = 2 * xi + kx - 1;
                                    gx[xrow + xi] += wv * go[grow + jx];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    Ok((grad_x, grad_w, grad_b))
}

fn relu(t: &Tensor4) -> Tensor4 {
    Tensor4 {
        c: t.c,
        d: t.d,
        h: t.h,
        w: t.w,
        data: t.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

fn add_into(acc: &mut Tensor4, other: &Tensor4) {
    debug_assert_eq!(acc.data.len(), other.data.len());
    for (a, b) in acc.data.iter_mut().zip(other.data.iter()) {
        *a += b;
    }
}

/// Zero `grad` wherever the recorded activation was clamped at zero.
fn relu_backward(grad: &Tensor4, act: &Tensor4) -> Tensor4 {
    Tensor4 {
        c: grad.c,
        d: grad.d,
        h: grad.h,
        w: grad.w,
        data: grad
            .data
            .iter()
            .zip(act.data.iter())
            .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Hourglass network
// ---------------------------------------------------------------------------

struct HgRefs {
    enc: Vec<(usize, usize)>,
    dec: Vec<(usize, usize)>,
    head: (usize, usize),
}

fn layer_refs(store: &ParamStore, cfg: &ToyNetConfig) -> Result<Vec<HgRefs>> {
    (0..cfg.n_hourglasses())
        .map(|k| {
            let enc = (0..cfg.levels)
                .map(|i| {
                    Ok((
                        store.index(&format!("hg{}.enc{}.w", k, i))?,
                        store.index(&format!("hg{}.enc{}.b", k, i))?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let dec = (0..cfg.levels)
                .map(|i| {
                    Ok((
                        store.index(&format!("hg{}.dec{}.w", k, i))?,
                        store.index(&format!("hg{}.dec{}.b", k, i))?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let head = (
                store.index(&format!("hg{}.head.w", k))?,
                store.index(&format!("hg{}.head.b", k))?,
            );
            Ok(HgRefs { enc, dec, head })
        })
        .collect()
}

fn expect_dims(p: &Param, dims: &[usize]) -> Result<()> {
    if p.dims != dims {
        return Err(Error::Size(format!(
            "parameter {:?} has dims {:?}, expected {:?}",
            p.name, p.dims, dims
        )));
    }
    Ok(())
}

/// Activation tape of one hourglass pass, kept for the backward walk.
struct HgTape {
    /// `a[0]` is the hourglass input; `a[i]` the output of encoder level i-1.
    a: Vec<Tensor4>,
    /// max(0, transposed-conv) per decoder level, before the skip addition.
    relu_dec: Vec<Tensor4>,
    /// Decoder outputs after the skip addition; `dec_out[0]` feeds the head
    /// and the next hourglass.
    dec_out: Vec<Tensor4>,
    head_out: Tensor4,
}

fn forward_hg(
    store: &ParamStore,
    cfg: &ToyNetConfig,
    refs: &HgRefs,
    input: Tensor4,
) -> Result<HgTape> {
    let mut a = vec![input];
    for i in 0..cfg.levels {
        let (wi, bi) = refs.enc[i];
        let (ci, co) = (cfg.channels(i), cfg.channels(i + 1));
        expect_dims(&store.params[wi], &[co, ci, 3, 3, 3])?;
        expect_dims(&store.params[bi], &[co])?;
        let pre = conv3d_forward(&a[i], &store.params[wi].data, &store.params[bi].data, co, 2)?;
        a.push(relu(&pre));
    }
    let mut relu_dec = vec![Tensor4::zeros(0, 0, 0, 0); cfg.levels];
    let mut dec_out = vec![Tensor4::zeros(0, 0, 0, 0); cfg.levels];
    let mut x = a[cfg.levels].clone();
    for i in (0..cfg.levels).rev() {
        let (wi, bi) = refs.dec[i];
        let (ci, co) = (cfg.channels(i + 1), cfg.channels(i));
        expect_dims(&store.params[wi], &[co, ci, 3, 3, 3])?;
        expect_dims(&store.params[bi], &[co])?;
        let pre = tconv3d_forward(&x, &store.params[wi].data, &store.params[bi].data, co)?;
        let mut r = relu(&pre);
        relu_dec[i] = r.clone();
        add_into(&mut r, &a[i]);
        dec_out[i] = r.clone();
        x = r;
    }
    let (wi, bi) = refs.head;
    let ci = cfg.channels(0);
    expect_dims(&store.params[wi], &[1, ci, 3, 3, 3])?;
    expect_dims(&store.params[bi], &[1])?;
    let head_out =
        conv3d_forward(&dec_out[0], &store.params[wi].data, &store.params[bi].data, 1, 1)?;
    Ok(HgTape { a, relu_dec, dec_out, head_out })
}

fn volume_to_tensor(vol: &MatchingVolume) -> Tensor4 {
    let (f, d, h, w) = (vol.n_features, vol.d_max, vol.height, vol.width);
    let mut t = Tensor4::zeros(f, d, h, w);
    let spatial = d * h * w;
    t.data.par_chunks_mut(spatial).enumerate().for_each(|(ci, dst)| {
        for (p, v) in dst.iter_mut().enumerate() {
            *v = vol.data[p * f + ci] as f64;
        }
    });
    t
}

fn check_net_input(cfg: &ToyNetConfig, vol: &MatchingVolume) -> Result<()> {
    cfg.validate()?;
    if vol.n_features != cfg.in_features {
        return Err(Error::Size(format!(
            "volume has {} features but the network expects {}",
            vol.n_features, cfg.in_features
        )));
    }
    let div = 1usize << cfg.levels;
    if vol.d_max % div != 0 || vol.height % div != 0 || vol.width % div != 0 {
        return Err(Error::Size(format!(
            "volume dims {}x{}x{} must be divisible by {} for {} downsampling levels",
            vol.d_max, vol.height, vol.width, div, cfg.levels
        )));
    }
    Ok(())
}

fn forward_tapes(
    store: &ParamStore,
    cfg: &ToyNetConfig,
    vol: &MatchingVolume,
) -> Result<Vec<HgTape>> {
    check_net_input(cfg, vol)?;
    let refs = layer_refs(store, cfg)?;
    let mut tapes = Vec::with_capacity(refs.len());
    let mut input = volume_to_tensor(vol);
    for r in &refs {
        let tape = forward_hg(store, cfg, r, input)?;
        input = tape.dec_out[0].clone();
        tapes.push(tape);
    }
    Ok(tapes)
}

fn head_to_volume(head: &Tensor4) -> RegCostVolume {
    RegCostVolume {
        d_max: head.d,
        width: head.w,
        height: head.h,
        cost: head.data.clone(),
        valid: vec![true; head.plane()],
    }
}

/// Run the network on a matching volume. Returns one regularized cost
/// volume per head: a single one for `Gc`, three (in forward order, last is
/// the final output) for `Psm`.
pub fn forward(
    store: &ParamStore,
    cfg: &ToyNetConfig,
    vol: &MatchingVolume,
) -> Result<Vec<RegCostVolume>> {
    let tapes = forward_tapes(store, cfg, vol)?;
    Ok(tapes.iter().map(|t| head_to_volume(&t.head_out)).collect())
}

/// Per-head scalar losses and gradients w.r.t. each head's cost output.
fn head_losses(
    tapes: &[HgTape],
    gt: &DisparityMap,
    cfg: &ToyNetConfig,
    weights: &LossWeights,
) -> Result<(f64, Vec<Tensor4>)> {
    let head0 = &tapes[0].head_out;
    let (dd, hh, ww) = (head0.d, head0.h, head0.w);
    if gt.width != ww || gt.height != hh {
        return Err(Error::Size(format!(
            "ground truth {}x{} does not match volume {}x{}",
            gt.width, gt.height, ww, hh
        )));
    }
    let n = gt.valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::Eval("ground truth has no valid pixels".to_string()));
    }
    let plane = hh * ww;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(tapes.len());
    for (k, tape) in tapes.iter().enumerate() {
        let head = &tape.head_out;
        // The final head always carries weight 1; intermediate heads use
        // their stage weights (only the Psm variant has intermediates).
        let wk = if tapes.len() == 1 { 1.0 } else { weights.weights[k] };
        let mut grad = Tensor4::zeros(1, dd, hh, ww);
        let mut loss = 0.0;
        let mut curve = vec![0.0f64; dd];
        for p in 0..plane {
            if !gt.valid[p] {
                continue;
            }
            for z in 0..dd {
                curve[z] = head.data[z * plane + p];
            }
            let (dhat, dgrad) = soft_argmin_grad_curve(&curve, DEFAULT_SHARPNESS_TOYNET);
            let err = dhat - gt.disp[p] as f64;
            let (l, dl) = match cfg.variant {
                Variant::Gc => (err.abs(), err.signum()),
                Variant::Psm => (smooth_l1(err), smooth_l1_deriv(err)),
            };
            loss += l;
            let scale = wk * dl / n as f64;
            for z in 0..dd {
                grad.data[z * plane + p] = scale * dgrad[z];
            }
        }
        total += wk * loss / n as f64;
        grads.push(grad);
    }
    Ok((total, grads))
}

/// Backward pass over the whole chain; returns per-parameter gradient
/// contributions keyed by parameter index.
fn backward(
    store: &ParamStore,
    cfg: &ToyNetConfig,
    refs: &[HgRefs],
    tapes: &[HgTape],
    head_grads: Vec<Tensor4>,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
    // Gradient flowing into hourglass k's chained output (dec_out[0]).
    let mut g_chain: Option<Tensor4> = None;
    for (k, tape) in tapes.iter().enumerate().rev() {
        let r = &refs[k];
        // Head: head_out = conv1(dec_out[0]).
        let (hw, hb) = r.head;
        let (gx, gw, gb) = conv3d_backward(
            &tape.dec_out[0],
            &store.params[hw].data,
            1,
            1,
            &head_grads[k],
        )?;
        out.push((hw, gw));
        out.push((hb, gb));
        let mut g = gx;
        if let Some(gc) = g_chain.take() {
            add_into(&mut g, &gc);
        }
        // Decoder levels, shallowest first: dec_out[i] = relu_dec[i] + a[i].
        let mut g_skip: Vec<Option<Tensor4>> = vec![None; cfg.levels + 1];
        for i in 0..cfg.levels {
            g_skip[i] = Some(g.clone());
            let g_pre = relu_backward(&g, &tape.relu_dec[i]);
            let dec_in = if i + 1 == cfg.levels { &tape.a[cfg.levels] } else { &tape.dec_out[i + 1] };
            let (wi, bi) = r.dec[i];
            let co = cfg.channels(i);
            let (gx, gw, gb) =
                tconv3d_backward(dec_in, &store.params[wi].data, co, &g_pre)?;
            out.push((wi, gw));
            out.push((bi, gb));
            g = gx;
        }
        g_skip[cfg.levels] = Some(g);
        // Encoder levels, deepest first: a[i+1] = relu(conv(a[i])).
        let mut g_a = g_skip[cfg.levels].take().unwrap();
        for i in (0..cfg.levels).rev() {
            let g_pre = relu_backward(&g_a, &tape.a[i + 1]);
            let (wi, bi) = r.enc[i];
            let co = cfg.channels(i + 1);
            let (gx, gw, gb) =
                conv3d_backward(&tape.a[i], &store.params[wi].data, co, 2, &g_pre)?;
            out.push((wi, gw));
            out.push((bi, gb));
            g_a = gx;
            if let Some(s) = g_skip[i].take() {
                add_into(&mut g_a, &s);
            }
        }
        // g_a is now the gradient w.r.t. this hourglass's input, which is
        // the previous hourglass's chained output.
        if k > 0 {
            g_chain = Some(g_a);
        }
    }
    Ok(out)
}

/// One supervised training step: forward, per-head soft-argmin losses
/// (absolute error for `Gc`, stage-weighted smooth-L1 for `Psm`), full
/// backward pass, and an in-place gradient-descent update. Returns the
/// total loss measured before the update.
pub fn train_step(
    store: &mut ParamStore,
    cfg: &ToyNetConfig,
    vol: &MatchingVolume,
    gt: &DisparityMap,
    lr: f64,
    weights: &LossWeights,
) -> Result<f64> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", lr)));
    }
    check_net_input(cfg, vol)?;
    let refs = layer_refs(store, cfg)?;
    let tapes = forward_tapes(store, cfg, vol)?;
    let (total, head_grads) = head_losses(&tapes, gt, cfg, weights)?;
    let contributions = backward(store, cfg, &refs, &tapes, head_grads)?;
    store.zero_grads();
    for (idx, g) in contributions {
        let dst = &mut store.params[idx].grad;
        debug_assert_eq!(dst.len(), g.len());
        for (d, s) in dst.iter_mut().zip(g.iter()) {
            *d += s;
        }
    }
    store.sgd_step(lr);
    Ok(total)
}
