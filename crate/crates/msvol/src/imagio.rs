//! Image and disparity-map containers plus file I/O.
//!
//! Supported formats:
//! - 8-bit grayscale / RGB PNG and binary PGM (P5) as rectified inputs,
//! - PFM (grayscale `Pf`) disparity maps, bottom-up scanlines, scale sign
//!   selecting endianness,
//! - KITTI-style 16-bit grayscale PNG disparity maps, value = disparity * 256,
//!   stored 0 meaning invalid.

use std::io::Read;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Default RGB -> gray weights (ITU-R BT.601 luma).
pub const DEFAULT_CHANNEL_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Single-channel intensity image, row-major, values in [0, 255].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    /// Builds an image after validating dimensions, finiteness and range.
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Size(format!("degenerate image size {}x{}", width, height)));
        }
        if data.len() != width * height {
            return Err(Error::Size(format!(
                "image data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=255.0).contains(v)) {
            return Err(Error::Format("image values must be finite and in [0, 255]".to_string()));
        }
        Ok(GrayImage { width, height, data })
    }

    /// Builds an image by evaluating `f(x, y)`; values are clamped to [0, 255].
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 255.0));
            }
        }
        GrayImage { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Per-pixel disparity with a validity mask; valid entries are finite and >= 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    pub disp: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DisparityMap {
    pub fn new(width: usize, height: usize, disp: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Size(format!("degenerate map size {}x{}", width, height)));
        }
        if disp.len() != width * height || valid.len() != width * height {
            return Err(Error::Size(format!(
                "disparity buffers ({}, {}) do not match {}x{}",
                disp.len(),
                valid.len(),
                width,
                height
            )));
        }
        for i in 0..disp.len() {
            if valid[i] && !(disp[i].is_finite() && disp[i] >= 0.0) {
                return Err(Error::Format(format!(
                    "valid disparity at index {} is not finite and >= 0: {}",
                    i, disp[i]
                )));
            }
        }
        Ok(DisparityMap { width, height, disp, valid })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.disp[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    /// Nearest-neighbor upsampling by 2 in both axes, with disparity values
    /// doubled to match the new pixel pitch. Validity is replicated.
    pub fn upsample_double(&self) -> DisparityMap {
        let (w2, h2) = (self.width * 2, self.height * 2);
        let mut disp = vec![0.0f32; w2 * h2];
        let mut valid = vec![false; w2 * h2];
        for y in 0..h2 {
            for x in 0..w2 {
                let src = (y / 2) * self.width + x / 2;
                disp[y * w2 + x] = self.disp[src] * 2.0;
                valid[y * w2 + x] = self.valid[src];
            }
        }
        DisparityMap { width: w2, height: h2, disp, valid }
    }
}

/// Loads an 8-bit grayscale or RGB image (PNG or PGM) as grayscale.
///
/// RGB pixels are reduced with `gray = w0*r + w1*g + w2*b`; an alpha channel,
/// when present, is ignored. Anything that is not 8 bits per channel is
/// rejected.
pub fn load_gray(path: &Path, channel_weights: [f64; 3]) -> Result<GrayImage> {
    let dynimg = open_image(path)?;
    let (width, height) = (dynimg.width() as usize, dynimg.height() as usize);
    let [wr, wg, wb] = channel_weights;
    let data: Vec<f32> = match &dynimg {
        image::DynamicImage::ImageLuma8(im) => im.pixels().map(|p| p.0[0] as f32).collect(),
        image::DynamicImage::ImageLumaA8(im) => im.pixels().map(|p| p.0[0] as f32).collect(),
        image::DynamicImage::ImageRgb8(im) => im
            .pixels()
            .map(|p| (wr * p.0[0] as f64 + wg * p.0[1] as f64 + wb * p.0[2] as f64) as f32)
            .collect(),
        image::DynamicImage::ImageRgba8(im) => im
            .pixels()
            .map(|p| (wr * p.0[0] as f64 + wg * p.0[1] as f64 + wb * p.0[2] as f64) as f32)
            .collect(),
        _ => {
            return Err(Error::Format(format!(
                "{}: unsupported bit depth or color type (expected 8-bit gray or RGB)",
                path.display()
            )))
        }
    };
    let data = data.iter().map(|v| v.clamp(0.0, 255.0)).collect();
    GrayImage::new(width, height, data)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {}", path.display(), other)),
    })
}

// ---------------------------------------------------------------------------
// PFM
// ---------------------------------------------------------------------------

/// Reads a grayscale PFM file.
///
/// Header: `Pf`, width, height, scale; a negative scale means little-endian
/// payload. Scanlines are stored bottom-up and are flipped to top-down here.
/// Non-finite or negative samples become invalid pixels.
pub fn read_pfm(path: &Path) -> Result<DisparityMap> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_pfm(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {}", path.display(), msg)),
        other => other,
    })
}

fn parse_pfm(bytes: &[u8]) -> Result<DisparityMap> {
    let mut pos = 0usize;
    let kind = pfm_token(bytes, &mut pos)?;
    match kind.as_str() {
        "Pf" => {}
        "PF" => return Err(Error::Format("color PFM is not supported".to_string())),
        other => return Err(Error::Format(format!("not a PFM header: {:?}", other))),
    }
    let width: usize = pfm_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format("bad PFM width".to_string()))?;
    let height: usize = pfm_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format("bad PFM height".to_string()))?;
    let scale: f64 = pfm_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format("bad PFM scale".to_string()))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format("PFM scale must be finite and nonzero".to_string()));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing whitespace after PFM scale".to_string()));
    }
    pos += 1;
    let little_endian = scale < 0.0;
    let payload = &bytes[pos..];
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("PFM dimensions overflow".to_string()))?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "PFM payload is {} bytes, expected {}",
            payload.len(),
            expected
        )));
    }
    let mut disp = vec![0.0f32; width * height];
    let mut valid = vec![false; width * height];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        // Bottom-up file rows -> top-down memory rows.
        let x = i % width;
        let y_file = i / width;
        let y = height - 1 - y_file;
        let idx = y * width + x;
        if v.is_finite() && v >= 0.0 {
            disp[idx] = v;
            valid[idx] = true;
        }
    }
    DisparityMap::new(width, height, disp, valid)
}

/// Reads one whitespace-delimited ASCII token.
fn pfm_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PFM header".to_string()));
    }
    String::from_utf8(bytes[start..*pos].to_vec())
        .map_err(|_| Error::Format("non-ASCII PFM header".to_string()))
}

/// Writes a grayscale PFM file (little-endian, scale -1.0).
///
/// Invalid pixels are stored as +inf, the conventional missing-value marker.
pub fn write_pfm(map: &DisparityMap, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(32 + map.width * map.height * 4);
    out.extend_from_slice(format!("Pf\n{} {}\n-1.0\n", map.width, map.height).as_bytes());
    for y_file in 0..map.height {
        let y = map.height - 1 - y_file;
        for x in 0..map.width {
            let idx = y * map.width + x;
            let v = if map.valid[idx] { map.disp[idx] } else { f32::INFINITY };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_bytes(path, &out)
}

// ---------------------------------------------------------------------------
// KITTI 16-bit PNG
// ---------------------------------------------------------------------------

/// Reads a KITTI-style disparity PNG: 16-bit grayscale, disparity = stored/256,
/// stored value 0 meaning invalid.
pub fn read_kitti_png(path: &Path) -> Result<DisparityMap> {
    let dynimg = open_image(path)?;
    let im = match dynimg {
        image::DynamicImage::ImageLuma16(im) => im,
        _ => {
            return Err(Error::Format(format!(
                "{}: expected a 16-bit grayscale PNG disparity map",
                path.display()
            )))
        }
    };
    let (width, height) = (im.width() as usize, im.height() as usize);
    let mut disp = vec![0.0f32; width * height];
    let mut valid = vec![false; width * height];
    for (i, p) in im.pixels().enumerate() {
        let stored = p.0[0];
        if stored != 0 {
            disp[i] = stored as f32 / 256.0;
            valid[i] = true;
        }
    }
    DisparityMap::new(width, height, disp, valid)
}

/// Writes a KITTI-style disparity PNG; the stored value is
/// `round(disparity * 256)` clamped to u16, invalid pixels store 0.
///
/// Valid disparities below 1/512 round to the reserved 0 and therefore read
/// back as invalid; that loss is inherent to the encoding.
pub fn write_kitti_png(map: &DisparityMap, path: &Path) -> Result<()> {
    let mut buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::new(map.width as u32, map.height as u32);
    for (i, p) in buf.pixels_mut().enumerate() {
        let stored = if map.valid[i] {
            (map.disp[i] as f64 * 256.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        p.0[0] = stored;
    }
    image::DynamicImage::ImageLuma16(buf)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {}", path.display(), other)),
        })
}

/// Reads a disparity map, dispatching on the file extension:
/// `.pfm` -> PFM, `.png` -> KITTI 16-bit PNG.
pub fn read_disparity_auto(path: &Path) -> Result<DisparityMap> {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(ext) if ext == "pfm" => read_pfm(path),
        Some(ext) if ext == "png" => read_kitti_png(path),
        _ => Err(Error::Format(format!(
            "{}: cannot infer disparity format (expected .pfm or .png)",
            path.display()
        ))),
    }
}

/// Writes a disparity map, dispatching on the file extension like
/// [`read_disparity_auto`].
pub fn write_disparity_auto(map: &DisparityMap, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(ext) if ext == "pfm" => write_pfm(map, path),
        Some(ext) if ext == "png" => write_kitti_png(map, path),
        _ => Err(Error::Format(format!(
            "{}: cannot infer disparity format (expected .pfm or .png)",
            path.display()
        ))),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}
