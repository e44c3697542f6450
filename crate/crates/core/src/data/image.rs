//! Image codecs and model-input preprocessing.
//!
//! Binary PPM (P6) is always supported; PNG (8-bit gray/RGB/RGBA, palette
//! expanded) goes through the `png` crate. Preprocessing center-crops the
//! largest square, resizes it bilinearly to the model resolution, scales to
//! `[0, 1]` and standardises with fixed constants.

use std::path::Path;

use super::DataError;
use crate::tensor::Tensor;

pub const INPUT_SIZE: usize = 64;
pub const NORM_MEAN: f32 = 0.5;
pub const NORM_STD: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Codec {
    Ppm,
    Png,
}

impl Codec {
    /// By file extension (`.ppm`, `.png`, case-insensitive).
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "ppm" => Some(Codec::Ppm),
            "png" => Some(Codec::Png),
            _ => None,
        }
    }

    /// By MIME type, ignoring parameters.
    pub fn from_mime(mime: &str) -> Option<Self> {
        match mime.split(';').next()?.trim().to_ascii_lowercase().as_str() {
            "image/x-portable-pixmap" | "image/ppm" => Some(Codec::Ppm),
            "image/png" => Some(Codec::Png),
            _ => None,
        }
    }

    pub fn sniff(bytes: &[u8]) -> Option<Self> {
        if bytes.starts_with(b"P6") {
            Some(Codec::Ppm)
        } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
            Some(Codec::Png)
        } else {
            None
        }
    }
}

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.pixels.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, String> {
    let mut pos = 0;
    let mut token = || -> Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err("not a binary PPM (P6)".into());
    }
    let mut num = |what: &str| -> Result<usize, String> {
        token()?
            .parse::<usize>()
            .map_err(|_| format!("bad {what} in header"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let len = width * height * 3;
    let raster = bytes
        .get(pos..pos + len)
        .ok_or_else(|| format!("truncated raster: need {len} bytes"))?;
    let pixels = if maxval == 255 {
        raster.to_vec()
    } else {
        raster
            .iter()
            .map(|&v| ((v as u32 * 255 + maxval as u32 / 2) / maxval as u32).min(255) as u8)
            .collect()
    };
    Ok(RgbImage {
        width,
        height,
        pixels,
    })
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage, String> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let pixels = match info.color_type {
        png::ColorType::Rgb => data.to_vec(),
        png::ColorType::Rgba => data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => data.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => data.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err("palette image was not expanded".into()),
    };
    Ok(RgbImage {
        width: w,
        height: h,
        pixels,
    })
}

pub fn decode(bytes: &[u8], codec: Codec) -> Result<RgbImage, String> {
    match codec {
        Codec::Ppm => decode_ppm(bytes),
        Codec::Png => decode_png(bytes),
    }
}

/// Center crop to the largest square, then bilinear resize to `size` x
/// `size` (half-pixel centers, edge clamped). A square input already at
/// `size` is returned unchanged.
pub fn crop_resize(img: &RgbImage, size: usize) -> RgbImage {
    let side = img.width.min(img.height);
    let x0 = (img.width - side) / 2;
    let y0 = (img.height - side) / 2;
    let mut out = RgbImage::new(size, size);
    if side == size {
        for y in 0..size {
            for x in 0..size {
                out.put(x, y, img.get(x0 + x, y0 + y));
            }
        }
        return out;
    }
    let scale = side as f32 / size as f32;
    let sample = |o: usize| -> (usize, usize, f32) {
        let s = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f32);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(side - 1);
        (lo, hi, s - lo as f32)
    };
    for y in 0..size {
        let (ya, yb, fy) = sample(y);
        for x in 0..size {
            let (xa, xb, fx) = sample(x);
            let p00 = img.get(x0 + xa, y0 + ya);
            let p01 = img.get(x0 + xb, y0 + ya);
            let p10 = img.get(x0 + xa, y0 + yb);
            let p11 = img.get(x0 + xb, y0 + yb);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f32 * (1.0 - fx) + p01[c] as f32 * fx;
                let bottom = p10[c] as f32 * (1.0 - fx) + p11[c] as f32 * fx;
                px[c] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.put(x, y, px);
        }
    }
    out
}

/// `[3, size, size]` planar tensor, `(v / 255 - 0.5) / 0.25`.
pub fn to_tensor(img: &RgbImage) -> Tensor<f32> {
    let plane = img.width * img.height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (px[c] as f32 / 255.0 - NORM_MEAN) / NORM_STD;
        }
    }
    Tensor::new(vec![3, img.height, img.width], data).expect("planar layout")
}

pub fn preprocess(img: &RgbImage) -> Tensor<f32> {
    to_tensor(&crop_resize(img, INPUT_SIZE))
}

/// Decodes encoded bytes and preprocesses them into a `[3, 64, 64]` tensor.
pub fn preprocess_bytes(bytes: &[u8], codec: Codec) -> Result<Tensor<f32>, String> {
    let img = decode(bytes, codec)?;
    Ok(preprocess(&img))
}

/// Reads, decodes (codec chosen by extension) and preprocesses one file.
pub fn decode_and_preprocess(path: &Path) -> Result<Tensor<f32>, DataError> {
    let decode_err = |reason: String| DataError::Decode {
        path: path.display().to_string(),
        reason,
    };
    let codec = Codec::from_path(path).ok_or_else(|| decode_err("unknown codec".into()))?;
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    preprocess_bytes(&bytes, codec).map_err(decode_err)
}
