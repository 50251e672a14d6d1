//! 8-bit sRGB image files and the image ↔ tensor layout conversion.
//!
//! PNG and binary PPM (P6) carry display images. Linear float images are
//! stored as little-endian PFM. Codes pass through untransformed: a byte `v`
//! loads as `v/255` and a value saves as `round_half_up(clamp(v)·255)`.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use iat_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// H×W×3 sRGB image, interleaved R,G,B, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRGB {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageRGB {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "{height}×{width} image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(ImageRGB {
            height,
            width,
            pixels,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels.push(f(y, x, c));
                }
            }
        }
        ImageRGB {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn same_size(&self, other: &ImageRGB) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Copy with every value clamped into [0,1].
    pub fn clamped(&self) -> ImageRGB {
        ImageRGB {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// The `h`×`w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImageRGB> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Input(format!(
                "crop {h}×{w} at ({y0},{x0}) exceeds {}×{}",
                self.height, self.width
            )));
        }
        Ok(ImageRGB::from_fn(h, w, |y, x, c| self.get(y0 + y, x0 + x, c)))
    }

    pub fn flip_horizontal(&self) -> ImageRGB {
        ImageRGB::from_fn(self.height, self.width, |y, x, c| self.get(y, self.width - 1 - x, c))
    }

    pub fn flip_vertical(&self) -> ImageRGB {
        ImageRGB::from_fn(self.height, self.width, |y, x, c| self.get(self.height - 1 - y, x, c))
    }

    /// 8-bit codes with clamping and round-half-up.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        ImageRGB::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

/// `v ↦ floor(clamp(v, 0, 1)·255 + 0.5)`.
pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Png,
    Ppm,
}

fn format_for(path: &Path) -> Result<Format> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => Ok(Format::Png),
        Some("ppm") => Ok(Format::Ppm),
        _ => Err(Error::Input(format!(
            "{}: unsupported image extension (expected .png or .ppm)",
            path.display()
        ))),
    }
}

pub fn is_supported_image(path: &Path) -> bool {
    format_for(path).is_ok()
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRGB> {
    let path = path.as_ref();
    let format = format_for(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Png => decode_png(&bytes),
        Format::Ppm => decode_ppm(&bytes),
    }
    .map_err(|e| match e {
        Error::Decode { offset, msg, .. } => Error::Decode {
            path: path.to_path_buf(),
            offset,
            msg,
        },
        other => other,
    })
}

pub fn save_image(img: &ImageRGB, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format_for(path)? {
        Format::Png => encode_png(img)?,
        Format::Ppm => encode_ppm(img),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn decode_error(offset: Option<u64>, msg: impl Into<String>) -> Error {
    Error::Decode {
        path: Default::default(),
        offset,
        msg: msg.into(),
    }
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageRGB> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| decode_error(None, e.to_string()))?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(decode_error(None, "16-bit PNG is not supported (8-bit only)"));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_error(None, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| decode_error(None, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(decode_error(None, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(decode_error(None, "palette was not expanded")),
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let line = &buf[y * info.line_size..][..w * channels];
        for px in line.chunks_exact(channels) {
            match channels {
                1 | 2 => rgb.extend([px[0]; 3]),
                _ => rgb.extend(&px[..3]),
            }
        }
    }
    ImageRGB::from_bytes(h, w, &rgb)
}

pub fn encode_png(img: &ImageRGB) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Input(format!("png encode: {e}")))?;
        writer
            .write_image_data(&img.to_bytes())
            .map_err(|e| Error::Input(format!("png encode: {e}")))?;
    }
    Ok(out)
}

pub fn encode_ppm(img: &ImageRGB) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

/// Netpbm header tokenizer: whitespace separated, `#` comments to end of line.
struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn token(&mut self) -> Result<(usize, &str)> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(decode_error(Some(self.pos as u64), "unexpected end of header")),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| decode_error(Some(start as u64), "non-ASCII header"))?;
        Ok((start, text))
    }

    fn number(&mut self) -> Result<usize> {
        let (at, text) = self.token()?;
        text.parse()
            .map_err(|_| decode_error(Some(at as u64), format!("expected a number, found {text:?}")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRGB> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    let (_, magic) = cur.token()?;
    if magic != "P6" {
        return Err(decode_error(Some(0), format!("expected P6 magic, found {magic:?}")));
    }
    let width = cur.number()?;
    let height = cur.number()?;
    let maxval_at = cur.pos;
    let maxval = cur.number()?;
    if maxval != 255 {
        return Err(decode_error(
            Some(maxval_at as u64),
            format!("maxval {maxval} unsupported (8-bit, 255 only)"),
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = cur.pos + 1;
    let need = width * height * 3;
    let have = bytes.len().saturating_sub(start);
    if have < need {
        return Err(decode_error(
            Some(bytes.len() as u64),
            format!("raster truncated: {have} of {need} bytes"),
        ));
    }
    ImageRGB::from_bytes(height, width, &bytes[start..start + need])
}

/// Writes an H×W×3 float image as little-endian PFM (rows bottom to top).
pub fn save_pfm(path: impl AsRef<Path>, height: usize, width: usize, data: &[f32]) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(data.len(), height * width * 3, "pfm payload size");
    let mut out = format!("PF\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(data.len() * 4);
    for y in (0..height).rev() {
        for v in &data[y * width * 3..(y + 1) * width * 3] {
            out.extend(v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a colour PFM; returns `(height, width, interleaved RGB top to bottom)`.
pub fn load_pfm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let located = |e: Error| match e {
        Error::Decode { offset, msg, .. } => Error::Decode {
            path: path.to_path_buf(),
            offset,
            msg,
        },
        other => other,
    };
    let mut cur = HeaderCursor { bytes: &bytes, pos: 0 };
    let (_, magic) = cur.token().map_err(located)?;
    if magic != "PF" {
        return Err(located(decode_error(Some(0), "expected colour PFM (PF)")));
    }
    let width = cur.number().map_err(located)?;
    let height = cur.number().map_err(located)?;
    let (at, scale) = cur.token().map_err(located)?;
    let scale: f32 = scale
        .parse()
        .map_err(|_| located(decode_error(Some(at as u64), "bad scale")))?;
    let little = scale < 0.0;
    let start = cur.pos + 1;
    let need = width * height * 3 * 4;
    if bytes.len() < start + need {
        return Err(located(decode_error(Some(bytes.len() as u64), "raster truncated")));
    }
    let mut data = vec![0f32; width * height * 3];
    for (i, chunk) in bytes[start..start + need].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let row = i / (width * 3);
        let within = i % (width * 3);
        data[(height - 1 - row) * width * 3 + within] = v;
    }
    Ok((height, width, data))
}

/// `[1, 3, H, W]` planar tensor from an interleaved image.
pub fn image_to_tensor<T: Scalar>(img: &ImageRGB) -> Tensor<T> {
    let plane = img.height * img.width;
    Tensor::from_fn([1, 3, img.height, img.width], |i| {
        let (c, p) = (i / plane, i % plane);
        T::from_f64(img.pixels[p * 3 + c] as f64)
    })
}

/// Inverse of [`image_to_tensor`], clamping to [0,1].
pub fn tensor_to_image<T: Scalar>(t: &Tensor<T>) -> Result<ImageRGB> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::Input(format!(
            "expected a [1, 3, H, W] tensor, got {s:?}"
        )));
    }
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    let d = t.data();
    let pixels = (0..plane * 3)
        .map(|i| {
            let (p, c) = (i / 3, i % 3);
            (d[c * plane + p].as_f64() as f32).clamp(0.0, 1.0)
        })
        .collect();
    ImageRGB::new(h, w, pixels)
}
