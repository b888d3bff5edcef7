//! 8-bit PNG input and output.
//!
//! Loading normalises to `[0, 1]`. Saving clamps and quantises with
//! round-half-up. Tensors are `(1, C, H, W)` with `C` = 1 (gray) or 3 (RGB);
//! alpha channels are dropped on load.

use std::fs::File;
use std::io::{BufReader, Cursor};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{invalid_arg, Error, Result};
use crate::tensor::Tensor;

fn unsupported(path: &Path, detail: impl Into<String>) -> Error {
    Error::UnsupportedFormat {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode(BufReader::new(file), path)
}

/// Decodes PNG bytes; `origin` only labels errors.
pub fn decode_png(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    decode(Cursor::new(bytes), origin)
}

fn decode<R: std::io::BufRead + std::io::Seek>(reader: R, path: &Path) -> Result<Tensor> {
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| unsupported(path, format!("not a readable PNG: {e}")))?;
    if reader.info().bit_depth == BitDepth::Sixteen {
        return Err(unsupported(path, "16-bit PNG is not supported; use 8-bit"));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| unsupported(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| unsupported(path, format!("corrupt PNG data: {e}")))?;
    if frame.bit_depth != BitDepth::Eight {
        return Err(unsupported(
            path,
            format!("unexpected bit depth {:?}", frame.bit_depth),
        ));
    }
    let (w, h) = (frame.width as usize, frame.height as usize);
    let (stride_px, channels) = match frame.color_type {
        ColorType::Grayscale => (1, 1),
        ColorType::GrayscaleAlpha => (2, 1),
        ColorType::Rgb => (3, 3),
        ColorType::Rgba => (4, 3),
        ColorType::Indexed => return Err(unsupported(path, "palette was not expanded")),
    };
    let line = frame.line_size;
    let mut data = vec![0.0; channels * h * w];
    for y in 0..h {
        let row = &buf[y * line..y * line + w * stride_px];
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = f64::from(row[x * stride_px + c]) / 255.0;
            }
        }
    }
    Tensor::new(vec![1, channels, h, w], data)
}

/// Clamp to `[0, 1]` and round half up to 8 bits.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *image.shape() {
        [1, c, h, w] => (c, h, w),
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => {
            return Err(invalid_arg!(
                "cannot save tensor of shape {:?} as an image",
                image.shape()
            ))
        }
    };
    let color = match c {
        1 => ColorType::Grayscale,
        3 => ColorType::Rgb,
        _ => return Err(invalid_arg!("images must have 1 or 3 channels, got {c}")),
    };
    let mut pixels = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                pixels.push(to_u8(image.data()[(ch * h + y) * w + x]));
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, w as u32, h as u32);
        encoder.set_color(color);
        encoder.set_depth(BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| invalid_arg!("png encoding failed: {e}"))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| invalid_arg!("png encoding failed: {e}"))?;
    }
    Ok(out)
}

pub fn save_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a PNG as a single-channel `(H, W)` map, averaging colour channels.
pub fn load_gray(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = load_image(path)?;
    let (_, c, h, w) = img.dims4()?;
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        out.iter_mut()
            .zip(img.plane(0, ch))
            .for_each(|(o, v)| *o += v / c as f64);
    }
    Tensor::new(vec![h, w], out)
}
