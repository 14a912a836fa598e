//! 8-bit PNG encode/decode for `[3, h, w]` images in `[0, 1]` and binary masks.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn quantize<S: Scalar>(v: S) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::format("png", other.to_string()),
    };
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Writes a `[3, h, w]` tensor as 8-bit RGB, rounding `v·255`.
pub fn save_rgb<S: Scalar>(path: impl AsRef<Path>, image: &Tensor<S>) -> Result<()> {
    let [3, h, w] = image.shape()[..] else {
        return Err(Error::invalid(format!(
            "RGB image must be [3, h, w], got {:?}",
            image.shape()
        )));
    };
    let d = image.data();
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(quantize(d[c * plane + i]));
        }
    }
    write_png(path.as_ref(), w, h, png::ColorType::Rgb, &bytes)
}

/// Writes raw 8-bit grayscale pixels.
pub fn save_gray(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::invalid("gray image size mismatch"));
    }
    write_png(path.as_ref(), width, height, png::ColorType::Grayscale, pixels)
}

/// Decoded 8-bit image: `channels` interleaved bytes per pixel.
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let decode_err = |reason: String| Error::ImageDecode {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| decode_err("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(decode_err("unexpanded palette".into())),
    };
    buf.truncate(info.buffer_size());
    Ok(RawImage {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        pixels: buf,
    })
}

/// Reads a PNG as a `[3, h, w]` tensor in `[0, 1]`. Gray images are
/// replicated across channels; alpha is dropped.
pub fn load_rgb<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    let raw = load_raw(path)?;
    let plane = raw.width * raw.height;
    let mut data = vec![S::zero(); 3 * plane];
    for i in 0..plane {
        let px = &raw.pixels[i * raw.channels..(i + 1) * raw.channels];
        for c in 0..3 {
            let byte = if raw.channels >= 3 { px[c] } else { px[0] };
            data[c * plane + i] = S::lit(byte as f64 / 255.0);
        }
    }
    Tensor::new(vec![3, raw.height, raw.width], data)
}
