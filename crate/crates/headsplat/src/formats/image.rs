//! 8-bit PNG and ASCII PPM for color/alpha, float raw dumps for depth and
//! normals.
//!
//! A raw dump is the text header `HSRAW 1\n<width> <height> <channels>\n`
//! followed by `width * height * channels` little-endian f32 values in
//! row-major, channel-interleaved order.

use std::io::Cursor;
use std::path::Path;

use headsplat_core::image::Image;

use super::{read_bytes, write_file};
use crate::error::{malformed, CliError, Result};

pub const RAW_MAGIC: &str = "HSRAW";
pub const RAW_VERSION: u32 = 1;

/// `[0, 1]` to 8 bits, clamping and rounding to nearest.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_bytes(img: &Image) -> Vec<u8> {
    img.data.iter().map(|&v| quantize(v)).collect()
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        2 => png::ColorType::GrayscaleAlpha,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(CliError::validation(format!("cannot store {c}-channel image as PNG"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| CliError::runtime(format!("PNG encode: {e}")))?;
        w.write_image_data(&to_bytes(img))
            .map_err(|e| CliError::runtime(format!("PNG encode: {e}")))?;
    }
    Ok(out)
}

/// Decodes 8- or 16-bit grayscale, gray+alpha, RGB or RGBA into `[0, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<Image, String> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or("PNG too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let data: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        d => return Err(format!("unsupported PNG bit depth {d:?}")),
    };
    Image::from_data(w, h, channels, data).map_err(|e| e.to_string())
}

pub fn encode_ppm(img: &Image) -> Result<String> {
    if img.channels != 3 && img.channels != 1 {
        return Err(CliError::validation(format!("cannot store {}-channel image as PPM", img.channels)));
    }
    let mut s = format!("P3\n{} {}\n255\n", img.width, img.height);
    for p in 0..img.pixels() {
        let px = img.pixel(p);
        let rgb = if img.channels == 1 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
        s.push_str(&format!("{} {} {}\n", quantize(rgb[0]), quantize(rgb[1]), quantize(rgb[2])));
    }
    Ok(s)
}

pub fn decode_ppm(text: &str) -> Result<Image, String> {
    let mut t = super::Tokens::new(text);
    t.expect("P3")?;
    let w: usize = t.next("width")?;
    let h: usize = t.next("height")?;
    let max: u32 = t.next("maximum value")?;
    if max == 0 || max > 65535 {
        return Err(format!("invalid PPM maximum {max}"));
    }
    let mut data = Vec::with_capacity(w * h * 3);
    for _ in 0..w * h * 3 {
        let v: u32 = t.next("sample")?;
        if v > max {
            return Err(format!("sample {v} exceeds maximum {max}"));
        }
        data.push(v as f64 / max as f64);
    }
    t.finish()?;
    Image::from_data(w, h, 3, data).map_err(|e| e.to_string())
}

pub fn encode_raw(img: &Image) -> Vec<u8> {
    let mut out = format!("{RAW_MAGIC} {RAW_VERSION}\n{} {} {}\n", img.width, img.height, img.channels).into_bytes();
    out.reserve(4 * img.data.len());
    for &v in &img.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<Image, String> {
    let mut lines = 0;
    let mut split = 0;
    for (i, b) in bytes.iter().enumerate() {
        if *b == b'\n' {
            lines += 1;
            if lines == 2 {
                split = i + 1;
                break;
            }
        }
    }
    if lines < 2 {
        return Err("raw dump header is incomplete".into());
    }
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| "raw dump header is not text")?;
    let mut t = super::Tokens::new(header);
    t.expect(RAW_MAGIC)?;
    let version: u32 = t.next("version")?;
    if version != RAW_VERSION {
        return Err(format!("raw dump version {version}, this build reads {RAW_VERSION}"));
    }
    let w: usize = t.next("width")?;
    let h: usize = t.next("height")?;
    let c: usize = t.next("channels")?;
    let body = &bytes[split..];
    if body.len() != 4 * w * h * c {
        return Err(format!("raw dump body has {} bytes, expected {}", body.len(), 4 * w * h * c));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Image::from_data(w, h, c, data).map_err(|e| e.to_string())
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    write_file(path, &encode_png(img)?)
}

pub fn read_png(path: &Path) -> Result<Image> {
    decode_png(&read_bytes(path)?).map_err(|m| malformed(path, m))
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    write_file(path, encode_ppm(img)?.as_bytes())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    super::parse_file(path, decode_ppm)
}

pub fn write_raw(path: &Path, img: &Image) -> Result<()> {
    write_file(path, &encode_raw(img))
}

pub fn read_raw(path: &Path) -> Result<Image> {
    decode_raw(&read_bytes(path)?).map_err(|m| malformed(path, m))
}

/// Reads PNG or PPM by extension.
pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path),
        _ => read_png(path),
    }
}

/// Keeps the first channel of a multi-channel image.
pub fn first_channel(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let data = (0..img.pixels()).map(|p| img.data[p * img.channels]).collect();
    Image::from_data(img.width, img.height, 1, data).expect("shape preserved")
}

/// Maps unit normals to `0.5 n + 0.5`.
pub fn normal_to_rgb(normal: &Image) -> Image {
    let mut out = normal.clone();
    for v in out.data.iter_mut() {
        *v = 0.5 * *v + 0.5;
    }
    out
}

/// Depth to gray, nearest = white, over the pixels where `alpha > 0`.
pub fn depth_to_gray(depth: &Image, alpha: &Image) -> Image {
    let covered = || depth.data.iter().zip(&alpha.data).filter(|(_, a)| **a > 0.0).map(|(d, _)| *d);
    let lo = covered().fold(f64::INFINITY, f64::min);
    let hi = covered().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = depth
        .data
        .iter()
        .zip(&alpha.data)
        .map(|(d, a)| if *a > 0.0 { 1.0 - (d - lo) / span } else { 0.0 })
        .collect();
    Image::from_data(depth.width, depth.height, 1, data).expect("shape preserved")
}
