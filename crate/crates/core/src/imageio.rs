//! 8-bit PNG encoding for images and binary masks.

use crate::error::{Error, Result};
use crate::sketchrep::{Image, Raster};
use std::io::Cursor;
use std::path::Path;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        w.write_image_data(bytes).map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(out)
}

pub fn encode_image(img: &Image) -> Result<Vec<u8>> {
    let mut bytes = Vec::with_capacity(img.width() * img.height() * 3);
    for y in 0..img.height() {
        for x in 0..img.width() {
            bytes.extend(img.get(x, y).map(to_u8));
        }
    }
    encode(img.width(), img.height(), png::ColorType::Rgb, &bytes)
}

/// Single-channel PNG; values ≥ 0.5 become 255.
pub fn encode_mask(m: &Raster) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = m.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    encode(m.width(), m.height(), png::ColorType::Grayscale, &bytes)
}

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    bytes: Vec<u8>,
}

fn decode(data: &[u8]) -> Result<Decoded> {
    let mut dec = png::Decoder::new(Cursor::new(data));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Image("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Image("unexpanded palette image".into())),
    };
    buf.truncate(info.buffer_size());
    Ok(Decoded { width: info.width as usize, height: info.height as usize, channels, bytes: buf })
}

/// Decode any 8-bit PNG into RGB, dropping alpha and replicating gray.
pub fn decode_image(data: &[u8]) -> Result<Image> {
    let d = decode(data)?;
    let mut img = Image::new(d.width, d.height);
    for y in 0..d.height {
        for x in 0..d.width {
            let i = (y * d.width + x) * d.channels;
            let px = &d.bytes[i..i + d.channels];
            let rgb = if d.channels >= 3 { [px[0], px[1], px[2]] } else { [px[0]; 3] };
            img.set(x, y, rgb.map(|v| v as f32 / 255.0));
        }
    }
    Ok(img)
}

/// Decode a PNG into a binary raster: pixels whose first channel is ≥ 128 are 1.
pub fn decode_mask(data: &[u8]) -> Result<Raster> {
    let d = decode(data)?;
    let vals = (0..d.width * d.height).map(|i| if d.bytes[i * d.channels] >= 128 { 1.0 } else { 0.0 }).collect();
    Raster::from_vec(d.width, d.height, vals)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    Ok(std::fs::write(path, encode_image(img)?)?)
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_image(&std::fs::read(path)?)
}

pub fn write_mask(path: &Path, m: &Raster) -> Result<()> {
    Ok(std::fs::write(path, encode_mask(m)?)?)
}

pub fn read_mask(path: &Path) -> Result<Raster> {
    decode_mask(&std::fs::read(path)?)
}
