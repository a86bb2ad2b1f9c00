use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use catr_core::{CatrError, Result};

fn to_byte(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| CatrError::Io { path: path.into(), source: e })?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| CatrError::Format { path: path.into(), msg: e.to_string() };
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(bytes).map_err(fail)?;
    writer.finish().map_err(fail)
}

/// Binary mask as 8-bit grayscale: foreground white.
pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|&m| if m != 0.0 { 255 } else { 0 }).collect();
    write_png(path, width, height, png::ColorType::Grayscale, &bytes)
}

/// RGB image with channels in [0, 1].
pub fn write_rgb(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = rgb.iter().copied().map(to_byte).collect();
    write_png(path, width, height, png::ColorType::Rgb, &bytes)
}
