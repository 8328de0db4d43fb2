//! Netpbm output for saliency maps and overlays.

use std::fs;
use std::path::Path;

use sgdrop_core::attribution::SaliencyImage;

use crate::error::{CliError, Result};

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary greyscale PGM of a map in `[0, 1]`.
pub fn pgm_bytes(s: &SaliencyImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", s.width, s.height).into_bytes();
    out.extend(s.values.iter().map(|&v| byte(v)));
    out
}

/// Binary PPM: the image (grey or RGB planes, values in `[0, 1]`) tinted red
/// where the map is hot.
pub fn overlay_ppm_bytes(image: &[f32], channels: usize, s: &SaliencyImage) -> Vec<u8> {
    let plane = s.width * s.height;
    let mut out = format!("P6\n{} {}\n255\n", s.width, s.height).into_bytes();
    for i in 0..plane {
        let base = |c: usize| image[(if channels == 3 { c } else { 0 }) * plane + i] as f64;
        let heat = 0.6 * s.values[i];
        out.push(byte(base(0) * (1.0 - heat) + heat));
        out.push(byte(base(1) * (1.0 - heat)));
        out.push(byte(base(2) * (1.0 - heat)));
    }
    out
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
