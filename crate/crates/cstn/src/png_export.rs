//! 8-bit grayscale PNG export with per-image min-max windowing.
//!
//! The window is written next to the image as `<name>.window.txt`
//! (`min=…` / `max=…`), so a figure can be re-windowed or compared later.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use cstn_core::Tensor;

use crate::error::{self, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub min: f32,
    pub max: f32,
}

impl Window {
    pub fn of(t: &Tensor) -> Window {
        let (min, max) = t
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Window { min, max }
    }

    /// Maps `[min, max]` linearly onto `0..=255`; a flat window maps to 0.
    pub fn to_u8(&self, v: f32) -> u8 {
        let span = self.max as f64 - self.min as f64;
        if span <= 0.0 || !span.is_finite() {
            return 0;
        }
        ((v as f64 - self.min as f64) / span * 255.0).round().clamp(0.0, 255.0) as u8
    }
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    let mut name = png.file_stem().unwrap_or_default().to_os_string();
    name.push(".window.txt");
    png.with_file_name(name)
}

/// Writes a 2-D tensor as grayscale and returns the window used.
pub fn export(t: &Tensor, path: &Path) -> Result<Window> {
    if t.ndim() != 2 {
        return Err(Error::Core(cstn_core::Error::InvalidShape {
            op: "export-png",
            shape: t.shape().to_vec(),
            reason: "expects a 2-D slice",
        }));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let win = Window::of(t);
    let pixels: Vec<u8> = t.data().iter().map(|&v| win.to_u8(v)).collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(&pixels).map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))?;
    error::write(&sidecar_path(path), format!("min={}\nmax={}\n", win.min, win.max).as_bytes())?;
    Ok(win)
}
