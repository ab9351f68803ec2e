//! Raw float32 grids: 8-byte header (height, width as little-endian u32) then
//! row-major little-endian f32 values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_f32_grid(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape("write_f32_grid", format!("{} values for {height}x{width}", values.len())));
    }
    let mut buf = Vec::with_capacity(8 + 4 * values.len());
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_f32_grid(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 8 {
        return Err(Error::Format(format!("{}: truncated header", path.display())));
    }
    let h = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    if buf.len() != 8 + 4 * h * w {
        return Err(Error::Format(format!(
            "{}: expected {} payload bytes for {h}x{w}, found {}",
            path.display(),
            4 * h * w,
            buf.len() - 8
        )));
    }
    let values = buf[8..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok((h, w, values))
}
