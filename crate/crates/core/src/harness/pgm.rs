//! 8-bit binary PGM export with a fixed `[-1, 1]` window.

use std::path::Path;

use crate::error::{io_err, PadmError, Result};

/// Encodes a `rows × cols` image, mapping `[-1, 1]` linearly onto `[0, 255]`.
pub fn encode_pgm(rows: usize, cols: usize, data: &[f64]) -> Result<Vec<u8>> {
    if data.len() != rows * cols {
        return Err(PadmError::Shape(format!(
            "{rows}×{cols} image needs {} values, got {}",
            rows * cols,
            data.len()
        )));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(data.iter().map(|&v| window(v)));
    Ok(out)
}

fn window(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn write_pgm(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    let bytes = encode_pgm(rows, cols, data)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_endpoints() {
        let bytes = encode_pgm(1, 3, &[-1.0, 0.0, 2.0]).unwrap();
        assert!(bytes.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }
}
