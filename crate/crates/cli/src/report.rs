//! CSV and PGM writers.
//!
//! CSV files use commas, `.` decimals, LF line endings and a header row.
//! Floats are written in Rust's shortest round-trip form, so equal values
//! always produce equal bytes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hookscope::Tensor;

pub fn float(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

pub fn opt_float(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".into(), float)
}

/// Rows to CSV bytes.
pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
    fs::write(path, csv_bytes(header, rows)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

/// A plain-text greymap of a 2-D field. Values map linearly onto 0..=255
/// with 0 at mid-grey and the largest magnitude at an extreme.
pub fn pgm_bytes(height: usize, width: usize, values: &[f64]) -> Vec<u8> {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut s = format!("P2\n{width} {height}\n255\n");
    for row in values.chunks(width) {
        let line: Vec<String> = row
            .iter()
            .map(|v| {
                let g = if scale > 0.0 { 127.5 + 127.5 * v / scale } else { 127.5 };
                (g.round() as i64).clamp(0, 255).to_string()
            })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s.into_bytes()
}

/// Spatial maps per sample for tensors shaped `[N, H, W]` or
/// `[N, C, H, W]` (channels summed); `None` for anything else.
pub fn heatmaps(t: &Tensor) -> Option<(usize, usize, Vec<Vec<f64>>)> {
    let s = t.shape();
    let (c, h, w) = match s.len() {
        3 => (1, s[1], s[2]),
        4 => (s[1], s[2], s[3]),
        _ => return None,
    };
    let maps = (0..s[0])
        .map(|n| {
            let row = t.row(n);
            (0..h * w).map(|i| (0..c).map(|ch| row[ch * h * w + i]).sum()).collect()
        })
        .collect();
    Some((h, w, maps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let b = pgm_bytes(2, 2, &[-1.0, 0.0, 0.5, 1.0]);
        assert_eq!(String::from_utf8(b).unwrap(), "P2\n2 2\n255\n0 128\n191 255\n");
    }

    #[test]
    fn csv_dialect() {
        let b = csv_bytes(&["a", "b"], &[vec![float(0.1), float(-2.0)]]).unwrap();
        assert_eq!(String::from_utf8(b).unwrap(), "a,b\n0.1,-2\n");
    }
}
