//! Plain-text 3x4 projection matrices: three lines of four
//! whitespace-separated numbers. Blank lines and `#` comments are skipped.

use std::path::{Path, PathBuf};

use nalgebra::Matrix3x4;

use epimisr_core::camera::{decompose_projection_matrix, Camera};

use crate::error::{Error, Result};
use crate::fsutil::{read, write_atomic};

pub fn parse_projection(text: &str, path: &Path) -> Result<Matrix3x4<f64>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rows: Vec<[f64; 4]> = Vec::with_capacity(3);
    let mut last = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        last = line;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if rows.len() == 3 {
            return Err(err(line, "more than three matrix rows".into()));
        }
        let nums = body
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| err(line, format!("`{t}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        if nums.len() != 4 {
            return Err(err(line, format!("expected 4 numbers, found {}", nums.len())));
        }
        if nums.iter().any(|v| !v.is_finite()) {
            return Err(err(line, "non-finite entry".into()));
        }
        rows.push([nums[0], nums[1], nums[2], nums[3]]);
    }
    if rows.len() != 3 {
        return Err(err(
            last.max(1),
            format!("expected 3 matrix rows, found {}", rows.len()),
        ));
    }
    Ok(Matrix3x4::from_fn(|r, c| rows[r][c]))
}

/// Decomposes each file into a camera with the given image extents.
pub fn import_projection_matrices(files: &[PathBuf], width: usize, height: usize) -> Result<Vec<Camera>> {
    files
        .iter()
        .map(|f| {
            let bytes = read(f)?;
            let text = String::from_utf8(bytes).map_err(|_| Error::format(f, "not UTF-8 text"))?;
            let p = parse_projection(&text, f)?;
            decompose_projection_matrix(&p, width, height).map_err(|e| Error::format(f, e.to_string()))
        })
        .collect()
}

/// Full-precision text form of `K [R | t]`.
pub fn format_projection(camera: &Camera) -> String {
    let p = camera.projection_matrix();
    let mut out = String::new();
    for r in 0..3 {
        let row: Vec<String> = (0..4).map(|c| format!("{:e}", p[(r, c)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn export_projection(path: &Path, camera: &Camera) -> Result<()> {
    write_atomic(path, format_projection(camera).as_bytes())
}
