//! Text and binary file formats.
//!
//! * Transforms: 4 lines of 4 whitespace-separated decimals, row-major, with
//!   the last row `0 0 0 1`. Blank lines and lines starting with `#` are
//!   ignored.
//! * Point clouds: text with one `x y z` triple per line (meters), or binary
//!   little-endian `f32` triples `xyzxyz...` (files ending in `.bin`).
//! * Depth maps: a `P2F` header line, a `width height` line, then `height`
//!   lines of `width` depths in meters (0 for empty pixels).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Matrix4;

use crate::error::{CalibError, Result};
use crate::geometry::RigidTransform;
use crate::projection::{DepthMap, Point};

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_floats(line_no: usize, line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            let v: f64 = tok.parse().map_err(|_| CalibError::Parse {
                line: line_no,
                msg: format!("`{tok}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(CalibError::Parse {
                    line: line_no,
                    msg: format!("`{tok}` is not finite"),
                });
            }
            Ok(v)
        })
        .collect()
}

pub fn parse_transform(text: &str) -> Result<RigidTransform> {
    let mut m = Matrix4::zeros();
    let mut rows = 0usize;
    let mut last_line = 0usize;
    for (line_no, line) in content_lines(text) {
        last_line = line_no;
        if rows == 4 {
            return Err(CalibError::Parse {
                line: line_no,
                msg: "more than 4 rows".into(),
            });
        }
        let vals = parse_floats(line_no, line)?;
        if vals.len() != 4 {
            return Err(CalibError::Parse {
                line: line_no,
                msg: format!("expected 4 values, found {}", vals.len()),
            });
        }
        for (c, v) in vals.into_iter().enumerate() {
            m[(rows, c)] = v;
        }
        rows += 1;
    }
    if rows != 4 {
        return Err(CalibError::Parse {
            line: last_line + 1,
            msg: format!("expected 4 rows, found {rows}"),
        });
    }
    RigidTransform::from_homogeneous(&m).map_err(|e| CalibError::Parse {
        line: last_line,
        msg: e.to_string(),
    })
}

/// Formats with 17 significant digits so that parsing restores the exact
/// `f64` values.
pub fn format_transform(t: &RigidTransform) -> String {
    let m = t.to_homogeneous();
    let mut out = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format_exact(m[(r, c)])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

fn format_exact(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v:.17e}")
    }
}

pub fn read_transform(path: &Path) -> Result<RigidTransform> {
    let text = fs::read_to_string(path).map_err(|e| CalibError::io(path, e))?;
    parse_transform(&text)
}

pub fn write_transform(path: &Path, t: &RigidTransform) -> Result<()> {
    fs::write(path, format_transform(t)).map_err(|e| CalibError::io(path, e))
}

pub fn parse_points_text(text: &str) -> Result<Vec<Point>> {
    content_lines(text)
        .map(|(line_no, line)| {
            let v = parse_floats(line_no, line)?;
            if v.len() != 3 {
                return Err(CalibError::Parse {
                    line: line_no,
                    msg: format!("expected `x y z`, found {} values", v.len()),
                });
            }
            Ok(Point::new(v[0], v[1], v[2]))
        })
        .collect()
}

pub fn format_points_text(points: &[Point]) -> String {
    let mut out = String::new();
    for p in points {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    out
}

pub fn parse_points_binary(bytes: &[u8]) -> Result<Vec<Point>> {
    if !bytes.len().is_multiple_of(12) {
        return Err(CalibError::Parse {
            line: 0,
            msg: format!("binary cloud length {} is not a multiple of 12", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i..i + 4].try_into().expect("4 bytes")) as f64;
            Point::new(f(0), f(4), f(8))
        })
        .collect())
}

pub fn encode_points_binary(points: &[Point]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 12);
    for p in points {
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("bin"))
}

pub fn read_points(path: &Path) -> Result<Vec<Point>> {
    if is_binary(path) {
        let bytes = fs::read(path).map_err(|e| CalibError::io(path, e))?;
        parse_points_binary(&bytes)
    } else {
        let text = fs::read_to_string(path).map_err(|e| CalibError::io(path, e))?;
        parse_points_text(&text)
    }
}

pub fn write_points(path: &Path, points: &[Point]) -> Result<()> {
    let r = if is_binary(path) {
        fs::write(path, encode_points_binary(points))
    } else {
        fs::write(path, format_points_text(points))
    };
    r.map_err(|e| CalibError::io(path, e))
}

pub fn format_depth_map(map: &DepthMap) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "P2F");
    let _ = writeln!(out, "{} {}", map.width, map.height);
    for row in map.data.chunks(map.width.max(1)) {
        let vals: Vec<String> = row
            .iter()
            .map(|&d| if d == 0.0 { "0".to_string() } else { format!("{d:.6}") })
            .collect();
        let _ = writeln!(out, "{}", vals.join(" "));
    }
    out
}

pub fn parse_depth_map(text: &str) -> Result<DepthMap> {
    let mut lines = content_lines(text);
    match lines.next() {
        Some((_, "P2F")) => {}
        Some((n, other)) => {
            return Err(CalibError::Parse {
                line: n,
                msg: format!("expected `P2F` header, found `{other}`"),
            })
        }
        None => return Err(CalibError::Parse { line: 1, msg: "empty depth map".into() }),
    }
    let (n, dims) = lines.next().ok_or(CalibError::Parse { line: 2, msg: "missing size line".into() })?;
    let dims: Vec<usize> = dims
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| CalibError::Parse { line: n, msg: format!("bad size `{t}`") }))
        .collect::<Result<_>>()?;
    let [width, height] = dims[..] else {
        return Err(CalibError::Parse { line: n, msg: "size line must be `width height`".into() });
    };
    let mut data = Vec::with_capacity(width * height);
    for (line_no, line) in lines {
        let row = parse_floats(line_no, line)?;
        if row.len() != width {
            return Err(CalibError::Parse {
                line: line_no,
                msg: format!("expected {width} values, found {}", row.len()),
            });
        }
        data.extend(row);
    }
    if data.len() != width * height {
        return Err(CalibError::Parse {
            line: 0,
            msg: format!("expected {height} rows, found {}", data.len() / width.max(1)),
        });
    }
    Ok(DepthMap { width, height, data })
}

pub fn write_depth_map(path: &Path, map: &DepthMap) -> Result<()> {
    fs::write(path, format_depth_map(map)).map_err(|e| CalibError::io(path, e))
}
