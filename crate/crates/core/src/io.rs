//! Plain-text and binary file formats: CSV images, 8-bit PGM/PPM, shape-tagged
//! JSON matrix bundles and CSV matrices.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::ImageGrid;

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

/// One row per pixel row, channels interleaved within the row.
pub fn image_to_csv(img: &ImageGrid) -> String {
    let n = img.size();
    let c = img.channels();
    let mut out = String::new();
    for r in 0..n {
        let row = &img.pixels()[r * n * c..(r + 1) * n * c];
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Parses a square CSV image; the channel count is inferred from the row
/// width (`N` or `3N` values for `N` rows).
pub fn image_from_csv(text: &str) -> Result<ImageGrid> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| {
            l.split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| parse_err(format!("bad number `{}`: {e}", s.trim()))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(parse_err("ragged CSV image"));
    }
    let channels = match width {
        w if w == n => 1,
        w if w == 3 * n => 3,
        _ => return Err(parse_err(format!("{n} rows of width {width} is not an N x N x c image"))),
    };
    ImageGrid::new(n, channels, rows.concat())
}

/// Binary P5 (one channel) or P6 (three channels), values clamped to `[0, 1]`
/// and quantised to 8 bits.
pub fn image_to_pnm(img: &ImageGrid) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let n = img.size();
    let mut out = format!("{magic}\n{n} {n}\n255\n").into_bytes();
    out.extend(img.pixels().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn image_from_pnm(bytes: &[u8]) -> Result<ImageGrid> {
    // Header: magic, width, height, maxval separated by whitespace, comments
    // starting with '#', then exactly one whitespace byte before the raster.
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(parse_err("truncated PNM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| parse_err("non-ASCII PNM header"))?);
    }
    i += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(parse_err(format!("unsupported PNM magic `{m}`"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| parse_err(format!("bad PNM header field `{s}`")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if w != h {
        return Err(parse_err(format!("image must be square, got {w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(parse_err("only 8-bit PNM files are supported"));
    }
    let len = w * h * channels;
    let raster = bytes.get(i..i + len).ok_or_else(|| parse_err("truncated PNM raster"))?;
    ImageGrid::new(w, channels, raster.iter().map(|&b| b as f64 / maxval as f64).collect())
}

/// Reads `.csv`, `.pgm` or `.ppm` by extension.
pub fn read_image(path: &Path) -> Result<ImageGrid> {
    match extension(path).as_str() {
        "csv" => image_from_csv(&std::fs::read_to_string(path)?),
        "pgm" | "ppm" | "pnm" => image_from_pnm(&std::fs::read(path)?),
        other => Err(invalid(format!("unsupported image extension `{other}`"))),
    }
}

pub fn write_image(path: &Path, img: &ImageGrid) -> Result<()> {
    match extension(path).as_str() {
        "csv" => std::fs::write(path, image_to_csv(img))?,
        "pgm" | "ppm" | "pnm" => {
            let want = if img.channels() == 1 { "pgm" } else { "ppm" };
            if extension(path) != "pnm" && extension(path) != want {
                return Err(invalid(format!("a {}-channel image must be written as .{want}", img.channels())));
            }
            std::fs::write(path, image_to_pnm(img))?
        }
        other => return Err(invalid(format!("unsupported image extension `{other}`"))),
    }
    Ok(())
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapedMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub data: Vec<f64>,
}

/// Named matrices with explicit shapes. JSON output uses shortest round-trip
/// float formatting, so write-then-read is bit-exact.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixBundle {
    pub matrices: BTreeMap<String, ShapedMatrix>,
}

impl MatrixBundle {
    pub fn insert_matrix(&mut self, name: &str, m: &DMatrix<f64>) {
        let data = m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
        self.matrices.insert(name.to_string(), ShapedMatrix { rows: m.nrows(), cols: m.ncols(), data });
    }

    pub fn insert_vector(&mut self, name: &str, v: &DVector<f64>) {
        self.insert_matrix(name, &DMatrix::from_row_slice(1, v.len(), v.as_slice()));
    }

    pub fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let m = self.matrices.get(name).ok_or_else(|| parse_err(format!("bundle has no entry `{name}`")))?;
        if m.data.len() != m.rows * m.cols {
            return Err(parse_err(format!(
                "entry `{name}` has {} values for shape {}x{}",
                m.data.len(),
                m.rows,
                m.cols
            )));
        }
        Ok(DMatrix::from_row_slice(m.rows, m.cols, &m.data))
    }

    pub fn vector(&self, name: &str) -> Result<DVector<f64>> {
        let m = self.matrix(name)?;
        Ok(DVector::from_iterator(m.len(), m.transpose().iter().copied()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| parse_err(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))
    }
}

/// CSV with a `# rows,cols` header line, shortest round-trip floats.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = format!("# {},{}\n", m.nrows(), m.ncols());
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err("empty matrix CSV"))?;
    let shape = header.strip_prefix('#').ok_or_else(|| parse_err("missing `# rows,cols` header"))?;
    let dims: Vec<usize> = shape
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| parse_err(format!("bad shape header `{header}`"))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else { return Err(parse_err(format!("bad shape header `{header}`"))) };
    let mut data = Vec::with_capacity(rows * cols);
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let before = data.len();
        for s in line.split(',') {
            data.push(s.trim().parse::<f64>().map_err(|e| parse_err(format!("bad number `{}`: {e}", s.trim())))?);
        }
        if data.len() - before != cols {
            return Err(parse_err("row width does not match the shape header"));
        }
    }
    if data.len() != rows * cols {
        return Err(parse_err("row count does not match the shape header"));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ImageGrid {
        ImageGrid::from_fn(4, 3, |r, c, ch| ((r * 7 + c * 3 + ch) % 5) as f64 / 4.0).unwrap()
    }

    #[test]
    fn csv_image_round_trip() {
        let img = sample();
        assert_eq!(image_from_csv(&image_to_csv(&img)).unwrap(), img);
        let gray = ImageGrid::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.1]]).unwrap();
        assert_eq!(image_from_csv(&image_to_csv(&gray)).unwrap(), gray);
        assert!(image_from_csv("1,2\n3\n").is_err());
        assert!(image_from_csv("1,2,3\n4,5,6\n").is_err());
    }

    #[test]
    fn pnm_round_trip_on_8bit_values() {
        let img = sample();
        let back = image_from_pnm(&image_to_pnm(&img)).unwrap();
        assert_eq!(back.channels(), 3);
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let with_comment = b"P5\n# made by hand\n2 2\n255\n\x00\xff\x80\x00";
        let g = image_from_pnm(with_comment).unwrap();
        assert_eq!(g.get(0, 1, 0), 1.0);
        assert!(image_from_pnm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(image_from_pnm(b"P3\n2 2\n255\n").is_err());
    }

    #[test]
    fn files_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let img = sample();
        let p = dir.path().join("x.csv");
        write_image(&p, &img).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
        assert!(write_image(&dir.path().join("x.pgm"), &img).is_err());
        write_image(&dir.path().join("x.ppm"), &img).unwrap();
        assert!(read_image(&dir.path().join("x.png")).is_err());
    }

    #[test]
    fn bundle_and_csv_matrices_are_bit_exact() {
        let m = DMatrix::from_fn(3, 2, |r, c| (r as f64 + 0.1) / (c as f64 + 3.0) * std::f64::consts::PI);
        let mut b = MatrixBundle::default();
        b.insert_matrix("m", &m);
        let v = DVector::from_vec(vec![1.0 / 3.0, -2e-300, 7.5]);
        b.insert_vector("v", &v);
        let back = MatrixBundle::from_json(&b.to_json().unwrap()).unwrap();
        assert_eq!(back.matrix("m").unwrap(), m);
        assert_eq!(back.vector("v").unwrap(), v);
        assert!(back.matrix("missing").is_err());
        assert_eq!(matrix_from_csv(&matrix_to_csv(&m)).unwrap(), m);
        assert!(matrix_from_csv("# 2,2\n1,2\n").is_err());
    }
}
