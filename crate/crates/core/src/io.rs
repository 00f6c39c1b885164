//! Plain-text array format.
//!
//! ```text
//! dims: I J K
//! x[0,0,0] x[0,0,1] ... x[0,0,K-1]
//! x[0,1,0] ...
//! ```
//!
//! The header is `dims:` followed by two (matrix) or three (tensor) positive
//! integers. The body holds the values in row-major order (mode 1 slowest),
//! whitespace separated, one line per innermost fiber. Values are written
//! with Rust's shortest round-trip `f64` formatting, so reading a written
//! file reproduces the array bit-exactly. Lines starting with `#` are
//! comments.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{FactorModel, Mat, Observed, Tensor3};

pub fn format_observed(x: &Observed) -> String {
    let shape = x.shape();
    let inner = *shape.last().expect("non-empty shape");
    let mut out = String::from("dims:");
    for d in &shape {
        write!(out, " {d}").unwrap();
    }
    out.push('\n');
    for fiber in x.values().chunks(inner) {
        let line: Vec<String> = fiber.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn format_mat(m: &Mat) -> String {
    format_observed(&Observed::Matrix(m.clone()))
}

pub fn parse_observed(text: &str) -> Result<Observed> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty array file".into()))?;
    let dims_text = header
        .strip_prefix("dims:")
        .ok_or_else(|| Error::Format(format!("expected `dims:` header, got {header:?}")))?;
    let dims = dims_text
        .split_whitespace()
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad dimension {d:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let values = lines
        .flat_map(str::split_whitespace)
        .map(|v| {
            v.parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad value {v:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    match dims[..] {
        [r, c] => Ok(Observed::Matrix(Mat::new(r, c, values)?)),
        [i, j, k] => Ok(Observed::Tensor(Tensor3::new((i, j, k), values)?)),
        _ => Err(Error::Format(format!(
            "expected 2 or 3 dimensions, got {}",
            dims.len()
        ))),
    }
}

pub fn parse_mat(text: &str) -> Result<Mat> {
    match parse_observed(text)? {
        Observed::Matrix(m) => Ok(m),
        Observed::Tensor(_) => Err(Error::Format("expected a matrix, found a tensor".into())),
    }
}

pub fn write_observed(path: impl AsRef<Path>, x: &Observed) -> Result<()> {
    std::fs::write(path, format_observed(x))?;
    Ok(())
}

pub fn read_observed(path: impl AsRef<Path>) -> Result<Observed> {
    parse_observed(&std::fs::read_to_string(path)?)
}

pub fn write_mat(path: impl AsRef<Path>, m: &Mat) -> Result<()> {
    std::fs::write(path, format_mat(m))?;
    Ok(())
}

pub fn read_mat(path: impl AsRef<Path>) -> Result<Mat> {
    parse_mat(&std::fs::read_to_string(path)?)
}

/// Writes `A.txt`, `B.txt` and (3-mode) `C.txt` into `dir`.
pub fn save_model(dir: impl AsRef<Path>, model: &FactorModel) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_mat(dir.join("A.txt"), &model.a)?;
    write_mat(dir.join("B.txt"), &model.b)?;
    if let Some(c) = &model.c {
        write_mat(dir.join("C.txt"), c)?;
    }
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<FactorModel> {
    let dir = dir.as_ref();
    let a = read_mat(dir.join("A.txt"))?;
    let b = read_mat(dir.join("B.txt"))?;
    let c_path = dir.join("C.txt");
    let c = if c_path.exists() {
        Some(read_mat(c_path)?)
    } else {
        None
    };
    FactorModel::new(a, b, c)
}
