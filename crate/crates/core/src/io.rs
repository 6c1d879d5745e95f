//! Plain-text artifact formats shared by the library and the CLI.
//!
//! * matrices: a `rows cols` header, then one whitespace-separated row per line
//! * vectors: one value per line
//! * correspondences: one `i j` pair per line, 0-based
//! * regions: one whitespace-separated vertex list per line

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

fn parse_err(context: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        context: context.to_string(),
        line,
        message: message.into(),
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

pub fn matrix_to_text(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    writeln!(s, "{} {}", m.nrows(), m.ncols()).unwrap();
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(s, "{}", line.join(" ")).unwrap();
    }
    s
}

pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = content_lines(text);
    let (ln, header) = lines.next().ok_or_else(|| parse_err("matrix", 1, "empty file"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_err("matrix", ln, "expected 'rows cols' header"))?;
    if dims.len() != 2 {
        return Err(parse_err("matrix", ln, "expected 'rows cols' header"));
    }
    let (rows, cols) = (dims[0], dims[1]);
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err("matrix", ln, format!("missing row {r}")))?;
        let vals: Vec<f64> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err("matrix", ln, "bad number"))?;
        if vals.len() != cols {
            return Err(parse_err("matrix", ln, format!("expected {cols} values, got {}", vals.len())));
        }
        data.extend(vals);
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn vector_to_text(v: &DVector<f64>) -> String {
    v.iter().map(|x| format!("{x:?}\n")).collect()
}

pub fn parse_vector(text: &str) -> Result<DVector<f64>> {
    let vals: Vec<f64> = content_lines(text)
        .map(|(ln, l)| l.parse().map_err(|_| parse_err("vector", ln, "bad number")))
        .collect::<Result<_>>()?;
    Ok(DVector::from_vec(vals))
}

pub fn pairs_to_text(pairs: &[(usize, usize)]) -> String {
    pairs.iter().map(|(i, j)| format!("{i} {j}\n")).collect()
}

pub fn parse_pairs(text: &str) -> Result<Vec<(usize, usize)>> {
    content_lines(text)
        .map(|(ln, l)| {
            let t: Vec<&str> = l.split_whitespace().collect();
            match t.as_slice() {
                [a, b] => Ok((
                    a.parse().map_err(|_| parse_err("pairs", ln, "bad index"))?,
                    b.parse().map_err(|_| parse_err("pairs", ln, "bad index"))?,
                )),
                _ => Err(parse_err("pairs", ln, "expected 'i j'")),
            }
        })
        .collect()
}

pub fn parse_regions(text: &str) -> Result<Vec<Vec<usize>>> {
    content_lines(text)
        .map(|(ln, l)| {
            l.split_whitespace()
                .map(|t| t.parse().map_err(|_| parse_err("regions", ln, format!("bad index '{t}'"))))
                .collect()
        })
        .collect()
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
