//! OFF and OBJ readers/writers.
//!
//! OFF: `OFF`, then `n m 0`, then `n` lines `x y z`, then `m` lines `3 i j k`.
//! OBJ: only `v x y z` and `f i j k` (1-based) are interpreted; other
//! directives are skipped with a warning.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::Point3;

use super::TriMesh;
use crate::error::{Error, Result};

pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("obj") => parse_obj(&text),
        Some("off") => parse_off(&text),
        _ if text.trim_start().starts_with("OFF") => parse_off(&text),
        _ => parse_obj(&text),
    }
}

fn parse_err(context: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        context: context.to_string(),
        line,
        message: message.into(),
    }
}

pub fn parse_off(text: &str) -> Result<TriMesh> {
    // (line number, tokens) for every non-empty, non-comment line
    let mut lines = text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then(|| (i + 1, l))
    });

    let (ln, header) = lines.next().ok_or_else(|| parse_err("OFF", 1, "empty file"))?;
    let mut header_tokens = header.split_whitespace();
    if header_tokens.next() != Some("OFF") {
        return Err(parse_err("OFF", ln, "missing OFF header"));
    }
    // counts may follow the keyword on the same line
    let rest: Vec<&str> = header_tokens.collect();
    let (ln, counts) = if rest.is_empty() {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err("OFF", ln, "missing counts line"))?;
        (ln, l.split_whitespace().collect::<Vec<_>>())
    } else {
        (ln, rest)
    };
    if counts.len() < 2 {
        return Err(parse_err("OFF", ln, "expected 'n m 0'"));
    }
    let n: usize = counts[0]
        .parse()
        .map_err(|_| parse_err("OFF", ln, "bad vertex count"))?;
    let m: usize = counts[1]
        .parse()
        .map_err(|_| parse_err("OFF", ln, "bad face count"))?;

    let mut vertices = Vec::with_capacity(n);
    for _ in 0..n {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err("OFF", ln, "unexpected end of file in vertex block"))?;
        let xyz: Vec<f64> = l
            .split_whitespace()
            .take(3)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err("OFF", ln, "bad vertex coordinate"))?;
        if xyz.len() != 3 {
            return Err(parse_err("OFF", ln, "vertex needs three coordinates"));
        }
        vertices.push(Point3::new(xyz[0], xyz[1], xyz[2]));
    }

    let mut faces = Vec::with_capacity(m);
    for _ in 0..m {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err("OFF", ln, "unexpected end of file in face block"))?;
        let idx: Vec<usize> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err("OFF", ln, "bad face index"))?;
        if idx.first() != Some(&3) || idx.len() < 4 {
            return Err(parse_err("OFF", ln, format!("non-triangular face at line {ln}")));
        }
        faces.push([idx[1], idx[2], idx[3]]);
    }
    Ok(TriMesh::new(vertices, faces)?)
}

pub fn parse_obj(text: &str) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            None => {}
            Some("v") => {
                let xyz: Vec<f64> = tokens
                    .take(3)
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| parse_err("OBJ", ln, "bad vertex coordinate"))?;
                if xyz.len() != 3 {
                    return Err(parse_err("OBJ", ln, "vertex needs three coordinates"));
                }
                vertices.push(Point3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = tokens
                    .map(|t| {
                        // "i", "i/t", "i//n", "i/t/n": only the position index matters
                        t.split('/')
                            .next()
                            .and_then(|s| s.parse::<usize>().ok())
                            .filter(|&v| v >= 1)
                            .ok_or_else(|| parse_err("OBJ", ln, format!("bad face index '{t}'")))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(parse_err("OBJ", ln, format!("non-triangular face at line {ln}")));
                }
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            Some(other) => warn!("OBJ line {ln}: ignoring '{other}' directive"),
        }
    }
    Ok(TriMesh::new(vertices, faces)?)
}

/// OFF text; coordinates use the shortest representation that parses back
/// to the same `f64`.
pub fn to_off(mesh: &TriMesh) -> String {
    let mut s = String::new();
    writeln!(s, "OFF").unwrap();
    writeln!(s, "{} {} 0", mesh.n_vertices(), mesh.n_faces()).unwrap();
    for p in mesh.vertices() {
        writeln!(s, "{:?} {:?} {:?}", p.x, p.y, p.z).unwrap();
    }
    for f in mesh.faces() {
        writeln!(s, "3 {} {} {}", f[0], f[1], f[2]).unwrap();
    }
    s
}

pub fn to_obj(mesh: &TriMesh) -> String {
    let mut s = String::new();
    for p in mesh.vertices() {
        writeln!(s, "v {:?} {:?} {:?}", p.x, p.y, p.z).unwrap();
    }
    for f in mesh.faces() {
        writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    s
}
