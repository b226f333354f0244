//! Minimal PLY reader/writer: float32 x/y/z vertices and optional
//! triangle faces, ascii or binary little-endian. Covers the formats the
//! pipeline emits (meshes, ground-truth clouds) and reads them back.

use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::io::write_atomic;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLe,
}

pub fn write_ply(
    path: &Path,
    vertices: &[Point3],
    triangles: &[[u32; 3]],
    encoding: PlyEncoding,
) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    let format = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLe => "binary_little_endian",
    };
    out.extend_from_slice(
        format!(
            "ply\nformat {format} 1.0\nelement vertex {}\n\
             property float x\nproperty float y\nproperty float z\n\
             element face {}\nproperty list uchar int vertex_indices\nend_header\n",
            vertices.len(),
            triangles.len()
        )
        .as_bytes(),
    );
    match encoding {
        PlyEncoding::Ascii => {
            for v in vertices {
                out.extend_from_slice(
                    format!("{} {} {}\n", v.x as f32, v.y as f32, v.z as f32).as_bytes(),
                );
            }
            for t in triangles {
                out.extend_from_slice(format!("3 {} {} {}\n", t[0], t[1], t[2]).as_bytes());
            }
        }
        PlyEncoding::BinaryLe => {
            for v in vertices {
                for c in [v.x as f32, v.y as f32, v.z as f32] {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
            for t in triangles {
                out.push(3);
                for &i in t {
                    out.extend_from_slice(&(i as i32).to_le_bytes());
                }
            }
        }
    }
    write_atomic(path, &out)
}

/// Parses vertices and faces from either encoding written by
/// [`write_ply`] (and by other tools using the same plain layout).
pub fn read_ply(path: &Path) -> Result<(Vec<Point3>, Vec<[u32; 3]>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));

    // header is always ascii lines terminated by end_header
    let header_end = find_header_end(&bytes).ok_or_else(|| bad("missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| bad("header is not utf-8"))?;
    let mut encoding = None;
    let mut vertex_count = 0usize;
    let mut face_count = 0usize;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut current_element = String::new();
    for line in header.lines() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                encoding = match tok.next() {
                    Some("ascii") => Some(PlyEncoding::Ascii),
                    Some("binary_little_endian") => Some(PlyEncoding::BinaryLe),
                    other => {
                        return Err(bad(&format!("unsupported format {other:?}")));
                    }
                }
            }
            Some("element") => {
                current_element = tok.next().unwrap_or("").to_string();
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| bad("bad element count"))?;
                match current_element.as_str() {
                    "vertex" => vertex_count = count,
                    "face" => face_count = count,
                    other => return Err(bad(&format!("unsupported element `{other}`"))),
                }
            }
            Some("property") => {
                if current_element == "vertex" {
                    let tokens: Vec<&str> = tok.collect();
                    if tokens.first() != Some(&"float") {
                        return Err(bad("only float vertex properties are supported"));
                    }
                    vertex_props.push(tokens.last().unwrap_or(&"").to_string());
                }
            }
            _ => {}
        }
    }
    let encoding = encoding.ok_or_else(|| bad("missing format line"))?;
    if vertex_props.len() < 3 || vertex_props[..3] != ["x", "y", "z"] {
        return Err(bad("vertex properties must start with float x, y, z"));
    }
    let extra = vertex_props.len() - 3;

    let mut vertices = Vec::with_capacity(vertex_count);
    let mut triangles = Vec::with_capacity(face_count);
    match encoding {
        PlyEncoding::Ascii => {
            let body = std::str::from_utf8(&bytes[header_end..])
                .map_err(|_| bad("ascii body is not utf-8"))?;
            let mut lines = body.lines().filter(|l| !l.trim().is_empty());
            for _ in 0..vertex_count {
                let line = lines.next().ok_or_else(|| bad("missing vertex rows"))?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| bad("bad vertex number")))
                    .collect::<Result<_>>()?;
                if vals.len() < 3 {
                    return Err(bad("vertex row too short"));
                }
                vertices.push(Point3::new(vals[0], vals[1], vals[2]));
            }
            for _ in 0..face_count {
                let line = lines.next().ok_or_else(|| bad("missing face rows"))?;
                let vals: Vec<i64> = line
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| bad("bad face number")))
                    .collect::<Result<_>>()?;
                if vals.first() != Some(&3) || vals.len() != 4 {
                    return Err(bad("only triangle faces are supported"));
                }
                triangles.push([vals[1] as u32, vals[2] as u32, vals[3] as u32]);
            }
        }
        PlyEncoding::BinaryLe => {
            let mut pos = header_end;
            let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
                if *pos + n > bytes.len() {
                    return Err(Error::Format(format!("{}: truncated body", path.display())));
                }
                let s = &bytes[*pos..*pos + n];
                *pos += n;
                Ok(s)
            };
            for _ in 0..vertex_count {
                let raw = take(&mut pos, (3 + extra) * 4)?;
                let x = f32::from_le_bytes(raw[0..4].try_into().unwrap());
                let y = f32::from_le_bytes(raw[4..8].try_into().unwrap());
                let z = f32::from_le_bytes(raw[8..12].try_into().unwrap());
                vertices.push(Point3::new(x as f64, y as f64, z as f64));
            }
            for _ in 0..face_count {
                let n = take(&mut pos, 1)?[0];
                if n != 3 {
                    return Err(bad("only triangle faces are supported"));
                }
                let raw = take(&mut pos, 12)?;
                triangles.push([
                    i32::from_le_bytes(raw[0..4].try_into().unwrap()) as u32,
                    i32::from_le_bytes(raw[4..8].try_into().unwrap()) as u32,
                    i32::from_le_bytes(raw[8..12].try_into().unwrap()) as u32,
                ]);
            }
        }
    }
    for t in &triangles {
        if t.iter().any(|&i| i as usize >= vertices.len()) {
            return Err(bad("face index out of range"));
        }
    }
    Ok((vertices, triangles))
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let needle = b"end_header\n";
    bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + needle.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Vec<Point3>, Vec<[u32; 3]>) {
        (
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.25, 0.0),
                Point3::new(0.0, 1.0, 0.5),
            ],
            vec![[0, 1, 2]],
        )
    }

    #[test]
    fn binary_round_trip_bit_exact() {
        let (v, t) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        write_ply(&path, &v, &t, PlyEncoding::BinaryLe).unwrap();
        let first = std::fs::read(&path).unwrap();
        let (rv, rt) = read_ply(&path).unwrap();
        write_ply(&path, &rv, &rt, PlyEncoding::BinaryLe).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        assert_eq!(rt, t);
    }

    #[test]
    fn empty_mesh_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        write_ply(&path, &[], &[], PlyEncoding::Ascii).unwrap();
        let (v, t) = read_ply(&path).unwrap();
        assert!(v.is_empty());
        assert!(t.is_empty());
    }

    #[test]
    fn encodings_agree() {
        let (v, t) = sample();
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.ply");
        let pb = dir.path().join("b.ply");
        write_ply(&pa, &v, &t, PlyEncoding::Ascii).unwrap();
        write_ply(&pb, &v, &t, PlyEncoding::BinaryLe).unwrap();
        let (va, ta) = read_ply(&pa).unwrap();
        let (vb, tb) = read_ply(&pb).unwrap();
        assert_eq!(ta, tb);
        for (a, b) in va.iter().zip(&vb) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn out_of_range_face_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        write_ply(&path, &sample().0, &[[0, 1, 9]], PlyEncoding::Ascii).unwrap();
        assert!(read_ply(&path).is_err());
    }
}
