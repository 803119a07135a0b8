//! Wavefront OBJ subset: `v` and `f` records. Polygons are fan-triangulated;
//! `f` entries may carry `/vt/vn` suffixes and negative (relative) indices.
//! Other record types are skipped.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::mesh::TriMesh;

/// Writes shortest round-trip float text, so a reload is bit exact.
pub fn write_obj<W: Write>(mesh: &TriMesh, mut w: W) -> Result<()> {
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

pub fn obj_write(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_obj(mesh, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn parse_obj(text: &str, path: &Path) -> Result<TriMesh> {
    let err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut vertices = Vec::new();
    let mut faces: Vec<(usize, Vec<i64>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f64> = tokens
                    .take(3)
                    .map(|t| t.parse::<f64>().map_err(|e| err(line_no, format!("bad vertex coordinate {t:?}: {e}"))))
                    .collect::<Result<_>>()?;
                if coords.len() != 3 || coords.iter().any(|c| !c.is_finite()) {
                    return Err(err(line_no, "vertex needs three finite coordinates".into()));
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let idx: Vec<i64> = tokens
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        head.parse::<i64>().map_err(|e| err(line_no, format!("bad face index {t:?}: {e}")))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(err(line_no, "face needs at least three vertices".into()));
                }
                faces.push((line_no, idx));
            }
            _ => {}
        }
    }
    let n = vertices.len() as i64;
    let mut triangles = Vec::new();
    for (line_no, idx) in faces {
        let resolved: Vec<usize> = idx
            .iter()
            .map(|&k| {
                let r = if k > 0 { k - 1 } else { n + k };
                if k == 0 || r < 0 || r >= n {
                    Err(err(line_no, format!("face index {k} out of range for {n} vertices")))
                } else {
                    Ok(r as usize)
                }
            })
            .collect::<Result<_>>()?;
        for k in 1..resolved.len() - 1 {
            triangles.push([resolved[0], resolved[k], resolved[k + 1]]);
        }
    }
    TriMesh::new(vertices, triangles)
}

pub fn obj_read(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    parse_obj(&fs::read_to_string(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let m = TriMesh::icosphere(2).scaled(0.731);
        let mut buf = Vec::new();
        write_obj(&m, &mut buf).unwrap();
        let back = parse_obj(std::str::from_utf8(&buf).unwrap(), Path::new("mem.obj")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn quads_are_fanned() {
        let text = "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\n";
        let m = parse_obj(text, Path::new("q.obj")).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
        let rel = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n", Path::new("r.obj")).unwrap();
        assert_eq!(rel.triangles, vec![[0, 1, 2]]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n", Path::new("bad.obj")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 4, .. }), "{e}");
        let e = parse_obj("v 0 zero 0\n", Path::new("bad.obj")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = parse_obj("v 0 0 0\nf 1 1\n", Path::new("bad.obj")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
    }
}
