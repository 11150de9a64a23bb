//! File readers for `.obj` (triangulated meshes), `.ply` (ascii or binary
//! little-endian meshes and clouds), and `.xyz` (whitespace-delimited clouds),
//! plus a plain-text cloud writer.

use super::{DataprepError, SurfacePointCloud, TriangleMesh};
use crate::geometry::Point3;
use ply_rs::parser::Parser;
use ply_rs::ply::{DefaultElement, Property};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

fn extension_of(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Load a triangle mesh from `.obj` or `.ply`, chosen by extension.
pub fn load_mesh(path: &Path) -> Result<TriangleMesh, DataprepError> {
    match extension_of(path).as_str() {
        "obj" => load_obj_mesh(path),
        "ply" => {
            let (vertices, faces) = read_ply(path)?;
            if faces.is_empty() {
                return Err(DataprepError::Parse(format!(
                    "{}: PLY file has no faces; load it as a point cloud instead",
                    path.display()
                )));
            }
            TriangleMesh::new(vertices, faces)
        }
        other => Err(DataprepError::Parse(format!(
            "unsupported mesh extension `{other}` (expected obj or ply)"
        ))),
    }
}

/// Load a raw point cloud from `.ply` or `.xyz`, chosen by extension.
pub fn load_cloud(path: &Path) -> Result<SurfacePointCloud, DataprepError> {
    let points = match extension_of(path).as_str() {
        "ply" => read_ply(path)?.0,
        "xyz" => read_xyz(path)?,
        other => {
            return Err(DataprepError::Parse(format!(
                "unsupported cloud extension `{other}` (expected ply or xyz)"
            )))
        }
    };
    if points.is_empty() {
        return Err(DataprepError::EmptyCloud);
    }
    Ok(SurfacePointCloud::new(points))
}

fn load_obj_mesh(path: &Path) -> Result<TriangleMesh, DataprepError> {
    let (models, _) = tobj::load_obj(
        path,
        &tobj::LoadOptions { triangulate: true, single_index: true, ..Default::default() },
    )
    .map_err(|e| DataprepError::Parse(format!("{}: {e}", path.display())))?;

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for model in models {
        let base = vertices.len();
        let mesh = model.mesh;
        for chunk in mesh.positions.chunks_exact(3) {
            vertices.push(Point3::new(chunk[0], chunk[1], chunk[2]));
        }
        for tri in mesh.indices.chunks_exact(3) {
            faces.push([
                base + tri[0] as usize,
                base + tri[1] as usize,
                base + tri[2] as usize,
            ]);
        }
    }
    if vertices.is_empty() {
        return Err(DataprepError::Parse(format!("{}: OBJ has no vertices", path.display())));
    }
    TriangleMesh::new(vertices, faces)
}

fn property_as_f64(p: &Property) -> Option<f64> {
    match p {
        Property::Float(v) => Some(*v as f64),
        Property::Double(v) => Some(*v),
        Property::Char(v) => Some(*v as f64),
        Property::UChar(v) => Some(*v as f64),
        Property::Short(v) => Some(*v as f64),
        Property::UShort(v) => Some(*v as f64),
        Property::Int(v) => Some(*v as f64),
        Property::UInt(v) => Some(*v as f64),
        _ => None,
    }
}

fn property_as_indices(p: &Property) -> Option<Vec<usize>> {
    match p {
        Property::ListChar(v) => Some(v.iter().map(|&i| i as usize).collect()),
        Property::ListUChar(v) => Some(v.iter().map(|&i| i as usize).collect()),
        Property::ListShort(v) => Some(v.iter().map(|&i| i as usize).collect()),
        Property::ListUShort(v) => Some(v.iter().map(|&i| i as usize).collect()),
        Property::ListInt(v) => Some(v.iter().map(|&i| i as usize).collect()),
        Property::ListUInt(v) => Some(v.iter().map(|&i| i as usize).collect()),
        _ => None,
    }
}

fn read_ply(path: &Path) -> Result<(Vec<Point3>, Vec<[usize; 3]>), DataprepError> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    let parser = Parser::<DefaultElement>::new();
    let ply = parser
        .read_ply(&mut reader)
        .map_err(|e| DataprepError::Parse(format!("{}: {e}", path.display())))?;

    let mut vertices = Vec::new();
    if let Some(elems) = ply.payload.get("vertex") {
        for elem in elems {
            let get = |k: &str| {
                elem.get(k).and_then(property_as_f64).ok_or_else(|| {
                    DataprepError::Parse(format!("{}: vertex missing `{k}`", path.display()))
                })
            };
            vertices.push(Point3::new(get("x")?, get("y")?, get("z")?));
        }
    }

    let mut faces = Vec::new();
    if let Some(elems) = ply.payload.get("face") {
        for elem in elems {
            let list = elem
                .get("vertex_indices")
                .or_else(|| elem.get("vertex_index"))
                .and_then(property_as_indices)
                .ok_or_else(|| {
                    DataprepError::Parse(format!("{}: face without index list", path.display()))
                })?;
            if list.len() < 3 {
                return Err(DataprepError::Parse(format!(
                    "{}: face with {} indices",
                    path.display(),
                    list.len()
                )));
            }
            // Fan-triangulate polygons.
            for i in 1..list.len() - 1 {
                faces.push([list[0], list[i], list[i + 1]]);
            }
        }
    }
    Ok((vertices, faces))
}

fn read_xyz(path: &Path) -> Result<Vec<Point3>, DataprepError> {
    let file = File::open(path)?;
    let mut points = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut it = trimmed.split_whitespace();
        let mut next = |name| {
            it.next()
                .ok_or_else(|| {
                    DataprepError::Parse(format!(
                        "{}:{}: missing {name}",
                        path.display(),
                        lineno + 1
                    ))
                })?
                .parse::<f64>()
                .map_err(|e| {
                    DataprepError::Parse(format!("{}:{}: {e}", path.display(), lineno + 1))
                })
        };
        points.push(Point3::new(next("x")?, next("y")?, next("z")?));
    }
    Ok(points)
}

/// Write a cloud as whitespace-delimited `x y z` lines.
pub fn write_xyz(path: &Path, cloud: &SurfacePointCloud) -> Result<(), DataprepError> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in &cloud.points {
        writeln!(w, "{:.17e} {:.17e} {:.17e}", p.x, p.y, p.z)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    #[test]
    fn obj_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tri.obj");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3").unwrap();
        drop(f);
        let mesh = load_mesh(&path).unwrap();
        assert_eq!(mesh.vertices.len(), 3);
        assert_eq!(mesh.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn ascii_ply_mesh() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tri.ply");
        let mut f = File::create(&path).unwrap();
        write!(
            f,
            "ply\nformat ascii 1.0\nelement vertex 4\nproperty double x\nproperty double y\nproperty double z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n"
        )
        .unwrap();
        drop(f);
        let mesh = load_mesh(&path).unwrap();
        assert_eq!(mesh.vertices.len(), 4);
        // Quad fan-triangulated into two faces.
        assert_eq!(mesh.faces.len(), 2);
    }

    #[test]
    fn xyz_cloud() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.xyz");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "# comment\n0.5 1.5 -2.0\n\n1 2 3 extra-ignored").unwrap();
        drop(f);
        let cloud = load_cloud(&path).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.points[0], Point3::new(0.5, 1.5, -2.0));
    }

    #[test]
    fn xyz_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.xyz");
        let cloud = SurfacePointCloud::new(vec![
            Point3::new(0.1, -0.25, 1.0 / 3.0),
            Point3::new(1e-12, 2.0, -3.5),
        ]);
        write_xyz(&path, &cloud).unwrap();
        let back = load_cloud(&path).unwrap();
        assert_eq!(back.points, cloud.points);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_cloud(Path::new("/nonexistent/nope.xyz")).unwrap_err();
        assert!(matches!(err, DataprepError::Io(_)));
    }
}
