//! ASCII readers and writers: `.xyz` and `.ply` point clouds, `.obj` and
//! `.ply` triangle meshes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::geometry::{GeometryError, PointCloud, TriangleMesh};
use crate::math::Vec3;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("input contains no points")]
    EmptyInput,
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn parse_err(line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse { line, msg: msg.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointFormat {
    Xyz,
    Ply,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl PointFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match extension(path).as_deref() {
            Some("xyz") | Some("txt") => Some(Self::Xyz),
            Some("ply") => Some(Self::Ply),
            _ => None,
        }
    }
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match extension(path).as_deref() {
            Some("obj") => Some(Self::Obj),
            Some("ply") => Some(Self::Ply),
            _ => None,
        }
    }
}

impl FromStr for MeshFormat {
    type Err = IoError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "obj" => Ok(Self::Obj),
            "ply" => Ok(Self::Ply),
            other => Err(IoError::Unsupported(other.to_string())),
        }
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

/// Loads a raw (un-normalized) point cloud.
pub fn load_points(path: &Path, format: PointFormat) -> Result<PointCloud, IoError> {
    let text = read_text(path)?;
    match format {
        PointFormat::Xyz => parse_xyz(&text),
        PointFormat::Ply => parse_ply_points(&text),
    }
}

fn parse_floats(line_no: usize, tokens: &[&str]) -> Result<Vec<f64>, IoError> {
    tokens
        .iter()
        .map(|t| {
            let v: f64 = t.parse().map_err(|_| parse_err(line_no, format!("not a number: {t:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(line_no, format!("non-finite value: {t:?}")))
            }
        })
        .collect()
}

/// Parses whitespace separated `x y z` or `x y z nx ny nz` records. Blank
/// lines and `#` comments are skipped.
pub fn parse_xyz(text: &str) -> Result<PointCloud, IoError> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut columns = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 && tokens.len() != 6 {
            return Err(parse_err(line_no, format!("expected 3 or 6 values, found {}", tokens.len())));
        }
        let vals = parse_floats(line_no, &tokens)?;
        match columns {
            None => columns = Some(tokens.len()),
            Some(c) if c != tokens.len() => {
                return Err(parse_err(line_no, format!("expected {c} values like the first record")));
            }
            _ => {}
        }
        points.push([vals[0], vals[1], vals[2]]);
        if vals.len() == 6 {
            normals.push([vals[3], vals[4], vals[5]]);
        }
    }
    finish_cloud(points, normals)
}

fn finish_cloud(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<PointCloud, IoError> {
    if points.is_empty() {
        return Err(IoError::EmptyInput);
    }
    if normals.is_empty() {
        Ok(PointCloud::new(points))
    } else {
        Ok(PointCloud::with_normals(points, normals)?)
    }
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
    /// Header line of a `property list` declaration, if any.
    list: bool,
}

struct PlyHeader {
    elements: Vec<PlyElement>,
    body_start: usize,
}

fn parse_ply_header(lines: &[&str]) -> Result<PlyHeader, IoError> {
    if lines.first().map(|l| l.trim()) != Some("ply") {
        return Err(parse_err(1, "missing 'ply' magic"));
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    for (i, raw) in lines.iter().enumerate().skip(1) {
        let line_no = i + 1;
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        match tokens.as_slice() {
            [] => {}
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(IoError::Unsupported(format!("ply format {other}"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| parse_err(line_no, "bad element count"))?;
                elements.push(PlyElement { name: name.to_string(), count, properties: Vec::new(), list: false });
            }
            ["property", "list", _, _, name] => {
                let el = elements.last_mut().ok_or_else(|| parse_err(line_no, "property before element"))?;
                el.properties.push(name.to_string());
                el.list = true;
            }
            ["property", _, name] => {
                let el = elements.last_mut().ok_or_else(|| parse_err(line_no, "property before element"))?;
                el.properties.push(name.to_string());
            }
            ["end_header"] => return Ok(PlyHeader { elements, body_start: i + 1 }),
            _ => return Err(parse_err(line_no, format!("unrecognized header line {raw:?}"))),
        }
    }
    Err(parse_err(lines.len(), "missing end_header"))
}

struct PlyBody {
    vertices: Vec<Vec<f64>>,
    vertex_props: Vec<String>,
    faces: Vec<Vec<usize>>,
}

fn parse_ply_body(text: &str) -> Result<PlyBody, IoError> {
    let lines: Vec<&str> = text.lines().collect();
    let header = parse_ply_header(&lines)?;
    let mut cursor = header.body_start;
    let mut body = PlyBody { vertices: Vec::new(), vertex_props: Vec::new(), faces: Vec::new() };
    let next_line = |cursor: &mut usize| -> Result<(usize, Vec<&str>), IoError> {
        loop {
            let Some(line) = lines.get(*cursor) else {
                return Err(parse_err(*cursor, "unexpected end of file"));
            };
            *cursor += 1;
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if !tokens.is_empty() {
                return Ok((*cursor, tokens));
            }
        }
    };
    for el in &header.elements {
        for _ in 0..el.count {
            let (line_no, tokens) = next_line(&mut cursor)?;
            match el.name.as_str() {
                "vertex" => {
                    if el.list || tokens.len() != el.properties.len() {
                        return Err(parse_err(
                            line_no,
                            format!("expected {} vertex values, found {}", el.properties.len(), tokens.len()),
                        ));
                    }
                    body.vertices.push(parse_floats(line_no, &tokens)?);
                }
                "face" => {
                    let n: usize = tokens[0].parse().map_err(|_| parse_err(line_no, "bad face arity"))?;
                    if tokens.len() < n + 1 {
                        return Err(parse_err(line_no, "face record too short"));
                    }
                    let idx = tokens[1..=n]
                        .iter()
                        .map(|t| t.parse::<usize>().map_err(|_| parse_err(line_no, format!("bad index {t:?}"))))
                        .collect::<Result<Vec<_>, _>>()?;
                    body.faces.push(idx);
                }
                _ => {}
            }
        }
        if el.name == "vertex" {
            body.vertex_props = el.properties.clone();
        }
    }
    Ok(body)
}

fn prop_index(props: &[String], name: &str) -> Option<usize> {
    props.iter().position(|p| p == name)
}

pub fn parse_ply_points(text: &str) -> Result<PointCloud, IoError> {
    let body = parse_ply_body(text)?;
    let props = &body.vertex_props;
    let xyz = ["x", "y", "z"].map(|n| prop_index(props, n));
    let [Some(ix), Some(iy), Some(iz)] = xyz else {
        return Err(parse_err(1, "vertex element lacks x, y, z"));
    };
    let nrm = ["nx", "ny", "nz"].map(|n| prop_index(props, n));
    let points = body.vertices.iter().map(|v| [v[ix], v[iy], v[iz]]).collect();
    let normals = match nrm {
        [Some(a), Some(b), Some(c)] => body.vertices.iter().map(|v| [v[a], v[b], v[c]]).collect(),
        _ => Vec::new(),
    };
    finish_cloud(points, normals)
}

/// Formats with 9 significant digits; identical inputs give identical bytes.
fn fmt_coord(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.8e}");
}

pub fn mesh_to_obj(mesh: &TriangleMesh) -> String {
    let mut out = String::with_capacity(mesh.vertices.len() * 48 + mesh.triangles.len() * 24);
    for v in &mesh.vertices {
        out.push('v');
        for c in v {
            out.push(' ');
            fmt_coord(&mut out, *c);
        }
        out.push('\n');
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    out
}

pub fn mesh_to_ply(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    for v in &mesh.vertices {
        fmt_coord(&mut out, v[0]);
        out.push(' ');
        fmt_coord(&mut out, v[1]);
        out.push(' ');
        fmt_coord(&mut out, v[2]);
        out.push('\n');
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
    }
    out
}

pub fn write_mesh(path: &Path, format: MeshFormat, mesh: &TriangleMesh) -> Result<(), IoError> {
    let text = match format {
        MeshFormat::Obj => mesh_to_obj(mesh),
        MeshFormat::Ply => mesh_to_ply(mesh),
    };
    write_text(path, &text)
}

pub fn read_mesh(path: &Path, format: MeshFormat) -> Result<TriangleMesh, IoError> {
    let text = read_text(path)?;
    match format {
        MeshFormat::Obj => parse_obj(&text),
        MeshFormat::Ply => parse_ply_mesh(&text),
    }
}

fn push_polygon(mesh: &mut TriangleMesh, line_no: usize, idx: &[usize]) -> Result<(), IoError> {
    if idx.len() < 3 {
        return Err(parse_err(line_no, "face with fewer than 3 vertices"));
    }
    for w in 1..idx.len() - 1 {
        mesh.triangles.push([idx[0] as u32, idx[w] as u32, idx[w + 1] as u32]);
    }
    Ok(())
}

/// Reads `v` and `f` records; polygons are fan-triangulated and negative
/// (relative) indices resolved.
pub fn parse_obj(text: &str) -> Result<TriangleMesh, IoError> {
    let mut mesh = TriangleMesh::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let rest: Vec<&str> = tokens.collect();
                if rest.len() < 3 {
                    return Err(parse_err(line_no, "vertex needs 3 coordinates"));
                }
                let v = parse_floats(line_no, &rest[..3])?;
                mesh.vertices.push([v[0], v[1], v[2]]);
            }
            Some("f") => {
                let n = mesh.vertices.len() as i64;
                let idx = tokens
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        let k: i64 = first.parse().map_err(|_| parse_err(line_no, format!("bad index {t:?}")))?;
                        let k = if k < 0 { n + k } else { k - 1 };
                        if k < 0 || k >= n {
                            return Err(parse_err(line_no, format!("index {t} out of range")));
                        }
                        Ok(k as usize)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                push_polygon(&mut mesh, line_no, &idx)?;
            }
            _ => {}
        }
    }
    Ok(mesh)
}

pub fn parse_ply_mesh(text: &str) -> Result<TriangleMesh, IoError> {
    let body = parse_ply_body(text)?;
    let props = &body.vertex_props;
    let [Some(ix), Some(iy), Some(iz)] = ["x", "y", "z"].map(|n| prop_index(props, n)) else {
        return Err(parse_err(1, "vertex element lacks x, y, z"));
    };
    let mut mesh = TriangleMesh {
        vertices: body.vertices.iter().map(|v| [v[ix], v[iy], v[iz]]).collect(),
        triangles: Vec::new(),
    };
    let n = mesh.vertices.len();
    for face in &body.faces {
        if face.iter().any(|&k| k >= n) {
            return Err(parse_err(1, "face index out of range"));
        }
        push_polygon(&mut mesh, 1, face)?;
    }
    Ok(mesh)
}

/// Writes `x y z [nx ny nz]` records.
pub fn write_points_xyz(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let mut out = String::new();
    for (i, p) in cloud.points.iter().enumerate() {
        fmt_coord(&mut out, p[0]);
        for c in &p[1..] {
            out.push(' ');
            fmt_coord(&mut out, *c);
        }
        if let Some(n) = &cloud.normals {
            for c in &n[i] {
                out.push(' ');
                fmt_coord(&mut out, *c);
            }
        }
        out.push('\n');
    }
    write_text(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_three_points() {
        let c = parse_xyz("0 0 0\n1 0 0\n0 1 0\n").unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.normals.is_none());
    }

    #[test]
    fn xyz_non_numeric_reports_line() {
        match parse_xyz("a b c\n") {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_xyz("0 0 0\n\n1 2\n") {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn xyz_empty_input() {
        assert!(matches!(parse_xyz(""), Err(IoError::EmptyInput)));
        assert!(matches!(parse_xyz("# only a comment\n\n"), Err(IoError::EmptyInput)));
    }

    #[test]
    fn xyz_with_normals() {
        let c = parse_xyz("0 0 0 0 0 3\n1 0 0 0 2 0\n").unwrap();
        assert_eq!(c.normals.unwrap(), vec![[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
    }

    #[test]
    fn ply_with_normals() {
        let text = "ply\nformat ascii 1.0\ncomment test\nelement vertex 2\nproperty float x\nproperty float y\n\
                    property float z\nproperty float nx\nproperty float ny\nproperty float nz\nend_header\n\
                    0 0 0 0 0 1\n1 1 1 1 0 0\n";
        let c = parse_ply_points(text).unwrap();
        assert_eq!(c.points[1], [1.0, 1.0, 1.0]);
        assert_eq!(c.normals.unwrap()[1], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn ply_binary_is_unsupported() {
        let text = "ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n";
        assert!(matches!(parse_ply_points(text), Err(IoError::Unsupported(_))));
    }

    #[test]
    fn obj_single_triangle() {
        let mesh = TriangleMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        let text = mesh_to_obj(&mesh);
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).collect::<Vec<_>>(), vec!["f 1 2 3"]);
        assert_eq!(parse_obj(&text).unwrap(), mesh);
    }

    #[test]
    fn empty_mesh_writes_valid_files() {
        let empty = TriangleMesh::default();
        assert_eq!(mesh_to_obj(&empty), "");
        assert_eq!(parse_obj(&mesh_to_obj(&empty)).unwrap(), empty);
        assert_eq!(parse_ply_mesh(&mesh_to_ply(&empty)).unwrap(), empty);
    }

    #[test]
    fn obj_polygons_are_fanned() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 -1\n").unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
    }
}
