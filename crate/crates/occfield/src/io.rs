//! On-disk formats: binary PLY point-cloud frames and meshes, plain-text
//! pose files, and helpers shared by the CLI.
//!
//! Frames store float32 x/y/z in sensor coordinates, one `frame_NNNNNN.ply`
//! per frame. Poses are one line per frame: `index tx ty tz qx qy qz qw`
//! with a unit quaternion. Readers reject malformed input instead of
//! repairing it; the only exception is quaternion renormalization within a
//! small tolerance, which warns. Writers are deterministic byte for byte.
//!
//! # Example
//!
//! ```
//! use nalgebra::Vector3;
//! use occfield::io::{read_frames, write_frames, PointCloudFrame};
//!
//! let dir = tempfile::tempdir().unwrap();
//! let frames = vec![PointCloudFrame::new(vec![Vector3::new(1.0, 2.0, 3.0)])];
//! write_frames(&frames, dir.path())?;
//! assert_eq!(read_frames(dir.path())?, frames);
//! # Ok::<(), occfield::Error>(())
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::geometry::PoseSE3;
use crate::mesher::TriangleMesh;
use crate::{Error, Result};

/// One LiDAR-style frame: points in the sensor coordinate frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloudFrame {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloudFrame {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.ply")
}

/// Writes one binary PLY per frame into `dir` (created if missing), named
/// `frame_000000.ply`, `frame_000001.ply`, ... Coordinates are stored as
/// float32.
pub fn write_frames(frames: &[PointCloudFrame], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in frames.iter().enumerate() {
        let path = dir.join(frame_file_name(i));
        write_cloud_ply(&frame.points, &path)?;
    }
    Ok(())
}

/// Loads every `*.ply` in `dir` in filename order.
pub fn read_frames(dir: &Path) -> Result<Vec<PointCloudFrame>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ply"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no .ply frames in {}",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| read_cloud_ply(p).map(PointCloudFrame::new))
        .collect()
}

fn write_cloud_ply(points: &[Vector3<f64>], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    )
    .map_err(io_err)?;
    for p in points {
        for c in 0..3 {
            w.write_all(&(p[c] as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

fn read_cloud_ply(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let (header, mut reader) = read_ply_header(path)?;
    let vertex_count = header.vertex_count;
    if header.face_count.is_some() {
        return Err(Error::parse(path, "unexpected face element in frame file"));
    }
    if header.vertex_properties != ["x", "y", "z"] {
        return Err(Error::parse(
            path,
            format!(
                "expected float x/y/z vertex properties, got {:?}",
                header.vertex_properties
            ),
        ));
    }
    let mut points = Vec::with_capacity(vertex_count);
    let mut buf = [0u8; 12];
    for i in 0..vertex_count {
        reader.read_exact(&mut buf).map_err(|_| {
            Error::parse(
                path,
                format!(
                    "truncated vertex data at point {i} (byte offset {})",
                    header.body_offset + i * 12
                ),
            )
        })?;
        let x = f32::from_le_bytes(buf[0..4].try_into().unwrap()) as f64;
        let y = f32::from_le_bytes(buf[4..8].try_into().unwrap()) as f64;
        let z = f32::from_le_bytes(buf[8..12].try_into().unwrap()) as f64;
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::parse(path, format!("non-finite point {i}")));
        }
        points.push(Vector3::new(x, y, z));
    }
    Ok(points)
}

struct PlyHeader {
    vertex_count: usize,
    vertex_properties: Vec<String>,
    face_count: Option<usize>,
    body_offset: usize,
}

fn read_ply_header(path: &Path) -> Result<(PlyHeader, BufReader<fs::File>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut offset = 0usize;
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<fs::File>| -> Result<String> {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::parse(
                path,
                format!("truncated header at byte offset {offset}"),
            ));
        }
        offset += n;
        Ok(line.trim_end().to_string())
    };

    if next_line(&mut reader)? != "ply" {
        return Err(Error::parse(path, "missing 'ply' magic"));
    }
    if next_line(&mut reader)? != "format binary_little_endian 1.0" {
        return Err(Error::parse(
            path,
            "expected 'format binary_little_endian 1.0'",
        ));
    }

    let mut vertex_count = None;
    let mut face_count = None;
    let mut vertex_properties = Vec::new();
    let mut current_element = String::new();
    loop {
        let l = next_line(&mut reader)?;
        if l == "end_header" {
            break;
        }
        let fields: Vec<&str> = l.split_whitespace().collect();
        match fields.as_slice() {
            ["comment", ..] => {}
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| Error::parse(path, format!("bad element count in '{l}'")))?;
                current_element = name.to_string();
                match *name {
                    "vertex" => vertex_count = Some(count),
                    "face" => face_count = Some(count),
                    other => {
                        return Err(Error::parse(path, format!("unsupported element '{other}'")))
                    }
                }
            }
            ["property", "float", name] if current_element == "vertex" => {
                vertex_properties.push(name.to_string());
            }
            ["property", "list", "uchar", "int", _] if current_element == "face" => {}
            _ => return Err(Error::parse(path, format!("unsupported header line '{l}'"))),
        }
    }
    let vertex_count =
        vertex_count.ok_or_else(|| Error::parse(path, "header missing vertex element"))?;
    Ok((
        PlyHeader {
            vertex_count,
            vertex_properties,
            face_count,
            body_offset: offset,
        },
        reader,
    ))
}

/// Rounds to 13 significant digits so that write -> read -> write is
/// byte-stable: matrix <-> quaternion conversion perturbs components by
/// ~1e-16, which shortest-round-trip printing would otherwise surface as
/// spurious last-digit churn.
fn round_component(v: f64) -> f64 {
    format!("{v:.12e}").parse().expect("formatted float")
}

/// Writes poses as `index tx ty tz qx qy qz qw` text lines.
pub fn write_poses(poses: &[PoseSE3], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (i, pose) in poses.iter().enumerate() {
        let mut q = UnitQuaternion::from_matrix(&pose.rotation).into_inner();
        // Canonical sign: the conversion is free to negate the whole
        // quaternion, which would flip every printed digit.
        if q.w < 0.0 || (q.w == 0.0 && (q.i < 0.0 || (q.i == 0.0 && (q.j < 0.0 || (q.j == 0.0 && q.k < 0.0))))) {
            q = -q;
        }
        let t = pose.translation;
        writeln!(
            w,
            "{i} {} {} {} {} {} {} {}",
            t.x,
            t.y,
            t.z,
            round_component(q.i),
            round_component(q.j),
            round_component(q.k),
            round_component(q.w)
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a pose file written by [`write_poses`]. Quaternions with norm
/// error above 1e-3 are rejected; smaller deviations are renormalized with
/// a warning.
pub fn read_poses(path: &Path) -> Result<Vec<PoseSE3>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: String| Error::parse(path, format!("line {}: {msg}", lineno + 1));
        if fields.len() != 8 {
            return Err(err(format!("expected 8 fields, got {}", fields.len())));
        }
        let index: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad frame index '{}'", fields[0])))?;
        if index != poses.len() {
            return Err(err(format!(
                "frame index {index} out of order (expected {})",
                poses.len()
            )));
        }
        let mut vals = [0.0f64; 7];
        for (v, field) in vals.iter_mut().zip(&fields[1..]) {
            *v = field
                .parse()
                .map_err(|_| err(format!("bad number '{field}'")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value '{field}'")));
            }
        }
        let q = Quaternion::new(vals[6], vals[3], vals[4], vals[5]);
        let norm_err = (q.norm() - 1.0).abs();
        if norm_err > 1e-3 {
            return Err(err(format!("quaternion norm off by {norm_err:.2e}")));
        }
        if norm_err > 1e-6 {
            eprintln!(
                "warning: {} line {}: renormalizing quaternion (norm error {norm_err:.2e})",
                path.display(),
                lineno + 1
            );
        }
        let rotation: Matrix3<f64> = UnitQuaternion::from_quaternion(q)
            .to_rotation_matrix()
            .into_inner();
        poses.push(PoseSE3::new(
            rotation,
            Vector3::new(vals[0], vals[1], vals[2]),
        ));
    }
    if poses.is_empty() {
        return Err(Error::EmptyInput(format!("no poses in {}", path.display())));
    }
    Ok(poses)
}

/// Writes a mesh as binary little-endian PLY with float32 vertices,
/// optional float32 normals, and uchar-counted int32 faces.
pub fn write_mesh(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    mesh.validate()?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n",
        mesh.vertices.len()
    )
    .map_err(io_err)?;
    if mesh.normals.is_some() {
        write!(
            w,
            "property float nx\nproperty float ny\nproperty float nz\n"
        )
        .map_err(io_err)?;
    }
    write!(
        w,
        "element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.triangles.len()
    )
    .map_err(io_err)?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in 0..3 {
            w.write_all(&(v[c] as f32).to_le_bytes()).map_err(io_err)?;
        }
        if let Some(normals) = &mesh.normals {
            for c in 0..3 {
                w.write_all(&(normals[i][c] as f32).to_le_bytes())
                    .map_err(io_err)?;
            }
        }
    }
    for t in &mesh.triangles {
        w.write_all(&[3u8]).map_err(io_err)?;
        for &v in t {
            w.write_all(&(v as i32).to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Reads a mesh written by [`write_mesh`].
pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    let (header, mut reader) = read_ply_header(path)?;
    let has_normals = match header.vertex_properties.as_slice() {
        [x, y, z] if [x, y, z] == [&"x", &"y", &"z"] => false,
        [x, y, z, nx, ny, nz]
            if [x, y, z, nx, ny, nz] == [&"x", &"y", &"z", &"nx", &"ny", &"nz"] =>
        {
            true
        }
        other => {
            return Err(Error::parse(
                path,
                format!("unsupported vertex layout {other:?}"),
            ))
        }
    };
    let face_count = header
        .face_count
        .ok_or_else(|| Error::parse(path, "mesh file missing face element"))?;

    let mut mesh = TriangleMesh::default();
    if has_normals {
        mesh.normals = Some(Vec::with_capacity(header.vertex_count));
    }
    let stride = if has_normals { 24 } else { 12 };
    let mut buf = vec![0u8; stride];
    for i in 0..header.vertex_count {
        reader
            .read_exact(&mut buf)
            .map_err(|_| Error::parse(path, format!("truncated vertex data at vertex {i}")))?;
        let f = |k: usize| f32::from_le_bytes(buf[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        let v = Vector3::new(f(0), f(1), f(2));
        if !v.iter().all(|c| c.is_finite()) {
            return Err(Error::parse(path, format!("non-finite vertex {i}")));
        }
        mesh.vertices.push(v);
        if let Some(normals) = &mut mesh.normals {
            normals.push(Vector3::new(f(3), f(4), f(5)));
        }
    }
    let mut count = [0u8; 1];
    let mut idx = [0u8; 12];
    for i in 0..face_count {
        reader
            .read_exact(&mut count)
            .map_err(|_| Error::parse(path, format!("truncated face data at face {i}")))?;
        if count[0] != 3 {
            return Err(Error::parse(
                path,
                format!("face {i} has {} vertices, expected 3", count[0]),
            ));
        }
        reader
            .read_exact(&mut idx)
            .map_err(|_| Error::parse(path, format!("truncated face data at face {i}")))?;
        let mut tri = [0usize; 3];
        for (k, t) in tri.iter_mut().enumerate() {
            let raw = i32::from_le_bytes(idx[4 * k..4 * k + 4].try_into().unwrap());
            if raw < 0 || raw as usize >= mesh.vertices.len() {
                return Err(Error::parse(
                    path,
                    format!("face {i} references vertex {raw} out of range"),
                ));
            }
            *t = raw as usize;
        }
        mesh.triangles.push(tri);
    }
    Ok(mesh)
}

/// Converts a pose to the quaternion used in pose files (for tests and the
/// CLI's human-readable output).
pub fn pose_to_quaternion(pose: &PoseSE3) -> UnitQuaternion<f64> {
    UnitQuaternion::from_matrix(&pose.rotation)
}

/// Rotation matrix from a pose-file quaternion.
pub fn rotation_from_quaternion(q: &UnitQuaternion<f64>) -> Rotation3<f64> {
    q.to_rotation_matrix()
}
