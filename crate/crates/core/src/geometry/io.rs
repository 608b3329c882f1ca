//! ASCII OBJ, PLY and XYZ readers and writers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::{dedup_points, has_duplicates, PointCloud};
use crate::error::{Error, Result};
use crate::Vec3;

/// Supported on-disk formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Obj,
    Ply,
    Xyz,
}

impl Format {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Format> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        ext.parse().ok()
    }

    pub fn extension(&self) -> &'static str {
        match self {
            Format::Obj => "obj",
            Format::Ply => "ply",
            Format::Xyz => "xyz",
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "obj" => Ok(Format::Obj),
            "ply" => Ok(Format::Ply),
            "xyz" | "txt" => Ok(Format::Xyz),
            other => Err(Error::InvalidConfig(format!("unknown point-cloud format '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Merge repeated vertices instead of failing with `DegenerateInput`.
    pub dedup: bool,
}

struct Raw {
    points: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
}

pub fn load_pointcloud(path: &Path, format: Format, options: LoadOptions) -> Result<PointCloud> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(text)
        .map_err(|_| Error::parse(path, 0, "not an ASCII/UTF-8 file (binary formats are unsupported)"))?;
    let raw = match format {
        Format::Obj => parse_obj(path, &text)?,
        Format::Ply => parse_ply(path, &text)?,
        Format::Xyz => parse_xyz(path, &text)?,
    };
    if raw.points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let Raw { mut points, mut faces } = raw;
    if has_duplicates(&points) {
        if !options.dedup {
            return Err(Error::DegenerateInput(format!(
                "{} contains duplicate vertices",
                path.display()
            )));
        }
        let (kept, remap) = dedup_points(&points);
        points = kept;
        faces = faces
            .into_iter()
            .map(|f| f.map(|v| remap[v]))
            .filter(|f| f[0] != f[1] && f[1] != f[2] && f[0] != f[2])
            .collect();
    }
    PointCloud::new(points)?.with_faces(faces)
}

pub fn save_pointcloud(cloud: &PointCloud, path: &Path, format: Format) -> Result<()> {
    let mut out = String::new();
    match format {
        Format::Obj => {
            for p in cloud.points() {
                writeln!(out, "v {:?} {:?} {:?}", p.x, p.y, p.z).unwrap();
            }
            for f in cloud.faces() {
                writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
            }
        }
        Format::Ply => {
            out.push_str("ply\nformat ascii 1.0\n");
            writeln!(out, "element vertex {}", cloud.len()).unwrap();
            out.push_str("property double x\nproperty double y\nproperty double z\n");
            if !cloud.faces().is_empty() {
                writeln!(out, "element face {}", cloud.faces().len()).unwrap();
                out.push_str("property list uchar int vertex_indices\n");
            }
            out.push_str("end_header\n");
            for p in cloud.points() {
                writeln!(out, "{:?} {:?} {:?}", p.x, p.y, p.z).unwrap();
            }
            for f in cloud.faces() {
                writeln!(out, "3 {} {} {}", f[0], f[1], f[2]).unwrap();
            }
        }
        Format::Xyz => {
            for p in cloud.points() {
                writeln!(out, "{:?} {:?} {:?}", p.x, p.y, p.z).unwrap();
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn parse_f64(path: &Path, line: usize, tok: Option<&str>) -> Result<f64> {
    let tok = tok.ok_or_else(|| Error::parse(path, line, "missing coordinate"))?;
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::parse(path, line, format!("bad number '{tok}'")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("non-finite coordinate '{tok}'")));
    }
    Ok(v)
}

fn parse_vertex<'a>(path: &Path, line: usize, toks: &mut impl Iterator<Item = &'a str>) -> Result<Vec3> {
    Ok(Vec3::new(
        parse_f64(path, line, toks.next())?,
        parse_f64(path, line, toks.next())?,
        parse_f64(path, line, toks.next())?,
    ))
}

/// Fan-triangulates a polygon after bounds-checking every index.
fn push_polygon(
    path: &Path,
    line: usize,
    poly: &[usize],
    n_vertices: usize,
    faces: &mut Vec<[usize; 3]>,
) -> Result<()> {
    if poly.len() < 3 {
        return Err(Error::parse(path, line, "face with fewer than 3 vertices"));
    }
    if let Some(&bad) = poly.iter().find(|&&v| v >= n_vertices) {
        return Err(Error::parse(
            path,
            line,
            format!("face index {} out of range ({} vertices)", bad + 1, n_vertices),
        ));
    }
    for k in 1..poly.len() - 1 {
        faces.push([poly[0], poly[k], poly[k + 1]]);
    }
    Ok(())
}

fn parse_obj(path: &Path, text: &str) -> Result<Raw> {
    let mut points = Vec::new();
    let mut polys = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => points.push(parse_vertex(path, lineno, &mut toks)?),
            Some("f") => {
                let mut poly = Vec::new();
                for tok in toks {
                    let idx = tok.split('/').next().unwrap_or("");
                    let idx: i64 = idx
                        .parse()
                        .map_err(|_| Error::parse(path, lineno, format!("bad face index '{tok}'")))?;
                    // OBJ is 1-based; negative indices count back from the latest vertex.
                    let resolved = match idx {
                        0 => return Err(Error::parse(path, lineno, "face index 0")),
                        i if i > 0 => (i - 1) as usize,
                        i => {
                            let back = (-i) as usize;
                            if back > points.len() {
                                return Err(Error::parse(path, lineno, format!("face index {i} out of range")));
                            }
                            points.len() - back
                        }
                    };
                    poly.push(resolved);
                }
                polys.push((lineno, poly));
            }
            _ => {}
        }
    }
    let mut faces = Vec::new();
    for (lineno, poly) in polys {
        push_polygon(path, lineno, &poly, points.len(), &mut faces)?;
    }
    Ok(Raw { points, faces })
}

fn parse_xyz(path: &Path, text: &str) -> Result<Raw> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut toks = trimmed.split_whitespace();
        points.push(parse_vertex(path, i + 1, &mut toks)?);
        if toks.next().is_some() {
            return Err(Error::parse(path, i + 1, "expected exactly three values"));
        }
    }
    Ok(Raw {
        points,
        faces: Vec::new(),
    })
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
}

fn parse_ply(path: &Path, text: &str) -> Result<Raw> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(Error::parse(path, 1, "missing 'ply' magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    loop {
        let (i, line) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 0, "unterminated header"))?;
        let lineno = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", "1.0"] => saw_format = true,
            ["format", other, ..] => {
                return Err(Error::parse(path, lineno, format!("unsupported PLY format '{other}'")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, "bad element count"))?,
                properties: Vec::new(),
            }),
            ["property", "list", _, _, name] | ["property", _, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(path, lineno, "property before element"))?;
                el.properties.push(name.to_string());
            }
            ["end_header"] => break,
            _ => return Err(Error::parse(path, lineno, format!("unexpected header line '{line}'"))),
        }
    }
    if !saw_format {
        return Err(Error::parse(path, 0, "missing format line"));
    }

    let mut points = Vec::new();
    let mut polys = Vec::new();
    for el in &elements {
        for _ in 0..el.count {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("truncated '{}' element", el.name)))?;
            let lineno = i + 1;
            let toks: Vec<&str> = line.split_whitespace().collect();
            match el.name.as_str() {
                "vertex" => {
                    let prop = |name: &str| -> Result<f64> {
                        let k = el
                            .properties
                            .iter()
                            .position(|p| p == name)
                            .ok_or_else(|| Error::parse(path, lineno, format!("vertex lacks '{name}'")))?;
                        parse_f64(path, lineno, toks.get(k).copied())
                    };
                    points.push(Vec3::new(prop("x")?, prop("y")?, prop("z")?));
                }
                "face" => {
                    let count: usize = toks
                        .first()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::parse(path, lineno, "bad face record"))?;
                    if toks.len() < count + 1 {
                        return Err(Error::parse(path, lineno, "short face record"));
                    }
                    let poly = toks[1..=count]
                        .iter()
                        .map(|t| t.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::parse(path, lineno, "bad face index"))?;
                    polys.push((lineno, poly));
                }
                _ => {}
            }
        }
    }
    let mut faces = Vec::new();
    for (lineno, poly) in polys {
        push_polygon(path, lineno, &poly, points.len(), &mut faces)?;
    }
    Ok(Raw { points, faces })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn obj_triangle() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "t.obj", "# tri\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n");
        let c = load_pointcloud(&p, Format::Obj, LoadOptions::default()).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.faces(), &[[0, 1, 2]]);
    }

    #[test]
    fn obj_slash_and_negative_indices() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "t.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1/1/1 2//2 -1 -2\n");
        let c = load_pointcloud(&p, Format::Obj, LoadOptions::default()).unwrap();
        assert_eq!(c.faces(), &[[0, 1, 3], [0, 3, 2]]);
    }

    #[test]
    fn obj_face_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "t.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n");
        let err = load_pointcloud(&p, Format::Obj, LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn xyz_two_points() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "t.xyz", "0 0 0\n1 0 0");
        let c = load_pointcloud(&p, Format::Xyz, LoadOptions::default()).unwrap();
        assert_eq!(c.points(), &[Vec3::zeros(), Vec3::x()]);
        assert!(c.faces().is_empty());
    }

    #[test]
    fn malformed_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "bad.xyz", "0 0\n");
        assert!(matches!(
            load_pointcloud(&p, Format::Xyz, LoadOptions::default()),
            Err(Error::Parse { .. })
        ));
        let p = write(&dir, "empty.xyz", "# nothing\n");
        assert!(matches!(
            load_pointcloud(&p, Format::Xyz, LoadOptions::default()),
            Err(Error::EmptyCloud)
        ));
        let p = write(&dir, "bin.ply", "ply\nformat binary_little_endian 1.0\nend_header\n");
        assert!(matches!(
            load_pointcloud(&p, Format::Ply, LoadOptions::default()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn duplicates_rejected_or_merged() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.obj", "v 0 0 0\nv 1 0 0\nv 0 0 0\nv 0 1 0\nf 1 2 4\nf 3 2 4\n");
        assert!(matches!(
            load_pointcloud(&p, Format::Obj, LoadOptions::default()),
            Err(Error::DegenerateInput(_))
        ));
        let c = load_pointcloud(&p, Format::Obj, LoadOptions { dedup: true }).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.faces(), &[[0, 1, 2], [0, 1, 2]]);
    }

    #[test]
    fn ply_with_extra_properties() {
        let dir = tempfile::tempdir().unwrap();
        let body = "ply\nformat ascii 1.0\ncomment hi\nelement vertex 3\nproperty float x\nproperty float y\n\
                    property float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\n\
                    end_header\n0 0 0 255\n1 0 0 0\n0 1 0 7\n3 0 1 2\n";
        let p = write(&dir, "t.ply", body);
        let c = load_pointcloud(&p, Format::Ply, LoadOptions::default()).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.faces(), &[[0, 1, 2]]);
    }

    #[test]
    fn round_trip_all_formats() {
        let dir = tempfile::tempdir().unwrap();
        let c = PointCloud::new(vec![
            Vec3::new(0.1, -2.5e-7, 3.0),
            Vec3::new(1.0 / 3.0, 2.0, 1e12),
            Vec3::new(-4.0, 0.0, 0.5),
        ])
        .unwrap()
        .with_faces(vec![[0, 1, 2]])
        .unwrap();
        for fmt in [Format::Obj, Format::Ply, Format::Xyz] {
            let p = dir.path().join(format!("c.{}", fmt.extension()));
            save_pointcloud(&c, &p, fmt).unwrap();
            let back = load_pointcloud(&p, fmt, LoadOptions::default()).unwrap();
            assert_eq!(back.points(), c.points());
            if fmt != Format::Xyz {
                assert_eq!(back.faces(), c.faces());
            }
        }
    }

    #[test]
    fn unwritable_directory() {
        let c = PointCloud::new(vec![Vec3::zeros()]).unwrap();
        let err = save_pointcloud(&c, Path::new("/nonexistent-dir/x/y.obj"), Format::Obj).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(Format::from_path(Path::new("a/b.PLY")), Some(Format::Ply));
        assert_eq!(Format::from_path(Path::new("a/b")), None);
    }
}
