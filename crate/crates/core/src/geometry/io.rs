//! XYZ, PLY and OBJ readers and writers.
//!
//! PLY input accepts `ascii` and `binary_little_endian`; output is always
//! ASCII so results diff cleanly. Floats are written in Rust's shortest
//! round-trip form, which makes output byte-stable.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{OrientedPointCloud, PointCloud, TriangleMesh, Vec3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
    Obj,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("xyz") | Some("txt") | Some("pts") => Ok(Self::Xyz),
            Some("ply") => Ok(Self::Ply),
            Some("obj") => Ok(Self::Obj),
            _ => Err(Error::Argument(format!(
                "cannot infer point format from {}",
                path.display()
            ))),
        }
    }
}

/// Everything a reader can pull out of a file.
#[derive(Debug, Default)]
struct RawGeometry {
    vertices: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
    faces: Vec<[usize; 3]>,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read(path: &Path, format: CloudFormat) -> Result<RawGeometry> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        CloudFormat::Xyz => read_xyz(path, &bytes),
        CloudFormat::Obj => read_obj(path, &bytes),
        CloudFormat::Ply => read_ply(path, &bytes),
    }
}

pub fn load_point_cloud(path: impl AsRef<Path>, format: Option<CloudFormat>) -> Result<PointCloud> {
    let path = path.as_ref();
    let format = match format {
        Some(f) => f,
        None => CloudFormat::from_path(path)?,
    };
    let raw = read(path, format)?;
    if raw.vertices.is_empty() {
        return Err(Error::EmptyInput);
    }
    let cloud = PointCloud::new(raw.vertices);
    cloud.check_finite()?;
    Ok(cloud)
}

/// Loads points with per-point normals (PLY `nx ny nz`, or six-column XYZ).
/// Normals are renormalized to unit length.
pub fn load_oriented_cloud(path: impl AsRef<Path>) -> Result<OrientedPointCloud> {
    let path = path.as_ref();
    let raw = read(path, CloudFormat::from_path(path)?)?;
    if raw.vertices.is_empty() {
        return Err(Error::EmptyInput);
    }
    let normals = raw
        .normals
        .ok_or_else(|| Error::Argument(format!("{} carries no normals", path.display())))?;
    let normals = normals
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if len > 0.0 && len.is_finite() {
                Ok(n / len)
            } else {
                Err(Error::Argument(format!("normal {i} has zero length")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    OrientedPointCloud::new(raw.vertices, normals)
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let raw = read(path, CloudFormat::from_path(path)?)?;
    TriangleMesh::new(raw.vertices, raw.faces)
}

fn parse_floats<'a>(
    path: &Path,
    line: usize,
    tokens: impl Iterator<Item = &'a str>,
) -> Result<Vec<f64>> {
    tokens
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| parse_err(path, line, format!("invalid number {t:?}")))
        })
        .collect()
}

fn read_xyz(path: &Path, bytes: &[u8]) -> Result<RawGeometry> {
    let text = std::str::from_utf8(bytes).map_err(|_| parse_err(path, 0, "not valid UTF-8"))?;
    let mut raw = RawGeometry::default();
    let mut normals = Vec::new();
    let mut all_have_normals = true;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values = parse_floats(
            path,
            i + 1,
            line.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty()),
        )?;
        if values.len() < 3 {
            return Err(parse_err(path, i + 1, "expected at least 3 coordinates"));
        }
        raw.vertices.push(Vec3::new(values[0], values[1], values[2]));
        if values.len() >= 6 {
            normals.push(Vec3::new(values[3], values[4], values[5]));
        } else {
            all_have_normals = false;
        }
    }
    if all_have_normals && !normals.is_empty() {
        raw.normals = Some(normals);
    }
    Ok(raw)
}

fn obj_index(path: &Path, line: usize, token: &str, count: usize) -> Result<usize> {
    let head = token.split('/').next().unwrap_or("");
    let idx: i64 = head
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid face index {token:?}")))?;
    let resolved = if idx < 0 { count as i64 + idx } else { idx - 1 };
    if resolved < 0 || resolved as usize >= count {
        return Err(parse_err(path, line, format!("face index {idx} out of range")));
    }
    Ok(resolved as usize)
}

fn read_obj(path: &Path, bytes: &[u8]) -> Result<RawGeometry> {
    let text = std::str::from_utf8(bytes).map_err(|_| parse_err(path, 0, "not valid UTF-8"))?;
    let mut raw = RawGeometry::default();
    let mut normals = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let v = parse_floats(path, i + 1, tokens.take(3))?;
                if v.len() != 3 {
                    return Err(parse_err(path, i + 1, "vertex needs 3 coordinates"));
                }
                raw.vertices.push(Vec3::new(v[0], v[1], v[2]));
            }
            Some("vn") => {
                let v = parse_floats(path, i + 1, tokens.take(3))?;
                if v.len() != 3 {
                    return Err(parse_err(path, i + 1, "normal needs 3 components"));
                }
                normals.push(Vec3::new(v[0], v[1], v[2]));
            }
            Some("f") => {
                let count = raw.vertices.len();
                let idx = tokens
                    .map(|t| obj_index(path, i + 1, t, count))
                    .collect::<Result<Vec<_>>>()?;
                if idx.len() < 3 {
                    return Err(parse_err(path, i + 1, "face needs at least 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    raw.faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    if normals.len() == raw.vertices.len() && !normals.is_empty() {
        raw.normals = Some(normals);
    }
    Ok(raw)
}

#[derive(Debug, Clone, Copy)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

/// Source of PLY values: whitespace tokens (ASCII) or raw bytes (binary).
trait PlyValues {
    fn next(&mut self, ty: Scalar) -> std::result::Result<f64, String>;
    fn line(&self) -> usize;
}

struct AsciiValues<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    tokens: std::vec::IntoIter<&'a str>,
    base: usize,
    line: usize,
}

impl PlyValues for AsciiValues<'_> {
    fn next(&mut self, _ty: Scalar) -> std::result::Result<f64, String> {
        loop {
            if let Some(t) = self.tokens.next() {
                return t.parse::<f64>().map_err(|_| format!("invalid number {t:?}"));
            }
            let (i, line) = self.lines.next().ok_or("unexpected end of file")?;
            self.line = self.base + i + 1;
            self.tokens = line.split_whitespace().collect::<Vec<_>>().into_iter();
        }
    }

    fn line(&self) -> usize {
        self.line
    }
}

struct BinaryValues<'a> {
    data: &'a [u8],
    offset: usize,
    header_lines: usize,
}

impl PlyValues for BinaryValues<'_> {
    fn next(&mut self, ty: Scalar) -> std::result::Result<f64, String> {
        let end = self.offset + ty.size();
        let bytes = self
            .data
            .get(self.offset..end)
            .ok_or("unexpected end of binary payload")?;
        self.offset = end;
        Ok(ty.decode(bytes))
    }

    fn line(&self) -> usize {
        self.header_lines
    }
}

fn read_ply(path: &Path, bytes: &[u8]) -> Result<RawGeometry> {
    let marker = b"end_header";
    let header_end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| parse_err(path, 1, "missing end_header"))?;
    let mut body_start = header_end + marker.len();
    while body_start < bytes.len() && bytes[body_start] != b'\n' {
        body_start += 1;
    }
    body_start += 1;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| parse_err(path, 1, "header is not valid UTF-8"))?;

    let mut elements: Vec<Element> = Vec::new();
    let mut binary = None;
    let header_lines = header.lines().count() + 1;
    for (i, line) in header.lines().enumerate() {
        let lineno = i + 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => {}
            ["ply"] if lineno == 1 => {}
            _ if lineno == 1 => return Err(parse_err(path, 1, "missing 'ply' magic")),
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, _] => {
                return Err(parse_err(path, lineno, format!("unsupported format {other}")))
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| parse_err(path, lineno, "invalid element count"))?,
                properties: Vec::new(),
            }),
            ["property", "list", count_ty, item_ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, lineno, "property before element"))?;
                let (c, t) = Scalar::parse(count_ty)
                    .zip(Scalar::parse(item_ty))
                    .ok_or_else(|| parse_err(path, lineno, "unknown list type"))?;
                el.properties.push(Property::List(name.to_string(), c, t));
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, lineno, "property before element"))?;
                let t = Scalar::parse(ty)
                    .ok_or_else(|| parse_err(path, lineno, format!("unknown type {ty}")))?;
                el.properties.push(Property::Scalar(name.to_string(), t));
            }
            _ => return Err(parse_err(path, lineno, format!("unrecognized header line {line:?}"))),
        }
    }
    let binary = binary.ok_or_else(|| parse_err(path, 2, "missing format line"))?;
    let body = &bytes[body_start.min(bytes.len())..];
    if binary {
        let mut src = BinaryValues {
            data: body,
            offset: 0,
            header_lines,
        };
        read_ply_body(path, &elements, &mut src)
    } else {
        let text =
            std::str::from_utf8(body).map_err(|_| parse_err(path, header_lines, "not UTF-8"))?;
        let mut src = AsciiValues {
            lines: text.lines().enumerate(),
            tokens: Vec::new().into_iter(),
            base: header_lines,
            line: header_lines,
        };
        read_ply_body(path, &elements, &mut src)
    }
}

fn read_ply_body(path: &Path, elements: &[Element], src: &mut dyn PlyValues) -> Result<RawGeometry> {
    let mut raw = RawGeometry::default();
    for el in elements {
        let mut normals = Vec::new();
        for _ in 0..el.count {
            let mut xyz = [f64::NAN; 3];
            let mut nrm = [f64::NAN; 3];
            for prop in &el.properties {
                match prop {
                    Property::Scalar(name, ty) => {
                        let v = src.next(*ty).map_err(|m| parse_err(path, src.line(), m))?;
                        let slot = match name.as_str() {
                            "x" => Some(&mut xyz[0]),
                            "y" => Some(&mut xyz[1]),
                            "z" => Some(&mut xyz[2]),
                            "nx" => Some(&mut nrm[0]),
                            "ny" => Some(&mut nrm[1]),
                            "nz" => Some(&mut nrm[2]),
                            _ => None,
                        };
                        if let Some(slot) = slot {
                            *slot = v;
                        }
                    }
                    Property::List(name, count_ty, item_ty) => {
                        let n = src
                            .next(*count_ty)
                            .map_err(|m| parse_err(path, src.line(), m))?;
                        let mut items = Vec::with_capacity(n as usize);
                        for _ in 0..n as usize {
                            items.push(
                                src.next(*item_ty)
                                    .map_err(|m| parse_err(path, src.line(), m))?,
                            );
                        }
                        if el.name == "face"
                            && (name == "vertex_indices" || name == "vertex_index")
                        {
                            if items.len() < 3 {
                                return Err(parse_err(path, src.line(), "face with < 3 vertices"));
                            }
                            let idx: Vec<usize> = items.iter().map(|&v| v as usize).collect();
                            for k in 1..idx.len() - 1 {
                                raw.faces.push([idx[0], idx[k], idx[k + 1]]);
                            }
                        }
                    }
                }
            }
            if el.name == "vertex" {
                if xyz.iter().any(|v| v.is_nan()) {
                    return Err(parse_err(path, src.line(), "vertex lacks x/y/z"));
                }
                raw.vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
                if nrm.iter().all(|v| !v.is_nan()) {
                    normals.push(Vec3::new(nrm[0], nrm[1], nrm[2]));
                }
            }
        }
        if el.name == "vertex" && !normals.is_empty() && normals.len() == raw.vertices.len() {
            raw.normals = Some(normals);
        }
    }
    let n = raw.vertices.len();
    if let Some(f) = raw.faces.iter().find(|f| f.iter().any(|&v| v >= n)) {
        return Err(parse_err(path, 0, format!("face {f:?} out of range")));
    }
    Ok(raw)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(PathBuf::from(path), e))
}

pub fn write_xyz(path: impl AsRef<Path>, points: &[Vec3]) -> Result<()> {
    let mut out = String::new();
    for p in points {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    write_text(path.as_ref(), &out)
}

/// ASCII PLY point set with optional normals and one optional per-vertex scalar.
pub fn write_ply_points(
    path: impl AsRef<Path>,
    points: &[Vec3],
    normals: Option<&[Vec3]>,
    scalar: Option<(&str, &[f64])>,
) -> Result<()> {
    if normals.is_some_and(|n| n.len() != points.len())
        || scalar.is_some_and(|(_, s)| s.len() != points.len())
    {
        return Err(Error::Argument("attribute length mismatch".into()));
    }
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", points.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if normals.is_some() {
        out.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    if let Some((name, _)) = scalar {
        let _ = writeln!(out, "property double {name}");
    }
    out.push_str("end_header\n");
    for (i, p) in points.iter().enumerate() {
        let _ = write!(out, "{} {} {}", p.x, p.y, p.z);
        if let Some(n) = normals {
            let _ = write!(out, " {} {} {}", n[i].x, n[i].y, n[i].z);
        }
        if let Some((_, s)) = scalar {
            let _ = write!(out, " {}", s[i]);
        }
        out.push('\n');
    }
    write_text(path.as_ref(), &out)
}

pub fn write_ply_mesh(path: impl AsRef<Path>, mesh: &TriangleMesh) -> Result<()> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", mesh.vertices.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    let _ = writeln!(out, "element face {}", mesh.faces.len());
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    for p in &mesh.vertices {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    for [a, b, c] in &mesh.faces {
        let _ = writeln!(out, "3 {a} {b} {c}");
    }
    write_text(path.as_ref(), &out)
}

pub fn write_obj(path: impl AsRef<Path>, mesh: &TriangleMesh) -> Result<()> {
    let mut out = String::new();
    for p in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", p.x, p.y, p.z);
    }
    for [a, b, c] in &mesh.faces {
        let _ = writeln!(out, "f {} {} {}", a + 1, b + 1, c + 1);
    }
    write_text(path.as_ref(), &out)
}
