//! PLY reading and writing, ASCII and binary little-endian.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::{Gaussian3D, GaussianScene, ReferenceAsset, TriangleMesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

impl PlyFormat {
    fn keyword(self) -> &'static str {
        match self {
            PlyFormat::Ascii => "ascii",
            PlyFormat::BinaryLittleEndian => "binary_little_endian",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
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

    fn name(self) -> &'static str {
        match self {
            Self::I8 => "char",
            Self::U8 => "uchar",
            Self::I16 => "short",
            Self::U16 => "ushort",
            Self::I32 => "int",
            Self::U32 => "uint",
            Self::F32 => "float",
            Self::F64 => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, Self::F32 | Self::F64)
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn write_le(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Self::I8 => out.push(v as i8 as u8),
            Self::U8 => out.push(v as u8),
            Self::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            Self::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
            Self::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
            Self::U32 => out.extend_from_slice(&(v as u32).to_le_bytes()),
            Self::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Self::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }

    fn in_range(self, v: f64) -> bool {
        let (lo, hi) = match self {
            Self::I8 => (i8::MIN as f64, i8::MAX as f64),
            Self::U8 => (0.0, u8::MAX as f64),
            Self::I16 => (i16::MIN as f64, i16::MAX as f64),
            Self::U16 => (0.0, u16::MAX as f64),
            Self::I32 => (i32::MIN as f64, i32::MAX as f64),
            Self::U32 => (0.0, u32::MAX as f64),
            Self::F32 | Self::F64 => return true,
        };
        v.fract() == 0.0 && v >= lo && v <= hi
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PropertyKind {
    Scalar(ScalarType),
    List { count: ScalarType, item: ScalarType },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Property {
    pub name: String,
    pub kind: PropertyKind,
}

impl Property {
    pub fn scalar(name: &str, ty: ScalarType) -> Self {
        Self {
            name: name.into(),
            kind: PropertyKind::Scalar(ty),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Scalar(f64),
    List(Vec<f64>),
}

impl Value {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(v) => Some(*v),
            Value::List(_) => None,
        }
    }
}

/// One element block: its declaration and rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub name: String,
    pub properties: Vec<Property>,
    pub rows: Vec<Vec<Value>>,
}

impl Element {
    pub fn new(name: &str, properties: Vec<Property>) -> Self {
        Self {
            name: name.into(),
            properties,
            rows: Vec::new(),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.properties.iter().position(|p| p.name == name)
    }

    fn err(&self, detail: impl Into<String>) -> Error {
        ply_err(&self.name, detail)
    }

    /// Column of a scalar property.
    pub fn scalars(&self, name: &str) -> Result<Vec<f64>> {
        let k = self
            .index_of(name)
            .ok_or_else(|| self.err(format!("missing property {name}")))?;
        self.rows
            .iter()
            .map(|r| r[k].as_scalar().ok_or_else(|| self.err(format!("property {name} is a list"))))
            .collect()
    }

    fn has_all(&self, names: &[&str]) -> bool {
        names.iter().all(|n| self.index_of(n).is_some())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ply {
    pub format: PlyFormat,
    pub comments: Vec<String>,
    pub elements: Vec<Element>,
}

fn ply_err(element: &str, detail: impl Into<String>) -> Error {
    Error::Ply {
        element: element.into(),
        detail: detail.into(),
    }
}

impl Ply {
    pub fn element(&self, name: &str) -> Option<&Element> {
        self.elements.iter().find(|e| e.name == name)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let (format, comments, decls, body) = parse_header(bytes)?;
        let mut elements = Vec::with_capacity(decls.len());
        match format {
            PlyFormat::Ascii => {
                let text = std::str::from_utf8(body).map_err(|_| ply_err("body", "ASCII body is not UTF-8"))?;
                let mut tokens = text.split_ascii_whitespace();
                for (mut el, count) in decls {
                    el.rows.reserve(count);
                    for row in 0..count {
                        let mut vals = Vec::with_capacity(el.properties.len());
                        for p in &el.properties {
                            let mut next = |ty: ScalarType| -> Result<f64> {
                                let tok = tokens
                                    .next()
                                    .ok_or_else(|| el.err(format!("row {row} ends early at property {}", p.name)))?;
                                let v: f64 = tok
                                    .parse()
                                    .map_err(|_| el.err(format!("row {row}: {tok:?} is not a number for {}", p.name)))?;
                                if ty.is_integer() && !ty.in_range(v) {
                                    return Err(el.err(format!("row {row}: {tok} is not a valid {}", ty.name())));
                                }
                                Ok(v)
                            };
                            vals.push(match p.kind {
                                PropertyKind::Scalar(ty) => Value::Scalar(next(ty)?),
                                PropertyKind::List { count, item } => {
                                    let n = next(count)? as usize;
                                    Value::List((0..n).map(|_| next(item)).collect::<Result<_>>()?)
                                }
                            });
                        }
                        el.rows.push(vals);
                    }
                    elements.push(el);
                }
                if tokens.next().is_some() {
                    return Err(ply_err("body", "trailing data after the last element"));
                }
            }
            PlyFormat::BinaryLittleEndian => {
                let mut pos = 0;
                let mut take = |n: usize, el: &Element, row: usize| -> Result<&[u8]> {
                    if body.len() - pos < n {
                        return Err(el.err(format!("binary data truncated in row {row}")));
                    }
                    let s = &body[pos..pos + n];
                    pos += n;
                    Ok(s)
                };
                for (mut el, count) in decls {
                    el.rows.reserve(count.min(1 << 24));
                    for row in 0..count {
                        let mut vals = Vec::with_capacity(el.properties.len());
                        for p in &el.properties {
                            vals.push(match p.kind {
                                PropertyKind::Scalar(ty) => Value::Scalar(ty.read_le(take(ty.size(), &el, row)?)),
                                PropertyKind::List { count, item } => {
                                    let n = count.read_le(take(count.size(), &el, row)?);
                                    if !(n >= 0.0) {
                                        return Err(el.err(format!("row {row}: negative list length")));
                                    }
                                    let raw = take(n as usize * item.size(), &el, row)?;
                                    Value::List(raw.chunks_exact(item.size()).map(|c| item.read_le(c)).collect())
                                }
                            });
                        }
                        el.rows.push(vals);
                    }
                    elements.push(el);
                }
                if pos != body.len() {
                    return Err(ply_err("body", "trailing data after the last element"));
                }
            }
        }
        Ok(Self {
            format,
            comments,
            elements,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = String::from("ply\n");
        let _ = writeln!(head, "format {} 1.0", self.format.keyword());
        for c in &self.comments {
            let _ = writeln!(head, "comment {c}");
        }
        for el in &self.elements {
            let _ = writeln!(head, "element {} {}", el.name, el.rows.len());
            for p in &el.properties {
                match p.kind {
                    PropertyKind::Scalar(ty) => {
                        let _ = writeln!(head, "property {} {}", ty.name(), p.name);
                    }
                    PropertyKind::List { count, item } => {
                        let _ = writeln!(head, "property list {} {} {}", count.name(), item.name(), p.name);
                    }
                }
            }
        }
        head.push_str("end_header\n");
        let mut out = head.into_bytes();
        for el in &self.elements {
            for (r, row) in el.rows.iter().enumerate() {
                if row.len() != el.properties.len() {
                    return Err(el.err(format!("row {r} has {} values", row.len())));
                }
                let mut line = String::new();
                for (p, v) in el.properties.iter().zip(row) {
                    match (&p.kind, v) {
                        (PropertyKind::Scalar(ty), Value::Scalar(x)) => match self.format {
                            PlyFormat::Ascii => push_ascii(&mut line, *x, *ty),
                            PlyFormat::BinaryLittleEndian => ty.write_le(*x, &mut out),
                        },
                        (PropertyKind::List { count, item }, Value::List(xs)) => match self.format {
                            PlyFormat::Ascii => {
                                push_ascii(&mut line, xs.len() as f64, *count);
                                for x in xs {
                                    push_ascii(&mut line, *x, *item);
                                }
                            }
                            PlyFormat::BinaryLittleEndian => {
                                count.write_le(xs.len() as f64, &mut out);
                                for x in xs {
                                    item.write_le(*x, &mut out);
                                }
                            }
                        },
                        _ => return Err(el.err(format!("row {r}: value kind does not match property {}", p.name))),
                    }
                }
                if self.format == PlyFormat::Ascii {
                    line.push('\n');
                    out.extend_from_slice(line.as_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}

fn push_ascii(line: &mut String, v: f64, ty: ScalarType) {
    if !line.is_empty() {
        line.push(' ');
    }
    match ty {
        // Shortest round-trip representation.
        ScalarType::F64 => {
            let _ = write!(line, "{v:?}");
        }
        ScalarType::F32 => {
            let _ = write!(line, "{:?}", v as f32);
        }
        _ => {
            let _ = write!(line, "{}", v as i64);
        }
    }
}

type Header<'a> = (PlyFormat, Vec<String>, Vec<(Element, usize)>, &'a [u8]);

fn parse_header(bytes: &[u8]) -> Result<Header<'_>> {
    let herr = |d: &str| ply_err("header", d);
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| herr("missing end_header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| herr("header is not UTF-8"))?;
        pos += end + 1;
        let line = line.trim_end_matches('\r').trim();
        if line == "end_header" {
            break;
        }
        lines.push(line);
    }
    let mut it = lines.into_iter();
    if it.next() != Some("ply") {
        return Err(herr("missing ply magic"));
    }
    let mut format = None;
    let mut comments = Vec::new();
    let mut decls: Vec<(Element, usize)> = Vec::new();
    for line in it {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            [] => {}
            ["comment", ..] => comments.push(line["comment".len()..].trim().to_string()),
            ["obj_info", ..] => {}
            ["format", f, "1.0"] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(herr(&format!("unsupported format {other}"))),
                })
            }
            ["element", name, count] => {
                let n: usize = count
                    .parse()
                    .map_err(|_| ply_err(name, format!("bad element count {count:?}")))?;
                decls.push((Element::new(name, Vec::new()), n));
            }
            ["property", "list", c, i, name] => {
                let (el, _) = decls
                    .last_mut()
                    .ok_or_else(|| herr("property declared before any element"))?;
                let (Some(count), Some(item)) = (ScalarType::parse(c), ScalarType::parse(i)) else {
                    return Err(el.err(format!("unknown list types {c} {i} for {name}")));
                };
                if !count.is_integer() {
                    return Err(el.err(format!("list count type of {name} must be an integer")));
                }
                el.properties.push(Property {
                    name: name.to_string(),
                    kind: PropertyKind::List { count, item },
                });
            }
            ["property", ty, name] => {
                let (el, _) = decls
                    .last_mut()
                    .ok_or_else(|| herr("property declared before any element"))?;
                let ty = ScalarType::parse(ty).ok_or_else(|| el.err(format!("unknown type {ty} for {name}")))?;
                el.properties.push(Property::scalar(name, ty));
            }
            _ => return Err(herr(&format!("unrecognised line {line:?}"))),
        }
    }
    let format = format.ok_or_else(|| herr("missing format line"))?;
    Ok((format, comments, decls, &bytes[pos..]))
}

const SCENE_FLOATS: [&str; 13] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity", "red", "green",
];
const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Gaussian scene as a PLY. Scales are stored as logs, opacity as a logit and
/// rotation as the raw quaternion `(w, x, y, z)`, all in double precision.
pub fn scene_to_ply(scene: &GaussianScene, format: PlyFormat) -> Ply {
    let mut props: Vec<Property> = SCENE_FLOATS.iter().map(|n| Property::scalar(n, ScalarType::F64)).collect();
    props.push(Property::scalar("blue", ScalarType::F64));
    props.push(Property::scalar("vs_grad_accum", ScalarType::F64));
    props.push(Property::scalar("vs_grad_count", ScalarType::U32));
    let mut el = Element::new("vertex", props);
    for (i, g) in scene.gaussians.iter().enumerate() {
        let p = g.to_params();
        let mut row: Vec<Value> = p.iter().map(|&v| Value::Scalar(v)).collect();
        row.push(Value::Scalar(scene.grad_accum[i]));
        row.push(Value::Scalar(scene.grad_count[i] as f64));
        el.rows.push(row);
    }
    Ply {
        format,
        comments: vec![format!("step {}", scene.step)],
        elements: vec![el],
    }
}

pub fn scene_from_ply(ply: &Ply) -> Result<GaussianScene> {
    let el = ply.element("vertex").ok_or_else(|| ply_err("vertex", "missing vertex element"))?;
    let col = |n: &str| el.scalars(n);
    let pos = [col("x")?, col("y")?, col("z")?];
    let scale = [col("scale_0")?, col("scale_1")?, col("scale_2")?];
    let rot = [col("rot_0")?, col("rot_1")?, col("rot_2")?, col("rot_3")?];
    let opacity = col("opacity")?;
    let color = if el.has_all(&["red", "green", "blue"]) {
        let [r, g, b] = [col("red")?, col("green")?, col("blue")?];
        let ints = ["red", "green", "blue"].iter().any(|n| {
            matches!(el.properties[el.index_of(n).unwrap()].kind, PropertyKind::Scalar(t) if t.is_integer())
        });
        let k = if ints { 1.0 / 255.0 } else { 1.0 };
        [r, g, b].map(|c| c.into_iter().map(|v| v * k).collect::<Vec<_>>())
    } else if el.has_all(&["f_dc_0", "f_dc_1", "f_dc_2"]) {
        [col("f_dc_0")?, col("f_dc_1")?, col("f_dc_2")?].map(|c| c.into_iter().map(|v| 0.5 + SH_C0 * v).collect())
    } else {
        return Err(el.err("missing color properties (red/green/blue or f_dc_0..2)"));
    };
    let n = el.rows.len();
    let mut gaussians = Vec::with_capacity(n);
    for i in 0..n {
        let g = Gaussian3D {
            mean: Vector3::new(pos[0][i], pos[1][i], pos[2][i]),
            log_scale: Vector3::new(scale[0][i], scale[1][i], scale[2][i]),
            rotation: [rot[0][i], rot[1][i], rot[2][i], rot[3][i]],
            opacity_logit: opacity[i],
            color: Vector3::new(color[0][i], color[1][i], color[2][i]),
        };
        if !g.to_params().iter().all(|v| v.is_finite()) {
            return Err(el.err(format!("row {i} has non-finite values")));
        }
        gaussians.push(g);
    }
    let mut scene = GaussianScene::new(gaussians);
    if el.index_of("vs_grad_accum").is_some() {
        scene.grad_accum = col("vs_grad_accum")?;
    }
    if el.index_of("vs_grad_count").is_some() {
        scene.grad_count = col("vs_grad_count")?.into_iter().map(|v| v as u32).collect();
    }
    for c in &ply.comments {
        if let Some(s) = c.strip_prefix("step ") {
            scene.step = s.trim().parse().map_err(|_| ply_err("header", format!("bad step comment {c:?}")))?;
        }
    }
    Ok(scene)
}

pub fn write_scene(scene: &GaussianScene, path: &Path, format: PlyFormat) -> Result<()> {
    scene_to_ply(scene, format).write(path)
}

pub fn read_scene(path: &Path) -> Result<GaussianScene> {
    scene_from_ply(&Ply::read(path)?)
}

/// Raw point cloud with optional faces.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
}

/// Default color for uncolored points.
pub const DEFAULT_POINT_COLOR: f64 = 0.7;

pub fn pointcloud_from_ply(ply: &Ply) -> Result<PointCloud> {
    let el = ply.element("vertex").ok_or_else(|| ply_err("vertex", "missing vertex element"))?;
    let xs = [el.scalars("x")?, el.scalars("y")?, el.scalars("z")?];
    let points: Vec<Vector3<f64>> = (0..el.rows.len()).map(|i| Vector3::new(xs[0][i], xs[1][i], xs[2][i])).collect();
    let colors = if el.has_all(&["red", "green", "blue"]) {
        let ch = ["red", "green", "blue"].map(|n| {
            let k = el.index_of(n).unwrap();
            let scale = match el.properties[k].kind {
                PropertyKind::Scalar(ScalarType::U8) => 1.0 / 255.0,
                PropertyKind::Scalar(ScalarType::U16) => 1.0 / 65535.0,
                _ => 1.0,
            };
            el.scalars(n).map(|c| c.into_iter().map(|v| v * scale).collect::<Vec<_>>())
        });
        let [r, g, b] = ch;
        let (r, g, b) = (r?, g?, b?);
        (0..points.len()).map(|i| Vector3::new(r[i], g[i], b[i])).collect()
    } else {
        vec![Vector3::repeat(DEFAULT_POINT_COLOR); points.len()]
    };
    let mut faces = Vec::new();
    if let Some(fe) = ply.element("face") {
        let k = fe
            .index_of("vertex_indices")
            .or_else(|| fe.index_of("vertex_index"))
            .ok_or_else(|| fe.err("missing vertex_indices"))?;
        for (r, row) in fe.rows.iter().enumerate() {
            let Value::List(idx) = &row[k] else {
                return Err(fe.err(format!("row {r}: vertex_indices is not a list")));
            };
            if idx.len() < 3 {
                return Err(fe.err(format!("row {r}: face has {} vertices", idx.len())));
            }
            if idx.iter().any(|&v| v < 0.0 || v as usize >= points.len()) {
                return Err(fe.err(format!("row {r}: vertex index out of range")));
            }
            // Fan triangulation for polygons.
            for j in 1..idx.len() - 1 {
                faces.push([idx[0] as u32, idx[j] as u32, idx[j + 1] as u32]);
            }
        }
    }
    Ok(PointCloud { points, colors, faces })
}

pub fn pointcloud_to_ply(cloud: &PointCloud, format: PlyFormat) -> Ply {
    let mut v = Element::new(
        "vertex",
        ["x", "y", "z"]
            .iter()
            .map(|n| Property::scalar(n, ScalarType::F32))
            .chain(["red", "green", "blue"].iter().map(|n| Property::scalar(n, ScalarType::U8)))
            .collect(),
    );
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        let mut row: Vec<Value> = p.iter().map(|&x| Value::Scalar(x)).collect();
        row.extend(c.iter().map(|&x| Value::Scalar((x.clamp(0.0, 1.0) * 255.0).round())));
        v.rows.push(row);
    }
    let mut elements = vec![v];
    if !cloud.faces.is_empty() {
        let mut f = Element::new(
            "face",
            vec![Property {
                name: "vertex_indices".into(),
                kind: PropertyKind::List {
                    count: ScalarType::U8,
                    item: ScalarType::I32,
                },
            }],
        );
        for t in &cloud.faces {
            f.rows.push(vec![Value::List(t.iter().map(|&i| i as f64).collect())]);
        }
        elements.push(f);
    }
    Ply {
        format,
        comments: Vec::new(),
        elements,
    }
}

impl PointCloud {
    pub fn into_asset(self, caption: &str) -> Result<ReferenceAsset> {
        if self.faces.is_empty() {
            ReferenceAsset::from_points(self.points, self.colors, caption)
        } else {
            let mesh = TriangleMesh {
                vertices: self.points,
                colors: self.colors,
                faces: self.faces,
            };
            ReferenceAsset::from_mesh(mesh, caption)
        }
    }
}

pub fn read_pointcloud(path: &Path) -> Result<PointCloud> {
    pointcloud_from_ply(&Ply::read(path)?)
}

pub fn write_pointcloud(cloud: &PointCloud, path: &Path, format: PlyFormat) -> Result<()> {
    pointcloud_to_ply(cloud, format).write(path)
}
