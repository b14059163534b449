//! PLY point-cloud I/O: ASCII and binary-little-endian, `x`/`y`/`z` coordinates
//! plus an optional integer `instance` label property. Unknown properties and
//! non-vertex elements are skipped on read.

use super::HarnessError;
use crate::geometry::Point3;
use crate::preprocess::PointCloud;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            Self::I8 => bytes[0] as i8 as f64,
            Self::U8 => bytes[0] as f64,
            Self::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Self::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Self::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum PropKind {
    Scalar(Scalar),
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Property {
    name: String,
    kind: PropKind,
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Format(msg.into())
}

/// Reads a PLY file's first `vertex` element into a point cloud. Labels are
/// populated when an `instance` property is present.
pub fn read_ply(path: &Path) -> Result<PointCloud, HarnessError> {
    parse_ply(&std::fs::read(path)?)
}

/// Parses PLY bytes; see [`read_ply`].
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud, HarnessError> {
    let marker = b"end_header";
    let header_end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("missing end_header"))?;
    let mut body_start = header_end + marker.len();
    // Consume the newline (and optional carriage return) terminating the header.
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    } else {
        return Err(bad("end_header is not terminated by a newline"));
    }

    let header =
        std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("header is not valid UTF-8"))?;
    let (format, elements) = parse_header(header)?;
    let body = &bytes[body_start..];
    match format {
        Format::Ascii => read_body_ascii(body, &elements),
        Format::BinaryLe => read_body_binary(body, &elements),
    }
}

fn parse_header(header: &str) -> Result<(Format, Vec<Element>), HarnessError> {
    let mut lines = header.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(bad("not a PLY file (missing magic)"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                format = Some(match tokens.next() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::BinaryLe,
                    Some(other) => return Err(bad(format!("unsupported format {other}"))),
                    None => return Err(bad("format line without a type")),
                });
            }
            Some("element") => {
                let name = tokens.next().ok_or_else(|| bad("element without a name"))?;
                let count: usize = tokens
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| bad(format!("element {name} without a count")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| bad("property before any element"))?;
                let first = tokens
                    .next()
                    .ok_or_else(|| bad("property without a type"))?;
                let (kind, name) = if first == "list" {
                    let count = tokens
                        .next()
                        .and_then(Scalar::parse)
                        .ok_or_else(|| bad("list property without a count type"))?;
                    let item = tokens
                        .next()
                        .and_then(Scalar::parse)
                        .ok_or_else(|| bad("list property without an item type"))?;
                    (PropKind::List { count, item }, tokens.next())
                } else {
                    let scalar = Scalar::parse(first)
                        .ok_or_else(|| bad(format!("unknown property type {first}")))?;
                    (PropKind::Scalar(scalar), tokens.next())
                };
                let name = name.ok_or_else(|| bad("property without a name"))?;
                element.properties.push(Property {
                    name: name.to_string(),
                    kind,
                });
            }
            Some(other) => return Err(bad(format!("unexpected header line: {other}"))),
        }
    }
    let format = format.ok_or_else(|| bad("header has no format line"))?;
    Ok((format, elements))
}

struct VertexColumns {
    x: usize,
    y: usize,
    z: usize,
    instance: Option<usize>,
}

fn vertex_columns(element: &Element) -> Result<VertexColumns, HarnessError> {
    let scalar_index = |name: &str| -> Result<Option<usize>, HarnessError> {
        for (i, p) in element.properties.iter().enumerate() {
            if p.name == name {
                return match p.kind {
                    PropKind::Scalar(_) => Ok(Some(i)),
                    PropKind::List { .. } => Err(bad(format!("property {name} is a list"))),
                };
            }
        }
        Ok(None)
    };
    let required = |name: &str| {
        scalar_index(name)?.ok_or_else(|| bad(format!("vertex element lacks property {name}")))
    };
    Ok(VertexColumns {
        x: required("x")?,
        y: required("y")?,
        z: required("z")?,
        instance: scalar_index("instance")?,
    })
}

fn assemble(element: &Element, rows: Vec<Vec<f64>>) -> Result<PointCloud, HarnessError> {
    let cols = vertex_columns(element)?;
    let mut points = Vec::with_capacity(rows.len());
    let mut labels = cols.instance.map(|_| Vec::with_capacity(rows.len()));
    for row in rows {
        points.push(Point3::new(row[cols.x], row[cols.y], row[cols.z]));
        if let (Some(labels), Some(c)) = (labels.as_mut(), cols.instance) {
            labels.push(row[c] as i32);
        }
    }
    Ok(PointCloud { points, labels })
}

fn read_body_ascii(body: &[u8], elements: &[Element]) -> Result<PointCloud, HarnessError> {
    let text = std::str::from_utf8(body).map_err(|_| bad("ASCII body is not UTF-8"))?;
    let mut tokens = text.split_whitespace();
    let mut next = |what: &str| -> Result<f64, HarnessError> {
        tokens
            .next()
            .ok_or_else(|| bad(format!("unexpected end of data reading {what}")))?
            .parse::<f64>()
            .map_err(|_| bad(format!("non-numeric token reading {what}")))
    };
    for element in elements {
        let is_vertex = element.name == "vertex";
        let mut rows = if is_vertex {
            Vec::with_capacity(element.count)
        } else {
            Vec::new()
        };
        for _ in 0..element.count {
            let mut row = Vec::with_capacity(element.properties.len());
            for prop in &element.properties {
                match prop.kind {
                    PropKind::Scalar(_) => row.push(next(&prop.name)?),
                    PropKind::List { .. } => {
                        let n = next(&prop.name)? as usize;
                        for _ in 0..n {
                            next(&prop.name)?;
                        }
                        row.push(f64::NAN); // placeholder; lists are never extracted
                    }
                }
            }
            if is_vertex {
                rows.push(row);
            }
        }
        if is_vertex {
            return assemble(element, rows);
        }
    }
    Err(bad("no vertex element"))
}

fn read_body_binary(body: &[u8], elements: &[Element]) -> Result<PointCloud, HarnessError> {
    let mut offset = 0usize;
    let mut take = |n: usize| -> Result<&[u8], HarnessError> {
        let slice = body
            .get(offset..offset + n)
            .ok_or_else(|| bad("unexpected end of binary data"))?;
        offset += n;
        Ok(slice)
    };
    for element in elements {
        let is_vertex = element.name == "vertex";
        let mut rows = if is_vertex {
            Vec::with_capacity(element.count)
        } else {
            Vec::new()
        };
        for _ in 0..element.count {
            let mut row = Vec::with_capacity(element.properties.len());
            for prop in &element.properties {
                match prop.kind {
                    PropKind::Scalar(s) => row.push(s.read_le(take(s.size())?)),
                    PropKind::List { count, item } => {
                        let n = count.read_le(take(count.size())?) as usize;
                        take(n * item.size())?;
                        row.push(f64::NAN);
                    }
                }
            }
            if is_vertex {
                rows.push(row);
            }
        }
        if is_vertex {
            return assemble(element, rows);
        }
    }
    Err(bad("no vertex element"))
}

/// Writes a cloud as PLY. Coordinates are stored as 32-bit floats; labels, when
/// present, as a 32-bit integer `instance` property.
pub fn write_ply(path: &Path, cloud: &PointCloud, binary: bool) -> Result<(), HarnessError> {
    if let Some(labels) = &cloud.labels {
        if labels.len() != cloud.points.len() {
            return Err(HarnessError::ShapeMismatch(format!(
                "{} labels for {} points",
                labels.len(),
                cloud.points.len()
            )));
        }
    }
    let mut header = String::new();
    header.push_str("ply\n");
    header.push_str(if binary {
        "format binary_little_endian 1.0\n"
    } else {
        "format ascii 1.0\n"
    });
    let _ = writeln!(header, "element vertex {}", cloud.points.len());
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.labels.is_some() {
        header.push_str("property int instance\n");
    }
    header.push_str("end_header\n");

    let mut out = header.into_bytes();
    for (i, p) in cloud.points.iter().enumerate() {
        let coords = [p.x as f32, p.y as f32, p.z as f32];
        let label = cloud.labels.as_ref().map(|l| l[i]);
        if binary {
            for c in coords {
                out.extend_from_slice(&c.to_le_bytes());
            }
            if let Some(l) = label {
                out.extend_from_slice(&l.to_le_bytes());
            }
        } else {
            let mut line = format!("{} {} {}", coords[0], coords[1], coords[2]);
            if let Some(l) = label {
                let _ = write!(line, " {l}");
            }
            line.push('\n');
            out.extend_from_slice(line.as_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
