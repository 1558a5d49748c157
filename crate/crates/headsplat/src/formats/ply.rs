//! PLY scan clouds, ASCII or binary little-endian.
//!
//! The `vertex` element must carry `x`, `y`, `z` and may carry
//! `confidence` and `keep` (nonzero = keep). Other scalar properties and
//! elements are skipped; list properties are only allowed in elements that
//! follow `vertex`.

use std::path::Path;

use headsplat_core::eval::ScanCloud;
use headsplat_core::Vec3;

use super::{read_bytes, write_file};
use crate::error::{malformed, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String),
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

struct Header {
    encoding: PlyEncoding,
    elements: Vec<Element>,
    body: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, String> {
    let end = bytes
        .windows(10)
        .position(|w| w == b"end_header")
        .ok_or("missing end_header")?;
    let nl = bytes[end..].iter().position(|b| *b == b'\n').ok_or("missing newline after end_header")?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| "header is not text")?;
    let mut lines = text.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err("not a PLY file (first line must be `ply`)".into());
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, _] => {
                encoding = Some(match *f {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::BinaryLittleEndian,
                    other => return Err(format!("unsupported PLY format {other}")),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| format!("bad element count {count:?}"))?,
                props: Vec::new(),
            }),
            ["property", "list", _, _, name] => elements
                .last_mut()
                .ok_or("property before any element")?
                .props
                .push(Property::List(name.to_string())),
            ["property", ty, name] => {
                let s = Scalar::parse(ty).ok_or_else(|| format!("unknown property type {ty}"))?;
                elements
                    .last_mut()
                    .ok_or("property before any element")?
                    .props
                    .push(Property::Scalar(name.to_string(), s));
            }
            _ => return Err(format!("unrecognized header line {line:?}")),
        }
    }
    Ok(Header {
        encoding: encoding.ok_or("missing format line")?,
        elements,
        body: end + nl + 1,
    })
}

/// Parses the vertex element into a [`ScanCloud`].
pub fn decode_ply(bytes: &[u8]) -> Result<ScanCloud, String> {
    let h = parse_header(bytes)?;
    let vi = h.elements.iter().position(|e| e.name == "vertex").ok_or("no vertex element")?;
    for e in &h.elements[..vi] {
        if e.props.iter().any(|p| matches!(p, Property::List(_))) {
            return Err(format!("list property in element {:?} before vertex is not supported", e.name));
        }
    }
    let vertex = &h.elements[vi];
    let find = |n: &str| {
        vertex
            .props
            .iter()
            .position(|p| matches!(p, Property::Scalar(name, _) if name == n))
    };
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err("vertex element needs x, y and z".into()),
    };
    if let Some(Property::List(name)) = vertex.props.iter().find(|p| matches!(p, Property::List(_))) {
        return Err(format!("list property {name:?} in the vertex element is not supported"));
    }
    let ic = find("confidence");
    let ik = find("keep");
    let n = vertex.count;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let body = &bytes[h.body..];
    match h.encoding {
        PlyEncoding::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| "ASCII body is not text")?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            for e in &h.elements[..vi] {
                for _ in 0..e.count {
                    lines.next().ok_or("body ends early")?;
                }
            }
            for r in 0..n {
                let line = lines.next().ok_or_else(|| format!("body ends at vertex {r} of {n}"))?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| format!("vertex {r}: bad number"))?;
                if vals.len() != vertex.props.len() {
                    return Err(format!("vertex {r}: {} values for {} properties", vals.len(), vertex.props.len()));
                }
                rows.push(vals);
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            let stride = |e: &Element| -> usize {
                e.props
                    .iter()
                    .map(|p| match p {
                        Property::Scalar(_, s) => s.size(),
                        Property::List(_) => 0,
                    })
                    .sum()
            };
            let mut off: usize = h.elements[..vi].iter().map(|e| e.count * stride(e)).sum();
            let s = stride(vertex);
            if body.len() < off + n * s {
                return Err(format!("binary body has {} bytes, vertices need {}", body.len(), off + n * s));
            }
            for _ in 0..n {
                let mut vals = Vec::with_capacity(vertex.props.len());
                let mut o = off;
                for p in &vertex.props {
                    if let Property::Scalar(_, sc) = p {
                        vals.push(sc.read_le(&body[o..]));
                        o += sc.size();
                    }
                }
                rows.push(vals);
                off += s;
            }
        }
    }
    let points = rows.iter().map(|r| Vec3::new(r[ix], r[iy], r[iz])).collect();
    let cloud = ScanCloud {
        points,
        confidence: ic.map(|i| rows.iter().map(|r| r[i]).collect()),
        keep: ik.map(|i| rows.iter().map(|r| r[i] != 0.0).collect()),
    };
    cloud.validate().map_err(|e| e.to_string())?;
    Ok(cloud)
}

pub fn encode_ply(cloud: &ScanCloud, encoding: PlyEncoding) -> Vec<u8> {
    let fmt = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    let mut head = format!(
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
        cloud.points.len()
    );
    if cloud.confidence.is_some() {
        head.push_str("property double confidence\n");
    }
    if cloud.keep.is_some() {
        head.push_str("property uchar keep\n");
    }
    head.push_str("end_header\n");
    let mut out = head.into_bytes();
    for (i, p) in cloud.points.iter().enumerate() {
        let conf = cloud.confidence.as_ref().map(|c| c[i]);
        let keep = cloud.keep.as_ref().map(|k| u8::from(k[i]));
        match encoding {
            PlyEncoding::Ascii => {
                let mut line = format!("{} {} {}", p.x, p.y, p.z);
                if let Some(c) = conf {
                    line.push_str(&format!(" {c}"));
                }
                if let Some(k) = keep {
                    line.push_str(&format!(" {k}"));
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
            PlyEncoding::BinaryLittleEndian => {
                for v in [p.x, p.y, p.z].into_iter().chain(conf) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(k) = keep {
                    out.push(k);
                }
            }
        }
    }
    out
}

pub fn read_ply(path: &Path) -> Result<ScanCloud> {
    decode_ply(&read_bytes(path)?).map_err(|m| malformed(path, m))
}

pub fn write_ply(path: &Path, cloud: &ScanCloud, encoding: PlyEncoding) -> Result<()> {
    write_file(path, &encode_ply(cloud, encoding))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> ScanCloud {
        ScanCloud {
            points: vec![Vec3::new(1.5, -2.0, 3.25), Vec3::new(0.1, 0.2, 0.3), Vec3::new(-7.0, 8.0, 1e-3)],
            confidence: Some(vec![0.9, 0.1, 0.5]),
            keep: Some(vec![true, false, true]),
        }
    }

    #[test]
    fn round_trips() {
        for enc in [PlyEncoding::Ascii, PlyEncoding::BinaryLittleEndian] {
            assert_eq!(decode_ply(&encode_ply(&cloud(), enc)).unwrap(), cloud());
            let bare = ScanCloud::new(cloud().points);
            assert_eq!(decode_ply(&encode_ply(&bare, enc)).unwrap(), bare);
        }
    }

    #[test]
    fn foreign_layout_with_floats_and_faces() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment made elsewhere\nelement vertex 2\n\
property float y\nproperty uchar red\nproperty float x\nproperty float z\nproperty int keep\n\
element face 1\nproperty list uchar int vertex_indices\nend_header\n"
            .to_vec();
        for (x, y, z, k) in [(1.0f32, 2.0f32, 3.0f32, 1i32), (4.0, 5.0, 6.0, 0)] {
            bytes.extend_from_slice(&y.to_le_bytes());
            bytes.push(200);
            bytes.extend_from_slice(&x.to_le_bytes());
            bytes.extend_from_slice(&z.to_le_bytes());
            bytes.extend_from_slice(&k.to_le_bytes());
        }
        bytes.extend_from_slice(&[3, 0, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        let c = decode_ply(&bytes).unwrap();
        assert_eq!(c.points, vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0)]);
        assert_eq!(c.keep, Some(vec![true, false]));
        assert_eq!(c.confidence, None);
    }

    #[test]
    fn missing_coordinates() {
        let bytes = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n";
        assert!(decode_ply(bytes).unwrap_err().contains("x, y and z"));
    }
}
