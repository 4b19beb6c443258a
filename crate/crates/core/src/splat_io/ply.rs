//! Binary little-endian splat point files (`x, y, z, f_dc_*, f_rest_*, opacity,
//! scale_*, rot_*` per vertex, 32-bit floats).

use std::sync::Arc;

use super::{ShCoeffs, SourceRecords, SplatCloud, SH_COEFFS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
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

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Property {
    name: String,
    ty: ScalarType,
    offset: usize,
}

/// Byte offsets of the recognized fields inside one vertex record.
#[derive(Debug, Clone, PartialEq)]
struct Slots {
    position: [usize; 3],
    dc: [usize; 3],
    rest: Vec<usize>,
    opacity: usize,
    scale: [usize; 3],
    rot: [usize; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PlyLayout {
    header_prefix: Vec<u8>,
    count_line_ending: &'static str,
    header_suffix: Vec<u8>,
    properties: Vec<Property>,
    stride: usize,
    slots: Slots,
    /// `(offset, size)` of every unrecognized property, in record order.
    extra: Vec<(usize, usize)>,
    pub(crate) extra_stride: usize,
    tail: Vec<u8>,
}

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
    "rot_3",
];

impl PlyLayout {
    fn from_properties(
        header_prefix: Vec<u8>,
        count_line_ending: &'static str,
        header_suffix: Vec<u8>,
        properties: Vec<Property>,
        tail: Vec<u8>,
    ) -> Result<Self> {
        let find = |name: &str| -> Result<usize> {
            let p = properties
                .iter()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::Format(format!("missing required field '{name}'")))?;
            if p.ty != ScalarType::F32 {
                return Err(Error::Format(format!("field '{name}' must be float")));
            }
            Ok(p.offset)
        };
        let rest_count = properties.iter().filter(|p| p.name.starts_with("f_rest_")).count();
        if ![0, 9, 24, 45].contains(&rest_count) {
            return Err(Error::Format(format!("unsupported f_rest count {rest_count}")));
        }
        let rest = (0..rest_count).map(|j| find(&format!("f_rest_{j}"))).collect::<Result<Vec<_>>>()?;
        let slots = Slots {
            position: [find("x")?, find("y")?, find("z")?],
            dc: [find("f_dc_0")?, find("f_dc_1")?, find("f_dc_2")?],
            rest,
            opacity: find("opacity")?,
            scale: [find("scale_0")?, find("scale_1")?, find("scale_2")?],
            rot: [find("rot_0")?, find("rot_1")?, find("rot_2")?, find("rot_3")?],
        };
        let extra: Vec<(usize, usize)> = properties
            .iter()
            .filter(|p| !REQUIRED.contains(&p.name.as_str()) && !p.name.starts_with("f_rest_"))
            .map(|p| (p.offset, p.ty.size()))
            .collect();
        let extra_stride = extra.iter().map(|e| e.1).sum();
        let stride = properties.iter().map(|p| p.ty.size()).sum();
        Ok(Self {
            header_prefix,
            count_line_ending,
            header_suffix,
            properties,
            stride,
            slots,
            extra,
            extra_stride,
            tail,
        })
    }

    /// Layout written for clouds that did not come from a file.
    fn canonical() -> Self {
        let mut names: Vec<String> =
            ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"].iter().map(|s| s.to_string()).collect();
        names.extend((0..45).map(|j| format!("f_rest_{j}")));
        names.extend(
            ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
                .iter()
                .map(|s| s.to_string()),
        );
        let mut suffix = String::new();
        let properties: Vec<Property> = names
            .into_iter()
            .enumerate()
            .map(|(i, name)| {
                suffix.push_str(&format!("property float {name}\n"));
                Property { name, ty: ScalarType::F32, offset: 4 * i }
            })
            .collect();
        suffix.push_str("end_header\n");
        Self::from_properties(
            b"ply\nformat binary_little_endian 1.0\n".to_vec(),
            "\n",
            suffix.into_bytes(),
            properties,
            Vec::new(),
        )
        .expect("canonical layout is complete")
    }

    fn degree(&self) -> u8 {
        match self.slots.rest.len() {
            0 => 0,
            9 => 1,
            24 => 2,
            _ => 3,
        }
    }
}

fn read_f32(rec: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(rec[off..off + 4].try_into().unwrap())
}

fn write_f32(rec: &mut [u8], off: usize, v: f32) {
    rec[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn normalize_quat(q: [f32; 4]) -> Option<[f32; 4]> {
    let n = q.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return None;
    }
    Some(q.map(|v| (v as f64 / n) as f32))
}

/// Parses a binary splat point file.
pub fn parse_splat_file(bytes: &[u8]) -> Result<SplatCloud> {
    let header_end = find_header_end(bytes)?;
    let header =
        std::str::from_utf8(&bytes[..header_end]).map_err(|_| Error::Format("header is not valid UTF-8".into()))?;

    let mut lines = Vec::new();
    let mut start = 0;
    for (i, b) in header.bytes().enumerate() {
        if b == b'\n' {
            lines.push((start, i + 1));
            start = i + 1;
        }
    }
    let text = |r: (usize, usize)| header[r.0..r.1].trim_end_matches(['\n', '\r']);
    if lines.is_empty() || text(lines[0]) != "ply" {
        return Err(Error::Format("missing 'ply' magic".into()));
    }

    let mut vertex_count: Option<usize> = None;
    let mut count_line: Option<(usize, usize)> = None;
    let mut properties = Vec::new();
    let mut offset = 0usize;
    let mut in_vertex = false;
    let mut seen_format = false;
    for &range in &lines[1..] {
        let line = text(range);
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("binary_little_endian") {
                    return Err(Error::Format("only binary_little_endian files are supported".into()));
                }
                seen_format = true;
            }
            Some("element") => {
                let name = tok.next().unwrap_or_default();
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad element line '{line}'")))?;
                if name == "vertex" {
                    if vertex_count.is_some() {
                        return Err(Error::Format("duplicate vertex element".into()));
                    }
                    vertex_count = Some(count);
                    count_line = Some(range);
                    in_vertex = true;
                } else {
                    if vertex_count.is_none() {
                        return Err(Error::Format(format!("element '{name}' precedes vertex element")));
                    }
                    in_vertex = false;
                }
            }
            Some("property") if in_vertex => {
                let ty = tok.next().unwrap_or_default();
                if ty == "list" {
                    return Err(Error::Format("list properties are not supported on vertices".into()));
                }
                let ty = ScalarType::parse(ty).ok_or_else(|| Error::Format(format!("unknown property type '{ty}'")))?;
                let name = tok.next().ok_or_else(|| Error::Format(format!("bad property line '{line}'")))?.to_string();
                properties.push(Property { name, ty, offset });
                offset += ty.size();
            }
            _ => {}
        }
    }
    if !seen_format {
        return Err(Error::Format("missing format line".into()));
    }
    let n = vertex_count.ok_or_else(|| Error::Format("missing vertex element".into()))?;
    let count_line = count_line.unwrap();
    let ending = if header[count_line.0..count_line.1].ends_with("\r\n") { "\r\n" } else { "\n" };

    let data = &bytes[header_end..];
    let stride: usize = properties.iter().map(|p| p.ty.size()).sum();
    let expected = n.checked_mul(stride).ok_or_else(|| Error::Format("vertex count overflow".into()))?;
    if data.len() < expected {
        return Err(Error::Length { expected, found: data.len() });
    }
    let layout = PlyLayout::from_properties(
        bytes[..count_line.0].to_vec(),
        ending,
        bytes[count_line.1..header_end].to_vec(),
        properties,
        data[expected..].to_vec(),
    )?;

    let mut cloud = SplatCloud {
        positions: Vec::with_capacity(n),
        log_scales: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        opacity_logits: Vec::with_capacity(n),
        sh: Vec::with_capacity(n),
        sh_degree: layout.degree(),
        ..Default::default()
    };
    let mut extras = Vec::with_capacity(n * layout.extra_stride);
    let mut raw_rotations = Vec::with_capacity(n);
    let per_channel = layout.slots.rest.len() / 3;
    for i in 0..n {
        let rec = &data[i * stride..(i + 1) * stride];
        for p in &layout.properties {
            if p.ty == ScalarType::F32 && !read_f32(rec, p.offset).is_finite() {
                return Err(Error::Format(format!("non-finite '{}' in vertex {i}", p.name)));
            }
            if p.ty == ScalarType::F64 {
                let v = f64::from_le_bytes(rec[p.offset..p.offset + 8].try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::Format(format!("non-finite '{}' in vertex {i}", p.name)));
                }
            }
        }
        let s = &layout.slots;
        cloud.positions.push(s.position.map(|o| read_f32(rec, o)));
        cloud.log_scales.push(s.scale.map(|o| read_f32(rec, o)));
        cloud.opacity_logits.push(read_f32(rec, s.opacity));
        let raw = s.rot.map(|o| read_f32(rec, o));
        let q = normalize_quat(raw).ok_or_else(|| Error::Format(format!("zero quaternion in vertex {i}")))?;
        cloud.rotations.push(q);
        raw_rotations.push(raw);
        let mut sh: ShCoeffs = [[0.0; 3]; SH_COEFFS];
        for c in 0..3 {
            sh[0][c] = read_f32(rec, s.dc[c]);
        }
        for (j, &o) in s.rest.iter().enumerate() {
            let (c, k) = (j / per_channel, 1 + j % per_channel);
            sh[k][c] = read_f32(rec, o);
        }
        cloud.sh.push(sh);
        for &(o, sz) in &layout.extra {
            extras.extend_from_slice(&rec[o..o + sz]);
        }
    }
    cloud.source = Some(SourceRecords { layout: Arc::new(layout), extras, raw_rotations });
    Ok(cloud)
}

fn find_header_end(bytes: &[u8]) -> Result<usize> {
    let needle = b"end_header";
    let max_scan = bytes.len().min(1 << 20);
    let mut i = 0;
    while i + needle.len() <= max_scan {
        if &bytes[i..i + needle.len()] == needle && (i == 0 || bytes[i - 1] == b'\n') {
            let mut end = i + needle.len();
            if bytes.get(end) == Some(&b'\r') {
                end += 1;
            }
            if bytes.get(end) == Some(&b'\n') {
                return Ok(end + 1);
            }
        }
        i += 1;
    }
    Err(Error::Format("missing end_header".into()))
}

/// Serializes a cloud. Clouds parsed from a file keep their original header,
/// property order, unrecognized fields and trailing elements.
pub fn serialize_splat_file(cloud: &SplatCloud) -> Result<Vec<u8>> {
    cloud.validate()?;
    let canonical;
    let (layout, source) = match &cloud.source {
        Some(s) if s.raw_rotations.len() == cloud.len() => (s.layout.as_ref(), Some(s)),
        _ => {
            canonical = PlyLayout::canonical();
            (&canonical, None)
        }
    };
    let n = cloud.len();
    let mut out = Vec::with_capacity(layout.header_prefix.len() + 64 + n * layout.stride);
    out.extend_from_slice(&layout.header_prefix);
    out.extend_from_slice(format!("element vertex {n}{}", layout.count_line_ending).as_bytes());
    out.extend_from_slice(&layout.header_suffix);

    let s = &layout.slots;
    let per_channel = s.rest.len() / 3;
    let mut rec = vec![0u8; layout.stride];
    for i in 0..n {
        rec.fill(0);
        for a in 0..3 {
            write_f32(&mut rec, s.position[a], cloud.positions[i][a]);
            write_f32(&mut rec, s.scale[a], cloud.log_scales[i][a]);
            write_f32(&mut rec, s.dc[a], cloud.sh[i][0][a]);
        }
        for (j, &o) in s.rest.iter().enumerate() {
            let (c, k) = (j / per_channel, 1 + j % per_channel);
            write_f32(&mut rec, o, cloud.sh[i][k][c]);
        }
        write_f32(&mut rec, s.opacity, cloud.opacity_logits[i]);
        let q = match source {
            Some(src) if normalize_quat(src.raw_rotations[i]) == Some(cloud.rotations[i]) => src.raw_rotations[i],
            _ => cloud.rotations[i],
        };
        for a in 0..4 {
            write_f32(&mut rec, s.rot[a], q[a]);
        }
        if let Some(src) = source {
            let mut cursor = i * layout.extra_stride;
            for &(o, sz) in &layout.extra {
                rec[o..o + sz].copy_from_slice(&src.extras[cursor..cursor + sz]);
                cursor += sz;
            }
        }
        out.extend_from_slice(&rec);
    }
    out.extend_from_slice(&layout.tail);
    Ok(out)
}
