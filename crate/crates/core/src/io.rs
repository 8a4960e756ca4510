//! File formats: OBJ meshes, binary identity bundles, offset sequences and
//! vertex index masks. All binary formats are little-endian.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::facs::{AuId, FacsRegistry, AU_COUNT};
use crate::mesh::{AnnotatedPose, AuBases, BlendDelta, FaceMesh, GridLayout, IdentityBundle, OffsetSequence};

pub const BUNDLE_MAGIC: &[u8; 4] = b"AUBD";
pub const BUNDLE_VERSION: u32 = 1;
pub const OFFSETS_MAGIC: &[u8; 4] = b"AUOS";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- OBJ

/// Formats `v` with nine significant digits, which is enough to recover any
/// `f32` exactly.
fn sig9(v: f32) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let exp = (v.abs() as f64).log10().floor() as i32;
    let decimals = (8 - exp).max(0) as usize;
    format!("{:.*}", decimals, v)
}

pub fn obj_string(mesh: &FaceMesh) -> String {
    let mut out = String::new();
    for i in 0..mesh.vertex_count() {
        let [x, y, z] = mesh.vertex(i);
        let _ = writeln!(out, "v {} {} {}", sig9(x), sig9(y), sig9(z));
    }
    if let Some(tris) = mesh.topology() {
        for t in tris {
            let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
    }
    out
}

/// Parses `v` and `f` records; polygons are fan-triangulated and any
/// `/vt/vn` suffixes are ignored.
pub fn parse_obj(text: &str) -> Result<FaceMesh> {
    let mut positions = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<&str> = parts.collect();
                if coords.len() < 3 {
                    return Err(Error::format(
                        format!("line {lineno}"),
                        "vertex needs three coordinates",
                    ));
                }
                for c in &coords[..3] {
                    let v: f32 = c
                        .parse()
                        .map_err(|_| Error::format(format!("line {lineno}"), format!("bad coordinate `{c}`")))?;
                    positions.push(v);
                }
            }
            Some("f") => {
                let idx = parts
                    .map(|p| {
                        let head = p.split('/').next().unwrap_or("");
                        match head.parse::<i64>() {
                            Ok(i) if i >= 1 => Ok((i - 1) as u32),
                            _ => Err(Error::format(format!("line {lineno}"), format!("bad face index `{p}`"))),
                        }
                    })
                    .collect::<Result<Vec<u32>>>()?;
                if idx.len() < 3 {
                    return Err(Error::format(
                        format!("line {lineno}"),
                        "face needs at least three indices",
                    ));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    if positions.is_empty() {
        return Err(Error::format("obj", "no vertices"));
    }
    let topology = (!faces.is_empty()).then_some(faces);
    FaceMesh::new(positions, topology)
}

pub fn save_obj(mesh: &FaceMesh, path: &Path) -> Result<()> {
    write_file(path, obj_string(mesh).as_bytes())
}

pub fn load_obj(path: &Path) -> Result<FaceMesh> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::format(path.display().to_string(), "not UTF-8"))?;
    parse_obj(text)
}

// ------------------------------------------------------- binary helpers

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(4 * vs.len());
        for &v in vs {
            self.f32(v);
        }
    }
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    pub fn finish_with_crc(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    /// Verifies and strips a trailing CRC32.
    pub fn with_crc(buf: &'a [u8]) -> Result<Self> {
        if buf.len() < 4 {
            return Err(Error::format("crc", "truncated payload"));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::format(
                "crc",
                format!("checksum mismatch (stored {stored:08x}, computed {actual:08x})"),
            ));
        }
        Ok(Self::new(body))
    }

    pub fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(field, "truncated payload"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            return Err(Error::format(
                "magic",
                format!(
                    "expected {:?}, found {:?}",
                    String::from_utf8_lossy(expected),
                    String::from_utf8_lossy(m)
                ),
            ));
        }
        Ok(())
    }
    pub fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }
    pub fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }
    pub fn f32(&mut self, field: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }
    pub fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format(field, "length overflow"))?,
            field,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    pub fn str(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)? as usize;
        let raw = self.take(n, field)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(field, "not UTF-8"))
    }
    pub fn finish(&self, field: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                field,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

// -------------------------------------------------------------- bundles

pub fn encode_bundle(bundle: &IdentityBundle, registry: &FacsRegistry) -> Vec<u8> {
    let v = bundle.vertex_count();
    let mut w = Writer::default();
    w.bytes(BUNDLE_MAGIC);
    w.u32(BUNDLE_VERSION);
    w.u32(v as u32);
    w.u32(AU_COUNT as u32);
    w.u32(bundle.annotated_poses.len() as u32);
    w.str(&bundle.identity_id);
    w.f32s(bundle.template.positions());
    for d in bundle.bases.deltas() {
        w.u16(d.au.0);
        w.f32s(&d.deltas);
    }
    for p in &bundle.annotated_poses {
        w.f32s(&registry.to_dense(&p.activation));
        w.f32s(p.mesh.positions());
    }
    w.finish_with_crc()
}

/// Decodes a bundle. The template receives a generated grid topology since
/// the format carries none.
pub fn decode_bundle(bytes: &[u8], registry: &FacsRegistry) -> Result<IdentityBundle> {
    let mut r = Reader::with_crc(bytes)?;
    r.magic(BUNDLE_MAGIC)?;
    let version = r.u32("version")?;
    if version != BUNDLE_VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}, expected {BUNDLE_VERSION}"),
        ));
    }
    let v = r.u32("vertex_count")? as usize;
    if v == 0 {
        return Err(Error::format("vertex_count", "must be positive"));
    }
    let n = r.u32("au_count")? as usize;
    if n != AU_COUNT {
        return Err(Error::format(
            "au_count",
            format!("expected {AU_COUNT} AU bases, found {n}"),
        ));
    }
    let pose_count = r.u32("pose_count")? as usize;
    let identity_id = r.str("identity_id")?;
    let template = FaceMesh::new(r.f32s(3 * v, "template")?, Some(GridLayout::new(v).topology()))
        .map_err(|e| Error::format("template", e.to_string()))?;
    let mut deltas = Vec::with_capacity(n);
    for _ in 0..n {
        let au = AuId(r.u16("au_id")?);
        deltas.push(BlendDelta {
            au,
            deltas: r.f32s(3 * v, "deltas")?,
        });
    }
    let bases = AuBases::new(deltas, registry)?;
    let mut annotated_poses = Vec::with_capacity(pose_count);
    for _ in 0..pose_count {
        let dense = r.f32s(AU_COUNT, "pose_activation")?;
        let activation = registry.from_dense(&dense);
        let mesh = FaceMesh::new(r.f32s(3 * v, "pose_positions")?, None)
            .map_err(|e| Error::format("pose_positions", e.to_string()))?;
        annotated_poses.push(AnnotatedPose { activation, mesh });
    }
    r.finish("bundle")?;
    let bundle = IdentityBundle {
        identity_id,
        template,
        bases,
        annotated_poses,
        style_meta: BTreeMap::new(),
    };
    bundle.validate(registry)?;
    Ok(bundle)
}

pub fn save_bundle(bundle: &IdentityBundle, path: &Path) -> Result<()> {
    write_file(path, &encode_bundle(bundle, FacsRegistry::standard()))
}

pub fn load_bundle(path: &Path) -> Result<IdentityBundle> {
    decode_bundle(&read_file(path)?, FacsRegistry::standard()).map_err(|e| match e {
        Error::Format { field, msg } => Error::Format {
            field: format!("{}: {field}", path.display()),
            msg,
        },
        other => other,
    })
}

// ------------------------------------------------------ offset sequences

pub fn encode_offsets(seq: &OffsetSequence) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(OFFSETS_MAGIC);
    w.u32(seq.frame_count() as u32);
    w.u32(seq.vertex_count() as u32);
    w.f32(seq.frame_rate);
    w.f32s(seq.data());
    w.buf
}

pub fn decode_offsets(bytes: &[u8]) -> Result<OffsetSequence> {
    let mut r = Reader::new(bytes);
    r.magic(OFFSETS_MAGIC)?;
    let t = r.u32("frame_count")? as usize;
    let v = r.u32("vertex_count")? as usize;
    let fps = r.f32("frame_rate")?;
    if t == 0 || v == 0 {
        return Err(Error::format("frame_count", "empty sequence"));
    }
    let data = r.f32s(t * 3 * v, "frames")?;
    r.finish("offsets")?;
    OffsetSequence::new(fps, v, data).map_err(|e| Error::format("frames", e.to_string()))
}

pub fn save_offsets(seq: &OffsetSequence, path: &Path) -> Result<()> {
    write_file(path, &encode_offsets(seq))
}

pub fn load_offsets(path: &Path) -> Result<OffsetSequence> {
    decode_offsets(&read_file(path)?)
}

// ---------------------------------------------------------------- masks

/// Whitespace-separated vertex indices; `#` starts a comment.
pub fn parse_mask(text: &str, vertex_count: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            let i: usize = tok
                .parse()
                .map_err(|_| Error::format("mask", format!("bad index `{tok}`")))?;
            if i >= vertex_count {
                return Err(Error::format("mask", format!("index {i} outside 0..{vertex_count}")));
            }
            out.push(i);
        }
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err(Error::format("mask", "no indices"));
    }
    Ok(out)
}

pub fn mask_string(mask: &[usize]) -> String {
    let mut s = String::new();
    for chunk in mask.chunks(16) {
        let line: Vec<String> = chunk.iter().map(|i| i.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}
