//! `AUBM` checkpoint files.
//!
//! ```text
//! magic "AUBM" | u32 version | u32 section count
//! section: str kind | str hyperparams (JSON) | u8 trained | u32 tensors
//!   tensor: str name | u8 frozen | u32 rank | u32 dims... | f32 payload
//! u32 crc32 of everything before it
//! ```
//!
//! Integers and floats are little-endian; strings are a u32 byte length
//! followed by UTF-8. A style checkpoint carries its codebook model as a
//! second section.

use std::path::Path;

use aublend_autodiff::{ParamStore, Tensor};

use super::{CodebookModel, HyperParams, StyleBlendModel};
use crate::error::{Error, Result};
use crate::io::{self, Reader, Writer};

pub const MAGIC: &[u8; 4] = b"AUBM";
pub const VERSION: u32 = 1;
const CODEBOOK: &str = "codebook";
const STYLEBLEND: &str = "styleblend";

struct Section {
    kind: String,
    hp: HyperParams,
    trained: bool,
    params: ParamStore,
}

fn write_section(w: &mut Writer, kind: &str, hp: &HyperParams, trained: bool, params: &ParamStore) {
    w.str(kind);
    w.str(&serde_json::to_string(hp).expect("hyperparameters serialise"));
    w.bytes(&[u8::from(trained)]);
    w.u32(params.len() as u32);
    for (name, p) in params.iter() {
        w.str(name);
        w.bytes(&[u8::from(p.frozen)]);
        w.u32(p.value.rank() as u32);
        for &d in p.value.shape() {
            w.u32(d as u32);
        }
        let data: Vec<f32> = p.value.data().iter().map(|&v| v as f32).collect();
        w.f32s(&data);
    }
}

fn read_flag(r: &mut Reader, field: &str) -> Result<bool> {
    match r.take(1, field)?[0] {
        0 => Ok(false),
        1 => Ok(true),
        b => Err(Error::format(field, format!("expected 0 or 1, found {b}"))),
    }
}

fn read_section(r: &mut Reader) -> Result<Section> {
    let kind = r.str("kind")?;
    let hp: HyperParams =
        serde_json::from_str(&r.str("hyperparams")?).map_err(|e| Error::format("hyperparams", e.to_string()))?;
    hp.validate().map_err(|e| Error::format("hyperparams", e.to_string()))?;
    let trained = read_flag(r, "trained")?;
    let count = r.u32("tensor_count")? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.str("tensor_name")?;
        let frozen = read_flag(r, "frozen")?;
        let rank = r.u32("rank")? as usize;
        if rank > 4 {
            return Err(Error::format("rank", format!("`{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32("shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = r.f32s(len, "payload")?.into_iter().map(f64::from).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::format("payload", e.to_string()))?;
        if !t.is_finite() {
            return Err(Error::format("payload", format!("`{name}` is not finite")));
        }
        if params.contains(&name) {
            return Err(Error::format("tensor_name", format!("duplicate `{name}`")));
        }
        if frozen {
            params.insert_frozen(name, t);
        } else {
            params.insert(name, t);
        }
    }
    Ok(Section {
        kind,
        hp,
        trained,
        params,
    })
}

/// Every expected parameter is present with the expected shape.
fn check_layout(expected: &ParamStore, got: &ParamStore, kind: &str) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::format(
            "tensor_count",
            format!("{kind} expects {} tensors, found {}", expected.len(), got.len()),
        ));
    }
    for (name, p) in expected.iter() {
        let q = got
            .param(name)
            .ok_or_else(|| Error::format("tensor_name", format!("{kind} is missing `{name}`")))?;
        if q.value.shape() != p.value.shape() {
            return Err(Error::format(
                "shape",
                format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    q.value.shape(),
                    p.value.shape()
                ),
            ));
        }
    }
    Ok(())
}

fn into_codebook(s: Section) -> Result<CodebookModel> {
    if s.kind != CODEBOOK {
        return Err(Error::format(
            "kind",
            format!("expected `{CODEBOOK}`, found `{}`", s.kind),
        ));
    }
    let fresh = CodebookModel::new(s.hp.clone())?;
    check_layout(&fresh.params, &s.params, CODEBOOK)?;
    Ok(CodebookModel {
        hp: s.hp,
        params: s.params,
    })
}

fn into_style(s: Section) -> Result<StyleBlendModel> {
    if s.kind != STYLEBLEND {
        return Err(Error::format(
            "kind",
            format!("expected `{STYLEBLEND}`, found `{}`", s.kind),
        ));
    }
    let fresh = StyleBlendModel::new(s.hp.clone())?;
    check_layout(&fresh.params, &s.params, STYLEBLEND)?;
    Ok(StyleBlendModel {
        hp: s.hp,
        params: s.params,
        trained: s.trained,
    })
}

fn header(w: &mut Writer, sections: u32) {
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(sections);
}

fn open(bytes: &[u8]) -> Result<(Reader<'_>, u32)> {
    let mut r = Reader::with_crc(bytes)?;
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let n = r.u32("section_count")?;
    Ok((r, n))
}

pub fn encode_codebook(model: &CodebookModel) -> Vec<u8> {
    let mut w = Writer::default();
    header(&mut w, 1);
    write_section(&mut w, CODEBOOK, &model.hp, true, &model.params);
    w.finish_with_crc()
}

pub fn decode_codebook(bytes: &[u8]) -> Result<CodebookModel> {
    let (mut r, n) = open(bytes)?;
    if n != 1 {
        return Err(Error::format(
            "section_count",
            format!("codebook checkpoint has {n} sections"),
        ));
    }
    let m = into_codebook(read_section(&mut r)?)?;
    r.finish("checkpoint")?;
    Ok(m)
}

pub fn encode_styleblend(style: &StyleBlendModel, codebook: &CodebookModel) -> Vec<u8> {
    let mut w = Writer::default();
    header(&mut w, 2);
    write_section(&mut w, STYLEBLEND, &style.hp, style.trained, &style.params);
    write_section(&mut w, CODEBOOK, &codebook.hp, true, &codebook.params);
    w.finish_with_crc()
}

pub fn decode_styleblend(bytes: &[u8]) -> Result<(StyleBlendModel, CodebookModel)> {
    let (mut r, n) = open(bytes)?;
    if n != 2 {
        return Err(Error::format(
            "section_count",
            format!("style checkpoint has {n} sections"),
        ));
    }
    let style = into_style(read_section(&mut r)?)?;
    let codebook = into_codebook(read_section(&mut r)?)?;
    r.finish("checkpoint")?;
    if style.hp.vertex_count != codebook.hp.vertex_count || style.hp.latent_dim != codebook.hp.latent_dim {
        return Err(Error::format(
            "hyperparams",
            "style and codebook sections disagree on V or D",
        ));
    }
    Ok((style, codebook))
}

/// Either kind of checkpoint, as stored.
pub enum Checkpoint {
    Codebook(CodebookModel),
    StyleBlend(StyleBlendModel, CodebookModel),
}

pub fn decode_any(bytes: &[u8]) -> Result<Checkpoint> {
    let (_, n) = open(bytes)?;
    match n {
        1 => decode_codebook(bytes).map(Checkpoint::Codebook),
        2 => decode_styleblend(bytes).map(|(s, c)| Checkpoint::StyleBlend(s, c)),
        _ => Err(Error::format("section_count", format!("unexpected section count {n}"))),
    }
}

pub fn save_codebook(model: &CodebookModel, path: &Path) -> Result<()> {
    io::write_file(path, &encode_codebook(model))
}

pub fn save_styleblend(style: &StyleBlendModel, codebook: &CodebookModel, path: &Path) -> Result<()> {
    io::write_file(path, &encode_styleblend(style, codebook))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode_any(&io::read_file(path)?)
}

pub fn load_codebook(path: &Path) -> Result<CodebookModel> {
    match load(path)? {
        Checkpoint::Codebook(m) => Ok(m),
        Checkpoint::StyleBlend(_, m) => Ok(m),
    }
}

pub fn load_styleblend(path: &Path) -> Result<(StyleBlendModel, CodebookModel)> {
    match load(path)? {
        Checkpoint::StyleBlend(s, c) => Ok((s, c)),
        Checkpoint::Codebook(_) => Err(Error::format(
            "section_count",
            "codebook-only checkpoint has no style model",
        )),
    }
}

/// Every parameter rounded through the on-disk precision.
pub fn round_trip_params(params: &ParamStore) -> ParamStore {
    let mut out = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for n in names {
        let t = out.get_mut(&n).expect("name taken from the same store");
        *t = t.map(|v| v as f32 as f64);
    }
    out
}
