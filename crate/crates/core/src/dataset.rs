//! On-disk dataset layout and the augmentation export.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/bundles/<id>.aubd
//! <dir>/speech/speech_<k>.auos
//! <dir>/masks/{lip,upper_face}.txt
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facs::{AuActivation, FacsRegistry, AU_COUNT};
use crate::io::{self, Reader, Writer};
use crate::mesh::{AnnotatedPose, FaceMesh, IdentityBundle, OffsetSequence};
use crate::synth::{self, DatasetSplit, StyleParams, SynthDataset};

pub const MANIFEST: &str = "manifest.json";
pub const SPEECH_FRAMES: usize = 60;
pub const SPEECH_FPS: f32 = 30.0;
pub const SPEECH_CLIPS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityEntry {
    pub id: String,
    pub file: String,
    pub sha256: String,
    pub style: Option<StyleParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Masks {
    pub lip: String,
    pub upper_face: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub seed: u64,
    pub vertex_count: usize,
    pub identities: Vec<IdentityEntry>,
    pub split: DatasetSplit,
    pub speech: Vec<FileEntry>,
    pub masks: Masks,
}

/// A dataset read back from disk.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub bundles: Vec<IdentityBundle>,
    pub speech: Vec<OffsetSequence>,
    pub lip_mask: Vec<usize>,
    pub upper_mask: Vec<usize>,
}

impl Dataset {
    pub fn bundle(&self, id: &str) -> Option<&IdentityBundle> {
        self.bundles.iter().find(|b| b.identity_id == id)
    }

    pub fn select(&self, ids: &[String]) -> Result<Vec<&IdentityBundle>> {
        ids.iter()
            .map(|id| {
                self.bundle(id)
                    .ok_or_else(|| Error::format("split", format!("unknown identity `{id}`")))
            })
            .collect()
    }

    pub fn vertex_count(&self) -> usize {
        self.manifest.vertex_count
    }
}

/// Writes a generated dataset plus synthetic speech clips and masks.
pub fn save_dataset(dir: &Path, data: &SynthDataset, seed: u64) -> Result<Manifest> {
    let registry = FacsRegistry::standard();
    let v = data.bundles[0].vertex_count();
    let mut identities = Vec::with_capacity(data.bundles.len());
    for (bundle, style) in data.bundles.iter().zip(&data.styles) {
        let file = format!("bundles/{}.aubd", bundle.identity_id);
        let bytes = io::encode_bundle(bundle, registry);
        io::write_file(&dir.join(&file), &bytes)?;
        identities.push(IdentityEntry {
            id: bundle.identity_id.clone(),
            file,
            sha256: io::sha256_hex(&bytes),
            style: Some(style.clone()),
        });
    }
    let mut speech = Vec::with_capacity(SPEECH_CLIPS);
    for k in 0..SPEECH_CLIPS {
        let seq = synth::synth_speech(v, SPEECH_FRAMES, SPEECH_FPS, seed.wrapping_add(k as u64))?;
        let file = format!("speech/speech_{k:02}.auos");
        let bytes = io::encode_offsets(&seq);
        io::write_file(&dir.join(&file), &bytes)?;
        speech.push(FileEntry {
            file,
            sha256: io::sha256_hex(&bytes),
        });
    }
    let masks = Masks {
        lip: "masks/lip.txt".into(),
        upper_face: "masks/upper_face.txt".into(),
    };
    io::write_file(&dir.join(&masks.lip), io::mask_string(&synth::lip_mask(v)?).as_bytes())?;
    io::write_file(
        &dir.join(&masks.upper_face),
        io::mask_string(&synth::upper_face_mask(v)?).as_bytes(),
    )?;
    let manifest = Manifest {
        format: 1,
        seed,
        vertex_count: v,
        identities,
        split: data.split.clone(),
        speech,
        masks,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| Error::format(MANIFEST, e.to_string()))?;
    text.push('\n');
    io::write_file(&dir.join(MANIFEST), text.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = io::read_file(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

fn verified(dir: &Path, file: &str, sha: &str) -> Result<Vec<u8>> {
    let bytes = io::read_file(&dir.join(file))?;
    let actual = io::sha256_hex(&bytes);
    if actual != sha {
        return Err(Error::format(
            file,
            format!("sha256 {actual} does not match manifest {sha}"),
        ));
    }
    Ok(bytes)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let registry = FacsRegistry::standard();
    let v = manifest.vertex_count;
    let mut bundles = Vec::with_capacity(manifest.identities.len());
    for e in &manifest.identities {
        let bytes = verified(dir, &e.file, &e.sha256)?;
        let b = io::decode_bundle(&bytes, registry).map_err(|err| match err {
            Error::Format { field, msg } => Error::format(format!("{}: {field}", e.file), msg),
            other => other,
        })?;
        if b.identity_id != e.id || b.vertex_count() != v {
            return Err(Error::format(
                &e.file,
                format!(
                    "bundle `{}` with {} vertices does not match manifest",
                    b.identity_id,
                    b.vertex_count()
                ),
            ));
        }
        bundles.push(b);
    }
    let speech = manifest
        .speech
        .iter()
        .map(|e| io::decode_offsets(&verified(dir, &e.file, &e.sha256)?))
        .collect::<Result<Vec<_>>>()?;
    let read_mask = |file: &str| -> Result<Vec<usize>> {
        let bytes = io::read_file(&dir.join(file))?;
        io::parse_mask(&String::from_utf8_lossy(&bytes), v)
    };
    let lip_mask = read_mask(&manifest.masks.lip)?;
    let upper_mask = read_mask(&manifest.masks.upper_face)?;
    let ds = Dataset {
        root: dir.to_path_buf(),
        manifest,
        bundles,
        speech,
        lip_mask,
        upper_mask,
    };
    let s = &ds.manifest.split;
    for ids in [&s.train, &s.val, &s.test] {
        ds.select(ids)?;
    }
    Ok(ds)
}

// ----------------------------------------------------------- augmentation

pub const POSES_MAGIC: &[u8; 4] = b"AUPS";
pub const LABEL_THRESHOLD: f32 = 0.5;

/// Dense 0/1 labels in registry order; an AU is on at intensity >= 0.5.
pub fn binarize_labels(activation: &AuActivation, registry: &FacsRegistry) -> Vec<u8> {
    registry
        .to_dense(activation)
        .into_iter()
        .map(|w| u8::from(w >= LABEL_THRESHOLD))
        .collect()
}

/// Pose records as stored in bundles, behind their own header.
pub fn encode_poses(identity_id: &str, poses: &[AnnotatedPose], registry: &FacsRegistry) -> Result<Vec<u8>> {
    let v = poses
        .first()
        .ok_or_else(|| Error::Contract("no poses to encode".into()))?
        .mesh
        .vertex_count();
    let mut w = Writer::default();
    w.bytes(POSES_MAGIC);
    w.u32(1);
    w.u32(v as u32);
    w.u32(AU_COUNT as u32);
    w.u32(poses.len() as u32);
    w.str(identity_id);
    for p in poses {
        if p.mesh.vertex_count() != v {
            return Err(Error::Shape("poses differ in vertex count".into()));
        }
        w.f32s(&registry.to_dense(&p.activation));
        w.f32s(p.mesh.positions());
    }
    Ok(w.finish_with_crc())
}

pub fn decode_poses(bytes: &[u8], registry: &FacsRegistry) -> Result<(String, Vec<AnnotatedPose>)> {
    let mut r = Reader::with_crc(bytes)?;
    r.magic(POSES_MAGIC)?;
    let version = r.u32("version")?;
    if version != 1 {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let v = r.u32("vertex_count")? as usize;
    let n = r.u32("au_count")? as usize;
    if n != AU_COUNT {
        return Err(Error::format("au_count", format!("expected {AU_COUNT}, found {n}")));
    }
    let count = r.u32("pose_count")? as usize;
    let id = r.str("identity_id")?;
    let mut poses = Vec::with_capacity(count);
    for _ in 0..count {
        let activation = registry.from_dense(&r.f32s(AU_COUNT, "pose_activation")?);
        let mesh = FaceMesh::new(r.f32s(3 * v, "pose_positions")?, None)
            .map_err(|e| Error::format("pose_positions", e.to_string()))?;
        poses.push(AnnotatedPose { activation, mesh });
    }
    r.finish("poses")?;
    Ok((id, poses))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentationSummary {
    pub rows: usize,
    pub manifest_sha256: String,
}

/// Writes `per_identity` fresh poses per bundle to `poses/<id>.aups` and a
/// tab-separated `manifest.tsv` with one row per pose.
pub fn export_augmentation(
    bundles: &[&IdentityBundle],
    per_identity: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<AugmentationSummary> {
    let registry = FacsRegistry::standard();
    for b in bundles {
        b.validate(registry)?;
    }
    let mut manifest = String::from("# sample\tfile\trecord\tlabels\n");
    let mut rows = 0;
    for (i, b) in bundles.iter().enumerate() {
        let poses = synth::generate_annotated_poses(
            b,
            per_identity,
            seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        )?;
        let file = format!("poses/{}.aups", b.identity_id);
        io::write_file(&out_dir.join(&file), &encode_poses(&b.identity_id, &poses, registry)?)?;
        for (k, p) in poses.iter().enumerate() {
            let labels: Vec<String> = binarize_labels(&p.activation, registry)
                .iter()
                .map(|l| l.to_string())
                .collect();
            let _ = writeln!(manifest, "{}_{k:04}\t{file}\t{k}\t{}", b.identity_id, labels.join(","));
            rows += 1;
        }
    }
    io::write_file(&out_dir.join("manifest.tsv"), manifest.as_bytes())?;
    Ok(AugmentationSummary {
        rows,
        manifest_sha256: io::sha256_hex(manifest.as_bytes()),
    })
}
