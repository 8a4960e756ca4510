//! Registry of the retained action units and the emotion presets.
//!
//! The table is data: it is parsed from `data/facs.toml` on first use and
//! validated before anything else can see it.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of action units every identity carries a basis for.
pub const AU_COUNT: usize = 32;

const STANDARD_TABLE: &str = include_str!("../data/facs.toml");

static STANDARD: LazyLock<FacsRegistry> =
    LazyLock::new(|| FacsRegistry::from_toml_str(STANDARD_TABLE).expect("bundled FACS table is valid"));

/// FACS action-unit number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AuId(pub u16);

impl fmt::Display for AuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AU{}", self.0)
    }
}

impl FromStr for AuId {
    type Err = Error;

    /// Accepts `AU12`, `au12` or `12`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let digits = t
            .strip_prefix("AU")
            .or_else(|| t.strip_prefix("au"))
            .or_else(|| t.strip_prefix("Au"))
            .unwrap_or(t);
        digits
            .parse::<u16>()
            .map(AuId)
            .map_err(|_| Error::format("activation", format!("`{s}` is not an AU identifier")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    UpperFace,
    LowerFace,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuDescriptor {
    pub id: AuId,
    pub name: String,
    pub region: Region,
    #[serde(default)]
    pub notes: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Emotion {
    Happiness,
    Sadness,
    Surprise,
    Fear,
    Anger,
    Disgust,
    Contempt,
}

impl Emotion {
    pub const ALL: [Emotion; 7] = [
        Emotion::Happiness,
        Emotion::Sadness,
        Emotion::Surprise,
        Emotion::Fear,
        Emotion::Anger,
        Emotion::Disgust,
        Emotion::Contempt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Happiness => "happiness",
            Emotion::Sadness => "sadness",
            Emotion::Surprise => "surprise",
            Emotion::Fear => "fear",
            Emotion::Anger => "anger",
            Emotion::Disgust => "disgust",
            Emotion::Contempt => "contempt",
        }
    }

    fn valid_names() -> String {
        Self::ALL.map(Emotion::name).join(", ")
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|e| e.name() == lower)
            .ok_or_else(|| Error::UnknownEmotion {
                name: s.to_string(),
                valid: Self::valid_names(),
            })
    }
}

/// Sparse AU intensities; absent AUs are zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AuActivation {
    weights: BTreeMap<AuId, f32>,
}

impl AuActivation {
    pub fn new() -> Self {
        Self::default()
    }

    /// Unvalidated insert; zero removes the entry.
    pub fn set(&mut self, au: AuId, weight: f32) {
        if weight == 0.0 {
            self.weights.remove(&au);
        } else {
            self.weights.insert(au, weight);
        }
    }

    pub fn with(mut self, au: u16, weight: f32) -> Self {
        self.set(AuId(au), weight);
        self
    }

    pub fn get(&self, au: AuId) -> f32 {
        self.weights.get(&au).copied().unwrap_or(0.0)
    }

    /// Non-zero entries in ascending AU order.
    pub fn iter(&self) -> impl Iterator<Item = (AuId, f32)> + '_ {
        self.weights.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn scaled(&self, factor: f32) -> Self {
        let mut out = Self::new();
        for (au, w) in self.iter() {
            out.set(au, w * factor);
        }
        out
    }

    /// Parses the inline grammar `AU6=0.5,AU12=0.7`. Whitespace, newlines
    /// and `#` comments are allowed; the empty string is the empty activation.
    pub fn parse_inline(s: &str) -> Result<Self> {
        let mut out = Self::new();
        let body: String = s
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .collect::<Vec<_>>()
            .join(",");
        for item in body.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::format("activation", format!("`{item}` is not of the form AUk=w")))?;
            let au: AuId = k.parse()?;
            let w: f32 = v
                .trim()
                .parse()
                .map_err(|_| Error::format("activation", format!("`{v}` is not a number for {au}")))?;
            if out.weights.contains_key(&au) {
                return Err(Error::format("activation", format!("{au} given twice")));
            }
            out.weights.insert(au, w);
        }
        out.weights.retain(|_, w| *w != 0.0);
        Ok(out)
    }

    pub fn to_inline(&self) -> String {
        self.iter()
            .map(|(au, w)| format!("{au}={w}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    UnknownAu(AuId),
    OutOfRange { au: AuId, weight: f32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownAu(au) => write!(f, "{au} is not a registered action unit"),
            Violation::OutOfRange { au, weight } => {
                write!(f, "{au} intensity {weight} outside [0, 1]")
            }
        }
    }
}

/// Every problem found in an activation, not just the first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmotionPreset {
    pub emotion: Emotion,
    pub activation: AuActivation,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawTable {
    version: u32,
    au: Vec<AuDescriptor>,
    preset: Vec<RawPreset>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawPreset {
    emotion: String,
    aus: Vec<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intensities: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FacsRegistry {
    aus: Vec<AuDescriptor>,
    presets: Vec<EmotionPreset>,
}

impl FacsRegistry {
    /// The bundled table.
    pub fn standard() -> &'static FacsRegistry {
        &STANDARD
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawTable = toml::from_str(text).map_err(|e| Error::Registry(format!("malformed table: {e}")))?;
        if raw.version != 1 {
            return Err(Error::Registry(format!("unsupported version {}", raw.version)));
        }
        let mut aus = raw.au;
        aus.sort_by_key(|a| a.id);
        if aus.len() != AU_COUNT {
            return Err(Error::Registry(format!(
                "expected {AU_COUNT} action units, found {}",
                aus.len()
            )));
        }
        if aus.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::Registry("duplicate action unit id".into()));
        }
        let mut registry = FacsRegistry {
            aus,
            presets: Vec::new(),
        };
        let mut seen = HashSet::new();
        for p in raw.preset {
            let emotion: Emotion = p
                .emotion
                .parse()
                .map_err(|_| Error::Registry(format!("unknown preset emotion `{}`", p.emotion)))?;
            if !seen.insert(emotion) {
                return Err(Error::Registry(format!("preset `{emotion}` given twice")));
            }
            if p.aus.is_empty() {
                return Err(Error::Registry(format!("preset `{emotion}` lists no AUs")));
            }
            let intensities = match p.intensities {
                Some(v) if v.len() != p.aus.len() => {
                    return Err(Error::Registry(format!(
                        "preset `{emotion}`: {} intensities for {} AUs",
                        v.len(),
                        p.aus.len()
                    )))
                }
                Some(v) => v,
                None => vec![1.0; p.aus.len()],
            };
            let mut activation = AuActivation::new();
            for (&au, &w) in p.aus.iter().zip(&intensities) {
                if w <= 0.0 {
                    return Err(Error::Registry(format!(
                        "preset `{emotion}`: AU{au} intensity must be positive"
                    )));
                }
                activation.set(AuId(au), w);
            }
            registry
                .validate_activation(&activation)
                .map_err(|r| Error::Registry(format!("preset `{emotion}`: {r}")))?;
            registry.presets.push(EmotionPreset { emotion, activation });
        }
        Ok(registry)
    }

    pub fn to_toml_string(&self) -> String {
        let raw = RawTable {
            version: 1,
            au: self.aus.clone(),
            preset: self
                .presets
                .iter()
                .map(|p| {
                    let (aus, ints): (Vec<u16>, Vec<f32>) = p.activation.iter().map(|(a, w)| (a.0, w)).unzip();
                    RawPreset {
                        emotion: p.emotion.name().to_string(),
                        aus,
                        intensities: ints.iter().any(|&w| w != 1.0).then_some(ints),
                    }
                })
                .collect(),
        };
        toml::to_string(&raw).expect("registry serialises")
    }

    /// All descriptors, ascending by id.
    pub fn list_aus(&self) -> &[AuDescriptor] {
        &self.aus
    }

    pub fn presets(&self) -> &[EmotionPreset] {
        &self.presets
    }

    pub fn ids(&self) -> impl Iterator<Item = AuId> + '_ {
        self.aus.iter().map(|a| a.id)
    }

    /// Position of `au` in registry order, which is also the basis order.
    pub fn index_of(&self, au: AuId) -> Option<usize> {
        self.aus.binary_search_by_key(&au, |a| a.id).ok()
    }

    pub fn descriptor(&self, au: AuId) -> Option<&AuDescriptor> {
        self.index_of(au).map(|i| &self.aus[i])
    }

    pub fn preset(&self, emotion: Emotion) -> Option<&EmotionPreset> {
        self.presets.iter().find(|p| p.emotion == emotion)
    }

    /// Case-insensitive lookup of one of the seven emotion presets.
    pub fn emotion_to_activation(&self, emotion: &str) -> Result<AuActivation> {
        let e: Emotion = emotion.parse()?;
        self.preset(e)
            .map(|p| p.activation.clone())
            .ok_or_else(|| Error::UnknownEmotion {
                name: emotion.to_string(),
                valid: self
                    .presets
                    .iter()
                    .map(|p| p.emotion.name())
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }

    pub fn validate_activation(&self, a: &AuActivation) -> std::result::Result<(), ValidationReport> {
        let mut report = ValidationReport::default();
        for (au, w) in a.iter() {
            if self.index_of(au).is_none() {
                report.violations.push(Violation::UnknownAu(au));
            } else if !(0.0..=1.0).contains(&w) {
                report.violations.push(Violation::OutOfRange { au, weight: w });
            }
        }
        if report.violations.is_empty() {
            Ok(())
        } else {
            Err(report)
        }
    }

    /// Dense weights in registry order.
    pub fn to_dense(&self, a: &AuActivation) -> Vec<f32> {
        self.aus.iter().map(|d| a.get(d.id)).collect()
    }

    pub fn from_dense(&self, dense: &[f32]) -> AuActivation {
        let mut out = AuActivation::new();
        for (d, &w) in self.aus.iter().zip(dense) {
            out.set(d.id, w);
        }
        out
    }
}
