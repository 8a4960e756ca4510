//! Procedural stylized identities on a grid face.
//!
//! Each AU owns a 9x9 control lattice of 3D displacements laid over a box in
//! face coordinates `(u, v) in [-1, 1]^2`. Upper-face boxes sit in `v > 0`,
//! lower-face boxes in `v < 0`, and lattice borders are zero, so a delta never
//! leaves its box. A style scales the lattice field by region gain, a
//! left/right amplitude ramp, the face scale and finally the exaggeration,
//! and warps it horizontally by the asymmetry.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facs::{AuActivation, AuId, FacsRegistry, Region, AU_COUNT};
use crate::mesh::{compose, AnnotatedPose, AuBases, BlendDelta, FaceMesh, GridLayout, IdentityBundle, OffsetSequence};

pub const MIN_VERTICES: usize = 64;
pub const DESK_VERTICES: usize = 529;
const LATTICE: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionGains {
    pub upper_face: f64,
    pub lower_face: f64,
}

impl RegionGains {
    pub fn get(&self, region: Region) -> f64 {
        match region {
            Region::UpperFace => self.upper_face,
            Region::LowerFace => self.lower_face,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub seed: u64,
    pub face_scale: [f64; 3],
    pub asymmetry: f64,
    pub exaggeration: f64,
    pub region_gains: RegionGains,
    pub age_factor: f64,
    pub gender_factor: f64,
}

impl StyleParams {
    pub const FACE_SCALE: (f64, f64) = (0.85, 1.15);
    pub const ASYMMETRY: (f64, f64) = (0.0, 0.3);
    pub const EXAGGERATION: (f64, f64) = (0.5, 1.5);
    pub const REGION_GAIN: (f64, f64) = (0.75, 1.25);

    pub fn neutral(seed: u64) -> Self {
        Self {
            seed,
            face_scale: [1.0; 3],
            asymmetry: 0.0,
            exaggeration: 1.0,
            region_gains: RegionGains {
                upper_face: 1.0,
                lower_face: 1.0,
            },
            age_factor: 0.5,
            gender_factor: 0.5,
        }
    }

    /// Draws every field uniformly from its range.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut u = |(lo, hi): (f64, f64)| rng.gen_range(lo..=hi);
        let face_scale = [u(Self::FACE_SCALE), u(Self::FACE_SCALE), u(Self::FACE_SCALE)];
        let asymmetry = u(Self::ASYMMETRY);
        let exaggeration = u(Self::EXAGGERATION);
        let region_gains = RegionGains {
            upper_face: u(Self::REGION_GAIN),
            lower_face: u(Self::REGION_GAIN),
        };
        let age_factor = u((0.0, 1.0));
        let gender_factor = u((0.0, 1.0));
        let seed = rng.gen();
        Self {
            seed,
            face_scale,
            asymmetry,
            exaggeration,
            region_gains,
            age_factor,
            gender_factor,
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Field-wise linear interpolation; the seed is taken from the nearer end.
    pub fn lerp(a: &Self, b: &Self, t: f64) -> Self {
        let l = |x: f64, y: f64| x + (y - x) * t;
        Self {
            seed: if t < 0.5 { a.seed } else { b.seed },
            face_scale: std::array::from_fn(|i| l(a.face_scale[i], b.face_scale[i])),
            asymmetry: l(a.asymmetry, b.asymmetry),
            exaggeration: l(a.exaggeration, b.exaggeration),
            region_gains: RegionGains {
                upper_face: l(a.region_gains.upper_face, b.region_gains.upper_face),
                lower_face: l(a.region_gains.lower_face, b.region_gains.lower_face),
            },
            age_factor: l(a.age_factor, b.age_factor),
            gender_factor: l(a.gender_factor, b.gender_factor),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, (lo, hi): (f64, f64)| {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [{lo}, {hi}]")))
            }
        };
        for (i, &s) in self.face_scale.iter().enumerate() {
            check(&format!("face_scale[{i}]"), s, Self::FACE_SCALE)?;
        }
        check("asymmetry", self.asymmetry, Self::ASYMMETRY)?;
        check("exaggeration", self.exaggeration, Self::EXAGGERATION)?;
        check(
            "region_gains.upper_face",
            self.region_gains.upper_face,
            Self::REGION_GAIN,
        )?;
        check(
            "region_gains.lower_face",
            self.region_gains.lower_face,
            Self::REGION_GAIN,
        )?;
        check("age_factor", self.age_factor, (0.0, 1.0))?;
        check("gender_factor", self.gender_factor, (0.0, 1.0))
    }

    fn tags(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("seed".into(), self.seed.to_string());
        m.insert("exaggeration".into(), format!("{:.4}", self.exaggeration));
        m.insert("asymmetry".into(), format!("{:.4}", self.asymmetry));
        m.insert("age".into(), format!("{:.4}", self.age_factor));
        m.insert("gender".into(), format!("{:.4}", self.gender_factor));
        m
    }
}

// ----------------------------------------------------- canonical lattices

struct Blob {
    u: f64,
    v: f64,
    sigma: f64,
    dir: [f64; 3],
}

struct AuShape {
    id: u16,
    bbox: [f64; 4],
    amp: f64,
    mirror: bool,
    blobs: &'static [Blob],
}

const fn b(u: f64, v: f64, sigma: f64, dir: [f64; 3]) -> Blob {
    Blob { u, v, sigma, dir }
}

/// Boxes are `[u0, u1, v0, v1]`; mirrored blobs are reflected to `-u` with
/// the x direction negated.
static SHAPES: [AuShape; AU_COUNT] = [
    AuShape {
        id: 1,
        bbox: [-0.55, 0.55, 0.3, 0.95],
        amp: 0.06,
        mirror: true,
        blobs: &[b(0.15, 0.6, 0.12, [0.0, 1.0, 0.2])],
    },
    AuShape {
        id: 2,
        bbox: [-0.9, 0.9, 0.3, 0.95],
        amp: 0.06,
        mirror: true,
        blobs: &[b(0.55, 0.6, 0.14, [0.1, 1.0, 0.1])],
    },
    AuShape {
        id: 4,
        bbox: [-0.65, 0.65, 0.25, 0.9],
        amp: 0.05,
        mirror: true,
        blobs: &[b(0.25, 0.55, 0.13, [-0.4, -1.0, 0.1])],
    },
    AuShape {
        id: 5,
        bbox: [-0.8, 0.8, 0.12, 0.6],
        amp: 0.03,
        mirror: true,
        blobs: &[b(0.4, 0.38, 0.09, [0.0, 1.0, 0.1])],
    },
    AuShape {
        id: 6,
        bbox: [-0.95, 0.95, 0.05, 0.5],
        amp: 0.04,
        mirror: true,
        blobs: &[b(0.55, 0.18, 0.13, [0.1, 0.6, 0.8])],
    },
    AuShape {
        id: 7,
        bbox: [-0.8, 0.8, 0.08, 0.55],
        amp: 0.025,
        mirror: true,
        blobs: &[b(0.4, 0.26, 0.1, [0.0, 0.5, -0.3])],
    },
    AuShape {
        id: 9,
        bbox: [-0.4, 0.4, -0.45, -0.05],
        amp: 0.03,
        mirror: true,
        blobs: &[b(0.1, -0.17, 0.08, [0.1, 0.6, 0.5])],
    },
    AuShape {
        id: 10,
        bbox: [-0.55, 0.55, -0.6, -0.12],
        amp: 0.035,
        mirror: true,
        blobs: &[b(0.15, -0.38, 0.1, [0.0, 1.0, 0.3])],
    },
    AuShape {
        id: 11,
        bbox: [-0.75, 0.75, -0.65, -0.08],
        amp: 0.03,
        mirror: true,
        blobs: &[b(0.4, -0.32, 0.1, [0.2, 0.3, -0.6])],
    },
    AuShape {
        id: 12,
        bbox: [-0.8, 0.8, -0.8, -0.2],
        amp: 0.06,
        mirror: true,
        blobs: &[b(0.42, -0.52, 0.11, [0.6, 0.7, 0.0])],
    },
    AuShape {
        id: 13,
        bbox: [-0.9, 0.9, -0.75, -0.12],
        amp: 0.04,
        mirror: true,
        blobs: &[b(0.5, -0.42, 0.12, [0.3, 0.4, 0.3])],
    },
    AuShape {
        id: 14,
        bbox: [-0.85, 0.85, -0.85, -0.28],
        amp: 0.03,
        mirror: true,
        blobs: &[b(0.5, -0.56, 0.09, [0.0, 0.0, -0.8])],
    },
    AuShape {
        id: 15,
        bbox: [-0.8, 0.8, -0.9, -0.3],
        amp: 0.05,
        mirror: true,
        blobs: &[b(0.42, -0.62, 0.11, [0.1, -1.0, 0.0])],
    },
    AuShape {
        id: 16,
        bbox: [-0.55, 0.55, -0.92, -0.45],
        amp: 0.04,
        mirror: true,
        blobs: &[b(0.12, -0.68, 0.1, [0.0, -1.0, 0.2])],
    },
    AuShape {
        id: 17,
        bbox: [-0.55, 0.55, -0.99, -0.55],
        amp: 0.04,
        mirror: false,
        blobs: &[b(0.0, -0.84, 0.12, [0.0, 0.7, 0.5])],
    },
    AuShape {
        id: 18,
        bbox: [-0.65, 0.65, -0.85, -0.3],
        amp: 0.04,
        mirror: true,
        blobs: &[b(0.22, -0.57, 0.1, [-0.6, 0.0, 0.6])],
    },
    AuShape {
        id: 20,
        bbox: [-0.85, 0.85, -0.85, -0.3],
        amp: 0.045,
        mirror: true,
        blobs: &[b(0.42, -0.58, 0.11, [1.0, -0.2, 0.0])],
    },
    AuShape {
        id: 22,
        bbox: [-0.55, 0.55, -0.85, -0.3],
        amp: 0.035,
        mirror: true,
        blobs: &[
            b(0.14, -0.5, 0.07, [0.0, 0.2, 1.0]),
            b(0.14, -0.65, 0.07, [0.0, -0.2, 1.0]),
        ],
    },
    AuShape {
        id: 23,
        bbox: [-0.6, 0.6, -0.82, -0.32],
        amp: 0.03,
        mirror: true,
        blobs: &[b(0.2, -0.57, 0.09, [-0.2, 0.0, -0.6])],
    },
    AuShape {
        id: 24,
        bbox: [-0.55, 0.55, -0.82, -0.32],
        amp: 0.03,
        mirror: false,
        blobs: &[
            b(0.0, -0.5, 0.1, [0.0, -0.5, -0.1]),
            b(0.0, -0.64, 0.1, [0.0, 0.5, -0.1]),
        ],
    },
    AuShape {
        id: 25,
        bbox: [-0.6, 0.6, -0.85, -0.3],
        amp: 0.04,
        mirror: false,
        blobs: &[
            b(0.0, -0.5, 0.11, [0.0, 0.3, 0.0]),
            b(0.0, -0.65, 0.11, [0.0, -0.6, 0.0]),
        ],
    },
    AuShape {
        id: 26,
        bbox: [-0.85, 0.85, -0.99, -0.45],
        amp: 0.09,
        mirror: false,
        blobs: &[b(0.0, -0.8, 0.2, [0.0, -1.0, -0.2])],
    },
    AuShape {
        id: 27,
        bbox: [-0.8, 0.8, -0.99, -0.35],
        amp: 0.06,
        mirror: false,
        blobs: &[
            b(0.0, -0.76, 0.15, [0.0, -1.0, 0.0]),
            b(0.3, -0.57, 0.08, [-0.3, 0.0, 0.0]),
            b(-0.3, -0.57, 0.08, [0.3, 0.0, 0.0]),
        ],
    },
    AuShape {
        id: 28,
        bbox: [-0.55, 0.55, -0.85, -0.4],
        amp: 0.03,
        mirror: false,
        blobs: &[b(0.0, -0.64, 0.1, [0.0, 0.2, -0.8])],
    },
    AuShape {
        id: 29,
        bbox: [-0.7, 0.7, -0.99, -0.5],
        amp: 0.04,
        mirror: false,
        blobs: &[b(0.0, -0.84, 0.18, [0.0, 0.0, 1.0])],
    },
    AuShape {
        id: 30,
        bbox: [-0.7, 0.7, -0.99, -0.5],
        amp: 0.04,
        mirror: false,
        blobs: &[b(0.0, -0.84, 0.18, [1.0, 0.0, 0.0])],
    },
    AuShape {
        id: 33,
        bbox: [-0.95, 0.95, -0.7, -0.15],
        amp: 0.04,
        mirror: true,
        blobs: &[b(0.56, -0.4, 0.12, [0.3, 0.0, 0.8])],
    },
    AuShape {
        id: 34,
        bbox: [-0.9, 0.9, -0.75, -0.2],
        amp: 0.05,
        mirror: true,
        blobs: &[b(0.48, -0.48, 0.15, [0.4, -0.1, 0.6])],
    },
    AuShape {
        id: 35,
        bbox: [-0.9, 0.9, -0.75, -0.2],
        amp: 0.035,
        mirror: true,
        blobs: &[b(0.5, -0.45, 0.12, [0.0, 0.0, -0.7])],
    },
    AuShape {
        id: 38,
        bbox: [-0.4, 0.4, -0.4, -0.05],
        amp: 0.02,
        mirror: true,
        blobs: &[b(0.12, -0.22, 0.07, [1.0, 0.0, 0.2])],
    },
    AuShape {
        id: 39,
        bbox: [-0.4, 0.4, -0.4, -0.05],
        amp: 0.02,
        mirror: true,
        blobs: &[b(0.12, -0.22, 0.07, [-1.0, 0.0, -0.2])],
    },
    AuShape {
        id: 43,
        bbox: [-0.8, 0.8, 0.12, 0.6],
        amp: 0.035,
        mirror: true,
        blobs: &[b(0.4, 0.36, 0.1, [0.0, -1.0, 0.1])],
    },
];

/// A 9x9 lattice of displacement vectors over a box; border nodes are zero.
struct Lattice {
    bbox: [f64; 4],
    nodes: [[[f64; 3]; LATTICE]; LATTICE],
}

impl Lattice {
    fn author(shape: &AuShape) -> Self {
        let [u0, u1, v0, v1] = shape.bbox;
        let mut nodes = [[[0.0; 3]; LATTICE]; LATTICE];
        let last = (LATTICE - 1) as f64;
        for (j, row) in nodes.iter_mut().enumerate().skip(1).take(LATTICE - 2) {
            for (i, node) in row.iter_mut().enumerate().skip(1).take(LATTICE - 2) {
                let u = u0 + (u1 - u0) * i as f64 / last;
                let v = v0 + (v1 - v0) * j as f64 / last;
                let mut add = |bl: &Blob, sign: f64| {
                    let du = u - sign * bl.u;
                    let dv = v - bl.v;
                    let g = (-(du * du + dv * dv) / (2.0 * bl.sigma * bl.sigma)).exp();
                    node[0] += shape.amp * g * sign * bl.dir[0];
                    node[1] += shape.amp * g * bl.dir[1];
                    node[2] += shape.amp * g * bl.dir[2];
                };
                for bl in shape.blobs {
                    add(bl, 1.0);
                    if shape.mirror {
                        add(bl, -1.0);
                    }
                }
            }
        }
        Self {
            bbox: shape.bbox,
            nodes,
        }
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        let [u0, u1, v0, v1] = self.bbox;
        u > u0 && u < u1 && v > v0 && v < v1
    }

    /// Bilinear sample; zero outside the box.
    fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        if !self.contains(u, v) {
            return [0.0; 3];
        }
        let [u0, u1, v0, v1] = self.bbox;
        let last = (LATTICE - 1) as f64;
        let s = (u - u0) / (u1 - u0) * last;
        let t = (v - v0) / (v1 - v0) * last;
        let (i, j) = (
            (s.floor() as usize).min(LATTICE - 2),
            (t.floor() as usize).min(LATTICE - 2),
        );
        let (fs, ft) = (s - i as f64, t - j as f64);
        std::array::from_fn(|c| {
            let n = &self.nodes;
            (1.0 - ft) * ((1.0 - fs) * n[j][i][c] + fs * n[j][i + 1][c])
                + ft * ((1.0 - fs) * n[j + 1][i][c] + fs * n[j + 1][i + 1][c])
        })
    }
}

static LATTICES: LazyLock<Vec<(AuId, Lattice)>> =
    LazyLock::new(|| SHAPES.iter().map(|s| (AuId(s.id), Lattice::author(s))).collect());

fn lattice(au: AuId) -> &'static Lattice {
    &LATTICES
        .iter()
        .find(|(id, _)| *id == au)
        .expect("every registered AU has a lattice")
        .1
}

// --------------------------------------------------------------- regions

fn check_vertices(vertex_count: usize) -> Result<GridLayout> {
    if vertex_count < MIN_VERTICES {
        return Err(Error::Config(format!(
            "{vertex_count} vertices cannot host the facial regions (minimum {MIN_VERTICES})"
        )));
    }
    Ok(GridLayout::new(vertex_count))
}

fn mask_where(vertex_count: usize, pred: impl Fn(f64, f64) -> bool) -> Result<Vec<usize>> {
    let g = check_vertices(vertex_count)?;
    Ok((0..vertex_count)
        .filter(|&i| {
            let (u, v) = g.uv(i);
            pred(u, v)
        })
        .collect())
}

/// Vertices with `v > 0`.
pub fn upper_face_mask(vertex_count: usize) -> Result<Vec<usize>> {
    mask_where(vertex_count, |_, v| v > 0.0)
}

/// Vertices with `v < 0`.
pub fn lower_face_mask(vertex_count: usize) -> Result<Vec<usize>> {
    mask_where(vertex_count, |_, v| v < 0.0)
}

pub fn region_mask(region: Region, vertex_count: usize) -> Result<Vec<usize>> {
    match region {
        Region::UpperFace => upper_face_mask(vertex_count),
        Region::LowerFace => lower_face_mask(vertex_count),
    }
}

/// Vertices around the lips, used for lip-vertex metrics.
pub fn lip_mask(vertex_count: usize) -> Result<Vec<usize>> {
    mask_where(vertex_count, |u, v| u.abs() <= 0.6 && (-0.8..=-0.35).contains(&v))
}

/// Vertices in the horizontal band an AU's lattice covers. The band ignores
/// `u` because the asymmetry warp shifts features sideways.
pub fn au_band_mask(au: AuId, vertex_count: usize) -> Result<Vec<usize>> {
    let [_, _, v0, v1] = lattice(au).bbox;
    mask_where(vertex_count, |_, v| v > v0 && v < v1)
}

// ------------------------------------------------------------- identities

fn warp_u(u: f64, v: f64, asymmetry: f64) -> f64 {
    u + 0.25 * asymmetry * (1.0 - u * u) * (0.5 + 0.5 * v.abs())
}

fn gauss(u: f64, v: f64, cu: f64, cv: f64, su: f64, sv: f64) -> f64 {
    let (du, dv) = ((u - cu) / su, (v - cv) / sv);
    (-0.5 * (du * du + dv * dv)).exp()
}

fn template_height(style: &StyleParams, u: f64, v: f64) -> f64 {
    let uw = warp_u(u, v, style.asymmetry);
    let side = 1.0 + style.asymmetry * u;
    let pair = |cu: f64, cv: f64, su: f64, sv: f64| gauss(uw, v, cu, cv, su, sv) + gauss(uw, v, -cu, cv, su, sv);
    let upper = 0.08 * pair(0.35, 0.55, 0.2, 0.1) - 0.1 * pair(0.4, 0.3, 0.13, 0.1);
    let lower = 0.25 * gauss(uw, v, 0.0, -0.05, 0.1, 0.16)
        + 0.06 * gauss(uw, v, 0.0, -0.57, 0.25, 0.07)
        + 0.08 * gauss(uw, v, 0.0, -0.88, 0.18, 0.1);
    let features =
        style.exaggeration * side * (style.region_gains.upper_face * upper + style.region_gains.lower_face * lower);
    let dome = 0.6 * (1.0 - 0.35 * (u * u + v * v)).max(0.0).sqrt();
    let age = -0.03 * style.age_factor * pair(0.35, -0.3, 0.08, 0.12);
    let gender = 0.05 * style.gender_factor * pair(0.6, -0.75, 0.15, 0.12);
    dome + features + age + gender
}

fn seed_bumps(seed: u64) -> impl Fn(f64, f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    move |u, v| {
        1e-3 * ((3.0 * u + phases[0]).sin() * (2.0 * v + phases[1]).cos()
            + 0.5 * (5.0 * u - 4.0 * v + phases[2]).sin() * (phases[3] + u).cos())
    }
}

pub fn generate_template(style: &StyleParams, vertex_count: usize) -> Result<FaceMesh> {
    style.validate()?;
    let g = check_vertices(vertex_count)?;
    let bumps = seed_bumps(style.seed);
    let fs = style.face_scale;
    let mut pos = Vec::with_capacity(3 * vertex_count);
    for i in 0..vertex_count {
        let (u, v) = g.uv(i);
        let h = template_height(style, u, v) + bumps(u, v);
        pos.extend([(fs[0] * u) as f32, (fs[1] * v) as f32, (fs[2] * h) as f32]);
    }
    FaceMesh::new(pos, Some(g.topology()))
}

pub fn generate_bases(style: &StyleParams, vertex_count: usize) -> Result<AuBases> {
    style.validate()?;
    let g = check_vertices(vertex_count)?;
    let reg = FacsRegistry::standard();
    let deltas = reg
        .list_aus()
        .iter()
        .map(|desc| {
            let lat = lattice(desc.id);
            let gain = style.region_gains.get(desc.region);
            let mut d = Vec::with_capacity(3 * vertex_count);
            for i in 0..vertex_count {
                let (u, v) = g.uv(i);
                let field = lat.sample(warp_u(u, v, style.asymmetry), v);
                let side = 1.0 + style.asymmetry * u;
                for c in 0..3 {
                    let shaped = gain * side * style.face_scale[c] * field[c];
                    d.push((style.exaggeration * shaped) as f32);
                }
            }
            BlendDelta { au: desc.id, deltas: d }
        })
        .collect();
    AuBases::new(deltas, reg)
}

/// A bundle without annotated poses.
pub fn generate_identity(style: &StyleParams, vertex_count: usize) -> Result<IdentityBundle> {
    Ok(IdentityBundle {
        identity_id: format!("style_{:016x}", style.seed),
        template: generate_template(style, vertex_count)?,
        bases: generate_bases(style, vertex_count)?,
        annotated_poses: Vec::new(),
        style_meta: style.tags(),
    })
}

/// 2 to 4 distinct AUs at intensities drawn from `[0.3, 1.0]`.
pub fn sample_combination(rng: &mut impl Rng) -> AuActivation {
    let ids: Vec<AuId> = FacsRegistry::standard().ids().collect();
    let k = rng.gen_range(2..=4);
    let mut a = AuActivation::new();
    for i in sample(rng, ids.len(), k).into_iter() {
        a.set(ids[i], rng.gen_range(0.3f32..=1.0));
    }
    a
}

/// Half single-AU poses at intensities in `[0.1, 1.0]`, half combinations.
pub fn generate_annotated_poses(bundle: &IdentityBundle, k: usize, seed: u64) -> Result<Vec<AnnotatedPose>> {
    if k == 0 {
        return Err(Error::Contract("at least one annotated pose is required".into()));
    }
    let ids: Vec<AuId> = FacsRegistry::standard().ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let activation = if rng.gen_bool(0.5) {
                let au = ids[rng.gen_range(0..ids.len())];
                let mut a = AuActivation::new();
                a.set(au, rng.gen_range(0.1f32..=1.0));
                a
            } else {
                sample_combination(&mut rng)
            };
            let mesh = compose(&bundle.template, &bundle.bases, &activation)?.with_topology(None)?;
            Ok(AnnotatedPose { activation, mesh })
        })
        .collect()
}

// ---------------------------------------------------------------- dataset

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Largest-remainder apportionment of `n` items over `weights`; ties go to
/// the earlier bucket.
pub fn apportion(n: usize, weights: &[usize]) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    let mut counts: Vec<usize> = weights.iter().map(|w| n * w / total).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse((n * weights[i]) % total));
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

impl DatasetSplit {
    /// 8:1:1 in the given order.
    pub fn partition(ids: &[String]) -> Self {
        let c = apportion(ids.len(), &[8, 1, 1]);
        Self {
            train: ids[..c[0]].to_vec(),
            val: ids[c[0]..c[0] + c[1]].to_vec(),
            test: ids[c[0] + c[1]..].to_vec(),
        }
    }
}

pub const POSES_PER_IDENTITY: usize = 8;

pub struct SynthDataset {
    pub styles: Vec<StyleParams>,
    pub bundles: Vec<IdentityBundle>,
    pub split: DatasetSplit,
}

impl SynthDataset {
    pub fn bundle(&self, id: &str) -> Option<&IdentityBundle> {
        self.bundles.iter().find(|b| b.identity_id == id)
    }
}

pub fn identity_name(index: usize) -> String {
    format!("id_{index:04}")
}

pub fn generate_dataset(count: usize, seed: u64, vertex_count: usize) -> Result<SynthDataset> {
    if count < 10 {
        return Err(Error::Config(format!(
            "dataset needs at least 10 identities, got {count}"
        )));
    }
    check_vertices(vertex_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let styles: Vec<StyleParams> = (0..count).map(|_| StyleParams::sample(&mut rng)).collect();
    let mut bundles = Vec::with_capacity(count);
    for (i, style) in styles.iter().enumerate() {
        let mut b = generate_identity(style, vertex_count)?;
        b.identity_id = identity_name(i);
        b.annotated_poses = generate_annotated_poses(&b, POSES_PER_IDENTITY, style.seed)?;
        bundles.push(b);
    }
    let ids: Vec<String> = bundles.iter().map(|b| b.identity_id.clone()).collect();
    let split = DatasetSplit::partition(&ids);
    Ok(SynthDataset { styles, bundles, split })
}

/// Identities whose styles interpolate pairs of `train` styles: the pair
/// `(2i, 2i + 1)` at `t = 0.3 + 0.4 i` (mod 1).
pub fn interpolated_identities(
    train: &[StyleParams],
    count: usize,
    vertex_count: usize,
) -> Result<Vec<IdentityBundle>> {
    if train.len() < 2 {
        return Err(Error::Contract("interpolation needs two training styles".into()));
    }
    (0..count)
        .map(|i| {
            let a = &train[(2 * i) % train.len()];
            let b = &train[(2 * i + 1) % train.len()];
            let t = (0.3 + 0.4 * i as f64).fract();
            let mut bundle = generate_identity(&StyleParams::lerp(a, b, t), vertex_count)?;
            bundle.identity_id = format!("interp_{i:02}");
            Ok(bundle)
        })
        .collect()
}

/// Jaw and lip motion, the stand-in for a speech-driven model's output.
pub fn synth_speech(vertex_count: usize, frames: usize, frame_rate: f32, seed: u64) -> Result<OffsetSequence> {
    if frames == 0 {
        return Err(Error::Contract("speech needs at least one frame".into()));
    }
    let neutral = generate_bases(&StyleParams::neutral(0), vertex_count)?;
    let field = |au: u16| &neutral.get(AuId(au)).expect("registered").deltas;
    let (jaw, lips, round) = (field(26), field(25), field(18));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f1, f2) = (rng.gen_range(2.5..4.5), rng.gen_range(5.0..7.0));
    let (p1, p2) = (
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let mut data = Vec::with_capacity(frames * 3 * vertex_count);
    for t in 0..frames {
        let s = t as f64 / frame_rate as f64;
        let open = 0.5 + 0.5 * (std::f64::consts::TAU * f1 * s + p1).sin();
        let shape = 0.5 + 0.5 * (std::f64::consts::TAU * f2 * s + p2).sin();
        for k in 0..3 * vertex_count {
            let v = 0.6 * open * jaw[k] as f64 + 0.5 * shape * lips[k] as f64 + 0.3 * (1.0 - open) * round[k] as f64;
            data.push(v as f32);
        }
    }
    OffsetSequence::new(frame_rate, vertex_count, data)
}
