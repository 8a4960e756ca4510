//! Geometry model and blendshape arithmetic.
//!
//! Positions and deltas are stored vertex-major with interleaved `x, y, z`
//! (`[x0, y0, z0, x1, ...]`); that is also the flattening the models see.

use std::collections::BTreeMap;

use aublend_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::facs::{AuActivation, AuId, FacsRegistry, AU_COUNT};

#[derive(Clone, Debug, PartialEq)]
pub struct FaceMesh {
    positions: Vec<f32>,
    topology: Option<Vec<[u32; 3]>>,
}

impl FaceMesh {
    pub fn new(positions: Vec<f32>, topology: Option<Vec<[u32; 3]>>) -> Result<Self> {
        if positions.is_empty() || positions.len() % 3 != 0 {
            return Err(Error::Shape(format!(
                "{} coordinates do not form whole vertices",
                positions.len()
            )));
        }
        if let Some(i) = positions.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("vertex {} has a non-finite coordinate", i / 3)));
        }
        let v = (positions.len() / 3) as u32;
        if let Some(tris) = &topology {
            if let Some(t) = tris.iter().find(|t| t.iter().any(|&i| i >= v)) {
                return Err(Error::Shape(format!(
                    "triangle {t:?} references a vertex outside 0..{v}"
                )));
            }
        }
        Ok(Self { positions, topology })
    }

    pub fn vertex_count(&self) -> usize {
        self.positions.len() / 3
    }

    pub fn positions(&self) -> &[f32] {
        &self.positions
    }

    pub fn vertex(&self, i: usize) -> [f32; 3] {
        [
            self.positions[3 * i],
            self.positions[3 * i + 1],
            self.positions[3 * i + 2],
        ]
    }

    pub fn topology(&self) -> Option<&[[u32; 3]]> {
        self.topology.as_deref()
    }

    pub fn with_topology(mut self, topology: Option<Vec<[u32; 3]>>) -> Result<Self> {
        let positions = std::mem::take(&mut self.positions);
        Self::new(positions, topology)
    }

    pub fn into_positions(self) -> Vec<f32> {
        self.positions
    }
}

/// Displacement field of one action unit, relative to the template.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendDelta {
    pub au: AuId,
    pub deltas: Vec<f32>,
}

impl BlendDelta {
    pub fn vertex_count(&self) -> usize {
        self.deltas.len() / 3
    }

    /// Root-mean-square per-vertex displacement length.
    pub fn rms_magnitude(&self) -> f64 {
        let v = self.vertex_count().max(1) as f64;
        let ss: f64 = self.deltas.iter().map(|&d| (d as f64) * (d as f64)).sum();
        (ss / v).sqrt()
    }
}

/// One delta per registered action unit, in registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct AuBases {
    vertex_count: usize,
    deltas: Vec<BlendDelta>,
}

impl AuBases {
    pub fn new(mut deltas: Vec<BlendDelta>, registry: &FacsRegistry) -> Result<Self> {
        if deltas.len() != AU_COUNT {
            return Err(Error::format(
                "bases",
                format!("expected {AU_COUNT} AU bases, found {}", deltas.len()),
            ));
        }
        deltas.sort_by_key(|d| d.au);
        for (d, id) in deltas.iter().zip(registry.ids()) {
            if d.au != id {
                return Err(Error::format(
                    "bases",
                    format!("basis set does not match the registry at {id} (found {})", d.au),
                ));
            }
        }
        let vertex_count = deltas[0].vertex_count();
        for d in &deltas {
            if d.deltas.len() != 3 * vertex_count || vertex_count == 0 {
                return Err(Error::Shape(format!(
                    "{} delta has {} coordinates, expected {}",
                    d.au,
                    d.deltas.len(),
                    3 * vertex_count
                )));
            }
            if d.deltas.iter().any(|v| !v.is_finite()) {
                return Err(Error::Shape(format!("{} delta is not finite", d.au)));
            }
        }
        Ok(Self { vertex_count, deltas })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn deltas(&self) -> &[BlendDelta] {
        &self.deltas
    }

    pub fn get(&self, au: AuId) -> Option<&BlendDelta> {
        self.deltas
            .binary_search_by_key(&au, |d| d.au)
            .ok()
            .map(|i| &self.deltas[i])
    }

    /// `[32, 3V]` matrix, one flattened delta per row.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .deltas
            .iter()
            .flat_map(|d| d.deltas.iter().map(|&v| v as f64))
            .collect();
        Tensor::new(&[self.deltas.len(), 3 * self.vertex_count], data).expect("bases are non-empty")
    }

    pub fn from_tensor(t: &Tensor, registry: &FacsRegistry) -> Result<Self> {
        if t.rank() != 2 || t.rows() != AU_COUNT || t.cols() % 3 != 0 {
            return Err(Error::Shape(format!(
                "expected a [{AU_COUNT}, 3V] basis matrix, got {:?}",
                t.shape()
            )));
        }
        let deltas = registry
            .ids()
            .enumerate()
            .map(|(i, au)| BlendDelta {
                au,
                deltas: t.row(i).iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self::new(deltas, registry)
    }

    /// Element-wise mean of several basis sets.
    pub fn mean(sets: &[&AuBases]) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Contract("mean of zero basis sets".into()))?;
        let n = sets.len() as f64;
        let mut deltas = Vec::with_capacity(AU_COUNT);
        for (k, d0) in first.deltas.iter().enumerate() {
            let mut acc = vec![0.0f64; d0.deltas.len()];
            for s in sets {
                if s.vertex_count != first.vertex_count {
                    return Err(Error::Shape("basis sets differ in vertex count".into()));
                }
                for (a, &v) in acc.iter_mut().zip(&s.deltas[k].deltas) {
                    *a += v as f64;
                }
            }
            deltas.push(BlendDelta {
                au: d0.au,
                deltas: acc.into_iter().map(|v| (v / n) as f32).collect(),
            });
        }
        Ok(Self {
            vertex_count: first.vertex_count,
            deltas,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedPose {
    pub activation: AuActivation,
    pub mesh: FaceMesh,
}

/// Template, its 32 AU bases and example poses for one character.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityBundle {
    pub identity_id: String,
    pub template: FaceMesh,
    pub bases: AuBases,
    pub annotated_poses: Vec<AnnotatedPose>,
    pub style_meta: BTreeMap<String, String>,
}

impl IdentityBundle {
    pub fn vertex_count(&self) -> usize {
        self.template.vertex_count()
    }

    pub fn validate(&self, registry: &FacsRegistry) -> Result<()> {
        let v = self.vertex_count();
        if self.bases.vertex_count() != v {
            return Err(Error::Shape(format!(
                "bases have {} vertices, template has {v}",
                self.bases.vertex_count()
            )));
        }
        for (i, p) in self.annotated_poses.iter().enumerate() {
            if p.mesh.vertex_count() != v {
                return Err(Error::Shape(format!(
                    "pose {i} has {} vertices, template has {v}",
                    p.mesh.vertex_count()
                )));
            }
            registry.validate_activation(&p.activation).map_err(Error::Validation)?;
        }
        Ok(())
    }
}

/// Per-frame displacement fields, `T x 3V` flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetSequence {
    pub frame_rate: f32,
    vertex_count: usize,
    data: Vec<f32>,
}

impl OffsetSequence {
    pub fn new(frame_rate: f32, vertex_count: usize, data: Vec<f32>) -> Result<Self> {
        if vertex_count == 0 || data.is_empty() || data.len() % (3 * vertex_count) != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form whole frames of {vertex_count} vertices",
                data.len()
            )));
        }
        if !frame_rate.is_finite() || frame_rate <= 0.0 {
            return Err(Error::Shape(format!("frame rate {frame_rate} must be positive")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("offset sequence is not finite".into()));
        }
        Ok(Self {
            frame_rate,
            vertex_count,
            data,
        })
    }

    /// A single frame, broadcast over any length by [`compose_animated`].
    pub fn constant(frame_rate: f32, offset: Vec<f32>) -> Result<Self> {
        let v = offset.len() / 3;
        Self::new(frame_rate, v, offset)
    }

    pub fn zeros(frame_rate: f32, vertex_count: usize, frames: usize) -> Result<Self> {
        Self::new(frame_rate, vertex_count, vec![0.0; frames * vertex_count * 3])
    }

    pub fn frame_count(&self) -> usize {
        self.data.len() / (3 * self.vertex_count)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let w = 3 * self.vertex_count;
        &self.data[t * w..(t + 1) * w]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// `template + sum_i w_i * delta_i`. The offset is accumulated in `f64` in
/// ascending AU order and rounded once before it is added to the template.
pub fn compose(template: &FaceMesh, bases: &AuBases, activation: &AuActivation) -> Result<FaceMesh> {
    let offset = expression_offset_checked(template.vertex_count(), bases, activation)?;
    let positions = template.positions.iter().zip(&offset).map(|(&t, &o)| t + o).collect();
    Ok(FaceMesh {
        positions,
        topology: template.topology.clone(),
    })
}

/// `sum_i w_i * delta_i`; `compose` equals `template + expression_offset`
/// bit for bit.
pub fn expression_offset(bases: &AuBases, activation: &AuActivation) -> Result<Vec<f32>> {
    expression_offset_checked(bases.vertex_count(), bases, activation)
}

fn expression_offset_checked(vertex_count: usize, bases: &AuBases, activation: &AuActivation) -> Result<Vec<f32>> {
    if bases.vertex_count() != vertex_count {
        return Err(Error::Shape(format!(
            "bases have {} vertices, template has {vertex_count}",
            bases.vertex_count()
        )));
    }
    let mut report = crate::facs::ValidationReport::default();
    let mut active = Vec::with_capacity(activation.len());
    for (au, w) in activation.iter() {
        match bases.get(au) {
            None => report.violations.push(crate::facs::Violation::UnknownAu(au)),
            Some(_) if !(0.0..=1.0).contains(&w) => report
                .violations
                .push(crate::facs::Violation::OutOfRange { au, weight: w }),
            Some(d) => active.push((w as f64, d)),
        }
    }
    if !report.violations.is_empty() {
        return Err(Error::Validation(report));
    }
    let mut acc = vec![0.0f64; 3 * vertex_count];
    for (w, d) in active {
        for (a, &dv) in acc.iter_mut().zip(&d.deltas) {
            *a += w * dv as f64;
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// `M_t = M0 + speech_t + expr_t` for every speech frame. A single-frame
/// `expr` is broadcast.
pub fn compose_animated(template: &FaceMesh, speech: &OffsetSequence, expr: &OffsetSequence) -> Result<Vec<FaceMesh>> {
    let v = template.vertex_count();
    if speech.vertex_count != v || expr.vertex_count != v {
        return Err(Error::Shape(format!(
            "offset sequences have {} and {} vertices, template has {v}",
            speech.vertex_count, expr.vertex_count
        )));
    }
    let t = speech.frame_count();
    let broadcast = expr.frame_count() == 1;
    if !broadcast {
        if expr.frame_count() != t {
            return Err(Error::Shape(format!(
                "speech has {t} frames, expression has {}",
                expr.frame_count()
            )));
        }
        if expr.frame_rate != speech.frame_rate {
            return Err(Error::Shape(format!(
                "frame rates differ: {} vs {}",
                speech.frame_rate, expr.frame_rate
            )));
        }
    }
    let frames = (0..t)
        .map(|i| {
            let e = expr.frame(if broadcast { 0 } else { i });
            let positions = template
                .positions
                .iter()
                .zip(speech.frame(i))
                .zip(e)
                .map(|((&m, &s), &x)| m + s + x)
                .collect();
            FaceMesh {
                positions,
                topology: template.topology.clone(),
            }
        })
        .collect();
    Ok(frames)
}

/// Mean squared coordinate difference over all `3V` scalars.
pub fn vertex_mse(a: &FaceMesh, b: &FaceMesh) -> Result<f64> {
    if a.vertex_count() != b.vertex_count() {
        return Err(Error::Shape(format!(
            "meshes have {} and {} vertices",
            a.vertex_count(),
            b.vertex_count()
        )));
    }
    Ok(mse(&a.positions, &b.positions))
}

/// Per-AU vertex MSE averaged over the AUs.
pub fn basis_mse(a: &AuBases, b: &AuBases) -> Result<f64> {
    if a.vertex_count != b.vertex_count {
        return Err(Error::Shape(format!(
            "bases have {} and {} vertices",
            a.vertex_count, b.vertex_count
        )));
    }
    let mut total = 0.0;
    for (da, db) in a.deltas.iter().zip(&b.deltas) {
        if da.au != db.au {
            return Err(Error::Shape(format!("AU sets differ at {} / {}", da.au, db.au)));
        }
        total += mse(&da.deltas, &db.deltas);
    }
    Ok(total / a.deltas.len() as f64)
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    let ss: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    ss / a.len() as f64
}

/// Row-major vertex grid used by synthetic faces: `cols = ceil(sqrt(V))`
/// columns, the last row possibly partial.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub vertex_count: usize,
    pub cols: usize,
    pub rows: usize,
}

impl GridLayout {
    pub fn new(vertex_count: usize) -> Self {
        let cols = (vertex_count as f64).sqrt().ceil().max(1.0) as usize;
        let rows = vertex_count.div_ceil(cols);
        Self {
            vertex_count,
            cols,
            rows,
        }
    }

    /// Normalised face coordinates in `[-1, 1]^2`; `v = +1` is the top row.
    pub fn uv(&self, i: usize) -> (f64, f64) {
        let (r, c) = (i / self.cols, i % self.cols);
        let u = if self.cols > 1 {
            -1.0 + 2.0 * c as f64 / (self.cols - 1) as f64
        } else {
            0.0
        };
        let v = if self.rows > 1 {
            1.0 - 2.0 * r as f64 / (self.rows - 1) as f64
        } else {
            0.0
        };
        (u, v)
    }

    /// Two triangles per complete grid cell.
    pub fn topology(&self) -> Vec<[u32; 3]> {
        let mut tris = Vec::new();
        for r in 0..self.rows.saturating_sub(1) {
            for c in 0..self.cols.saturating_sub(1) {
                let a = r * self.cols + c;
                let (b, d, e) = (a + 1, a + self.cols, a + self.cols + 1);
                if e < self.vertex_count {
                    tris.push([a as u32, d as u32, b as u32]);
                    tris.push([b as u32, d as u32, e as u32]);
                }
            }
        }
        tris
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg() -> &'static FacsRegistry {
        FacsRegistry::standard()
    }

    fn bases(v: usize, scale: f32) -> AuBases {
        let deltas = reg()
            .ids()
            .enumerate()
            .map(|(k, au)| BlendDelta {
                au,
                deltas: (0..3 * v)
                    .map(|i| scale * (((i * 31 + k * 17) % 23) as f32 - 11.0) / 11.0)
                    .collect(),
            })
            .collect();
        AuBases::new(deltas, reg()).unwrap()
    }

    fn template(v: usize) -> FaceMesh {
        FaceMesh::new((0..3 * v).map(|i| (i as f32 * 0.37).sin()).collect(), None).unwrap()
    }

    #[test]
    fn empty_activation_is_template() {
        let t = template(10);
        let out = compose(&t, &bases(10, 0.1), &AuActivation::new()).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn unit_weight_adds_delta() {
        let (t, b) = (template(10), bases(10, 0.1));
        let out = compose(&t, &b, &AuActivation::new().with(17, 1.0)).unwrap();
        let d = &b.get(AuId(17)).unwrap().deltas;
        for i in 0..30 {
            assert_eq!(out.positions()[i], t.positions()[i] + d[i]);
        }
    }

    #[test]
    fn compose_rejects_bad_weights() {
        let (t, b) = (template(4), bases(4, 0.1));
        let err = compose(&t, &b, &AuActivation::new().with(12, 1.5)).unwrap_err();
        assert!(err.to_string().contains("AU12"));
        assert!(matches!(
            compose(&t, &b, &AuActivation::new().with(3, 0.5)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn bases_need_all_units() {
        let mut deltas = bases(4, 0.1).deltas().to_vec();
        deltas.pop();
        let err = AuBases::new(deltas, reg()).unwrap_err();
        assert!(err.to_string().contains("expected 32 AU bases"), "{err}");
    }

    #[test]
    fn mse_of_uniform_offset() {
        let a = template(50);
        let b = FaceMesh::new(a.positions().iter().map(|v| v + 1e-3).collect(), None).unwrap();
        let m = vertex_mse(&a, &b).unwrap();
        assert!((m - 1e-6).abs() < 1e-9, "{m}");
        assert_eq!(vertex_mse(&a, &a).unwrap(), 0.0);
        assert!(vertex_mse(&a, &template(49)).is_err());
    }

    #[test]
    fn animated_zero_offsets_repeat_template() {
        let t = template(6);
        let s = OffsetSequence::zeros(30.0, 6, 4).unwrap();
        let e = OffsetSequence::constant(30.0, vec![0.0; 18]).unwrap();
        let frames = compose_animated(&t, &s, &e).unwrap();
        assert_eq!(frames.len(), 4);
        assert!(frames.iter().all(|f| f == &t));
    }

    #[test]
    fn animated_rejects_mismatch() {
        let t = template(6);
        let s = OffsetSequence::zeros(30.0, 6, 4).unwrap();
        let e = OffsetSequence::zeros(30.0, 6, 3).unwrap();
        assert!(compose_animated(&t, &s, &e).is_err());
        let e = OffsetSequence::zeros(30.0, 5, 4).unwrap();
        assert!(compose_animated(&t, &s, &e).is_err());
    }

    #[test]
    fn grid_layout_handles_partial_rows() {
        let g = GridLayout::new(529);
        assert_eq!((g.cols, g.rows), (23, 23));
        assert_eq!(g.uv(0), (-1.0, 1.0));
        assert_eq!(g.uv(528), (1.0, -1.0));
        let g = GridLayout::new(75);
        assert_eq!((g.cols, g.rows), (9, 9));
        let tris = g.topology();
        assert!(tris.iter().flatten().all(|&i| (i as usize) < 75));
        FaceMesh::new(vec![0.0; 225], Some(tris)).unwrap();
    }

    #[test]
    fn tensor_round_trip() {
        let b = bases(5, 0.25);
        assert_eq!(AuBases::from_tensor(&b.to_tensor(), reg()).unwrap(), b);
    }
}
