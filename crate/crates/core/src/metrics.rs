//! Basis-prediction error under single- and multi-AU control, and the
//! sequence metrics for speech-plus-expression animation.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::facs::{AuActivation, Emotion, FacsRegistry};
use crate::mesh::{
    compose, compose_animated, expression_offset, vertex_mse, AuBases, FaceMesh, IdentityBundle, OffsetSequence,
};
use crate::model::{predict_basis, CodebookModel, StyleBlendModel};
use crate::synth::sample_combination;

/// Multi-AU combinations evaluated per identity.
pub const COMBINATIONS_PER_IDENTITY: usize = 20;

/// Anything that produces a basis set for an identity.
pub trait BasisPredictor {
    fn predict(&self, bundle: &IdentityBundle) -> Result<AuBases>;
}

/// Returns the ground-truth bases.
pub struct Oracle;

impl BasisPredictor for Oracle {
    fn predict(&self, bundle: &IdentityBundle) -> Result<AuBases> {
        Ok(bundle.bases.clone())
    }
}

/// Returns one fixed basis set, typically the training mean.
pub struct FixedBasis(pub AuBases);

impl BasisPredictor for FixedBasis {
    fn predict(&self, _: &IdentityBundle) -> Result<AuBases> {
        Ok(self.0.clone())
    }
}

/// The trained model pair.
pub struct ModelPair<'a> {
    pub style: &'a StyleBlendModel,
    pub codebook: &'a CodebookModel,
}

impl BasisPredictor for ModelPair<'_> {
    fn predict(&self, bundle: &IdentityBundle) -> Result<AuBases> {
        Ok(predict_basis(self.style, self.codebook, &bundle.template, false)?.bases)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Every AU alone at intensity 1.
    Single,
    /// Seeded combinations of 2 to 4 AUs at intensities in `[0.3, 1]`.
    Multi,
}

/// The activations evaluated for the identity at `index`.
pub fn eval_activations(mode: EvalMode, seed: u64, index: usize) -> Vec<AuActivation> {
    match mode {
        EvalMode::Single => FacsRegistry::standard()
            .ids()
            .map(|au| {
                let mut a = AuActivation::new();
                a.set(au, 1.0);
                a
            })
            .collect(),
        EvalMode::Multi => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0xA24B_AED4_963E_E407));
            (0..COMBINATIONS_PER_IDENTITY)
                .map(|_| sample_combination(&mut rng))
                .collect()
        }
    }
}

/// Mean over identities of the mean vertex MSE between poses composed with
/// predicted and with ground-truth bases.
pub fn eval_mse(predictor: &dyn BasisPredictor, bundles: &[&IdentityBundle], mode: EvalMode, seed: u64) -> Result<f64> {
    if bundles.is_empty() {
        return Err(Error::Contract("no identities to evaluate".into()));
    }
    let mut total = 0.0;
    for (i, b) in bundles.iter().enumerate() {
        let pred = predictor.predict(b)?;
        let acts = eval_activations(mode, seed, i);
        let mut sum = 0.0;
        for a in &acts {
            let p = compose(&b.template, &pred, a)?;
            let g = compose(&b.template, &b.bases, a)?;
            sum += vertex_mse(&p, &g)?;
        }
        total += sum / acts.len() as f64;
    }
    Ok(total / bundles.len() as f64)
}

// ------------------------------------------------------- sequence metrics

fn check_pair(pred: &[FaceMesh], gt: &[FaceMesh], mask: &[usize], min_frames: usize) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "sequences have {} and {} frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < min_frames {
        return Err(Error::Contract(format!(
            "need at least {min_frames} frames, got {}",
            pred.len()
        )));
    }
    let v = pred[0].vertex_count();
    if pred.iter().chain(gt).any(|m| m.vertex_count() != v) {
        return Err(Error::Shape("frames differ in vertex count".into()));
    }
    if mask.is_empty() {
        return Err(Error::Contract("vertex mask is empty".into()));
    }
    if let Some(&i) = mask.iter().find(|&&i| i >= v) {
        return Err(Error::Shape(format!("mask index {i} out of range for {v} vertices")));
    }
    Ok(())
}

fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum()
}

fn vertex64(m: &FaceMesh, i: usize) -> [f64; 3] {
    m.vertex(i).map(f64::from)
}

/// Mean over frames of the largest squared lip-vertex error.
pub fn lve(pred: &[FaceMesh], gt: &[FaceMesh], lip_mask: &[usize]) -> Result<f64> {
    check_pair(pred, gt, lip_mask, 1)?;
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            lip_mask
                .iter()
                .map(|&i| sq_dist(vertex64(p, i), vertex64(g, i)))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// [`lve`] on frame-to-frame velocities.
pub fn vlve(pred: &[FaceMesh], gt: &[FaceMesh], lip_mask: &[usize]) -> Result<f64> {
    check_pair(pred, gt, lip_mask, 2)?;
    let mut total = 0.0;
    for t in 1..pred.len() {
        let worst = lip_mask
            .iter()
            .map(|&i| {
                let (p0, p1) = (vertex64(&pred[t - 1], i), vertex64(&pred[t], i));
                let (g0, g1) = (vertex64(&gt[t - 1], i), vertex64(&gt[t], i));
                let vp = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
                let vg = [g1[0] - g0[0], g1[1] - g0[1], g1[2] - g0[2]];
                sq_dist(vp, vg)
            })
            .fold(0.0, f64::max);
        total += worst;
    }
    Ok(total / (pred.len() - 1) as f64)
}

/// Population standard deviation over frames of `|x_t - x_0|` at vertex `i`.
fn motion_std(seq: &[FaceMesh], i: usize) -> f64 {
    let x0 = vertex64(&seq[0], i);
    let m: Vec<f64> = seq.iter().map(|f| sq_dist(vertex64(f, i), x0).sqrt()).collect();
    let mean = m.iter().sum::<f64>() / m.len() as f64;
    (m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m.len() as f64).sqrt()
}

/// Mean over upper-face vertices of the difference in motion standard
/// deviation, predicted minus ground truth. Motion is measured from each
/// sequence's first frame.
pub fn fdd(pred: &[FaceMesh], gt: &[FaceMesh], upper_mask: &[usize]) -> Result<f64> {
    check_pair(pred, gt, upper_mask, 1)?;
    let total: f64 = upper_mask
        .iter()
        .map(|&i| motion_std(pred, i) - motion_std(gt, i))
        .sum();
    Ok(total / upper_mask.len() as f64)
}

/// Mean over sequence pairs of the mean per-vertex distance across frames.
pub fn diversity(seqs: &[&[FaceMesh]]) -> Result<f64> {
    if seqs.len() < 2 {
        return Err(Error::Contract(format!(
            "diversity needs at least 2 sequences, got {}",
            seqs.len()
        )));
    }
    let (t, v) = (seqs[0].len(), seqs[0].first().map_or(0, FaceMesh::vertex_count));
    if t == 0 || v == 0 {
        return Err(Error::Contract("sequences are empty".into()));
    }
    if seqs
        .iter()
        .any(|s| s.len() != t || s.iter().any(|m| m.vertex_count() != v))
    {
        return Err(Error::Shape("sequences differ in shape".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for a in 0..seqs.len() {
        for b in a + 1..seqs.len() {
            let mut d = 0.0;
            for (fa, fb) in seqs[a].iter().zip(seqs[b]) {
                for i in 0..v {
                    d += sq_dist(vertex64(fa, i), vertex64(fb, i)).sqrt();
                }
            }
            total += d / (t * v) as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

// -------------------------------------------------------------- animation

/// `M_t = M0 + S_t + E`: speech offsets plus one constant expression.
pub fn animate(
    template: &FaceMesh,
    bases: &AuBases,
    speech: &OffsetSequence,
    activation: &AuActivation,
) -> Result<Vec<FaceMesh>> {
    let expr = OffsetSequence::constant(speech.frame_rate, expression_offset(bases, activation)?)?;
    compose_animated(template, speech, &expr)
}

/// Frames minus the template, as meshes.
fn offsets_only(frames: &[FaceMesh], template: &FaceMesh) -> Result<Vec<FaceMesh>> {
    frames
        .iter()
        .map(|f| {
            let p = f
                .positions()
                .iter()
                .zip(template.positions())
                .map(|(a, b)| a - b)
                .collect();
            FaceMesh::new(p, None)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub identities: Vec<String>,
    pub mse_s: f64,
    pub mse_m: f64,
    pub lve: f64,
    pub vlve: f64,
    pub fdd: f64,
    /// Absent when fewer than two identities were evaluated.
    pub diversity: Option<f64>,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tvalue\n");
        let _ = writeln!(s, "identities\t{}", self.identities.join(","));
        let _ = writeln!(s, "mse_s\t{:e}", self.mse_s);
        let _ = writeln!(s, "mse_m\t{:e}", self.mse_m);
        let _ = writeln!(s, "lve\t{:e}", self.lve);
        let _ = writeln!(s, "vlve\t{:e}", self.vlve);
        let _ = writeln!(s, "fdd\t{:e}", self.fdd);
        match self.diversity {
            Some(d) => {
                let _ = writeln!(s, "diversity\t{d:e}");
            }
            None => s.push_str("diversity\tn/a\n"),
        }
        s
    }
}

/// Full evaluation: MSE_S, MSE_M, and sequence metrics averaged over every
/// identity, speech clip and emotion preset at intensity 1. Diversity is
/// taken over the identities' predicted expression offsets per clip and
/// emotion.
pub fn evaluate(
    predictor: &dyn BasisPredictor,
    bundles: &[&IdentityBundle],
    speech: &[OffsetSequence],
    lip_mask: &[usize],
    upper_mask: &[usize],
    seed: u64,
) -> Result<EvalReport> {
    let mse_s = eval_mse(predictor, bundles, EvalMode::Single, seed)?;
    let mse_m = eval_mse(predictor, bundles, EvalMode::Multi, seed)?;
    let registry = FacsRegistry::standard();
    let preds = bundles
        .iter()
        .map(|b| predictor.predict(b))
        .collect::<Result<Vec<_>>>()?;
    let (mut l, mut vl, mut f, mut n) = (0.0, 0.0, 0.0, 0usize);
    let (mut div, mut div_n) = (0.0, 0usize);
    for clip in speech {
        for e in Emotion::ALL {
            let act = registry.emotion_to_activation(e.name())?;
            let mut offsets = Vec::with_capacity(bundles.len());
            for (b, pred) in bundles.iter().zip(&preds) {
                let p = animate(&b.template, pred, clip, &act)?;
                let g = animate(&b.template, &b.bases, clip, &act)?;
                l += lve(&p, &g, lip_mask)?;
                vl += vlve(&p, &g, lip_mask)?;
                f += fdd(&p, &g, upper_mask)?;
                n += 1;
                offsets.push(offsets_only(&p, &b.template)?);
            }
            if offsets.len() >= 2 {
                let refs: Vec<&[FaceMesh]> = offsets.iter().map(Vec::as_slice).collect();
                div += diversity(&refs)?;
                div_n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Contract("no speech clips to animate".into()));
    }
    Ok(EvalReport {
        identities: bundles.iter().map(|b| b.identity_id.clone()).collect(),
        mse_s,
        mse_m,
        lve: l / n as f64,
        vlve: vl / n as f64,
        fdd: f / n as f64,
        diversity: (div_n > 0).then(|| div / div_n as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_identity, StyleParams};

    fn mesh(p: &[[f32; 3]]) -> FaceMesh {
        FaceMesh::new(p.iter().flatten().copied().collect(), None).unwrap()
    }

    fn toy() -> (Vec<FaceMesh>, Vec<FaceMesh>) {
        let z = [0.0; 3];
        let pred = vec![mesh(&[[1.0, 0.0, 0.0], z]), mesh(&[z, [0.0, 2.0, 0.0]]), mesh(&[z, z])];
        let gt = vec![mesh(&[z, z]); 3];
        (pred, gt)
    }

    #[test]
    fn three_frame_hand_values() {
        let (pred, gt) = toy();
        let mask = [0, 1];
        assert_eq!(lve(&pred, &gt, &mask).unwrap(), 5.0 / 3.0);
        assert_eq!(vlve(&pred, &gt, &mask).unwrap(), 4.0);
        // Motion from frame 0 is (0, 1, 1) and (0, 2, 0): std sqrt(2)/3 and 2 sqrt(2)/3.
        let want = (2f64.sqrt() / 3.0 + 2.0 * 2f64.sqrt() / 3.0) / 2.0;
        assert!((fdd(&pred, &gt, &mask).unwrap() - want).abs() < 1e-15);
        assert_eq!(diversity(&[&pred, &gt]).unwrap(), 0.5);
    }

    #[test]
    fn identical_inputs_score_zero() {
        let (pred, _) = toy();
        let mask = [0, 1];
        assert_eq!(lve(&pred, &pred, &mask).unwrap(), 0.0);
        assert_eq!(vlve(&pred, &pred, &mask).unwrap(), 0.0);
        assert_eq!(fdd(&pred, &pred, &mask).unwrap(), 0.0);
        assert_eq!(diversity(&[&pred, &pred]).unwrap(), 0.0);
    }

    #[test]
    fn uniform_offset_is_analytic() {
        let (gt, _) = toy();
        let shifted: Vec<FaceMesh> = gt
            .iter()
            .map(|m| {
                FaceMesh::new(
                    m.positions()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| if i % 3 == 0 { x + 0.5 } else { x })
                        .collect(),
                    None,
                )
                .unwrap()
            })
            .collect();
        let mask = [0, 1];
        assert_eq!(lve(&shifted, &gt, &mask).unwrap(), 0.25);
        assert_eq!(vlve(&shifted, &gt, &mask).unwrap(), 0.0);
        assert_eq!(fdd(&shifted, &gt, &mask).unwrap(), 0.0);
        assert_eq!(diversity(&[&shifted, &gt]).unwrap(), 0.5);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (pred, gt) = toy();
        assert!(lve(&pred, &gt[..2], &[0]).is_err());
        assert!(lve(&pred, &gt, &[]).is_err());
        assert!(lve(&pred, &gt, &[2]).is_err());
        assert!(vlve(&pred[..1], &gt[..1], &[0]).is_err());
        assert!(diversity(&[&pred]).is_err());
    }

    #[test]
    fn oracle_scores_exactly_zero() {
        let a = generate_identity(&StyleParams::from_seed(1), 75).unwrap();
        let b = generate_identity(&StyleParams::from_seed(2), 75).unwrap();
        for mode in [EvalMode::Single, EvalMode::Multi] {
            assert_eq!(eval_mse(&Oracle, &[&a, &b], mode, 3).unwrap(), 0.0);
        }
    }

    #[test]
    fn multi_mse_matches_brute_force() {
        let a = generate_identity(&StyleParams::from_seed(1), 75).unwrap();
        let b = generate_identity(&StyleParams::from_seed(2), 75).unwrap();
        let wrong = FixedBasis(b.bases.clone());
        let got = eval_mse(&wrong, &[&a], EvalMode::Multi, 9).unwrap();
        let acts = eval_activations(EvalMode::Multi, 9, 0);
        assert_eq!(acts.len(), COMBINATIONS_PER_IDENTITY);
        let mut total = 0.0;
        for act in &acts {
            let mut sq = 0.0;
            for i in 0..75 {
                for c in 0..3 {
                    let t = a.template.vertex(i)[c];
                    let (mut p, mut g) = (0.0, 0.0);
                    for (au, w) in act.iter() {
                        p += w as f64 * b.bases.get(au).unwrap().deltas[3 * i + c] as f64;
                        g += w as f64 * a.bases.get(au).unwrap().deltas[3 * i + c] as f64;
                    }
                    sq += ((t + p as f32) as f64 - (t + g as f32) as f64).powi(2);
                }
            }
            total += sq / 225.0;
        }
        let want = total / acts.len() as f64;
        assert!(((got - want) / want).abs() < 1e-9, "{got} vs {want}");
        assert!(got > 0.0);
    }
}
