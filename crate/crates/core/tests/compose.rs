use std::time::Instant;

use aublend_core::facs::{AuActivation, AuId, FacsRegistry};
use aublend_core::mesh::{
    basis_mse, compose, compose_animated, vertex_mse, AuBases, BlendDelta, FaceMesh, OffsetSequence,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_bases(v: usize, rng: &mut ChaCha8Rng) -> AuBases {
    let reg = FacsRegistry::standard();
    let deltas = reg
        .ids()
        .map(|au| BlendDelta {
            au,
            deltas: (0..3 * v).map(|_| rng.gen_range(-0.05f32..0.05)).collect(),
        })
        .collect();
    AuBases::new(deltas, reg).unwrap()
}

fn random_mesh(v: usize, rng: &mut ChaCha8Rng) -> FaceMesh {
    FaceMesh::new((0..3 * v).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), None).unwrap()
}

fn random_activation(rng: &mut ChaCha8Rng, max_weight: f32) -> AuActivation {
    let mut a = AuActivation::new();
    for au in FacsRegistry::standard().ids() {
        if rng.gen_bool(0.4) {
            a.set(au, rng.gen_range(0.0..=max_weight));
        }
    }
    a
}

/// Per-vertex, per-coordinate loop over AUs in ascending id order, summed in
/// double precision.
fn brute_force(t: &FaceMesh, b: &AuBases, a: &AuActivation) -> Vec<f32> {
    let v = t.vertex_count();
    let mut out = vec![0.0f32; 3 * v];
    for i in 0..v {
        for c in 0..3 {
            let mut acc = 0.0f64;
            for d in b.deltas() {
                let w = a.get(d.au);
                if w != 0.0 {
                    acc += w as f64 * d.deltas[3 * i + c] as f64;
                }
            }
            out[3 * i + c] = t.positions()[3 * i + c] + acc as f32;
        }
    }
    out
}

fn ulp(x: f32) -> f32 {
    let x = x.abs();
    f32::from_bits(x.to_bits() + 1) - x
}

#[test]
fn compose_matches_brute_force_on_100_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let v = rng.gen_range(1..200);
        let (t, b) = (random_mesh(v, &mut rng), random_bases(v, &mut rng));
        let a = random_activation(&mut rng, 1.0);
        let out = compose(&t, &b, &a).unwrap();
        assert_eq!(out.positions(), brute_force(&t, &b, &a).as_slice());
    }
}

#[test]
fn two_unit_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t, b) = (random_mesh(30, &mut rng), random_bases(30, &mut rng));
    let a = AuActivation::parse_inline("AU6=0.5,AU12=0.7").unwrap();
    let out = compose(&t, &b, &a).unwrap();
    let b6 = &b.get(AuId(6)).unwrap().deltas;
    let b12 = &b.get(AuId(12)).unwrap().deltas;
    for i in 0..90 {
        let off = 0.5f32 as f64 * b6[i] as f64 + 0.7f32 as f64 * b12[i] as f64;
        assert_eq!(out.positions()[i], t.positions()[i] + off as f32);
    }
}

#[test]
fn compose_does_not_mutate_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, b) = (random_mesh(20, &mut rng), random_bases(20, &mut rng));
    let a = random_activation(&mut rng, 1.0);
    let (t0, b0, a0) = (t.clone(), b.clone(), a.clone());
    compose(&t, &b, &a).unwrap();
    assert_eq!((t, b, a), (t0, b0, a0));
}

#[test]
fn animated_three_frame_toy() {
    let t = FaceMesh::new(vec![1.0, 2.0, 3.0], None).unwrap();
    let s = OffsetSequence::new(25.0, 1, vec![0.5, 0.0, 0.0, 0.0, 0.25, 0.0, 0.0, 0.0, -1.0]).unwrap();
    let e = OffsetSequence::new(25.0, 1, vec![0.0, 1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.5]).unwrap();
    let frames = compose_animated(&t, &s, &e).unwrap();
    let expected = [[1.5, 3.0, 3.0], [3.0, 2.25, 3.0], [1.0, 2.0, 2.5]];
    for (f, x) in frames.iter().zip(expected) {
        assert_eq!(f.positions(), x);
    }
    let zero = OffsetSequence::constant(25.0, vec![0.0; 3]).unwrap();
    let speech_only = compose_animated(&t, &s, &zero).unwrap();
    for (k, f) in speech_only.iter().enumerate() {
        let want: Vec<f32> = t.positions().iter().zip(s.frame(k)).map(|(a, b)| a + b).collect();
        assert_eq!(f.positions(), want.as_slice());
    }
}

#[test]
fn mse_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (a, b) = (random_mesh(77, &mut rng), random_mesh(77, &mut rng));
    let mut acc = 0.0f64;
    for i in 0..77 {
        for c in 0..3 {
            let d = a.vertex(i)[c] as f64 - b.vertex(i)[c] as f64;
            acc += d * d;
        }
    }
    assert_eq!(vertex_mse(&a, &b).unwrap(), acc / 231.0);

    let (ba, bb) = (random_bases(9, &mut rng), random_bases(9, &mut rng));
    let mut per_au = 0.0;
    for (x, y) in ba.deltas().iter().zip(bb.deltas()) {
        let ss: f64 = x
            .deltas
            .iter()
            .zip(&y.deltas)
            .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
            .sum();
        per_au += ss / 27.0;
    }
    let m = basis_mse(&ba, &bb).unwrap();
    assert!((m - per_au / 32.0).abs() <= 1e-15 * m, "{m}");
}

#[test]
fn blend_latency_32_units_full_mesh() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = 5023;
    let (t, b) = (random_mesh(v, &mut rng), random_bases(v, &mut rng));
    let mut a = AuActivation::new();
    for au in FacsRegistry::standard().ids() {
        a.set(au, rng.gen_range(0.1..1.0));
    }
    let mut times: Vec<f64> = (0..1000)
        .map(|_| {
            let start = Instant::now();
            let m = compose(&t, &b, &a).unwrap();
            let el = start.elapsed().as_secs_f64();
            std::hint::black_box(m);
            el
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let median = times[500];
    assert!(median < 2e-3, "median {median:.6}s");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn additivity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, b) = (random_mesh(16, &mut rng), random_bases(16, &mut rng));
        let (a1, a2) = (random_activation(&mut rng, 0.5), random_activation(&mut rng, 0.5));
        let mut sum = a1.clone();
        for (au, w) in a2.iter() {
            sum.set(au, a1.get(au) + w);
        }
        let (m1, m2, m12) = (
            compose(&t, &b, &a1).unwrap(),
            compose(&t, &b, &a2).unwrap(),
            compose(&t, &b, &sum).unwrap(),
        );
        for i in 0..48 {
            let lhs = m1.positions()[i] + m2.positions()[i] - t.positions()[i];
            let rhs = m12.positions()[i];
            let scale = t.positions()[i].abs().max(m1.positions()[i].abs()).max(m2.positions()[i].abs());
            prop_assert!((lhs - rhs).abs() <= 4.0 * ulp(scale), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn scaling(seed in any::<u64>(), lambda in 0.0f32..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, b) = (random_mesh(16, &mut rng), random_bases(16, &mut rng));
        let a = random_activation(&mut rng, 1.0);
        let m = compose(&t, &b, &a).unwrap();
        let ms = compose(&t, &b, &a.scaled(lambda)).unwrap();
        for i in 0..48 {
            let off = m.positions()[i] - t.positions()[i];
            let off_s = ms.positions()[i] - t.positions()[i];
            let scale = t.positions()[i].abs().max(1.0);
            prop_assert!((lambda * off - off_s).abs() <= 4.0 * ulp(scale), "{} vs {off_s}", lambda * off);
        }
    }
}
