//! One PASS/FAIL line per acceptance criterion.
//!
//! `AUBLEND_CRITERIA=1,2,9` runs a subset. Criteria listed in
//! `KNOWN_GAPS` print their FAIL line without failing the target; any other
//! failure exits nonzero.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use aublend_autodiff::gradcheck::op_suite;
use aublend_autodiff::Graph;
use aublend_core::dataset::load_dataset;
use aublend_core::io::sha256_hex;
use aublend_core::mesh::{basis_mse, compose, expression_offset, AuBases, BlendDelta, FaceMesh};
use aublend_core::metrics::{diversity, eval_mse, fdd, lve, vlve, EvalMode, Oracle};
use aublend_core::model::check::{check_codebook, check_styleblend, perturb, worst};
use aublend_core::model::{predict_basis, quantize, random_tokens, CodebookModel, HyperParams, StyleBlendModel};
use aublend_core::synth::{generate_dataset, generate_identity, interpolated_identities, StyleParams, DESK_VERTICES};
use aublend_core::train::{prediction_mse, train_codebook, train_styleblend, Stage, TrainConfig};
use aublend_core::{AuActivation, FacsRegistry, IdentityBundle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that do not pass at the prescribed settings; see the README.
const KNOWN_GAPS: &[usize] = &[5];
const DESK_SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ------------------------------------------------------------ criterion 1

fn gradients() -> Outcome {
    let start = Instant::now();
    let ops = op_suite().expect("op suite runs");
    let (worst_op, op_err) = ops
        .iter()
        .fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });

    let hp = HyperParams::tiny();
    let bundle = generate_identity(&StyleParams::from_seed(4), hp.vertex_count).unwrap();
    let mut c = CodebookModel::new(hp.clone()).unwrap();
    perturb(&mut c.params, 0.1, 1);
    let x = c.input(&bundle.bases).unwrap();
    let cb = check_codebook(&c, &x, Some(512), 2).unwrap();

    let mut s = StyleBlendModel::new(hp).unwrap();
    perturb(&mut s.params, 0.1, 3);
    let (zq, _) = c.quantize(&c.encode(&bundle.bases).unwrap()).unwrap();
    let t = s.template_input(&bundle.template).unwrap();
    let sb = check_styleblend(&s, &c, &t, &x, &zq, Some(512), 4).unwrap();
    let secs = start.elapsed().as_secs_f64();

    let err = op_err.max(worst(&cb)).max(worst(&sb));
    outcome(
        err < 1e-4 && secs < 120.0,
        format!(
            "{} ops (worst {worst_op} {op_err:.1e}), codebook loss {:.1e} over {} tensors, style loss {:.1e} over {} tensors; {secs:.1}s",
            ops.len(),
            worst(&cb),
            cb.len(),
            worst(&sb),
            sb.len()
        ),
    )
}

// ------------------------------------------------------------ criterion 2

fn ulps(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    let key = |x: f64| {
        let bits = x.to_bits() as i64;
        if bits < 0 {
            i64::MIN - bits
        } else {
            bits
        }
    };
    key(a).abs_diff(key(b))
}

fn adaln_identity() -> Outcome {
    let mut worst_ulp = 0;
    let mut blocks = 0;
    for (v, hp) in [
        (75, HyperParams::tiny()),
        (DESK_VERTICES, HyperParams::desk(DESK_VERTICES)),
    ] {
        let mut hp = hp;
        hp.layers = 2;
        hp.vertex_count = v;
        let s = StyleBlendModel::new(hp).unwrap();
        let bundle = generate_identity(&StyleParams::from_seed(9), v).unwrap();
        let mut g = Graph::new();
        let p = g.bind(&s.params, false);
        let m = g.constant(s.template_input(&bundle.template).unwrap());
        let pass = s.tokens_graph(&mut g, &p, m).unwrap();
        for &(x, y) in &pass.blocks {
            blocks += 1;
            for (&a, &b) in g.value(x).data().iter().zip(g.value(y).data()) {
                worst_ulp = worst_ulp.max(ulps(a, b));
            }
        }
    }
    outcome(
        worst_ulp <= 1,
        format!("{blocks} blocks, max {worst_ulp} ulp between block input and output"),
    )
}

// ------------------------------------------------------------ criterion 3

fn straight_through() -> Outcome {
    let hp = HyperParams::tiny();
    let bundle = generate_identity(&StyleParams::from_seed(4), hp.vertex_count).unwrap();
    let mut m = CodebookModel::new(hp).unwrap();
    perturb(&mut m.params, 0.1, 5);
    let mut g = Graph::new();
    let p = g.bind(&m.params, true);
    let z = g.leaf(m.encode(&bundle.bases).unwrap(), true);
    let (zq, _) = m.quantize(g.value(z)).unwrap();
    let zq = g.constant(zq);
    let st = g.straight_through(z, zq).unwrap();
    g.retain_grad(st);
    let out = m.decode_graph(&mut g, &p, st).unwrap();
    let sq = g.square(out).unwrap();
    let l = g.mean(sq).unwrap();
    g.backward(l).unwrap();
    let (gz, gst) = (g.grad(z).unwrap(), g.grad(st).unwrap());
    let grads_equal = gz == gst && gz.max_abs() > 0.0;

    let codebook = random_tokens(64, 8, 10);
    let tokens = random_tokens(1000, 8, 11);
    let (_, idx) = quantize(&codebook, &tokens).unwrap();
    let agree = (0..1000)
        .filter(|&r| {
            let mut best = (0, f64::INFINITY);
            for e in 0..64 {
                let d: f64 = (0..8)
                    .map(|c| (codebook.get(&[e, c]) - tokens.get(&[r, c])).powi(2))
                    .sum();
                if d < best.1 {
                    best = (e, d);
                }
            }
            idx[r] == best.0
        })
        .count();
    outcome(
        grads_equal && agree == 1000,
        format!(
            "encoder gradient {} quantized gradient over {} elements; {agree}/1000 indices match the exhaustive scan",
            if grads_equal { "equals" } else { "differs from" },
            gz.len()
        ),
    )
}

// --------------------------------------------------------- criteria 4, 5

fn desk_config(stage: Stage) -> TrainConfig {
    let mut cfg = TrainConfig::defaults(stage);
    cfg.model.latent_dim = 32;
    cfg.model.codebook_size = 64;
    cfg
}

struct Desk {
    data: aublend_core::synth::SynthDataset,
    codebook: Option<CodebookModel>,
}

impl Desk {
    fn train(&self) -> Vec<&IdentityBundle> {
        self.data
            .split
            .train
            .iter()
            .map(|id| self.data.bundle(id).unwrap())
            .collect()
    }

    fn val(&self) -> Vec<&IdentityBundle> {
        self.data
            .split
            .val
            .iter()
            .map(|id| self.data.bundle(id).unwrap())
            .collect()
    }
}

fn codebook_overfit(desk: &mut Desk) -> Outcome {
    let cfg = desk_config(Stage::Codebook);
    let (model, report) = train_codebook(&cfg, &desk.train(), &desk.val(), None).unwrap();
    let rel = report.train_basis_mse / report.delta_variance;
    desk.codebook = Some(model);
    outcome(
        rel < 0.05 && report.wall_clock_s < 600.0,
        format!(
            "{} identities, V={DESK_VERTICES}, D=32, P=64, {} epochs at lr {:.0e}: train basis_mse {:.2}% of delta variance (best epoch {}, {:.0}% codes used); {:.0}s",
            desk.train().len(),
            cfg.epochs,
            cfg.lr,
            100.0 * rel,
            report.best_epoch,
            100.0 * (1.0 - report.dead_code_fraction),
            report.wall_clock_s
        ),
    )
}

fn styleblend_signal(desk: &mut Desk) -> Outcome {
    if desk.codebook.is_none() {
        let cfg = desk_config(Stage::Codebook);
        desk.codebook = Some(train_codebook(&cfg, &desk.train(), &desk.val(), None).unwrap().0);
    }
    let codebook = desk.codebook.as_ref().unwrap();
    let train = desk.train();
    let cfg = desk_config(Stage::Styleblend);
    let (style, report) = train_styleblend(&cfg, &train, &desk.val(), codebook, None).unwrap();
    let train_rel = prediction_mse(&style, codebook, &train).unwrap() / report.delta_variance;

    let bases: Vec<&AuBases> = train.iter().map(|b| &b.bases).collect();
    let mean = AuBases::mean(&bases).unwrap();
    let styles: Vec<StyleParams> = train
        .iter()
        .map(|b| {
            let i = desk
                .data
                .bundles
                .iter()
                .position(|x| x.identity_id == b.identity_id)
                .unwrap();
            desk.data.styles[i].clone()
        })
        .collect();
    let held = interpolated_identities(&styles, 2, DESK_VERTICES).unwrap();
    let mut held_ok = true;
    let mut parts = Vec::new();
    for h in &held {
        let pred = predict_basis(&style, codebook, &h.template, false).unwrap();
        let e_pred = basis_mse(&pred.bases, &h.bases).unwrap();
        let e_mean = basis_mse(&mean, &h.bases).unwrap();
        held_ok &= e_pred < e_mean;
        parts.push(format!(
            "{} predicted {e_pred:.3e} vs mean basis {e_mean:.3e}",
            h.identity_id
        ));
    }
    let a = train_rel < 0.10;
    outcome(
        a && held_ok && report.wall_clock_s < 1800.0,
        format!(
            "{} epochs at lr {:.0e}: (a) {} train basis_mse {:.2}% of delta variance; (b) {} {}; {:.0}s",
            cfg.epochs,
            cfg.lr,
            if a { "pass" } else { "fail" },
            100.0 * train_rel,
            if held_ok { "pass" } else { "fail" },
            parts.join(", "),
            report.wall_clock_s
        ),
    )
}

// ------------------------------------------------------------ criterion 6

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

fn random_activation(rng: &mut ChaCha8Rng, max: f32) -> AuActivation {
    let mut a = AuActivation::new();
    for au in FacsRegistry::standard().ids() {
        if rng.gen_bool(0.4) {
            a.set(au, rng.gen_range(0.0..=max));
        }
    }
    a
}

fn brute_force(t: &FaceMesh, b: &AuBases, a: &AuActivation) -> Vec<f32> {
    let mut out = t.positions().to_vec();
    for (k, x) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for d in b.deltas() {
            let w = a.get(d.au);
            if w != 0.0 {
                acc += w as f64 * d.deltas[k] as f64;
            }
        }
        *x += acc as f32;
    }
    out
}

fn ulp(x: f32) -> f32 {
    let x = x.abs();
    f32::from_bits(x.to_bits() + 1) - x
}

fn composition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut exact = 0;
    for _ in 0..100 {
        let v = rng.gen_range(1..300);
        let (t, b) = (random_mesh(v, &mut rng), random_bases(v, &mut rng));
        let a = random_activation(&mut rng, 1.0);
        if compose(&t, &b, &a).unwrap().positions() == brute_force(&t, &b, &a).as_slice() {
            exact += 1;
        }
    }
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let (t, b) = (random_mesh(64, &mut rng), random_bases(64, &mut rng));
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
        let lambda = rng.gen_range(0.0f32..=1.0);
        let ms = compose(&t, &b, &a1.scaled(lambda)).unwrap();
        for i in 0..3 * 64 {
            let tp = t.positions()[i];
            let (p1, p2) = (m1.positions()[i], m2.positions()[i]);
            let add = (p1 + p2 - tp - m12.positions()[i]).abs() / ulp(tp.abs().max(p1.abs()).max(p2.abs()));
            let scale = (lambda * (p1 - tp) - (ms.positions()[i] - tp)).abs() / ulp(tp.abs().max(1.0));
            worst = worst.max(add).max(scale);
        }
    }
    outcome(
        exact == 100 && worst <= 4.0,
        format!("{exact}/100 bit-exact against the per-vertex oracle; additivity and scaling within {worst:.2} ulp"),
    )
}

// ------------------------------------------------------------ criterion 7

fn latency() -> Outcome {
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
            std::hint::black_box(compose(&t, &b, &a).unwrap());
            start.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let median = times[500];
    outcome(
        median < 2e-3,
        format!("32-AU compose on V=5023: median {:.3} ms over 1000 runs", median * 1e3),
    )
}

// ------------------------------------------------------------ criterion 8

fn splits() -> Outcome {
    let counts = |n| {
        let d = generate_dataset(n, 1, aublend_core::synth::MIN_VERTICES).unwrap();
        (d.split.train.len(), d.split.val.len(), d.split.test.len())
    };
    let (a, b) = (counts(10), counts(500));
    outcome(
        a == (8, 1, 1) && b == (400, 50, 50),
        format!("10 -> {}/{}/{}, 500 -> {}/{}/{}", a.0, a.1, a.2, b.0, b.1, b.2),
    )
}

// ------------------------------------------------------------ criterion 9

fn mesh(p: &[[f32; 3]]) -> FaceMesh {
    FaceMesh::new(p.iter().flatten().copied().collect(), None).unwrap()
}

fn metric_oracles() -> Outcome {
    let z = [0.0; 3];
    let pred = vec![mesh(&[[1.0, 0.0, 0.0], z]), mesh(&[z, [0.0, 2.0, 0.0]]), mesh(&[z, z])];
    let gt = vec![mesh(&[z, z]); 3];
    let mask = [0, 1];
    let fdd_want = (2f64.sqrt() / 3.0 + 2.0 * 2f64.sqrt() / 3.0) / 2.0;
    let hand = lve(&pred, &gt, &mask).unwrap() == 5.0 / 3.0
        && vlve(&pred, &gt, &mask).unwrap() == 4.0
        && (fdd(&pred, &gt, &mask).unwrap() - fdd_want).abs() < 1e-15
        && diversity(&[&pred, &gt]).unwrap() == 0.5;
    let zeros = lve(&pred, &pred, &mask).unwrap() == 0.0
        && vlve(&pred, &pred, &mask).unwrap() == 0.0
        && fdd(&pred, &pred, &mask).unwrap() == 0.0
        && diversity(&[&pred, &pred]).unwrap() == 0.0;
    let ids: Vec<IdentityBundle> = (0..3)
        .map(|s| generate_identity(&StyleParams::from_seed(s), 120).unwrap())
        .collect();
    let refs: Vec<&IdentityBundle> = ids.iter().collect();
    let oracle = [EvalMode::Single, EvalMode::Multi].map(|m| eval_mse(&Oracle, &refs, m, 5).unwrap());
    let offset_zero = expression_offset(&ids[0].bases, &AuActivation::new())
        .unwrap()
        .iter()
        .all(|&x| x == 0.0);
    outcome(
        hand && zeros && oracle == [0.0, 0.0] && offset_zero,
        format!(
            "toy values {}, identical inputs {}, oracle MSE_S {} MSE_M {}",
            if hand { "match" } else { "differ" },
            if zeros { "score 0" } else { "score nonzero" },
            oracle[0],
            oracle[1]
        ),
    )
}

// ----------------------------------------------------------- criterion 10

fn aublend(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_aublend"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn pipeline(root: &Path) -> Vec<(String, String)> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = root.join("data");
    let model = "[model]\nlatent_dim = 8\ncodebook_size = 16\nlayers = 1\nheads = 2\n";
    fs::create_dir_all(root).unwrap();
    let (cb_cfg, sb_cfg) = (root.join("cb.toml"), root.join("sb.toml"));
    fs::write(
        &cb_cfg,
        format!("stage = \"codebook\"\nepochs = 4\nlr = 1e-3\nseed = 3\n{model}"),
    )
    .unwrap();
    fs::write(
        &sb_cfg,
        format!("stage = \"styleblend\"\nepochs = 4\nlr = 1e-3\nseed = 3\n{model}"),
    )
    .unwrap();
    let (cb, sb) = (root.join("cb.aubm"), root.join("sb.aubm"));
    let (pred, report) = (root.join("pred.aubd"), root.join("eval.tsv"));
    aublend(&[
        "synth",
        "--count",
        "10",
        "--seed",
        "21",
        "--vertices",
        "100",
        "--out",
        &s(&data),
    ]);
    aublend(&[
        "train",
        "codebook",
        "--config",
        &s(&cb_cfg),
        "--data",
        &s(&data),
        "--out",
        &s(&cb),
    ]);
    aublend(&[
        "train",
        "styleblend",
        "--config",
        &s(&sb_cfg),
        "--data",
        &s(&data),
        "--codebook",
        &s(&cb),
        "--out",
        &s(&sb),
    ]);
    let template = data.join("bundles/id_0009.aubd");
    aublend(&[
        "predict",
        "--model",
        &s(&sb),
        "--template",
        &s(&template),
        "--out",
        &s(&pred),
    ]);
    aublend(&[
        "eval",
        "--models",
        &s(&sb),
        "--data",
        &s(&data),
        "--report",
        &s(&report),
    ]);
    let mut files = vec![
        data.join("manifest.json"),
        cb.clone(),
        cb.with_extension("tsv"),
        sb.clone(),
    ];
    files.extend([sb.with_extension("tsv"), pred, report]);
    let manifest = load_dataset(&data).unwrap().manifest;
    files.extend(manifest.identities.iter().map(|e| data.join(&e.file)));
    files
        .iter()
        .map(|f| {
            let name = f.strip_prefix(root).unwrap().display().to_string();
            (name, sha256_hex(&fs::read(f).unwrap()))
        })
        .collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let a = pipeline(&tmp.path().join("a"));
    let b = pipeline(&tmp.path().join("b"));
    let differ: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        differ.is_empty() && a.len() == b.len(),
        if differ.is_empty() {
            format!(
                "synth, train, predict and eval reruns: {} artifact hashes identical",
                a.len()
            )
        } else {
            format!("artifacts differ: {}", differ.join(", "))
        },
    )
}

// ------------------------------------------------------------------ main

fn selected() -> Vec<usize> {
    match std::env::var("AUBLEND_CRITERIA") {
        Ok(list) if !list.trim().is_empty() => list
            .split(',')
            .map(|s| s.trim().parse().expect("criterion numbers"))
            .collect(),
        _ => (1..=10).collect(),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let names = [
        "gradient fidelity",
        "AdaLN-Zero identity at init",
        "straight-through quantizer",
        "codebook overfit",
        "style-blend learning signal",
        "composition exactness",
        "blend latency",
        "split arithmetic",
        "metric oracles",
        "determinism",
    ];
    let mut desk = Desk {
        data: generate_dataset(10, DESK_SEED, DESK_VERTICES).unwrap(),
        codebook: None,
    };
    let mut unexpected = Vec::new();
    for n in selected() {
        let start = Instant::now();
        let o = match n {
            1 => gradients(),
            2 => adaln_identity(),
            3 => straight_through(),
            4 => codebook_overfit(&mut desk),
            5 => styleblend_signal(&mut desk),
            6 => composition(),
            7 => latency(),
            8 => splits(),
            9 => metric_oracles(),
            10 => determinism(),
            _ => panic!("no criterion {n}"),
        };
        let known = KNOWN_GAPS.contains(&n);
        let verdict = match (o.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known gap)",
            (false, false) => "FAIL",
        };
        println!(
            "criterion {n:>2} {verdict}: {} | {} [{:.1}s]",
            names[n - 1],
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass && !known {
            unexpected.push(n);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
