use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use aublend_core::dataset::load_dataset;
use aublend_core::{compose_animated, io, OffsetSequence};

fn aublend(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aublend"))
        .args(args)
        .env_remove("AUBLEND_PORT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = aublend(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    let out = aublend(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim().lines().count(), 1, "diagnostic is one line: {stderr}");
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&[
        "synth",
        "--count",
        "10",
        "--seed",
        "5",
        "--vertices",
        "75",
        "--out",
        s(dir),
    ]);
}

#[test]
fn synth_writes_an_eight_one_one_split() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let msg = ok(&[
        "synth",
        "--count",
        "10",
        "--seed",
        "5",
        "--vertices",
        "75",
        "--out",
        s(&data),
    ]);
    assert!(msg.contains("(8/1/1)"), "{msg}");
    let ds = load_dataset(&data).unwrap();
    assert_eq!(ds.bundles.len(), 10);
    assert_eq!(code(&["synth", "--count", "3", "--out", s(&data)]), 1);
}

#[test]
fn empty_activation_reproduces_the_template() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let bundle = data.join("bundles/id_0000.aubd");
    let out = tmp.path().join("neutral.obj");
    ok(&["compose", "--bundle", s(&bundle), "--out", s(&out)]);
    let template = io::load_bundle(&bundle).unwrap().template;
    assert_eq!(fs::read_to_string(&out).unwrap(), io::obj_string(&template));

    let spec = tmp.path().join("smile.txt");
    fs::write(&spec, "# smile\nAU6=0.5\nAU12=0.7\n").unwrap();
    let from_file = tmp.path().join("a.obj");
    let inline = tmp.path().join("b.obj");
    ok(&[
        "compose",
        "--bundle",
        s(&bundle),
        "--activation",
        s(&spec),
        "--out",
        s(&from_file),
    ]);
    ok(&[
        "compose",
        "--bundle",
        s(&bundle),
        "--activation",
        "AU6=0.5,AU12=0.7",
        "--out",
        s(&inline),
    ]);
    assert_eq!(fs::read(&from_file).unwrap(), fs::read(&inline).unwrap());
    assert_ne!(fs::read(&from_file).unwrap(), fs::read(&out).unwrap());
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let bundle = data.join("bundles/id_0000.aubd");
    let out = tmp.path().join("x.obj");
    assert_eq!(code(&["compose", "--bundle", s(&bundle)]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(
        code(&[
            "compose",
            "--bundle",
            s(&bundle),
            "--activation",
            "AU12=1.2",
            "--out",
            s(&out)
        ]),
        2
    );
    assert_eq!(
        code(&[
            "compose",
            "--bundle",
            s(&bundle),
            "--activation",
            "AU99=0.5",
            "--out",
            s(&out)
        ]),
        2
    );
    assert_eq!(code(&["compose", "--bundle", "/nonexistent.aubd", "--out", s(&out)]), 2);
    let speech = data.join("speech/speech_00.auos");
    let frames = tmp.path().join("frames");
    assert_eq!(
        code(&[
            "animate",
            "--bundle",
            s(&bundle),
            "--speech-offsets",
            s(&speech),
            "--emotion",
            "glee",
            "--out",
            s(&frames)
        ]),
        2
    );
    assert_eq!(code(&["eval", "--data", s(&data), "--report", s(&out)]), 1);
    assert_eq!(code(&["train", "styleblend", "--data", s(&data), "--out", s(&out)]), 1);
    fs::write(&bundle, b"AUBD garbage").unwrap();
    assert_eq!(code(&["eval", "--oracle", "--data", s(&data), "--report", s(&out)]), 2);
    assert!(ok(&["--help"]).contains("compose"));
}

#[test]
fn zero_intensity_animation_is_speech_only() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let bundle = data.join("bundles/id_0001.aubd");
    let speech = data.join("speech/speech_00.auos");
    let frames = tmp.path().join("frames");
    ok(&[
        "animate",
        "--bundle",
        s(&bundle),
        "--speech-offsets",
        s(&speech),
        "--emotion",
        "happiness",
        "--intensity",
        "0",
        "--out",
        s(&frames),
    ]);
    let template = io::load_bundle(&bundle).unwrap().template;
    let seq = io::load_offsets(&speech).unwrap();
    let zero = OffsetSequence::zeros(seq.frame_rate, seq.vertex_count(), 1).unwrap();
    let want = compose_animated(&template, &seq, &zero).unwrap();
    assert_eq!(want.len(), seq.frame_count());
    for (t, m) in want.iter().enumerate() {
        let got = fs::read_to_string(frames.join(format!("frame_{t:04}.obj"))).unwrap();
        assert_eq!(got, io::obj_string(m), "frame {t}");
    }
}

#[test]
fn oracle_eval_scores_zero_basis_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let report = tmp.path().join("oracle.tsv");
    ok(&["eval", "--oracle", "--data", s(&data), "--report", s(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    for metric in ["mse_s", "mse_m", "lve", "vlve", "fdd"] {
        assert!(text.contains(&format!("\n{metric}\t0e0\n")), "{metric}: {text}");
    }
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cb_cfg = tmp.path().join("cb.toml");
    let sb_cfg = tmp.path().join("sb.toml");
    let model = "[model]\nlatent_dim = 8\ncodebook_size = 8\nlayers = 1\nheads = 2\n";
    fs::write(
        &cb_cfg,
        format!("stage = \"codebook\"\nepochs = 3\nlr = 1e-3\nseed = 2\n{model}"),
    )
    .unwrap();
    fs::write(
        &sb_cfg,
        format!("stage = \"styleblend\"\nepochs = 3\nlr = 1e-3\nseed = 2\n{model}"),
    )
    .unwrap();
    let run = |tag: &str| {
        let root = tmp.path().join(tag);
        let data = root.join("data");
        synth(&data);
        let cb = root.join("cb.aubm");
        let sb = root.join("sb.aubm");
        ok(&[
            "train",
            "codebook",
            "--config",
            s(&cb_cfg),
            "--data",
            s(&data),
            "--out",
            s(&cb),
        ]);
        ok(&[
            "train",
            "styleblend",
            "--config",
            s(&sb_cfg),
            "--data",
            s(&data),
            "--codebook",
            s(&cb),
            "--out",
            s(&sb),
        ]);
        let pred = root.join("pred.aubd");
        ok(&[
            "predict",
            "--model",
            s(&sb),
            "--template",
            s(&data.join("bundles/id_0009.aubd")),
            "--out",
            s(&pred),
        ]);
        let report = root.join("eval.tsv");
        ok(&["eval", "--models", s(&sb), "--data", s(&data), "--report", s(&report)]);
        let aug = root.join("aug");
        ok(&[
            "export-augment",
            "--data",
            s(&data),
            "--per-identity",
            "2",
            "--seed",
            "4",
            "--out",
            s(&aug),
        ]);
        [
            "data/manifest.json",
            "cb.aubm",
            "cb.tsv",
            "sb.aubm",
            "sb.tsv",
            "pred.aubd",
            "eval.tsv",
            "aug/manifest.tsv",
        ]
        .map(|f| fs::read(root.join(f)).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    let pred = io::load_bundle(&tmp.path().join("a/pred.aubd")).unwrap();
    assert_eq!(pred.identity_id, "id_0009");
    assert_eq!(String::from_utf8_lossy(&a[7]).lines().count(), 1 + 8 * 2);
    assert_eq!(
        code(&[
            "train",
            "codebook",
            "--config",
            s(&sb_cfg),
            "--data",
            s(&tmp.path().join("a/data")),
            "--out",
            "/tmp/x.aubm"
        ]),
        1
    );
}
