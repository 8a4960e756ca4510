use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use aublend_core::dataset::{export_augmentation, load_dataset, save_dataset, Dataset};
use aublend_core::io;
use aublend_core::metrics::{evaluate, BasisPredictor, ModelPair, Oracle};
use aublend_core::model::{checkpoint, predict_basis};
use aublend_core::synth::generate_dataset;
use aublend_core::train::{train_codebook, train_styleblend, Stage, TrainConfig};
use aublend_core::{compose, AuActivation, FaceMesh, FacsRegistry, IdentityBundle, OffsetSequence};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{CliError, CliResult};
use crate::service;

pub const PORT_ENV: &str = "AUBLEND_PORT";
pub const DEFAULT_PORT: u16 = 8077;

#[derive(Debug, Parser)]
#[command(name = "aublend", version, about = "AU-blendshape synthesis, training and editing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with an 8:1:1 split.
    Synth(SynthArgs),
    /// Train the codebook or style-blend stage.
    Train(TrainArgs),
    /// Predict an identity's AU bases from its neutral template.
    Predict(PredictArgs),
    /// Compose one expression as an OBJ mesh.
    Compose(ComposeArgs),
    /// Add an emotion to a speech offset sequence.
    Animate(AnimateArgs),
    /// Basis-prediction and animation metrics on a split.
    Eval(EvalArgs),
    /// Export annotated poses for AU-detector training.
    ExportAugment(ExportArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = aublend_core::synth::DESK_VERTICES)]
    pub vertices: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Codebook,
    Styleblend,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Codebook => Stage::Codebook,
            StageArg::Styleblend => Stage::Styleblend,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub stage: StageArg,
    /// TOML config; stage defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path. The report goes next to it with a `.tsv` extension.
    #[arg(long)]
    pub out: PathBuf,
    /// Trained codebook checkpoint, required by the style stage.
    #[arg(long)]
    pub codebook: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Neutral template as `.obj` or an identity bundle.
    #[arg(long)]
    pub template: PathBuf,
    /// Output identity bundle.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// A file holding the inline grammar, or the grammar itself, e.g.
    /// `AU6=0.5,AU12=0.7`.
    #[arg(long, default_value = "")]
    pub activation: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnimateArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub speech_offsets: PathBuf,
    #[arg(long)]
    pub emotion: String,
    #[arg(long, default_value_t = 1.0)]
    pub intensity: f32,
    /// Directory for `frame_NNNN.obj` files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn ids(self, ds: &Dataset) -> &[String] {
        let s = &ds.manifest.split;
        match self {
            SplitArg::Train => &s.train,
            SplitArg::Val => &s.val,
            SplitArg::Test => &s.test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Style-blend checkpoint.
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    pub models: Option<PathBuf>,
    /// Score the ground-truth bases instead of a model.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Seed for the multi-AU combinations; defaults to the dataset seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub per_identity: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Style-blend checkpoint; prediction answers 503 without one.
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, env = PORT_ENV, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

/// Parses `args` (program name first) and runs the command. Help and
/// version text go to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    write!(out, "{e}").map_err(|e| CliError::runtime(e.to_string()))
                }
                _ => Err(CliError::usage(first_line(&e.to_string()))),
            };
        }
    };
    let mut say = |line: String| writeln!(out, "{line}").map_err(|e| CliError::runtime(e.to_string()));
    match cli.command {
        Command::Synth(a) => say(synth(&a)?),
        Command::Train(a) => say(train(&a)?),
        Command::Predict(a) => say(predict(&a)?),
        Command::Compose(a) => say(compose_cmd(&a)?),
        Command::Animate(a) => say(animate(&a)?),
        Command::Eval(a) => say(eval(&a)?),
        Command::ExportAugment(a) => say(export(&a)?),
        Command::Serve(a) => serve(&a),
    }
}

fn first_line(s: &str) -> String {
    s.lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("invalid arguments")
        .trim_start_matches("error: ")
        .to_string()
}

fn synth(a: &SynthArgs) -> CliResult<String> {
    let data = generate_dataset(a.count, a.seed, a.vertices).map_err(|e| match e {
        aublend_core::Error::Config(m) => CliError::usage(m),
        other => other.into(),
    })?;
    let manifest = save_dataset(&a.out, &data, a.seed)?;
    let s = &manifest.split;
    Ok(format!(
        "wrote {} identities ({}/{}/{}) with {} vertices to {}",
        manifest.identities.len(),
        s.train.len(),
        s.val.len(),
        s.test.len(),
        manifest.vertex_count,
        a.out.display()
    ))
}

fn read_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let stage = Stage::from(a.stage);
    let Some(path) = &a.config else {
        return Ok(TrainConfig::defaults(stage));
    };
    let bytes = io::read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::data(format!("{} is not UTF-8", path.display())))?;
    let cfg = TrainConfig::from_toml_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if cfg.stage != stage {
        return Err(CliError::usage(format!(
            "{} configures the {} stage, not {}",
            path.display(),
            cfg.stage.name(),
            stage.name()
        )));
    }
    Ok(cfg)
}

fn snapshot_path(out: &Path, epoch: usize) -> PathBuf {
    out.with_extension(format!("epoch{epoch:04}.aubm"))
}

fn train(a: &TrainArgs) -> CliResult<String> {
    let cfg = read_config(a)?;
    let ds = load_dataset(&a.data)?;
    let train = ds.select(&ds.manifest.split.train)?;
    let val = ds.select(&ds.manifest.split.val)?;
    let out = a.out.clone();
    let mut hook = |epoch: usize, bytes: &[u8]| io::write_file(&snapshot_path(&out, epoch), bytes);
    let report = match cfg.stage {
        Stage::Codebook => {
            if a.codebook.is_some() {
                return Err(CliError::usage("--codebook only applies to the styleblend stage"));
            }
            let (model, report) = train_codebook(&cfg, &train, &val, Some(&mut hook))?;
            checkpoint::save_codebook(&model, &a.out)?;
            report
        }
        Stage::Styleblend => {
            let path = a
                .codebook
                .as_ref()
                .ok_or_else(|| CliError::usage("the styleblend stage needs --codebook"))?;
            let codebook = checkpoint::load_codebook(path)?;
            let (style, report) = train_styleblend(&cfg, &train, &val, &codebook, Some(&mut hook))?;
            checkpoint::save_styleblend(&style, &codebook, &a.out)?;
            report
        }
    };
    let report_path = a.out.with_extension("tsv");
    io::write_file(&report_path, report.to_tsv().as_bytes())?;
    Ok(format!(
        "{} stage: best epoch {} val basis_mse {:e} ({:.2}% of delta variance) in {:.1}s; wrote {} and {}",
        cfg.stage.name(),
        report.best_epoch,
        report.best_val_basis_mse,
        100.0 * report.best_val_basis_mse / report.delta_variance,
        report.wall_clock_s,
        a.out.display(),
        report_path.display()
    ))
}

fn read_template(path: &Path) -> CliResult<(String, FaceMesh)> {
    let stem = path
        .file_stem()
        .map_or("identity".into(), |s| s.to_string_lossy().into_owned());
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj")) {
        Ok((stem, io::load_obj(path)?))
    } else {
        let b = io::load_bundle(path)?;
        Ok((b.identity_id, b.template))
    }
}

fn predict(a: &PredictArgs) -> CliResult<String> {
    let (style, codebook) = checkpoint::load_styleblend(&a.model)?;
    let (id, template) = read_template(&a.template)?;
    let pred = predict_basis(&style, &codebook, &template, false)?;
    let bundle = IdentityBundle {
        identity_id: id,
        template,
        bases: pred.bases,
        annotated_poses: Vec::new(),
        style_meta: [("source".to_string(), "predicted".to_string())].into(),
    };
    io::save_bundle(&bundle, &a.out)?;
    Ok(format!(
        "predicted {} AU bases for `{}`; wrote {}",
        bundle.bases.deltas().len(),
        bundle.identity_id,
        a.out.display()
    ))
}

/// A path to a file holding the grammar, or the grammar itself.
fn read_activation(spec: &str) -> CliResult<AuActivation> {
    let path = Path::new(spec);
    let text = if !spec.is_empty() && path.is_file() {
        String::from_utf8(io::read_file(path)?).map_err(|_| CliError::data(format!("{spec} is not UTF-8")))?
    } else {
        spec.to_string()
    };
    let act = AuActivation::parse_inline(&text)?;
    FacsRegistry::standard()
        .validate_activation(&act)
        .map_err(aublend_core::Error::Validation)?;
    Ok(act)
}

fn compose_cmd(a: &ComposeArgs) -> CliResult<String> {
    let bundle = io::load_bundle(&a.bundle)?;
    let act = read_activation(&a.activation)?;
    let mesh = compose(&bundle.template, &bundle.bases, &act)?;
    io::save_obj(&mesh, &a.out)?;
    Ok(format!(
        "composed {} active AUs on `{}`; wrote {}",
        act.len(),
        bundle.identity_id,
        a.out.display()
    ))
}

fn animate(a: &AnimateArgs) -> CliResult<String> {
    if !(0.0..=1.0).contains(&a.intensity) {
        return Err(CliError::usage(format!("intensity {} outside [0, 1]", a.intensity)));
    }
    let bundle = io::load_bundle(&a.bundle)?;
    let speech: OffsetSequence = io::load_offsets(&a.speech_offsets)?;
    let act = FacsRegistry::standard()
        .emotion_to_activation(&a.emotion)?
        .scaled(a.intensity);
    let frames = aublend_core::metrics::animate(&bundle.template, &bundle.bases, &speech, &act)?;
    for (t, f) in frames.iter().enumerate() {
        io::save_obj(f, &a.out.join(format!("frame_{t:04}.obj")))?;
    }
    Ok(format!(
        "wrote {} frames at {} fps to {}",
        frames.len(),
        speech.frame_rate,
        a.out.display()
    ))
}

fn eval(a: &EvalArgs) -> CliResult<String> {
    let ds = load_dataset(&a.data)?;
    let bundles = ds.select(a.split.ids(&ds))?;
    let seed = a.seed.unwrap_or(ds.manifest.seed);
    let models = match &a.models {
        Some(p) => Some(checkpoint::load_styleblend(p)?),
        None => None,
    };
    let pair;
    let predictor: &dyn BasisPredictor = match &models {
        Some((s, c)) => {
            pair = ModelPair { style: s, codebook: c };
            &pair
        }
        None => &Oracle,
    };
    let report = evaluate(predictor, &bundles, &ds.speech, &ds.lip_mask, &ds.upper_mask, seed)?;
    io::write_file(&a.report, report.to_tsv().as_bytes())?;
    Ok(format!(
        "mse_s {:e} mse_m {:e} lve {:e} vlve {:e} fdd {:e}; wrote {}",
        report.mse_s,
        report.mse_m,
        report.lve,
        report.vlve,
        report.fdd,
        a.report.display()
    ))
}

fn export(a: &ExportArgs) -> CliResult<String> {
    if a.per_identity == 0 {
        return Err(CliError::usage("--per-identity must be positive"));
    }
    let ds = load_dataset(&a.data)?;
    let bundles = ds.select(a.split.ids(&ds))?;
    let summary = export_augmentation(&bundles, a.per_identity, a.seed, &a.out)?;
    Ok(format!(
        "exported {} poses to {} (manifest sha256 {})",
        summary.rows,
        a.out.display(),
        summary.manifest_sha256
    ))
}

fn serve(a: &ServeArgs) -> CliResult<()> {
    let ds = load_dataset(&a.data)?;
    let models = match &a.models {
        Some(p) => Some(checkpoint::load_styleblend(p)?),
        None => None,
    };
    let snapshot = service::Snapshot::from_dataset(ds, models)?;
    let state = service::AppState::new(snapshot);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::runtime(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .map_err(|e| CliError::runtime(format!("cannot bind {}:{}: {e}", a.host, a.port)))?;
        eprintln!(
            "listening on http://{}",
            listener.local_addr().map_err(|e| CliError::runtime(e.to_string()))?
        );
        service::serve(listener, state)
            .await
            .map_err(|e| CliError::runtime(e.to_string()))
    })
}
