//! Two-stage training: the codebook model first, then the style model
//! against the frozen codebook model.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use aublend_autodiff::{AdamState, AutodiffError, Graph, ParamStore, Tensor};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::mesh::{basis_mse, AuBases, IdentityBundle};
use crate::model::checkpoint;
use crate::model::{predict_basis, styleblend_forward, CodebookModel, HyperParams, StyleBlendModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Codebook,
    Styleblend,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Codebook => "codebook",
            Stage::Styleblend => "styleblend",
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Stage::Codebook => 200,
            Stage::Styleblend => 400,
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            Stage::Codebook => 1e-4,
            Stage::Styleblend => 1e-5,
        }
    }
}

/// Architecture fields a config may set. The style stage takes V, D and P
/// from the codebook checkpoint and ignores those three.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub beta: f64,
    pub mlp_ratio: usize,
    pub tcn_kernel: usize,
    pub tcn_dilations: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let hp = HyperParams::desk(1);
        Self {
            latent_dim: hp.latent_dim,
            codebook_size: hp.codebook_size,
            layers: hp.layers,
            heads: hp.heads,
            beta: hp.beta,
            mlp_ratio: hp.mlp_ratio,
            tcn_kernel: hp.tcn_kernel,
            tcn_dilations: hp.tcn_dilations,
        }
    }
}

impl ModelConfig {
    pub fn hyperparams(&self, vertex_count: usize, delta_scale: f64, init_seed: u64) -> HyperParams {
        HyperParams {
            latent_dim: self.latent_dim,
            codebook_size: self.codebook_size,
            layers: self.layers,
            heads: self.heads,
            beta: self.beta,
            mlp_ratio: self.mlp_ratio,
            tcn_kernel: self.tcn_kernel,
            tcn_dilations: self.tcn_dilations.clone(),
            delta_scale,
            init_seed,
            ..HyperParams::desk(vertex_count)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Snapshot interval in epochs; 0 disables snapshots.
    pub snapshot_every: usize,
    pub precision: String,
    pub model: ModelConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    stage: Stage,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    snapshot_every: Option<usize>,
    precision: Option<String>,
    #[serde(default)]
    model: ModelConfig,
}

impl TrainConfig {
    pub fn defaults(stage: Stage) -> Self {
        Self {
            stage,
            epochs: stage.default_epochs(),
            lr: stage.default_lr(),
            batch_size: 1,
            seed: 0,
            snapshot_every: 0,
            precision: "f64".into(),
            model: ModelConfig::default(),
        }
    }

    /// Parses TOML; omitted fields take the stage defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let d = Self::defaults(raw.stage);
        let cfg = Self {
            stage: raw.stage,
            epochs: raw.epochs.unwrap_or(d.epochs),
            lr: raw.lr.unwrap_or(d.lr),
            batch_size: raw.batch_size.unwrap_or(d.batch_size),
            seed: raw.seed.unwrap_or(d.seed),
            snapshot_every: raw.snapshot_every.unwrap_or(d.snapshot_every),
            precision: raw.precision.unwrap_or(d.precision),
            model: raw.model,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!("batch_size must be 1, got {}", self.batch_size)));
        }
        match self.precision.as_str() {
            "f64" => Ok(()),
            "f32" => Err(Error::Config(
                "precision f32 is not supported; the engine runs in f64".into(),
            )),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

// ---------------------------------------------------------------- report

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_basis_mse: f64,
    /// Fraction of codebook entries selected during the epoch.
    pub code_usage: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub stage: Stage,
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val_basis_mse: f64,
    pub train_basis_mse: f64,
    pub delta_variance: f64,
    /// Entries never selected by the training identities under the
    /// returned model.
    pub dead_code_fraction: f64,
    /// Excluded from [`TrainReport::to_tsv`] so reports are reproducible.
    pub wall_clock_s: f64,
}

impl TrainReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# stage\t{}", self.stage.name());
        let _ = writeln!(s, "# best_epoch\t{}", self.best_epoch);
        let _ = writeln!(s, "# best_val_basis_mse\t{:e}", self.best_val_basis_mse);
        let _ = writeln!(s, "# train_basis_mse\t{:e}", self.train_basis_mse);
        let _ = writeln!(s, "# delta_variance\t{:e}", self.delta_variance);
        let _ = writeln!(s, "# dead_code_fraction\t{}", self.dead_code_fraction);
        s.push_str("epoch\ttrain_loss\tval_basis_mse\tcode_usage\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{:e}\t{:e}\t{}",
                r.epoch, r.train_loss, r.val_basis_mse, r.code_usage
            );
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.train_loss).collect()
    }
}

// --------------------------------------------------------------- helpers

/// Population variance over every delta coordinate of every set.
pub fn delta_variance(sets: &[&AuBases]) -> f64 {
    let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
    for b in sets {
        for d in b.deltas() {
            for &v in &d.deltas {
                let v = v as f64;
                n += 1;
                sum += v;
                sq += v * v;
            }
        }
    }
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    (sq / n as f64 - mean * mean).max(0.0)
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Autodiff(AutodiffError::NonFinite { .. }) => Error::Diverged { epoch },
        other => other,
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn require_split(train: &[&IdentityBundle]) -> Result<usize> {
    let first = train
        .first()
        .ok_or_else(|| Error::Contract("training split is empty".into()))?;
    let v = first.vertex_count();
    if train.iter().any(|b| b.vertex_count() != v) {
        return Err(Error::Shape("training identities differ in vertex count".into()));
    }
    Ok(v)
}

/// Hook receiving `(epoch, checkpoint bytes)` every `snapshot_every` epochs.
pub type SnapshotHook<'a> = dyn FnMut(usize, &[u8]) -> Result<()> + 'a;

// -------------------------------------------------------- codebook stage

/// Mean reconstruction basis MSE in original units.
pub fn reconstruction_mse(model: &CodebookModel, bundles: &[&IdentityBundle]) -> Result<f64> {
    let mut total = 0.0;
    for b in bundles {
        let (rec, _) = model.reconstruct(&b.bases)?;
        total += basis_mse(&rec, &b.bases)?;
    }
    Ok(total / bundles.len().max(1) as f64)
}

/// Codebook indices chosen for each bundle.
fn used_codes(model: &CodebookModel, bundles: &[&IdentityBundle]) -> Result<BTreeSet<usize>> {
    let mut used = BTreeSet::new();
    for b in bundles {
        let (_, idx) = model.quantize(&model.encode(&b.bases)?)?;
        used.extend(idx);
    }
    Ok(used)
}

/// Seeds the codebook with encoder outputs of the training identities,
/// sampled without replacement; when there are fewer tokens than entries
/// the remainder are sampled tokens plus small noise.
fn init_codebook_from_data(model: &mut CodebookModel, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> Result<()> {
    let mut tokens: Vec<Vec<f64>> = Vec::new();
    for x in inputs {
        let mut g = Graph::new();
        let p = g.bind(&model.params, false);
        let xv = g.constant(x.clone());
        let z = model.encode_graph(&mut g, &p, xv)?;
        let z = g.value(z);
        tokens.extend((0..z.rows()).map(|r| z.row(r).to_vec()));
    }
    let (p, d) = (model.hp.codebook_size, model.hp.latent_dim);
    let mut data = Vec::with_capacity(p * d);
    let picks = sample(rng, tokens.len(), p.min(tokens.len())).into_vec();
    for &i in &picks {
        data.extend_from_slice(&tokens[i]);
    }
    while data.len() < p * d {
        let i = rng.gen_range(0..tokens.len());
        data.extend(tokens[i].iter().map(|v| v + rng.gen_range(-1e-3..1e-3)));
    }
    *model.params.get_mut("codebook")? = Tensor::new(&[p, d], data)?;
    Ok(())
}

pub fn train_codebook(
    cfg: &TrainConfig,
    train: &[&IdentityBundle],
    val: &[&IdentityBundle],
    snapshot: Option<&mut SnapshotHook>,
) -> Result<(CodebookModel, TrainReport)> {
    cfg.validate()?;
    if cfg.stage != Stage::Codebook {
        return Err(Error::Config(format!(
            "expected a codebook config, got `{}`",
            cfg.stage.name()
        )));
    }
    let start = Instant::now();
    let v = require_split(train)?;
    let bases: Vec<&AuBases> = train.iter().map(|b| &b.bases).collect();
    let variance = delta_variance(&bases);
    if variance <= 0.0 {
        return Err(Error::Contract("training deltas have zero variance".into()));
    }
    let hp = cfg.model.hyperparams(v, 1.0, cfg.seed);
    let mut model = CodebookModel::new(hp)?;
    model.set_basis_stats(&bases)?;
    let inputs = train
        .iter()
        .map(|b| model.input(&b.bases))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0DE_B00C);
    init_codebook_from_data(&mut model, &inputs, &mut rng)?;
    let val = if val.is_empty() { train } else { val };

    let mut adam = AdamState::new(cfg.lr);
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut snapshot = snapshot;
    for epoch in 1..=cfg.epochs {
        let on_err = diverged(epoch);
        let mut loss_sum = 0.0;
        let mut used = BTreeSet::new();
        for i in epoch_order(train.len(), cfg.seed, epoch) {
            let mut g = Graph::new();
            let p = g.bind(&model.params, true);
            let pass = model.forward(&mut g, &p, &inputs[i], None).map_err(&on_err)?;
            let loss = g.value(pass.loss).data()[0];
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss;
            used.extend(pass.indices.iter().copied());
            g.backward(pass.loss).map_err(|e| on_err(e.into()))?;
            let grads = p.grads(&mut g);
            adam.step(&mut model.params, grads)?;
        }
        if !model.params.iter().all(|(_, p)| p.value.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        let val_mse = reconstruction_mse(&model, val).map_err(&on_err)?;
        rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_basis_mse: val_mse,
            code_usage: used.len() as f64 / model.hp.codebook_size as f64,
        });
        if best.as_ref().is_none_or(|b| val_mse < b.1) {
            best = Some((epoch, val_mse, model.params.clone()));
        }
        if let Some(hook) = snapshot.as_deref_mut() {
            if cfg.snapshot_every > 0 && epoch % cfg.snapshot_every == 0 {
                hook(epoch, &checkpoint::encode_codebook(&model))?;
            }
        }
    }
    let (best_epoch, best_val, params) = best.expect("at least one epoch ran");
    model.params = params;
    let used = used_codes(&model, train)?;
    let report = TrainReport {
        stage: Stage::Codebook,
        rows,
        best_epoch,
        best_val_basis_mse: best_val,
        train_basis_mse: reconstruction_mse(&model, train)?,
        delta_variance: variance,
        dead_code_fraction: 1.0 - used.len() as f64 / model.hp.codebook_size as f64,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

// ----------------------------------------------------------- style stage

/// Mean basis MSE of the model pair's predictions.
pub fn prediction_mse(style: &StyleBlendModel, codebook: &CodebookModel, bundles: &[&IdentityBundle]) -> Result<f64> {
    let mut total = 0.0;
    for b in bundles {
        let pred = predict_basis(style, codebook, &b.template, true)?;
        total += basis_mse(&pred.bases, &b.bases)?;
    }
    Ok(total / bundles.len().max(1) as f64)
}

/// Stable digest of a model's parameters.
pub fn codebook_digest(model: &CodebookModel) -> String {
    io::sha256_hex(&checkpoint::encode_codebook(model))
}

pub fn train_styleblend(
    cfg: &TrainConfig,
    train: &[&IdentityBundle],
    val: &[&IdentityBundle],
    codebook: &CodebookModel,
    snapshot: Option<&mut SnapshotHook>,
) -> Result<(StyleBlendModel, TrainReport)> {
    cfg.validate()?;
    if cfg.stage != Stage::Styleblend {
        return Err(Error::Config(format!(
            "expected a styleblend config, got `{}`",
            cfg.stage.name()
        )));
    }
    let start = Instant::now();
    let v = require_split(train)?;
    if v != codebook.hp.vertex_count {
        return Err(Error::Shape(format!(
            "dataset has {v} vertices, codebook model expects {}",
            codebook.hp.vertex_count
        )));
    }
    let mut frozen = codebook.clone();
    frozen.params.freeze_all();
    let digest = codebook_digest(&frozen);

    let hp = HyperParams {
        layers: cfg.model.layers,
        heads: cfg.model.heads,
        mlp_ratio: cfg.model.mlp_ratio,
        tcn_kernel: cfg.model.tcn_kernel,
        tcn_dilations: cfg.model.tcn_dilations.clone(),
        init_seed: cfg.seed,
        ..codebook.hp.clone()
    };
    let mut style = StyleBlendModel::new(hp)?;
    let templates: Vec<_> = train.iter().map(|b| &b.template).collect();
    style.set_template_stats(&templates)?;

    struct Target {
        template: Tensor,
        bases: Tensor,
        zq: Tensor,
    }
    let targets = train
        .iter()
        .map(|b| {
            let (zq, _) = frozen.quantize(&frozen.encode(&b.bases)?)?;
            Ok(Target {
                template: style.template_input(&b.template)?,
                bases: frozen.input(&b.bases)?,
                zq,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = targets.len() as f64;
    let mut offsets = Tensor::zeros(targets[0].zq.shape());
    for t in &targets {
        offsets = offsets.zip_map(&t.zq, |a, b| a + b / n)?;
    }
    style.set_token_offsets(offsets)?;
    let val = if val.is_empty() { train } else { val };

    let mut adam = AdamState::new(cfg.lr);
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut snapshot = snapshot;
    for epoch in 1..=cfg.epochs {
        let on_err = diverged(epoch);
        let mut loss_sum = 0.0;
        let mut used = BTreeSet::new();
        for i in epoch_order(train.len(), cfg.seed, epoch) {
            let t = &targets[i];
            let mut g = Graph::new();
            let sp = g.bind(&style.params, true);
            let cp = g.bind(&frozen.params, false);
            let pass = styleblend_forward(&style, &frozen, &mut g, &sp, &cp, &t.template, &t.bases, &t.zq, None)
                .map_err(&on_err)?;
            let loss = g.value(pass.loss).data()[0];
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss;
            used.extend(pass.indices.iter().copied());
            g.backward(pass.loss).map_err(|e| on_err(e.into()))?;
            let grads = sp.grads(&mut g);
            adam.step(&mut style.params, grads)?;
        }
        if !style.params.iter().all(|(_, p)| p.value.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        let val_mse = prediction_mse(&style, &frozen, val).map_err(&on_err)?;
        rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_basis_mse: val_mse,
            code_usage: used.len() as f64 / frozen.hp.codebook_size as f64,
        });
        if best.as_ref().is_none_or(|b| val_mse < b.1) {
            best = Some((epoch, val_mse, style.params.clone()));
        }
        if let Some(hook) = snapshot.as_deref_mut() {
            if cfg.snapshot_every > 0 && epoch % cfg.snapshot_every == 0 {
                let mut snap = style.clone();
                snap.trained = true;
                hook(epoch, &checkpoint::encode_styleblend(&snap, codebook))?;
            }
        }
    }
    if codebook_digest(&frozen) != digest {
        return Err(Error::Contract("frozen codebook model changed during training".into()));
    }
    let (best_epoch, best_val, params) = best.expect("at least one epoch ran");
    style.params = params;
    style.trained = true;
    let mut used = BTreeSet::new();
    for b in train {
        used.extend(predict_basis(&style, &frozen, &b.template, true)?.indices);
    }
    let bases: Vec<&AuBases> = train.iter().map(|b| &b.bases).collect();
    let report = TrainReport {
        stage: Stage::Styleblend,
        rows,
        best_epoch,
        best_val_basis_mse: best_val,
        train_basis_mse: prediction_mse(&style, &frozen, train)?,
        delta_variance: delta_variance(&bases),
        dead_code_fraction: 1.0 - used.len() as f64 / frozen.hp.codebook_size as f64,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok((style, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_follow_the_stage() {
        let c = TrainConfig::from_toml_str("stage = \"codebook\"").unwrap();
        assert_eq!((c.epochs, c.lr), (200, 1e-4));
        let s = TrainConfig::from_toml_str("stage = \"styleblend\"\nseed = 3").unwrap();
        assert_eq!((s.epochs, s.lr, s.seed), (400, 1e-5, 3));
        let back = TrainConfig::from_toml_str(&s.to_toml_string()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn config_rejections() {
        for bad in [
            "stage = \"codebook\"\nepochs = 0",
            "stage = \"codebook\"\nlr = -1.0",
            "stage = \"codebook\"\nbatch_size = 2",
            "stage = \"codebook\"\nprecision = \"f32\"",
            "stage = \"codebook\"\nbogus = 1",
            "stage = \"other\"",
        ] {
            assert!(TrainConfig::from_toml_str(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn variance_of_known_values() {
        use crate::facs::FacsRegistry;
        use crate::mesh::BlendDelta;
        let reg = FacsRegistry::standard();
        let mk = |x: f32| {
            AuBases::new(
                reg.ids()
                    .map(|au| BlendDelta {
                        au,
                        deltas: vec![x, -x, x],
                    })
                    .collect(),
                reg,
            )
            .unwrap()
        };
        let (a, b) = (mk(1.0), mk(3.0));
        // Values {1,-1,1,3,-3,3} repeated: mean 2/3, E[x^2] = 5.
        let want = 5.0 - (2.0f64 / 3.0).powi(2);
        assert!((delta_variance(&[&a, &b]) - want).abs() < 1e-12);
    }
}
