//! The codebook autoencoder over AU bases and the template-conditioned
//! token predictor.
//!
//! Both models see bases centred on the training mean basis and divided by
//! `delta_scale`, one flattened delta per
//! token. The style model sees the template standardised element-wise by
//! frozen `norm.mean` / `norm.scale` buffers taken from the training set.

use aublend_autodiff::nn::{fan_in_uniform, linear, mhsa, AttentionWeights};
use aublend_autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facs::{FacsRegistry, AU_COUNT};
use crate::mesh::{AuBases, FaceMesh};

pub mod check;
pub mod checkpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub tokens: usize,
    pub vertex_count: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub beta: f64,
    pub mlp_ratio: usize,
    pub tcn_kernel: usize,
    pub tcn_dilations: Vec<usize>,
    pub ln_eps: f64,
    /// Centred bases are divided by this before encoding and multiplied back
    /// after decoding.
    pub delta_scale: f64,
    pub init_seed: u64,
}

impl HyperParams {
    /// Desk-scale defaults.
    pub fn desk(vertex_count: usize) -> Self {
        Self {
            tokens: AU_COUNT,
            vertex_count,
            latent_dim: 64,
            codebook_size: 256,
            layers: 2,
            heads: 4,
            beta: 0.1,
            mlp_ratio: 2,
            tcn_kernel: 3,
            tcn_dilations: vec![1, 2, 4],
            ln_eps: 1e-5,
            delta_scale: 1.0,
            init_seed: 0,
        }
    }

    /// The configuration used for full-model gradient checks.
    pub fn tiny() -> Self {
        Self {
            vertex_count: 75,
            latent_dim: 8,
            codebook_size: 4,
            layers: 1,
            heads: 2,
            ..Self::desk(75)
        }
    }

    pub fn width(&self) -> usize {
        3 * self.vertex_count
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.tokens != AU_COUNT {
            return fail(format!("tokens must be {AU_COUNT}, got {}", self.tokens));
        }
        if self.vertex_count == 0 || self.latent_dim == 0 || self.layers == 0 || self.mlp_ratio == 0 {
            return fail("vertex_count, latent_dim, layers and mlp_ratio must be positive".into());
        }
        if self.heads == 0 || self.latent_dim % self.heads != 0 {
            return fail(format!(
                "latent_dim {} is not divisible by {} heads",
                self.latent_dim, self.heads
            ));
        }
        if self.codebook_size < 2 {
            return fail(format!("codebook_size must be at least 2, got {}", self.codebook_size));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.delta_scale > 0.0 && self.delta_scale.is_finite()) {
            return fail(format!("delta_scale must be positive, got {}", self.delta_scale));
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps must be positive".into());
        }
        if self.tcn_kernel == 0 || self.tcn_dilations.is_empty() || self.tcn_dilations.contains(&0) {
            return fail("tcn needs a positive kernel and positive dilations".into());
        }
        for &d in &self.tcn_dilations {
            if (self.tcn_kernel - 1) * d + 1 > self.tokens {
                return fail(format!(
                    "tcn kernel {} at dilation {d} spans more than {} tokens",
                    self.tcn_kernel, self.tokens
                ));
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------ parameters

fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    fan_in_uniform(shape, fan_in, rng)
}

fn insert_block(p: &mut ParamStore, pre: &str, d: usize, hidden: usize, affine: bool, rng: &mut ChaCha8Rng) {
    if affine {
        p.insert(format!("{pre}.ln1.g"), Tensor::ones(&[d]));
        p.insert(format!("{pre}.ln1.b"), Tensor::zeros(&[d]));
        p.insert(format!("{pre}.ln2.g"), Tensor::ones(&[d]));
        p.insert(format!("{pre}.ln2.b"), Tensor::zeros(&[d]));
    }
    for n in ["q", "k", "v", "o"] {
        p.insert(format!("{pre}.attn.w{n}"), uniform(&[d, d], d, rng));
        p.insert(format!("{pre}.attn.b{n}"), Tensor::zeros(&[d]));
    }
    p.insert(format!("{pre}.mlp.w1"), uniform(&[d, hidden], d, rng));
    p.insert(format!("{pre}.mlp.b1"), Tensor::zeros(&[hidden]));
    p.insert(format!("{pre}.mlp.w2"), uniform(&[hidden, d], hidden, rng));
    p.insert(format!("{pre}.mlp.b2"), Tensor::zeros(&[d]));
}

struct Ctx<'a> {
    g: &'a mut Graph,
    p: &'a Bound,
    hp: &'a HyperParams,
}

impl Ctx<'_> {
    fn v(&self, name: &str) -> Result<Var> {
        Ok(self.p.var(name)?)
    }

    fn linear(&mut self, x: Var, pre: &str) -> Result<Var> {
        let (w, b) = (self.v(&format!("{pre}.w"))?, self.v(&format!("{pre}.b"))?);
        Ok(linear(self.g, x, w, Some(b))?)
    }

    fn attention(&mut self, x: Var, pre: &str) -> Result<Var> {
        let w = AttentionWeights {
            wq: self.v(&format!("{pre}.attn.wq"))?,
            bq: self.v(&format!("{pre}.attn.bq"))?,
            wk: self.v(&format!("{pre}.attn.wk"))?,
            bk: self.v(&format!("{pre}.attn.bk"))?,
            wv: self.v(&format!("{pre}.attn.wv"))?,
            bv: self.v(&format!("{pre}.attn.bv"))?,
            wo: self.v(&format!("{pre}.attn.wo"))?,
            bo: self.v(&format!("{pre}.attn.bo"))?,
        };
        Ok(mhsa(self.g, x, &w, self.hp.heads)?)
    }

    fn mlp(&mut self, x: Var, pre: &str) -> Result<Var> {
        let (w1, b1) = (self.v(&format!("{pre}.mlp.w1"))?, self.v(&format!("{pre}.mlp.b1"))?);
        let (w2, b2) = (self.v(&format!("{pre}.mlp.w2"))?, self.v(&format!("{pre}.mlp.b2"))?);
        let h = linear(self.g, x, w1, Some(b1))?;
        let h = self.g.gelu(h)?;
        Ok(linear(self.g, h, w2, Some(b2))?)
    }

    fn ln(&mut self, x: Var, pre: Option<&str>) -> Result<Var> {
        let (gain, bias) = match pre {
            Some(pre) => (Some(self.v(&format!("{pre}.g"))?), Some(self.v(&format!("{pre}.b"))?)),
            None => (None, None),
        };
        Ok(self.g.layer_norm(x, gain, bias, self.hp.ln_eps)?)
    }

    /// Pre-norm transformer block.
    fn block(&mut self, x: Var, pre: &str) -> Result<Var> {
        let h = self.ln(x, Some(&format!("{pre}.ln1")))?;
        let a = self.attention(h, pre)?;
        let x = self.g.add(x, a)?;
        let h = self.ln(x, Some(&format!("{pre}.ln2")))?;
        let m = self.mlp(h, pre)?;
        Ok(self.g.add(x, m)?)
    }

    /// Block modulated by `(gamma, beta, alpha)` pairs:
    /// `x + a1 * MHSA(LN(x) g1 + b1)`, then `x + a2 * MLP(LN(x) g2 + b2)`.
    fn adaln_block(&mut self, x: Var, pre: &str, c: &Modulation) -> Result<Var> {
        let h = self.ln(x, None)?;
        let h = self.g.mul_row(h, c.gamma1)?;
        let h = self.g.add_row(h, c.beta1)?;
        let a = self.attention(h, pre)?;
        let a = self.g.mul_row(a, c.alpha1)?;
        let x = self.g.add(x, a)?;
        let h = self.ln(x, None)?;
        let h = self.g.mul_row(h, c.gamma2)?;
        let h = self.g.add_row(h, c.beta2)?;
        let m = self.mlp(h, pre)?;
        let m = self.g.mul_row(m, c.alpha2)?;
        Ok(self.g.add(x, m)?)
    }
}

/// Per-block conditioning rows, each `[1, D]`.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub gamma1: Var,
    pub beta1: Var,
    pub alpha1: Var,
    pub gamma2: Var,
    pub beta2: Var,
    pub alpha2: Var,
}

// -------------------------------------------------------------- quantizer

/// Nearest codebook row per token by squared Euclidean distance; ties go
/// to the lower index.
pub fn quantize(codebook: &Tensor, z: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if codebook.rank() != 2 || codebook.rows() == 0 {
        return Err(Error::Config("codebook is empty".into()));
    }
    if z.rank() != 2 || z.cols() != codebook.cols() {
        return Err(Error::Shape(format!(
            "tokens {:?} do not match codebook {:?}",
            z.shape(),
            codebook.shape()
        )));
    }
    if !z.is_finite() {
        return Err(Error::Contract("cannot quantize non-finite tokens".into()));
    }
    let d = z.cols();
    let mut idx = Vec::with_capacity(z.rows());
    let mut data = Vec::with_capacity(z.len());
    for r in 0..z.rows() {
        let zr = z.row(r);
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for e in 0..codebook.rows() {
            let dist: f64 = codebook.row(e).iter().zip(zr).map(|(c, x)| (c - x) * (c - x)).sum();
            if dist < best_d {
                best = e;
                best_d = dist;
            }
        }
        idx.push(best);
        data.extend_from_slice(codebook.row(best));
    }
    Ok((Tensor::new(&[z.rows(), d], data)?, idx))
}

// --------------------------------------------------------- codebook model

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookModel {
    pub hp: HyperParams,
    pub params: ParamStore,
}

/// Forward values of one codebook pass.
pub struct CodebookPass {
    pub z: Var,
    pub zq: Var,
    pub b_hat: Var,
    pub indices: Vec<usize>,
    pub loss: Var,
}

impl CodebookModel {
    pub fn new(hp: HyperParams) -> Result<Self> {
        hp.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(hp.init_seed);
        let (n, w, d) = (hp.tokens, hp.width(), hp.latent_dim);
        let hidden = hp.mlp_ratio * d;
        let mut p = ParamStore::new();
        p.insert_frozen("norm.basis_mean", Tensor::zeros(&[n, w]));
        p.insert("enc.in.w", uniform(&[n, w, d], w, &mut rng));
        p.insert("enc.in.b", uniform(&[n, d], d, &mut rng));
        for k in 0..hp.layers {
            insert_block(&mut p, &format!("enc.blocks.{k}"), d, hidden, true, &mut rng);
        }
        p.insert("enc.ln.g", Tensor::ones(&[d]));
        p.insert("enc.ln.b", Tensor::zeros(&[d]));
        p.insert("enc.out.w", uniform(&[d, d], d, &mut rng));
        p.insert("enc.out.b", Tensor::zeros(&[d]));
        p.insert(
            "codebook",
            Tensor::rand_uniform(&[hp.codebook_size, d], -1.0, 1.0, &mut rng),
        );
        p.insert("dec.in.w", uniform(&[d, d], d, &mut rng));
        p.insert("dec.in.b", Tensor::zeros(&[d]));
        p.insert("dec.pos", uniform(&[n, d], d, &mut rng));
        for k in 0..hp.layers {
            insert_block(&mut p, &format!("dec.blocks.{k}"), d, hidden, true, &mut rng);
        }
        p.insert("dec.ln.g", Tensor::ones(&[d]));
        p.insert("dec.ln.b", Tensor::zeros(&[d]));
        p.insert("dec.out.w", Tensor::zeros(&[n, d, w]));
        p.insert("dec.out.b", Tensor::zeros(&[n, w]));
        Ok(Self { hp, params: p })
    }

    /// Sets the mean basis and `delta_scale` (the standard deviation of
    /// centred deltas) from training bases.
    pub fn set_basis_stats(&mut self, sets: &[&AuBases]) -> Result<()> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Contract("no bases for normalisation".into()))?;
        if first.vertex_count() != self.hp.vertex_count {
            return Err(Error::Shape(format!(
                "bases have {} vertices, model expects {}",
                first.vertex_count(),
                self.hp.vertex_count
            )));
        }
        let mean = AuBases::mean(sets)?.to_tensor();
        let mut sq = 0.0;
        for b in sets {
            let t = b.to_tensor();
            sq += t
                .data()
                .iter()
                .zip(mean.data())
                .map(|(x, m)| (x - m).powi(2))
                .sum::<f64>();
        }
        let sd = (sq / (sets.len() * mean.len()) as f64).sqrt();
        if !(sd > 0.0) {
            return Err(Error::Contract("training bases are identical; nothing to model".into()));
        }
        self.hp.delta_scale = sd;
        *self.params.get_mut("norm.basis_mean")? = mean;
        Ok(())
    }

    /// Centred, scaled `[N, W]` tensor of a basis set.
    pub fn input(&self, b: &AuBases) -> Result<Tensor> {
        if b.vertex_count() != self.hp.vertex_count {
            return Err(Error::Shape(format!(
                "bases have {} vertices, model expects {}",
                b.vertex_count(),
                self.hp.vertex_count
            )));
        }
        let mean = self.params.get("norm.basis_mean")?;
        let s = self.hp.delta_scale;
        Ok(b.to_tensor().zip_map(mean, |x, m| (x - m) / s)?)
    }

    /// Inverse of [`CodebookModel::input`].
    pub fn output(&self, t: &Tensor) -> Result<AuBases> {
        let mean = self.params.get("norm.basis_mean")?;
        let s = self.hp.delta_scale;
        AuBases::from_tensor(&t.zip_map(mean, |x, m| x * s + m)?, FacsRegistry::standard())
    }

    pub fn codebook(&self) -> &Tensor {
        self.params.get("codebook").expect("codebook is always present")
    }

    /// `[N, W]` normalised bases to `[N, D]` tokens.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut c = Ctx { g, p, hp: &self.hp };
        let (w, b) = (c.v("enc.in.w")?, c.v("enc.in.b")?);
        let mut h = c.g.token_linear(x, w, Some(b))?;
        for k in 0..self.hp.layers {
            h = c.block(h, &format!("enc.blocks.{k}"))?;
        }
        let h = c.ln(h, Some("enc.ln"))?;
        c.linear(h, "enc.out")
    }

    /// `[N, D]` tokens to `[N, W]` normalised bases.
    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, zq: Var) -> Result<Var> {
        if g.shape(zq) != [self.hp.tokens, self.hp.latent_dim] {
            return Err(Error::Shape(format!(
                "decoder expects [{}, {}] tokens, got {:?}",
                self.hp.tokens,
                self.hp.latent_dim,
                g.shape(zq)
            )));
        }
        let mut c = Ctx { g, p, hp: &self.hp };
        let h = c.linear(zq, "dec.in")?;
        let pos = c.v("dec.pos")?;
        let mut h = c.g.add(h, pos)?;
        for k in 0..self.hp.layers {
            h = c.block(h, &format!("dec.blocks.{k}"))?;
        }
        let h = c.ln(h, Some("dec.ln"))?;
        let (w, b) = (c.v("dec.out.w")?, c.v("dec.out.b")?);
        Ok(c.g.token_linear(h, w, Some(b))?)
    }

    /// Records encode, quantize, straight-through decode and the loss
    /// `mean|B - B_hat| + mean(SG(Z) - Zq)^2 + beta mean(Z - SG(Zq))^2`.
    ///
    /// `indices` overrides the argmin, which gradient checks use to hold the
    /// assignment fixed.
    pub fn forward(&self, g: &mut Graph, p: &Bound, b: &Tensor, indices: Option<&[usize]>) -> Result<CodebookPass> {
        let x = g.constant(b.clone());
        let z = self.encode_graph(g, p, x)?;
        let cb = p.var("codebook")?;
        let indices = match indices {
            Some(i) => i.to_vec(),
            None => quantize(g.value(cb), g.value(z))?.1,
        };
        let zq = g.gather(cb, &indices)?;
        let zst = g.straight_through(z, zq)?;
        let b_hat = self.decode_graph(g, p, zst)?;
        let loss = codebook_loss(g, x, b_hat, z, zq, self.hp.beta)?;
        Ok(CodebookPass {
            z,
            zq,
            b_hat,
            indices,
            loss,
        })
    }

    pub fn encode(&self, bases: &AuBases) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let x = g.constant(self.input(bases)?);
        let z = self.encode_graph(&mut g, &p, x)?;
        Ok(g.value(z).clone())
    }

    pub fn decode(&self, zq: &Tensor) -> Result<AuBases> {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let x = g.constant(zq.clone());
        let b = self.decode_graph(&mut g, &p, x)?;
        self.output(g.value(b))
    }

    pub fn decode_indices(&self, indices: &[usize]) -> Result<AuBases> {
        let mut g = Graph::new();
        let cb = g.constant(self.codebook().clone());
        let zq = g.gather(cb, indices)?;
        let zq = g.value(zq).clone();
        self.decode(&zq)
    }

    pub fn quantize(&self, z: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        quantize(self.codebook(), z)
    }

    /// `decode(quantize(encode(B)))`.
    pub fn reconstruct(&self, bases: &AuBases) -> Result<(AuBases, Vec<usize>)> {
        let z = self.encode(bases)?;
        let (zq, idx) = self.quantize(&z)?;
        Ok((self.decode(&zq)?, idx))
    }
}

/// Mean-reduced vector-quantisation loss.
pub fn codebook_loss(g: &mut Graph, b: Var, b_hat: Var, z: Var, zq: Var, beta: f64) -> Result<Var> {
    let diff = g.sub(b, b_hat)?;
    let abs = g.abs(diff)?;
    let rec = g.mean(abs)?;
    let sg_z = g.stop_gradient(z)?;
    let d1 = g.sub(sg_z, zq)?;
    let s1 = g.square(d1)?;
    let codebook_term = g.mean(s1)?;
    let sg_zq = g.stop_gradient(zq)?;
    let d2 = g.sub(z, sg_zq)?;
    let s2 = g.square(d2)?;
    let commit = g.mean(s2)?;
    let commit = g.scale(commit, beta)?;
    let l = g.add(rec, codebook_term)?;
    Ok(g.add(l, commit)?)
}

/// `mean(B - B_pred)^2 + mean(Z_hat - SG(Zq))^2`.
pub fn styleblend_loss(g: &mut Graph, b: Var, b_pred: Var, z_hat: Var, zq: Var) -> Result<Var> {
    let d = g.sub(b, b_pred)?;
    let s = g.square(d)?;
    let mesh = g.mean(s)?;
    let sg = g.stop_gradient(zq)?;
    let d = g.sub(z_hat, sg)?;
    let s = g.square(d)?;
    let latent = g.mean(s)?;
    Ok(g.add(mesh, latent)?)
}

// ------------------------------------------------------ style-blend model

#[derive(Clone, Debug, PartialEq)]
pub struct StyleBlendModel {
    pub hp: HyperParams,
    pub params: ParamStore,
    /// Set once training has produced these weights.
    pub trained: bool,
}

/// Intermediate values of one style pass.
pub struct StylePass {
    pub tcn: Var,
    pub projected: Var,
    pub blocks: Vec<(Var, Var)>,
    pub modulation: Vec<Modulation>,
    pub z_hat: Var,
}

impl StyleBlendModel {
    /// Template normalisation defaults to identity; see
    /// [`StyleBlendModel::set_template_stats`].
    pub fn new(hp: HyperParams) -> Result<Self> {
        hp.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(hp.init_seed ^ 0x5157_4c45);
        let (n, w, d) = (hp.tokens, hp.width(), hp.latent_dim);
        let hidden = hp.mlp_ratio * d;
        let k = hp.tcn_kernel;
        let mut p = ParamStore::new();
        p.insert_frozen("norm.mean", Tensor::zeros(&[w]));
        p.insert_frozen("norm.scale", Tensor::ones(&[w]));
        p.insert("tcn.pos", uniform(&[n, w], w, &mut rng));
        for (i, _) in hp.tcn_dilations.iter().enumerate() {
            let cin = if i == 0 { w } else { d };
            p.insert(format!("tcn.{i}.w"), uniform(&[k, cin, d], k * cin, &mut rng));
            p.insert(format!("tcn.{i}.b"), Tensor::zeros(&[d]));
        }
        p.insert("proj.0.w", uniform(&[d, d], d, &mut rng));
        p.insert("proj.0.b", Tensor::zeros(&[d]));
        p.insert("proj.1.w", uniform(&[d, d], d, &mut rng));
        p.insert("proj.1.b", Tensor::zeros(&[d]));
        p.insert("style.0.w", uniform(&[w, d], w, &mut rng));
        p.insert("style.0.b", Tensor::zeros(&[d]));
        p.insert("style.1.w", uniform(&[d, d], d, &mut rng));
        p.insert("style.1.b", Tensor::zeros(&[d]));
        for b in 0..hp.layers {
            let pre = format!("blocks.{b}");
            insert_block(&mut p, &pre, d, hidden, false, &mut rng);
            // Columns are [g1 | b1 | a1 | g2 | b2 | a2]; gate columns start at
            // zero and gain biases at one.
            let mut cw = uniform(&[d, 6 * d], d, &mut rng);
            let mut cb = Tensor::zeros(&[6 * d]);
            {
                let data = cw.data_mut();
                for r in 0..d {
                    for gate in [2, 5] {
                        for j in gate * d..(gate + 1) * d {
                            data[r * 6 * d + j] = 0.0;
                        }
                    }
                }
                let bias = cb.data_mut();
                for gain in [0, 3] {
                    for v in &mut bias[gain * d..(gain + 1) * d] {
                        *v = 1.0;
                    }
                }
            }
            p.insert(format!("{pre}.cond.w"), cw);
            p.insert(format!("{pre}.cond.b"), cb);
        }
        p.insert("head.w", Tensor::zeros(&[d, d]));
        p.insert("head.b", Tensor::zeros(&[d]));
        p.insert("head.pos", Tensor::zeros(&[n, d]));
        Ok(Self {
            hp,
            params: p,
            trained: false,
        })
    }

    /// Starts every token at `offsets` `[N, D]`, typically the mean training
    /// target.
    pub fn set_token_offsets(&mut self, offsets: Tensor) -> Result<()> {
        let want = [self.hp.tokens, self.hp.latent_dim];
        if offsets.shape() != want {
            return Err(Error::Shape(format!(
                "token offsets must be {want:?}, got {:?}",
                offsets.shape()
            )));
        }
        *self.params.get_mut("head.pos")? = offsets;
        Ok(())
    }

    /// Element-wise mean and standard deviation over training templates,
    /// with the scale floored at a fraction of its average.
    pub fn set_template_stats(&mut self, templates: &[&FaceMesh]) -> Result<()> {
        let w = self.hp.width();
        if templates.is_empty() {
            return Err(Error::Contract("no templates for normalisation".into()));
        }
        let n = templates.len() as f64;
        let mut mean = vec![0.0; w];
        for t in templates {
            if t.positions().len() != w {
                return Err(Error::Shape(format!(
                    "template has {} coordinates, model expects {w}",
                    t.positions().len()
                )));
            }
            for (m, &x) in mean.iter_mut().zip(t.positions()) {
                *m += x as f64 / n;
            }
        }
        let mut sd = vec![0.0; w];
        for t in templates {
            for ((s, &x), m) in sd.iter_mut().zip(t.positions()).zip(&mean) {
                *s += (x as f64 - m).powi(2) / n;
            }
        }
        let sd: Vec<f64> = sd.into_iter().map(f64::sqrt).collect();
        let avg = sd.iter().sum::<f64>() / w as f64;
        let floor = (0.1 * avg).max(1e-6);
        let sd = sd.into_iter().map(|s| s.max(floor)).collect();
        *self.params.get_mut("norm.mean")? = Tensor::new(&[w], mean)?;
        *self.params.get_mut("norm.scale")? = Tensor::new(&[w], sd)?;
        Ok(())
    }

    pub fn template_input(&self, template: &FaceMesh) -> Result<Tensor> {
        let w = self.hp.width();
        if template.positions().len() != w {
            return Err(Error::Shape(format!(
                "template has {} vertices, model expects {}",
                template.vertex_count(),
                self.hp.vertex_count
            )));
        }
        let mean = self.params.get("norm.mean")?.data();
        let scale = self.params.get("norm.scale")?.data();
        let data = template
            .positions()
            .iter()
            .zip(mean)
            .zip(scale)
            .map(|((&x, m), s)| (x as f64 - m) / s)
            .collect();
        Ok(Tensor::new(&[1, w], data)?)
    }

    /// Template row `[1, W]` to tokens `[N, D]`.
    pub fn tokens_graph(&self, g: &mut Graph, p: &Bound, m: Var) -> Result<StylePass> {
        let hp = &self.hp;
        if g.shape(m) != [1, hp.width()] {
            return Err(Error::Shape(format!(
                "style model expects a [1, {}] template, got {:?}",
                hp.width(),
                g.shape(m)
            )));
        }
        let mut c = Ctx { g, p, hp };
        // Tile the template over the token axis and tell the copies apart.
        let tiled = c.g.gather(m, &vec![0; hp.tokens])?;
        let pos = c.v("tcn.pos")?;
        let mut h = c.g.add(tiled, pos)?;
        for (i, &dil) in hp.tcn_dilations.iter().enumerate() {
            let (w, b) = (c.v(&format!("tcn.{i}.w"))?, c.v(&format!("tcn.{i}.b"))?);
            h = c.g.dilated_conv1d(h, w, Some(b), dil)?;
            if i + 1 < hp.tcn_dilations.len() {
                h = c.g.gelu(h)?;
            }
        }
        let tcn = h;
        let h = c.linear(tcn, "proj.0")?;
        let h = c.g.gelu(h)?;
        let projected = c.linear(h, "proj.1")?;

        let s = c.linear(m, "style.0")?;
        let s = c.g.gelu(s)?;
        let s = c.linear(s, "style.1")?;
        let s = c.g.gelu(s)?;

        let d = hp.latent_dim;
        let mut x = projected;
        let mut blocks = Vec::with_capacity(hp.layers);
        let mut modulation = Vec::with_capacity(hp.layers);
        for b in 0..hp.layers {
            let pre = format!("blocks.{b}");
            let cond = c.linear(s, &format!("{pre}.cond"))?;
            let mut part = |k: usize| c.g.slice_cols(cond, k * d, (k + 1) * d);
            let m = Modulation {
                gamma1: part(0)?,
                beta1: part(1)?,
                alpha1: part(2)?,
                gamma2: part(3)?,
                beta2: part(4)?,
                alpha2: part(5)?,
            };
            let y = c.adaln_block(x, &pre, &m)?;
            blocks.push((x, y));
            modulation.push(m);
            x = y;
        }
        let z_hat = c.linear(x, "head")?;
        let pos = c.v("head.pos")?;
        let z_hat = c.g.add(z_hat, pos)?;
        Ok(StylePass {
            tcn,
            projected,
            blocks,
            modulation,
            z_hat,
        })
    }

    /// Predicted latent tokens for a template.
    pub fn tokens(&self, template: &FaceMesh) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind(&self.params, false);
        let m = g.constant(self.template_input(template)?);
        let pass = self.tokens_graph(&mut g, &p, m)?;
        Ok(g.value(pass.z_hat).clone())
    }
}

/// Intermediate and output values of one style-blend training pass.
pub struct StyleBlendPass {
    pub style: StylePass,
    pub zq_pred: Var,
    pub b_pred: Var,
    pub indices: Vec<usize>,
    pub loss: Var,
}

/// Records the style-blend loss against ground-truth bases `b` and their
/// quantised codes `zq_target`, decoding through the frozen codebook
/// model bound in `cp`.
#[allow(clippy::too_many_arguments)]
pub fn styleblend_forward(
    style: &StyleBlendModel,
    codebook: &CodebookModel,
    g: &mut Graph,
    sp: &Bound,
    cp: &Bound,
    template: &Tensor,
    b: &Tensor,
    zq_target: &Tensor,
    indices: Option<&[usize]>,
) -> Result<StyleBlendPass> {
    let m = g.constant(template.clone());
    let pass = style.tokens_graph(g, sp, m)?;
    let cb = cp.var("codebook")?;
    let indices = match indices {
        Some(i) => i.to_vec(),
        None => quantize(g.value(cb), g.value(pass.z_hat))?.1,
    };
    let zq_pred = g.gather(cb, &indices)?;
    let zst = g.straight_through(pass.z_hat, zq_pred)?;
    let b_pred = codebook.decode_graph(g, cp, zst)?;
    let bv = g.constant(b.clone());
    let target = g.constant(zq_target.clone());
    let loss = styleblend_loss(g, bv, b_pred, pass.z_hat, target)?;
    Ok(StyleBlendPass {
        style: pass,
        zq_pred,
        b_pred,
        indices,
        loss,
    })
}

/// Full prediction: template to tokens, nearest codes, decoded bases.
pub struct Prediction {
    pub bases: AuBases,
    pub indices: Vec<usize>,
}

pub fn predict_basis(
    style: &StyleBlendModel,
    codebook: &CodebookModel,
    template: &FaceMesh,
    allow_untrained: bool,
) -> Result<Prediction> {
    if !style.trained && !allow_untrained {
        return Err(Error::Contract(
            "style model is untrained; pass allow_untrained to predict anyway".into(),
        ));
    }
    if style.hp.vertex_count != codebook.hp.vertex_count || style.hp.latent_dim != codebook.hp.latent_dim {
        return Err(Error::Shape("style and codebook models disagree on V or D".into()));
    }
    let z = style.tokens(template)?;
    let (zq, indices) = codebook.quantize(&z)?;
    Ok(Prediction {
        bases: codebook.decode(&zq)?,
        indices,
    })
}

/// A seeded random codebook-sized tensor in `[-1, 1]`, for tests.
pub fn random_tokens(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-1.0..1.0))
}
