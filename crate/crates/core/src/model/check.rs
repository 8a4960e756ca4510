//! Full-model gradient checks against central finite differences.
//!
//! The analytic pass records its stop-gradient and straight-through
//! constants; every finite-difference evaluation replays them with the
//! codebook assignment held fixed, so the perturbed loss is the smooth
//! function whose gradient backward computes.

use aublend_autodiff::gradcheck::max_relative_error;
use aublend_autodiff::{Graph, ParamStore, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{styleblend_forward, CodebookModel, StyleBlendModel};
use crate::error::Result;

pub const STEP: f64 = 1e-5;
/// Gradient magnitude below which error is measured against the floor.
pub const FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Adds uniform noise in `[-scale, scale]` to every trainable parameter, so
/// zero-initialised gates and heads pass gradient to the layers behind them.
pub fn perturb(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let t = store.get_mut(&name).expect("name taken from the same store");
        for v in t.data_mut() {
            *v += rng.gen_range(-scale..=scale);
        }
    }
}

/// Coordinates to probe: all of them, or `limit` sampled without
/// replacement.
fn coordinates(len: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

fn compare(
    store: &mut ParamStore,
    analytic: &dyn Fn(&str) -> Option<Tensor>,
    limit: Option<usize>,
    seed: u64,
    loss: &dyn Fn(&ParamStore) -> Result<f64>,
) -> Result<Vec<ParamCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let len = store.get(&name)?.len();
        let grad = analytic(&name).unwrap_or_else(|| Tensor::zeros(store.get(&name).unwrap().shape()));
        let coords = coordinates(len, limit, &mut rng);
        let mut a = Vec::with_capacity(coords.len());
        let mut n = Vec::with_capacity(coords.len());
        for &i in &coords {
            let orig = store.get(&name)?.data()[i];
            store.get_mut(&name)?.data_mut()[i] = orig + STEP;
            let plus = loss(store)?;
            store.get_mut(&name)?.data_mut()[i] = orig - STEP;
            let minus = loss(store)?;
            store.get_mut(&name)?.data_mut()[i] = orig;
            a.push(grad.data()[i]);
            n.push((plus - minus) / (2.0 * STEP));
        }
        let k = coords.len();
        let err = max_relative_error(&Tensor::new(&[k], a)?, &Tensor::new(&[k], n)?, FLOOR);
        out.push(ParamCheck {
            name,
            checked: k,
            max_rel_err: err,
        });
    }
    Ok(out)
}

/// Checks the codebook loss against every trainable parameter of `model`
/// on normalised bases `b`.
pub fn check_codebook(model: &CodebookModel, b: &Tensor, limit: Option<usize>, seed: u64) -> Result<Vec<ParamCheck>> {
    let mut g = Graph::new();
    let p = g.bind(&model.params, true);
    let pass = model.forward(&mut g, &p, b, None)?;
    g.backward(pass.loss)?;
    let grads = p.grads(&mut g);
    let constants = g.into_constants();
    let indices = pass.indices;

    let loss = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::replaying(constants.clone());
        let p = g.bind(store, false);
        let pass = model.forward(&mut g, &p, b, Some(&indices))?;
        Ok(g.value(pass.loss).data()[0])
    };
    let mut store = model.params.clone();
    compare(&mut store, &|n| grads.get(n).cloned(), limit, seed, &loss)
}

/// Checks the style-blend loss against every trainable parameter of
/// `style`, with `codebook` frozen.
pub fn check_styleblend(
    style: &StyleBlendModel,
    codebook: &CodebookModel,
    template: &Tensor,
    b: &Tensor,
    zq_target: &Tensor,
    limit: Option<usize>,
    seed: u64,
) -> Result<Vec<ParamCheck>> {
    let mut g = Graph::new();
    let sp = g.bind(&style.params, true);
    let cp = g.bind(&codebook.params, false);
    let pass = styleblend_forward(style, codebook, &mut g, &sp, &cp, template, b, zq_target, None)?;
    g.backward(pass.loss)?;
    let grads = sp.grads(&mut g);
    let constants = g.into_constants();
    let indices = pass.indices;

    let loss = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::replaying(constants.clone());
        let sp = g.bind(store, false);
        let cp = g.bind(&codebook.params, false);
        let pass = styleblend_forward(
            style,
            codebook,
            &mut g,
            &sp,
            &cp,
            template,
            b,
            zq_target,
            Some(&indices),
        )?;
        Ok(g.value(pass.loss).data()[0])
    };
    let mut store = style.params.clone();
    compare(&mut store, &|n| grads.get(n).cloned(), limit, seed, &loss)
}

pub fn worst(checks: &[ParamCheck]) -> f64 {
    checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
}
