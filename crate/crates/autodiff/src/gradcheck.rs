//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the workspace.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{mhsa, AttentionWeights};
use crate::tensor::Tensor;

/// Step used by [`op_error`].
pub const STEP: f64 = 1e-5;
/// Gradient magnitude below which [`op_error`] measures error against the
/// floor instead.
pub const FLOOR: f64 = 1e-3;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `at`.
pub fn central_difference(at: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let mut out = Vec::with_capacity(at.len());
    let mut probe = at.clone();
    for i in 0..at.len() {
        let orig = at.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(at.shape(), out)
}

/// Element-wise `|a - n| / max(|a|, |n|, floor)`, maximised.
///
/// The floor keeps gradients that are analytically zero (e.g. a key bias
/// under softmax shift invariance), which only ever see finite-difference
/// rounding noise, from dividing that noise by itself.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Reduces an op's output with a fixed random projection so every output
/// element contributes a generic weight to the scalar.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::rand_uniform(g.shape(out), -1.0, 1.0, &mut rng);
    let r = g.constant(r);
    let p = g.hadamard(out, r)?;
    g.sum(p)
}

/// Records an op over leaves built from `inputs`.
pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Worst relative error between the analytic gradient of a random
/// projection of `build(inputs)` and its central difference, over every
/// input element.
pub fn op_error(inputs: &[Tensor], build: &Build) -> Result<f64> {
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars)?;
        let l = project(&mut g, out, 99)?;
        Ok(g.value(l).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let l = project(&mut g, out, 99)?;
    g.backward(l)?;

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let numeric = central_difference(&inputs[k], STEP, |probe| {
            let mut vals = inputs.to_vec();
            vals[k] = probe.clone();
            eval(&vals)
        })?;
        worst = worst.max(max_relative_error(&analytic, &numeric, FLOOR));
    }
    Ok(worst)
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
}

/// [`op_error`] for every differentiable op on small random inputs.
pub fn op_suite() -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    let mut run = |name: &'static str, ins: &[Tensor], build: &Build| -> Result<()> {
        out.push((name, op_error(ins, build)?));
        Ok(())
    };
    run("matmul", &[rand(&[3, 4], 1), rand(&[4, 2], 2)], &|g, v| {
        g.matmul(v[0], v[1])
    })?;

    let ins = [rand(&[2, 3], 5), rand(&[2, 3], 6)];
    run("add", &ins, &|g, v| g.add(v[0], v[1]))?;
    run("sub", &ins, &|g, v| g.sub(v[0], v[1]))?;
    run("hadamard", &ins, &|g, v| g.hadamard(v[0], v[1]))?;
    run("scale", &ins[..1], &|g, v| g.scale(v[0], -2.5))?;
    run("square", &ins[..1], &|g, v| g.square(v[0]))?;
    run("abs", &ins[..1], &|g, v| g.abs(v[0]))?;
    run("gelu", &ins[..1], &|g, v| g.gelu(v[0]))?;

    let ins = [rand(&[4, 3], 7), rand(&[3], 8)];
    run("add_row", &ins, &|g, v| g.add_row(v[0], v[1]))?;
    run("mul_row", &ins, &|g, v| g.mul_row(v[0], v[1]))?;

    let (a, b, c) = (rand(&[3, 4], 9), rand(&[3, 2], 10), rand(&[2, 4], 11));
    run("transpose", &[a.clone()], &|g, v| g.transpose(v[0]))?;
    run("reshape", &[a.clone()], &|g, v| g.reshape(v[0], &[2, 6]))?;
    run("concat_cols", &[a.clone(), b], &|g, v| g.concat(&[v[0], v[1]], 1))?;
    run("concat_rows", &[a.clone(), c], &|g, v| g.concat(&[v[0], v[1]], 0))?;
    run("slice_cols", &[a.clone()], &|g, v| g.slice_cols(v[0], 1, 3))?;
    run("slice_rows", &[a.clone()], &|g, v| g.slice_rows(v[0], 1, 3))?;
    run("sum", &[a.clone()], &|g, v| g.sum(v[0]))?;
    run("mean", &[a], &|g, v| g.mean(v[0]))?;

    run("softmax", &[rand(&[3, 5], 12)], &|g, v| g.softmax(v[0]))?;
    let ins = [rand(&[4, 6], 13), rand(&[6], 14), rand(&[6], 15)];
    run("layer_norm", &ins, &|g, v| {
        g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)
    })?;
    run("layer_norm_plain", &ins[..1], &|g, v| {
        g.layer_norm(v[0], None, None, 1e-5)
    })?;

    let ins = [rand(&[7, 3], 16), rand(&[3, 3, 2], 17), rand(&[2], 18)];
    for (name, dilation) in [("conv_d1", 1), ("conv_d2", 2), ("conv_d3", 3)] {
        run(name, &ins, &move |g, v| {
            g.dilated_conv1d(v[0], v[1], Some(v[2]), dilation)
        })?;
    }
    let ins = [rand(&[3, 4], 19), rand(&[3, 4, 2], 20), rand(&[3, 2], 21)];
    run("token_linear", &ins, &|g, v| g.token_linear(v[0], v[1], Some(v[2])))?;
    run("gather", &[rand(&[4, 3], 22)], &|g, v| g.gather(v[0], &[2, 0, 2, 3]))?;

    let d = 4;
    let mut ins = vec![rand(&[3, d], 23)];
    for i in 0..8 {
        let shape: &[usize] = if i % 2 == 0 { &[d, d] } else { &[d] };
        ins.push(rand(shape, 30 + i as u64));
    }
    run("mhsa", &ins, &|g, v| {
        let w = AttentionWeights {
            wq: v[1],
            bq: v[2],
            wk: v[3],
            bk: v[4],
            wv: v[5],
            bv: v[6],
            wo: v[7],
            bo: v[8],
        };
        mhsa(g, v[0], &w, 2)
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let at = Tensor::new(&[2], vec![0.5, -2.0]).unwrap();
        let d = central_difference(&at, 1e-5, |x| Ok(x.data().iter().map(|v| v * v * v).sum())).unwrap();
        let exact = at.map(|v| 3.0 * v * v);
        assert!(max_relative_error(&exact, &d, 1e-3) < 1e-9);
    }
}
