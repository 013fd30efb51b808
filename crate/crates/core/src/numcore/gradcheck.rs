//! Central finite-difference verification of reverse-mode gradients.
//!
//! The numeric side only ever runs forward passes, so it shares nothing
//! with the backward rules it checks.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Upper bound on checked coordinates per input (all when `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            floor: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
    pub passed: bool,
}

/// Relative error with a denominator floor.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval(
    f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.input(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Compares gradients of the scalar `f(inputs)` against central differences.
pub fn check(
    name: &str,
    inputs: &[Tensor],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    check_with_graph(name, inputs, f, opts, Graph::new)
}

/// Like [`check`], but the analytic pass runs on a graph built by `make_graph`.
pub fn check_with_graph(
    name: &str,
    inputs: &[Tensor],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    opts: GradCheckOptions,
    make_graph: impl Fn() -> Graph,
) -> Result<GradCheckReport> {
    let mut g = make_graph();
    let vars = inputs
        .iter()
        .map(|t| g.input(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checked = 0;
    let mut max_rel_err: f64 = 0.0;
    let mut max_abs_grad: f64 = 0.0;
    for (which, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[which])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < t.len() => {
                let mut c = sample(&mut rng, t.len(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..t.len()).collect(),
        };
        for idx in coords {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[idx] += opts.step;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[idx] -= opts.step;
            let numeric = (eval(&f, &plus)? - eval(&f, &minus)?) / (2.0 * opts.step);
            max_rel_err = max_rel_err.max(rel_err(analytic[idx], numeric, opts.floor));
            max_abs_grad = max_abs_grad.max(analytic[idx].abs());
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        checked,
        max_rel_err,
        max_abs_grad,
        passed: max_rel_err < opts.rel_tol,
    })
}

/// Reduces a tensor-valued output to a scalar through a fixed random projection.
pub fn projection_probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = g.shape(out).to_vec();
    let r = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let r = g.constant(r)?;
    let prod = g.mul(out, r)?;
    g.mean(prod)
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}
