//! Finite-difference gradient suite over every differentiable building block.
//!
//! Each entry runs on five randomly drawn shapes. Sampling coordinates are
//! kept away from integer grid lines, where bilinear interpolation has kinks.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{DeformableMlp, PatchEmbed, PatchEmbedConfig};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::model::{ModelConfig, Trans4Pass};
use crate::mpa::{self, AdaptConfig};
use crate::numcore::gradcheck::{check_with_graph, projection_probe, random_tensor, GradCheckOptions, GradCheckReport};
use crate::numcore::{Border, Graph, ParamStore, Tensor, Var};
use crate::rng;

/// How much of the stack to check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Individual tensor operations.
    Op,
    /// DPE, DMLP and the adaptation loss.
    Module,
    /// End-to-end probe through the whole network.
    Model,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "module" => Ok(Scope::Module),
            "model" => Ok(Scope::Model),
            _ => Err(Error::Config(format!("unknown gradcheck scope {s:?}"))),
        }
    }
}

/// Result of one named check over all its shapes.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub shapes: Vec<Vec<usize>>,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    pub seconds: f64,
}

/// Shapes drawn per entry.
pub const SHAPES_PER_CHECK: usize = 5;

/// Runs the checks of `scope`. With `fault` set, the bilinear coordinate
/// gradient is sign-flipped, which the suite must report.
pub fn run(scope: Scope, fault: bool) -> Result<Vec<SuiteEntry>> {
    let mut suite = Suite {
        rng: rng::stream(0, "gradcheck"),
        fault,
        entries: Vec::new(),
    };
    match scope {
        Scope::Op => ops(&mut suite)?,
        Scope::Module => modules(&mut suite)?,
        Scope::Model => model(&mut suite)?,
    }
    Ok(suite.entries)
}

struct Suite {
    rng: ChaCha8Rng,
    fault: bool,
    entries: Vec<SuiteEntry>,
}

type Case = (Vec<usize>, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

impl Suite {
    /// Checks `make(rng)` for [`SHAPES_PER_CHECK`] random draws.
    fn entry(&mut self, name: &str, opts: GradCheckOptions, mut make: impl FnMut(&mut ChaCha8Rng) -> Case) -> Result<()> {
        let t0 = Instant::now();
        let mut e = SuiteEntry {
            name: name.to_string(),
            shapes: vec![],
            checked: 0,
            max_rel_err: 0.0,
            passed: true,
            seconds: 0.0,
        };
        for i in 0..SHAPES_PER_CHECK {
            let (shape, inputs, f) = make(&mut self.rng);
            let fault = self.fault;
            let rep: GradCheckReport = check_with_graph(
                name,
                &inputs,
                f,
                GradCheckOptions { seed: i as u64, ..opts },
                || {
                    let mut g = Graph::new();
                    if fault {
                        g.inject_bilinear_sign_fault();
                    }
                    g
                },
            )?;
            e.shapes.push(shape);
            e.checked += rep.checked;
            e.max_rel_err = e.max_rel_err.max(rep.max_rel_err);
            e.passed &= rep.passed;
        }
        e.seconds = t0.elapsed().as_secs_f64();
        self.entries.push(e);
        Ok(())
    }
}

fn dim(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.gen_range(lo..=hi)
}

/// A value in `[lo, hi)` at least `1e-3` from any integer.
fn fractional(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    loop {
        let v = r.gen_range(lo..hi);
        if (v - v.round()).abs() > 1e-3 {
            return v;
        }
    }
}

fn probe(seed: u64) -> impl Fn(&mut Graph, Var) -> Result<Var> {
    move |g, v| projection_probe(g, v, seed)
}

fn ops(s: &mut Suite) -> Result<()> {
    let o = GradCheckOptions::default();
    s.entry("matmul", o, |r| {
        let (m, k, n) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 5));
        let p = probe(r.gen());
        (
            vec![m, k, n],
            vec![random_tensor(&[m, k], -1.0, 1.0, r), random_tensor(&[k, n], -1.0, 1.0, r)],
            Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                p(g, y)
            }),
        )
    })?;
    s.entry("softmax", o, |r| {
        let shape = vec![dim(r, 1, 4), dim(r, 1, 4), dim(r, 2, 5)];
        let axis = r.gen_range(0..3);
        let p = probe(r.gen());
        (
            shape.clone(),
            vec![random_tensor(&shape, -3.0, 3.0, r)],
            Box::new(move |g, v| {
                let y = g.softmax(v[0], axis)?;
                p(g, y)
            }),
        )
    })?;
    s.entry("layernorm", o, |r| {
        let (n, c) = (dim(r, 1, 5), dim(r, 2, 6));
        let p = probe(r.gen());
        (
            vec![n, c],
            vec![
                random_tensor(&[n, c], -2.0, 2.0, r),
                random_tensor(&[c], 0.5, 1.5, r),
                random_tensor(&[c], -0.5, 0.5, r),
            ],
            Box::new(move |g, v| {
                let y = g.layernorm(v[0], v[1], v[2], 1e-6)?;
                p(g, y)
            }),
        )
    })?;
    s.entry("gelu", o, |r| {
        let shape = vec![dim(r, 1, 4), dim(r, 1, 6)];
        let p = probe(r.gen());
        (
            shape.clone(),
            vec![random_tensor(&shape, -3.0, 3.0, r)],
            Box::new(move |g, v| {
                let y = g.gelu(v[0])?;
                p(g, y)
            }),
        )
    })?;
    for (name, border) in [
        ("bilinear_sample", Border::Clamp),
        ("bilinear_sample_wrap", Border::WrapHorizontal),
    ] {
        s.entry(name, o, |r| {
            let (h, w, c, n) = (dim(r, 2, 5), dim(r, 2, 6), dim(r, 1, 3), dim(r, 3, 8));
            let coords = Tensor::from_fn(&[n, 2], |i| {
                let hi = if i % 2 == 0 { h } else { w } as f64;
                fractional(r, -0.8, hi - 0.2)
            });
            let p = probe(r.gen());
            (
                vec![h, w, c, n],
                vec![random_tensor(&[h, w, c], -1.0, 1.0, r), coords],
                Box::new(move |g, v| {
                    let y = g.bilinear_sample(v[0], v[1], border)?;
                    p(g, y)
                }),
            )
        })?;
    }
    s.entry("upsample_bilinear", o, |r| {
        let (h, w, c) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 3));
        let (oh, ow) = (dim(r, 1, 9), dim(r, 1, 9));
        let p = probe(r.gen());
        (
            vec![h, w, c, oh, ow],
            vec![random_tensor(&[h, w, c], -1.0, 1.0, r)],
            Box::new(move |g, v| {
                let y = g.upsample_bilinear(v[0], oh, ow)?;
                p(g, y)
            }),
        )
    })?;
    s.entry("unfold", o, |r| {
        let (k, stride) = (dim(r, 1, 3), dim(r, 1, 2));
        let (h, w, c) = (stride * dim(r, 1, 3), stride * dim(r, 1, 3), dim(r, 1, 2));
        let border = [Border::Zero, Border::Clamp, Border::WrapHorizontal][r.gen_range(0..3)];
        let p = probe(r.gen());
        (
            vec![h, w, c, k, stride],
            vec![random_tensor(&[h, w, c], -1.0, 1.0, r)],
            Box::new(move |g, v| {
                let y = g.unfold(v[0], k, stride, k / 2, border)?;
                p(g, y)
            }),
        )
    })?;
    s.entry("cross_entropy", o, |r| {
        let (n, k) = (dim(r, 2, 8), dim(r, 2, 5));
        let labels: Vec<u8> = (0..n)
            .map(|_| if r.gen_bool(0.2) { IGNORE } else { r.gen_range(0..k as u8) })
            .collect();
        (
            vec![n, k],
            vec![random_tensor(&[n, k], -3.0, 3.0, r)],
            Box::new(move |g, v| g.cross_entropy(v[0], &labels, IGNORE)),
        )
    })?;
    s.entry("kl_div", o, |r| {
        let (n, k) = (dim(r, 1, 6), dim(r, 2, 5));
        let mask: Vec<bool> = (0..n).map(|_| r.gen_bool(0.8)).collect();
        (
            vec![n, k],
            vec![random_tensor(&[n, k], -2.0, 2.0, r), random_tensor(&[n, k], -2.0, 2.0, r)],
            Box::new(move |g, v| {
                let a = g.softmax(v[0], 1)?;
                let b = g.softmax(v[1], 1)?;
                g.kl_div(a, b, Some(&mask))
            }),
        )
    })?;
    s.entry("clamp", o, |r| {
        let n = dim(r, 2, 10);
        let x = Tensor::from_fn(&[n, 2], |_| loop {
            let v: f64 = r.gen_range(-3.0..3.0);
            if (v.abs() - 1.0).abs() > 1e-3 {
                break v;
            }
        });
        let p = probe(r.gen());
        (
            vec![n, 2],
            vec![x],
            Box::new(move |g, v| {
                let y = g.clamp(v[0], &[-1.0, -1.0], &[1.0, 1.0])?;
                p(g, y)
            }),
        )
    })?;
    Ok(())
}

fn randomize(store: &mut ParamStore, contains: &str, scale: f64, r: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).contains(contains)).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
}

fn modules(s: &mut Suite) -> Result<()> {
    let o = GradCheckOptions::default();
    s.entry("dpe", o, |r| {
        let patch = [2, 3, 4][r.gen_range(0..3)];
        let stride = dim(r, 1, 2);
        let (h, w, c_in, c_out) = (stride * dim(r, 2, 3), stride * dim(r, 2, 4), dim(r, 1, 3), dim(r, 2, 4));
        let mut store = ParamStore::new();
        let mut init = rng::stream(r.gen(), "dpe");
        let pe = PatchEmbed::new(&mut store, "pe", PatchEmbedConfig::new(patch, stride, c_in, c_out), &mut init)
            .expect("valid config");
        let (ho, wo) = (h / stride, w / stride);
        let offsets = Tensor::from_fn(&[ho * wo, patch * patch, 2], |_| fractional(r, -0.9, 0.9));
        let p = probe(r.gen());
        (
            vec![h, w, c_in, patch, stride],
            vec![random_tensor(&[h, w, c_in], -1.0, 1.0, r), offsets],
            Box::new(move |g, v| {
                let y = pe.deformable_with(g, &store, v[0], v[1])?;
                p(g, y)
            }),
        )
    })?;
    s.entry("dpe_with_predictor", o, |r| {
        let (h, w, c_in) = (2 * dim(r, 2, 3), 2 * dim(r, 2, 3), dim(r, 1, 2));
        let mut store = ParamStore::new();
        let mut init = rng::stream(r.gen(), "dpe");
        let pe = PatchEmbed::new(&mut store, "pe", PatchEmbedConfig::new(3, 2, c_in, 3), &mut init)
            .expect("valid config");
        randomize(&mut store, ".offset.", 0.4, r);
        let p = probe(r.gen());
        (
            vec![h, w, c_in],
            vec![random_tensor(&[h, w, c_in], -1.0, 1.0, r)],
            Box::new(move |g, v| {
                let y = pe.forward(g, &store, v[0])?;
                p(g, y)
            }),
        )
    })?;
    s.entry("dmlp", o, |r| {
        let (h, w, c_in, c_out) = (dim(r, 2, 4), dim(r, 2, 5), dim(r, 1, 4), dim(r, 1, 4));
        let mut store = ParamStore::new();
        let mut init = rng::stream(r.gen(), "dmlp");
        let m = DeformableMlp::new(&mut store, "dmlp", c_in, c_out, 4.0, Border::Clamp, &mut init);
        let offsets = Tensor::from_fn(&[h * w, c_in, 2], |_| fractional(r, -1.5, 1.5));
        let p = probe(r.gen());
        (
            vec![h, w, c_in, c_out],
            vec![random_tensor(&[h, w, c_in], -1.0, 1.0, r), offsets],
            Box::new(move |g, v| {
                let y = m.mix_with(g, &store, v[0], v[1])?;
                p(g, y)
            }),
        )
    })?;
    s.entry("dmlp_with_predictor", o, |r| {
        let (h, w, c) = (dim(r, 3, 5), dim(r, 3, 5), dim(r, 1, 3));
        let mut store = ParamStore::new();
        let mut init = rng::stream(r.gen(), "dmlp");
        let m = DeformableMlp::new(&mut store, "dmlp", c, c, 2.0, Border::Clamp, &mut init);
        randomize(&mut store, ".offset.", 0.4, r);
        let p = probe(r.gen());
        (
            vec![h, w, c],
            vec![random_tensor(&[h, w, c], -1.0, 1.0, r)],
            Box::new(move |g, v| {
                let y = m.forward(g, &store, v[0])?;
                p(g, y)
            }),
        )
    })?;
    s.entry("mpa_loss", o, |r| {
        let (h, w, k) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 2, 4));
        let c = k + dim(r, 0, 2);
        let labels = LabelMap::new(h, w, (0..h * w).map(|_| r.gen_range(0..k as u8)).collect()).unwrap();
        let mut bank = mpa::PrototypeBank::new(k, c, 0.999);
        bank.prototypes = random_tensor(&[k, c], -2.0, 2.0, r);
        bank.initialized = vec![true; k];
        let (fhat, mask) = bank.prototypical_map(&labels);
        let cfg = AdaptConfig {
            temperature: r.gen_range(1.0..20.0),
            ..AdaptConfig::default()
        };
        (
            vec![h, w, c],
            vec![random_tensor(&[h, w, c], -2.0, 2.0, r)],
            Box::new(move |g, v| mpa::mpa_loss(g, v[0], &fhat, &mask, &labels, &cfg)),
        )
    })?;
    Ok(())
}

fn model(s: &mut Suite) -> Result<()> {
    let o = GradCheckOptions {
        max_coords: Some(12),
        floor: 1e-6,
        ..GradCheckOptions::default()
    };
    let sizes = [(32, 32), (32, 64), (64, 32), (32, 96), (64, 64)];
    let mut next = 0;
    s.entry("model_probe", o, |r| {
        let (h, w) = sizes[next % sizes.len()];
        next += 1;
        let mut m = Trans4Pass::new(ModelConfig::nano(3), r.gen()).expect("nano config");
        randomize(&mut m.params, ".offset.", 0.05, r);
        // two-pixel loss: one logit up, another down
        let (a, b) = ((r.gen_range(0..h), r.gen_range(0..w)), (r.gen_range(0..h), r.gen_range(0..w)));
        let weights = Tensor::from_fn(&[h, w, 3], |i| {
            if i == (a.0 * w + a.1) * 3 + 1 {
                1.0
            } else if i == (b.0 * w + b.1) * 3 + 2 {
                -0.5
            } else {
                0.0
            }
        });
        (
            vec![h, w, 3],
            vec![random_tensor(&[h, w, 3], 0.0, 1.0, r)],
            Box::new(move |g, v| {
                let out = m.forward(g, v[0])?;
                let wv = g.constant(weights.clone())?;
                let y = g.mul(out.logits, wv)?;
                g.mean(y)
            }),
        )
    })?;
    Ok(())
}
