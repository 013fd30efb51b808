//! Source-only training and the three adaptation modes.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::model::{ForwardOutput, Trans4Pass};
use crate::mpa::{self, AdaptConfig, ClassSums, DomainBatch, LossParts, Objective, PrototypeBank};
use crate::numcore::{resize_bilinear, Graph, ParamId, ParamStore, Tensor};
use crate::panogeo::LabeledScene;
use crate::rng;

/// Random resize, horizontal flip and crop back to the training size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Resize ratio range.
    pub scale: [f64; 2],
    pub flip: bool,
    /// Random crop position; when off the window is centered.
    pub crop: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scale: [0.5, 2.0],
            flip: true,
            crop: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Poly schedule exponent.
    pub power: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    /// Scenes per domain per iteration.
    pub batch_size: usize,
    pub source_iters: usize,
    pub adapt_iters: usize,
    /// Linear ramp of the learning rate over the first iterations of each
    /// phase; 0 disables it.
    pub warmup_iters: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-5,
            power: 0.9,
            weight_decay: 1e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            batch_size: 2,
            source_iters: 300,
            adapt_iters: 300,
            warmup_iters: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 {} must be > 0", self.lr0));
        }
        if !(self.power > 0.0) {
            return bad(format!("power {} must be > 0", self.power));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) || !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("invalid AdamW settings".into());
        }
        let [lo, hi] = self.augment.scale;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("augment scale {:?} is not a positive range", self.augment.scale));
        }
        Ok(())
    }
}

/// [`poly_lr`] scaled by `(iter + 1) / warmup` during the first `warmup` iterations.
pub fn scheduled_lr(iter: usize, max_iter: usize, cfg: &TrainConfig) -> f64 {
    let lr = poly_lr(iter, max_iter, cfg.lr0, cfg.power);
    if iter < cfg.warmup_iters {
        lr * (iter + 1) as f64 / cfg.warmup_iters as f64
    } else {
        lr
    }
}

/// Adaptation objective, matching the ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdaptMode {
    #[serde(rename = "ssl")]
    Ssl,
    #[serde(rename = "mpa")]
    Mpa,
    #[serde(rename = "mpa+ssl")]
    MpaSsl,
}

impl AdaptMode {
    pub fn objective(self) -> Objective {
        Objective {
            ssl: self != AdaptMode::Mpa,
            mpa: self != AdaptMode::Ssl,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AdaptMode::Ssl => "ssl",
            AdaptMode::Mpa => "mpa",
            AdaptMode::MpaSsl => "mpa+ssl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ssl" => Ok(AdaptMode::Ssl),
            "mpa" => Ok(AdaptMode::Mpa),
            "mpa+ssl" | "ssl+mpa" => Ok(AdaptMode::MpaSsl),
            _ => Err(Error::Config(format!("unknown adaptation mode {s:?}"))),
        }
    }
}

/// `lr0·(1 − iter/max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, lr0: f64, power: f64) -> f64 {
    if max_iter == 0 {
        return lr0;
    }
    let frac = 1.0 - iter.min(max_iter) as f64 / max_iter as f64;
    lr0 * frac.powf(power)
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
/// Parameters without a gradient entry are left untouched.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[(ParamId, Vec<f64>)],
    state: &mut AdamW,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (id, g) in grads {
        let i = id.index();
        let p = params.get_mut(*id).data_mut();
        if g.len() != p.len() || state.m[i].len() != p.len() {
            return Err(Error::Shape(format!("gradient of length {} for {} values", g.len(), p.len())));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            p[j] -= lr * cfg.weight_decay * p[j];
            p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

fn flip_image(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (w, c) = (s[1], s[2]);
    let d = t.data();
    Tensor::from_fn(s, |i| {
        let (y, x, k) = (i / (w * c), (i / c) % w, i % c);
        d[(y * w + (w - 1 - x)) * c + k]
    })
}

fn flip_labels(l: &LabelMap) -> LabelMap {
    let mut out = l.clone();
    for y in 0..l.height {
        for x in 0..l.width {
            out.set(y, x, l.get(y, l.width - 1 - x));
        }
    }
    out
}

/// Horizontal mirror of a scene.
pub fn flip(scene: &LabeledScene) -> LabeledScene {
    LabeledScene {
        image: flip_image(&scene.image),
        labels: scene.labels.as_ref().map(flip_labels),
        ..scene.clone()
    }
}

/// Cuts an `h×w` window at `(top, left)` (may be negative or overhang);
/// uncovered pixels become 0 in the image and [`IGNORE`] in the labels.
fn window(scene: &LabeledScene, top: isize, left: isize, h: usize, w: usize) -> LabeledScene {
    let (sh, sw) = (scene.height() as isize, scene.width() as isize);
    let src = scene.image.data();
    let mut img = vec![0.0; h * w * 3];
    let mut lab = vec![IGNORE; h * w];
    for y in 0..h {
        let sy = top + y as isize;
        if sy < 0 || sy >= sh {
            continue;
        }
        for x in 0..w {
            let sx = left + x as isize;
            if sx < 0 || sx >= sw {
                continue;
            }
            let si = (sy * sw + sx) as usize;
            img[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&src[si * 3..si * 3 + 3]);
            if let Some(l) = &scene.labels {
                lab[y * w + x] = l.data[si];
            }
        }
    }
    LabeledScene {
        image: Tensor::new(&[h, w, 3], img).expect("sized buffer"),
        labels: scene.labels.as_ref().map(|_| LabelMap::new(h, w, lab).expect("sized buffer")),
        ..scene.clone()
    }
}

/// Random resize (bilinear image, nearest labels), optional flip, then a
/// crop back to the scene's own size, padding with ignore where needed.
pub fn augment(scene: &LabeledScene, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<LabeledScene> {
    if !cfg.enabled {
        return Ok(scene.clone());
    }
    let (h, w) = (scene.height(), scene.width());
    let ratio = if cfg.scale[0] < cfg.scale[1] {
        rng.gen_range(cfg.scale[0]..=cfg.scale[1])
    } else {
        cfg.scale[0]
    };
    let (rh, rw) = (
        ((h as f64 * ratio).round() as usize).max(1),
        ((w as f64 * ratio).round() as usize).max(1),
    );
    let mut out = if (rh, rw) == (h, w) {
        scene.clone()
    } else {
        LabeledScene {
            image: resize_bilinear(&scene.image, rh, rw)?,
            labels: scene.labels.as_ref().map(|l| l.resize_nearest(rh, rw)),
            ..scene.clone()
        }
    };
    if cfg.flip && rng.gen_bool(0.5) {
        out = flip(&out);
    }
    let pick = |rng: &mut ChaCha8Rng, have: usize, want: usize| -> isize {
        let slack = have as isize - want as isize;
        if !cfg.crop || slack == 0 {
            slack / 2
        } else if slack > 0 {
            rng.gen_range(0..=slack)
        } else {
            -rng.gen_range(0..=-slack)
        }
    };
    let top = pick(rng, rh, h);
    let left = pick(rng, rw, w);
    if (rh, rw) == (h, w) && top == 0 && left == 0 {
        return Ok(out);
    }
    Ok(window(&out, top, left, h, w))
}

/// One JSON-lines training log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss_seg: f64,
    pub loss_ssl: Option<f64>,
    pub loss_mpa_s: Option<f64>,
    pub loss_mpa_t: Option<f64>,
    pub total: f64,
}

impl LogRecord {
    fn new(iter: usize, lr: f64, p: &LossParts) -> Self {
        Self {
            iter,
            lr,
            loss_seg: p.seg,
            loss_ssl: p.ssl,
            loss_mpa_s: p.mpa_s,
            loss_mpa_t: p.mpa_t,
            total: p.total,
        }
    }
}

/// Shuffled passes over a split, drawn from its own random stream.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

struct Feed<'a> {
    scenes: &'a [LabeledScene],
    sampler: Sampler,
    aug: ChaCha8Rng,
}

impl<'a> Feed<'a> {
    fn new(scenes: &'a [LabeledScene], seed: u64, split: &str) -> Self {
        Self {
            scenes,
            sampler: Sampler::new(scenes.len(), rng::stream(seed, &format!("data/{split}"))),
            aug: rng::stream(seed, &format!("augment/{split}")),
        }
    }

    fn batch(&mut self, n: usize, cfg: &AugmentConfig) -> Result<Vec<LabeledScene>> {
        (0..n)
            .map(|_| augment(&self.scenes[self.sampler.next()], cfg, &mut self.aug))
            .collect()
    }
}

fn forward_all(model: &Trans4Pass, g: &mut Graph, scenes: &[LabeledScene]) -> Result<Vec<ForwardOutput>> {
    scenes
        .iter()
        .map(|s| {
            let x = g.constant(s.image.clone())?;
            model.forward(g, x)
        })
        .collect()
}

fn write_record(log: &mut dyn Write, rec: &LogRecord) -> Result<()> {
    serde_json::to_writer(&mut *log, rec)?;
    log.write_all(b"\n")?;
    Ok(())
}

fn check_labeled(scenes: &[LabeledScene], what: &str) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::Data(format!("{what} split is empty")));
    }
    if let Some(s) = scenes.iter().find(|s| s.labels.is_none()) {
        return Err(Error::Data(format!("{what} scene {} has no labels", s.id)));
    }
    Ok(())
}

/// Minimizes the source segmentation loss for `cfg.source_iters` iterations.
pub fn train_source(
    model: &mut Trans4Pass,
    source: &[LabeledScene],
    cfg: &TrainConfig,
    seed: u64,
    log: &mut dyn Write,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    check_labeled(source, "source")?;
    let mut feed = Feed::new(source, seed, "source");
    let mut opt = AdamW::new(&model.params);
    let mut records = Vec::with_capacity(cfg.source_iters);
    for it in 0..cfg.source_iters {
        let lr = scheduled_lr(it, cfg.source_iters, cfg);
        let batch = feed.batch(cfg.batch_size, &cfg.augment)?;
        let mut g = Graph::new();
        let outs = forward_all(model, &mut g, &batch)?;
        let labels: Vec<LabelMap> = batch.iter().map(|s| s.labels().cloned()).collect::<Result<_>>()?;
        let src = DomainBatch { outputs: &outs, labels: &labels };
        let tgt = DomainBatch { outputs: &[], labels: &[] };
        let none = Objective { ssl: false, mpa: false };
        let (loss, parts) = mpa::total_loss(&mut g, &src, &tgt, None, &AdaptConfig::default(), none)?;
        let grads = g.backward(loss)?;
        adamw_step(&mut model.params, &g.param_grads(&grads), &mut opt, lr, cfg)?;
        let rec = LogRecord::new(it, lr, &parts);
        write_record(log, &rec)?;
        records.push(rec);
    }
    Ok(records)
}

/// Adds a batch's fused embeddings to `sums` under labels resampled to the fused grid.
fn add_batch_sums(g: &Graph, outs: &[ForwardOutput], labels: &[LabelMap], sums: &mut ClassSums) -> Result<()> {
    for (o, y) in outs.iter().zip(labels) {
        let f = g.value(o.decoded.fused);
        let s = f.shape();
        sums.add(f, &mpa::labels_at(y, s[0], s[1]))?;
    }
    Ok(())
}

/// Continues training on paired source/target batches under `mode`.
///
/// Target pseudo-labels come from the current model on every iteration. In
/// the MPA modes the bank first absorbs the batch (both domains, one EMA
/// step) and then provides the distillation targets. The optimizer starts
/// from fresh state.
#[allow(clippy::too_many_arguments)]
pub fn adapt(
    model: &mut Trans4Pass,
    mut bank: Option<&mut PrototypeBank>,
    source: &[LabeledScene],
    target: &[LabeledScene],
    cfg: &TrainConfig,
    acfg: &AdaptConfig,
    mode: AdaptMode,
    seed: u64,
    log: &mut dyn Write,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    acfg.validate()?;
    check_labeled(source, "source")?;
    if target.is_empty() {
        return Err(Error::Data("target split is empty".into()));
    }
    let objective = mode.objective();
    if objective.mpa && bank.is_none() {
        return Err(Error::Config(format!(
            "mode {} needs a prototype bank; run init-bank first",
            mode.name()
        )));
    }
    let mut src_feed = Feed::new(source, seed, "adapt/source");
    let mut tgt_feed = Feed::new(target, seed, "adapt/target");
    let mut opt = AdamW::new(&model.params);
    let mut records = Vec::with_capacity(cfg.adapt_iters);
    for it in 0..cfg.adapt_iters {
        let lr = scheduled_lr(it, cfg.adapt_iters, cfg);
        let sb = src_feed.batch(cfg.batch_size, &cfg.augment)?;
        let tb = tgt_feed.batch(cfg.batch_size, &cfg.augment)?;
        let mut g = Graph::new();
        let souts = forward_all(model, &mut g, &sb)?;
        let touts = forward_all(model, &mut g, &tb)?;
        let slabels: Vec<LabelMap> = sb.iter().map(|s| s.labels().cloned()).collect::<Result<_>>()?;
        let pseudo: Vec<LabelMap> = touts
            .iter()
            .map(|o| mpa::pseudo_label(g.value(o.logits), acfg.threshold))
            .collect();
        if objective.mpa {
            let b = bank.as_deref_mut().expect("checked above");
            let mut sums = ClassSums::new(b.classes(), b.channels());
            add_batch_sums(&g, &souts, &slabels, &mut sums)?;
            add_batch_sums(&g, &touts, &pseudo, &mut sums)?;
            b.update(&sums)?;
        }
        let src = DomainBatch { outputs: &souts, labels: &slabels };
        let tgt = DomainBatch { outputs: &touts, labels: &pseudo };
        let (loss, parts) = mpa::total_loss(&mut g, &src, &tgt, bank.as_deref(), acfg, objective)?;
        let grads = g.backward(loss)?;
        adamw_step(&mut model.params, &g.param_grads(&grads), &mut opt, lr, cfg)?;
        let rec = LogRecord::new(it, lr, &parts);
        write_record(log, &rec)?;
        records.push(rec);
    }
    Ok(records)
}
