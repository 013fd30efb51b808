//! Mutual prototypical adaptation.
//!
//! Class prototypes are mean fused embeddings pooled over both domains
//! (source ground truth, target pseudo-labels) and kept up to date with an
//! exponential moving average. Each pixel's prototype, stacked into a map,
//! is a soft distillation target for the fused features.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::model::{argmax_map, ForwardOutput, Trans4Pass};
use crate::numcore::{Graph, Tensor, Var};
use crate::panogeo::LabeledScene;

/// Adaptation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Softening temperature `T` of the distillation term.
    pub temperature: f64,
    /// Weight `λ` between the KL and CE terms.
    pub lambda: f64,
    /// Weight `α` of both MPA losses in the total objective.
    pub alpha: f64,
    /// Prototype momentum `m`.
    pub momentum: f64,
    /// Pixels whose top softmax probability falls below this become ignore.
    pub threshold: Option<f64>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            temperature: 20.0,
            lambda: 0.9,
            alpha: 0.001,
            momentum: 0.999,
            threshold: None,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be > 0", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha {} must be >= 0", self.alpha));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return bad(format!("momentum {} outside (0, 1)", self.momentum));
        }
        Ok(())
    }
}

/// Argmax class per pixel; with a threshold, unconfident pixels become [`IGNORE`].
pub fn pseudo_label(logits: &Tensor, threshold: Option<f64>) -> LabelMap {
    argmax_map(logits, threshold)
}

/// Per-class sums and pixel counts of an embedding map.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSums {
    pub channels: usize,
    pub sums: Vec<f64>,
    pub counts: Vec<u64>,
}

impl ClassSums {
    pub fn new(classes: usize, channels: usize) -> Self {
        Self {
            channels,
            sums: vec![0.0; classes * channels],
            counts: vec![0; classes],
        }
    }

    /// Adds every pixel of `emb: [h, w, C]` under its label; labels must match `h×w`.
    pub fn add(&mut self, emb: &Tensor, labels: &LabelMap) -> Result<()> {
        let s = emb.shape();
        if s.len() != 3 || s[2] != self.channels || [s[0], s[1]] != [labels.height, labels.width] {
            return Err(Error::Shape(format!(
                "embedding {s:?} vs labels {}x{} and {} channels",
                labels.height, labels.width, self.channels
            )));
        }
        let c = self.channels;
        for (row, &l) in emb.data().chunks_exact(c).zip(&labels.data) {
            let k = l as usize;
            if l == IGNORE || k >= self.counts.len() {
                continue;
            }
            self.counts[k] += 1;
            for (a, v) in self.sums[k * c..(k + 1) * c].iter_mut().zip(row) {
                *a += v;
            }
        }
        Ok(())
    }

    /// Mean embedding of class `k`, if any pixel carried it.
    pub fn mean(&self, k: usize) -> Option<Vec<f64>> {
        let n = self.counts[k];
        let c = self.channels;
        (n > 0).then(|| self.sums[k * c..(k + 1) * c].iter().map(|s| s / n as f64).collect())
    }
}

/// The mutual prototype memory `{P_1..P_K}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// `[K, C_emb]`.
    pub prototypes: Tensor,
    pub momentum: f64,
    pub initialized: Vec<bool>,
    pub update_count: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassState {
    initialized: bool,
    update_count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankIndex {
    momentum: f64,
    classes: BTreeMap<String, ClassState>,
}

const BANK_TENSOR: &str = "prototypes.pdt";
const BANK_INDEX: &str = "bank.json";

impl PrototypeBank {
    pub fn new(classes: usize, channels: usize, momentum: f64) -> Self {
        Self {
            prototypes: Tensor::zeros(&[classes, channels]),
            momentum,
            initialized: vec![false; classes],
            update_count: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.initialized.len()
    }

    pub fn channels(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn prototype(&self, k: usize) -> &[f64] {
        let c = self.channels();
        &self.prototypes.data()[k * c..(k + 1) * c]
    }

    /// Sets every class seen in `sums` to its mean; other classes stay uninitialized.
    pub fn from_sums(sums: &ClassSums, momentum: f64) -> Self {
        let mut bank = Self::new(sums.counts.len(), sums.channels, momentum);
        for k in 0..bank.classes() {
            if let Some(m) = sums.mean(k) {
                bank.set(k, &m);
                bank.initialized[k] = true;
            }
        }
        bank
    }

    fn set(&mut self, k: usize, v: &[f64]) {
        let c = self.channels();
        self.prototypes.data_mut()[k * c..(k + 1) * c].copy_from_slice(v);
    }

    /// EMA step `P_k ← m·P_k + (1−m)·mean_k` for every class present in the
    /// batch. A class seen for the first time takes the batch mean directly.
    pub fn update(&mut self, batch: &ClassSums) -> Result<()> {
        if batch.counts.len() != self.classes() || batch.channels != self.channels() {
            return Err(Error::Shape("batch sums do not match the bank".into()));
        }
        let m = self.momentum;
        for k in 0..self.classes() {
            let Some(mean) = batch.mean(k) else { continue };
            if self.initialized[k] {
                let c = self.channels();
                for (p, b) in self.prototypes.data_mut()[k * c..(k + 1) * c].iter_mut().zip(&mean) {
                    *p = m * *p + (1.0 - m) * b;
                }
            } else {
                self.set(k, &mean);
                self.initialized[k] = true;
            }
            self.update_count[k] += 1;
        }
        Ok(())
    }

    /// Stacks prototypes by label: `f̂(i,j) = P_{labels(i,j)}`.
    ///
    /// Ignore pixels and pixels of uninitialized classes get a zero vector
    /// and a `false` mask bit.
    pub fn prototypical_map(&self, labels: &LabelMap) -> (Tensor, Vec<bool>) {
        let c = self.channels();
        let mut data = vec![0.0; labels.data.len() * c];
        let mut mask = vec![false; labels.data.len()];
        for (p, &l) in labels.data.iter().enumerate() {
            let k = l as usize;
            if l != IGNORE && k < self.classes() && self.initialized[k] {
                data[p * c..(p + 1) * c].copy_from_slice(self.prototype(k));
                mask[p] = true;
            }
        }
        let t = Tensor::new(&[labels.height, labels.width, c], data).expect("sized buffer");
        (t, mask)
    }

    /// Writes `prototypes.pdt` and `bank.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.prototypes.save(dir.join(BANK_TENSOR))?;
        let index = BankIndex {
            momentum: self.momentum,
            classes: (0..self.classes())
                .map(|k| {
                    (
                        k.to_string(),
                        ClassState {
                            initialized: self.initialized[k],
                            update_count: self.update_count[k],
                        },
                    )
                })
                .collect(),
        };
        fs::write(dir.join(BANK_INDEX), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join(BANK_INDEX);
        let text = fs::read_to_string(&index_path)
            .map_err(|e| Error::Data(format!("prototype bank {}: {e}", index_path.display())))?;
        let index: BankIndex = serde_json::from_str(&text)?;
        let prototypes = Tensor::load(dir.join(BANK_TENSOR))?;
        let k = prototypes.shape().first().copied().unwrap_or(0);
        if prototypes.rank() != 2 || index.classes.len() != k {
            return Err(Error::Data(format!(
                "bank tensor {:?} does not match {} class entries",
                prototypes.shape(),
                index.classes.len()
            )));
        }
        let mut bank = Self {
            prototypes,
            momentum: index.momentum,
            initialized: vec![false; k],
            update_count: vec![0; k],
        };
        for (key, st) in index.classes {
            let c: usize = key
                .parse()
                .ok()
                .filter(|&c| c < k)
                .ok_or_else(|| Error::Data(format!("bad class id {key} in bank index")))?;
            bank.initialized[c] = st.initialized;
            bank.update_count[c] = st.update_count;
        }
        Ok(bank)
    }
}

/// Resamples full-resolution labels to the fused-feature grid.
pub fn labels_at(labels: &LabelMap, h: usize, w: usize) -> LabelMap {
    labels.resize_nearest(h, w)
}

/// Embedding-space labels of one scene: ground truth when present, else the
/// model's pseudo-labels; both resampled to the fused grid.
fn scene_sums(model: &Trans4Pass, scene: &LabeledScene, cfg: &AdaptConfig, sums: &mut ClassSums) -> Result<()> {
    let mut g = Graph::new();
    let x = g.constant(scene.image.clone())?;
    let out = model.forward(&mut g, x)?;
    let labels = match &scene.labels {
        Some(l) => l.clone(),
        None => pseudo_label(g.value(out.logits), cfg.threshold),
    };
    let fused = g.value(out.decoded.fused);
    let s = fused.shape();
    sums.add(fused, &labels_at(&labels, s[0], s[1]))
}

/// One pass over both domains: each prototype is the mean fused embedding of
/// all pixels assigned to its class. Target scenes must be passed without labels.
pub fn init_bank(
    model: &Trans4Pass,
    source: &[LabeledScene],
    target: &[LabeledScene],
    cfg: &AdaptConfig,
) -> Result<PrototypeBank> {
    let mut sums = ClassSums::new(model.cfg.classes, model.cfg.c_emb);
    for s in source {
        if s.labels.is_none() {
            return Err(Error::Data(format!("source scene {} has no labels", s.id)));
        }
        scene_sums(model, s, cfg, &mut sums)?;
    }
    for t in target {
        let unlabeled = LabeledScene {
            labels: None,
            ..t.clone()
        };
        scene_sums(model, &unlabeled, cfg, &mut sums)?;
    }
    Ok(PrototypeBank::from_sums(&sums, cfg.momentum))
}

/// `λ·T²·KL(softmax(f̂/T) ‖ softmax(f/T)) + (1−λ)·CE(y, softmax(f))`.
///
/// `f: [h, w, C]`, `fhat` and `mask` come from [`PrototypeBank::prototypical_map`]
/// and `labels` live on the same grid. The CE term reads class `k` from
/// feature channel `k`. Both terms average over masked-in pixels.
pub fn mpa_loss(
    g: &mut Graph,
    f: Var,
    fhat: &Tensor,
    mask: &[bool],
    labels: &LabelMap,
    cfg: &AdaptConfig,
) -> Result<Var> {
    let s = g.shape(f).to_vec();
    if s.len() != 3 || fhat.shape() != s.as_slice() || [labels.height, labels.width] != s[..2] {
        return Err(Error::Shape(format!(
            "mpa_loss: features {s:?}, prototypes {:?}, labels {}x{}",
            fhat.shape(),
            labels.height,
            labels.width
        )));
    }
    let (n, c) = (s[0] * s[1], s[2]);
    let t = cfg.temperature;
    let flat = g.reshape(f, &[n, c])?;
    let soft = g.scale(flat, 1.0 / t)?;
    let p = g.softmax(soft, 1)?;
    let target = g.constant(fhat.clone().reshaped(&[n, c])?)?;
    let target = g.scale(target, 1.0 / t)?;
    let p_ref = g.softmax(target, 1)?;
    let kl = g.kl_div(p_ref, p, Some(mask))?;
    let y: Vec<u8> = labels
        .data
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { l } else { IGNORE })
        .collect();
    let ce = g.cross_entropy(flat, &y, IGNORE)?;
    let kl = g.scale(kl, cfg.lambda * t * t)?;
    let ce = g.scale(ce, 1.0 - cfg.lambda)?;
    g.add(kl, ce)
}

/// Which terms enter the adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Objective {
    pub ssl: bool,
    pub mpa: bool,
}

/// Contributions to the total loss; MPA entries already carry the `α` weight.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub seg: f64,
    pub ssl: Option<f64>,
    pub mpa_s: Option<f64>,
    pub mpa_t: Option<f64>,
    pub total: f64,
}

/// One side of a training batch: forward outputs and their (pseudo-)labels at
/// input resolution.
pub struct DomainBatch<'a> {
    pub outputs: &'a [ForwardOutput],
    pub labels: &'a [LabelMap],
}

fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let s = g.sum(xs)?;
    g.scale(s, 1.0 / xs.len() as f64)
}

fn domain_mpa(g: &mut Graph, b: &DomainBatch, bank: &PrototypeBank, cfg: &AdaptConfig) -> Result<Var> {
    let mut losses = Vec::with_capacity(b.outputs.len());
    for (out, labels) in b.outputs.iter().zip(b.labels) {
        let s = g.shape(out.decoded.fused).to_vec();
        let y = labels_at(labels, s[0], s[1]);
        let (fhat, mask) = bank.prototypical_map(&y);
        losses.push(mpa_loss(g, out.decoded.fused, &fhat, &mask, &y, cfg)?);
    }
    mean_of(g, &losses)
}

/// `L_SEG + L_SSL + α(L_MPA^s + L_MPA^t)`, with SSL and MPA terms switched by
/// `objective`. Returns the loss node and each term's contribution.
pub fn total_loss(
    g: &mut Graph,
    source: &DomainBatch,
    target: &DomainBatch,
    bank: Option<&PrototypeBank>,
    cfg: &AdaptConfig,
    objective: Objective,
) -> Result<(Var, LossParts)> {
    if source.outputs.is_empty() || source.outputs.len() != source.labels.len() || target.outputs.len() != target.labels.len() {
        return Err(Error::Shape("batch outputs and labels differ in length".into()));
    }
    let ce = |g: &mut Graph, b: &DomainBatch| -> Result<Var> {
        let mut v = Vec::with_capacity(b.outputs.len());
        for (out, y) in b.outputs.iter().zip(b.labels) {
            v.push(g.cross_entropy(out.logits, &y.data, IGNORE)?);
        }
        mean_of(g, &v)
    };
    let seg = ce(g, source)?;
    let mut terms = vec![seg];
    let mut parts = LossParts {
        seg: g.value(seg).item(),
        ..LossParts::default()
    };
    if objective.ssl && !target.outputs.is_empty() {
        let ssl = ce(g, target)?;
        parts.ssl = Some(g.value(ssl).item());
        terms.push(ssl);
    }
    if objective.mpa {
        let bank = bank.ok_or_else(|| Error::Config("MPA objective needs an initialized prototype bank".into()))?;
        let s = domain_mpa(g, source, bank, cfg)?;
        let s = g.scale(s, cfg.alpha)?;
        parts.mpa_s = Some(g.value(s).item());
        terms.push(s);
        if !target.outputs.is_empty() {
            let t = domain_mpa(g, target, bank, cfg)?;
            let t = g.scale(t, cfg.alpha)?;
            parts.mpa_t = Some(g.value(t).item());
            terms.push(t);
        }
    }
    let total = g.sum(&terms)?;
    parts.total = g.value(total).item();
    Ok((total, parts))
}

#[cfg(test)]
mod tests;
