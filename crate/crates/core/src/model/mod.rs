//! The segmentation network: a four-stage pyramid encoder with (deformable)
//! patch embeddings and the DPE + DMLP decoder.

mod config;
mod decoder;
mod encoder;

use std::fs;
use std::path::Path;

use serde::Serialize;

pub use config::{DecoderKind, ModelConfig};
pub use decoder::{DecoderStage, Mixer};
pub use encoder::EncoderStage;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::nn::{Init, Linear, Norm, INIT_STD};
use crate::numcore::{Graph, ParamStore, Tensor, Var};
use crate::rng;

/// Encoder outputs `f_1..f_4`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub features: [Var; 4],
    /// Attention probabilities of every head in every block, stage order.
    pub attention: Vec<Var>,
}

/// Decoder outputs.
#[derive(Debug, Clone)]
pub struct Decoded {
    /// Per-stage embeddings upsampled to `H/4 × W/4 × C_emb`.
    pub stage_embeds: [Var; 4],
    /// `Σ_l ẑ_l`, the embedding prototypes are built from.
    pub fused: Var,
    /// Class scores at `H/4 × W/4 × K`.
    pub logits_quarter: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub decoded: Decoded,
    /// Class scores at full input resolution, `H × W × K`.
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct Trans4Pass {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub encoder: Vec<EncoderStage>,
    pub decoder: Vec<DecoderStage>,
    head_norm: Norm,
    classifier: Linear,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageDescription {
    pub stage: usize,
    pub encoder_shape: [usize; 3],
    pub decoder_shape: [usize; 3],
    pub encoder_params: usize,
    pub decoder_params: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelDescription {
    pub input: [usize; 3],
    pub stages: Vec<StageDescription>,
    pub head_params: usize,
    pub total_params: usize,
    pub output: [usize; 3],
}

impl Trans4Pass {
    /// Builds a freshly initialized network; weights come from the `init` stream of `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, "init");
        let mut params = ParamStore::new();
        let encoder = (0..4)
            .map(|l| EncoderStage::new(&mut params, &cfg, l, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..4)
            .map(|l| DecoderStage::new(&mut params, &cfg, l, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head_norm = Norm::new(&mut params, "head.norm", cfg.c_emb);
        let classifier = Linear::new(
            &mut params,
            "head.cls",
            cfg.c_emb,
            cfg.classes,
            Init::TruncNormal(INIT_STD),
            &mut rng,
        );
        Ok(Self {
            cfg,
            params,
            encoder,
            decoder,
            head_norm,
            classifier,
        })
    }

    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<FeaturePyramid> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "model expects [H, W, {}], got {s:?}",
                self.cfg.in_channels
            )));
        }
        self.cfg.check_input(s[0], s[1])?;
        let mut attention = Vec::new();
        let mut cur = x;
        let mut feats = Vec::with_capacity(4);
        for stage in &self.encoder {
            cur = stage.forward(g, &self.params, cur, &mut attention)?;
            feats.push(cur);
        }
        Ok(FeaturePyramid {
            features: feats.try_into().expect("four stages"),
            attention,
        })
    }

    pub fn decode(&self, g: &mut Graph, pyr: &FeaturePyramid) -> Result<Decoded> {
        let s0 = g.shape(pyr.features[0]).to_vec();
        if s0.len() != 3 || s0[2] != self.cfg.channels[0] {
            return Err(Error::Shape(format!("stage-1 features {s0:?}")));
        }
        let (hq, wq) = (s0[0], s0[1]);
        let mut embeds = Vec::with_capacity(4);
        for (l, (stage, &f)) in self.decoder.iter().zip(&pyr.features).enumerate() {
            let s = g.shape(f).to_vec();
            let ratio = self.cfg.strides[l] / self.cfg.strides[0];
            if s != [hq / ratio, wq / ratio, self.cfg.channels[l]] {
                return Err(Error::Shape(format!("stage {} features {s:?}", l + 1)));
            }
            let z = stage.forward(g, &self.params, f)?;
            let z = if l == 0 {
                z
            } else {
                g.upsample_bilinear(z, hq, wq)?
            };
            embeds.push(z);
        }
        let fused = fuse_features(g, &embeds)?;
        let n = self.head_norm.forward(g, &self.params, fused)?;
        let logits_quarter = self.classifier.forward(g, &self.params, n)?;
        Ok(Decoded {
            stage_embeds: embeds.try_into().expect("four stages"),
            fused,
            logits_quarter,
        })
    }

    /// Full forward pass on `x: [H, W, 3]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<ForwardOutput> {
        let s = g.shape(x).to_vec();
        let pyramid = self.encode(g, x)?;
        let decoded = self.decode(g, &pyramid)?;
        let logits = g.upsample_bilinear(decoded.logits_quarter, s[0], s[1])?;
        Ok(ForwardOutput {
            pyramid,
            decoded,
            logits,
        })
    }

    /// Per-pixel argmax prediction (ties resolve to the lowest class).
    pub fn predict(&self, image: &Tensor) -> Result<LabelMap> {
        let mut g = Graph::new();
        let x = g.constant(image.clone())?;
        let out = self.forward(&mut g, x)?;
        let logits = g.value(out.logits);
        Ok(argmax_map(logits, None))
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Per-stage shapes and parameter counts for an `h×w` input.
    pub fn describe(&self, h: usize, w: usize) -> Result<ModelDescription> {
        self.cfg.check_input(h, w)?;
        let stages = (0..4)
            .map(|l| {
                let st = self.cfg.strides[l];
                StageDescription {
                    stage: l + 1,
                    encoder_shape: [h / st, w / st, self.cfg.channels[l]],
                    decoder_shape: [h / self.cfg.strides[0], w / self.cfg.strides[0], self.cfg.c_emb],
                    encoder_params: self.params.count_prefix(&format!("enc.s{}.", l + 1)),
                    decoder_params: self.params.count_prefix(&format!("dec.s{}.", l + 1)),
                }
            })
            .collect();
        Ok(ModelDescription {
            input: [h, w, self.cfg.in_channels],
            stages,
            head_params: self.params.count_prefix("head."),
            total_params: self.param_count(),
            output: [h, w, self.cfg.classes],
        })
    }

    /// Writes `config.json`, `params.json` and the parameter blobs under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.cfg)?)?;
        self.params.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("config.json"))
            .map_err(|e| Error::Data(format!("{}: {e}", dir.join("config.json").display())))?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        let mut model = Self::new(cfg, 0)?;
        model.params.load_into(dir)?;
        Ok(model)
    }
}

/// `Σ_l ẑ_l` over equally shaped stage embeddings.
pub fn fuse_features(g: &mut Graph, stage_embeds: &[Var]) -> Result<Var> {
    g.sum(stage_embeds)
}

/// Argmax over the last axis; rows whose max softmax probability is below
/// `threshold` become [`crate::IGNORE`]. Ties pick the lowest index.
pub fn argmax_map(logits: &Tensor, threshold: Option<f64>) -> LabelMap {
    let s = logits.shape();
    let k = s[2];
    let data = logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let (best, &m) = row
                .iter()
                .enumerate()
                .fold((0, &row[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
            if let Some(t) = threshold {
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                if 1.0 / z < t {
                    return crate::labels::IGNORE;
                }
            }
            best as u8
        })
        .collect();
    LabelMap {
        height: s[0],
        width: s[1],
        data,
    }
}

#[cfg(test)]
mod tests;
