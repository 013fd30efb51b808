//! Pyramid transformer stages with spatial-reduction attention.

use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::deform::{PatchEmbed, PatchEmbedConfig};
use crate::error::Result;
use crate::nn::{Init, Linear, Norm, INIT_STD};
use crate::numcore::{Graph, ParamStore, Var};

#[derive(Debug, Clone)]
struct Attention {
    heads: usize,
    reduction: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    /// Key/value pooling (`R×R` patch merge) and its norm, when `R > 1`.
    sr: Option<(Linear, Norm)>,
}

#[derive(Debug, Clone)]
struct Block {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

/// One encoder stage: patch embedding followed by transformer blocks.
#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub embed: PatchEmbed,
    blocks: Vec<Block>,
    norm: Norm,
    channels: usize,
}

impl EncoderStage {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        l: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = cfg.channels[l];
        let name = format!("enc.s{}", l + 1);
        let mut pe = PatchEmbedConfig::new(
            cfg.patch_sizes[l],
            cfg.stage_stride(l),
            cfg.stage_in_channels(l),
            c,
        );
        pe.deformable = cfg.encoder_deformable;
        pe.r = cfg.r;
        pe.border = cfg.border;
        let embed = PatchEmbed::new(store, &format!("{name}.pe"), pe, rng)?;
        let lin = |store: &mut ParamStore, n: &str, i, o, rng: &mut ChaCha8Rng| {
            Linear::new(store, n, i, o, Init::TruncNormal(INIT_STD), rng)
        };
        let mut blocks = Vec::new();
        for b in 0..cfg.depths[l] {
            let bn = format!("{name}.b{b}");
            let red = cfg.reductions[l];
            let sr = (red > 1).then(|| {
                (
                    lin(store, &format!("{bn}.attn.sr"), red * red * c, c, rng),
                    Norm::new(store, &format!("{bn}.attn.sr_norm"), c),
                )
            });
            blocks.push(Block {
                norm1: Norm::new(store, &format!("{bn}.norm1"), c),
                attn: Attention {
                    heads: cfg.heads[l],
                    reduction: red,
                    q: lin(store, &format!("{bn}.attn.q"), c, c, rng),
                    k: lin(store, &format!("{bn}.attn.k"), c, c, rng),
                    v: lin(store, &format!("{bn}.attn.v"), c, c, rng),
                    proj: lin(store, &format!("{bn}.attn.proj"), c, c, rng),
                    sr,
                },
                norm2: Norm::new(store, &format!("{bn}.norm2"), c),
                fc1: lin(store, &format!("{bn}.mlp.fc1"), c, c * cfg.mlp_ratio, rng),
                fc2: lin(store, &format!("{bn}.mlp.fc2"), c * cfg.mlp_ratio, c, rng),
            });
        }
        let norm = Norm::new(store, &format!("{name}.norm"), c);
        Ok(Self {
            embed,
            blocks,
            norm,
            channels: c,
        })
    }

    /// Runs the stage on `x: [H, W, C_in]`, returning `[H/t, W/t, C]`.
    ///
    /// Softmax outputs of every attention head are appended to `attention`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        attention: &mut Vec<Var>,
    ) -> Result<Var> {
        let y = self.embed.forward(g, store, x)?;
        let s = g.shape(y).to_vec();
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut t = g.reshape(y, &[h * w, c])?;
        for b in &self.blocks {
            let a = b.norm1.forward(g, store, t)?;
            let a = b.attn.forward(g, store, a, (h, w), attention)?;
            t = g.add(t, a)?;
            let m = b.norm2.forward(g, store, t)?;
            let m = b.fc1.forward(g, store, m)?;
            let m = g.gelu(m)?;
            let m = b.fc2.forward(g, store, m)?;
            t = g.add(t, m)?;
        }
        let t = self.norm.forward(g, store, t)?;
        g.reshape(t, &[h, w, self.channels])
    }
}

impl Attention {
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        (h, w): (usize, usize),
        probes: &mut Vec<Var>,
    ) -> Result<Var> {
        let c = g.shape(x)[1];
        let q = self.q.forward(g, store, x)?;
        let kv_in = match &self.sr {
            Some((lin, norm)) => {
                let map = g.reshape(x, &[h, w, c])?;
                let pooled = g.unfold(
                    map,
                    self.reduction,
                    self.reduction,
                    0,
                    crate::numcore::Border::Clamp,
                )?;
                let pooled = lin.forward(g, store, pooled)?;
                norm.forward(g, store, pooled)?
            }
            None => x,
        };
        let k = self.k.forward(g, store, kv_in)?;
        let v = self.v.forward(g, store, kv_in)?;
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let qh = g.col_slice(q, hd * d, d)?;
            let kh = g.col_slice(k, hd * d, d)?;
            let vh = g.col_slice(v, hd * d, d)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores, 1)?;
            probes.push(attn);
            outs.push(g.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.proj.forward(g, store, merged)
    }
}
