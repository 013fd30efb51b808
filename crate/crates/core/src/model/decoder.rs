//! Four-stage decoder: per stage DPE → (D)MLP mixing → MLP, each with a
//! residual, upsampled to a quarter of the input resolution and summed.

use rand_chacha::ChaCha8Rng;

use super::{DecoderKind, ModelConfig};
use crate::deform::{vanilla_mlp_mix, DeformableMlp, PatchEmbed, PatchEmbedConfig};
use crate::error::Result;
use crate::nn::{Init, Linear, INIT_STD};
use crate::numcore::{Graph, ParamStore, Var};

/// Token mixer of a decoder stage.
#[derive(Debug, Clone)]
pub enum Mixer {
    Deformable(DeformableMlp),
    /// Baseline: the same fully connected layer without spatial offsets.
    Vanilla(Linear),
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub embed: PatchEmbed,
    pub mixer: Mixer,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl DecoderStage {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        l: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let name = format!("dec.s{}", l + 1);
        let mut pe = PatchEmbedConfig::new(3, 1, cfg.channels[l], cfg.c_emb);
        pe.r = cfg.r;
        pe.border = cfg.border;
        let embed = PatchEmbed::new(store, &format!("{name}.pe"), pe, rng)?;
        let mixer = match cfg.decoder {
            DecoderKind::Deformable => Mixer::Deformable(DeformableMlp::new(
                store,
                &format!("{name}.dmlp"),
                cfg.c_emb,
                cfg.c_emb,
                cfg.r,
                cfg.border,
                rng,
            )),
            DecoderKind::Vanilla => Mixer::Vanilla(Linear::new(
                store,
                &format!("{name}.dmlp.fc"),
                cfg.c_emb,
                cfg.c_emb,
                Init::TruncNormal(INIT_STD),
                rng,
            )),
        };
        let fc1 = Linear::new(
            store,
            &format!("{name}.mlp.fc1"),
            cfg.c_emb,
            cfg.c_emb,
            Init::TruncNormal(INIT_STD),
            rng,
        );
        let fc2 = Linear::new(
            store,
            &format!("{name}.mlp.fc2"),
            cfg.c_emb,
            cfg.c_emb,
            Init::TruncNormal(INIT_STD),
            rng,
        );
        Ok(Self {
            embed,
            mixer,
            fc1,
            fc2,
        })
    }

    pub fn param_count(&self) -> usize {
        let mixer = match &self.mixer {
            Mixer::Deformable(m) => m.param_count(),
            Mixer::Vanilla(fc) => fc.param_count(),
        };
        self.embed.param_count() + mixer + self.fc1.param_count() + self.fc2.param_count()
    }

    /// Embedded stage features at native resolution, `[h_l, w_l, C_emb]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let e = self.embed.forward(g, store, z)?;
        let mixed = match &self.mixer {
            Mixer::Deformable(m) => m.forward(g, store, e)?,
            Mixer::Vanilla(fc) => {
                let s = g.shape(e).to_vec();
                let z = g.reshape(e, &[s[0] * s[1], s[2]])?;
                let y = vanilla_mlp_mix(g, store, fc, z)?;
                g.reshape(y, &s)?
            }
        };
        let e = g.add(mixed, e)?;
        let m = self.fc1.forward(g, store, e)?;
        let m = g.gelu(m)?;
        let m = self.fc2.forward(g, store, m)?;
        g.add(m, e)
    }
}
