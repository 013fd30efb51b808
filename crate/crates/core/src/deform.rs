//! Deformable patch embedding and deformable MLP token mixing.
//!
//! Both modules predict a 2-D displacement per output position (and per
//! sampling point or channel group) with a 3×3 convolution, clamp it to
//! `[−H/r, H/r] × [−W/r, W/r]`, and read the input at the displaced
//! positions with bilinear interpolation so gradients reach the predictor.
//! With all offsets at zero they reduce exactly to a standard patch
//! embedding and a per-token linear layer respectively.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, Linear, INIT_STD};
use crate::numcore::{Border, Graph, ParamStore, Tensor, Var};

/// Channel groups are capped here; channels beyond it share offsets round-robin.
pub const MAX_MLP_GROUPS: usize = 64;

/// Per-position 2-D displacements with the clamp radii they were bounded by.
#[derive(Debug, Clone)]
pub struct OffsetField {
    /// `[H', W', G, 2]`, last axis `(dy, dx)`.
    pub offsets: Tensor,
    pub bound_y: f64,
    pub bound_x: f64,
    pub r: f64,
}

impl OffsetField {
    pub fn groups(&self) -> usize {
        self.offsets.shape()[2]
    }

    /// True when every displacement lies inside the clamp radii.
    pub fn within_bounds(&self) -> bool {
        self.offsets
            .data()
            .chunks_exact(2)
            .all(|d| d[0].abs() <= self.bound_y && d[1].abs() <= self.bound_x)
    }
}

/// Clamp radii `(H/r, W/r)` for an `H×W` input.
pub fn offset_bounds(h: usize, w: usize, r: f64) -> (f64, f64) {
    (h as f64 / r, w as f64 / r)
}

/// The `g(·)` offset predictor: a 3×3 convolution emitting `2·G` values.
#[derive(Debug, Clone)]
pub struct OffsetPredictor {
    pub conv: Linear,
    pub groups: usize,
    pub c_in: usize,
    pub stride: usize,
    pub r: f64,
}

impl OffsetPredictor {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        groups: usize,
        stride: usize,
        r: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Linear::new(store, name, 9 * c_in, 2 * groups, Init::Zeros, rng),
            groups,
            c_in,
            stride,
            r,
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }

    /// Clamped offsets for `f: [H, W, C_in]`, shaped `[(H/s)·(W/s), G, 2]`.
    pub fn predict(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let s = g.shape(f).to_vec();
        let (h, w) = (s[0], s[1]);
        let cols = g.unfold(f, 3, self.stride, 1, Border::Zero)?;
        let raw = self.conv.forward(g, store, cols)?;
        let p = g.shape(raw)[0];
        let pairs = g.reshape(raw, &[p * self.groups, 2])?;
        let (by, bx) = offset_bounds(h, w, self.r);
        let clamped = g.clamp(pairs, &[-by, -bx], &[by, bx])?;
        g.reshape(clamped, &[p, self.groups, 2])
    }

    /// Evaluates [`predict`](Self::predict) on a fresh graph and packages the result.
    pub fn offset_field(&self, store: &ParamStore, f: &Tensor) -> Result<OffsetField> {
        let mut g = Graph::new();
        let fv = g.constant(f.clone())?;
        let off = self.predict(&mut g, store, fv)?;
        let (h, w) = (f.shape()[0], f.shape()[1]);
        let (by, bx) = offset_bounds(h, w, self.r);
        let offsets = g.value(off).clone().reshaped(&[
            h / self.stride,
            w / self.stride,
            self.groups,
            2,
        ])?;
        Ok(OffsetField {
            offsets,
            bound_y: by,
            bound_x: bx,
            r: self.r,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchEmbedConfig {
    pub patch: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub deformable: bool,
    pub r: f64,
    pub border: Border,
}

impl PatchEmbedConfig {
    pub fn new(patch: usize, stride: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            patch,
            stride,
            c_in,
            c_out,
            deformable: true,
            r: 4.0,
            border: Border::Clamp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.stride == 0 || self.c_in == 0 || self.c_out == 0 {
            return Err(Error::Config(format!("degenerate patch embedding {self:?}")));
        }
        if !(self.r > 0.0) {
            return Err(Error::Config(format!("offset restriction r={} must be > 0", self.r)));
        }
        Ok(())
    }

    /// Fixed in-patch offsets `[−⌊s/2⌋, s−1−⌊s/2⌋]` along one axis.
    pub fn patch_offsets(&self) -> Vec<isize> {
        let half = (self.patch / 2) as isize;
        (0..self.patch as isize).map(|u| u - half).collect()
    }
}

/// Patch embedding, optionally deformable.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub cfg: PatchEmbedConfig,
    pub proj: Linear,
    pub offsets: Option<OffsetPredictor>,
}

impl PatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: PatchEmbedConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.patch * cfg.patch * cfg.c_in;
        let proj = Linear::new(
            store,
            &format!("{name}.proj"),
            k,
            cfg.c_out,
            Init::TruncNormal(INIT_STD),
            rng,
        );
        let offsets = cfg.deformable.then(|| {
            OffsetPredictor::new(
                store,
                &format!("{name}.offset"),
                cfg.c_in,
                cfg.patch * cfg.patch,
                cfg.stride,
                cfg.r,
                rng,
            )
        });
        Ok(Self { cfg, proj, offsets })
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count() + self.offsets.as_ref().map_or(0, |o| o.param_count())
    }

    fn check_input(&self, g: &Graph, f: Var) -> Result<(usize, usize)> {
        let s = g.shape(f);
        if s.len() != 3 || s[2] != self.cfg.c_in {
            return Err(Error::Shape(format!(
                "patch embedding expects [H, W, {}], got {s:?}",
                self.cfg.c_in
            )));
        }
        if s[0] % self.cfg.stride != 0 || s[1] % self.cfg.stride != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} not divisible by stride {}",
                s[0], s[1], self.cfg.stride
            )));
        }
        Ok((s[0] / self.cfg.stride, s[1] / self.cfg.stride))
    }

    /// Deformable when configured, standard otherwise. Output `[H/t, W/t, C_out]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        match &self.offsets {
            Some(pred) => {
                let off = pred.predict(g, store, f)?;
                self.deformable_with(g, store, f, off)
            }
            None => self.standard(g, store, f),
        }
    }

    /// Fixed-offset patch embedding (unfold + linear projection).
    pub fn standard(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let (ho, wo) = self.check_input(g, f)?;
        let z = g.unfold(
            f,
            self.cfg.patch,
            self.cfg.stride,
            self.cfg.patch / 2,
            self.cfg.border,
        )?;
        let y = self.proj.forward(g, store, z)?;
        g.reshape(y, &[ho, wo, self.cfg.c_out])
    }

    /// Patch embedding whose `s²` sampling points are displaced by `offsets`
    /// (`[(H/t)·(W/t), s², 2]`).
    pub fn deformable_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f: Var,
        offsets: Var,
    ) -> Result<Var> {
        let (ho, wo) = self.check_input(g, f)?;
        let s2 = self.cfg.patch * self.cfg.patch;
        if g.shape(offsets) != [ho * wo, s2, 2] {
            return Err(Error::Shape(format!(
                "DPE offsets {:?}, expected [{}, {s2}, 2]",
                g.shape(offsets),
                ho * wo
            )));
        }
        let base = g.constant(self.base_grid(ho, wo))?;
        let coords = g.add(base, offsets)?;
        let coords = g.reshape(coords, &[ho * wo * s2, 2])?;
        let sampled = g.bilinear_sample(f, coords, self.cfg.border)?;
        let z = g.reshape(sampled, &[ho * wo, s2 * self.cfg.c_in])?;
        let y = self.proj.forward(g, store, z)?;
        g.reshape(y, &[ho, wo, self.cfg.c_out])
    }

    /// Undisplaced sampling positions `(t·i + δu, t·j + δv)`.
    pub fn base_grid(&self, ho: usize, wo: usize) -> Tensor {
        let d = self.cfg.patch_offsets();
        let t = self.cfg.stride as isize;
        let mut data = Vec::with_capacity(ho * wo * d.len() * d.len() * 2);
        for i in 0..ho as isize {
            for j in 0..wo as isize {
                for &du in &d {
                    for &dv in &d {
                        data.push((t * i + du) as f64);
                        data.push((t * j + dv) as f64);
                    }
                }
            }
        }
        Tensor::new(&[ho * wo, d.len() * d.len(), 2], data).expect("grid size")
    }
}

/// Token mixing by a per-token linear layer (no spatial context).
pub fn vanilla_mlp_mix(g: &mut Graph, store: &ParamStore, fc: &Linear, z: Var) -> Result<Var> {
    fc.forward(g, store, z)
}

/// Deformable MLP: each channel is gathered at its own learned offset, then
/// one fully connected layer mixes channels at every position.
#[derive(Debug, Clone)]
pub struct DeformableMlp {
    pub fc: Linear,
    pub offsets: OffsetPredictor,
    pub border: Border,
}

impl DeformableMlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        r: f64,
        border: Border,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fc = Linear::new(
            store,
            &format!("{name}.fc"),
            c_in,
            c_out,
            Init::TruncNormal(INIT_STD),
            rng,
        );
        let offsets = OffsetPredictor::new(
            store,
            &format!("{name}.offset"),
            c_in,
            c_in.min(MAX_MLP_GROUPS),
            1,
            r,
            rng,
        );
        Self {
            fc,
            offsets,
            border,
        }
    }

    pub fn param_count(&self) -> usize {
        self.fc.param_count() + self.offsets.param_count()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let off = self.offsets.predict(g, store, f)?;
        self.mix_with(g, store, f, off)
    }

    /// Mixing with explicit offsets `[H·W, G, 2]`.
    pub fn mix_with(&self, g: &mut Graph, store: &ParamStore, f: Var, offsets: Var) -> Result<Var> {
        let s = g.shape(f).to_vec();
        if s.len() != 3 || s[2] != self.fc.fan_in {
            return Err(Error::Shape(format!(
                "DMLP expects [H, W, {}], got {s:?}",
                self.fc.fan_in
            )));
        }
        let (h, w) = (s[0], s[1]);
        let groups = self.offsets.groups;
        if g.shape(offsets) != [h * w, groups, 2] {
            return Err(Error::Shape(format!(
                "DMLP offsets {:?}, expected [{}, {groups}, 2]",
                g.shape(offsets),
                h * w
            )));
        }
        let base = Tensor::from_fn(&[h * w, groups, 2], |i| {
            let p = i / (2 * groups);
            if i % 2 == 0 {
                (p / w) as f64
            } else {
                (p % w) as f64
            }
        });
        let base = g.constant(base)?;
        let coords = g.add(base, offsets)?;
        let gathered = g.bilinear_sample(f, coords, self.border)?;
        let y = self.fc.forward(g, store, gathered)?;
        g.reshape(y, &[h, w, self.fc.fan_out])
    }

    /// The same layer with spatial offsets disabled.
    pub fn vanilla(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let s = g.shape(f).to_vec();
        let z = g.reshape(f, &[s[0] * s[1], s[2]])?;
        let y = vanilla_mlp_mix(g, store, &self.fc, z)?;
        g.reshape(y, &[s[0], s[1], self.fc.fan_out])
    }
}
