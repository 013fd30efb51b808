//! Procedural sphere worlds rendered as pinhole crops or equirectangular panoramas.
//!
//! A world labels every direction on the unit sphere: a sky cap, a ground
//! cap, a wall band between them and a set of flat objects. Objects are
//! defined in the tangent plane at their center, so they look like upright
//! rectangles or ellipses through a pinhole camera and get bent and stretched
//! by the equirectangular projection. Colors are continuous functions of the
//! viewing direction, which keeps both projections of one world consistent.
//!
//! Coordinates: `z` points up, polar angle `φ ∈ [0, π]` is measured from `+z`
//! and azimuth `θ ∈ [0, 2π)` from `+x` towards `+y`.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::numcore::Tensor;
use crate::rng;

pub const SKY: u8 = 0;
pub const GROUND: u8 = 1;
pub const WALL: u8 = 2;
/// First object class; objects use classes `FIRST_OBJECT..K`.
pub const FIRST_OBJECT: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Pinhole,
    Panorama,
}

/// An image with its label map; `labels` is `None` for the unlabeled target split.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub id: String,
    pub domain: Domain,
    /// `[H, W, 3]` with values in `[0, 1]`.
    pub image: Tensor,
    pub labels: Option<LabelMap>,
}

impl LabeledScene {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn labels(&self) -> Result<&LabelMap> {
        self.labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("scene {} has no labels", self.id)))
    }
}

/// Generator settings shared by every scene of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Number of classes `K`.
    pub classes: usize,
    /// Inclusive range of object counts per world.
    pub objects: [usize; 2],
    /// Horizontal field of view of pinhole crops, degrees.
    pub fov_deg: f64,
    /// Pinhole crop size `[H, W]`.
    pub pinhole_size: [usize; 2],
    /// Panorama height; the width is always twice this.
    pub panorama_height: usize,
    /// Pinhole pitch is drawn uniformly from `±pitch_deg`.
    pub pitch_deg: f64,
    /// Per-scene color jitter amplitude.
    pub appearance_jitter: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            objects: [4, 8],
            fov_deg: 70.0,
            pinhole_size: [64, 64],
            panorama_height: 64,
            pitch_deg: 10.0,
            appearance_jitter: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=250).contains(&self.classes) {
            return Err(Error::Config(format!("classes = {} outside [2, 250]", self.classes)));
        }
        if self.objects[0] > self.objects[1] {
            return Err(Error::Config(format!("object range {:?} is empty", self.objects)));
        }
        check_fov(self.fov_deg)?;
        if self.pinhole_size.contains(&0) || self.panorama_height == 0 {
            return Err(Error::Config("image sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn panorama_size(&self) -> [usize; 2] {
        [self.panorama_height, 2 * self.panorama_height]
    }
}

fn check_fov(fov_deg: f64) -> Result<()> {
    if fov_deg > 0.0 && fov_deg < 180.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("fov {fov_deg} must lie in (0, 180)")))
    }
}

/// Unit vector for polar angle `phi` and azimuth `theta`.
pub fn direction(phi: f64, theta: f64) -> [f64; 3] {
    [phi.sin() * theta.cos(), phi.sin() * theta.sin(), phi.cos()]
}

/// `(φ, θ)` of a (not necessarily unit) direction, `θ` in `[0, 2π)`.
pub fn angles(d: [f64; 3]) -> (f64, f64) {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let phi = (d[2] / n).clamp(-1.0, 1.0).acos();
    let theta = d[1].atan2(d[0]).rem_euclid(TAU);
    (phi, theta)
}

/// Panorama pixel `(row, col)` containing direction `d`.
pub fn equirect_pixel(d: [f64; 3], h: usize, w: usize) -> (usize, usize) {
    let (phi, theta) = angles(d);
    let i = ((phi / PI * h as f64) as usize).min(h - 1);
    let j = ((theta / TAU * w as f64) as usize).min(w - 1);
    (i, j)
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// A perspective camera looking along (`yaw`, `pitch`) in radians.
#[derive(Debug, Clone, Copy)]
pub struct PinholeCamera {
    pub height: usize,
    pub width: usize,
    forward: [f64; 3],
    right: [f64; 3],
    up: [f64; 3],
    focal: f64,
}

impl PinholeCamera {
    pub fn new(height: usize, width: usize, fov_deg: f64, yaw: f64, pitch: f64) -> Result<Self> {
        check_fov(fov_deg)?;
        let (cy, sy, cp, sp) = (yaw.cos(), yaw.sin(), pitch.cos(), pitch.sin());
        Ok(Self {
            height,
            width,
            forward: [cp * cy, cp * sy, sp],
            // increasing image column follows increasing azimuth, as in the panorama
            right: [-sy, cy, 0.0],
            up: [-sp * cy, -sp * sy, cp],
            focal: 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan(),
        })
    }

    /// Viewing ray through the center of pixel `(i, j)` (not normalized).
    pub fn ray(&self, i: usize, j: usize) -> [f64; 3] {
        let x = (j as f64 + 0.5 - 0.5 * self.width as f64) / self.focal;
        let y = (i as f64 + 0.5 - 0.5 * self.height as f64) / self.focal;
        std::array::from_fn(|a| self.forward[a] + x * self.right[a] - y * self.up[a])
    }
}

/// Horizon-following boundary: elevation `base + amp·sin(freq·θ + phase)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Boundary {
    pub base: f64,
    pub amp: f64,
    pub freq: f64,
    pub phase: f64,
}

impl Boundary {
    /// Elevation (radians above the horizon) at azimuth `theta`.
    pub fn elevation(&self, theta: f64) -> f64 {
        self.base + self.amp * (self.freq * theta + self.phase).sin()
    }

    fn random(rng: &mut impl Rng, base_deg: (f64, f64), sign: f64) -> Self {
        Self {
            base: sign * rng.gen_range(base_deg.0..base_deg.1).to_radians(),
            amp: rng.gen_range(0.0..8.0_f64).to_radians(),
            freq: rng.gen_range(1..=3) as f64,
            phase: rng.gen_range(0.0..TAU),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Ellipse,
}

/// A flat object drawn in the tangent plane at its center direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class: u8,
    pub shape: Shape,
    pub center: [f64; 3],
    /// Tangent axes: horizontal (azimuth) and vertical (elevation).
    axes: [[f64; 3]; 2],
    /// Half extents in tangent-plane units.
    pub half: [f64; 2],
}

impl SceneObject {
    fn new(class: u8, shape: Shape, theta: f64, elevation: f64, half_deg: [f64; 2]) -> Self {
        let phi = PI / 2.0 - elevation;
        let (se, ce) = elevation.sin_cos();
        Self {
            class,
            shape,
            center: direction(phi, theta),
            axes: [
                [-theta.sin(), theta.cos(), 0.0],
                [-se * theta.cos(), -se * theta.sin(), ce],
            ],
            half: half_deg.map(|a: f64| a.to_radians().tan()),
        }
    }

    pub fn contains(&self, d: [f64; 3]) -> bool {
        let n = dot(d, d).sqrt();
        let c = dot(d, self.center) / n;
        if c <= 0.1 {
            return false;
        }
        let u = dot(d, self.axes[0]) / (n * c) / self.half[0];
        let v = dot(d, self.axes[1]) / (n * c) / self.half[1];
        match self.shape {
            Shape::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Ellipse => u * u + v * v <= 1.0,
        }
    }
}

/// Per-class appearance: base color plus a direction-dependent texture.
#[derive(Debug, Clone, PartialEq)]
struct Material {
    color: [f64; 3],
    tint: [f64; 3],
    amp: f64,
    freq: f64,
    waves: [([f64; 3], f64); 3],
}

impl Material {
    fn shade(&self, d: [f64; 3]) -> [f64; 3] {
        let t = self
            .waves
            .iter()
            .map(|&(u, ph)| (self.freq * dot(u, d) + ph).sin())
            .sum::<f64>()
            / 3.0;
        std::array::from_fn(|c| self.color[c] + self.amp * t * self.tint[c])
    }
}

const PALETTE: [[f64; 3]; 5] = [
    [0.55, 0.72, 0.92],
    [0.45, 0.36, 0.26],
    [0.66, 0.64, 0.60],
    [0.72, 0.34, 0.28],
    [0.34, 0.52, 0.38],
];
/// Texture (amplitude, angular frequency) per class.
const TEXTURE: [(f64, f64); 5] = [(0.05, 3.0), (0.14, 24.0), (0.12, 9.0), (0.16, 16.0), (0.18, 30.0)];

fn base_color(k: usize) -> [f64; 3] {
    if k < PALETTE.len() {
        return PALETTE[k];
    }
    // golden-angle hues for extra classes
    let h = (k as f64 * 0.618_033_988_75).fract() * TAU;
    std::array::from_fn(|c| 0.5 + 0.25 * (h + c as f64 * TAU / 3.0).cos())
}

/// A fully labeled sphere from which any projection can be rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereWorld {
    pub classes: usize,
    /// Lower edge of the sky; for two-class worlds the single horizon line.
    pub sky: Boundary,
    /// Upper edge of the ground (elevation, negative below the horizon).
    pub ground: Boundary,
    pub objects: Vec<SceneObject>,
    materials: Vec<Material>,
    gain: f64,
    offset: [f64; 3],
}

impl SphereWorld {
    /// Deterministic in `(spec, seed)`.
    pub fn generate(spec: &SceneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let k = spec.classes;
        let mut r = rng::stream(seed, "world");
        let (sky, ground) = if k == 2 {
            let h = Boundary::random(&mut r, (-5.0, 5.0), 1.0);
            (h, h)
        } else {
            (
                Boundary::random(&mut r, (15.0, 30.0), 1.0),
                Boundary::random(&mut r, (15.0, 30.0), -1.0),
            )
        };
        let mut objects = Vec::new();
        if k > FIRST_OBJECT as usize {
            let kinds = k - FIRST_OBJECT as usize;
            let n = r.gen_range(spec.objects[0]..=spec.objects[1]);
            for i in 0..n {
                let class = FIRST_OBJECT + (i % kinds) as u8;
                let shape = if r.gen_bool(0.5) { Shape::Rectangle } else { Shape::Ellipse };
                let theta = r.gen_range(0.0..TAU);
                let elevation = r.gen_range(-20.0..20.0_f64).to_radians();
                let half = [r.gen_range(8.0..22.0), r.gen_range(8.0..22.0)];
                objects.push(SceneObject::new(class, shape, theta, elevation, half));
            }
        }
        let jitter = spec.appearance_jitter;
        let materials = (0..k)
            .map(|c| {
                let (amp, freq) = TEXTURE.get(c).copied().unwrap_or((0.15, 12.0 + 3.0 * c as f64));
                let base = base_color(c);
                Material {
                    color: std::array::from_fn(|i| base[i] + jitter * r.gen_range(-1.0..1.0)),
                    tint: std::array::from_fn(|_| r.gen_range(0.6..1.0)),
                    amp,
                    freq,
                    waves: std::array::from_fn(|_| {
                        let phi = r.gen_range(0.0..PI);
                        let theta = r.gen_range(0.0..TAU);
                        (direction(phi, theta), r.gen_range(0.0..TAU))
                    }),
                }
            })
            .collect();
        let gain = 1.0 + jitter * r.gen_range(-2.0..2.0);
        let offset = std::array::from_fn(|_| jitter * r.gen_range(-1.0..1.0));
        Ok(Self {
            classes: k,
            sky,
            ground,
            objects,
            materials,
            gain,
            offset,
        })
    }

    /// Class of direction `d`; later objects cover earlier ones.
    pub fn label(&self, d: [f64; 3]) -> u8 {
        if let Some(o) = self.objects.iter().rev().find(|o| o.contains(d)) {
            return o.class;
        }
        let (phi, theta) = angles(d);
        let elevation = PI / 2.0 - phi;
        if self.classes == 2 {
            return if elevation >= self.sky.elevation(theta) { SKY } else { GROUND };
        }
        if elevation >= self.sky.elevation(theta) {
            SKY
        } else if elevation < self.ground.elevation(theta) {
            GROUND
        } else {
            WALL
        }
    }

    /// Label and RGB color of direction `d`.
    pub fn sample(&self, d: [f64; 3]) -> (u8, [f64; 3]) {
        let n = dot(d, d).sqrt();
        let u = d.map(|v| v / n);
        let label = self.label(u);
        let c = self.materials[label as usize].shade(u);
        let rgb = std::array::from_fn(|i| (self.gain * c[i] + self.offset[i]).clamp(0.0, 1.0));
        (label, rgb)
    }

    fn render(&self, id: &str, domain: Domain, h: usize, w: usize, ray: impl Fn(usize, usize) -> [f64; 3]) -> LabeledScene {
        let mut image = Vec::with_capacity(h * w * 3);
        let mut labels = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let (l, rgb) = self.sample(ray(i, j));
                labels.push(l);
                image.extend_from_slice(&rgb);
            }
        }
        LabeledScene {
            id: id.to_string(),
            domain,
            image: Tensor::new(&[h, w, 3], image).expect("sized buffer"),
            labels: Some(LabelMap::new(h, w, labels).expect("sized buffer")),
        }
    }

    /// Pixel `(i, j)` samples `φ = π(i+½)/H`, `θ = 2π(j+½)/W`.
    pub fn render_equirectangular(&self, h: usize, w: usize) -> Result<LabeledScene> {
        if h == 0 || w != 2 * h {
            return Err(Error::Config(format!("panorama {h}x{w} is not 2:1")));
        }
        Ok(self.render("panorama", Domain::Panorama, h, w, |i, j| {
            direction(
                PI * (i as f64 + 0.5) / h as f64,
                TAU * (j as f64 + 0.5) / w as f64,
            )
        }))
    }

    /// Perspective view; `yaw` and `pitch` in radians.
    pub fn render_pinhole(
        &self,
        h: usize,
        w: usize,
        fov_deg: f64,
        yaw: f64,
        pitch: f64,
    ) -> Result<LabeledScene> {
        if h == 0 || w == 0 {
            return Err(Error::Config("empty pinhole image".into()));
        }
        let cam = PinholeCamera::new(h, w, fov_deg, yaw, pitch)?;
        Ok(self.render("pinhole", Domain::Pinhole, h, w, |i, j| cam.ray(i, j)))
    }
}

/// Scenes per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    /// Labeled pinhole training scenes.
    pub source: usize,
    /// Unlabeled panoramas for adaptation.
    pub target: usize,
    /// Labeled panoramas for evaluation.
    pub test: usize,
    /// Held-out labeled pinhole scenes, for measuring the domain gap.
    pub source_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            source: 16,
            target: 16,
            test: 8,
            source_test: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
}

/// Index of a generated dataset; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: usize,
    pub source: Vec<ManifestEntry>,
    pub target: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    #[serde(default)]
    pub source_test: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Renders one scene of `split`; pinhole views get a random yaw and pitch.
pub fn render_split_scene(spec: &SceneSpec, split: &str, index: usize, seed: u64) -> Result<LabeledScene> {
    let key = format!("{split}/{index}");
    let world_seed: u64 = rng::stream(seed, &format!("world/{key}")).gen();
    let world = SphereWorld::generate(spec, world_seed)?;
    let mut scene = match split {
        "source" | "source_test" => {
            let mut cam = rng::stream(seed, &format!("camera/{key}"));
            let yaw = cam.gen_range(0.0..TAU);
            let pitch = cam.gen_range(-spec.pitch_deg..=spec.pitch_deg).to_radians();
            let [h, w] = spec.pinhole_size;
            world.render_pinhole(h, w, spec.fov_deg, yaw, pitch)?
        }
        "target" | "test" => {
            let [h, w] = spec.panorama_size();
            world.render_equirectangular(h, w)?
        }
        _ => return Err(Error::Config(format!("unknown split {split}"))),
    };
    scene.id = format!("{split}-{index:03}");
    Ok(scene)
}

/// Writes every split under `out_dir` and returns the manifest (also saved as
/// `manifest.json`). Target scenes are stored without labels.
pub fn build_datasets(spec: &SceneSpec, sizes: SplitSizes, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    if sizes.source == 0 || sizes.target == 0 || sizes.test == 0 {
        return Err(Error::Config(format!("split sizes must be >= 1, got {sizes:?}")));
    }
    let mut manifest = DatasetManifest {
        classes: spec.classes,
        source: vec![],
        target: vec![],
        test: vec![],
        source_test: vec![],
    };
    for (split, n) in [
        ("source", sizes.source),
        ("target", sizes.target),
        ("test", sizes.test),
        ("source_test", sizes.source_test),
    ] {
        fs::create_dir_all(out_dir.join(split))?;
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let scene = render_split_scene(spec, split, i, seed)?;
            let image = format!("{split}/{i:03}_image.pdt");
            scene.image.save(out_dir.join(&image))?;
            let labels = if split == "target" {
                None
            } else {
                let path = format!("{split}/{i:03}_labels.pdt");
                scene.labels()?.to_tensor().save(out_dir.join(&path))?;
                Some(path)
            };
            entries.push(ManifestEntry {
                id: scene.id,
                image,
                labels,
            });
        }
        match split {
            "source" => manifest.source = entries,
            "target" => manifest.target = entries,
            "test" => manifest.test = entries,
            _ => manifest.source_test = entries,
        }
    }
    fs::write(
        out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// All splits of a dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: usize,
    pub source: Vec<LabeledScene>,
    pub target: Vec<LabeledScene>,
    pub test: Vec<LabeledScene>,
    pub source_test: Vec<LabeledScene>,
}

impl Dataset {
    /// Loads from a manifest file or a directory containing `manifest.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let file: PathBuf = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let root = file.parent().unwrap_or(Path::new("."));
        let text = fs::read_to_string(&file)
            .map_err(|e| Error::Data(format!("{}: {e}", file.display())))?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", file.display())))?;
        let load = |entries: &[ManifestEntry], domain: Domain| -> Result<Vec<LabeledScene>> {
            entries
                .iter()
                .map(|e| {
                    let image = Tensor::load(root.join(&e.image))?;
                    let labels = match &e.labels {
                        Some(p) => Some(LabelMap::from_tensor(&Tensor::load(root.join(p))?)?),
                        None => None,
                    };
                    if image.rank() != 3 || image.shape()[2] != 3 {
                        return Err(Error::Data(format!("{}: image shape {:?}", e.image, image.shape())));
                    }
                    if let Some(l) = &labels {
                        if [l.height, l.width] != image.shape()[..2] {
                            return Err(Error::Data(format!("{}: label extents differ from image", e.id)));
                        }
                        if l.data.iter().any(|&v| v != crate::IGNORE && v as usize >= m.classes) {
                            return Err(Error::Data(format!("{}: label outside [0, {})", e.id, m.classes)));
                        }
                    }
                    Ok(LabeledScene {
                        id: e.id.clone(),
                        domain,
                        image,
                        labels,
                    })
                })
                .collect()
        };
        Ok(Self {
            classes: m.classes,
            source: load(&m.source, Domain::Pinhole)?,
            target: load(&m.target, Domain::Panorama)?,
            test: load(&m.test, Domain::Panorama)?,
            source_test: load(&m.source_test, Domain::Pinhole)?,
        })
    }
}
