//! Procedural multi-view scenes with known appearance variation, and the on-disk dataset
//! format shared with externally rendered inputs.
//!
//! The clean render of a scene is the average appearance (`rendered`); the varied render
//! is what a camera under changing conditions would record (`ground_truth`).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::appearance::{apply_affine, Affine, M_ID};
use crate::error::{Error, Result};
use crate::geometry::{Camera, DepthMap};
use crate::image::Image;
use crate::train::FrameBundle;

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

/// Smooth procedural albedo: two plane waves plus an optional checker, clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Texture {
    pub base: V3,
    pub amplitude: V3,
    pub waves: [V3; 2],
    pub phases: [f64; 2],
    /// Checker cell size in meters; zero disables the checker.
    pub checker: f64,
    pub checker_contrast: f64,
}

pub const ALBEDO_RANGE: (f64, f64) = (0.12, 0.72);

impl Texture {
    // the phase range literal is part of every seeded scene; keep it stable
    #[allow(clippy::approx_constant)]
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut wave = || -> V3 { std::array::from_fn(|_| rng.random_range(-6.0..6.0)) };
        let waves = [wave(), wave()];
        Texture {
            base: std::array::from_fn(|_| rng.random_range(0.3..0.55)),
            amplitude: std::array::from_fn(|_| rng.random_range(0.05..0.15)),
            waves,
            phases: [rng.random_range(0.0..6.28), rng.random_range(0.0..6.28)],
            checker: if rng.random_bool(0.5) { rng.random_range(0.2..0.5) } else { 0.0 },
            checker_contrast: rng.random_range(0.03..0.08),
        }
    }

    pub fn color(&self, p: V3) -> V3 {
        let s = 0.5 * (dot(self.waves[0], p) + self.phases[0]).sin() + 0.5 * (dot(self.waves[1], p) + self.phases[1]).sin();
        let checker = if self.checker > 0.0 {
            let k: i64 = p.iter().map(|v| (v / self.checker).floor() as i64).sum();
            if k.rem_euclid(2) == 0 { self.checker_contrast } else { -self.checker_contrast }
        } else {
            0.0
        };
        std::array::from_fn(|c| (self.base[c] + self.amplitude[c] * s + checker).clamp(ALBEDO_RANGE.0, ALBEDO_RANGE.1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    /// Finite rectangle spanned by `u_axis` and `normal x u_axis`.
    Plane { center: V3, normal: V3, u_axis: V3, half_extents: [f64; 2], texture: Texture },
    Sphere { center: V3, radius: f64, texture: Texture },
}

impl Primitive {
    /// Ray parameter of the nearest hit with `t > 0`.
    fn intersect(&self, o: V3, d: V3) -> Option<f64> {
        match self {
            Primitive::Plane { center, normal, u_axis, half_extents, .. } => {
                let denom = dot(d, *normal);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = dot(sub(*center, o), *normal) / denom;
                if t <= 1e-9 {
                    return None;
                }
                let p: V3 = std::array::from_fn(|k| o[k] + t * d[k] - center[k]);
                let v_axis = cross(*normal, *u_axis);
                (dot(p, *u_axis).abs() <= half_extents[0] && dot(p, v_axis).abs() <= half_extents[1]).then_some(t)
            }
            Primitive::Sphere { center, radius, .. } => {
                let oc = sub(o, *center);
                let b = dot(oc, d);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                [-b - sq, -b + sq].into_iter().find(|t| *t > 1e-9)
            }
        }
    }

    fn texture(&self) -> &Texture {
        match self {
            Primitive::Plane { texture, .. } | Primitive::Sphere { texture, .. } => texture,
        }
    }

    fn corners(&self) -> Vec<V3> {
        match self {
            Primitive::Plane { center, normal, u_axis, half_extents, .. } => {
                let v_axis = cross(*normal, *u_axis);
                let mut out = Vec::new();
                for su in [-1.0, 1.0] {
                    for sv in [-1.0, 1.0] {
                        out.push(std::array::from_fn(|k| {
                            center[k] + su * half_extents[0] * u_axis[k] + sv * half_extents[1] * v_axis[k]
                        }));
                    }
                }
                out
            }
            Primitive::Sphere { center, radius, .. } => vec![
                std::array::from_fn(|k| center[k] - radius),
                std::array::from_fn(|k| center[k] + radius),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub bounds_min: V3,
    pub bounds_max: V3,
    pub background: V3,
    pub seed: u64,
}

impl SceneSpec {
    /// Ground plane, three walls, and two spheres with seeded textures.
    pub fn default_scene(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let primitives = vec![
            Primitive::Plane {
                center: [0.0, 0.0, 0.0],
                normal: [0.0, 0.0, 1.0],
                u_axis: [1.0, 0.0, 0.0],
                half_extents: [3.0, 2.5],
                texture: Texture::random(&mut rng),
            },
            Primitive::Plane {
                center: [0.0, 2.5, 1.75],
                normal: [0.0, -1.0, 0.0],
                u_axis: [1.0, 0.0, 0.0],
                half_extents: [3.0, 1.75],
                texture: Texture::random(&mut rng),
            },
            Primitive::Plane {
                center: [-3.0, 0.0, 1.75],
                normal: [1.0, 0.0, 0.0],
                u_axis: [0.0, 1.0, 0.0],
                half_extents: [2.5, 1.75],
                texture: Texture::random(&mut rng),
            },
            Primitive::Plane {
                center: [3.0, 0.0, 1.75],
                normal: [-1.0, 0.0, 0.0],
                u_axis: [0.0, 1.0, 0.0],
                half_extents: [2.5, 1.75],
                texture: Texture::random(&mut rng),
            },
            Primitive::Sphere { center: [-0.6, 0.4, 0.55], radius: 0.55, texture: Texture::random(&mut rng) },
            Primitive::Sphere { center: [0.7, -0.3, 0.4], radius: 0.4, texture: Texture::random(&mut rng) },
        ];
        Self { primitives, bounds_min: [-3.0, -2.5, 0.0], bounds_max: [3.0, 2.5, 3.5], background: [0.0; 3], seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::Config("scene has no primitives".into()));
        }
        for p in &self.primitives {
            for c in p.corners() {
                if (0..3).any(|k| c[k] < self.bounds_min[k] - 1e-9 || c[k] > self.bounds_max[k] + 1e-9) {
                    return Err(Error::Config("primitive extends outside the scene bounds".into()));
                }
            }
        }
        Ok(())
    }

    /// Scene bounds grown by `frac` of the extent on every side.
    pub fn padded_bounds(&self, frac: f64) -> (V3, V3) {
        pad_box(self.bounds_min, self.bounds_max, frac)
    }
}

pub fn pad_box(lo: V3, hi: V3, frac: f64) -> (V3, V3) {
    let pad: V3 = std::array::from_fn(|k| frac * (hi[k] - lo[k]));
    (std::array::from_fn(|k| lo[k] - pad[k]), std::array::from_fn(|k| hi[k] + pad[k]))
}

/// Ray-traced clean image and exact z-depth. Missed pixels get the background color and
/// are invalid in the depth map.
pub fn render_oracle(scene: &SceneSpec, camera: &Camera) -> (Image, DepthMap) {
    let (w, h) = (camera.width, camera.height);
    let o = camera.center();
    let rows: Vec<Vec<(V3, Option<f64>)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let (d, cos) = camera.ray([x as f64 + 0.5, y as f64 + 0.5]);
                    let hit = scene
                        .primitives
                        .iter()
                        .filter_map(|p| p.intersect(o, d).map(|t| (t, p)))
                        .min_by(|a, b| a.0.total_cmp(&b.0));
                    match hit {
                        Some((t, p)) => {
                            let point: V3 = std::array::from_fn(|k| o[k] + t * d[k]);
                            (p.texture().color(point), Some(t * cos))
                        }
                        None => (scene.background, None),
                    }
                })
                .collect()
        })
        .collect();
    let mut img = Image::new(w, h);
    let mut depth = DepthMap::invalid(w, h);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, d)) in row.into_iter().enumerate() {
            img.set(x, y, c);
            depth.set(x, y, d);
        }
    }
    (img, depth)
}

/// Multiplicative spatial light with a cosine falloff to 1 at `radius`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalLight {
    pub center: V3,
    pub radius: f64,
    pub gain: V3,
}

impl LocalLight {
    /// Per-channel multiplier at world point `p`.
    pub fn factor(&self, p: V3) -> V3 {
        let d = norm(sub(p, self.center));
        if d >= self.radius {
            return [1.0; 3];
        }
        let falloff = 0.5 * (1.0 + (std::f64::consts::PI * d / self.radius).cos());
        self.gain.map(|g| 1.0 + (g - 1.0) * falloff)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationSpec {
    /// Per-view affine, indexed by view id; views past the end use the identity.
    pub global_affines: Vec<Affine>,
    pub local_lights: Vec<LocalLight>,
    pub seed: u64,
}

impl VariationSpec {
    pub fn none() -> Self {
        Self { global_affines: Vec::new(), local_lights: Vec::new(), seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.local_lights {
            if !(l.radius > 0.0) || l.gain.iter().any(|g| !(*g > 0.0)) {
                return Err(Error::Config("local lights need positive radius and gains".into()));
            }
        }
        Ok(())
    }

    pub fn global_affine(&self, view_id: usize) -> Affine {
        self.global_affines.get(view_id).copied().unwrap_or(M_ID)
    }
}

/// How per-view variation is drawn when generating a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariationConfig {
    pub global: bool,
    /// Range of the shared exposure multiplier.
    pub exposure: [f64; 2],
    /// Per-channel white-balance multiplier range.
    pub white_balance: [f64; 2],
    /// Per-channel bias range.
    pub bias: [f64; 2],
    pub local_lights: Vec<LocalLight>,
}

impl Default for VariationConfig {
    fn default() -> Self {
        Self {
            global: true,
            exposure: [0.8, 1.15],
            white_balance: [0.92, 1.08],
            bias: [-0.05, 0.05],
            local_lights: Vec::new(),
        }
    }
}

impl VariationConfig {
    pub fn none() -> Self {
        Self { global: false, ..Self::default() }
    }

    /// A warm light pooled on the ground right of the spheres, visible from every orbit
    /// position and in the right half of every held-out view.
    pub fn street_lamp() -> LocalLight {
        LocalLight { center: [1.3, 0.6, 0.0], radius: 1.1, gain: [1.4, 1.25, 0.75] }
    }

    pub fn sample(&self, n_views: usize, seed: u64) -> VariationSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a11f);
        let global_affines = if self.global {
            (0..n_views)
                .map(|_| {
                    let exposure = rng.random_range(self.exposure[0]..=self.exposure[1]);
                    let mut m = [0.0; 12];
                    for c in 0..3 {
                        m[4 * c + c] = exposure * rng.random_range(self.white_balance[0]..=self.white_balance[1]);
                        m[4 * c + 3] = rng.random_range(self.bias[0]..=self.bias[1]);
                    }
                    m
                })
                .collect()
        } else {
            Vec::new()
        };
        VariationSpec { global_affines, local_lights: self.local_lights.clone(), seed }
    }
}

/// Varied image: the view's global affine, then every local light, clamped to `[0, 1]`.
pub fn inject_variation(
    clean: &Image,
    depth: &DepthMap,
    camera: &Camera,
    view_id: usize,
    spec: &VariationSpec,
) -> Result<Image> {
    if !clean.same_size(&Image::new(depth.width(), depth.height())) {
        return Err(Error::Dimension("image and depth map sizes differ".into()));
    }
    let a = spec.global_affine(view_id);
    let mut out = clean.clone();
    for y in 0..clean.height() {
        for x in 0..clean.width() {
            let mut c = apply_affine(clean.get(x, y), &a);
            if let Some(d) = depth.get(x, y) {
                let p = camera.back_project_unchecked([x as f64 + 0.5, y as f64 + 0.5], d);
                for l in &spec.local_lights {
                    let f = l.factor(p);
                    for k in 0..3 {
                        c[k] *= f[k];
                    }
                }
            }
            out.set(x, y, c.map(|v| v.clamp(0.0, 1.0)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub fov_x_deg: f64,
    pub orbit_radius: f64,
    pub orbit_height: f64,
    /// Angular extent of the camera arc, centered on the view facing the back wall.
    pub arc_deg: f64,
    pub target: V3,
    pub seed: u64,
    pub variation: VariationConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            n_train: 8,
            n_test: 2,
            fov_x_deg: 60.0,
            orbit_radius: 3.2,
            orbit_height: 1.7,
            arc_deg: 120.0,
            target: [0.0, 0.3, 0.5],
            seed: 0,
            variation: VariationConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train + self.n_test < 2 || self.n_train == 0 {
            return Err(Error::Config("a dataset needs at least 2 views and 1 training view".into()));
        }
        if self.width < 2 || self.height < 1 {
            return Err(Error::Config("image must be at least 2x1".into()));
        }
        Ok(())
    }

    /// Cameras on the arc, in view-id order.
    pub fn orbit(&self) -> Result<Vec<Camera>> {
        let n = self.n_train + self.n_test;
        (0..n)
            .map(|k| {
                let t = if n == 1 { 0.5 } else { k as f64 / (n - 1) as f64 };
                let theta = (t - 0.5) * self.arc_deg.to_radians();
                // theta = 0 sits on -y looking toward the back wall at +y
                let eye = [
                    self.target[0] + self.orbit_radius * theta.sin(),
                    self.target[1] - self.orbit_radius * theta.cos(),
                    self.orbit_height,
                ];
                Camera::look_at(eye, self.target, [0.0, 0.0, 1.0], self.fov_x_deg, self.width, self.height)
            })
            .collect()
    }

    /// View ids of the held-out views, spread evenly between training views.
    pub fn test_views(&self) -> Vec<usize> {
        let n = self.n_train + self.n_test;
        (0..self.n_test).map(|j| (((j as f64 + 0.5) * n as f64 / self.n_test as f64) as usize).min(n - 1)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub view_id: usize,
    pub split: Split,
    pub rendered: String,
    pub depth: String,
    pub camera: String,
    #[serde(default)]
    pub ground_truth: Option<String>,
    #[serde(default)]
    pub rendered_png: Option<String>,
    #[serde(default)]
    pub ground_truth_png: Option<String>,
}

pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<FrameEntry>,
    /// Hash-grid domain box; derived from the frames when absent.
    #[serde(default)]
    pub domain: Option<[V3; 2]>,
    #[serde(default)]
    pub depth_range: Option<[f64; 2]>,
    #[serde(default)]
    pub scene: Option<SceneSpec>,
    #[serde(default)]
    pub variation: Option<VariationSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<FrameBundle>,
    pub test: Vec<FrameBundle>,
    pub domain: [V3; 2],
    pub depth_range: [f64; 2],
    pub scene: Option<SceneSpec>,
    pub variation: Option<VariationSpec>,
}

/// Renders every view, injects the variation, and splits train/test.
///
/// Images and depths are rounded through `f32` so the in-memory dataset equals what a
/// save/load round trip produces.
pub fn generate_dataset(scene: &SceneSpec, config: &DatasetConfig) -> Result<Dataset> {
    scene.validate()?;
    config.validate()?;
    let cameras = config.orbit()?;
    let variation = config.variation.sample(cameras.len(), config.seed);
    variation.validate()?;
    let test_ids = config.test_views();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (view_id, camera) in cameras.into_iter().enumerate() {
        let (clean, depth) = render_oracle(scene, &camera);
        let (clean, depth) = (clean.quantized_f32(), depth.quantized_f32());
        let gt = inject_variation(&clean, &depth, &camera, view_id, &variation)?.quantized_f32();
        let bundle = FrameBundle { view_id, rendered: clean, depth, camera, ground_truth: Some(gt) };
        if test_ids.contains(&view_id) {
            test.push(bundle);
        } else {
            train.push(bundle);
        }
    }
    let (lo, hi) = scene.padded_bounds(0.05);
    let depth_range = depth_range_of(train.iter().chain(&test)).unwrap_or([0.0, 1.0]);
    Ok(Dataset {
        train,
        test,
        domain: [lo, hi],
        depth_range,
        scene: Some(scene.clone()),
        variation: Some(variation),
    })
}

fn depth_range_of<'a>(frames: impl Iterator<Item = &'a FrameBundle>) -> Option<[f64; 2]> {
    frames.filter_map(|f| f.depth.range()).fold(None, |acc, (lo, hi)| match acc {
        None => Some([lo, hi]),
        Some([a, b]) => Some([a.min(lo), b.max(hi)]),
    })
}

/// Bounding box of all back-projected valid depths, padded by 5%.
fn domain_from_frames<'a>(frames: impl Iterator<Item = &'a FrameBundle>) -> Option<[V3; 2]> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut any = false;
    for f in frames {
        for y in 0..f.depth.height() {
            for x in 0..f.depth.width() {
                if let Some(d) = f.depth.get(x, y) {
                    let p = f.camera.back_project_unchecked([x as f64 + 0.5, y as f64 + 0.5], d);
                    for k in 0..3 {
                        lo[k] = lo[k].min(p[k]);
                        hi[k] = hi[k].max(p[k]);
                    }
                    any = true;
                }
            }
        }
    }
    if !any {
        return None;
    }
    for k in 0..3 {
        if hi[k] - lo[k] < 1e-6 {
            hi[k] += 0.5;
            lo[k] -= 0.5;
        }
    }
    let (a, b) = pad_box(lo, hi, 0.05);
    Some([a, b])
}

impl Dataset {
    pub fn all_frames(&self) -> impl Iterator<Item = &FrameBundle> {
        self.train.iter().chain(&self.test)
    }

    pub fn train_view_ids(&self) -> Vec<usize> {
        self.train.iter().map(|f| f.view_id).collect()
    }

    /// Writes PFM/PNG/JSON files and, last, the manifest.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut frames = Vec::new();
        let mut all: Vec<(&FrameBundle, Split)> = self.train.iter().map(|f| (f, Split::Train)).collect();
        all.extend(self.test.iter().map(|f| (f, Split::Test)));
        all.sort_by_key(|(f, _)| f.view_id);
        for (f, split) in all {
            let stem = format!("view_{:03}", f.view_id);
            let entry = FrameEntry {
                view_id: f.view_id,
                split,
                rendered: format!("{stem}_rendered.pfm"),
                depth: format!("{stem}_depth.pfm"),
                camera: format!("{stem}_camera.json"),
                ground_truth: f.ground_truth.as_ref().map(|_| format!("{stem}_gt.pfm")),
                rendered_png: Some(format!("{stem}_rendered.png")),
                ground_truth_png: f.ground_truth.as_ref().map(|_| format!("{stem}_gt.png")),
            };
            f.rendered.write_pfm(dir.join(&entry.rendered))?;
            f.rendered.write_png(dir.join(entry.rendered_png.as_ref().unwrap()))?;
            f.depth.write_pfm(dir.join(&entry.depth))?;
            f.camera.to_json_file(dir.join(&entry.camera))?;
            if let (Some(gt), Some(p), Some(png)) = (&f.ground_truth, &entry.ground_truth, &entry.ground_truth_png) {
                gt.write_pfm(dir.join(p))?;
                gt.write_png(dir.join(png))?;
            }
            frames.push(entry);
        }
        let first = self.all_frames().next().ok_or_else(|| Error::Config("empty dataset".into()))?;
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            width: first.rendered.width(),
            height: first.rendered.height(),
            frames,
            domain: Some(self.domain),
            depth_range: Some(self.depth_range),
            scene: self.scene.clone(),
            variation: self.variation.clone(),
        };
        let path = dir.join(MANIFEST_NAME);
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Loads a dataset directory: generated, or external renders in the same layout.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format { path: mpath, msg: format!("unsupported manifest version {}", manifest.version) });
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for e in &manifest.frames {
            let rendered = Image::read_pfm(dir.join(&e.rendered))?;
            let depth = DepthMap::read_pfm(dir.join(&e.depth))?;
            let camera = Camera::from_json_file(dir.join(&e.camera))?;
            let ground_truth = e.ground_truth.as_ref().map(|p| Image::read_pfm(dir.join(p))).transpose()?;
            let sizes_ok = rendered.width() == manifest.width
                && rendered.height() == manifest.height
                && depth.width() == manifest.width
                && depth.height() == manifest.height
                && camera.width == manifest.width
                && camera.height == manifest.height
                && ground_truth.as_ref().is_none_or(|g| rendered.same_size(g));
            if !sizes_ok {
                return Err(Error::Format { path: dir.join(&e.rendered), msg: format!("view {} raster sizes disagree", e.view_id) });
            }
            let f = FrameBundle { view_id: e.view_id, rendered, depth, camera, ground_truth };
            match e.split {
                Split::Train => train.push(f),
                Split::Test => test.push(f),
            }
        }
        let frames = || train.iter().chain(&test);
        let domain = match manifest.domain {
            Some(d) => d,
            None => domain_from_frames(frames()).ok_or_else(|| Error::Config("no valid depth in dataset".into()))?,
        };
        let depth_range = manifest.depth_range.or_else(|| depth_range_of(frames())).unwrap_or([0.0, 1.0]);
        Ok(Dataset { train, test, domain, depth_range, scene: manifest.scene, variation: manifest.variation })
    }
}

/// SHA-256 over the manifest and every file it references, in manifest order.
pub fn dataset_hash(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_NAME);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    let mut h = Sha256::new();
    h.update(&text);
    for e in &manifest.frames {
        let mut files: Vec<&String> = vec![&e.rendered, &e.depth, &e.camera];
        files.extend(e.ground_truth.iter());
        for f in files {
            let p: PathBuf = dir.join(f);
            h.update(fs::read(&p).map_err(|err| Error::io(&p, err))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}
