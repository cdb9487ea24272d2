//! Procedural scenes with exact depth, normals and mattes.
//!
//! The camera is orthographic and looks straight down at a gently tilted
//! ground plane. Image column `c` and row `r` map to world
//! `x = (c + ½)·pitch`, `y = (r + ½)·pitch`; depth grows away from the
//! camera. Normals are expressed as `(x, y, toward-camera)`, so a surface
//! `d(x, y)` has normal `normalize(∂d/∂x, ∂d/∂y, 1)`. The ground is darker
//! than every object, and object brightness falls with depth.

use std::fs;
use std::path::{Path, PathBuf};

use crate::dtf::{self, Meta};
use crate::encoding::{PointPrompt, DEFAULT_PROMPT_SIGMA};
use crate::error::SynthError;
use crate::rng::SeededRng;
use crate::tensor::{DenseMap, Task, ValueRange};

pub const DEFAULT_RESOLUTION: usize = 64;
pub const MAX_OBJECTS: usize = 8;
/// Feather width of the matte edge, in pixels.
const FEATHER_PX: f64 = 2.0;
/// Smallest object radius (half side for boxes), in pixels.
const MIN_OBJECT_PX: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Sphere centered at `(x, y)` with its center at `depth`.
    Sphere { x: f64, y: f64, depth: f64, radius: f64, albedo: [f64; 3] },
    /// Axis-aligned box seen from above; only its top face is visible.
    Box { x0: f64, x1: f64, y0: f64, y1: f64, top: f64, albedo: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq)]
/// Plane `d(x, y) = depth + slope[0]·x + slope[1]·y`.
pub struct Ground {
    pub depth: f64,
    pub slope: [f64; 2],
    pub albedo: [f64; 3],
}

impl Ground {
    pub fn depth_at(&self, x: f64, y: f64) -> f64 {
        self.depth + self.slope[0] * x + self.slope[1] * y
    }

    fn hit(&self, x: f64, y: f64) -> Hit {
        let [gx, gy] = self.slope;
        let n = (gx * gx + gy * gy + 1.0).sqrt();
        Hit { depth: self.depth_at(x, y), normal: [gx / n, gy / n, 1.0 / n], albedo: self.albedo }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub ground: Option<Ground>,
    /// Unit vector toward the light.
    pub light: [f64; 3],
    pub depth_range: (f64, f64),
    /// World width covered by the image, in meters.
    pub footprint: f64,
}

/// Rendered maps for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub rgb: DenseMap,
    pub depth: DenseMap,
    pub normal: DenseMap,
    pub alpha: DenseMap,
    pub prompt: Option<PointPrompt>,
}

/// What a pixel sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Background,
    Ground,
    /// Index into [`Scene::primitives`].
    Primitive(usize),
}

struct Hit {
    depth: f64,
    normal: [f64; 3],
    albedo: [f64; 3],
}

impl Primitive {
    fn hit(&self, x: f64, y: f64) -> Option<Hit> {
        match *self {
            Primitive::Sphere { x: cx, y: cy, depth, radius, albedo } => {
                let (dx, dy) = (x - cx, y - cy);
                let s2 = radius * radius - dx * dx - dy * dy;
                if s2 < 0.0 {
                    return None;
                }
                let s = s2.sqrt();
                Some(Hit { depth: depth - s, normal: [dx / radius, dy / radius, s / radius], albedo })
            }
            Primitive::Box { x0, x1, y0, y1, top, albedo } => {
                (x >= x0 && x <= x1 && y >= y0 && y <= y1).then_some(Hit { depth: top, normal: [0.0, 0.0, 1.0], albedo })
            }
        }
    }

    /// Signed distance to the silhouette edge in meters, positive inside.
    fn silhouette_distance(&self, x: f64, y: f64) -> f64 {
        match *self {
            Primitive::Sphere { x: cx, y: cy, radius, .. } => radius - ((x - cx).powi(2) + (y - cy).powi(2)).sqrt(),
            Primitive::Box { x0, x1, y0, y1, .. } => {
                let dx = (x0 - x).max(x - x1);
                let dy = (y0 - y).max(y - y1);
                if dx <= 0.0 && dy <= 0.0 {
                    -dx.max(dy)
                } else {
                    -(dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt()
                }
            }
        }
    }

    fn nearest_depth(&self) -> f64 {
        match *self {
            Primitive::Sphere { depth, radius, .. } => depth - radius,
            Primitive::Box { top, .. } => top,
        }
    }
}

impl Scene {
    pub fn pitch(&self, resolution: usize) -> f64 {
        self.footprint / resolution as f64
    }

    /// Nearest surface at world position `(x, y)`.
    fn closest_hit(&self, x: f64, y: f64) -> (Surface, Option<Hit>) {
        let mut best = self.ground.as_ref().map(|g| (Surface::Ground, g.hit(x, y)));
        for (k, p) in self.primitives.iter().enumerate() {
            if let Some(h) = p.hit(x, y) {
                if best.as_ref().map_or(true, |b| h.depth < b.1.depth) {
                    best = Some((Surface::Primitive(k), h));
                }
            }
        }
        match best {
            Some((s, h)) => (s, Some(h)),
            None => (Surface::Background, None),
        }
    }

    /// Which surface is visible at each pixel, row-major.
    pub fn surfaces(&self, resolution: usize) -> Vec<Surface> {
        let pitch = self.pitch(resolution);
        (0..resolution * resolution)
            .map(|i| {
                let (r, c) = (i / resolution, i % resolution);
                self.closest_hit((c as f64 + 0.5) * pitch, (r as f64 + 0.5) * pitch).0
            })
            .collect()
    }

    /// Z-buffer rasterization at pixel centers.
    pub fn render(&self, resolution: usize) -> Result<(DenseMap, DenseMap, DenseMap, DenseMap), SynthError> {
        let n = resolution;
        let pitch = self.pitch(n);
        let (mut rgb, mut depth, mut normal, mut alpha) =
            (Vec::with_capacity(3 * n * n), Vec::with_capacity(n * n), Vec::with_capacity(3 * n * n), Vec::with_capacity(n * n));
        for r in 0..n {
            for c in 0..n {
                let (x, y) = ((c as f64 + 0.5) * pitch, (r as f64 + 0.5) * pitch);
                let hit = self
                    .closest_hit(x, y)
                    .1
                    .unwrap_or(Hit { depth: self.depth_range.1, normal: [0.0, 0.0, 1.0], albedo: [0.0; 3] });
                let shade = (hit.normal[0] * self.light[0] + hit.normal[1] * self.light[1] + hit.normal[2] * self.light[2]).max(0.0);
                rgb.extend(hit.albedo.iter().map(|a| a * shade));
                depth.push(hit.depth);
                normal.extend_from_slice(&hit.normal);
                let sd_px = self
                    .primitives
                    .iter()
                    .map(|p| p.silhouette_distance(x, y) / pitch)
                    .fold(f64::NEG_INFINITY, f64::max);
                alpha.push((sd_px / FEATHER_PX + 0.5).clamp(0.0, 1.0));
            }
        }
        Ok((
            DenseMap::new(n, n, 3, rgb, Task::Rgb, ValueRange::UNIT)?,
            DenseMap::new(n, n, 1, depth, Task::Depth, ValueRange::Meters)?,
            DenseMap::new(n, n, 3, normal, Task::Normal, ValueRange::UnitVector)?,
            DenseMap::new(n, n, 1, alpha, Task::Matting, ValueRange::UNIT)?,
        ))
    }
}

fn random_albedo(rng: &mut SeededRng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.uniform_range(lo, hi), rng.uniform_range(lo, hi), rng.uniform_range(lo, hi)]
}

/// Samples a scene: a gently tilted ground plane in the far part of
/// `depth_range` and `n_objects` spheres or boxes resting on it. Object tops
/// are log-uniform in depth, so near structure is well represented.
pub fn random_scene(rng: &mut SeededRng, resolution: usize, n_objects: usize, depth_range: (f64, f64)) -> Result<Scene, SynthError> {
    if resolution < 16 {
        return Err(SynthError::Resolution(resolution));
    }
    if !(1..=MAX_OBJECTS).contains(&n_objects) {
        return Err(SynthError::ObjectCount(n_objects));
    }
    let (y_min, y_max) = depth_range;
    if !(y_min > 0.0 && y_max > y_min * 4.0) {
        return Err(SynthError::DepthRange(y_min, y_max));
    }
    let footprint = 1.2 * y_max;
    let pitch = footprint / resolution as f64;
    // Center depth in [0.75, 0.85]·y_max; each slope moves a corner by at
    // most 0.06·y_max, so the plane stays within [0.63, 0.97]·y_max.
    let slope_max = 0.1 * y_max / footprint;
    let ground = Ground {
        depth: 0.0,
        slope: [rng.uniform_range(-slope_max, slope_max), rng.uniform_range(-slope_max, slope_max)],
        albedo: random_albedo(rng, 0.1, 0.25),
    };
    let center = footprint / 2.0;
    let ground = Ground { depth: y_max * rng.uniform_range(0.75, 0.85) - ground.depth_at(center, center), ..ground };
    let (lx, ly) = (rng.uniform_range(-0.5, 0.5), rng.uniform_range(-0.5, 0.5));
    let ln = (lx * lx + ly * ly + 1.0).sqrt();
    let light = [lx / ln, ly / ln, 1.0 / ln];
    let nearest = y_min * 1.05;
    let mut primitives = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let (x, y) = (rng.uniform() * footprint, rng.uniform() * footprint);
        let base = ground.depth_at(x, y);
        let farthest = base - 2.0 * MIN_OBJECT_PX * pitch;
        let u = rng.uniform();
        let top = (nearest.ln() + u * (farthest.ln() - nearest.ln())).exp();
        let half = (base - top) / 2.0;
        // Brightness falls with log depth of the top, a monocular cue the
        // toy networks can pick up locally; hue stays random.
        let brightness = 1.0 - 0.7 * u;
        let albedo = random_albedo(rng, 0.8, 1.0).map(|h| h * brightness);
        primitives.push(if rng.uniform() < 0.5 {
            Primitive::Sphere { x, y, depth: base - half, radius: half, albedo }
        } else {
            Primitive::Box { x0: x - half, x1: x + half, y0: y - half, y1: y + half, top, albedo }
        });
    }
    Ok(Scene {
        primitives,
        ground: Some(ground),
        light,
        depth_range,
        footprint,
    })
}

/// Renders a random scene and samples a point prompt from its matte.
pub fn generate(rng: &mut SeededRng, resolution: usize, n_objects: usize, depth_range: (f64, f64)) -> Result<Sample, SynthError> {
    let scene = random_scene(rng, resolution, n_objects, depth_range)?;
    debug_assert!(scene.primitives.iter().all(|p| p.nearest_depth() >= depth_range.0));
    let (rgb, depth, normal, alpha) = scene.render(resolution)?;
    let prompt = PointPrompt::sample_from_alpha(rng, &alpha, DEFAULT_PROMPT_SIGMA * resolution as f64 / 64.0);
    Ok(Sample { rgb, depth, normal, alpha, prompt })
}

/// Dataset generation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitParams {
    pub resolution: usize,
    pub depth_range: (f64, f64),
    pub max_objects: usize,
}

impl Default for SplitParams {
    fn default() -> Self {
        SplitParams { resolution: DEFAULT_RESOLUTION, depth_range: (0.1, 80.0), max_objects: MAX_OBJECTS }
    }
}

const KINDS: [&str; 5] = ["rgb", "depth", "normal", "alpha", "prompt"];

/// Scene for sample `index` of a split. Validation indices start at
/// `n_train`, so the two splits never share a seed.
pub fn split_sample(master_seed: u64, global_index: u64, params: &SplitParams) -> Result<Sample, SynthError> {
    let mut rng = SeededRng::new(master_seed).derive(global_index);
    let n_objects = 1 + rng.below(params.max_objects.clamp(1, MAX_OBJECTS));
    generate(&mut rng, params.resolution, n_objects, params.depth_range)
}

fn write_sample(dir: &Path, index: usize, sample: &Sample) -> Result<String, SynthError> {
    let name = format!("{index:05}.dtf");
    dtf::write_dtf(&sample.rgb, &dir.join("rgb").join(&name))?;
    dtf::write_dtf(&sample.depth, &dir.join("depth").join(&name))?;
    dtf::write_dtf(&sample.normal, &dir.join("normal").join(&name))?;
    dtf::write_dtf(&sample.alpha, &dir.join("alpha").join(&name))?;
    let n = sample.alpha.height();
    let mut meta = Meta::new();
    let mask = match &sample.prompt {
        Some(p) => {
            p.to_meta(&mut meta);
            crate::encoding::point_prompt_mask(p, n, sample.alpha.width())?
        }
        None => DenseMap::new(n, sample.alpha.width(), 1, vec![-1.0; n * sample.alpha.width()], Task::Matting, ValueRange::SYMMETRIC)?,
    };
    dtf::write_dtf_with_meta(&mask, &dir.join("prompt").join(&name), &meta)?;
    Ok(KINDS.iter().map(|k| format!("{k}/{name}")).collect::<Vec<_>>().join(" "))
}

fn write_split(dir: &Path, master_seed: u64, offset: usize, count: usize, params: &SplitParams) -> Result<(), SynthError> {
    for kind in KINDS {
        fs::create_dir_all(dir.join(kind))?;
    }
    let mut manifest = String::new();
    for i in 0..count {
        let sample = split_sample(master_seed, (offset + i) as u64, params)?;
        manifest.push_str(&write_sample(dir, i, &sample)?);
        manifest.push('\n');
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Writes `<root>/train` and `<root>/val`, each with per-kind DTF folders and
/// a `manifest.txt` listing one relative path tuple per line.
pub fn make_split(root: &Path, master_seed: u64, n_train: usize, n_val: usize, params: &SplitParams) -> Result<(), SynthError> {
    if n_train == 0 || n_val == 0 {
        return Err(SynthError::EmptySplit);
    }
    if root.exists() && fs::read_dir(root)?.next().is_some() {
        return Err(SynthError::DirectoryNotEmpty(root.display().to_string()));
    }
    write_split(&root.join("train"), master_seed, 0, n_train, params)?;
    write_split(&root.join("val"), master_seed, n_train, n_val, params)?;
    fs::write(
        root.join("params.txt"),
        format!(
            "seed={master_seed}\nn_train={n_train}\nn_val={n_val}\nresolution={}\nrange={}:{}\nmax_objects={}\n",
            params.resolution, params.depth_range.0, params.depth_range.1, params.max_objects
        ),
    )?;
    Ok(())
}

/// Paths listed by one manifest line.
#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub normal: PathBuf,
    pub alpha: PathBuf,
    pub prompt: PathBuf,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, SynthError> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != KINDS.len() {
                return Err(SynthError::Manifest(format!("expected {} paths: {line}", KINDS.len())));
            }
            Ok(ManifestEntry {
                rgb: dir.join(parts[0]),
                depth: dir.join(parts[1]),
                normal: dir.join(parts[2]),
                alpha: dir.join(parts[3]),
                prompt: dir.join(parts[4]),
            })
        })
        .collect()
}

/// Loads every sample of a split directory, in manifest order.
pub fn load_split(dir: &Path) -> Result<Vec<Sample>, SynthError> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            let prompt = PointPrompt::from_meta(&dtf::read_meta(&e.prompt)?)?;
            Ok(Sample {
                rgb: dtf::read_dtf(&e.rgb)?,
                depth: dtf::read_dtf(&e.depth)?,
                normal: dtf::read_dtf(&e.normal)?,
                alpha: dtf::read_dtf(&e.alpha)?,
                prompt,
            })
        })
        .collect()
}
