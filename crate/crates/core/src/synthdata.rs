//! Deterministic synthetic traffic scenes with parametric domain shifts:
//! geometric "vehicles" on a textured background, shifted by brightness,
//! blur, and noise. Content is a pure function of (spec, index).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::autodiff::Tensor;
use crate::detector::BoxLabel;
use crate::error::{Error, Result};

/// Row-major `[y][x][channel]` image with values in [0, 1].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image { h, w, data: vec![0.0; h * w * 3] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.w + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.w + x) * 3 + c] = v;
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Pixel-rows layout consumed by the backbone: `[h*w x 3]`.
    pub fn to_pixel_rows(&self) -> Tensor {
        Tensor::from_vec(self.h * self.w, 3, self.data.clone())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64
    }
}

/// One rendering domain: scene statistics plus the photometric shift stack.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub tag: String,
    pub image_size: usize,
    pub brightness: f64,
    pub noise_std: f64,
    pub blur_radius: usize,
    pub object_density: f64,
    pub max_objects: usize,
    /// One base color per class; the class count of the domain.
    pub palette: Vec<[f64; 3]>,
    pub seed: u64,
}

pub fn default_palette() -> Vec<[f64; 3]> {
    vec![
        [0.85, 0.25, 0.20], // car: red, wide rectangle
        [0.90, 0.80, 0.20], // bus: yellow, long rectangle
        [0.25, 0.45, 0.85], // truck: blue, disc
    ]
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec {
            tag: "domain".into(),
            image_size: 64,
            brightness: 1.0,
            noise_std: 0.0,
            blur_radius: 0,
            object_density: 3.0,
            max_objects: 8,
            palette: default_palette(),
            seed: 0,
        }
    }
}

impl DomainSpec {
    pub fn classes(&self) -> usize {
        self.palette.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.brightness > 0.0 && self.brightness.is_finite()) {
            return Err(Error::Config(format!("brightness {} must be > 0", self.brightness)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        if !(self.object_density >= 0.0 && self.object_density.is_finite()) {
            return Err(Error::Config(format!("density {} must be >= 0", self.object_density)));
        }
        if self.object_density > self.max_objects as f64 {
            return Err(Error::Config(format!(
                "density {} exceeds max_objects {}; rejection would stall",
                self.object_density, self.max_objects
            )));
        }
        if self.palette.is_empty() {
            return Err(Error::Config("palette must name at least one class".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size {} too small", self.image_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneSample {
    pub image: Image,
    pub annotations: Vec<BoxLabel>,
    pub domain_tag: String,
}

/// Geometry and shift noise are drawn from separate streams so the same
/// (seed, index) renders identical scenes under different shift settings.
fn scene_rng(seed: u64, index: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index * 2 + lane);
    rng
}

fn sample_object_count(rng: &mut ChaCha8Rng, density: f64, max_objects: usize) -> usize {
    if density == 0.0 {
        return 0;
    }
    let poisson = Poisson::new(density).expect("validated density");
    loop {
        let n = poisson.sample(rng) as usize;
        if n <= max_objects {
            return n;
        }
    }
}

/// The scene before any domain shift is applied.
pub fn render_clean(spec: &DomainSpec, index: u64) -> SceneSample {
    let (h, w) = (spec.image_size, spec.image_size);
    let mut rng = scene_rng(spec.seed, index, 0);
    let mut image = Image::new(h, w);

    // Textured background: tinted base, vertical gradient, faint stripes.
    let base: [f64; 3] = [
        0.30 + rng.gen_range(-0.05..0.05),
        0.33 + rng.gen_range(-0.05..0.05),
        0.30 + rng.gen_range(-0.05..0.05),
    ];
    let gradient = rng.gen_range(-0.08..0.08);
    let freq = rng.gen_range(1.0..3.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    for y in 0..h {
        let fall = gradient * y as f64 / (h - 1).max(1) as f64;
        for x in 0..w {
            let stripe =
                0.02 * (std::f64::consts::TAU * freq * x as f64 / w as f64 + phase).sin();
            for c in 0..3 {
                image.set(y, x, c, base[c] + fall + stripe);
            }
        }
    }

    // Vehicles: class-specific shape and color, fully inside the frame.
    let unit = spec.image_size as f64 / 64.0;
    let scaled = |lo: usize, hi: usize, rng: &mut ChaCha8Rng| -> usize {
        let lo = ((lo as f64 * unit) as usize).max(2);
        let hi = ((hi as f64 * unit) as usize).max(lo + 1);
        rng.gen_range(lo..hi)
    };
    let count = sample_object_count(&mut rng, spec.object_density, spec.max_objects);
    let mut annotations = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.gen_range(0..spec.palette.len());
        // Shape family cycles with the class index: wide rect, long rect, disc.
        let (wpx, hpx, disc) = match class_id % 3 {
            0 => {
                let ww = scaled(12, 20, &mut rng);
                let hh = scaled(7, 12, &mut rng).min(ww);
                (ww, hh, false)
            }
            1 => {
                let ww = scaled(20, 30, &mut rng);
                let hh = scaled(8, 13, &mut rng);
                (ww, hh, false)
            }
            _ => {
                let r = scaled(5, 9, &mut rng);
                (2 * r + 1, 2 * r + 1, true)
            }
        };
        let x0 = rng.gen_range(0..=w - wpx);
        let y0 = rng.gen_range(0..=h - hpx);
        let mut color = spec.palette[class_id];
        for ch in &mut color {
            *ch = (*ch + rng.gen_range(-0.06..0.06)).clamp(0.02, 0.98);
        }
        if disc {
            let r = (wpx - 1) / 2;
            let (cy, cx) = (y0 + r, x0 + r);
            for y in y0..y0 + hpx {
                for x in x0..x0 + wpx {
                    let (dy, dx) = (y as f64 - cy as f64, x as f64 - cx as f64);
                    if dy * dy + dx * dx <= (r * r) as f64 {
                        for c in 0..3 {
                            image.set(y, x, c, color[c]);
                        }
                    }
                }
            }
        } else {
            for y in y0..y0 + hpx {
                for x in x0..x0 + wpx {
                    for c in 0..3 {
                        image.set(y, x, c, color[c]);
                    }
                }
            }
        }
        annotations.push(BoxLabel::new(
            class_id,
            (x0 as f64 + wpx as f64 / 2.0) / w as f64,
            (y0 as f64 + hpx as f64 / 2.0) / h as f64,
            wpx as f64 / w as f64,
            hpx as f64 / h as f64,
        ));
    }

    SceneSample { image, annotations, domain_tag: spec.tag.clone() }
}

fn box_blur(image: &Image, radius: usize) -> Image {
    let (h, w) = (image.h, image.w);
    let mut out = Image::new(h, w);
    let r = radius as isize;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (y0, y1) = ((y - r).max(0), (y + r).min(h as isize - 1));
            let (x0, x1) = ((x - r).max(0), (x + r).min(w as isize - 1));
            let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            for c in 0..3 {
                let mut sum = 0.0;
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        sum += image.get(yy as usize, xx as usize, c);
                    }
                }
                out.set(y as usize, x as usize, c, sum / count);
            }
        }
    }
    out
}

/// Brightness, then blur, then additive noise, then clamp to [0, 1].
fn apply_domain_shift(image: &mut Image, spec: &DomainSpec, rng: &mut ChaCha8Rng) {
    if spec.brightness != 1.0 {
        for v in image.pixels_mut() {
            *v *= spec.brightness;
        }
    }
    if spec.blur_radius > 0 {
        *image = box_blur(image, spec.blur_radius);
    }
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("validated std");
        for v in image.pixels_mut() {
            *v += normal.sample(rng);
        }
    }
    for v in image.pixels_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

pub fn generate_scene(spec: &DomainSpec, index: u64) -> SceneSample {
    let mut sample = render_clean(spec, index);
    let mut rng = scene_rng(spec.seed, index, 1);
    apply_domain_shift(&mut sample.image, spec, &mut rng);
    sample
}

/// Ground-truth labels with an evaluation-only taint: training code must go
/// through [`Annotations::training_labels`], which refuses tainted labels
/// and counts the attempt.
#[derive(Debug, Clone)]
pub struct Annotations {
    labels: Vec<BoxLabel>,
    eval_only: bool,
    taint_hits: Arc<AtomicU64>,
}

impl Annotations {
    pub fn training(labels: Vec<BoxLabel>) -> Self {
        Annotations { labels, eval_only: false, taint_hits: Arc::new(AtomicU64::new(0)) }
    }

    pub fn eval_only(labels: Vec<BoxLabel>) -> Self {
        Annotations { labels, eval_only: true, taint_hits: Arc::new(AtomicU64::new(0)) }
    }

    pub fn is_eval_only(&self) -> bool {
        self.eval_only
    }

    /// Labels for a training code path. Tainted labels are never released;
    /// the attempt itself is recorded so tests can assert it never happens.
    pub fn training_labels(&self) -> Result<&[BoxLabel]> {
        if self.eval_only {
            self.taint_hits.fetch_add(1, Ordering::Relaxed);
            return Err(Error::InvalidInput(
                "evaluation-only annotations requested by a training path".into(),
            ));
        }
        Ok(&self.labels)
    }

    /// Labels for metric computation; never taints.
    pub fn eval_labels(&self) -> &[BoxLabel] {
        &self.labels
    }

    pub fn taint_hits(&self) -> u64 {
        self.taint_hits.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    Source,
    Target,
}

#[derive(Debug, Clone)]
pub struct DomainSample {
    pub id: String,
    pub image: Image,
    pub annotations: Option<Annotations>,
}

#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub role: DomainRole,
    pub tag: String,
    pub samples: Vec<DomainSample>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            match (&self.role, &s.annotations) {
                (DomainRole::Source, Some(a)) if !a.is_eval_only() => {}
                (DomainRole::Source, _) => {
                    return Err(Error::InvalidInput(format!(
                        "source sample {} must carry trainable ground truth",
                        s.id
                    )));
                }
                (DomainRole::Target, Some(a)) if a.is_eval_only() => {}
                (DomainRole::Target, None) => {}
                (DomainRole::Target, Some(_)) => {
                    return Err(Error::InvalidInput(format!(
                        "target sample {} carries trainable annotations",
                        s.id
                    )));
                }
            }
            if let Some(a) = &s.annotations {
                if a.eval_labels().iter().any(|l| !l.fully_inside()) {
                    return Err(Error::InvalidInput(format!(
                        "sample {} has an out-of-frame box",
                        s.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn taint_hits(&self) -> u64 {
        self.samples
            .iter()
            .filter_map(|s| s.annotations.as_ref())
            .map(|a| a.taint_hits())
            .sum()
    }
}

/// One target domain split into an adaptation half and a held-out
/// evaluation half with disjoint sample indices.
#[derive(Debug, Clone)]
pub struct TargetSplit {
    pub adapt: DomainDataset,
    pub eval: DomainDataset,
}

impl TargetSplit {
    pub fn validate(&self) -> Result<()> {
        self.adapt.validate()?;
        self.eval.validate()?;
        let adapt_ids: std::collections::BTreeSet<&str> =
            self.adapt.samples.iter().map(|s| s.id.as_str()).collect();
        if self.eval.samples.iter().any(|s| adapt_ids.contains(s.id.as_str())) {
            return Err(Error::InvalidInput(format!(
                "target {} adaptation/evaluation splits overlap",
                self.adapt.tag
            )));
        }
        Ok(())
    }
}

fn default_source_spec() -> DomainSpec {
    DomainSpec { tag: "source".into(), seed: 101, ..DomainSpec::default() }
}

/// Eight shifted targets ramping severity: 2 brightness x 2 noise x 2
/// density levels, ordered mild to severe.
pub fn default_target_specs() -> Vec<DomainSpec> {
    let grid = [
        (0.75, 0.03, 3.0),
        (0.75, 0.03, 4.0),
        (0.75, 0.08, 3.0),
        (0.55, 0.03, 3.0),
        (0.75, 0.08, 4.0),
        (0.55, 0.03, 4.0),
        (0.55, 0.08, 3.0),
        (0.55, 0.08, 4.0),
    ];
    grid.iter()
        .enumerate()
        .map(|(i, &(brightness, noise_std, object_density))| DomainSpec {
            tag: format!("target{}", i + 1),
            brightness,
            noise_std,
            object_density,
            seed: 201 + i as u64,
            ..DomainSpec::default()
        })
        .collect()
}

/// The mid-severity target used by the standard comparison runs.
pub fn medium_shift_spec() -> DomainSpec {
    default_target_specs().remove(3)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source_images: usize,
    pub target_adapt_images: usize,
    pub target_eval_images: usize,
    pub source: DomainSpec,
    pub targets: Vec<DomainSpec>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source_images: 48,
            target_adapt_images: 32,
            target_eval_images: 32,
            source: default_source_spec(),
            targets: default_target_specs(),
        }
    }
}

impl DatasetConfig {
    pub fn classes(&self) -> usize {
        self.source.classes()
    }

    pub fn image_size(&self) -> usize {
        self.source.image_size
    }

    pub fn max_objects(&self) -> usize {
        self.targets
            .iter()
            .map(|t| t.max_objects)
            .chain([self.source.max_objects])
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("at least one target domain is required".into()));
        }
        if self.source_images == 0 || self.target_adapt_images == 0 || self.target_eval_images == 0
        {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        self.source.validate()?;
        for t in &self.targets {
            t.validate()?;
            if t.classes() != self.source.classes() {
                return Err(Error::Config(format!(
                    "target {} palette has {} classes, source has {}",
                    t.tag,
                    t.classes(),
                    self.source.classes()
                )));
            }
            if t.image_size != self.source.image_size {
                return Err(Error::Config(format!(
                    "target {} image size {} != source {}",
                    t.tag, t.image_size, self.source.image_size
                )));
            }
        }
        Ok(())
    }
}

fn dataset_from_indices(
    spec: &DomainSpec,
    role: DomainRole,
    range: std::ops::Range<u64>,
) -> DomainDataset {
    let samples = range
        .map(|i| {
            let scene = generate_scene(spec, i);
            let annotations = match role {
                DomainRole::Source => Some(Annotations::training(scene.annotations)),
                DomainRole::Target => Some(Annotations::eval_only(scene.annotations)),
            };
            DomainSample { id: format!("{}:{i:04}", spec.tag), image: scene.image, annotations }
        })
        .collect();
    DomainDataset { role, tag: spec.tag.clone(), samples }
}

/// Source dataset plus per-target adaptation/evaluation splits.
pub fn build_benchmark(cfg: &DatasetConfig) -> Result<(DomainDataset, Vec<TargetSplit>)> {
    cfg.validate()?;
    let source =
        dataset_from_indices(&cfg.source, DomainRole::Source, 0..cfg.source_images as u64);
    source.validate()?;
    let mut targets = Vec::with_capacity(cfg.targets.len());
    for spec in &cfg.targets {
        let a = cfg.target_adapt_images as u64;
        let e = cfg.target_eval_images as u64;
        let split = TargetSplit {
            adapt: dataset_from_indices(spec, DomainRole::Target, 0..a),
            eval: dataset_from_indices(spec, DomainRole::Target, a..a + e),
        };
        split.validate()?;
        targets.push(split);
    }
    Ok((source, targets))
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct DatasetManifest {
    count: usize,
    h: usize,
    w: usize,
    channels: usize,
    dtype: String,
}

/// Raw float32 image blob + JSON annotations + manifest, one set per split.
pub fn write_dataset(dir: &Path, name: &str, samples: &[SceneSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (h, w) = samples
        .first()
        .map(|s| (s.image.h, s.image.w))
        .ok_or_else(|| Error::InvalidInput("refusing to write an empty split".into()))?;
    let mut blob = Vec::with_capacity(samples.len() * h * w * 3 * 4);
    let mut annotations: BTreeMap<String, Vec<BoxLabel>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if (s.image.h, s.image.w) != (h, w) {
            return Err(Error::InvalidInput("mixed image sizes in one split".into()));
        }
        for v in s.image.pixels() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        annotations.insert(format!("{}:{i:04}", s.domain_tag), s.annotations.clone());
    }
    let manifest =
        DatasetManifest { count: samples.len(), h, w, channels: 3, dtype: "f32le".into() };
    std::fs::write(dir.join(format!("{name}.images.bin")), &blob)?;
    std::fs::write(
        dir.join(format!("{name}.annotations.json")),
        serde_json::to_vec_pretty(&annotations)?,
    )?;
    std::fs::write(
        dir.join(format!("{name}.manifest.json")),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Load a split written by [`write_dataset`], validating blob size against
/// the manifest.
pub fn read_dataset(dir: &Path, name: &str) -> Result<Vec<SceneSample>> {
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(
        dir.join(format!("{name}.manifest.json")),
    )?)?;
    if manifest.dtype != "f32le" {
        return Err(Error::InvalidInput(format!("unsupported dtype {}", manifest.dtype)));
    }
    if manifest.channels != 3 {
        return Err(Error::InvalidInput("expected 3-channel images".into()));
    }
    let blob = std::fs::read(dir.join(format!("{name}.images.bin")))?;
    let per_image = manifest.h * manifest.w * 3 * 4;
    if blob.len() != manifest.count * per_image {
        return Err(Error::InvalidInput(format!(
            "image blob is {} bytes, manifest implies {}",
            blob.len(),
            manifest.count * per_image
        )));
    }
    let annotations: BTreeMap<String, Vec<BoxLabel>> = serde_json::from_slice(
        &std::fs::read(dir.join(format!("{name}.annotations.json")))?,
    )?;
    if annotations.len() != manifest.count {
        return Err(Error::InvalidInput("annotation count != manifest count".into()));
    }
    let mut out = Vec::with_capacity(manifest.count);
    for (i, (id, labels)) in annotations.into_iter().enumerate() {
        let mut image = Image::new(manifest.h, manifest.w);
        let start = i * per_image;
        for (j, v) in image.pixels_mut().iter_mut().enumerate() {
            let at = start + j * 4;
            *v = f32::from_le_bytes(blob[at..at + 4].try_into().expect("validated size")) as f64;
        }
        let domain_tag = id.split(':').next().unwrap_or("domain").to_string();
        out.push(SceneSample { image, annotations: labels, domain_tag });
    }
    Ok(out)
}
