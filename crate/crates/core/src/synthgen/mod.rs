//! Synthetic fine-grained detection scenes.
//!
//! Classes are organised as `families x subclasses`. Families differ in
//! coarse shape; subclasses of one family differ only in a detail whose
//! magnitude is scaled by the confusability knob `delta`:
//!
//! | family kind | shape                | subclass cue (level `l = 1..=M`)          |
//! |-------------|----------------------|-------------------------------------------|
//! | 0           | filled ellipse       | aspect ratio `1 + 2.5 * l * delta`        |
//! | 1           | filled rectangle     | `l` dark cross-stripes, contrast `2.5 * delta` |
//! | 2           | disk with a notch    | notch opening angle `1.5 * l * delta` rad |
//!
//! Families beyond the third reuse the three kinds with a brighter fill.
//! Objects are small (a few strides across) and sparse, so most dense
//! locations are background.

mod io;

pub use io::{read_dataset, recompute_hash, write_dataset, DatasetManifest, FORMAT_VERSION};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::Array;

/// Generator settings. Together with a master seed they fully determine a
/// dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Total class count; must be a multiple of `families`.
    pub classes: usize,
    pub families: usize,
    /// Confusability in `(0, 0.5]`; smaller means subtler subclass cues.
    pub delta: f64,
    /// Image side in pixels.
    pub image_size: usize,
    /// Objects per scene are drawn uniformly from `0..=max_objects`.
    pub max_objects: usize,
    pub min_extent: f64,
    pub max_extent: f64,
    /// Relative jitter applied to each shape's non-class proportions.
    pub shape_jitter: f64,
    pub noise_sigma: f64,
    /// Mean number of background clutter blobs per scene.
    pub clutter_density: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            classes: 9,
            families: 3,
            delta: 0.08,
            image_size: 64,
            max_objects: 6,
            min_extent: 9.0,
            max_extent: 18.0,
            shape_jitter: 0.03,
            noise_sigma: 0.03,
            clutter_density: 3.0,
        }
    }
}

impl GenConfig {
    pub fn subclasses(&self) -> usize {
        self.classes / self.families.max(1)
    }

    pub fn family_of(&self, class_id: usize) -> usize {
        class_id / self.subclasses().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.families == 0 || self.classes == 0 || self.classes % self.families != 0 {
            return Err(Error::Config(format!(
                "{} classes cannot be split evenly into {} families",
                self.classes, self.families
            )));
        }
        if !(self.delta > 0.0 && self.delta <= 0.5) {
            return Err(Error::Config(format!("delta must lie in (0, 0.5], got {}", self.delta)));
        }
        if self.image_size < 32 {
            return Err(Error::Config("image_size must be at least 32".into()));
        }
        if !(4.0..=24.0).contains(&self.min_extent)
            || !(self.min_extent..=22.0).contains(&self.max_extent)
        {
            return Err(Error::Config("object extents must satisfy 4 <= min <= max <= 22".into()));
        }
        if self.noise_sigma < 0.0 || self.clutter_density < 0.0 || self.shape_jitter < 0.0 {
            return Err(Error::Config("noise, clutter and jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// One labelled object. Boxes are `(x1, y1, x2, y2)` in pixel-edge
/// coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub bbox: [f64; 4],
    pub class_id: usize,
    pub family_id: usize,
}

impl Annotation {
    pub fn width(&self) -> f64 {
        self.bbox[2] - self.bbox[0]
    }

    pub fn height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub seed: u64,
    /// `[3, S, S]`, the same grey level in all three channels.
    pub image: Array,
    pub annotations: Vec<Annotation>,
    /// Number of pixels at least half covered by an object.
    pub foreground_pixels: usize,
}

impl Scene {
    pub fn size(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_pixels as f64 / (self.size() * self.size()) as f64
    }
}

/// A generated (or loaded) set of scenes and the settings that made it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: GenConfig,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn generate(seed: u64, count: usize, config: &GenConfig) -> Result<Self> {
        Ok(Dataset {
            seed,
            config: config.clone(),
            scenes: generate_scenes(seed, count, config)?,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Seed of scene `index` under a master seed.
pub fn scene_seed(master: u64, index: usize) -> u64 {
    seeds::mix(master, index as u64)
}

/// Generates `count` scenes with ids `0..count`.
pub fn generate_scenes(master_seed: u64, count: usize, config: &GenConfig) -> Result<Vec<Scene>> {
    config.validate()?;
    (0..count)
        .map(|i| generate_scene_inner(i, scene_seed(master_seed, i), config))
        .collect()
}

/// Generates one scene; a pure function of `(seed, config)`.
pub fn generate_scene(seed: u64, config: &GenConfig) -> Result<Scene> {
    config.validate()?;
    generate_scene_inner(0, seed, config)
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Ellipse { semi_x: f64, semi_y: f64 },
    Striped { half_w: f64, half_h: f64, stripes: usize, contrast: f64, along_x: bool },
    Notched { radius: f64, half_gap: f64, direction: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Object {
    cx: f64,
    cy: f64,
    kind: ShapeKind,
}

impl ShapeKind {
    fn half_extent(&self) -> (f64, f64) {
        match *self {
            ShapeKind::Ellipse { semi_x, semi_y } => (semi_x, semi_y),
            ShapeKind::Striped { half_w, half_h, .. } => (half_w, half_h),
            ShapeKind::Notched { radius, .. } => (radius, radius),
        }
    }

    /// Relative brightness at object-local offset `(dx, dy)`, or `None`
    /// outside the shape.
    fn sample(&self, dx: f64, dy: f64) -> Option<f64> {
        match *self {
            ShapeKind::Ellipse { semi_x, semi_y } => {
                ((dx / semi_x).powi(2) + (dy / semi_y).powi(2) <= 1.0).then_some(1.0)
            }
            ShapeKind::Striped { half_w, half_h, stripes, contrast, along_x } => {
                if dx.abs() > half_w || dy.abs() > half_h {
                    return None;
                }
                // stripes cut across the long axis at evenly spaced positions
                let (pos, len) = if along_x { (dx + half_w, 2.0 * half_w) } else { (dy + half_h, 2.0 * half_h) };
                let thickness = (0.09 * len).max(1.0);
                let on_stripe = (1..=stripes).any(|s| {
                    let centre = len * s as f64 / (stripes + 1) as f64;
                    (pos - centre).abs() <= thickness / 2.0
                });
                Some(if on_stripe { 1.0 - contrast } else { 1.0 })
            }
            ShapeKind::Notched { radius, half_gap, direction } => {
                if dx * dx + dy * dy > radius * radius {
                    return None;
                }
                let angle = dy.atan2(dx) - direction;
                let wrapped = angle.sin().atan2(angle.cos()).abs();
                (wrapped > half_gap).then_some(1.0)
            }
        }
    }
}

const SUPERSAMPLE: usize = 4;

/// Subclass cue for class `class_id`, with `jitter` in `[-1, 1]` scaled by
/// the config's shape jitter, and the object's major extent in pixels.
fn make_shape(config: &GenConfig, class_id: usize, major: f64, jitter: f64, orient: usize) -> ShapeKind {
    let family = config.family_of(class_id);
    let level = (class_id % config.subclasses() + 1) as f64;
    let delta = config.delta;
    let j = 1.0 + config.shape_jitter * jitter;
    match family % 3 {
        0 => {
            let aspect = (1.0 + 2.5 * level * delta) * j;
            let (a, b) = (major / 2.0, (major / aspect / 2.0).max(2.25));
            if orient % 2 == 0 {
                ShapeKind::Ellipse { semi_x: a, semi_y: b }
            } else {
                ShapeKind::Ellipse { semi_x: b, semi_y: a }
            }
        }
        1 => {
            let long = major / 2.0;
            let short = (major / (1.4 * j) / 2.0).max(2.25);
            let along_x = orient % 2 == 0;
            let (half_w, half_h) = if along_x { (long, short) } else { (short, long) };
            ShapeKind::Striped {
                half_w,
                half_h,
                stripes: level as usize,
                contrast: (2.5 * delta).min(0.9),
                along_x,
            }
        }
        _ => ShapeKind::Notched {
            radius: major / 2.0 * j,
            half_gap: 0.75 * level * delta,
            direction: orient as f64 * std::f64::consts::FRAC_PI_2,
        },
    }
}

fn fill_level(config: &GenConfig, class_id: usize, rng: &mut ChaCha8Rng) -> f64 {
    let bonus = if config.family_of(class_id) >= 3 { 0.08 } else { 0.0 };
    rng.gen_range(0.6..0.85) + bonus
}

/// Coverage (fraction of supersamples inside) and mean brightness of an
/// object over every pixel of its bounding window.
struct Raster {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    coverage: Vec<f64>,
    shade: Vec<f64>,
}

fn rasterize(obj: &Object, size: usize) -> Raster {
    let (hx, hy) = obj.kind.half_extent();
    let x0 = (obj.cx - hx - 1.0).floor().max(0.0) as usize;
    let y0 = (obj.cy - hy - 1.0).floor().max(0.0) as usize;
    let x1 = ((obj.cx + hx + 1.0).ceil() as usize).min(size);
    let y1 = ((obj.cy + hy + 1.0).ceil() as usize).min(size);
    let (w, h) = (x1 - x0, y1 - y0);
    let mut coverage = vec![0.0; w * h];
    let mut shade = vec![0.0; w * h];
    let n = SUPERSAMPLE as f64;
    for py in 0..h {
        for px in 0..w {
            let (mut hits, mut total) = (0usize, 0.0);
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (x0 + px) as f64 + (sx as f64 + 0.5) / n;
                    let y = (y0 + py) as f64 + (sy as f64 + 0.5) / n;
                    if let Some(v) = obj.kind.sample(x - obj.cx, y - obj.cy) {
                        hits += 1;
                        total += v;
                    }
                }
            }
            if hits > 0 {
                coverage[py * w + px] = hits as f64 / (n * n);
                shade[py * w + px] = total / hits as f64;
            }
        }
    }
    Raster { x0, y0, w, h, coverage, shade }
}

/// Tight box around pixels that are at least half covered.
fn tight_box(r: &Raster) -> Option<[f64; 4]> {
    let mut bounds: Option<[usize; 4]> = None;
    for py in 0..r.h {
        for px in 0..r.w {
            if r.coverage[py * r.w + px] >= 0.5 {
                let (x, y) = (r.x0 + px, r.y0 + py);
                bounds = Some(match bounds {
                    None => [x, y, x + 1, y + 1],
                    Some([a, b, c, d]) => [a.min(x), b.min(y), c.max(x + 1), d.max(y + 1)],
                });
            }
        }
    }
    bounds.map(|b| b.map(|v| v as f64))
}

fn overlaps(a: &[f64; 4], b: &[f64; 4], margin: f64) -> bool {
    a[0] < b[2] + margin && b[0] < a[2] + margin && a[1] < b[3] + margin && b[1] < a[3] + margin
}

const PLACEMENT_TRIES: usize = 30;

fn generate_scene_inner(id: usize, seed: u64, config: &GenConfig) -> Result<Scene> {
    let size = config.image_size;
    let mut rng = seeds::rng(seed);
    let mut canvas = background(config, &mut rng);

    let wanted = rng.gen_range(0..=config.max_objects);
    let mut annotations = Vec::with_capacity(wanted);
    let mut rasters = Vec::with_capacity(wanted);
    for _ in 0..wanted {
        let class_id = rng.gen_range(0..config.classes);
        let major = rng.gen_range(config.min_extent..=config.max_extent);
        let jitter = rng.gen_range(-1.0..=1.0);
        let orient = rng.gen_range(0..4);
        let fill = fill_level(config, class_id, &mut rng);
        let kind = make_shape(config, class_id, major, jitter, orient);
        let (hx, hy) = kind.half_extent();
        for _ in 0..PLACEMENT_TRIES {
            let cx = rng.gen_range(hx + 1.0..size as f64 - hx - 1.0);
            let cy = rng.gen_range(hy + 1.0..size as f64 - hy - 1.0);
            let obj = Object { cx, cy, kind };
            let raster = rasterize(&obj, size);
            let Some(bbox) = tight_box(&raster) else { continue };
            let (bw, bh) = (bbox[2] - bbox[0], bbox[3] - bbox[1]);
            if !(4.0..=24.0).contains(&bw) || !(4.0..=24.0).contains(&bh) {
                continue;
            }
            if annotations.iter().any(|a: &Annotation| overlaps(&a.bbox, &bbox, 2.0)) {
                continue;
            }
            annotations.push(Annotation {
                bbox,
                class_id,
                family_id: config.family_of(class_id),
            });
            rasters.push((raster, fill));
            break;
        }
    }

    let mut foreground = vec![false; size * size];
    for (r, fill) in &rasters {
        for py in 0..r.h {
            for px in 0..r.w {
                let cov = r.coverage[py * r.w + px];
                if cov == 0.0 {
                    continue;
                }
                let idx = (r.y0 + py) * size + r.x0 + px;
                canvas[idx] = canvas[idx] * (1.0 - cov) + fill * r.shade[py * r.w + px] * cov;
                if cov >= 0.5 {
                    foreground[idx] = true;
                }
            }
        }
    }

    if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma).expect("sigma checked");
        canvas.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    // stored on disk as f32; quantise now so in-memory and on-disk scenes agree
    canvas.iter_mut().for_each(|v| *v = f64::from(v.clamp(0.0, 1.0) as f32));

    let plane = size * size;
    let mut data = Vec::with_capacity(3 * plane);
    for _ in 0..3 {
        data.extend_from_slice(&canvas);
    }
    Ok(Scene {
        id,
        seed,
        image: Array::new(vec![3, size, size], data)?,
        annotations,
        foreground_pixels: foreground.iter().filter(|&&f| f).count(),
    })
}

fn background(config: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let size = config.image_size;
    let base = rng.gen_range(0.12..0.35);
    let gx = rng.gen_range(-0.08..0.08);
    let gy = rng.gen_range(-0.08..0.08);
    let mut canvas: Vec<f64> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 / size as f64, (i / size) as f64 / size as f64);
            base + gx * (x - 0.5) + gy * (y - 0.5)
        })
        .collect();
    let max_blobs = (2.0 * config.clutter_density).round() as usize;
    let blobs = rng.gen_range(0..=max_blobs);
    for _ in 0..blobs {
        let cx = rng.gen_range(0.0..size as f64);
        let cy = rng.gen_range(0.0..size as f64);
        let sigma: f64 = rng.gen_range(0.8..2.5);
        let amp = rng.gen_range(-0.12..0.22);
        let reach = (3.0 * sigma).ceil() as isize;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (cx as isize + dx, cy as isize + dy);
                if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
                    continue;
                }
                let (fx, fy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                canvas[y as usize * size + x as usize] +=
                    amp * (-(fx * fx + fy * fy) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    canvas
}

/// Noise-free rendering of one class at a fixed extent, centred on a
/// `side x side` canvas of zeros with unit fill. Used to measure how far
/// apart subclasses are in pixel space.
pub fn render_template(config: &GenConfig, class_id: usize, extent: f64, side: usize) -> Array {
    let kind = make_shape(config, class_id, extent, 0.0, 0);
    let obj = Object {
        cx: side as f64 / 2.0,
        cy: side as f64 / 2.0,
        kind,
    };
    let r = rasterize(&obj, side);
    let mut out = Array::zeros(vec![side, side]);
    for py in 0..r.h {
        for px in 0..r.w {
            out.data_mut()[(r.y0 + py) * side + r.x0 + px] = r.coverage[py * r.w + px] * r.shade[py * r.w + px];
        }
    }
    out
}

/// Mean Euclidean pixel distance between templates of different subclasses
/// of the same family, averaged over all families.
pub fn within_family_template_distance(config: &GenConfig, extent: f64, side: usize) -> f64 {
    let m = config.subclasses();
    let (mut total, mut pairs) = (0.0, 0usize);
    for f in 0..config.families {
        let templates: Vec<Array> = (0..m).map(|s| render_template(config, f * m + s, extent, side)).collect();
        for a in 0..m {
            for b in a + 1..m {
                let d: f64 = templates[a]
                    .data()
                    .iter()
                    .zip(templates[b].data())
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                total += d;
                pairs += 1;
            }
        }
    }
    total / pairs.max(1) as f64
}
