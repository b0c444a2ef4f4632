//! Synthetic labeled scenes, the shifted target domain, augmentations, and
//! on-disk dataset manifests.
//!
//! Scenes hold 1-6 filled shapes (rectangle, disk, bar) with class-correlated
//! colors on a textured background. The target domain is the same generator
//! pushed through a pixel-level shift (palette rotation, contrast, haze,
//! noise); annotations survive unchanged and are withheld from the trainer
//! for target training scenes.

use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::boxes::{iou, BBox, GtBox};
use crate::image::{read_pnm, write_pnm, ImageError, ImageF};
use crate::rng::{derive_seed, rng_from, sample_normal};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad manifest line {line}: {reason}")]
    Manifest { path: String, line: usize, reason: String },
    #[error("invalid spec: {0}")]
    BadSpec(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    TargetLike,
    Target,
}

/// Scene generator knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec { height: 64, width: 64, num_classes: 3, min_objects: 1, max_objects: 6 }
    }
}

/// Pixel-level knobs that turn a source scene into the shifted target domain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainShiftSpec {
    pub contrast_scale: f64,
    pub brightness_shift: f64,
    /// Alpha blend toward the fog color, in [0,1].
    pub haze_strength: f64,
    pub noise_sigma: f64,
    /// Rotation of the color cube around the gray axis, radians.
    pub palette_rotation: f64,
}

impl DomainShiftSpec {
    pub fn identity() -> Self {
        DomainShiftSpec {
            contrast_scale: 1.0,
            brightness_shift: 0.0,
            haze_strength: 0.0,
            noise_sigma: 0.0,
            palette_rotation: 0.0,
        }
    }
}

impl Default for DomainShiftSpec {
    fn default() -> Self {
        DomainShiftSpec {
            contrast_scale: 0.55,
            brightness_shift: 0.10,
            haze_strength: 0.55,
            noise_sigma: 0.035,
            palette_rotation: 0.7,
        }
    }
}

const FOG: [f64; 3] = [0.78, 0.78, 0.80];

#[derive(Clone, Debug)]
pub struct LabeledScene {
    pub scene_id: u64,
    pub domain: DomainTag,
    pub image: ImageF,
    pub annotations: Vec<GtBox>,
}

/// Generate `n` deterministic source scenes. Scene `i` depends only on
/// `(seed, first_id + i)`, so generation order is irrelevant.
pub fn generate_source(n: usize, seed: u64, spec: &SceneSpec) -> Result<Vec<LabeledScene>, DataError> {
    generate_scenes(n, seed, spec, 0)
}

pub fn generate_scenes(
    n: usize,
    seed: u64,
    spec: &SceneSpec,
    first_id: u64,
) -> Result<Vec<LabeledScene>, DataError> {
    if n == 0 {
        return Err(DataError::BadSpec("scene count must be >= 1".into()));
    }
    if spec.min_objects == 0 || spec.min_objects > spec.max_objects {
        return Err(DataError::BadSpec(format!(
            "object count range {}..={} invalid",
            spec.min_objects, spec.max_objects
        )));
    }
    if spec.num_classes == 0 || spec.num_classes > 3 {
        return Err(DataError::BadSpec("num_classes must be in 1..=3".into()));
    }
    (0..n)
        .map(|i| {
            let id = first_id + i as u64;
            generate_one(spec, derive_seed(seed, id), id)
        })
        .collect()
}

fn class_color(class_id: usize, rng: &mut impl Rng) -> [f64; 3] {
    let jitter = |rng: &mut dyn rand::RngCore| -> f64 { rng.random_range(-0.12..0.12) };
    let base = match class_id {
        0 => [0.78, 0.22, 0.20],
        1 => [0.18, 0.72, 0.28],
        _ => [0.20, 0.30, 0.80],
    };
    [
        (base[0] + jitter(rng)).clamp(0.05, 0.95),
        (base[1] + jitter(rng)).clamp(0.05, 0.95),
        (base[2] + jitter(rng)).clamp(0.05, 0.95),
    ]
}

fn generate_one(spec: &SceneSpec, seed: u64, scene_id: u64) -> Result<LabeledScene, DataError> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = rng_from(seed);

    // Textured background: base color, two gradients, per-pixel noise.
    let base: [f64; 3] = [
        rng.random_range(0.30..0.55),
        rng.random_range(0.30..0.55),
        rng.random_range(0.30..0.55),
    ];
    let gx: f64 = rng.random_range(-0.12..0.12);
    let gy: f64 = rng.random_range(-0.12..0.12);
    let mut pixels = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let shade = gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5);
            let speckle = rng.random_range(-0.03..0.03);
            for c in 0..3 {
                pixels[(y * w + x) * 3 + c] = (base[c] + shade + speckle).clamp(0.0, 1.0);
            }
        }
    }
    let mut img = ImageF::new(h, w, 3, pixels)?;

    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut annotations: Vec<GtBox> = Vec::new();
    let mut attempts = 0;
    while annotations.len() < count && attempts < 40 * count {
        attempts += 1;
        let class_id = rng.random_range(0..spec.num_classes);
        // Shapes sized so a single 20 px anchor at stride 4 can reach them.
        let (bw, bh): (f64, f64) = match class_id {
            2 => {
                let long: f64 = rng.random_range(20.0..26.0);
                let short: f64 = rng.random_range(13.0..16.0);
                if rng.random_bool(0.5) {
                    (long, short)
                } else {
                    (short, long)
                }
            }
            _ => (rng.random_range(16.0..26.0), rng.random_range(16.0..26.0)),
        };
        let bw = bw.min(w as f64 - 2.0);
        let bh = bh.min(h as f64 - 2.0);
        let bx = rng.random_range(1.0..(w as f64 - bw - 1.0));
        let by = rng.random_range(1.0..(h as f64 - bh - 1.0));
        let bbox = BBox::new(bx.round(), by.round(), bw.round(), bh.round());
        if annotations.iter().any(|a| iou(&a.bbox, &bbox) > 0.25) {
            continue;
        }
        let color = class_color(class_id, &mut rng);
        draw_shape(&mut img, class_id, &bbox, color);
        annotations.push(GtBox { bbox, class_id });
    }

    Ok(LabeledScene { scene_id, domain: DomainTag::Source, image: img, annotations })
}

fn draw_shape(img: &mut ImageF, class_id: usize, bbox: &BBox, color: [f64; 3]) {
    let (x0, y0) = (bbox.x as usize, bbox.y as usize);
    let (x1, y1) = (bbox.x2().min(img.width() as f64) as usize, bbox.y2().min(img.height() as f64) as usize);
    let (cx, cy) = bbox.center();
    let (rx, ry) = (bbox.w / 2.0, bbox.h / 2.0);
    for y in y0..y1 {
        for x in x0..x1 {
            let inside = match class_id {
                // Disk: inside the inscribed ellipse.
                1 => {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    dx * dx + dy * dy <= 1.0
                }
                // Rectangle and bar fill their box.
                _ => true,
            };
            if inside {
                // Slight vertical shading keeps objects from being flat color.
                let shade = 0.9 + 0.2 * (y - y0) as f64 / (y1 - y0).max(1) as f64;
                for c in 0..3 {
                    img.set(y, x, c, (color[c] * shade).clamp(0.0, 1.0));
                }
            }
        }
    }
}

/// Rotation of RGB space around the gray diagonal by `theta` radians.
fn palette_matrix(theta: f64) -> [[f64; 3]; 3] {
    let (s, c) = theta.sin_cos();
    let one_c = 1.0 - c;
    let k = 1.0 / 3f64.sqrt();
    // Rodrigues rotation around unit axis (k, k, k).
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let eye = if i == j { c } else { 0.0 };
            let cross = match (i, j) {
                (0, 1) => -k * s,
                (0, 2) => k * s,
                (1, 0) => k * s,
                (1, 2) => -k * s,
                (2, 0) => -k * s,
                (2, 1) => k * s,
                _ => 0.0,
            };
            m[i][j] = eye + cross + k * k * one_c;
        }
    }
    m
}

/// Pixel-level domain shift. Annotations are copied unchanged; the result is
/// tagged as target domain.
pub fn apply_domain_shift(scene: &LabeledScene, shift: &DomainShiftSpec, seed: u64) -> LabeledScene {
    let mut rng = rng_from(seed);
    let img = &scene.image;
    let m = palette_matrix(shift.palette_rotation);
    let mut pixels = Vec::with_capacity(img.pixels().len());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let rgb = [img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2)];
            for c in 0..3 {
                let rotated = m[c][0] * rgb[0] + m[c][1] * rgb[1] + m[c][2] * rgb[2];
                let contrasted = 0.5 + (rotated - 0.5) * shift.contrast_scale + shift.brightness_shift;
                let noisy = if shift.noise_sigma > 0.0 {
                    contrasted + shift.noise_sigma * sample_normal(&mut rng)
                } else {
                    contrasted
                };
                let hazed = (1.0 - shift.haze_strength) * noisy + shift.haze_strength * FOG[c];
                pixels.push(hazed.clamp(0.0, 1.0));
            }
        }
    }
    LabeledScene {
        scene_id: scene.scene_id,
        domain: DomainTag::Target,
        image: ImageF::new(img.height(), img.width(), 3, pixels).expect("same dims"),
        annotations: scene.annotations.clone(),
    }
}

/// Horizontal flip with probability 1/2. Returns the flip decision so the
/// caller can mirror boxes with [`flip_boxes`].
pub fn weak_augment<R: Rng>(img: &ImageF, rng: &mut R) -> (ImageF, bool) {
    if rng.random_bool(0.5) {
        (hflip(img), true)
    } else {
        (img.clone(), false)
    }
}

/// Weak flip plus color jitter, per-pixel Gaussian noise, and random
/// rectangular erasing. Geometry-preserving apart from the shared flip.
pub fn strong_augment<R: Rng>(img: &ImageF, rng: &mut R) -> (ImageF, bool) {
    let (mut out, flipped) = weak_augment(img, rng);
    let (h, w, ch) = (out.height(), out.width(), out.channels());

    let scales: Vec<f64> = (0..ch).map(|_| rng.random_range(0.8..1.2)).collect();
    let shifts: Vec<f64> = (0..ch).map(|_| rng.random_range(-0.10..0.10)).collect();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v = out.get(y, x, c) * scales[c] + shifts[c] + 0.03 * sample_normal(rng);
                out.set(y, x, c, v);
            }
        }
    }

    if rng.random_bool(0.5) {
        let ew = rng.random_range(8..=(w / 3).max(9));
        let eh = rng.random_range(8..=(h / 3).max(9));
        let ex = rng.random_range(0..w - ew);
        let ey = rng.random_range(0..h - eh);
        for y in ey..ey + eh {
            for x in ex..ex + ew {
                for c in 0..ch {
                    out.set(y, x, c, rng.random_range(0.0..1.0));
                }
            }
        }
    }

    out.clamp_unit();
    (out, flipped)
}

pub fn hflip(img: &ImageF) -> ImageF {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                out.set(y, x, c, img.get(y, w - 1 - x, c));
            }
        }
    }
    out
}

/// Mirror x coordinates; widths and heights are preserved.
pub fn flip_boxes(boxes: &[BBox], image_width: f64) -> Vec<BBox> {
    boxes
        .iter()
        .map(|b| BBox::new(image_width - b.x - b.w, b.y, b.w, b.h))
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset assembly and manifests
// ---------------------------------------------------------------------------

/// 8-bit scene storage; exactly what lands in the PPM files.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredScene {
    pub scene_id: u64,
    pub domain: DomainTag,
    height: usize,
    width: usize,
    channels: usize,
    bytes: Vec<u8>,
    pub annotations: Vec<GtBox>,
}

impl StoredScene {
    pub fn from_scene(scene: &LabeledScene) -> Self {
        StoredScene {
            scene_id: scene.scene_id,
            domain: scene.domain,
            height: scene.image.height(),
            width: scene.image.width(),
            channels: scene.image.channels(),
            bytes: scene.image.to_bytes(),
            annotations: scene.annotations.clone(),
        }
    }

    pub fn image(&self) -> ImageF {
        ImageF::from_bytes(self.height, self.width, self.channels, &self.bytes).expect("stored scene is valid")
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitCounts {
    pub train_source: usize,
    pub train_target: usize,
    pub eval_target: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts { train_source: 2000, train_target: 2000, eval_target: 500 }
    }
}

/// In-memory dataset. Target training scenes carry no annotations; the eval
/// split keeps them for scoring only.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train_source: Vec<StoredScene>,
    pub train_target: Vec<StoredScene>,
    pub eval_target: Vec<StoredScene>,
}

pub fn build_dataset(
    counts: &SplitCounts,
    seed: u64,
    scene_spec: &SceneSpec,
    shift: &DomainShiftSpec,
) -> Result<Dataset, DataError> {
    let n_src = counts.train_source;
    let n_tt = counts.train_target;
    let n_ev = counts.eval_target;

    let sources = generate_scenes(n_src, seed, scene_spec, 0)?;
    let train_source: Vec<StoredScene> = sources.iter().map(StoredScene::from_scene).collect();

    let make_target = |scene: &LabeledScene| -> StoredScene {
        let shifted = apply_domain_shift(scene, shift, derive_seed(seed ^ 0x5317F7ED, scene.scene_id));
        StoredScene::from_scene(&shifted)
    };

    let tt_base = generate_scenes(n_tt, seed, scene_spec, n_src as u64)?;
    let mut train_target: Vec<StoredScene> = tt_base.iter().map(make_target).collect();
    for s in &mut train_target {
        s.annotations.clear();
    }

    let ev_base = generate_scenes(n_ev, seed, scene_spec, (n_src + n_tt) as u64)?;
    let eval_target: Vec<StoredScene> = ev_base.iter().map(make_target).collect();

    Ok(Dataset { train_source, train_target, eval_target })
}

/// One manifest line: `{scene_id, image_path, domain_tag, annotations}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub scene_id: u64,
    pub image_path: String,
    pub domain_tag: DomainTag,
    pub annotations: Vec<GtBox>,
}

pub const SPLIT_NAMES: [&str; 3] = ["train_source", "train_target", "eval_target"];

/// Write images (raw PPM) plus one JSON-lines manifest per split.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir.join("images")).map_err(io_err(dir))?;
    for (name, scenes) in [
        ("train_source", &dataset.train_source),
        ("train_target", &dataset.train_target),
        ("eval_target", &dataset.eval_target),
    ] {
        let manifest_path = dir.join(format!("{name}.jsonl"));
        let mut out = Vec::new();
        for scene in scenes {
            let rel = format!("images/{:06}.ppm", scene.scene_id);
            let img_path = dir.join(&rel);
            write_pnm(&scene.image(), &img_path, true)?;
            let record = ManifestRecord {
                scene_id: scene.scene_id,
                image_path: rel,
                domain_tag: scene.domain,
                annotations: scene.annotations.clone(),
            };
            serde_json::to_writer(&mut out, &record).expect("manifest record serializes");
            out.push(b'\n');
        }
        let mut f = fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
        f.write_all(&out).map_err(io_err(&manifest_path))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DataError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| DataError::Manifest {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

fn load_split(dir: &Path, name: &str) -> Result<Vec<StoredScene>, DataError> {
    let records = read_manifest(&dir.join(format!("{name}.jsonl")))?;
    records
        .into_iter()
        .map(|rec| {
            let img_path: PathBuf = dir.join(&rec.image_path);
            let img = read_pnm(&img_path)?;
            Ok(StoredScene {
                scene_id: rec.scene_id,
                domain: rec.domain_tag,
                height: img.height(),
                width: img.width(),
                channels: img.channels(),
                bytes: img.to_bytes(),
                annotations: rec.annotations,
            })
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    Ok(Dataset {
        train_source: load_split(dir, "train_source")?,
        train_target: load_split(dir, "train_target")?,
        eval_target: load_split(dir, "eval_target")?,
    })
}
