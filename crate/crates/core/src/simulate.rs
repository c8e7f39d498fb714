//! Seeded synthetic overhead scenes with exact ground truth, and a noisy
//! stand-in for the external detector.
//!
//! Every random draw comes from a ChaCha stream seeded either by the scene
//! spec or by [`derive`]`(seed, image_id)`, so output never depends on
//! processing order or thread count.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::labelstore::{write_label_file, Detection, LabelFile, NormBox, RasterImage};
use crate::subtype::{decide_tank, in_interior_disk, ShadowMasses, SubtypeLabel, TankRule};

const PLACEMENT_ATTEMPTS: u32 = 1000;
const SHADOW_RGB: [u8; 3] = [24, 24, 24];
const TANK_BODY_RGB: [u8; 3] = [205, 205, 205];
/// Share of the interior disk darkened by a completely empty tank.
const EMPTY_TANK_INTERIOR_SHARE: f64 = 0.6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-image seed: a splitmix chain over the id's bytes, 8 at a time, closed
/// with the byte length.
pub fn derive(seed: u64, image_id: &str) -> u64 {
    let bytes = image_id.as_bytes();
    let mut h = splitmix64(seed);
    for chunk in bytes.chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        h = splitmix64(h ^ u64::from_le_bytes(word));
    }
    splitmix64(h ^ bytes.len() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Car,
    Roof,
    Tank,
}

/// A paint color and the sub-type it is meant to produce.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaletteColor {
    pub rgb: [u8; 3],
    pub intent: SubtypeLabel,
}

impl PaletteColor {
    pub const fn new(rgb: [u8; 3], intent: SubtypeLabel) -> Self {
        Self { rgb, intent }
    }
}

/// Car paints: whites sit at luma >= 250, colors at luma <= 150.
pub const CAR_PALETTE: [PaletteColor; 7] = [
    PaletteColor::new([255, 255, 255], SubtypeLabel::White),
    PaletteColor::new([250, 250, 247], SubtypeLabel::White),
    PaletteColor::new([200, 40, 40], SubtypeLabel::Color),
    PaletteColor::new([30, 60, 160], SubtypeLabel::Color),
    PaletteColor::new([20, 20, 20], SubtypeLabel::Color),
    PaletteColor::new([150, 150, 150], SubtypeLabel::Color),
    PaletteColor::new([40, 120, 60], SubtypeLabel::Color),
];

/// Roof paints: blues at hue 221-228 degrees, others far from the window.
pub const ROOF_PALETTE: [PaletteColor; 6] = [
    PaletteColor::new([40, 90, 200], SubtypeLabel::Blue),
    PaletteColor::new([30, 60, 180], SubtypeLabel::Blue),
    PaletteColor::new([170, 60, 50], SubtypeLabel::Other),
    PaletteColor::new([150, 150, 150], SubtypeLabel::Other),
    PaletteColor::new([70, 140, 70], SubtypeLabel::Other),
    PaletteColor::new([200, 180, 140], SubtypeLabel::Other),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width_px: u32,
    pub height_px: u32,
    pub kind: ObjectKind,
    pub count_min: u32,
    pub count_max: u32,
    /// Car body `(length, width)`; orientation is random.
    pub car_size_px: (u32, u32),
    /// Roof edge range, inclusive.
    pub roof_size_px: (u32, u32),
    /// Tank diameter range, inclusive; odd draws are rounded down to even.
    pub tank_diameter_px: (u32, u32),
    /// Empty means the built-in palette for the kind.
    pub palette: Vec<PaletteColor>,
    pub tank_fill_levels: Vec<f64>,
    pub background_gray: u8,
    /// Uniform gray-level noise amplitude added to every pixel.
    pub pixel_noise: u8,
    pub min_gap_px: u32,
    /// Rule whose disk and threshold define the tank intent.
    pub tank_rule: TankRule,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width_px: 416,
            height_px: 416,
            kind: ObjectKind::Car,
            count_min: 5,
            count_max: 20,
            car_size_px: (20, 5),
            roof_size_px: (16, 40),
            tank_diameter_px: (20, 32),
            palette: Vec::new(),
            tank_fill_levels: vec![0.0, 0.15, 0.6, 0.85, 1.0],
            background_gray: 110,
            pixel_noise: 6,
            min_gap_px: 2,
            tank_rule: TankRule::default(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.width_px == 0 || self.height_px == 0 {
            return bad("scene dimensions must be positive".into());
        }
        if self.count_min > self.count_max {
            return bad(format!("count range {}..{} is empty", self.count_min, self.count_max));
        }
        if self.roof_size_px.0 == 0 || self.roof_size_px.0 > self.roof_size_px.1 {
            return bad(format!("bad roof size range {:?}", self.roof_size_px));
        }
        if self.tank_diameter_px.0 < 4 || self.tank_diameter_px.0 > self.tank_diameter_px.1 {
            return bad(format!("bad tank diameter range {:?}", self.tank_diameter_px));
        }
        if self.car_size_px.0 == 0 || self.car_size_px.1 == 0 {
            return bad("car size must be positive".into());
        }
        if self.kind == ObjectKind::Tank && self.tank_fill_levels.is_empty() {
            return bad("no tank fill levels".into());
        }
        if self.tank_fill_levels.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("tank fill levels must lie in [0, 1]".into());
        }
        self.tank_rule.validate()
    }

    pub fn palette(&self) -> &[PaletteColor] {
        if !self.palette.is_empty() {
            return &self.palette;
        }
        match self.kind {
            ObjectKind::Car | ObjectKind::Tank => &CAR_PALETTE,
            ObjectKind::Roof => &ROOF_PALETTE,
        }
    }
}

/// Pixel rectangle `[x, x + w) x [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rect {
    x: u32,
    y: u32,
    w: u32,
    h: u32,
}

impl Rect {
    fn overlaps_with_gap(&self, other: &Rect, gap: u32) -> bool {
        self.x < other.x + other.w + gap
            && other.x < self.x + self.w + gap
            && self.y < other.y + other.h + gap
            && other.y < self.y + self.h + gap
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RasterImage,
    pub labels: LabelFile,
    /// Intended sub-type for each ground-truth detection.
    pub intents: Vec<SubtypeLabel>,
    /// Painted shadow masses for tanks, `None` for other kinds.
    pub tank_masses: Vec<Option<ShadowMasses>>,
}

impl Scene {
    pub fn intent_records(&self) -> Vec<IntentRecord> {
        self.intents
            .iter()
            .zip(&self.tank_masses)
            .enumerate()
            .map(|(det_index, (&intent, masses))| IntentRecord {
                image_id: self.labels.image_id.clone(),
                det_index,
                intent,
                interior_mass: masses.map(|m| m.interior),
                exterior_mass: masses.map(|m| m.exterior),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentRecord {
    pub image_id: String,
    pub det_index: usize,
    pub intent: SubtypeLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interior_mass: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exterior_mass: Option<u64>,
}

fn object_size(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (u32, u32) {
    match spec.kind {
        ObjectKind::Car => {
            let (l, w) = spec.car_size_px;
            if rng.random_bool(0.5) {
                (l, w)
            } else {
                (w, l)
            }
        }
        ObjectKind::Roof => {
            let (lo, hi) = spec.roof_size_px;
            (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
        }
        ObjectKind::Tank => {
            let (lo, hi) = spec.tank_diameter_px;
            let d = rng.random_range(lo..=hi) & !1;
            (d.max(4), d.max(4))
        }
    }
}

fn place(spec: &SceneSpec, size: (u32, u32), placed: &[Rect], rng: &mut ChaCha8Rng) -> Result<Rect> {
    let (w, h) = size;
    if w > spec.width_px || h > spec.height_px {
        return Err(Error::Placement(format!(
            "{w}x{h} object does not fit a {}x{} frame",
            spec.width_px, spec.height_px
        )));
    }
    for _ in 0..PLACEMENT_ATTEMPTS {
        let r = Rect {
            x: rng.random_range(0..=spec.width_px - w),
            y: rng.random_range(0..=spec.height_px - h),
            w,
            h,
        };
        if placed.iter().all(|p| !p.overlaps_with_gap(&r, spec.min_gap_px)) {
            return Ok(r);
        }
    }
    Err(Error::Placement(format!(
        "no free spot for object {} after {PLACEMENT_ATTEMPTS} attempts",
        placed.len() + 1
    )))
}

/// Paints a tank into `r` and returns the shadow masses it painted, measured
/// with the same disk the classifier uses on the exact crop.
fn paint_tank(img: &mut RasterImage, r: Rect, fill: f64, rule: &TankRule) -> ShadowMasses {
    let d = r.w;
    let half = d as f64 / 2.0;
    let frac = rule.interior_radius_fraction;
    let mut interior_pixels = Vec::new();
    let mut exterior = 0u64;
    for y in 0..d {
        for x in 0..d {
            let dx = x as f64 + 0.5 - half;
            let dy = y as f64 + 0.5 - half;
            let (px, py) = (r.x + x, r.y + y);
            if dx * dx + dy * dy <= half * half {
                img.set(px, py, TANK_BODY_RGB);
            }
            if in_interior_disk(x, y, d, d, frac) {
                interior_pixels.push((dx + dy, y, x));
            } else if dx + dy < 0.0 {
                // Cast shadow on the north-west side, outside the shell disk.
                img.set(px, py, SHADOW_RGB);
                exterior += 1;
            }
        }
    }
    // The lowered roof shades a segment of the interior starting at the
    // north-west rim; its size grows as the tank empties.
    let capacity = (EMPTY_TANK_INTERIOR_SHARE * interior_pixels.len() as f64).round();
    let n = ((1.0 - fill) * capacity).round() as usize;
    interior_pixels.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    for &(_, y, x) in &interior_pixels[..n] {
        img.set(r.x + x, r.y + y, SHADOW_RGB);
    }
    ShadowMasses {
        interior: n as u64,
        exterior,
    }
}

fn add_noise(img: &mut RasterImage, amplitude: u8, rng: &mut ChaCha8Rng) {
    if amplitude == 0 {
        return;
    }
    let a = amplitude as i16;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let delta = rng.random_range(-a..=a);
            let p = img.get(x, y).map(|c| (c as i16 + delta).clamp(0, 255) as u8);
            img.set(x, y, p);
        }
    }
}

/// Renders one scene from `spec.seed`.
pub fn generate_scene(spec: &SceneSpec, image_id: &str) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut image = RasterImage::filled(spec.width_px, spec.height_px, [spec.background_gray; 3]);
    let count = rng.random_range(spec.count_min..=spec.count_max);
    let palette = spec.palette();

    let mut placed = Vec::with_capacity(count as usize);
    let mut detections = Vec::with_capacity(count as usize);
    let mut intents = Vec::with_capacity(count as usize);
    let mut tank_masses = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let size = object_size(spec, &mut rng);
        let r = place(spec, size, &placed, &mut rng)?;
        placed.push(r);
        match spec.kind {
            ObjectKind::Car | ObjectKind::Roof => {
                let color = palette[rng.random_range(0..palette.len())];
                image.fill_rect(r.x, r.y, r.w, r.h, color.rgb);
                intents.push(color.intent);
                tank_masses.push(None);
            }
            ObjectKind::Tank => {
                let fill = spec.tank_fill_levels[rng.random_range(0..spec.tank_fill_levels.len())];
                let masses = paint_tank(&mut image, r, fill, &spec.tank_rule);
                intents.push(decide_tank(masses, &spec.tank_rule).label);
                tank_masses.push(Some(masses));
            }
        }
        let bbox = NormBox::from_pixel_rect(r.x, r.y, r.w, r.h, spec.width_px, spec.height_px)?;
        detections.push(Detection::truth(0, bbox));
    }
    add_noise(&mut image, spec.pixel_noise, &mut rng);
    Ok(Scene {
        image,
        labels: LabelFile::new(image_id, detections),
        intents,
        tank_masses,
    })
}

/// Image id of scene `index` in a generated dataset.
pub fn scene_id(prefix: &str, index: usize) -> String {
    format!("{prefix}{index:05}")
}

/// Scene `index` of a dataset: same spec, seed derived from the id.
pub fn generate_indexed_scene(spec: &SceneSpec, prefix: &str, index: usize) -> Result<Scene> {
    let id = scene_id(prefix, index);
    let per_scene = SceneSpec {
        seed: derive(spec.seed, &id),
        ..spec.clone()
    };
    generate_scene(&per_scene, &id)
}

/// Writes `<images_dir>/<id>.png` and `<labels_dir>/<id>.txt`.
pub fn write_scene(scene: &Scene, images_dir: &Path, labels_dir: &Path) -> Result<()> {
    let id = &scene.labels.image_id;
    scene.image.write_png(&images_dir.join(format!("{id}.png")))?;
    write_label_file(&scene.labels, false, &labels_dir.join(format!("{id}.txt")))
}

pub fn write_intents(records: &[IntentRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).at(path)?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").at(path)?;
    }
    out.flush().at(path)
}

/// Reads the first non-blank line of a JSON-Lines config file.
pub fn read_config_record<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: "no config record".into(),
        })?;
    serde_json::from_str(line).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Error model of the stand-in detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Probability that a ground-truth object is missed.
    pub fn_rate: f64,
    /// Expected number of spurious boxes per image (Poisson).
    pub fp_rate: f64,
    /// Standard deviation of the per-corner perturbation, in pixels.
    pub jitter_px: f64,
    /// True-positive confidences are uniform on `[tp_conf_min, 1]`.
    pub tp_conf_min: f64,
    /// False-positive confidences are uniform on `[fp_conf_min, fp_conf_max]`.
    pub fp_conf_min: f64,
    pub fp_conf_max: f64,
    /// Frame size used to convert pixel jitter and fallback FP sizes.
    pub frame_px: (u32, u32),
    /// FP size when an image has no ground truth to copy sizes from.
    pub fallback_size_px: (u32, u32),
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            fn_rate: 0.0,
            fp_rate: 0.0,
            jitter_px: 0.0,
            tp_conf_min: 1.0,
            fp_conf_min: 0.05,
            fp_conf_max: 0.6,
            frame_px: (416, 416),
            fallback_size_px: (20, 5),
            seed: 0,
        }
    }
}

impl NoiseModel {
    /// A detector that reproduces ground truth exactly with confidence 1.
    pub fn perfect(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.fn_rate) {
            return bad(format!("fn_rate {} outside [0, 1]", self.fn_rate));
        }
        if !(self.fp_rate >= 0.0 && self.fp_rate.is_finite()) {
            return bad(format!("fp_rate {} must be >= 0", self.fp_rate));
        }
        if !(self.jitter_px >= 0.0 && self.jitter_px.is_finite()) {
            return bad(format!("jitter {} must be >= 0", self.jitter_px));
        }
        if !(0.0..=1.0).contains(&self.tp_conf_min) {
            return bad(format!("tp_conf_min {} outside [0, 1]", self.tp_conf_min));
        }
        if !(0.0 <= self.fp_conf_min && self.fp_conf_min <= self.fp_conf_max && self.fp_conf_max <= 1.0) {
            return bad("fp confidence range must satisfy 0 <= min <= max <= 1".into());
        }
        if self.frame_px.0 == 0 || self.frame_px.1 == 0 {
            return bad("frame size must be positive".into());
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn jitter_box(b: &NormBox, noise: &NoiseModel, rng: &mut ChaCha8Rng) -> Result<NormBox> {
    let (fw, fh) = (noise.frame_px.0 as f64, noise.frame_px.1 as f64);
    let normal = Normal::new(0.0, noise.jitter_px).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (x0, y0, x1, y1) = b.corners();
    let mut j = |v: f64, scale: f64| (v * scale + normal.sample(rng)).clamp(0.0, scale);
    let (mut nx0, mut ny0, mut nx1, mut ny1) = (j(x0, fw), j(y0, fh), j(x1, fw), j(y1, fh));
    if nx0 > nx1 {
        std::mem::swap(&mut nx0, &mut nx1);
    }
    if ny0 > ny1 {
        std::mem::swap(&mut ny0, &mut ny1);
    }
    // Keep at least one pixel of extent inside the frame.
    if nx1 - nx0 < 1.0 {
        nx1 = (nx0 + 1.0).min(fw);
        nx0 = nx1 - 1.0;
    }
    if ny1 - ny0 < 1.0 {
        ny1 = (ny0 + 1.0).min(fh);
        ny0 = ny1 - 1.0;
    }
    NormBox::from_corners(nx0 / fw, ny0 / fh, nx1 / fw, ny1 / fh)
}

/// Simulated inference on one image: drops, jitters and re-scores ground
/// truth, then appends spurious boxes. Survivors keep their input order and
/// precede the spurious boxes.
pub fn mock_detect(gt: &LabelFile, noise: &NoiseModel, image_id: &str) -> Result<LabelFile> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(noise.seed, image_id));
    let mut out = Vec::with_capacity(gt.detections.len());
    for d in &gt.detections {
        let dropped = rng.random::<f64>() < noise.fn_rate;
        if dropped {
            continue;
        }
        let bbox = if noise.jitter_px > 0.0 {
            jitter_box(&d.bbox, noise, &mut rng)?
        } else {
            d.bbox
        };
        let conf = uniform(&mut rng, noise.tp_conf_min, 1.0);
        out.push(Detection::predicted(d.category_id, bbox, conf));
    }
    if noise.fp_rate > 0.0 {
        let poisson = Poisson::new(noise.fp_rate).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let n_fp = poisson.sample(&mut rng) as usize;
        let (fw, fh) = (noise.frame_px.0 as f64, noise.frame_px.1 as f64);
        for _ in 0..n_fp {
            let (w, h, category) = if gt.detections.is_empty() {
                let (w, h) = noise.fallback_size_px;
                ((w as f64 / fw).min(1.0), (h as f64 / fh).min(1.0), 0)
            } else {
                let src = &gt.detections[rng.random_range(0..gt.detections.len())];
                (src.bbox.w, src.bbox.h, src.category_id)
            };
            let cx = uniform(&mut rng, 0.5 * w, 1.0 - 0.5 * w);
            let cy = uniform(&mut rng, 0.5 * h, 1.0 - 0.5 * h);
            let conf = uniform(&mut rng, noise.fp_conf_min, noise.fp_conf_max);
            out.push(Detection::predicted(category, NormBox::new(cx, cy, w, h)?, conf));
        }
    }
    Ok(LabelFile::new(image_id, out))
}
