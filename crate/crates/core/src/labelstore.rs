//! Detector-format label files, dataset manifests and per-object crops.
//!
//! Label files hold one detection per line:
//! `<category> <cx> <cy> <w> <h>[ <conf>]`, coordinates normalized to the
//! image, six fixed decimals, single spaces, LF endings.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Crop edges closer than this to a whole pixel are snapped onto it, so that
/// boxes which went through a 6-decimal label round trip reproduce the crop
/// of the original pixel rectangle.
const CROP_SNAP_PX: f64 = 1e-3;

/// Center/size box in fractions of the image dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Box from corner coordinates `(x0, y0)`-`(x1, y1)`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new(0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0)
    }

    /// Box covering the pixel rectangle `[x, x + w) x [y, y + h)` of a
    /// `width x height` image.
    pub fn from_pixel_rect(x: u32, y: u32, w: u32, h: u32, width: u32, height: u32) -> Result<Self> {
        let (fw, fh) = (width as f64, height as f64);
        Self::new(
            (x as f64 + 0.5 * w as f64) / fw,
            (y as f64 + 0.5 * h as f64) / fh,
            w as f64 / fw,
            h as f64 / fh,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let Self { cx, cy, w, h } = *self;
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox("non-finite coordinate".into()));
        }
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(Error::InvalidBox(format!("center ({cx}, {cy}) outside [0, 1]")));
        }
        if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
            return Err(Error::InvalidBox(format!("size ({w}, {h}) outside (0, 1]")));
        }
        let (x0, y0, x1, y1) = self.corners();
        if x0.max(0.0) >= x1.min(1.0) || y0.max(0.0) >= y1.min(1.0) {
            return Err(Error::InvalidBox("box does not intersect the unit square".into()));
        }
        Ok(())
    }

    /// `(x0, y0, x1, y1)` corners.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let (hw, hh) = (0.5 * self.w, 0.5 * self.h);
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub category_id: u32,
    #[serde(rename = "box")]
    pub bbox: NormBox,
    /// Present on inference output, absent on ground truth.
    pub confidence: Option<f64>,
}

impl Detection {
    pub fn truth(category_id: u32, bbox: NormBox) -> Self {
        Self {
            category_id,
            bbox,
            confidence: None,
        }
    }

    pub fn predicted(category_id: u32, bbox: NormBox, confidence: f64) -> Self {
        Self {
            category_id,
            bbox,
            confidence: Some(confidence),
        }
    }
}

/// Detections for one image, in on-disk order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelFile {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

impl LabelFile {
    pub fn new(image_id: impl Into<String>, detections: Vec<Detection>) -> Self {
        Self {
            image_id: image_id.into(),
            detections,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::LabelParse {
        line,
        message: message.into(),
    }
}

fn parse_field(field: &str, name: &str, line: usize) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| parse_err(line, format!("{name} is not numeric: {field:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("{name} is not finite: {field:?}")));
    }
    Ok(v)
}

/// Parses one label line. `line_no` is only used in error messages.
pub fn parse_label_line_at(line: &str, line_no: usize) -> Result<Detection> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 && fields.len() != 6 {
        return Err(parse_err(
            line_no,
            format!("expected 5 or 6 fields, found {}", fields.len()),
        ));
    }
    let category_id: u32 = fields[0].parse().map_err(|_| {
        parse_err(
            line_no,
            format!("category must be a non-negative integer: {:?}", fields[0]),
        )
    })?;
    let cx = parse_field(fields[1], "cx", line_no)?;
    let cy = parse_field(fields[2], "cy", line_no)?;
    let w = parse_field(fields[3], "w", line_no)?;
    let h = parse_field(fields[4], "h", line_no)?;
    let bbox = NormBox::new(cx, cy, w, h).map_err(|e| parse_err(line_no, e.to_string()))?;
    let confidence = match fields.get(5) {
        Some(f) => {
            let c = parse_field(f, "confidence", line_no)?;
            if !(0.0..=1.0).contains(&c) {
                return Err(parse_err(line_no, format!("confidence {c} outside [0, 1]")));
            }
            Some(c)
        }
        None => None,
    };
    Ok(Detection {
        category_id,
        bbox,
        confidence,
    })
}

pub fn parse_label_line(line: &str) -> Result<Detection> {
    parse_label_line_at(line, 1)
}

/// Parses a whole label file body. Blank lines are skipped.
pub fn parse_label_text(text: &str, image_id: impl Into<String>) -> Result<LabelFile> {
    let detections = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_label_line_at(l, i + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelFile::new(image_id, detections))
}

/// File stem used as the image id.
pub fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn read_label_file(path: &Path) -> Result<LabelFile> {
    let text = fs::read_to_string(path).at(path)?;
    parse_label_text(&text, stem_of(path)).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Canonical text form of a label file.
pub fn format_label_file(lf: &LabelFile, with_confidence: bool) -> Result<String> {
    let mut out = String::with_capacity(lf.detections.len() * 48);
    for (index, d) in lf.detections.iter().enumerate() {
        let b = &d.bbox;
        write!(out, "{} {:.6} {:.6} {:.6} {:.6}", d.category_id, b.cx, b.cy, b.w, b.h)
            .expect("writing to a String");
        if with_confidence {
            let c = d.confidence.ok_or(Error::MissingConfidence { index })?;
            write!(out, " {c:.6}").expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_label_file(lf: &LabelFile, with_confidence: bool, path: &Path) -> Result<()> {
    let text = format_label_file(lf, with_confidence)?;
    fs::write(path, text).at(path)
}

/// Reads every `*.txt` label file in `dir`, sorted by file name.
pub fn read_label_dir(dir: &Path) -> Result<Vec<LabelFile>> {
    let mut paths = list_files(dir, "txt")?;
    paths.sort();
    paths.iter().map(|p| read_label_file(p)).collect()
}

/// Files in `dir` with the given extension (non-recursive, sorted).
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<[u8; 3]>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::InvalidImage(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![rgb; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = rgb;
    }

    /// Fills the pixel rectangle `[x, x + w) x [y, y + h)`, clipped to the image.
    pub fn fill_rect(&mut self, x: u32, y: u32, w: u32, h: u32, rgb: [u8; 3]) {
        for yy in y..(y + h).min(self.height) {
            for xx in x..(x + w).min(self.width) {
                self.set(xx, yy, rgb);
            }
        }
    }

    /// Copies out `rect` (which must lie inside the image).
    pub fn sub_image(&self, rect: PixelRect) -> RasterImage {
        let mut pixels = Vec::with_capacity(rect.width() as usize * rect.height() as usize);
        let w = self.width as usize;
        for y in rect.y0..rect.y1 {
            let row = y as usize * w;
            pixels.extend_from_slice(&self.pixels[row + rect.x0 as usize..row + rect.x1 as usize]);
        }
        RasterImage {
            width: rect.width(),
            height: rect.height(),
            pixels,
        }
    }

    /// Decodes a PNG; alpha, if any, is dropped.
    pub fn read_png(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?.to_rgb8();
        let (width, height) = img.dimensions();
        let pixels = img.pixels().map(|p| p.0).collect();
        Self::new(width, height, pixels)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        let img = image::RgbImage::from_raw(self.width, self.height, raw)
            .ok_or_else(|| Error::InvalidImage("buffer size mismatch".into()))?;
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < CROP_SNAP_PX {
        r
    } else {
        v
    }
}

fn crop_span(center: f64, size: f64, extent: u32) -> Option<(u32, u32)> {
    let n = extent as f64;
    let lo = snap((center - 0.5 * size) * n).floor().max(0.0);
    let hi = snap((center + 0.5 * size) * n).ceil().min(n);
    (lo < hi).then_some((lo as u32, hi as u32))
}

/// Pixel rectangle covered by `bbox`: floor on the min edge, ceil on the max
/// edge, clamped to the image.
pub fn crop_rect(width: u32, height: u32, bbox: &NormBox) -> Result<PixelRect> {
    let (x0, x1) = crop_span(bbox.cx, bbox.w, width).ok_or(Error::EmptyCrop)?;
    let (y0, y1) = crop_span(bbox.cy, bbox.h, height).ok_or(Error::EmptyCrop)?;
    Ok(PixelRect { x0, y0, x1, y1 })
}

pub fn extract_crop(img: &RasterImage, bbox: &NormBox) -> Result<RasterImage> {
    if img.is_empty() {
        return Err(Error::InvalidImage("empty image".into()));
    }
    bbox.validate()?;
    let rect = crop_rect(img.width, img.height, bbox)?;
    Ok(img.sub_image(rect))
}

/// Keeps only categories listed in `keep` and renumbers each to its index
/// within `keep`.
pub fn remap_categories(lf: &LabelFile, keep: &[u32]) -> Result<LabelFile> {
    if keep.is_empty() {
        return Err(Error::InvalidArgument("keep list is empty".into()));
    }
    let mut index = BTreeMap::new();
    for (new_id, &old) in keep.iter().enumerate() {
        if index.insert(old, new_id as u32).is_some() {
            return Err(Error::InvalidArgument(format!("category {old} listed twice")));
        }
    }
    let detections = lf
        .detections
        .iter()
        .filter_map(|d| {
            index.get(&d.category_id).map(|&category_id| Detection {
                category_id,
                ..*d
            })
        })
        .collect();
    Ok(LabelFile::new(lf.image_id.clone(), detections))
}

/// Replaces each detection's category with its assigned subtype index.
pub fn split_by_subtype(lf: &LabelFile, assignments: &[u32], subtype_count: u32) -> Result<LabelFile> {
    if assignments.len() != lf.detections.len() {
        return Err(Error::InvalidArgument(format!(
            "{} assignments for {} detections",
            assignments.len(),
            lf.detections.len()
        )));
    }
    if let Some(bad) = assignments.iter().find(|&&a| a >= subtype_count) {
        return Err(Error::InvalidArgument(format!(
            "subtype {bad} outside 0..{subtype_count}"
        )));
    }
    let detections = lf
        .detections
        .iter()
        .zip(assignments)
        .map(|(d, &category_id)| Detection { category_id, ..*d })
        .collect();
    Ok(LabelFile::new(lf.image_id.clone(), detections))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub label_path: Option<PathBuf>,
    pub split: Split,
    pub is_background: bool,
}

impl ManifestEntry {
    pub fn labeled(image_path: impl Into<PathBuf>, label_path: impl Into<PathBuf>, split: Split) -> Self {
        Self {
            image_path: image_path.into(),
            label_path: Some(label_path.into()),
            split,
            is_background: false,
        }
    }

    pub fn background(image_path: impl Into<PathBuf>, split: Split) -> Self {
        Self {
            image_path: image_path.into(),
            label_path: None,
            split,
            is_background: true,
        }
    }

    /// Image id (file stem of the image path).
    pub fn image_id(&self) -> String {
        stem_of(&self.image_path)
    }
}

/// Dataset index. On disk this is a JSON-Lines file of entries; category
/// names live in a sibling `.names` file, one per line.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub category_names: Vec<String>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, category_names: Vec<String>) -> Self {
        Self {
            entries,
            category_names,
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.is_background).count()
    }

    pub fn background_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_background).count()
    }

    pub fn names_path(manifest_path: &Path) -> PathBuf {
        manifest_path.with_extension("names")
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).at(path)?;
        let names = Self::names_path(path);
        if self.category_names.is_empty() {
            if names.exists() {
                fs::remove_file(&names).at(&names)?;
            }
        } else {
            let mut text = self.category_names.join("\n");
            text.push('\n');
            fs::write(&names, text).at(&names)?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    message: format!("line {}: {e}", i + 1),
                })
            })
            .collect::<Result<Vec<ManifestEntry>>>()?;
        let names = Self::names_path(path);
        let category_names = if names.exists() {
            fs::read_to_string(&names)
                .at(&names)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_owned)
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            entries,
            category_names,
        })
    }
}

/// Result of [`balance_background`].
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceOutcome {
    pub manifest: DatasetManifest,
    pub requested_background: usize,
    pub kept_background: usize,
    /// The background pool was smaller than requested.
    pub shortfall: bool,
}

/// Background count that makes `target_fraction` of `labeled + background`.
pub fn background_target(labeled: usize, target_fraction: f64) -> usize {
    (target_fraction / (1.0 - target_fraction) * labeled as f64).round() as usize
}

/// Keeps every labeled entry and a seeded random subset of background entries
/// sized so background makes up `target_fraction` of the result. Retained
/// entries keep their original order.
pub fn balance_background(m: &DatasetManifest, target_fraction: f64, seed: u64) -> Result<BalanceOutcome> {
    if !(target_fraction > 0.0 && target_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "background fraction {target_fraction} outside (0, 1)"
        )));
    }
    let labeled = m.labeled_count();
    if labeled == 0 {
        return Err(Error::InvalidArgument("manifest has no labeled entries".into()));
    }
    let requested = background_target(labeled, target_fraction);
    let mut pool: Vec<usize> = (0..m.entries.len()).filter(|&i| m.entries[i].is_background).collect();
    let shortfall = pool.len() < requested;
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    pool.truncate(requested);
    let chosen: HashSet<usize> = pool.into_iter().collect();
    let entries = m
        .entries
        .iter()
        .enumerate()
        .filter(|(i, e)| !e.is_background || chosen.contains(i))
        .map(|(_, e)| e.clone())
        .collect();
    Ok(BalanceOutcome {
        manifest: DatasetManifest::new(entries, m.category_names.clone()),
        requested_background: requested,
        kept_background: chosen.len(),
        shortfall,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntryError {
    pub image_path: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ManifestStats {
    pub image_count: usize,
    pub object_count: u64,
    pub objects_per_category: BTreeMap<u32, u64>,
    pub mean_objects_per_image: f64,
    pub max_objects_in_image: u64,
    pub background_count: usize,
    pub background_fraction: f64,
    pub errors: Vec<EntryError>,
}

impl ManifestStats {
    /// Mean objects per image, two decimals.
    pub fn mean_display(&self) -> String {
        format!("{:.2}", self.mean_objects_per_image)
    }

    fn finish(&mut self) {
        if self.image_count > 0 {
            self.mean_objects_per_image = self.object_count as f64 / self.image_count as f64;
            self.background_fraction = self.background_count as f64 / self.image_count as f64;
        }
    }
}

/// Counts objects per category across a manifest. Unreadable label files are
/// recorded in `errors` and the entry is counted as an image with no objects.
pub fn manifest_stats(m: &DatasetManifest) -> ManifestStats {
    let mut stats = ManifestStats::default();
    for entry in &m.entries {
        stats.image_count += 1;
        let lf = match &entry.label_path {
            None => LabelFile::default(),
            Some(path) => match read_label_file(path) {
                Ok(lf) => lf,
                Err(e) => {
                    stats.errors.push(EntryError {
                        image_path: entry.image_path.clone(),
                        message: e.to_string(),
                    });
                    LabelFile::default()
                }
            },
        };
        let n = lf.detections.len() as u64;
        if n == 0 {
            stats.background_count += 1;
        }
        stats.object_count += n;
        stats.max_objects_in_image = stats.max_objects_in_image.max(n);
        for d in &lf.detections {
            *stats.objects_per_category.entry(d.category_id).or_default() += 1;
        }
    }
    stats.finish();
    stats
}
