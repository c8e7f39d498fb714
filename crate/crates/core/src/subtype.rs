//! Pixel heuristics that split one detected class into two sub-types.
//!
//! * vehicles: white vs color, from the share of bright grayscale pixels in
//!   the crop interior;
//! * roofs: blue vs other, from the share of pixels inside an HSV window;
//! * floating-roof tanks: full vs empty, from the ratio of shadow pixels
//!   outside vs inside the inscribed shell disk.
//!
//! Sub-type index 0 is the "positive" class (white, blue, full) and 1 the
//! complement. All threshold comparisons are inclusive.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::labelstore::{extract_crop, split_by_subtype, LabelFile, RasterImage};

/// BT.601 luma with round-half-up, computed in integer arithmetic.
pub fn to_luma(r: u8, g: u8, b: u8) -> u8 {
    let weighted = 299 * r as u32 + 587 * g as u32 + 114 * b as u32;
    ((weighted + 500) / 1000).min(255) as u8
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hsv {
    /// Degrees in `[0, 360)`; 0 for achromatic input.
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

/// Standard hexcone RGB to HSV conversion.
pub fn to_hsv(r: u8, g: u8, b: u8) -> Hsv {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let v = max as f64 / 255.0;
    if max == 0 {
        return Hsv { h: 0.0, s: 0.0, v };
    }
    let delta = (max - min) as f64;
    let s = delta / max as f64;
    if max == min {
        return Hsv { h: 0.0, s, v };
    }
    let (rf, gf, bf) = (r as f64, g as f64, b as f64);
    let h = if max == r {
        60.0 * ((gf - bf) / delta)
    } else if max == g {
        60.0 * ((bf - rf) / delta + 2.0)
    } else {
        60.0 * ((rf - gf) / delta + 4.0)
    };
    let h = if h < 0.0 { h + 360.0 } else { h };
    Hsv {
        h: if h >= 360.0 { h - 360.0 } else { h },
        s,
        v,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WhiteRule {
    pub luma_threshold: u8,
    /// Fraction of each crop edge excluded before counting.
    pub interior_margin: f64,
    pub min_white_fraction: f64,
}

impl Default for WhiteRule {
    fn default() -> Self {
        Self {
            luma_threshold: 200,
            interior_margin: 0.2,
            min_white_fraction: 0.5,
        }
    }
}

impl WhiteRule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.interior_margin) {
            return Err(Error::InvalidArgument(format!(
                "interior_margin {} outside [0, 0.5)",
                self.interior_margin
            )));
        }
        if !(self.min_white_fraction > 0.0 && self.min_white_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "min_white_fraction {} outside (0, 1]",
                self.min_white_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlueRoofRule {
    pub hue_min: f64,
    pub hue_max: f64,
    pub sat_min: f64,
    pub val_min: f64,
    pub min_blue_fraction: f64,
}

impl Default for BlueRoofRule {
    fn default() -> Self {
        Self {
            hue_min: 190.0,
            hue_max: 250.0,
            sat_min: 0.25,
            val_min: 0.25,
            min_blue_fraction: 0.5,
        }
    }
}

impl BlueRoofRule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.hue_min && self.hue_min < self.hue_max && self.hue_max <= 360.0) {
            return Err(Error::InvalidArgument(format!(
                "hue window [{}, {}] invalid",
                self.hue_min, self.hue_max
            )));
        }
        for (name, v) in [("sat_min", self.sat_min), ("val_min", self.val_min)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(self.min_blue_fraction > 0.0 && self.min_blue_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "min_blue_fraction {} outside (0, 1]",
                self.min_blue_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TankRule {
    /// Pixels with HSV value at or below this count as shadow.
    pub shadow_val_max: f64,
    /// Radius of the interior disk as a fraction of half the shorter crop edge.
    pub interior_radius_fraction: f64,
    pub ratio_threshold: f64,
}

impl Default for TankRule {
    fn default() -> Self {
        Self {
            shadow_val_max: 0.25,
            interior_radius_fraction: 0.8,
            ratio_threshold: 1.3,
        }
    }
}

impl TankRule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shadow_val_max) {
            return Err(Error::InvalidArgument(format!(
                "shadow_val_max {} outside [0, 1]",
                self.shadow_val_max
            )));
        }
        if !(self.interior_radius_fraction > 0.0 && self.interior_radius_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "interior_radius_fraction {} outside (0, 1]",
                self.interior_radius_fraction
            )));
        }
        if !(self.ratio_threshold >= 1.0 && self.ratio_threshold.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "ratio_threshold {} must be >= 1",
                self.ratio_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubtypeRule {
    White(WhiteRule),
    BlueRoof(BlueRoofRule),
    Tank(TankRule),
}

impl SubtypeRule {
    pub fn validate(&self) -> Result<()> {
        match self {
            SubtypeRule::White(r) => r.validate(),
            SubtypeRule::BlueRoof(r) => r.validate(),
            SubtypeRule::Tank(r) => r.validate(),
        }
    }

    /// Sub-type names indexed by category id.
    pub fn category_names(&self) -> [&'static str; 2] {
        match self {
            SubtypeRule::White(_) => ["white", "color"],
            SubtypeRule::BlueRoof(_) => ["blue", "other"],
            SubtypeRule::Tank(_) => ["full", "empty"],
        }
    }

    pub fn classify(&self, crop: &RasterImage) -> Result<SubtypeResult> {
        match self {
            SubtypeRule::White(r) => classify_white(crop, r),
            SubtypeRule::BlueRoof(r) => classify_blue_roof(crop, r),
            SubtypeRule::Tank(r) => classify_tank(crop, r),
        }
    }
}

/// A rule as stored in a rule file: one JSON object per line with a `name`
/// and the rule's `kind` and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedRule {
    pub name: String,
    #[serde(flatten)]
    pub rule: SubtypeRule,
}

pub fn read_rule_file(path: &Path) -> Result<Vec<NamedRule>> {
    let text = std::fs::read_to_string(path).at(path)?;
    let mut rules = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rule: NamedRule = serde_json::from_str(line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        rule.rule.validate()?;
        rules.push(rule);
    }
    Ok(rules)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubtypeLabel {
    White,
    Color,
    Blue,
    Other,
    Full,
    Empty,
}

impl SubtypeLabel {
    /// Category index after sub-typing: 0 for white/blue/full, 1 otherwise.
    pub fn index(self) -> u32 {
        match self {
            SubtypeLabel::White | SubtypeLabel::Blue | SubtypeLabel::Full => 0,
            SubtypeLabel::Color | SubtypeLabel::Other | SubtypeLabel::Empty => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SubtypeLabel::White => "white",
            SubtypeLabel::Color => "color",
            SubtypeLabel::Blue => "blue",
            SubtypeLabel::Other => "other",
            SubtypeLabel::Full => "full",
            SubtypeLabel::Empty => "empty",
        }
    }
}

impl fmt::Display for SubtypeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubtypeResult {
    pub label: SubtypeLabel,
    /// White fraction, blue fraction, or exterior/interior shadow ratio.
    /// The ratio is `f64::INFINITY` when only exterior shadow exists.
    pub score: f64,
    /// No evidence either way (e.g. a tank crop with no shadow at all).
    pub degenerate: bool,
}

fn fraction(hits: usize, total: usize) -> f64 {
    hits as f64 / total as f64
}

/// Pixel window left after trimming `margin` of each edge; the full crop if
/// trimming would leave nothing.
fn interior_window(width: u32, height: u32, margin: f64) -> (u32, u32, u32, u32) {
    let mx = (width as f64 * margin).floor() as u32;
    let my = (height as f64 * margin).floor() as u32;
    if 2 * mx >= width || 2 * my >= height {
        (0, 0, width, height)
    } else {
        (mx, my, width - mx, height - my)
    }
}

pub fn classify_white(crop: &RasterImage, rule: &WhiteRule) -> Result<SubtypeResult> {
    if crop.is_empty() {
        return Err(Error::EmptyCrop);
    }
    let (x0, y0, x1, y1) = interior_window(crop.width(), crop.height(), rule.interior_margin);
    let mut hits = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let [r, g, b] = crop.get(x, y);
            if to_luma(r, g, b) >= rule.luma_threshold {
                hits += 1;
            }
        }
    }
    let total = ((x1 - x0) * (y1 - y0)) as usize;
    let score = fraction(hits, total);
    let label = if score >= rule.min_white_fraction {
        SubtypeLabel::White
    } else {
        SubtypeLabel::Color
    };
    Ok(SubtypeResult {
        label,
        score,
        degenerate: false,
    })
}

pub fn is_blue(rgb: [u8; 3], rule: &BlueRoofRule) -> bool {
    let hsv = to_hsv(rgb[0], rgb[1], rgb[2]);
    hsv.h >= rule.hue_min && hsv.h <= rule.hue_max && hsv.s >= rule.sat_min && hsv.v >= rule.val_min
}

pub fn classify_blue_roof(crop: &RasterImage, rule: &BlueRoofRule) -> Result<SubtypeResult> {
    if crop.is_empty() {
        return Err(Error::EmptyCrop);
    }
    let hits = crop.pixels().iter().filter(|&&p| is_blue(p, rule)).count();
    let score = fraction(hits, crop.pixels().len());
    let label = if score >= rule.min_blue_fraction {
        SubtypeLabel::Blue
    } else {
        SubtypeLabel::Other
    };
    Ok(SubtypeResult {
        label,
        score,
        degenerate: false,
    })
}

/// Shadow pixel counts inside and outside the inscribed disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShadowMasses {
    pub interior: u64,
    pub exterior: u64,
}

/// Whether pixel `(x, y)` of a `width x height` crop lies in the interior disk
/// of radius `radius_fraction * min(width, height) / 2` around the crop
/// center. Distances are measured from pixel centers, boundary inclusive.
pub fn in_interior_disk(x: u32, y: u32, width: u32, height: u32, radius_fraction: f64) -> bool {
    let radius = radius_fraction * width.min(height) as f64 / 2.0;
    let dx = x as f64 + 0.5 - width as f64 / 2.0;
    let dy = y as f64 + 0.5 - height as f64 / 2.0;
    dx * dx + dy * dy <= radius * radius
}

pub fn is_shadow(rgb: [u8; 3], rule: &TankRule) -> bool {
    // HSV value is max(r, g, b) / 255.
    let max = rgb[0].max(rgb[1]).max(rgb[2]);
    max as f64 / 255.0 <= rule.shadow_val_max
}

const MIN_TANK_CROP: u32 = 3;

pub fn shadow_masses(crop: &RasterImage, rule: &TankRule) -> Result<ShadowMasses> {
    let (w, h) = (crop.width(), crop.height());
    if w < MIN_TANK_CROP || h < MIN_TANK_CROP {
        return Err(Error::DegenerateCrop {
            width: w,
            height: h,
            min: MIN_TANK_CROP,
        });
    }
    let mut masses = ShadowMasses {
        interior: 0,
        exterior: 0,
    };
    for y in 0..h {
        for x in 0..w {
            if !is_shadow(crop.get(x, y), rule) {
                continue;
            }
            if in_interior_disk(x, y, w, h, rule.interior_radius_fraction) {
                masses.interior += 1;
            } else {
                masses.exterior += 1;
            }
        }
    }
    Ok(masses)
}

/// The full/empty decision on already-measured shadow masses.
pub fn decide_tank(masses: ShadowMasses, rule: &TankRule) -> SubtypeResult {
    let ShadowMasses { interior, exterior } = masses;
    if interior == 0 && exterior == 0 {
        return SubtypeResult {
            label: SubtypeLabel::Empty,
            score: 0.0,
            degenerate: true,
        };
    }
    let ratio = if interior == 0 {
        f64::INFINITY
    } else {
        exterior as f64 / interior as f64
    };
    let label = if exterior > 0 && ratio >= rule.ratio_threshold {
        SubtypeLabel::Full
    } else {
        SubtypeLabel::Empty
    };
    SubtypeResult {
        label,
        score: ratio,
        degenerate: false,
    }
}

pub fn classify_tank(crop: &RasterImage, rule: &TankRule) -> Result<SubtypeResult> {
    Ok(decide_tank(shadow_masses(crop, rule)?, rule))
}

/// Per-detection outcome of [`apply_subtype`].
#[derive(Debug, Clone, PartialEq)]
pub enum DetectionOutcome {
    Classified(SubtypeResult),
    /// Crop or classification failed; the detection kept its category.
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubtypedLabels {
    pub labels: LabelFile,
    pub outcomes: Vec<DetectionOutcome>,
}

impl SubtypedLabels {
    pub fn failed_count(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| matches!(o, DetectionOutcome::Failed(_)))
            .count()
    }
}

/// Crops, classifies and re-labels every detection of `lf` on `img`.
/// Detections whose crop fails keep their original category and are flagged.
pub fn apply_subtype(lf: &LabelFile, img: &RasterImage, rule: &SubtypeRule) -> Result<SubtypedLabels> {
    rule.validate()?;
    let outcomes: Vec<DetectionOutcome> = lf
        .detections
        .iter()
        .map(|d| match extract_crop(img, &d.bbox).and_then(|c| rule.classify(&c)) {
            Ok(r) => DetectionOutcome::Classified(r),
            Err(e) => DetectionOutcome::Failed(e.to_string()),
        })
        .collect();
    let classified = LabelFile::new(
        lf.image_id.clone(),
        lf.detections
            .iter()
            .zip(&outcomes)
            .filter(|(_, o)| matches!(o, DetectionOutcome::Classified(_)))
            .map(|(d, _)| *d)
            .collect(),
    );
    let assignments: Vec<u32> = outcomes
        .iter()
        .filter_map(|o| match o {
            DetectionOutcome::Classified(r) => Some(r.label.index()),
            DetectionOutcome::Failed(_) => None,
        })
        .collect();
    let mut relabeled = split_by_subtype(&classified, &assignments, 2)?.detections.into_iter();
    let detections = lf
        .detections
        .iter()
        .zip(&outcomes)
        .map(|(d, o)| match o {
            DetectionOutcome::Classified(_) => relabeled.next().expect("one per classified detection"),
            DetectionOutcome::Failed(_) => *d,
        })
        .collect();
    Ok(SubtypedLabels {
        labels: LabelFile::new(lf.image_id.clone(), detections),
        outcomes,
    })
}

/// One line of a per-detection results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub image_id: String,
    pub det_index: usize,
    pub label: Option<SubtypeLabel>,
    /// Finite scores as numbers; an unbounded tank ratio as the string "inf".
    #[serde(with = "score_repr")]
    pub score: Option<f64>,
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

mod score_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_infinite() => "inf".serialize(s),
            Some(x) => x.serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(x)) => Ok(Some(x)),
            Some(Repr::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
            Some(Repr::Text(t)) => Err(serde::de::Error::custom(format!("bad score {t:?}"))),
        }
    }
}

impl SubtypedLabels {
    pub fn records(&self) -> Vec<ResultRecord> {
        self.outcomes
            .iter()
            .enumerate()
            .map(|(det_index, o)| match o {
                DetectionOutcome::Classified(r) => ResultRecord {
                    image_id: self.labels.image_id.clone(),
                    det_index,
                    label: Some(r.label),
                    score: Some(r.score),
                    degenerate: r.degenerate,
                    error: None,
                },
                DetectionOutcome::Failed(msg) => ResultRecord {
                    image_id: self.labels.image_id.clone(),
                    det_index,
                    label: None,
                    score: None,
                    degenerate: false,
                    error: Some(msg.clone()),
                },
            })
            .collect()
    }
}

pub fn write_result_records<W: Write>(records: &[ResultRecord], out: &mut W) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut *out, rec)?;
        out.write_all(b"\n").map_err(|e| Error::io("results", e))?;
    }
    Ok(())
}
