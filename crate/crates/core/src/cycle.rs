//! The test-to-train loop: train on the current manifest, infer on a fresh
//! pool, accept confident predictions as labels, optionally sub-type them,
//! grow the manifest and re-evaluate on a fixed split.
//!
//! All state lives under one directory:
//!
//! ```text
//! state/
//!   LOCK
//!   state.json
//!   cycle_<N>/
//!     train.manifest      balanced view the detector trained on
//!     weights, weights.ref
//!     raw/                detector output on the pool
//!     quarantine/         malformed detector output
//!     accepted/           accepted labels, confidences stripped
//!     merged.manifest     accumulated training set after this cycle
//!     eval_preds/, eval_report.jsonl, pr_curve.csv
//! ```
//!
//! `state.json` is rewritten atomically after each cycle and is the only
//! commit point; a cycle directory not recorded there is discarded on resume.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::labelstore::{
    balance_background, list_files, parse_label_text, read_label_file, stem_of,
    write_label_file, DatasetManifest, Detection, LabelFile, ManifestEntry, RasterImage, Split,
};
use crate::metrics::{evaluate, pair_label_dirs, EvalReport};
use crate::simulate::{derive, mock_detect, NoiseModel};
use crate::subtype::{apply_subtype, SubtypeRule};

const STATE_FILE: &str = "state.json";
const LOCK_FILE: &str = "LOCK";

/// Keeps detections with confidence `>= tau` and strips their confidences.
/// Every input file yields one output file, possibly empty.
pub fn accept_predictions(preds: &[LabelFile], tau: f64) -> Result<Vec<LabelFile>> {
    preds
        .iter()
        .map(|lf| {
            let mut kept = Vec::new();
            for (index, d) in lf.detections.iter().enumerate() {
                let c = d.confidence.ok_or(Error::MissingConfidence { index })?;
                if c >= tau {
                    kept.push(Detection::truth(d.category_id, d.bbox));
                }
            }
            Ok(LabelFile::new(lf.image_id.clone(), kept))
        })
        .collect()
}

/// True when each of the last `patience` cycle-to-cycle changes in `history`
/// is below `epsilon`.
pub fn plateau_stop(history: &[f64], epsilon: f64, patience: usize) -> bool {
    if history.len() < patience + 1 {
        return false;
    }
    history[history.len() - patience - 1..]
        .windows(2)
        .all(|w| w[1] - w[0] < epsilon)
}

/// External detector driven through shell command templates.
///
/// Placeholders `{train_manifest}`, `{images_dir}`, `{out_labels_dir}` and
/// `{weights}` are replaced by single-quoted paths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorContract {
    pub train_command: String,
    pub infer_command: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    3600
}

/// Train and infer steps of a detector.
pub trait Detector {
    fn train(&self, train_manifest: &Path, weights: &Path) -> Result<()>;
    /// Writes one `<stem>.txt` with confidences per image of `images_dir`.
    fn infer(&self, images_dir: &Path, weights: &Path, out_labels_dir: &Path) -> Result<()>;
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.to_string_lossy().replace('\'', r"'\''"))
}

impl DetectorContract {
    pub fn render(template: &str, paths: &[(&str, &Path)]) -> String {
        paths.iter().fold(template.to_owned(), |acc, (name, p)| {
            acc.replace(&format!("{{{name}}}"), &shell_quote(p))
        })
    }

    fn run(&self, stage: &str, command: &str) -> Result<()> {
        let detector_err = |message: String| Error::Detector {
            stage: stage.to_owned(),
            message,
        };
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::null())
            .stdout(Stdio::from(std::io::stderr()))
            .spawn()
            .map_err(|e| detector_err(format!("cannot start: {e}")))?;
        let deadline = Instant::now() + Duration::from_secs(self.timeout_secs);
        loop {
            match child.try_wait().map_err(|e| detector_err(e.to_string()))? {
                Some(status) if status.success() => return Ok(()),
                Some(status) => return Err(detector_err(format!("command exited with {status}"))),
                None if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(detector_err(format!("timed out after {} s", self.timeout_secs)));
                }
                None => std::thread::sleep(Duration::from_millis(20)),
            }
        }
    }
}

impl Detector for DetectorContract {
    fn train(&self, train_manifest: &Path, weights: &Path) -> Result<()> {
        let cmd = Self::render(
            &self.train_command,
            &[("train_manifest", train_manifest), ("weights", weights)],
        );
        self.run("train", &cmd)
    }

    fn infer(&self, images_dir: &Path, weights: &Path, out_labels_dir: &Path) -> Result<()> {
        let cmd = Self::render(
            &self.infer_command,
            &[
                ("images_dir", images_dir),
                ("out_labels_dir", out_labels_dir),
                ("weights", weights),
            ],
        );
        self.run("infer", &cmd)
    }
}

/// In-process stand-in: "inference" perturbs the ground truth found in
/// `truth_dir` under the same stem. Images without a truth file are treated
/// as background.
#[derive(Debug, Clone)]
pub struct MockDetector {
    pub truth_dir: PathBuf,
    pub noise: NoiseModel,
}

impl MockDetector {
    pub fn new(truth_dir: impl Into<PathBuf>, noise: NoiseModel) -> Self {
        Self {
            truth_dir: truth_dir.into(),
            noise,
        }
    }

    /// Mock predictions for one image id.
    pub fn predict(&self, image_id: &str) -> Result<LabelFile> {
        let truth_path = self.truth_dir.join(format!("{image_id}.txt"));
        let gt = if truth_path.exists() {
            read_label_file(&truth_path)?
        } else {
            LabelFile::new(image_id, Vec::new())
        };
        mock_detect(&gt, &self.noise, image_id)
    }
}

impl Detector for MockDetector {
    fn train(&self, train_manifest: &Path, weights: &Path) -> Result<()> {
        DatasetManifest::read(train_manifest)?;
        fs::write(weights, format!("mock seed={}\n", self.noise.seed)).at(weights)
    }

    fn infer(&self, images_dir: &Path, _weights: &Path, out_labels_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_labels_dir).at(out_labels_dir)?;
        for image in list_files(images_dir, "png")? {
            let id = stem_of(&image);
            let preds = self.predict(&id)?;
            write_label_file(&preds, true, &out_labels_dir.join(format!("{id}.txt")))?;
        }
        Ok(())
    }
}

fn default_accept() -> f64 {
    0.2
}
fn default_max_cycles() -> usize {
    3
}
fn default_epsilon() -> f64 {
    0.005
}
fn default_patience() -> usize {
    2
}
fn default_background() -> f64 {
    1.0 / 3.0
}
fn default_iou() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleConfig {
    pub seed_manifest: PathBuf,
    /// Image directories; cycle `i` reads `pools[i]`, and the last pool is
    /// reused once the list runs out.
    pub pools: Vec<PathBuf>,
    pub eval_images: PathBuf,
    pub eval_labels: PathBuf,
    #[serde(default = "default_accept")]
    pub accept_confidence: f64,
    #[serde(default)]
    pub rule: Option<SubtypeRule>,
    #[serde(default = "default_max_cycles")]
    pub max_cycles: usize,
    #[serde(default = "default_epsilon")]
    pub plateau_epsilon: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_background")]
    pub background_fraction: f64,
    #[serde(default = "default_iou")]
    pub eval_iou: f64,
    #[serde(default)]
    pub seed: u64,
}

impl CycleConfig {
    pub fn new(
        seed_manifest: impl Into<PathBuf>,
        pools: Vec<PathBuf>,
        eval_images: impl Into<PathBuf>,
        eval_labels: impl Into<PathBuf>,
    ) -> Self {
        Self {
            seed_manifest: seed_manifest.into(),
            pools,
            eval_images: eval_images.into(),
            eval_labels: eval_labels.into(),
            accept_confidence: default_accept(),
            rule: None,
            max_cycles: default_max_cycles(),
            plateau_epsilon: default_epsilon(),
            patience: default_patience(),
            background_fraction: default_background(),
            eval_iou: default_iou(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.pools.is_empty() {
            return bad("no unlabeled pools".into());
        }
        if !(self.accept_confidence >= 0.0 && self.accept_confidence.is_finite()) {
            return bad(format!("accept confidence {} must be >= 0", self.accept_confidence));
        }
        if self.max_cycles == 0 {
            return bad("max_cycles must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.plateau_epsilon.is_nan() || self.plateau_epsilon < 0.0 {
            return bad(format!("plateau epsilon {} must be >= 0", self.plateau_epsilon));
        }
        if !(self.background_fraction > 0.0 && self.background_fraction < 1.0) {
            return bad(format!("background fraction {} outside (0, 1)", self.background_fraction));
        }
        if let Some(rule) = &self.rule {
            rule.validate()?;
        }
        Ok(())
    }

    pub fn pool_for(&self, cycle: usize) -> &Path {
        &self.pools[(cycle - 1).min(self.pools.len() - 1)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Plateau,
    MaxCycles,
}

/// Bookkeeping for one completed cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    /// Entries in the balanced view used for training.
    pub trained_on: usize,
    /// Entries in the accumulated manifest after merging.
    pub training_size: usize,
    pub labeled_count: usize,
    pub accepted_images: usize,
    pub accepted_boxes: usize,
    pub background_added: usize,
    pub quarantined: Vec<PathBuf>,
    pub subtype_failures: usize,
    pub best_f1: f64,
    pub best_confidence: f64,
    pub map50: Option<f64>,
    pub map50_95: Option<f64>,
    pub weights: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleState {
    pub config: CycleConfig,
    /// Completed cycles.
    pub cycle: usize,
    /// Current accumulated training manifest.
    pub training_manifest: PathBuf,
    pub history: Vec<CycleRecord>,
    pub stopped: Option<StopReason>,
}

impl CycleState {
    pub fn best_f1_history(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.best_f1).collect()
    }

    pub fn read(state_dir: &Path) -> Result<Option<Self>> {
        let path = state_dir.join(STATE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).at(&path)?;
        serde_json::from_str(&text).map(Some).map_err(|e| Error::Format {
            path,
            message: e.to_string(),
        })
    }

    fn write(&self, state_dir: &Path) -> Result<()> {
        let path = state_dir.join(STATE_FILE);
        let tmp = state_dir.join(format!("{STATE_FILE}.tmp"));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&tmp, text).at(&tmp)?;
        fs::rename(&tmp, &path).at(&path)
    }
}

#[derive(Debug)]
pub struct CycleOutcome {
    pub state: CycleState,
    /// Evaluation of the last cycle run by this call.
    pub final_report: Option<EvalReport>,
}

/// Exclusive ownership of a state directory, released on drop.
#[derive(Debug)]
pub struct StateLock {
    path: PathBuf,
}

fn pid_alive(pid: u32) -> bool {
    Path::new("/proc").join(pid.to_string()).exists()
}

impl StateLock {
    pub fn acquire(state_dir: &Path) -> Result<Self> {
        fs::create_dir_all(state_dir).at(state_dir)?;
        let path = state_dir.join(LOCK_FILE);
        if let Ok(text) = fs::read_to_string(&path) {
            let holder = text.trim().parse::<u32>().ok();
            if holder.is_some_and(|pid| pid != std::process::id() && pid_alive(pid)) {
                return Err(Error::Locked(state_dir.to_path_buf()));
            }
            fs::remove_file(&path).at(&path)?;
        }
        let mut file = match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Locked(state_dir.to_path_buf()))
            }
            Err(e) => return Err(Error::io(path.display(), e)),
        };
        use std::io::Write;
        writeln!(file, "{}", std::process::id()).at(&path)?;
        Ok(Self { path })
    }
}

impl Drop for StateLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn canonical(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn eval_image_set(cfg: &CycleConfig) -> Result<HashSet<PathBuf>> {
    Ok(list_files(&cfg.eval_images, "png")?
        .iter()
        .map(|p| canonical(p))
        .collect())
}

fn assert_eval_purity(m: &DatasetManifest, eval: &HashSet<PathBuf>, what: &str) -> Result<()> {
    match m.entries.iter().find(|e| eval.contains(&canonical(&e.image_path))) {
        Some(e) => Err(Error::InvalidArgument(format!(
            "eval image {} appears in {what}",
            e.image_path.display()
        ))),
        None => Ok(()),
    }
}

fn recreate_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).at(dir)?;
    }
    fs::create_dir_all(dir).at(dir)
}

/// Predictions per pool image, plus the files moved to quarantine.
type Collected = (Vec<(PathBuf, LabelFile)>, Vec<PathBuf>);

/// Reads the detector's output for every pool image. Missing files count as
/// no detections; unparsable files or lines without confidence are moved to
/// `quarantine` and the image is skipped.
fn collect_predictions(
    images: &[PathBuf],
    raw: &Path,
    quarantine: &Path,
) -> Result<Collected> {
    let mut good = Vec::with_capacity(images.len());
    let mut bad = Vec::new();
    for image in images {
        let id = stem_of(image);
        let path = raw.join(format!("{id}.txt"));
        if !path.exists() {
            good.push((image.clone(), LabelFile::new(id, Vec::new())));
            continue;
        }
        let text = fs::read_to_string(&path).at(&path)?;
        let parsed = parse_label_text(&text, id.clone()).and_then(|lf| {
            match lf.detections.iter().position(|d| d.confidence.is_none()) {
                Some(index) => Err(Error::MissingConfidence { index }),
                None => Ok(lf),
            }
        });
        match parsed {
            Ok(lf) => good.push((image.clone(), lf)),
            Err(_) => {
                fs::create_dir_all(quarantine).at(quarantine)?;
                let dest = quarantine.join(format!("{id}.txt"));
                fs::rename(&path, &dest).at(&dest)?;
                bad.push(dest);
            }
        }
    }
    Ok((good, bad))
}

/// Replaces entries by image path (last cycle wins) and appends new ones.
fn merge_entries(acc: &mut DatasetManifest, new: Vec<ManifestEntry>) {
    let mut index: BTreeMap<PathBuf, usize> = acc
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.image_path.clone(), i))
        .collect();
    for e in new {
        match index.get(&e.image_path) {
            Some(&i) => acc.entries[i] = e,
            None => {
                index.insert(e.image_path.clone(), acc.entries.len());
                acc.entries.push(e);
            }
        }
    }
}

fn run_one_cycle(
    cfg: &CycleConfig,
    det: &dyn Detector,
    state_dir: &Path,
    n: usize,
    acc: &mut DatasetManifest,
    eval_set: &HashSet<PathBuf>,
) -> Result<(CycleRecord, EvalReport)> {
    let dir = state_dir.join(format!("cycle_{n}"));
    recreate_dir(&dir)?;

    let view = balance_background(acc, cfg.background_fraction, derive(cfg.seed, &format!("cycle_{n}")))?.manifest;
    assert_eval_purity(&view, eval_set, "the training manifest")?;
    let train_manifest = dir.join("train.manifest");
    view.write(&train_manifest)?;

    let weights = dir.join("weights");
    det.train(&train_manifest, &weights)?;
    let weights_ref = dir.join("weights.ref");
    fs::write(&weights_ref, format!("{}\n", weights.display())).at(&weights_ref)?;

    let pool = cfg.pool_for(n);
    let images = list_files(pool, "png")?;
    let raw = dir.join("raw");
    fs::create_dir_all(&raw).at(&raw)?;
    det.infer(pool, &weights, &raw)?;
    let (preds, quarantined) = collect_predictions(&images, &raw, &dir.join("quarantine"))?;

    let (paths, files): (Vec<PathBuf>, Vec<LabelFile>) = preds.into_iter().unzip();
    let mut accepted = accept_predictions(&files, cfg.accept_confidence)?;
    let mut subtype_failures = 0;
    if let Some(rule) = &cfg.rule {
        for (lf, image) in accepted.iter_mut().zip(&paths) {
            if lf.is_empty() {
                continue;
            }
            let img = RasterImage::read_png(image)?;
            // Rules split a single class, so detector categories are folded first.
            let collapsed = LabelFile::new(
                lf.image_id.clone(),
                lf.detections.iter().map(|d| Detection { category_id: 0, ..*d }).collect(),
            );
            let out = apply_subtype(&collapsed, &img, rule)?;
            subtype_failures += out.failed_count();
            *lf = out.labels;
        }
        acc.category_names = rule.category_names().iter().map(|s| s.to_string()).collect();
    }

    let accepted_dir = dir.join("accepted");
    fs::create_dir_all(&accepted_dir).at(&accepted_dir)?;
    let mut new_entries = Vec::with_capacity(accepted.len());
    let (mut accepted_images, mut accepted_boxes, mut background_added) = (0, 0, 0);
    for (lf, image) in accepted.iter().zip(&paths) {
        if lf.is_empty() {
            background_added += 1;
            new_entries.push(ManifestEntry::background(image.clone(), Split::Train));
        } else {
            accepted_images += 1;
            accepted_boxes += lf.detections.len();
            let label_path = accepted_dir.join(format!("{}.txt", lf.image_id));
            write_label_file(lf, false, &label_path)?;
            new_entries.push(ManifestEntry::labeled(image.clone(), label_path, Split::Train));
        }
    }
    merge_entries(acc, new_entries);
    assert_eval_purity(acc, eval_set, "the accumulated training manifest")?;
    let merged = dir.join("merged.manifest");
    acc.write(&merged)?;

    let eval_preds = dir.join("eval_preds");
    fs::create_dir_all(&eval_preds).at(&eval_preds)?;
    det.infer(&cfg.eval_images, &weights, &eval_preds)?;
    let samples = pair_label_dirs(&eval_preds, &cfg.eval_labels).map_err(|e| Error::Detector {
        stage: "eval".into(),
        message: e.to_string(),
    })?;
    let report = evaluate(&samples, cfg.eval_iou).map_err(|e| Error::Detector {
        stage: "eval".into(),
        message: e.to_string(),
    })?;
    report.write(&dir.join("eval_report.jsonl"), Some(&dir.join("pr_curve.csv")))?;

    let best = report.best_point();
    let record = CycleRecord {
        cycle: n,
        trained_on: view.entries.len(),
        training_size: acc.entries.len(),
        labeled_count: acc.labeled_count(),
        accepted_images,
        accepted_boxes,
        background_added,
        quarantined,
        subtype_failures,
        best_f1: report.best_f1(),
        best_confidence: best.confidence_threshold,
        map50: report.map.map50,
        map50_95: report.map.map50_95,
        weights,
    };
    Ok((record, report))
}

/// Runs (or resumes) the loop in `state_dir` until plateau or `max_cycles`.
///
/// A detector failure aborts the current cycle; everything committed so far
/// stays on disk and a later call resumes from the next cycle.
pub fn run_cycles(cfg: &CycleConfig, det: &dyn Detector, state_dir: &Path) -> Result<CycleOutcome> {
    cfg.validate()?;
    let _lock = StateLock::acquire(state_dir)?;
    let eval_set = eval_image_set(cfg)?;
    for pool in &cfg.pools {
        if let Some(p) = list_files(pool, "png")?.iter().find(|p| eval_set.contains(&canonical(p))) {
            return Err(Error::InvalidArgument(format!(
                "eval image {} is also in pool {}",
                p.display(),
                pool.display()
            )));
        }
    }

    let mut state = match CycleState::read(state_dir)? {
        Some(s) if s.config != *cfg => {
            return Err(Error::InvalidArgument(format!(
                "{} holds a run with a different configuration",
                state_dir.display()
            )))
        }
        Some(s) => s,
        None => {
            let seed = DatasetManifest::read(&cfg.seed_manifest)?;
            if seed.entries.is_empty() {
                return Err(Error::InvalidArgument("seed manifest is empty".into()));
            }
            CycleState {
                config: cfg.clone(),
                cycle: 0,
                training_manifest: cfg.seed_manifest.clone(),
                history: Vec::new(),
                stopped: None,
            }
        }
    };
    let mut acc = DatasetManifest::read(&state.training_manifest)?;
    assert_eval_purity(&acc, &eval_set, "the seed manifest")?;

    let mut final_report = None;
    while state.stopped.is_none() {
        let n = state.cycle + 1;
        let (record, report) = run_one_cycle(cfg, det, state_dir, n, &mut acc, &eval_set)?;
        state.training_manifest = state_dir.join(format!("cycle_{n}")).join("merged.manifest");
        state.history.push(record);
        state.cycle = n;
        if plateau_stop(&state.best_f1_history(), cfg.plateau_epsilon, cfg.patience) {
            state.stopped = Some(StopReason::Plateau);
        } else if n >= cfg.max_cycles {
            state.stopped = Some(StopReason::MaxCycles);
        }
        state.write(state_dir)?;
        final_report = Some(report);
    }
    Ok(CycleOutcome { state, final_report })
}
