use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use softlabel_core::cycle::{run_cycles, CycleConfig, Detector, DetectorContract, MockDetector};
use softlabel_core::geo_grid::{export_tour, plan_grid, TourRecord};
use softlabel_core::labelstore::{
    balance_background, extract_crop, list_files, manifest_stats, read_label_file, remap_categories,
    stem_of, write_label_file, ManifestEntry,
};
use softlabel_core::metrics::{count_above, count_report, evaluate, pair_label_dirs};
use softlabel_core::simulate::{
    generate_indexed_scene, read_config_record, write_intents, write_scene, NoiseModel, ObjectKind,
    SceneSpec,
};
use softlabel_core::subtype::{
    apply_subtype, read_rule_file, write_result_records, BlueRoofRule, SubtypeRule, TankRule, WhiteRule,
};
use softlabel_core::{DatasetManifest, GeoRect, LabelFile, RasterImage, Split, TileSpec};

use crate::{
    CropArgs, CurateArgs, CycleArgs, EvalArgs, KindArg, MockDetectArgs, NoiseArgs, PlanArgs, RuleArgs, RuleKind,
    SplitArg, StatsArgs, SubtypeArgs, SynthArgs, UsageError,
};
use crate::Cmd;

pub fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Plan(a) => plan(a),
        Cmd::Crop(a) => crop(a),
        Cmd::Subtype(a) => subtype(a),
        Cmd::Curate(a) => curate(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Synth(a) => synth(a),
        Cmd::MockDetect(a) => mock(a),
        Cmd::Cycle(a) => cycle(a),
        Cmd::Stats(a) => stats(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn plan(a: PlanArgs) -> Result<()> {
    let [s, w, n, e] = a.area;
    let area = GeoRect::new(s, w, n, e)?;
    let spec = TileSpec {
        width_px: a.tile,
        height_px: a.tile_height.unwrap_or(a.tile),
        gsd_m_per_px: a.gsd,
        overlap_fraction: a.overlap,
    };
    let jobs = plan_grid(&area, &spec)?;
    match &a.out {
        Some(path) => export_tour(&jobs, path)?,
        None => {
            let mut out = BufWriter::new(io::stdout().lock());
            for job in &jobs {
                writeln!(out, "{}", TourRecord::from(job).to_line())?;
            }
            out.flush()?;
        }
    }
    eprintln!("{} tiles", jobs.len());
    Ok(())
}

/// Pairs each PNG in `images` with `<labels>/<stem>.txt`; a missing label
/// file means no detections.
fn paired_inputs(images: &Path, labels: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    Ok(list_files(images, "png")?
        .into_iter()
        .map(|img| {
            let label = labels.join(format!("{}.txt", stem_of(&img)));
            (img, label)
        })
        .collect())
}

fn read_labels_or_empty(path: &Path, image_id: &str) -> Result<LabelFile> {
    if path.exists() {
        Ok(read_label_file(path)?)
    } else {
        Ok(LabelFile::new(image_id, Vec::new()))
    }
}

fn crop(a: CropArgs) -> Result<()> {
    create_dir(&a.out)?;
    let pairs = paired_inputs(&a.images, &a.labels)?;
    let counts = pairs
        .par_iter()
        .map(|(img_path, label_path)| -> Result<usize> {
            let id = stem_of(img_path);
            let lf = read_labels_or_empty(label_path, &id)?;
            if lf.is_empty() {
                return Ok(0);
            }
            let img = RasterImage::read_png(img_path)?;
            for (k, d) in lf.detections.iter().enumerate() {
                let c = extract_crop(&img, &d.bbox).with_context(|| format!("{id} detection {k}"))?;
                c.write_png(&a.out.join(format!("{id}_{k:03}.png")))?;
            }
            Ok(lf.detections.len())
        })
        .collect::<Result<Vec<_>>>()?;
    eprintln!("{} crops", counts.iter().sum::<usize>());
    Ok(())
}

fn build_rule(a: &RuleArgs) -> Result<SubtypeRule> {
    if let Some(path) = &a.rule_file {
        let name = a.rule_name.as_deref().unwrap_or_default();
        return read_rule_file(path)?
            .into_iter()
            .find(|r| r.name == name)
            .map(|r| r.rule)
            .ok_or_else(|| UsageError(format!("no rule named {name:?} in {}", path.display())).into());
    }
    let rule = match a.rule {
        Some(RuleKind::White) => SubtypeRule::White(WhiteRule {
            luma_threshold: a.luma_threshold,
            interior_margin: a.interior_margin,
            min_white_fraction: a.min_white_fraction,
        }),
        Some(RuleKind::BlueRoof) => SubtypeRule::BlueRoof(BlueRoofRule {
            hue_min: a.hue_min,
            hue_max: a.hue_max,
            sat_min: a.sat_min,
            val_min: a.val_min,
            min_blue_fraction: a.min_blue_fraction,
        }),
        Some(RuleKind::Tank) => SubtypeRule::Tank(TankRule {
            shadow_val_max: a.shadow_val_max,
            interior_radius_fraction: a.interior_radius_fraction,
            ratio_threshold: a.ratio_threshold,
        }),
        None => return Err(UsageError("one of --rule or --rule-file is required".into()).into()),
    };
    rule.validate()?;
    Ok(rule)
}

fn subtype(a: SubtypeArgs) -> Result<()> {
    let rule = build_rule(&a.rule)?;
    create_dir(&a.out)?;
    let pairs = paired_inputs(&a.images, &a.labels)?;
    let outputs = pairs
        .par_iter()
        .map(|(img_path, label_path)| {
            let id = stem_of(img_path);
            let lf = read_labels_or_empty(label_path, &id)?;
            let img = RasterImage::read_png(img_path)?;
            let out = apply_subtype(&lf, &img, &rule)?;
            let with_conf = !lf.is_empty() && lf.detections.iter().all(|d| d.confidence.is_some());
            write_label_file(&out.labels, with_conf, &a.out.join(format!("{id}.txt")))?;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut names = rule.category_names().join("\n");
    names.push('\n');
    fs::write(a.out.join("classes.names"), names)?;
    let failed: usize = outputs.iter().map(|o| o.failed_count()).sum();
    if let Some(path) = &a.results {
        let records: Vec<_> = outputs.iter().flat_map(|o| o.records()).collect();
        let mut w = BufWriter::new(fs::File::create(path).with_context(|| path.display().to_string())?);
        write_result_records(&records, &mut w)?;
        w.flush()?;
    }
    if failed > 0 {
        eprintln!("{failed} detections could not be classified and kept their category");
    }
    Ok(())
}

fn curate(a: CurateArgs) -> Result<()> {
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let mut m = match (&a.manifest, &a.images, &a.labels) {
        (Some(path), _, _) => DatasetManifest::read(path)?,
        (None, Some(images), Some(labels)) => {
            let mut entries = Vec::new();
            for (img, label) in paired_inputs(images, labels)? {
                let lf = read_labels_or_empty(&label, &stem_of(&img))?;
                entries.push(if lf.is_empty() {
                    ManifestEntry::background(img, split)
                } else {
                    ManifestEntry::labeled(img, label, split)
                });
            }
            DatasetManifest::new(entries, a.names.clone())
        }
        _ => return Err(UsageError("give --manifest or both --images and --labels".into()).into()),
    };
    if !a.names.is_empty() {
        m.category_names = a.names.clone();
    }

    if !a.keep.is_empty() {
        let out_dir = a.labels_out.as_ref().expect("clap enforces --labels-out");
        create_dir(out_dir)?;
        for entry in &mut m.entries {
            let Some(label) = entry.label_path.clone() else { continue };
            let remapped = remap_categories(&read_label_file(&label)?, &a.keep)?;
            let dest = out_dir.join(format!("{}.txt", remapped.image_id));
            write_label_file(&remapped, false, &dest)?;
            if remapped.is_empty() {
                *entry = ManifestEntry::background(entry.image_path.clone(), entry.split);
            } else {
                entry.label_path = Some(dest);
            }
        }
        if !m.category_names.is_empty() {
            m.category_names = a
                .keep
                .iter()
                .map(|&k| m.category_names.get(k as usize).cloned().unwrap_or_else(|| k.to_string()))
                .collect();
        }
    }

    if let Some(frac) = a.background_fraction {
        let outcome = balance_background(&m, frac, a.seed)?;
        if outcome.shortfall {
            eprintln!(
                "background shortfall: wanted {}, kept {}",
                outcome.requested_background, outcome.kept_background
            );
        }
        m = outcome.manifest;
    }
    m.write(&a.out)?;
    eprintln!("{} labeled, {} background", m.labeled_count(), m.background_count());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let samples = pair_label_dirs(&a.preds, &a.gts)?;
    let report = evaluate(&samples, a.iou)?;
    report.write(&a.out, a.curve.as_deref())?;
    let jsonl = report.to_jsonl()?;
    println!("{}", jsonl.lines().next().unwrap_or_default());
    if let Some(tau) = a.count_at {
        let predicted: usize = samples.iter().map(|s| count_above(&s.preds, tau)).sum();
        let reference = a.reference.unwrap_or(report.gt_count as i64);
        let c = count_report(predicted as i64, reference)?;
        println!(
            "{{\"kind\":\"count\",\"confidence\":{tau},\"predicted\":{},\"reference\":{},\"ratio\":{}}}",
            c.predicted,
            c.reference,
            c.ratio_display()
        );
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(path) => read_config_record::<SceneSpec>(path)?,
        None => SceneSpec {
            width_px: a.width,
            height_px: a.height,
            kind: match a.kind {
                KindArg::Car => ObjectKind::Car,
                KindArg::Roof => ObjectKind::Roof,
                KindArg::Tank => ObjectKind::Tank,
            },
            count_min: a.min_objects,
            count_max: a.max_objects,
            background_gray: a.background_gray,
            pixel_noise: a.pixel_noise,
            ..SceneSpec::default()
        },
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let images = a.out.join("images");
    let labels = a.out.join("labels");
    create_dir(&images)?;
    create_dir(&labels)?;
    let scenes = (0..a.scenes)
        .into_par_iter()
        .map(|i| {
            let scene = generate_indexed_scene(&spec, &a.prefix, i)?;
            write_scene(&scene, &images, &labels)?;
            let id = &scene.labels.image_id;
            let entry = if scene.labels.is_empty() {
                ManifestEntry::background(images.join(format!("{id}.png")), Split::Train)
            } else {
                ManifestEntry::labeled(images.join(format!("{id}.png")), labels.join(format!("{id}.txt")), Split::Train)
            };
            Ok((scene.intent_records(), entry))
        })
        .collect::<Result<Vec<_>>>()?;
    let (intents, entries): (Vec<_>, Vec<_>) = scenes.into_iter().unzip();
    let intents: Vec<_> = intents.into_iter().flatten().collect();
    write_intents(&intents, &a.out.join("intents.jsonl"))?;
    let name = match spec.kind {
        ObjectKind::Car => "vehicle",
        ObjectKind::Roof => "building",
        ObjectKind::Tank => "tank",
    };
    DatasetManifest::new(entries, vec![name.to_owned()]).write(&a.out.join("manifest.jsonl"))?;
    eprintln!("{} scenes, {} objects", a.scenes, intents.len());
    Ok(())
}

fn noise_model(a: &NoiseArgs) -> Result<NoiseModel> {
    let mut noise = match &a.noise_config {
        Some(path) => read_config_record::<NoiseModel>(path)?,
        None => NoiseModel {
            fn_rate: a.fn_rate,
            fp_rate: a.fp_rate,
            jitter_px: a.jitter,
            tp_conf_min: a.tp_conf_min,
            fp_conf_min: a.fp_conf_min,
            fp_conf_max: a.fp_conf_max,
            ..NoiseModel::default()
        },
    };
    if let Some(seed) = a.seed {
        noise.seed = seed;
    }
    noise.validate()?;
    Ok(noise)
}

fn mock(a: MockDetectArgs) -> Result<()> {
    let noise = noise_model(&a.noise)?;
    create_dir(&a.out)?;
    let ids: Vec<String> = match &a.images {
        Some(dir) => list_files(dir, "png")?,
        None => list_files(&a.truth, "txt")?,
    }
    .iter()
    .map(|p| stem_of(p))
    .collect();
    let det = MockDetector::new(&a.truth, noise);
    ids.par_iter().try_for_each(|id| -> Result<()> {
        let preds = det.predict(id)?;
        write_label_file(&preds, true, &a.out.join(format!("{id}.txt")))?;
        Ok(())
    })
}

#[derive(serde::Deserialize)]
struct CycleFile {
    #[serde(flatten)]
    config: CycleConfig,
    #[serde(default)]
    detector: Option<DetectorContract>,
}

fn cycle(a: CycleArgs) -> Result<()> {
    let file: CycleFile = read_config_record(&a.config)?;
    let detector: Box<dyn Detector> = match (&a.mock_truth, file.detector) {
        (Some(truth), _) => Box::new(MockDetector::new(truth, noise_model(&a.noise)?)),
        (None, Some(contract)) => Box::new(contract),
        (None, None) => {
            return Err(UsageError("config has no detector; pass --mock-truth for the built-in mock".into()).into())
        }
    };
    let outcome = run_cycles(&file.config, detector.as_ref(), &a.state)?;
    for r in &outcome.state.history {
        println!("{}", serde_json::to_string(r)?);
    }
    if let Some(reason) = outcome.state.stopped {
        eprintln!("stopped after cycle {}: {}", outcome.state.cycle, serde_json::to_string(&reason)?);
    }
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let m = DatasetManifest::read(&a.manifest)?;
    let s = manifest_stats(&m);
    println!("{}", serde_json::to_string(&s)?);
    eprintln!(
        "{} images, {} objects, {} per image, {} background",
        s.image_count,
        s.object_count,
        s.mean_display(),
        s.background_count
    );
    if !s.errors.is_empty() {
        eprintln!("{} unreadable label files", s.errors.len());
    }
    Ok(())
}
