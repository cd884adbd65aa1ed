//! The pipeline stages. Each reads its upstream stage's outputs (after
//! verifying them), writes into a fresh stage directory and finishes with
//! `stage.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use eusml_core::dataset::{
    assign_splits, build_manifest, compute_norm_stats, read_labels_file, station_at, validate_intervals,
    DatasetManifest, LabeledFrame, Split, Station, StationCounts,
};
use eusml_core::enhance::{self, EnhanceConfig, Method};
use eusml_core::imaging::{resize_bilinear, FloatImage, ImageBuffer};
use eusml_core::metrics::{confusion_matrix, table_header, EvalReport};
use eusml_core::nn::{
    argmax, checkpoint_bytes, grad_cam, load_checkpoint, manifest_dataset, overlay, predict_frames, prepare_image,
    softmax, train_with, EpochStats, ToyCnn,
};
use eusml_core::pipeline::{clean_stream, CleaningReport, FrameDir, Reference};
use eusml_core::synthetic::{write_corpus, CorpusConfig};

use crate::config::{Paths, PipelineConfig};
use crate::error::{CliError, Result};
use crate::stage::{fresh_dir, require_upstream, sha256_file, tree_digest, write_file, Stage, StageManifest};

/// A frame written by `clean` or `enhance`; `path` is relative to the
/// output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub proc: String,
    pub path: String,
    pub t: f64,
    pub source_index: usize,
}

fn rt(e: impl std::fmt::Display) -> CliError {
    CliError::runtime(e)
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s.into_bytes()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn procedure_dirs(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Validation(format!("no procedure directories under {}", root.display())));
    }
    Ok(dirs)
}

/// Samples every procedure, removes noise frames and inpaints pointer frames.
pub fn clean(cfg: &PipelineConfig) -> Result<BTreeMap<String, CleaningReport>> {
    let out = &cfg.paths.output_dir;
    let dir = Stage::Clean.dir(out, cfg.enhance.method);
    fresh_dir(&dir)?;
    let mut manifest = StageManifest::new(cfg, Stage::Clean, cfg.enhance.method);
    manifest.inputs.insert("reference".into(), sha256_file(&cfg.paths.reference)?);
    let reference =
        Reference::new(ImageBuffer::load_png(&cfg.paths.reference).map_err(rt)?, cfg.cleaning.bins).map_err(rt)?;

    let mut entries = Vec::new();
    let mut reports = BTreeMap::new();
    for proc_dir in procedure_dirs(&cfg.paths.frames_root)? {
        let source = FrameDir::open(&proc_dir).map_err(rt)?;
        let id = source.procedure_id.clone();
        manifest.inputs.insert(format!("frames/{id}"), tree_digest(&proc_dir)?);
        let samples = source.sampled(cfg.sample_fps).map_err(rt)?;
        fs::create_dir_all(dir.join("frames").join(&id)).map_err(rt)?;
        let (kept, report) = clean_stream(samples, &reference, &cfg.cleaning).map_err(|e| rt(format!("{id}: {e}")))?;
        let written: Vec<Result<FrameEntry>> = kept
            .par_iter()
            .map(|f| {
                let rel = format!("clean/frames/{id}/{:06}.png", f.source_index);
                f.image.save_png(out.join(&rel)).map_err(rt)?;
                Ok(FrameEntry { proc: id.clone(), path: rel, t: f.t, source_index: f.source_index })
            })
            .collect();
        for e in written {
            entries.push(e?);
        }
        eprintln!(
            "clean {id}: {} sampled, {} kept ({} gui, {} pink, {} blackened, {} pointer inpainted)",
            report.frames_in,
            report.frames_out,
            report.counts.gui,
            report.counts.pink,
            report.counts.blackened,
            report.counts.green_pointer
        );
        reports.insert(id, report);
    }
    write_file(&dir.join("frames.json"), &pretty(&entries))?;
    write_file(&dir.join("report.json"), &pretty(&reports))?;
    manifest.finish(&dir, &["frames", "frames.json", "report.json"])?;
    Ok(reports)
}

/// Applies one enhancement method to every cleaned frame.
pub fn enhance(cfg: &PipelineConfig, method: Method, force: bool) -> Result<usize> {
    let (_, upstream) = require_upstream(cfg, Stage::Clean, method, force)?;
    let out = &cfg.paths.output_dir;
    let dir = Stage::Enhance.dir(out, method);
    fresh_dir(&dir)?;
    let entries: Vec<FrameEntry> = read_json(&Stage::Clean.dir(out, method).join("frames.json"))?;
    let ecfg = EnhanceConfig { method, ..cfg.enhance };
    let prefix = format!("{method}/enhance/frames");
    for proc in entries.iter().map(|e| &e.proc).collect::<std::collections::BTreeSet<_>>() {
        fs::create_dir_all(out.join(&prefix).join(proc)).map_err(rt)?;
    }
    let written: Vec<Result<FrameEntry>> = entries
        .par_iter()
        .map(|e| {
            let img = ImageBuffer::load_png(out.join(&e.path)).map_err(rt)?;
            let enhanced = enhance::apply(&img, &ecfg).map_err(rt)?;
            let rel = format!("{prefix}/{}/{:06}.png", e.proc, e.source_index);
            enhanced.save_png(out.join(&rel)).map_err(rt)?;
            Ok(FrameEntry { path: rel, ..e.clone() })
        })
        .collect();
    let written: Vec<FrameEntry> = written.into_iter().collect::<Result<_>>()?;
    write_file(&dir.join("frames.json"), &pretty(&written))?;
    let mut manifest = StageManifest::new(cfg, Stage::Enhance, method);
    manifest.inputs.insert("clean/stage.json".into(), upstream);
    manifest.finish(&dir, &["frames", "frames.json"])?;
    eprintln!("enhance {method}: {} frames", written.len());
    Ok(written.len())
}

/// Labels enhanced frames, assigns procedures to splits and computes the
/// train-only normalization statistics.
pub fn split(cfg: &PipelineConfig, method: Method, force: bool) -> Result<DatasetManifest> {
    let (_, upstream) = require_upstream(cfg, Stage::Enhance, method, force)?;
    let out = &cfg.paths.output_dir;
    let dir = Stage::Split.dir(out, method);
    fresh_dir(&dir)?;
    let mut manifest = StageManifest::new(cfg, Stage::Split, method);
    manifest.inputs.insert(format!("{method}/enhance/stage.json"), upstream);

    let entries: Vec<FrameEntry> = read_json(&Stage::Enhance.dir(out, method).join("frames.json"))?;
    let mut by_proc: BTreeMap<String, Vec<FrameEntry>> = BTreeMap::new();
    for e in entries {
        by_proc.entry(e.proc.clone()).or_default().push(e);
    }
    let mut labeled = Vec::new();
    let mut counts: BTreeMap<String, StationCounts> = BTreeMap::new();
    for (proc, frames) in &by_proc {
        let path = cfg.paths.labels_dir.join(format!("{proc}.csv"));
        if !path.exists() {
            return Err(CliError::Validation(format!("no label file {} for procedure {proc}", path.display())));
        }
        manifest.inputs.insert(format!("labels/{proc}.csv"), sha256_file(&path)?);
        let intervals = read_labels_file(&path, cfg.label_offset).map_err(|e| CliError::Validation(e.to_string()))?;
        validate_intervals(&intervals).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let mut c = [0; Station::COUNT];
        for f in frames {
            if let Some(station) = station_at(&intervals, f.t) {
                c[station.index()] += 1;
                labeled.push(LabeledFrame { proc: proc.clone(), path: f.path.clone(), station, t: f.t });
            }
        }
        if c.iter().sum::<usize>() > 0 {
            counts.insert(proc.clone(), c);
        } else {
            eprintln!("split: {proc} has no frames inside a labeled interval and is left out");
        }
    }
    let assignment = assign_splits(&counts, cfg.split.test_frac, cfg.split.seed).map_err(rt)?;
    let train_frames: Vec<&LabeledFrame> =
        labeled.iter().filter(|f| assignment.split_of(&f.proc) == Some(Split::Train)).collect();
    let prepared: Vec<Result<ImageBuffer>> = train_frames
        .par_iter()
        .map(|f| Ok(prepare_image(&ImageBuffer::load_png(out.join(&f.path)).map_err(rt)?, cfg.model.input_size)))
        .collect();
    let prepared: Vec<ImageBuffer> = prepared.into_iter().collect::<Result<_>>()?;
    let norm = compute_norm_stats(&prepared).map_err(rt)?;
    let ecfg = EnhanceConfig { method, ..cfg.enhance };
    let dataset = build_manifest(labeled, assignment, norm, ecfg).map_err(rt)?;
    write_file(&dir.join("manifest.json"), dataset.to_json().as_bytes())?;
    manifest.finish(&dir, &["manifest.json"])?;
    for (split, per_station) in &dataset.counts {
        let line: Vec<String> = per_station.iter().map(|(s, n)| format!("{s} {n}")).collect();
        eprintln!("split {method} {split:?}: {}", line.join(", "));
    }
    Ok(dataset)
}

fn load_manifest(cfg: &PipelineConfig, method: Method) -> Result<DatasetManifest> {
    let path = Stage::Split.dir(&cfg.paths.output_dir, method).join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let m = DatasetManifest::from_json(&text).map_err(rt)?;
    m.check().map_err(rt)?;
    Ok(m)
}

/// Trains the classifier on the train split.
pub fn train(cfg: &PipelineConfig, method: Method, force: bool) -> Result<Vec<EpochStats>> {
    let (_, upstream) = require_upstream(cfg, Stage::Split, method, force)?;
    let out = &cfg.paths.output_dir;
    let dir = Stage::Train.dir(out, method);
    fresh_dir(&dir)?;
    let manifest = load_manifest(cfg, method)?;
    let data = manifest_dataset(&manifest, Split::Train, out, cfg.model.input_size).map_err(rt)?;
    let mut model =
        ToyCnn::new(Station::COUNT, cfg.model.input_size, cfg.model.coord_channels, cfg.model.seed).map_err(rt)?;
    let history = train_with(&mut model, &data, &cfg.train, |_, s| {
        eprintln!("train {method} epoch {:>3}: loss {:.4} accuracy {:.3}", s.epoch, s.loss, s.accuracy);
    })
    .map_err(rt)?;
    write_file(&dir.join("model.ckpt"), &checkpoint_bytes(&model, &manifest.norm))?;
    write_file(&dir.join("history.json"), &pretty(&history))?;
    let mut stage = StageManifest::new(cfg, Stage::Train, method);
    stage.inputs.insert(format!("{method}/split/stage.json"), upstream);
    stage.finish(&dir, &["model.ckpt", "history.json"])?;
    Ok(history)
}

fn load_model(cfg: &PipelineConfig, method: Method, manifest: &DatasetManifest) -> Result<ToyCnn> {
    let path = Stage::Train.dir(&cfg.paths.output_dir, method).join("model.ckpt");
    let f = fs::File::open(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let (model, norm) = load_checkpoint(std::io::BufReader::new(f)).map_err(rt)?;
    if norm != manifest.norm {
        return Err(CliError::Prerequisite(format!(
            "{} was trained with different normalization than the current split; rerun `{}`",
            path.display(),
            Stage::Train.command(method)
        )));
    }
    Ok(model)
}

/// Metrics of one method, as written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub label: String,
    pub test_frames: usize,
    pub report: EvalReport,
}

impl MethodReport {
    pub fn row(&self) -> String {
        self.report.table_row(&self.label)
    }
}

/// Scores the trained model on the test split.
pub fn eval(cfg: &PipelineConfig, method: Method, force: bool) -> Result<MethodReport> {
    let (_, split_hash) = require_upstream(cfg, Stage::Split, method, force)?;
    let (_, train_hash) = require_upstream(cfg, Stage::Train, method, force)?;
    let out = &cfg.paths.output_dir;
    let dir = Stage::Eval.dir(out, method);
    fresh_dir(&dir)?;
    let manifest = load_manifest(cfg, method)?;
    let model = load_model(cfg, method, &manifest)?;
    let (truth, pred) = predict_frames(&model, &manifest, Split::Test, out).map_err(rt)?;
    let cm = confusion_matrix(&truth, &pred, Station::COUNT).map_err(rt)?;
    let report = EvalReport::from_confusion(cm)
        .map_err(|e| CliError::Runtime(format!("{method}: {e} (the test split needs frames of every station)")))?;
    let result = MethodReport { method, label: method.table_label().to_string(), test_frames: truth.len(), report };
    write_file(&dir.join("report.json"), &pretty(&result))?;
    write_file(&dir.join("row.txt"), format!("{}\n", result.row()).as_bytes())?;
    let mut stage = StageManifest::new(cfg, Stage::Eval, method);
    stage.inputs.insert(format!("{method}/split/stage.json"), split_hash);
    stage.inputs.insert(format!("{method}/train/stage.json"), train_hash);
    stage.finish(&dir, &["report.json", "row.txt"])?;
    Ok(result)
}

/// Header plus one row per report.
pub fn format_table(reports: &[MethodReport]) -> String {
    let mut s = table_header();
    s.push('\n');
    for r in reports {
        s.push_str(&r.row());
        s.push('\n');
    }
    s
}

/// Writes `table.txt` and `table.json` at the top of the output directory.
pub fn write_table(cfg: &PipelineConfig, reports: &[MethodReport]) -> Result<String> {
    let table = format_table(reports);
    write_file(&cfg.paths.output_dir.join("table.txt"), table.as_bytes())?;
    write_file(&cfg.paths.output_dir.join("table.json"), &pretty(&reports))?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub file: String,
    pub frame: String,
    pub truth: Station,
    pub predicted: Station,
    pub probabilities: Vec<f64>,
}

/// Grad-CAM overlays of the predicted class for the first test frames.
pub fn gradcam(cfg: &PipelineConfig, method: Method, force: bool) -> Result<Vec<Explanation>> {
    let (_, split_hash) = require_upstream(cfg, Stage::Split, method, force)?;
    let (_, train_hash) = require_upstream(cfg, Stage::Train, method, force)?;
    let out = &cfg.paths.output_dir;
    let dir = Stage::GradCam.dir(out, method);
    fresh_dir(&dir)?;
    fs::create_dir_all(dir.join("overlays")).map_err(rt)?;
    let manifest = load_manifest(cfg, method)?;
    let model = load_model(cfg, method, &manifest)?;
    let layer = cfg.layer()?;
    let size = cfg.model.input_size;
    let frames: Vec<_> = manifest.frames_in(Split::Test).take(cfg.gradcam.images).collect();
    let explained: Vec<Result<Explanation>> = frames
        .par_iter()
        .enumerate()
        .map(|(k, f)| {
            let img = ImageBuffer::load_png(out.join(&f.path)).map_err(rt)?;
            let x = eusml_core::dataset::normalize(&prepare_image(&img, size), &manifest.norm).map_err(rt)?.data;
            let logits = model.forward_one(&x).map_err(rt)?.logits;
            let predicted = argmax(&logits);
            let heat = grad_cam(&model, &x, predicted, layer).map_err(rt)?;
            let small = FloatImage { width: heat.width, height: heat.height, channels: 1, data: heat.values };
            let up = resize_bilinear(&small, img.width(), img.height());
            let blended = overlay(&up.data, img.width(), img.height(), &img, cfg.gradcam.alpha).map_err(rt)?;
            let file = format!("overlays/{k:03}_{}_{:06}.png", f.proc, (f.t * 1000.0).round() as u64);
            blended.save_png(dir.join(&file)).map_err(rt)?;
            Ok(Explanation {
                file,
                frame: f.path.clone(),
                truth: f.station,
                predicted: Station::from_index(predicted).expect("three classes"),
                probabilities: softmax(&logits),
            })
        })
        .collect();
    let explained: Vec<Explanation> = explained.into_iter().collect::<Result<_>>()?;
    write_file(&dir.join("gradcam.json"), &pretty(&explained))?;
    let mut stage = StageManifest::new(cfg, Stage::GradCam, method);
    stage.inputs.insert(format!("{method}/split/stage.json"), split_hash);
    stage.inputs.insert(format!("{method}/train/stage.json"), train_hash);
    stage.finish(&dir, &["overlays", "gradcam.json"])?;
    Ok(explained)
}

/// Writes a synthetic corpus under `root/data` and a matching
/// `root/pipeline.json` tuned for quick runs. Returns the config path.
pub fn synth(root: &Path, corpus: &CorpusConfig) -> Result<std::path::PathBuf> {
    let data = root.join("data");
    write_corpus(&data, corpus).map_err(rt)?;
    let mut cfg = PipelineConfig {
        paths: Paths {
            frames_root: "data/frames".into(),
            labels_dir: "data/labels".into(),
            reference: "data/reference.png".into(),
            output_dir: "out".into(),
        },
        sample_fps: 1.0,
        label_offset: 0.0,
        cleaning: Default::default(),
        enhance: EnhanceConfig { nlm_patch: 5, nlm_window: 11, ..Default::default() },
        split: Default::default(),
        model: Default::default(),
        train: Default::default(),
        gradcam: Default::default(),
        serve: Default::default(),
    };
    cfg.serve.data_dir = Some("labels-db".into());
    let path = root.join("pipeline.json");
    write_file(&path, &pretty(&cfg))?;
    Ok(path)
}
