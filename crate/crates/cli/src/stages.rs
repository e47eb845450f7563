use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sintermon::model::{load_model, save_model, train_with_progress, EncoderDecoderModel};
use sintermon::pipeline::{fit_normalization, prepare_layer, LayerWindows};
use sintermon::scoring::{
    baseline_frame_scores, calibrate, confusion, detect_layer, parse_scores_csv, precision_recall, roc_auc,
    score_layer, write_heatmap_csv, write_heatmap_pgm, write_scores_csv, Calibration, DetectionConfig, EvalReport,
    LineScores, MaskClass, ScoreRow,
};
use sintermon::synth::{
    generate_dataset, load_manifest, DatasetManifest, DatasetRequest, FaultPattern, LayerEntry, LayerRole,
    LayerSequence,
};
use sintermon::{Error, Result};

use crate::config::ExperimentConfig;
use crate::manifest::{dir_checksums, file_sha, prepare_output, read, relative, verify_recorded, write, RunManifest, RUN_MANIFEST};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Inputs shared by every stage.
pub struct Stage<'a> {
    pub config: &'a ExperimentConfig,
    /// Run directory holding every stage's output folder.
    pub root: &'a Path,
    pub overwrite: bool,
    /// Progress lines go here (stderr from the binary, nowhere in tests).
    pub log: &'a mut dyn FnMut(&str),
}

impl Stage<'_> {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn dataset_dir(&self) -> PathBuf {
        self.dir(&self.config.outputs.dataset)
    }

    fn model_dir(&self) -> PathBuf {
        self.dir(&self.config.outputs.model)
    }

    fn scores_dir(&self) -> PathBuf {
        self.dir(&self.config.outputs.scores)
    }

    fn reports_dir(&self) -> PathBuf {
        self.dir(&self.config.outputs.reports)
    }

    fn summary_dir(&self) -> PathBuf {
        self.dir(&self.config.outputs.summary)
    }

    /// Loads an upstream stage's run manifest and checks its outputs are
    /// unchanged on disk.
    fn upstream(&self, dir: &Path, producer: &str) -> Result<RunManifest> {
        if !dir.join(RUN_MANIFEST).exists() {
            return Err(Error::NotFound(format!(
                "{} (run `sintermon {producer}` first)",
                dir.join(RUN_MANIFEST).display()
            )));
        }
        let m = RunManifest::load(dir)?;
        if m.stage != producer {
            return Err(Error::Format(format!(
                "{} was written by stage {:?}, expected {producer:?}",
                dir.display(),
                m.stage
            )));
        }
        verify_recorded(self.root, &m.outputs)?;
        Ok(m)
    }

    fn finish(&self, stage: &str, dir: &Path, inputs: BTreeMap<String, String>, started: Instant) -> Result<()> {
        RunManifest {
            stage: stage.into(),
            tool_version: TOOL_VERSION.into(),
            config: self.config.clone(),
            inputs,
            outputs: dir_checksums(self.root, dir)?,
            seconds: started.elapsed().as_secs_f64(),
        }
        .save(dir)
    }

    fn input_sha(&self, path: &Path) -> Result<(String, String)> {
        Ok((relative(self.root, path), file_sha(path)?))
    }

    fn load_dataset(&self) -> Result<(PathBuf, DatasetManifest)> {
        let dir = self.dataset_dir();
        self.upstream(&dir, "gen")?;
        let manifest = load_manifest(&dir)?;
        if manifest.process != self.config.process() {
            return Err(Error::InvalidArgument(format!(
                "dataset in {} was generated with different process parameters; re-run `sintermon gen`",
                dir.display()
            )));
        }
        Ok((dir, manifest))
    }
}

pub fn gen(s: &mut Stage<'_>) -> Result<DatasetManifest> {
    let started = Instant::now();
    let dir = s.dataset_dir();
    prepare_output(&dir, s.overwrite)?;
    let params = s.config.process();
    let req = DatasetRequest {
        pattern: FaultPattern::evenly_spaced(params.lines_per_layer, s.config.dataset.fault_events),
        params,
        train_layers: s.config.dataset.train_layers,
        deviations: s.config.dataset.deviations.clone(),
        overwrite: false,
    };
    let manifest = generate_dataset(&dir, &req)?;
    (s.log)(&format!("generated {} layers in {}", manifest.layers.len(), dir.display()));
    s.finish("gen", &dir, BTreeMap::new(), started)?;
    Ok(manifest)
}

fn prepared_layer(s: &Stage<'_>, dir: &Path, manifest: &DatasetManifest, id: u32, spec: &sintermon::pipeline::NormalizationSpec) -> Result<LayerSequence> {
    let raw = manifest.load_layer(dir, id)?;
    prepare_layer(&raw, spec, s.config.pipeline.downsample)
}

pub fn train(s: &mut Stage<'_>) -> Result<EncoderDecoderModel> {
    let started = Instant::now();
    let (ds_dir, manifest) = s.load_dataset()?;
    let out = s.model_dir();
    prepare_output(&out, s.overwrite)?;

    let train_ids: Vec<u32> = manifest.layers_with_role(LayerRole::Train).map(|l| l.id).collect();
    if train_ids.is_empty() {
        return Err(Error::InvalidArgument("dataset has no training layers".into()));
    }
    let raw: Vec<LayerSequence> = train_ids
        .iter()
        .map(|&id| manifest.load_layer(&ds_dir, id))
        .collect::<Result<_>>()?;
    let spec = fit_normalization(raw.iter())?;
    let prepared: Vec<LayerSequence> = raw
        .iter()
        .map(|l| prepare_layer(l, &spec, s.config.pipeline.downsample))
        .collect::<Result<_>>()?;
    drop(raw);
    let arch = &s.config.architecture;
    let windows = LayerWindows::new(&prepared, arch.p, arch.q)?;
    let mut model = EncoderDecoderModel::build(arch.clone(), s.config.seed)?;
    let cfg = s.config.training();
    let epochs = cfg.epochs;
    let log = &mut *s.log;
    train_with_progress(&mut model, &windows, &cfg, Some(&spec), |e| {
        let val = e.val_loss.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        log(&format!("epoch {}/{epochs} train {:.4} val {val}", e.epoch + 1, e.train_loss));
    })?;
    save_model(&model, Some(&spec), &out)?;
    let inputs = BTreeMap::from([s.input_sha(&ds_dir.join("manifest.json"))?]);
    s.finish("train", &out, inputs, started)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub model: Calibration,
    pub baseline: Calibration,
    pub detection: DetectionConfig,
}

pub fn scores_file(id: u32) -> String {
    format!("layer_{id:04}.csv")
}

pub fn baseline_file(id: u32) -> String {
    format!("layer_{id:04}_baseline.csv")
}

pub fn snippet_file(id: u32) -> String {
    format!("layer_{id:04}_snippets.csv")
}

pub fn score(s: &mut Stage<'_>) -> Result<CalibrationRecord> {
    let started = Instant::now();
    let (ds_dir, manifest) = s.load_dataset()?;
    let model_dir = s.model_dir();
    let trained = s.upstream(&model_dir, "train")?;
    verify_recorded(s.root, &trained.inputs)?;
    let (model, spec) = load_model(&model_dir)?;
    let spec = spec.ok_or_else(|| Error::Format(format!("{} records no normalization", model_dir.display())))?;
    if model.config() != &s.config.architecture {
        return Err(Error::InvalidArgument(format!(
            "model in {} has a different architecture than the config; re-run `sintermon train`",
            model_dir.display()
        )));
    }
    let out = s.scores_dir();
    prepare_output(&out, s.overwrite)?;

    let det = &s.config.detection;
    let (p, q) = (model.config().p, model.config().q);
    let mut scored: Vec<(&LayerEntry, LineScores, LineScores)> = Vec::new();
    for entry in &manifest.layers {
        let layer = prepared_layer(s, &ds_dir, &manifest, entry.id, &spec)?;
        let ls = score_layer(&model, &layer, det.metric, s.config.pipeline.batch_size)?;
        let mut snippets = String::from("start_line,frame,e_rec,e_reg\n");
        for e in &ls.snippet_errors {
            snippets.push_str(&format!("{},{},{},{}\n", e.origin.start_line, e.origin.frame_index, e.e_rec, e.e_reg));
        }
        write(&out.join(snippet_file(entry.id)), snippets.as_bytes())?;
        let (rows, cols) = (layer.lines, layer.frames_per_line);
        for (name, grid) in [("f_reg", &ls.frames.f_reg), ("f_rec", &ls.frames.f_rec)] {
            write_heatmap_pgm(&out.join(format!("layer_{:04}_{name}.pgm", entry.id)), grid, rows, cols)?;
            write_heatmap_csv(&out.join(format!("layer_{:04}_{name}.csv", entry.id)), grid, rows, cols)?;
        }
        let line = LineScores::from_frames(entry.id, &ls.frames, det.detrend_window)?;
        let base = LineScores::from_frames(entry.id, &baseline_frame_scores(&layer), det.detrend_window)?;
        (s.log)(&format!("scored layer {} ({} snippets)", entry.id, ls.snippet_errors.len()));
        scored.push((entry, line, base));
    }

    let mut train_model: Vec<LineScores> = Vec::new();
    let mut train_base: Vec<LineScores> = Vec::new();
    for (entry, line, base) in &scored {
        if entry.role == LayerRole::Train {
            train_model.push(line.clone());
            train_base.push(base.clone());
        }
    }
    let record = CalibrationRecord {
        model: calibrate(&mut train_model, det)?,
        baseline: calibrate(&mut train_base, det)?,
        detection: det.clone(),
    };
    for (entry, line, base) in &mut scored {
        let labels: BTreeSet<usize> = entry.fault_lines.iter().copied().collect();
        let d = detect_layer(line, &labels, &record.model, det, p, q)?;
        write_scores_csv(&out.join(scores_file(entry.id)), line, &d.flags, &d.mask)?;
        let b = detect_layer(base, &labels, &record.baseline, det, p, q)?;
        write_scores_csv(&out.join(baseline_file(entry.id)), base, &b.flags, &b.mask)?;
    }
    write(&out.join("calibration.json"), serde_json::to_string_pretty(&record)?.as_bytes())?;

    let mut inputs = BTreeMap::from([s.input_sha(&ds_dir.join("manifest.json"))?]);
    inputs.extend(trained.outputs.clone());
    s.finish("score", &out, inputs, started)?;
    Ok(record)
}

fn load_rows(path: &Path, lines: usize) -> Result<Vec<ScoreRow>> {
    let rows = parse_scores_csv(&read(path)?)?;
    if rows.len() != lines {
        return Err(Error::Shape(format!(
            "{} has {} rows, dataset layers have {lines} lines",
            path.display(),
            rows.len()
        )));
    }
    Ok(rows)
}

fn undefined_to_none<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn eval(s: &mut Stage<'_>) -> Result<Vec<EvalReport>> {
    let started = Instant::now();
    let (_, manifest) = s.load_dataset()?;
    let scores_dir = s.scores_dir();
    let scored = s.upstream(&scores_dir, "score")?;
    verify_recorded(s.root, &scored.inputs)?;
    let record: CalibrationRecord = serde_json::from_slice(&read(&scores_dir.join("calibration.json"))?)?;
    let out = s.reports_dir();
    prepare_output(&out, s.overwrite)?;

    let mut reports = Vec::new();
    for entry in &manifest.layers {
        let labels: BTreeSet<usize> = entry.fault_lines.iter().copied().collect();
        let rows = load_rows(&scores_dir.join(scores_file(entry.id)), manifest.lines_per_layer)?;
        let base = load_rows(&scores_dir.join(baseline_file(entry.id)), manifest.lines_per_layer)?;
        let flags: Vec<bool> = rows.iter().map(|r| r.flag == 1).collect();
        let mask: Vec<MaskClass> = rows.iter().map(|r| r.mask).collect();
        let normalized: Vec<f64> = rows.iter().map(|r| r.f_reg_normalized).collect();
        let pr = undefined_to_none(precision_recall(&flags, &labels, &mask))?;
        let roc = undefined_to_none(roc_auc(&normalized, &labels, &mask))?;
        let base_scores: Vec<f64> = base.iter().map(|r| r.f_reg_normalized).collect();
        let base_mask: Vec<MaskClass> = base.iter().map(|r| r.mask).collect();
        let base_roc = undefined_to_none(roc_auc(&base_scores, &labels, &base_mask))?;
        let c = confusion(&flags, &labels, &mask)?;
        let report = EvalReport {
            layer_id: entry.id,
            power_deviation: entry.power_deviation,
            threshold: record.model.threshold,
            precision: match pr {
                Some((p, _)) => p,
                None => (c.tp + c.fp > 0).then(|| c.tp as f64 / (c.tp + c.fp) as f64),
            },
            recall: pr.map(|(_, r)| r),
            auc: roc.as_ref().map(|r| r.auc),
            confusion: c,
            roc: roc.map(|r| r.points),
            baseline_auc: base_roc.as_ref().map(|r| r.auc),
            baseline_roc: base_roc.map(|r| r.points),
        };
        write(
            &out.join(format!("layer_{:04}.json", entry.id)),
            serde_json::to_string_pretty(&report)?.as_bytes(),
        )?;
        reports.push(report);
    }
    let inputs = scored.outputs.clone();
    s.finish("eval", &out, inputs, started)?;
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub layer_id: u32,
    pub power_deviation: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub auc: Option<f64>,
    pub baseline_auc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub threshold: f64,
    /// One row per off-nominal test layer.
    pub rows: Vec<SummaryRow>,
    /// False positives summed over the nominal training layers.
    pub train_false_positives: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into())
}

impl Summary {
    pub fn table(&self) -> String {
        let mut t = String::from("| layer | deviation | precision | recall | AUC | baseline AUC |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            t.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                r.layer_id,
                r.power_deviation.map(|d| d.to_string()).unwrap_or_default(),
                fmt_opt(r.precision),
                fmt_opt(r.recall),
                fmt_opt(r.auc),
                fmt_opt(r.baseline_auc)
            ));
        }
        t
    }
}

pub fn report(s: &mut Stage<'_>) -> Result<Summary> {
    let started = Instant::now();
    let (_, manifest) = s.load_dataset()?;
    let reports_dir = s.reports_dir();
    let evaluated = s.upstream(&reports_dir, "eval")?;
    let out = s.summary_dir();
    prepare_output(&out, s.overwrite)?;

    let mut rows = Vec::new();
    let mut train_fp = 0;
    let mut threshold = 0.0;
    for entry in &manifest.layers {
        let path = reports_dir.join(format!("layer_{:04}.json", entry.id));
        let r: EvalReport = serde_json::from_slice(&read(&path)?)?;
        threshold = r.threshold;
        match entry.role {
            LayerRole::Train => train_fp += r.confusion.fp,
            LayerRole::Test => rows.push(SummaryRow {
                layer_id: r.layer_id,
                power_deviation: r.power_deviation,
                precision: r.precision,
                recall: r.recall,
                auc: r.auc,
                baseline_auc: r.baseline_auc,
                tp: r.confusion.tp,
                fp: r.confusion.fp,
                fn_: r.confusion.fn_,
            }),
        }
    }
    let summary = Summary {
        seed: s.config.seed,
        threshold,
        rows,
        train_false_positives: train_fp,
    };
    write(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    write(&out.join("summary.md"), summary.table().as_bytes())?;
    s.finish("report", &out, evaluated.outputs.clone(), started)?;
    Ok(summary)
}
