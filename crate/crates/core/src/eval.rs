//! ROC curves, transductive/inductive evaluation, checkpoint scoring, and the
//! end-to-end pipeline and ablation drivers.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{slices_of, Dataset, LoadedSubject, Manifest, SetId, MANIFEST_FILE};
use crate::detection::{export_difference_maps, score_dataset, score_dataset_keeping, DiffMode, ScoreTable};
use crate::error::{ensure, Error, Result};
use crate::modelselect::{
    aucp, frechet_distance, metric_auc_correlation, select_best, selection_report, CheckpointRecord,
    Criterion, FeatureExtractor, MetricSeries, RandomConvEmbedding,
};
use crate::nets::TranslationMode;
use crate::training::{list_checkpoints, load_generator, train, SavedCheckpoint, TrainOptions, TrainingConfig};

pub const REPORT_FILE: &str = "report.txt";
pub const SELECTION_FILE: &str = "selection.csv";
pub const LOCK_FILE: &str = ".lock";
pub const DIFFMAP_DIR: &str = "diffmaps";

/// ROC points from `(0, 0)` to `(1, 1)` and the trapezoidal area under them.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    /// `fpr tpr` per line.
    pub fn to_dat(&self) -> String {
        self.points.iter().map(|(f, t)| format!("{f} {t}\n")).collect()
    }

    pub fn write_dat(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_dat()).map_err(|e| Error::io(path, e))
    }
}

/// Sweeps thresholds over the distinct scores in descending order; tied
/// scores enter together, giving a diagonal segment. Points in the interior
/// of axis-parallel runs are omitted.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    ensure!(scores.len() == labels.len(), "{} scores but {} labels", scores.len(), labels.len());
    ensure!(scores.iter().all(|s| !s.is_nan()), "scores must not be NaN");
    let p = labels.iter().filter(|&&l| l == 1).count();
    let n = labels.iter().filter(|&&l| l == 0).count();
    ensure!(p + n == labels.len(), "labels must be 0 or 1");
    ensure!(p > 0 && n > 0, "ROC needs both classes (got {p} positive, {n} negative)");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut counts = vec![(0u64, 0u64)];
    // Integer trapezoid sums keep the area exact up to one final division.
    let mut twice_area: u64 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let (prev_tp, prev_fp) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - prev_fp) * (tp + prev_tp);
        counts.push((fp, tp));
    }
    // Drop interior points on horizontal or vertical runs; they do not
    // change the curve.
    let mut points = Vec::with_capacity(counts.len());
    for k in 0..counts.len() {
        let interior = k > 0 && k + 1 < counts.len() && {
            let (a, b, c) = (counts[k - 1], counts[k], counts[k + 1]);
            (a.0 == b.0 && b.0 == c.0) || (a.1 == b.1 && b.1 == c.1)
        };
        if !interior {
            points.push((counts[k].0 as f64 / n as f64, counts[k].1 as f64 / p as f64));
        }
    }
    let auc = twice_area as f64 / (2 * p as u64 * n as u64) as f64;
    Ok(RocCurve { points, auc })
}

fn labels_of(table: &ScoreTable) -> Result<Vec<u8>> {
    table
        .rows
        .iter()
        .map(|r| r.true_label.ok_or_else(|| Error::validation(format!("subject {} has no true label", r.subject_id))))
        .collect()
}

/// AUCs on the training-time sets and on the unseen holdout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    /// AUC over H ∪ M with true labels.
    pub transductive_auc: f64,
    /// AUC over the holdout.
    pub inductive_auc: f64,
    /// `|transductive − inductive|`.
    pub gap: f64,
}

/// `train_table` holds the scored H and M subjects and `holdout_table` the
/// scored holdout; all rows need true labels.
pub fn evaluate_splits(train_table: &ScoreTable, holdout_table: &ScoreTable) -> Result<SplitReport> {
    let t = auc_of(train_table)?;
    let i = auc_of(holdout_table)?;
    Ok(SplitReport { transductive_auc: t, inductive_auc: i, gap: (t - i).abs() })
}

fn auc_of(table: &ScoreTable) -> Result<f64> {
    crate::modelselect::auc(&table.scores(), &labels_of(table)?)
}

/// The three sets of a dataset, loaded and (when a manifest is present)
/// labelled. Training only ever receives `h` and `m` slices.
pub struct EvalData {
    pub h: Vec<LoadedSubject>,
    pub m: Vec<LoadedSubject>,
    pub holdout: Vec<LoadedSubject>,
    pub labelled: bool,
}

impl EvalData {
    pub fn load(dataset: &Dataset) -> Result<Self> {
        let h = dataset.load_set(SetId::H)?;
        let m = dataset.load_set(SetId::M)?;
        let holdout = dataset.load_set(SetId::Holdout)?;
        Ok(EvalData { h, m, holdout, labelled: false })
    }

    /// Attaches ground truth from the manifest. Every subject must be listed.
    pub fn attach_labels(&mut self, manifest: &Manifest) -> Result<()> {
        for s in self.h.iter_mut().chain(self.m.iter_mut()).chain(self.holdout.iter_mut()) {
            let label = manifest
                .label(&s.record.subject_id)
                .ok_or_else(|| Error::validation(format!("manifest has no label for {}", s.record.subject_id)))?;
            s.record.true_label = Some(label);
        }
        self.labelled = true;
        Ok(())
    }

    pub fn h_and_m(&self) -> Vec<LoadedSubject> {
        self.h.iter().chain(&self.m).cloned().collect()
    }
}

/// Which metrics to compute per checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub diff_mode: DiffMode,
    pub compute_fid: bool,
    /// Seed of the random convolutional embedding used for FID.
    pub feature_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { diff_mode: DiffMode::Absolute, compute_fid: true, feature_seed: 0xF1D }
    }
}

fn features_of(extractor: &dyn FeatureExtractor, slices: &[crate::data::SliceImage]) -> Result<Vec<Vec<f64>>> {
    let planes: Vec<_> = slices.iter().map(|s| &s.pixels).collect();
    extractor.features(&planes)
}

/// Scores one checkpoint: AUCp on H ∪ M, FID between translated M and real
/// H, and the holdout AUC when labels are attached.
pub fn evaluate_checkpoint(
    cfg: &TrainingConfig,
    ckpt: &SavedCheckpoint,
    data: &EvalData,
    opts: &EvalOptions,
    h_features: Option<&[Vec<f64>]>,
    extractor: &dyn FeatureExtractor,
) -> Result<CheckpointRecord> {
    let g = load_generator(cfg, ckpt)?;
    let (table, translated_m) =
        score_dataset_keeping(&g, &data.h_and_m(), cfg.translation_mode, opts.diff_mode, SetId::M)?;
    let fid = match h_features {
        Some(hf) => Some(frechet_distance(&features_of(extractor, &translated_m)?, hf)?),
        None => None,
    };
    let true_auc = if data.labelled && !data.holdout.is_empty() {
        Some(crate::modelselect::true_auc(&score_dataset(&g, &data.holdout, cfg.translation_mode, opts.diff_mode)?)?)
    } else {
        None
    };
    Ok(CheckpointRecord { iteration: ckpt.iteration, weights_path: ckpt.generator_path(), aucp: Some(aucp(&table)?), fid, true_auc })
}

/// Evaluates every checkpoint of a run, in iteration order.
pub fn evaluate_checkpoints(
    cfg: &TrainingConfig,
    run_dir: &Path,
    data: &EvalData,
    opts: &EvalOptions,
) -> Result<Vec<CheckpointRecord>> {
    let ckpts = list_checkpoints(run_dir)?;
    ensure!(!ckpts.is_empty(), "run {} has no checkpoints", run_dir.display());
    let extractor = RandomConvEmbedding::new(opts.feature_seed);
    let h_features = if opts.compute_fid { Some(features_of(&extractor, &slices_of(&data.h))?) } else { None };
    let eval = |c: &SavedCheckpoint| evaluate_checkpoint(cfg, c, data, opts, h_features.as_deref(), &extractor);
    #[cfg(feature = "parallel")]
    let records = {
        use rayon::prelude::*;
        ckpts.par_iter().map(eval).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let records = ckpts.iter().map(eval).collect::<Result<Vec<_>>>()?;
    Ok(records)
}

/// A complete experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset root holding `H/`, `M/`, `holdout/` and `dataset.toml`.
    pub dataset: PathBuf,
    /// Manifest with true labels; defaults to `<dataset>/manifest.csv` when
    /// that file exists. Read only after training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Run directory; receives checkpoints, logs and reports.
    pub output: PathBuf,
    /// Central crop side; defaults to the dataset image size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop: Option<usize>,
    pub selection: Criterion,
    pub eval: EvalOptions,
    /// Number of holdout subjects whose difference maps are exported.
    pub diffmap_subjects: usize,
    pub training: TrainingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: PathBuf::from("data"),
            manifest: None,
            output: PathBuf::from("runs/default"),
            crop: None,
            selection: Criterion::Aucp,
            eval: EvalOptions::default(),
            diffmap_subjects: 4,
            training: TrainingConfig::desk(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::validation(format!("invalid experiment config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::validation(format!("cannot serialize config: {e}")))
    }

    pub fn manifest_path(&self) -> Option<PathBuf> {
        self.manifest.clone().or_else(|| {
            let p = self.dataset.join(MANIFEST_FILE);
            p.exists().then_some(p)
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        ensure!(self.dataset.is_dir(), "dataset directory {} does not exist", self.dataset.display());
        if let Some(m) = &self.manifest {
            ensure!(m.is_file(), "manifest {} does not exist", m.display());
        }
        Ok(())
    }
}

/// Exclusive ownership of a run directory for the lifetime of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::validation(format!(
                "run directory {} is locked by another process (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Contents of `report.txt` (TOML).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub criterion: Option<Criterion>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected_iteration: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected_aucp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected_fid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub splits: Option<SplitReport>,
    /// `|r|` between AUCp and holdout AUC across checkpoints.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aucp_correlation: Option<f64>,
    /// `|r|` between FID and holdout AUC across checkpoints.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid_correlation: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default)]
    pub checkpoints: Vec<CheckpointRecord>,
}

impl PipelineReport {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn is_complete(&self) -> bool {
        self.status == "ok"
    }
}

/// Where a pipeline run stopped.
struct StageError {
    stage: &'static str,
    error: Error,
}

fn stage<T>(name: &'static str, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|error| StageError { stage: name, error })
}

/// Trains, evaluates every checkpoint, selects the inference model, scores
/// all splits with it, and writes reports, ROC files, score tables and
/// difference maps into the output directory. On failure the report records
/// the failing stage and everything written so far is kept.
pub fn run_pipeline(cfg: &ExperimentConfig, opts: TrainOptions<'_>) -> Result<PipelineReport> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&cfg.output)?;
    let report_path = cfg.output.join(REPORT_FILE);
    match pipeline_stages(cfg, opts) {
        Ok(report) => {
            report.write(&report_path)?;
            Ok(report)
        }
        Err(StageError { stage, error }) => {
            let failed = PipelineReport {
                status: "failed".into(),
                failed_stage: Some(stage.into()),
                error: Some(error.to_string()),
                ..PipelineReport::default()
            };
            failed.write(&report_path)?;
            Err(error)
        }
    }
}

fn pipeline_stages(cfg: &ExperimentConfig, opts: TrainOptions<'_>) -> std::result::Result<PipelineReport, StageError> {
    let dataset = stage("load", Dataset::open(&cfg.dataset, cfg.crop))?;
    let mut data = stage("load", EvalData::load(&dataset))?;
    let halted = opts.halt_at.is_some();
    let outcome = stage("train", train(&cfg.training, slices_of(&data.h), slices_of(&data.m), &cfg.output, opts))?;
    if halted && !outcome.completed {
        return Ok(PipelineReport { status: "halted".into(), ..PipelineReport::default() });
    }
    if let Some(path) = cfg.manifest_path() {
        stage("labels", Manifest::read(&path).and_then(|m| data.attach_labels(&m)))?;
    }
    let records = stage("evaluate", evaluate_checkpoints(&cfg.training, &cfg.output, &data, &cfg.eval))?;
    let selection_path = cfg.output.join(SELECTION_FILE);
    stage("evaluate", fs::write(&selection_path, selection_report(&records)).map_err(|e| Error::io(&selection_path, e)))?;
    let best = stage("select", select_best(&records, cfg.selection))?;
    let chosen = &records[best];
    let ckpts = stage("select", list_checkpoints(&cfg.output))?;
    let ckpt = ckpts.iter().find(|c| c.iteration == chosen.iteration).expect("evaluated checkpoint exists");
    let g = stage("score", load_generator(&cfg.training, ckpt))?;
    let mode = cfg.training.translation_mode;
    let mixed = stage("score", score_dataset(&g, &data.h_and_m(), mode, cfg.eval.diff_mode))?;
    stage("score", mixed.write_csv(&cfg.output.join("scores_mixed.csv")))?;
    let holdout = if data.holdout.is_empty() {
        None
    } else {
        let t = stage("score", score_dataset(&g, &data.holdout, mode, cfg.eval.diff_mode))?;
        stage("score", t.write_csv(&cfg.output.join("scores_holdout.csv")))?;
        Some(t)
    };

    let mut report = PipelineReport {
        status: "ok".into(),
        criterion: Some(cfg.selection),
        selected_iteration: Some(chosen.iteration),
        selected_aucp: chosen.aucp,
        selected_fid: chosen.fid,
        ..PipelineReport::default()
    };
    if data.labelled {
        for (name, table) in [("mixed", Some(&mixed)), ("holdout", holdout.as_ref())] {
            if let Some(t) = table {
                let labels = stage("report", labels_of(t))?;
                let roc = stage("report", roc_curve(&t.scores(), &labels))?;
                stage("report", roc.write_dat(&cfg.output.join(format!("roc_{name}.dat"))))?;
            }
        }
        if let Some(h) = &holdout {
            report.splits = Some(stage("report", evaluate_splits(&mixed, h))?);
        }
        for (criterion, slot) in [(Criterion::Aucp, &mut report.aucp_correlation), (Criterion::Fid, &mut report.fid_correlation)] {
            match MetricSeries::from_records(&records, criterion).and_then(|s| metric_auc_correlation(&s)) {
                Ok(r) => *slot = Some(r),
                Err(e) => report.notes.push(format!("{criterion} correlation unavailable: {e}")),
            }
        }
    }
    let diff_dir = cfg.output.join(DIFFMAP_DIR);
    let exported = data.holdout.iter().chain(&data.m).take(cfg.diffmap_subjects);
    for s in exported {
        stage("diffmaps", export_difference_maps(&g, s, mode, cfg.eval.diff_mode, &diff_dir))?;
    }
    report.checkpoints = records;
    Ok(report)
}

/// Re-scores one checkpoint on a dataset (no training).
pub fn score_checkpoint(
    cfg: &TrainingConfig,
    ckpt: &SavedCheckpoint,
    subjects: &[LoadedSubject],
    diff: DiffMode,
) -> Result<ScoreTable> {
    let g = load_generator(cfg, ckpt)?;
    score_dataset(&g, subjects, cfg.translation_mode, diff)
}

/// One arm of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_id: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub translation_mode: Option<TranslationMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<Criterion>,
}

impl Variant {
    pub fn baseline() -> Self {
        Variant { name: "baseline".into(), lambda_id: None, translation_mode: None, selection: None }
    }

    /// The identity-loss sweep arm (`λ_id = 0`).
    pub fn no_identity() -> Self {
        Variant { name: "lambda_id_0".into(), lambda_id: Some(0.0), ..Variant::baseline() }
    }

    /// The direct-image arm.
    pub fn direct() -> Self {
        Variant { name: "direct".into(), translation_mode: Some(TranslationMode::Direct), ..Variant::baseline() }
    }

    pub fn apply(&self, base: &ExperimentConfig, seed: u64, root: &Path) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.training.seed = seed;
        if let Some(l) = self.lambda_id {
            cfg.training.lambda_id = l;
        }
        if let Some(m) = self.translation_mode {
            cfg.training.translation_mode = m;
        }
        if let Some(c) = self.selection {
            cfg.selection = c;
        }
        cfg.output = root.join(&self.name).join(format!("seed_{seed}"));
        cfg
    }
}

/// One finished (variant, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub report: PipelineReport,
}

/// Results of an ablation sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl AblationReport {
    pub fn runs_of<'a>(&'a self, variant: &'a str) -> impl Iterator<Item = &'a AblationRun> + 'a {
        self.runs.iter().filter(move |r| r.variant == variant)
    }

    /// Median over seeds of a per-run statistic; `None` if any run lacks it.
    pub fn median_of(&self, variant: &str, stat: impl Fn(&PipelineReport) -> Option<f64>) -> Option<f64> {
        let values: Option<Vec<f64>> = self.runs_of(variant).map(|r| stat(&r.report)).collect();
        values.and_then(|v| median(&v))
    }

    pub fn median_inductive_auc(&self, variant: &str) -> Option<f64> {
        self.median_of(variant, |r| r.splits.as_ref().map(|s| s.inductive_auc))
    }

    /// `variant,seed,selected_iteration,aucp,transductive_auc,inductive_auc`
    /// rows, then `median,<variant>,<inductive_auc>` lines.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("variant,seed,selected_iteration,aucp,transductive_auc,inductive_auc\n");
        let mut names: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !names.contains(&r.variant.as_str()) {
                names.push(&r.variant);
            }
            let s = r.report.splits.as_ref();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.variant,
                r.seed,
                r.report.selected_iteration.map(|i| i.to_string()).unwrap_or_default(),
                opt(r.report.selected_aucp),
                opt(s.map(|s| s.transductive_auc)),
                opt(s.map(|s| s.inductive_auc))
            ));
        }
        for n in names {
            out.push_str(&format!("median,{n},{}\n", opt(self.median_inductive_auc(n))));
        }
        out
    }
}

/// Runs every variant for every seed under `root/<variant>/seed_<s>/`.
/// Runs whose directory already holds a complete report are reused, and
/// interrupted runs resume from their latest checkpoint.
pub fn ablate(
    base: &ExperimentConfig,
    variants: &[Variant],
    seeds: &[u64],
    root: &Path,
    mut progress: impl FnMut(&str, u64),
) -> Result<AblationReport> {
    ensure!(!variants.is_empty() && !seeds.is_empty(), "an ablation needs at least one variant and one seed");
    let mut runs = Vec::new();
    for v in variants {
        for &seed in seeds {
            let cfg = v.apply(base, seed, root);
            let existing = PipelineReport::read(&cfg.output.join(REPORT_FILE)).ok().filter(|r| r.is_complete());
            let report = match existing {
                Some(r) => r,
                None => {
                    progress(&v.name, seed);
                    run_pipeline(&cfg, TrainOptions::default())?
                }
            };
            runs.push(AblationRun { variant: v.name.clone(), seed, report });
        }
    }
    let report = AblationReport { runs };
    let path = root.join("ablation.csv");
    fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::ScoreRow;

    fn table(rows: &[(f64, u8)], set: SetId) -> ScoreTable {
        ScoreTable::new(
            rows.iter()
                .enumerate()
                .map(|(i, &(score, l))| ScoreRow {
                    subject_id: format!("{set}{i:03}"),
                    source_set: set,
                    score,
                    pseudo_label: crate::detection::pseudo_label(set),
                    true_label: Some(l),
                })
                .collect(),
        )
    }

    #[test]
    fn separated_roc_has_three_points() {
        let roc = roc_curve(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(roc.points, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        assert_eq!(roc.auc, 1.0);
    }

    #[test]
    fn uninformative_scores_hug_the_diagonal() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let scores: Vec<f64> = (0..2000).map(|_| rng.gen()).collect();
        let labels: Vec<u8> = (0..2000).map(|_| rng.gen_range(0..2)).collect();
        assert!((roc_curve(&scores, &labels).unwrap().auc - 0.5).abs() < 0.1);
    }

    #[test]
    fn tied_scores_give_diagonal() {
        let roc = roc_curve(&[0.5, 0.5], &[1, 0]).unwrap();
        assert_eq!(roc.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(roc.auc, 0.5);
        assert!(roc_curve(&[0.5], &[1]).unwrap_err().is_validation());
    }

    #[test]
    fn dat_format() {
        let roc = roc_curve(&[0.9, 0.1], &[1, 0]).unwrap();
        assert_eq!(roc.to_dat(), "0 0\n0 1\n1 1\n");
    }

    #[test]
    fn split_examples() {
        let m = table(&[(0.1, 0), (0.9, 1), (0.3, 0), (0.7, 1)], SetId::M);
        let same = ScoreTable::new(m.rows.iter().map(|r| ScoreRow { source_set: SetId::Holdout, ..r.clone() }).collect());
        let r = evaluate_splits(&m, &same).unwrap();
        assert_eq!(r.gap, 0.0);
        assert_eq!(r.transductive_auc, 1.0);
        let unlabelled = ScoreTable::new(vec![ScoreRow { true_label: None, ..m.rows[0].clone() }]);
        assert!(evaluate_splits(&unlabelled, &m).unwrap_err().is_validation());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[0.3, 0.1, 0.2]), Some(0.2));
        assert_eq!(median(&[0.4, 0.1, 0.2, 0.3]), Some(0.25));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).unwrap_err().is_validation());
        drop(lock);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn experiment_config_round_trips() {
        let cfg = ExperimentConfig { crop: Some(48), ..ExperimentConfig::default() };
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert!(ExperimentConfig::from_toml("bogus = 1").unwrap_err().is_validation());
    }

    #[test]
    fn report_round_trips() {
        let r = PipelineReport {
            status: "ok".into(),
            criterion: Some(Criterion::Aucp),
            selected_iteration: Some(500),
            splits: Some(SplitReport { transductive_auc: 0.9, inductive_auc: 0.85, gap: 0.05 }),
            checkpoints: vec![CheckpointRecord {
                iteration: 500,
                weights_path: "w".into(),
                aucp: Some(0.7),
                fid: None,
                true_auc: Some(0.85),
            }],
            ..PipelineReport::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.txt");
        r.write(&p).unwrap();
        assert_eq!(PipelineReport::read(&p).unwrap(), r);
    }
}
