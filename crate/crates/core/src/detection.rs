//! Healthy translation of subjects, difference maps, and slice/subject
//! disease scores.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LoadedSubject, SetId, SliceImage};
use crate::error::{ensure, Error, Result};
use crate::io::{write_npy, write_png_stretched, Plane};
use crate::nets::{compose, Generator, TranslationMode};
use crate::tensor::Tensor;

/// How a difference map is formed from an input and its translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffMode {
    /// `|x − y|`.
    #[default]
    Absolute,
    /// `x − y`; positive and negative changes can cancel in the mean.
    Signed,
}

impl std::str::FromStr for DiffMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(DiffMode::Absolute),
            "signed" => Ok(DiffMode::Signed),
            other => Err(Error::validation(format!("unknown difference mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DifferenceMap {
    pub pixels: Plane,
    pub subject_id: String,
    pub slice_index: usize,
}

/// Translates every slice of a subject, preserving slice order.
pub fn translate_subject(g: &Generator, subject: &LoadedSubject, mode: TranslationMode) -> Result<Vec<SliceImage>> {
    ensure!(!subject.slices.is_empty(), "subject {} has no slices", subject.record.subject_id);
    let (h, w) = (subject.slices[0].pixels.height, subject.slices[0].pixels.width);
    let planes: Vec<&[f32]> = subject.slices.iter().map(|s| s.pixels.data.as_slice()).collect();
    let x = Tensor::stack_planes(&planes, h, w)?;
    let y = compose(mode, &x, &g.forward(&x)?)?;
    subject
        .slices
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(SliceImage {
                pixels: Plane::new(h, w, y.sample(i).to_vec())?,
                subject_id: s.subject_id.clone(),
                slice_index: s.slice_index,
                source_set: s.source_set,
            })
        })
        .collect()
}

pub fn difference_map(x: &SliceImage, y: &SliceImage, mode: DiffMode) -> Result<DifferenceMap> {
    ensure!(
        x.pixels.height == y.pixels.height && x.pixels.width == y.pixels.width,
        "difference of {}x{} and {}x{} slices",
        x.pixels.height,
        x.pixels.width,
        y.pixels.height,
        y.pixels.width
    );
    let data = x
        .pixels
        .data
        .iter()
        .zip(&y.pixels.data)
        .map(|(&a, &b)| match mode {
            DiffMode::Absolute => (a - b).abs(),
            DiffMode::Signed => a - b,
        })
        .collect();
    Ok(DifferenceMap {
        pixels: Plane::new(x.pixels.height, x.pixels.width, data)?,
        subject_id: x.subject_id.clone(),
        slice_index: x.slice_index,
    })
}

/// Mean activation of a difference map.
pub fn slice_score(d: &DifferenceMap) -> f64 {
    d.pixels.mean()
}

/// Mean of a subject's slice scores.
pub fn subject_score(slice_scores: &[f64]) -> Result<f64> {
    ensure!(!slice_scores.is_empty(), "a subject score needs at least one slice score");
    Ok(slice_scores.iter().sum::<f64>() / slice_scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub subject_id: String,
    pub source_set: SetId,
    pub score: f64,
    /// 0 for H, 1 for M and holdout.
    pub pseudo_label: u8,
    pub true_label: Option<u8>,
}

pub fn pseudo_label(set: SetId) -> u8 {
    match set {
        SetId::H => 0,
        SetId::M | SetId::Holdout => 1,
    }
}

/// Per-subject scores, sorted by subject identifier.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

pub const SCORE_HEADER: &str = "subject_id,source_set,score,pseudo_label,true_label";

impl ScoreTable {
    pub fn new(mut rows: Vec<ScoreRow>) -> Self {
        rows.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        ScoreTable { rows }
    }

    pub fn scores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.score).collect()
    }

    /// Rows whose source set is in `sets`.
    pub fn filter(&self, sets: &[SetId]) -> ScoreTable {
        ScoreTable { rows: self.rows.iter().filter(|r| sets.contains(&r.source_set)).cloned().collect() }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{SCORE_HEADER}\n");
        for r in &self.rows {
            let truth = r.true_label.map(|l| l.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", r.subject_id, r.source_set, r.score, r.pseudo_label, truth));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(SCORE_HEADER) {
            return Err(Error::format(path, "unexpected score table header"));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::format(path, format!("malformed score row {}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            rows.push(ScoreRow {
                subject_id: f[0].to_string(),
                source_set: SetId::parse(f[1]).map_err(|_| bad())?,
                score: f[2].parse().map_err(|_| bad())?,
                pseudo_label: f[3].parse().map_err(|_| bad())?,
                true_label: if f[4].is_empty() { None } else { Some(f[4].parse().map_err(|_| bad())?) },
            });
        }
        Ok(ScoreTable::new(rows))
    }
}

/// A scored subject together with its translated slices.
pub struct ScoredSubject {
    pub row: ScoreRow,
    pub healthy: Vec<SliceImage>,
}

pub fn score_subject(
    g: &Generator,
    subject: &LoadedSubject,
    mode: TranslationMode,
    diff: DiffMode,
) -> Result<ScoredSubject> {
    let attribute = |e: Error| Error::Subject { subject: subject.record.subject_id.clone(), source: Box::new(e) };
    let healthy = translate_subject(g, subject, mode).map_err(attribute)?;
    let slice_scores = subject
        .slices
        .iter()
        .zip(&healthy)
        .map(|(x, y)| difference_map(x, y, diff).map(|d| slice_score(&d)))
        .collect::<Result<Vec<_>>>()
        .map_err(attribute)?;
    let score = subject_score(&slice_scores).map_err(attribute)?;
    ensure!(score.is_finite(), "subject {} has a non-finite score", subject.record.subject_id);
    let row = ScoreRow {
        subject_id: subject.record.subject_id.clone(),
        source_set: subject.record.source_set,
        score,
        pseudo_label: pseudo_label(subject.record.source_set),
        true_label: subject.record.true_label,
    };
    Ok(ScoredSubject { row, healthy })
}

#[cfg(feature = "parallel")]
fn map_subjects<T: Send>(
    subjects: &[LoadedSubject],
    f: impl Fn(&LoadedSubject) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    use rayon::prelude::*;
    subjects.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_subjects<T>(subjects: &[LoadedSubject], f: impl Fn(&LoadedSubject) -> Result<T>) -> Result<Vec<T>> {
    subjects.iter().map(f).collect()
}

/// Scores every subject; one row per subject, sorted by identifier.
pub fn score_dataset(
    g: &Generator,
    subjects: &[LoadedSubject],
    mode: TranslationMode,
    diff: DiffMode,
) -> Result<ScoreTable> {
    ensure!(!subjects.is_empty(), "no subjects to score");
    let rows = map_subjects(subjects, |s| score_subject(g, s, mode, diff).map(|r| r.row))?;
    Ok(ScoreTable::new(rows))
}

/// Like [`score_dataset`], also returning the translations of subjects in
/// `keep` (in input order).
pub fn score_dataset_keeping(
    g: &Generator,
    subjects: &[LoadedSubject],
    mode: TranslationMode,
    diff: DiffMode,
    keep: SetId,
) -> Result<(ScoreTable, Vec<SliceImage>)> {
    ensure!(!subjects.is_empty(), "no subjects to score");
    let scored = map_subjects(subjects, |s| {
        let r = score_subject(g, s, mode, diff)?;
        let kept = if s.record.source_set == keep { r.healthy } else { Vec::new() };
        Ok((r.row, kept))
    })?;
    let mut rows = Vec::with_capacity(scored.len());
    let mut translations = Vec::new();
    for (row, kept) in scored {
        rows.push(row);
        translations.extend(kept);
    }
    Ok((ScoreTable::new(rows), translations))
}

/// Writes `<dir>/<subject>/<slice>.png` (min-max stretched) and the raw
/// values as `<slice>.npy`.
pub fn export_difference_maps(
    g: &Generator,
    subject: &LoadedSubject,
    mode: TranslationMode,
    diff: DiffMode,
    dir: &Path,
) -> Result<()> {
    let sub_dir = dir.join(&subject.record.subject_id);
    fs::create_dir_all(&sub_dir).map_err(|e| Error::io(&sub_dir, e))?;
    let healthy = translate_subject(g, subject, mode)?;
    for (x, y) in subject.slices.iter().zip(&healthy) {
        let d = difference_map(x, y, diff)?;
        write_png_stretched(&sub_dir.join(format!("{}.png", d.slice_index)), &d.pixels)?;
        write_npy(&sub_dir.join(format!("{}.npy", d.slice_index)), &d.pixels)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SubjectRecord;
    use crate::nets::GeneratorConfig;

    fn slice(v: &[f32], idx: usize) -> SliceImage {
        SliceImage {
            pixels: Plane::new(1, v.len(), v.to_vec()).unwrap(),
            subject_id: "s".into(),
            slice_index: idx,
            source_set: SetId::M,
        }
    }

    fn zero_gen() -> Generator {
        let mut g = Generator::new(&GeneratorConfig { width_factor: 1.0 / 16.0, residual_blocks: 1, ..Default::default() });
        g.zero_head();
        g
    }

    fn subject(id: &str, set: SetId, value: f32, n: usize) -> LoadedSubject {
        let slices = (0..n)
            .map(|k| SliceImage {
                pixels: Plane::filled(8, 8, value),
                subject_id: id.into(),
                slice_index: k,
                source_set: set,
            })
            .collect();
        LoadedSubject {
            record: SubjectRecord { subject_id: id.into(), source_set: set, slice_paths: Vec::new(), true_label: None },
            slices,
        }
    }

    #[test]
    fn difference_examples() {
        let x = slice(&[0.3, -0.2], 0);
        assert!(difference_map(&x, &x, DiffMode::Absolute).unwrap().pixels.data.iter().all(|&v| v == 0.0));
        let d = difference_map(&slice(&[1.0], 0), &slice(&[-1.0], 0), DiffMode::Absolute).unwrap();
        assert_eq!(d.pixels.data, vec![2.0]);
        let s = difference_map(&slice(&[-1.0], 0), &slice(&[1.0], 0), DiffMode::Signed).unwrap();
        assert_eq!(s.pixels.data, vec![-2.0]);
        assert!(difference_map(&slice(&[1.0], 0), &slice(&[1.0, 2.0], 0), DiffMode::Absolute).unwrap_err().is_validation());
    }

    #[test]
    fn score_examples() {
        let d = difference_map(&slice(&[0.2, 0.0, 0.2, 0.0], 0), &slice(&[0.0; 4], 0), DiffMode::Absolute).unwrap();
        assert!((slice_score(&d) - 0.1).abs() < 1e-7);
        assert!((subject_score(&[0.1, 0.3]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(subject_score(&[0.7]).unwrap(), 0.7);
        assert!(subject_score(&[]).unwrap_err().is_validation());
    }

    #[test]
    fn translation_preserves_order_and_count() {
        let s = subject("a", SetId::M, 0.0, 8);
        let out = translate_subject(&zero_gen(), &s, TranslationMode::Additive).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(out.iter().map(|y| y.slice_index).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
        assert!(out.iter().all(|y| y.pixels.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn table_counts_and_pseudo_labels() {
        let mut subjects = Vec::new();
        for i in 0..10 {
            subjects.push(subject(&format!("h{i:02}"), SetId::H, 0.1, 2));
            subjects.push(subject(&format!("m{i:02}"), SetId::M, 0.5, 2));
        }
        let t = score_dataset(&zero_gen(), &subjects, TranslationMode::Additive, DiffMode::Absolute).unwrap();
        assert_eq!(t.rows.len(), 20);
        assert_eq!(t.rows.iter().filter(|r| r.pseudo_label == 0).count(), 10);
        let bound = 1.0 - 1f64.tanh();
        assert!(t.rows.iter().all(|r| r.score <= bound + 1e-6));
        let again = score_dataset(&zero_gen(), &subjects, TranslationMode::Additive, DiffMode::Absolute).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn csv_round_trip() {
        let t = ScoreTable::new(vec![
            ScoreRow { subject_id: "b".into(), source_set: SetId::M, score: 0.25, pseudo_label: 1, true_label: Some(1) },
            ScoreRow { subject_id: "a".into(), source_set: SetId::H, score: 0.125, pseudo_label: 0, true_label: None },
        ]);
        assert_eq!(t.rows[0].subject_id, "a");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        t.write_csv(&path).unwrap();
        assert_eq!(ScoreTable::read_csv(&path).unwrap(), t);
    }
}
