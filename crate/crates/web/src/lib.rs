//! Browser demo: phantom rendering, difference maps against a healthy twin,
//! and a score simulator for AUC versus pseudo-AUC.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

use brainomaly::data::{SetId, SliceImage};
use brainomaly::detection::{difference_map, pseudo_label, slice_score, subject_score, DiffMode, ScoreRow, ScoreTable};
use brainomaly::eval::roc_curve;
use brainomaly::modelselect::{auc, aucp};
use brainomaly::phantom::{generate_subject, PhantomSpec, PhantomSubject};

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn spec(size: usize, slices: usize, delta: f32, radius: f32, noise: f32, seed: u64) -> PhantomSpec {
    PhantomSpec {
        image_size: size,
        slices_per_subject: slices,
        lesion_intensity_delta: delta,
        lesion_radius_frac: radius,
        texture_noise_sigma: noise,
        seed,
        ..PhantomSpec::default()
    }
}

/// Grayscale `[-1, 1]` to opaque RGBA bytes.
fn to_rgba(values: &[f32], lo: f32, hi: f32) -> Vec<u8> {
    let span = (hi - lo).max(1e-12);
    values
        .iter()
        .flat_map(|&v| {
            let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

/// One rendered phantom subject plus its healthy twin (same anatomy and
/// texture, no lesion).
#[wasm_bindgen]
pub struct PhantomPair {
    size: usize,
    subject: PhantomSubject,
    twin: PhantomSubject,
}

#[wasm_bindgen]
impl PhantomPair {
    #[wasm_bindgen(constructor)]
    pub fn new(
        size: usize,
        slices: usize,
        delta: f32,
        radius: f32,
        noise: f32,
        seed: u64,
        subject: usize,
    ) -> Result<PhantomPair, JsValue> {
        let s = spec(size, slices, delta, radius, noise, seed);
        Ok(PhantomPair {
            size,
            subject: generate_subject(&s, subject, true).map_err(js_err)?,
            twin: generate_subject(&s, subject, false).map_err(js_err)?,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn slices(&self) -> usize {
        self.subject.slices.len()
    }

    /// RGBA pixels of slice `k`, lesioned when `diseased`.
    pub fn slice_rgba(&self, k: usize, diseased: bool) -> Vec<u8> {
        let s = if diseased { &self.subject } else { &self.twin };
        s.slices.get(k).map(|p| to_rgba(&p.data, -1.0, 1.0)).unwrap_or_default()
    }

    /// RGBA difference map of slice `k` against the healthy twin, scaled to
    /// `gain`, and the slice score it yields.
    pub fn difference_rgba(&self, k: usize, signed: bool, gain: f32) -> Result<Vec<u8>, JsValue> {
        let d = self.difference(k, signed)?;
        let lo = if signed { -gain } else { 0.0 };
        Ok(to_rgba(&d.pixels.data, lo, gain))
    }

    pub fn slice_score(&self, k: usize, signed: bool) -> Result<f64, JsValue> {
        Ok(slice_score(&self.difference(k, signed)?))
    }

    /// Mean slice score over the whole subject.
    pub fn subject_score(&self, signed: bool) -> Result<f64, JsValue> {
        let scores = (0..self.slices())
            .map(|k| self.slice_score(k, signed))
            .collect::<Result<Vec<_>, _>>()?;
        subject_score(&scores).map_err(js_err)
    }

    pub fn lesion_area_fraction(&self) -> f64 {
        self.subject.lesion_area_fraction()
    }
}

impl PhantomPair {
    fn difference(&self, k: usize, signed: bool) -> Result<brainomaly::detection::DifferenceMap, JsValue> {
        let wrap = |s: &PhantomSubject| -> Result<SliceImage, JsValue> {
            let pixels = s.slices.get(k).cloned().ok_or_else(|| js_err(format!("no slice {k}")))?;
            Ok(SliceImage { pixels, subject_id: s.subject_id.clone(), slice_index: k, source_set: SetId::M })
        };
        let mode = if signed { DiffMode::Signed } else { DiffMode::Absolute };
        difference_map(&wrap(&self.subject)?, &wrap(&self.twin)?, mode).map_err(js_err)
    }
}

/// Simulated anomaly scores: H and the healthy part of M share one normal
/// distribution, diseased M subjects are shifted by `separation`.
#[wasm_bindgen]
pub struct ScoreSimulation {
    true_auc: f64,
    aucp: f64,
    roc: Vec<f64>,
}

#[wasm_bindgen]
impl ScoreSimulation {
    #[wasm_bindgen(constructor)]
    pub fn new(
        n_h: usize,
        m_healthy: usize,
        m_diseased: usize,
        separation: f64,
        seed: u64,
    ) -> Result<ScoreSimulation, JsValue> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).map_err(js_err)?;
        let mut rows = Vec::new();
        let groups = [(SetId::H, n_h, 0u8), (SetId::M, m_healthy, 0), (SetId::M, m_diseased, 1)];
        for (set, n, label) in groups {
            for _ in 0..n {
                let score = normal.sample(&mut rng) + separation * label as f64;
                rows.push(ScoreRow {
                    subject_id: format!("s{:05}", rows.len()),
                    source_set: set,
                    score,
                    pseudo_label: pseudo_label(set),
                    true_label: Some(label),
                });
            }
        }
        let table = ScoreTable::new(rows);
        let scores = table.scores();
        let labels: Vec<u8> = table.rows.iter().map(|r| r.true_label.unwrap_or(0)).collect();
        let roc = roc_curve(&scores, &labels).map_err(js_err)?;
        Ok(ScoreSimulation {
            true_auc: auc(&scores, &labels).map_err(js_err)?,
            aucp: aucp(&table).map_err(js_err)?,
            roc: roc.points.iter().flat_map(|&(x, y)| [x, y]).collect(),
        })
    }

    pub fn true_auc(&self) -> f64 {
        self.true_auc
    }

    pub fn aucp(&self) -> f64 {
        self.aucp
    }

    /// Flattened `(fpr, tpr)` pairs of the true-label ROC curve.
    pub fn roc(&self) -> Vec<f64> {
        self.roc.clone()
    }
}
