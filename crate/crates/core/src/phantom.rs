//! Deterministic synthetic "registered brain" slice stacks with optional
//! lesions.
//!
//! Every subject shares one noise-free template per slice index; subjects
//! differ only by smooth texture noise and, when diseased, a blob that shifts
//! tissue intensity on a contiguous run of slices.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetInfo, NormBounds, SetId, DATASET_INFO_FILE, MANIFEST_FILE};
use crate::error::{ensure, Error, Result};
use crate::io::{write_npy, Plane};
use crate::rng::stream;

/// Direction of the lesion intensity change.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionSign {
    /// Lesions darken tissue (atrophy-like).
    #[default]
    Darken,
    Brighten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub slices_per_subject: usize,
    pub n_healthy: usize,
    pub n_diseased: usize,
    pub lesion_intensity_delta: f32,
    /// Lesion radius as a fraction of the image side.
    pub lesion_radius_frac: f32,
    pub lesion_sign: LesionSign,
    pub texture_noise_sigma: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: 64,
            slices_per_subject: 8,
            n_healthy: 10,
            n_diseased: 10,
            lesion_intensity_delta: 0.3,
            lesion_radius_frac: 0.1,
            lesion_sign: LesionSign::Darken,
            texture_noise_sigma: 0.03,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.image_size >= 8, "image_size must be at least 8, got {}", self.image_size);
        ensure!(self.slices_per_subject > 0, "slices_per_subject must be positive");
        ensure!(
            (0.1..=0.6).contains(&self.lesion_intensity_delta),
            "lesion_intensity_delta must lie in [0.1, 0.6], got {}",
            self.lesion_intensity_delta
        );
        ensure!(
            self.lesion_radius_frac > 0.0 && self.lesion_radius_frac <= 0.25,
            "lesion_radius_frac must lie in (0, 0.25], got {}",
            self.lesion_radius_frac
        );
        ensure!(
            self.texture_noise_sigma >= 0.0 && self.texture_noise_sigma.is_finite(),
            "texture_noise_sigma must be non-negative"
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSubject {
    pub subject_id: String,
    /// Slices in `[-1, 1]`, ordered by slice index.
    pub slices: Vec<Plane>,
    pub diseased: bool,
    /// Per-slice binary lesion masks (1.0 inside); empty when healthy.
    pub lesion_masks: Vec<Plane>,
}

impl PhantomSubject {
    /// Fraction of all pixels, over all slices, covered by the lesion mask.
    pub fn lesion_area_fraction(&self) -> f64 {
        let total: usize = self.slices.iter().map(|s| s.data.len()).sum();
        let inside: f64 = self.lesion_masks.iter().flat_map(|m| &m.data).map(|&v| v as f64).sum();
        inside / total.max(1) as f64
    }
}

const BACKGROUND: f32 = -1.0;
const GRAY_MATTER: f32 = 0.1;
const WHITE_MATTER: f32 = 0.55;
const VENTRICLE: f32 = -0.5;
/// Edge softness in normalized units.
const EDGE: f32 = 0.03;

/// Smooth indicator of the inside of an axis-aligned ellipse.
fn soft_ellipse(u: f32, v: f32, cx: f32, cy: f32, rx: f32, ry: f32) -> f32 {
    let r = (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt();
    0.5 * (1.0 + ((1.0 - r) / EDGE).tanh())
}

/// Through-plane scale of slice `k`: central slices are largest.
fn slice_scale(k: usize, slices: usize) -> f32 {
    let t = (k as f32 + 0.5) / slices as f32 - 0.5;
    0.8 + 0.2 * (1.0 - (1.2 * t).powi(2)).max(0.0).sqrt()
}

fn normalized_coords(size: usize, row: usize, col: usize) -> (f32, f32) {
    let c = (size as f32 - 1.0) / 2.0;
    ((col as f32 - c) / c, (row as f32 - c) / c)
}

/// The shared noise-free anatomy for one slice index, plus its brain mask.
pub fn render_template(spec: &PhantomSpec, slice_index: usize) -> (Plane, Plane) {
    let n = spec.image_size;
    let s = slice_scale(slice_index, spec.slices_per_subject);
    let mut img = Plane::filled(n, n, BACKGROUND);
    let mut mask = Plane::filled(n, n, 0.0);
    for row in 0..n {
        for col in 0..n {
            let (u, v) = normalized_coords(n, row, col);
            let head = soft_ellipse(u, v, 0.0, 0.0, 0.78 * s, 0.88 * s);
            let white = soft_ellipse(u, v, 0.0, 0.05, 0.5 * s, 0.58 * s);
            let vent = soft_ellipse(u, v, -0.13, -0.05, 0.08 * s, 0.2 * s).max(soft_ellipse(u, v, 0.13, -0.05, 0.08 * s, 0.2 * s));
            let mut val = BACKGROUND + (GRAY_MATTER - BACKGROUND) * head;
            val += (WHITE_MATTER - val) * white;
            val += (VENTRICLE - val) * vent;
            img.data[row * n + col] = val;
            mask.data[row * n + col] = if head > 0.5 { 1.0 } else { 0.0 };
        }
    }
    (img, mask)
}

/// Gaussian-blurred white noise with unit marginal standard deviation.
fn smooth_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    const SIGMA: f32 = 1.0;
    let kernel: Vec<f32> = (-3..=3).map(|i: i32| (-(i * i) as f32 / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let white: Vec<f32> = (0..n * n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let blur = |src: &[f32], horizontal: bool| {
        let mut out = vec![0.0f32; n * n];
        for r in 0..n {
            for c in 0..n {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let off = ki as isize - 3;
                    let (rr, cc) = if horizontal { (r as isize, c as isize + off) } else { (r as isize + off, c as isize) };
                    // replicate the border
                    let rr = rr.clamp(0, n as isize - 1) as usize;
                    let cc = cc.clamp(0, n as isize - 1) as usize;
                    acc += kv * src[rr * n + cc];
                }
                out[r * n + c] = acc;
            }
        }
        out
    };
    let blurred = blur(&blur(&white, true), false);
    // Variance of separable blur of unit white noise: (sum k^2)^2.
    let norm: f32 = kernel.iter().map(|k| k * k).sum::<f32>();
    blurred.into_iter().map(|v| v / norm).collect()
}

struct LesionPlacement {
    center: (f32, f32),
    first_slice: usize,
    n_slices: usize,
}

fn place_lesion(spec: &PhantomSpec, subject_index: usize) -> LesionPlacement {
    let mut rng = stream(&[spec.seed, subject_index as u64, 0x1E5]);
    let n_slices = spec.slices_per_subject.div_ceil(2);
    let first_slice = rng.gen_range(0..=spec.slices_per_subject - n_slices);
    let angle = rng.gen_range(0.0..std::f32::consts::TAU);
    let radius = 0.3 * rng.gen::<f32>().sqrt();
    LesionPlacement { center: (radius * angle.cos(), 0.05 + radius * angle.sin()), first_slice, n_slices }
}

/// Renders one subject. Texture noise depends on `(seed, subject_index)`
/// only, so the same index rendered healthy and diseased differs exactly by
/// the lesion.
pub fn generate_subject(spec: &PhantomSpec, subject_index: usize, diseased: bool) -> Result<PhantomSubject> {
    spec.validate()?;
    let n = spec.image_size;
    let lesion = diseased.then(|| place_lesion(spec, subject_index));
    let radius_px = spec.lesion_radius_frac * n as f32;
    let sign = match spec.lesion_sign {
        LesionSign::Darken => -1.0,
        LesionSign::Brighten => 1.0,
    };
    let mut slices = Vec::with_capacity(spec.slices_per_subject);
    let mut masks = Vec::new();
    for k in 0..spec.slices_per_subject {
        let (mut img, brain) = render_template(spec, k);
        let mut rng = stream(&[spec.seed, subject_index as u64, k as u64, 0x7E7]);
        let noise = smooth_noise(n, &mut rng);
        for ((v, &m), &z) in img.data.iter_mut().zip(&brain.data).zip(&noise) {
            *v += m * spec.texture_noise_sigma * z;
        }
        if let Some(l) = &lesion {
            let mut mask = Plane::filled(n, n, 0.0);
            if (l.first_slice..l.first_slice + l.n_slices).contains(&k) {
                let c = (n as f32 - 1.0) / 2.0;
                let (cx, cy) = (c + l.center.0 * c, c + l.center.1 * c);
                for row in 0..n {
                    for col in 0..n {
                        let d = ((col as f32 - cx).powi(2) + (row as f32 - cy).powi(2)).sqrt();
                        let profile = 0.5 * (1.0 - ((d - radius_px) / 1.0).tanh());
                        let i = row * n + col;
                        img.data[i] += sign * spec.lesion_intensity_delta * profile;
                        if d < radius_px {
                            mask.data[i] = 1.0;
                        }
                    }
                }
            }
            masks.push(mask);
        }
        img.data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        slices.push(img);
    }
    Ok(PhantomSubject { subject_id: format!("sub-{subject_index:05}"), slices, diseased, lesion_masks: masks })
}

/// Subject counts per split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub h_size: usize,
    pub m_healthy: usize,
    pub m_diseased: usize,
    pub holdout_healthy: usize,
    pub holdout_diseased: usize,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub split: SetId,
    pub label: u8,
}

/// Writes `<root>/{H,M,holdout}/<subject>/slice_<k>.npy`, the label
/// manifest, and the dataset description. Within M and holdout, diseased
/// subjects are interleaved in a seeded random order so that identifiers do
/// not reveal labels.
pub fn generate_dataset(spec: &PhantomSpec, split: &SplitSizes, root: &Path) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    ensure!(split.m_healthy + split.m_diseased > 0, "the mixed set M must be nonempty");
    let mut plan: Vec<(SetId, bool)> = Vec::new();
    plan.extend(std::iter::repeat_n((SetId::H, false), split.h_size));
    let mut shuffled = |set: SetId, healthy: usize, diseased: usize, salt: u64| {
        let mut flags: Vec<bool> = std::iter::repeat_n(false, healthy).chain(std::iter::repeat_n(true, diseased)).collect();
        flags.shuffle(&mut stream(&[spec.seed, salt]));
        plan.extend(flags.into_iter().map(|d| (set, d)));
    };
    shuffled(SetId::M, split.m_healthy, split.m_diseased, 0x33);
    shuffled(SetId::Holdout, split.holdout_healthy, split.holdout_diseased, 0x44);

    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = Vec::with_capacity(plan.len());
    for (index, &(set, diseased)) in plan.iter().enumerate() {
        let subject = generate_subject(spec, index, diseased)?;
        let dir = root.join(set.dir_name()).join(&subject.subject_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (k, slice) in subject.slices.iter().enumerate() {
            write_npy(&dir.join(format!("slice_{k}.npy")), slice)?;
        }
        manifest.push(ManifestEntry { subject_id: subject.subject_id, split: set, label: diseased as u8 });
    }
    let mut csv = String::from("subject_id,split,label\n");
    for e in &manifest {
        csv.push_str(&format!("{},{},{}\n", e.subject_id, e.split.dir_name(), e.label));
    }
    let manifest_path = root.join(MANIFEST_FILE);
    fs::write(&manifest_path, csv).map_err(|e| Error::io(&manifest_path, e))?;
    let info = DatasetInfo {
        image_size: spec.image_size,
        bounds: NormBounds { min_ref: -1.0, max_ref: 1.0 },
        phantom: Some(spec.clone()),
    };
    info.write(&root.join(DATASET_INFO_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> PhantomSpec {
        PhantomSpec { image_size: 32, slices_per_subject: 4, ..PhantomSpec::default() }
    }

    #[test]
    fn determinism() {
        let a = generate_subject(&spec(), 0, false).unwrap();
        let b = generate_subject(&spec(), 0, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn healthy_has_no_masks_and_values_in_range() {
        let s = generate_subject(&spec(), 3, false).unwrap();
        assert!(s.lesion_masks.is_empty());
        let d = generate_subject(&spec(), 3, true).unwrap();
        assert_eq!(d.lesion_masks.len(), 4);
        assert!(d.lesion_area_fraction() > 0.0);
        for p in s.slices.iter().chain(&d.slices) {
            assert!(p.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn lesion_difference_matches_mask_area() {
        let spec = PhantomSpec { image_size: 64, lesion_intensity_delta: 0.4, ..PhantomSpec::default() };
        let healthy = generate_subject(&spec, 1, false).unwrap();
        let diseased = generate_subject(&spec, 1, true).unwrap();
        let total: usize = healthy.slices.iter().map(|s| s.data.len()).sum();
        let diff: f64 = healthy
            .slices
            .iter()
            .zip(&diseased.slices)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs() as f64))
            .sum::<f64>()
            / total as f64;
        let expected = diseased.lesion_area_fraction() * 0.4;
        assert!((diff - expected).abs() <= 0.1 * expected, "diff {diff} vs expected {expected}");
    }

    #[test]
    fn healthy_subjects_differ_only_by_noise() {
        let spec = spec();
        let a = generate_subject(&spec, 0, false).unwrap();
        let b = generate_subject(&spec, 1, false).unwrap();
        for (x, y) in a.slices.iter().zip(&b.slices) {
            let mad = x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / x.data.len() as f64;
            assert!(mad <= 3.0 * spec.texture_noise_sigma as f64);
        }
    }

    #[test]
    fn template_is_seed_independent() {
        let a = spec();
        let b = PhantomSpec { seed: 77, ..spec() };
        for k in 0..a.slices_per_subject {
            assert_eq!(render_template(&a, k), render_template(&b, k));
        }
        assert_ne!(generate_subject(&a, 0, false).unwrap(), generate_subject(&b, 0, false).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for bad in [
            PhantomSpec { lesion_radius_frac: 0.3, ..spec() },
            PhantomSpec { lesion_radius_frac: 0.0, ..spec() },
            PhantomSpec { slices_per_subject: 0, ..spec() },
            PhantomSpec { image_size: 0, ..spec() },
            PhantomSpec { lesion_intensity_delta: 0.05, ..spec() },
        ] {
            assert!(generate_subject(&bad, 0, true).unwrap_err().is_validation());
        }
    }

    #[test]
    fn brighten_sign_raises_intensity() {
        let spec = PhantomSpec { lesion_sign: LesionSign::Brighten, ..spec() };
        let h = generate_subject(&spec, 2, false).unwrap();
        let d = generate_subject(&spec, 2, true).unwrap();
        let delta: f64 = h.slices.iter().zip(&d.slices).map(|(a, b)| b.mean() - a.mean()).sum();
        assert!(delta > 0.0);
    }
}
