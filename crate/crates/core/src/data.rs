//! Dataset layout, preprocessing (central crop, fixed-bounds normalization)
//! and seeded epoch-shuffled batch sampling from the H and M sets.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::io::{read_slice, Plane};
use crate::phantom::PhantomSpec;
use crate::rng::stream;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const DATASET_INFO_FILE: &str = "dataset.toml";

/// Which image set a subject or slice belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SetId {
    /// Known-healthy images.
    H,
    /// The unannotated mixed set.
    M,
    /// Unseen subjects scored for inductive evaluation.
    Holdout,
}

impl SetId {
    pub fn dir_name(self) -> &'static str {
        match self {
            SetId::H => "H",
            SetId::M => "M",
            SetId::Holdout => "holdout",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "H" => Ok(SetId::H),
            "M" => Ok(SetId::M),
            "holdout" => Ok(SetId::Holdout),
            other => Err(Error::validation(format!("unknown set '{other}'"))),
        }
    }
}

impl std::fmt::Display for SetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Reference intensities mapped onto `-1` and `+1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBounds {
    pub min_ref: f32,
    pub max_ref: f32,
}

/// Contents of `dataset.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub image_size: usize,
    pub bounds: NormBounds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomSpec>,
}

impl DatasetInfo {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Returns the centred `target`×`target` window. With an odd margin the
/// extra row or column is dropped from the high-index side.
pub fn center_crop(image: &Plane, target: usize) -> Result<Plane> {
    ensure!(target > 0, "crop size must be positive");
    ensure!(
        target <= image.height && target <= image.width,
        "crop {target} exceeds image {}x{}",
        image.height,
        image.width
    );
    let top = (image.height - target) / 2;
    let left = (image.width - target) / 2;
    let mut data = Vec::with_capacity(target * target);
    for row in top..top + target {
        data.extend_from_slice(&image.data[row * image.width + left..row * image.width + left + target]);
    }
    Plane::new(target, target, data)
}

/// Maps `[min_ref, max_ref]` linearly onto `[-1, 1]`, clamping outside values.
pub fn normalize(image: &Plane, bounds: NormBounds) -> Result<Plane> {
    let NormBounds { min_ref, max_ref } = bounds;
    ensure!(min_ref.is_finite() && max_ref.is_finite(), "normalization bounds must be finite");
    ensure!(max_ref > min_ref, "degenerate normalization bounds [{min_ref}, {max_ref}]");
    ensure!(image.data.iter().all(|v| v.is_finite()), "image contains non-finite values");
    let span = (max_ref - min_ref) as f64;
    let data = image
        .data
        .iter()
        .map(|&v| ((2.0 * (v as f64 - min_ref as f64) / span - 1.0) as f32).clamp(-1.0, 1.0))
        .collect();
    Plane::new(image.height, image.width, data)
}

/// A preprocessed slice with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceImage {
    pub pixels: Plane,
    pub subject_id: String,
    pub slice_index: usize,
    pub source_set: SetId,
}

/// A subject on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub source_set: SetId,
    /// Slice files ordered by slice index.
    pub slice_paths: Vec<PathBuf>,
    /// Ground truth, present only when a manifest was attached.
    pub true_label: Option<u8>,
}

/// A subject with its slices loaded and preprocessed.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSubject {
    pub record: SubjectRecord,
    pub slices: Vec<SliceImage>,
}

fn slice_number(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    stem.strip_prefix("slice_")?.parse().ok()
}

/// A dataset root following `<root>/{H,M,holdout}/<subject>/slice_<k>.<ext>`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub info: DatasetInfo,
    /// Side length after cropping.
    pub crop: usize,
}

impl Dataset {
    /// Opens a dataset root; `crop` defaults to the recorded image size.
    pub fn open(root: &Path, crop: Option<usize>) -> Result<Self> {
        let info = DatasetInfo::read(&root.join(DATASET_INFO_FILE))?;
        let crop = crop.unwrap_or(info.image_size);
        ensure!(crop > 0 && crop <= info.image_size, "crop {crop} exceeds image size {}", info.image_size);
        Ok(Dataset { root: root.to_path_buf(), info, crop })
    }

    /// Lists the subjects of one set, sorted by identifier. A missing set
    /// directory yields an empty list.
    pub fn subjects(&self, set: SetId) -> Result<Vec<SubjectRecord>> {
        let dir = self.root.join(set.dir_name());
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if !entry.path().is_dir() {
                continue;
            }
            let subject_id = entry.file_name().to_string_lossy().into_owned();
            let mut slices: Vec<(usize, PathBuf)> = fs::read_dir(entry.path())
                .map_err(|e| Error::io(entry.path(), e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter_map(|p| slice_number(&p).map(|k| (k, p)))
                .collect();
            slices.sort();
            ensure!(!slices.is_empty(), "subject {subject_id} in {} has no slices", set);
            out.push(SubjectRecord {
                subject_id,
                source_set: set,
                slice_paths: slices.into_iter().map(|(_, p)| p).collect(),
                true_label: None,
            });
        }
        out.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        Ok(out)
    }

    pub fn load_subject(&self, record: &SubjectRecord) -> Result<LoadedSubject> {
        let slices = record
            .slice_paths
            .iter()
            .enumerate()
            .map(|(k, path)| {
                let raw = read_slice(path)?;
                let pixels = normalize(&center_crop(&raw, self.crop)?, self.info.bounds)?;
                Ok(SliceImage { pixels, subject_id: record.subject_id.clone(), slice_index: k, source_set: record.source_set })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Subject { subject: record.subject_id.clone(), source: Box::new(e) })?;
        Ok(LoadedSubject { record: record.clone(), slices })
    }

    pub fn load_set(&self, set: SetId) -> Result<Vec<LoadedSubject>> {
        self.subjects(set)?.iter().map(|r| self.load_subject(r)).collect()
    }
}

/// True labels keyed by subject identifier. Read only by evaluation code.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub labels: HashMap<String, (SetId, u8)>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format(path, "empty manifest"))?;
        if header.trim() != "subject_id,split,label" {
            return Err(Error::format(path, format!("unexpected manifest header '{header}'")));
        }
        let mut labels = HashMap::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.trim().split(',').collect();
            let bad = || Error::format(path, format!("malformed manifest line {}", i + 2));
            if fields.len() != 3 {
                return Err(bad());
            }
            let set = SetId::parse(fields[1]).map_err(|_| bad())?;
            let label: u8 = fields[2].parse().map_err(|_| bad())?;
            if label > 1 {
                return Err(bad());
            }
            labels.insert(fields[0].to_string(), (set, label));
        }
        Ok(Manifest { labels })
    }

    pub fn label(&self, subject_id: &str) -> Option<u8> {
        self.labels.get(subject_id).map(|&(_, l)| l)
    }

    /// Copies labels onto loaded subjects.
    pub fn attach(&self, subjects: &mut [LoadedSubject]) {
        for s in subjects {
            s.record.true_label = self.label(&s.record.subject_id);
        }
    }
}

/// A batch of slices with provenance.
#[derive(Clone, Debug)]
pub struct SliceBatch {
    /// `[batch, 1, h, w]`.
    pub images: Tensor,
    pub source_set: SetId,
    /// `(subject_id, slice_index)` per batch item.
    pub provenance: Vec<(String, usize)>,
}

/// Position of a sampler within its shuffled epochs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub epoch: u64,
    pub cursor: usize,
}

#[derive(Clone, Debug)]
struct SetSampler {
    slices: Vec<SliceImage>,
    order: Vec<usize>,
    state: SamplerState,
    salt: u64,
}

impl SetSampler {
    fn new(slices: Vec<SliceImage>, seed: u64, salt: u64, state: SamplerState) -> Self {
        let mut s = SetSampler { slices, order: Vec::new(), state, salt };
        s.shuffle(seed);
        s
    }

    fn shuffle(&mut self, seed: u64) {
        self.order = (0..self.slices.len()).collect();
        self.order.shuffle(&mut stream(&[seed, self.salt, self.state.epoch]));
    }

    fn draw(&mut self, seed: u64) -> usize {
        if self.state.cursor == self.order.len() {
            self.state.epoch += 1;
            self.state.cursor = 0;
            self.shuffle(seed);
        }
        let i = self.order[self.state.cursor];
        self.state.cursor += 1;
        i
    }
}

/// Serves shuffled batches from H and M. Sampling is without replacement
/// within an epoch; an exhausted set is reshuffled and sampling continues.
/// The two sets are held separately, so a request for one never yields a
/// slice of the other.
#[derive(Clone, Debug)]
pub struct DataPipe {
    seed: u64,
    h: SetSampler,
    m: SetSampler,
}

impl DataPipe {
    pub fn new(h: Vec<SliceImage>, m: Vec<SliceImage>, seed: u64) -> Result<Self> {
        Self::with_state(h, m, seed, SamplerState::default(), SamplerState::default())
    }

    /// Builds a pipe positioned at previously saved sampler states.
    pub fn with_state(
        h: Vec<SliceImage>,
        m: Vec<SliceImage>,
        seed: u64,
        h_state: SamplerState,
        m_state: SamplerState,
    ) -> Result<Self> {
        ensure!(!h.is_empty(), "the healthy set H is empty");
        ensure!(!m.is_empty(), "the mixed set M is empty");
        let side = h[0].pixels.height;
        for s in h.iter().chain(&m) {
            ensure!(
                s.pixels.height == side && s.pixels.width == side,
                "slice {}#{} is {}x{}, expected {side}x{side}",
                s.subject_id,
                s.slice_index,
                s.pixels.height,
                s.pixels.width
            );
        }
        ensure!(h.iter().all(|s| s.source_set == SetId::H), "H slices must come from set H");
        ensure!(m.iter().all(|s| s.source_set == SetId::M), "M slices must come from set M");
        ensure!(h_state.cursor <= h.len() && m_state.cursor <= m.len(), "sampler state out of range");
        Ok(DataPipe { seed, h: SetSampler::new(h, seed, 0x48, h_state), m: SetSampler::new(m, seed, 0x4D, m_state) })
    }

    pub fn states(&self) -> (SamplerState, SamplerState) {
        (self.h.state, self.m.state)
    }

    pub fn image_side(&self) -> usize {
        self.h.slices[0].pixels.height
    }

    pub fn next_batch(&mut self, set: SetId, batch_size: usize) -> Result<SliceBatch> {
        ensure!(batch_size > 0, "batch size must be positive");
        let sampler = match set {
            SetId::H => &mut self.h,
            SetId::M => &mut self.m,
            SetId::Holdout => return Err(Error::validation("training never samples the holdout set")),
        };
        let side = sampler.slices[0].pixels.height;
        let mut data = Vec::with_capacity(batch_size * side * side);
        let mut provenance = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let idx = sampler.draw(self.seed);
            let s = &sampler.slices[idx];
            data.extend_from_slice(&s.pixels.data);
            provenance.push((s.subject_id.clone(), s.slice_index));
        }
        Ok(SliceBatch { images: Tensor::from_vec([batch_size, 1, side, side], data)?, source_set: set, provenance })
    }
}

/// Flattens loaded subjects into their slices.
pub fn slices_of(subjects: &[LoadedSubject]) -> Vec<SliceImage> {
    subjects.iter().flat_map(|s| s.slices.iter().cloned()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn plane(h: usize, w: usize) -> Plane {
        Plane::new(h, w, (0..h * w).map(|i| i as f32).collect()).unwrap()
    }

    fn slices(set: SetId, n: usize) -> Vec<SliceImage> {
        (0..n)
            .map(|i| SliceImage {
                pixels: Plane::filled(4, 4, i as f32 / n as f32),
                subject_id: format!("{set}-{i}"),
                slice_index: 0,
                source_set: set,
            })
            .collect()
    }

    #[test]
    fn crop_is_centered() {
        let img = plane(256, 256);
        let c = center_crop(&img, 192).unwrap();
        assert_eq!(c.get(0, 0), img.get(32, 32));
        assert_eq!(c.get(191, 191), img.get(223, 223));
    }

    #[test]
    fn odd_margin_drops_high_side() {
        let img = plane(193, 193);
        let c = center_crop(&img, 192).unwrap();
        assert_eq!(c.get(0, 0), img.get(0, 0));
        assert_eq!(c.get(191, 191), img.get(191, 191));
    }

    #[test]
    fn crop_identity_and_errors() {
        let img = plane(8, 8);
        assert_eq!(center_crop(&img, 8).unwrap(), img);
        assert!(center_crop(&img, 9).unwrap_err().is_validation());
    }

    #[test]
    fn normalize_examples() {
        let b = NormBounds { min_ref: 0.0, max_ref: 1.0 };
        let img = Plane::new(1, 3, vec![1.0, 0.5, 0.25]).unwrap();
        let n = normalize(&img, b).unwrap();
        assert_eq!(n.data, vec![1.0, 0.0, -0.5]);
        assert!(normalize(&img, NormBounds { min_ref: 1.0, max_ref: 1.0 }).unwrap_err().is_validation());
        let wild = Plane::new(1, 2, vec![-3.0, 7.0]).unwrap();
        assert_eq!(normalize(&wild, b).unwrap().data, vec![-1.0, 1.0]);
    }

    #[test]
    fn normalize_is_idempotent_on_unit_bounds() {
        let b = NormBounds { min_ref: -1.0, max_ref: 1.0 };
        let img = Plane::new(1, 4, vec![-0.7, 0.0, 0.3, 0.9]).unwrap();
        let once = normalize(&img, b).unwrap();
        assert_eq!(normalize(&once, b).unwrap(), once);
    }

    #[test]
    fn epoch_sampling_without_replacement() {
        let mut pipe = DataPipe::new(slices(SetId::H, 1000), slices(SetId::M, 3), 7).unwrap();
        let batch = pipe.next_batch(SetId::H, 16).unwrap();
        let ids: HashSet<_> = batch.provenance.iter().collect();
        assert_eq!(ids.len(), 16);
    }

    #[test]
    fn reshuffle_bounds_repeats() {
        let mut pipe = DataPipe::new(slices(SetId::H, 3), slices(SetId::M, 10), 7).unwrap();
        let batch = pipe.next_batch(SetId::M, 16).unwrap();
        let mut counts = HashMap::new();
        for p in &batch.provenance {
            *counts.entry(p.clone()).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 10);
        assert!(counts.values().all(|&c| (1..=2).contains(&c)));
        assert_eq!(batch.source_set, SetId::M);
    }

    #[test]
    fn equal_seeds_give_equal_sequences() {
        let mk = || DataPipe::new(slices(SetId::H, 20), slices(SetId::M, 20), 3).unwrap();
        let (mut a, mut b) = (mk(), mk());
        for _ in 0..5 {
            assert_eq!(a.next_batch(SetId::M, 6).unwrap().provenance, b.next_batch(SetId::M, 6).unwrap().provenance);
        }
    }

    #[test]
    fn resumed_state_continues_sequence() {
        let mut a = DataPipe::new(slices(SetId::H, 7), slices(SetId::M, 5), 3).unwrap();
        for _ in 0..3 {
            a.next_batch(SetId::H, 4).unwrap();
        }
        let (hs, ms) = a.states();
        let mut b = DataPipe::with_state(slices(SetId::H, 7), slices(SetId::M, 5), 3, hs, ms).unwrap();
        assert_eq!(a.next_batch(SetId::H, 4).unwrap().provenance, b.next_batch(SetId::H, 4).unwrap().provenance);
    }

    #[test]
    fn sets_stay_isolated() {
        let mut pipe = DataPipe::new(slices(SetId::H, 5), slices(SetId::M, 5), 1).unwrap();
        for _ in 0..4 {
            assert!(pipe.next_batch(SetId::H, 3).unwrap().provenance.iter().all(|(id, _)| id.starts_with("H-")));
            assert!(pipe.next_batch(SetId::M, 3).unwrap().provenance.iter().all(|(id, _)| id.starts_with("M-")));
        }
        assert!(pipe.next_batch(SetId::Holdout, 1).unwrap_err().is_validation());
    }

    #[test]
    fn empty_sets_are_rejected() {
        assert!(DataPipe::new(Vec::new(), slices(SetId::M, 2), 0).unwrap_err().is_validation());
        assert!(DataPipe::new(slices(SetId::H, 2), Vec::new(), 0).unwrap_err().is_validation());
    }
}
