//! Adversarial training of the generator against the patch critic.
//!
//! The critic minimises `mean D(fake) − mean D(real) + λ_gp·GP` with real
//! images from H and fakes translated from M. The generator minimises
//! `−mean D(fake) + λ_id·mean|G_H(x_H) − x_H|`, where `G_H` is the healthy
//! translation. One iteration is one critic update; the generator is updated
//! on every `d_steps_per_g_step`-th iteration.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataPipe, SamplerState, SetId, SliceImage};
use crate::error::{ensure, Error, Result};
use crate::io::{collect_params, load_params, read_tensors, write_tensors, NamedTensor};
use crate::nets::{compose, CriticConfig, Generator, GeneratorConfig, Parameterized, PatchCritic, TranslationMode};
use crate::rng::{mix_seed, stream};
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const GENERATOR_FILE: &str = "generator.tensors";
pub const CRITIC_FILE: &str = "discriminator.tensors";
pub const OPTIMIZER_FILE: &str = "optimizer.tensors";
pub const STATE_FILE: &str = "state.json";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.txt";

const TAG_GENERATOR_INIT: u64 = 0x47;
const TAG_CRITIC_INIT: u64 = 0x44;
const TAG_DATA: u64 = 0x5D;
const TAG_EPSILON: u64 = 0xE5;

/// Hyperparameters of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lambda_id: f64,
    pub lambda_gp: f64,
    pub batch_size: usize,
    pub total_iterations: usize,
    pub checkpoint_interval: usize,
    pub d_steps_per_g_step: usize,
    pub learning_rate: f64,
    /// First iteration of the linear decay; `None` means the last quarter.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_start_iteration: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub translation_mode: TranslationMode,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda_id: 1.0,
            lambda_gp: 10.0,
            batch_size: 16,
            total_iterations: 400_000,
            checkpoint_interval: 10_000,
            d_steps_per_g_step: 2,
            learning_rate: 1e-4,
            decay_start_iteration: None,
            beta1: 0.5,
            beta2: 0.999,
            translation_mode: TranslationMode::Additive,
            seed: 0,
            generator: GeneratorConfig::default(),
            critic: CriticConfig::default(),
        }
    }
}

impl TrainingConfig {
    /// Settings sized for 64×64 phantoms on a CPU: 5,000 iterations,
    /// checkpoints every 500, and networks at 1/16 of the full width.
    pub fn desk() -> Self {
        TrainingConfig {
            total_iterations: 5_000,
            checkpoint_interval: 500,
            generator: GeneratorConfig { width_factor: 1.0 / 16.0, ..GeneratorConfig::default() },
            critic: CriticConfig { width_factor: 1.0 / 16.0, ..CriticConfig::default() },
            ..TrainingConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size > 0, "batch_size must be positive");
        ensure!(self.total_iterations > 0, "total_iterations must be positive");
        ensure!(self.checkpoint_interval > 0, "checkpoint_interval must be positive");
        ensure!(self.d_steps_per_g_step >= 1, "d_steps_per_g_step must be at least 1");
        ensure!(self.lambda_id >= 0.0 && self.lambda_id.is_finite(), "lambda_id must be finite and nonnegative");
        ensure!(self.lambda_gp >= 0.0 && self.lambda_gp.is_finite(), "lambda_gp must be finite and nonnegative");
        ensure!(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate must be positive");
        ensure!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "Adam betas must lie in [0, 1)");
        ensure!(
            self.decay_start() <= self.total_iterations,
            "decay_start_iteration {} exceeds total_iterations {}",
            self.decay_start(),
            self.total_iterations
        );
        ensure!(self.generator.width_factor > 0.0 && self.critic.width_factor > 0.0, "width factors must be positive");
        ensure!(self.critic.downsamplings >= 1, "the critic needs at least one stride-2 stage");
        Ok(())
    }

    pub fn decay_start(&self) -> usize {
        self.decay_start_iteration.unwrap_or(self.total_iterations - self.total_iterations / 4)
    }

    /// Learning rate for the update made at 0-based iteration `i`: constant,
    /// then linear to zero over the decay window.
    pub fn learning_rate_at(&self, i: usize) -> f64 {
        let start = self.decay_start();
        if i < start || start >= self.total_iterations {
            return self.learning_rate;
        }
        let window = (self.total_iterations - start) as f64;
        self.learning_rate * (self.total_iterations.saturating_sub(i)) as f64 / window
    }

    /// Iterations at which checkpoints are written.
    pub fn checkpoint_iterations(&self) -> Vec<usize> {
        let mut out: Vec<usize> =
            (1..=self.total_iterations / self.checkpoint_interval).map(|k| k * self.checkpoint_interval).collect();
        if out.last() != Some(&self.total_iterations) {
            out.push(self.total_iterations);
        }
        out
    }

    pub fn build_generator(&self) -> Generator {
        Generator::new(&GeneratorConfig { seed: mix_seed(&[self.seed, TAG_GENERATOR_INIT]), ..self.generator.clone() })
    }

    pub fn build_critic(&self) -> PatchCritic {
        PatchCritic::new(&CriticConfig { seed: mix_seed(&[self.seed, TAG_CRITIC_INIT]), ..self.critic.clone() })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::validation(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::validation(format!("invalid training config: {e}")))
    }
}

/// Per-iteration losses. Generator terms are present only on iterations
/// that update the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// 1-based count of completed iterations.
    pub iteration: usize,
    pub d_adv: f64,
    pub d_gp: f64,
    pub g_adv: Option<f64>,
    pub g_id: Option<f64>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.d_adv.is_finite()
            && self.d_gp.is_finite()
            && self.g_adv.is_none_or(f64::is_finite)
            && self.g_id.is_none_or(f64::is_finite)
    }

    fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.iteration, self.d_adv, self.d_gp, opt(self.g_adv), opt(self.g_id))
    }

    fn parse_csv_row(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return None;
        }
        let opt = |s: &str| if s.is_empty() { Some(None) } else { s.parse().ok().map(Some) };
        Some(LossReport {
            iteration: f[0].parse().ok()?,
            d_adv: f[1].parse().ok()?,
            d_gp: f[2].parse().ok()?,
            g_adv: opt(f[3])?,
            g_id: opt(f[4])?,
        })
    }
}

pub const LOG_HEADER: &str = "iteration,d_adv,d_gp,g_adv,g_id";

/// Reads a run's `log.csv`.
pub fn read_log(path: &Path) -> Result<Vec<LossReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::format(path, "unexpected log header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| LossReport::parse_csv_row(l).ok_or_else(|| Error::format(path, format!("bad log row '{l}'"))))
        .collect()
}

/// One interpolation weight per sample, uniform on `[0, 1)`.
pub fn sample_epsilons(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen::<f32>()).collect()
}

/// `ε_i·real_i + (1 − ε_i)·fake_i` per sample.
pub fn interpolate(real: &Tensor, fake: &Tensor, eps: &[f32]) -> Result<Tensor> {
    ensure!(real.shape() == fake.shape(), "real {:?} and fake {:?} batches differ in shape", real.shape(), fake.shape());
    ensure!(eps.len() == real.batch(), "need one interpolation weight per sample");
    let mut out = fake.clone();
    for (i, &e) in eps.iter().enumerate() {
        for (o, &r) in out.sample_mut(i).iter_mut().zip(real.sample(i)) {
            *o = e * r + (1.0 - e) * *o;
        }
    }
    Ok(out)
}

/// Critic objective terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticLoss {
    /// `mean D(fake) − mean D(real)`, means over samples and patches.
    pub adv: f64,
    /// Unweighted gradient penalty.
    pub gp: f64,
    pub total: f64,
}

/// Evaluates the critic objective on explicit real and fake batches and,
/// when `grads` is given, accumulates its parameter gradient.
pub fn critic_objective(
    d: &PatchCritic,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f32],
    lambda_gp: f64,
    mut grads: Option<&mut PatchCritic>,
) -> Result<CriticLoss> {
    ensure!(real.shape() == fake.shape(), "real {:?} and fake {:?} batches differ in shape", real.shape(), fake.shape());
    let b = real.batch();
    let both = real.concat(fake)?;
    let (out, cache) = d.forward_cached(&both)?;
    let half = b * out.sample_len();
    let mean_real = out.data()[..half].iter().map(|&v| v as f64).sum::<f64>() / half as f64;
    let mean_fake = out.data()[half..].iter().map(|&v| v as f64).sum::<f64>() / half as f64;
    if let Some(g) = grads.as_deref_mut() {
        let w = 1.0 / half as f32;
        let mut go = out.clone();
        go.data_mut()[..half].fill(-w);
        go.data_mut()[half..].fill(w);
        d.backward(&cache, &go, Some(g));
    }
    let xhat = interpolate(real, fake, eps)?;
    let report = d.gradient_penalty(&xhat, grads, lambda_gp as f32)?;
    let adv = mean_fake - mean_real;
    Ok(CriticLoss { adv, gp: report.penalty, total: adv + lambda_gp * report.penalty })
}

/// Critic loss for a generator/critic pair; the generator is held fixed.
pub fn discriminator_loss(
    d: &PatchCritic,
    g: &Generator,
    x_m: &Tensor,
    x_h: &Tensor,
    cfg: &TrainingConfig,
    eps: &[f32],
) -> Result<CriticLoss> {
    ensure!(x_m.shape() == x_h.shape(), "x_M {:?} and x_H {:?} batches differ in shape", x_m.shape(), x_h.shape());
    let fake = compose(cfg.translation_mode, x_m, &g.forward(x_m)?)?;
    critic_objective(d, x_h, &fake, eps, cfg.lambda_gp, None)
}

/// Generator objective terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorLoss {
    /// `−mean D(fake)`.
    pub adv: f64,
    /// `mean |translate(x_H) − x_H|`.
    pub id: f64,
    pub total: f64,
}

/// Generator objective as a function of the generator outputs, with the
/// gradients w.r.t. `map_m` and `map_h`. The critic is held fixed.
pub fn generator_objective(
    d: &PatchCritic,
    mode: TranslationMode,
    lambda_id: f64,
    x_m: &Tensor,
    map_m: &Tensor,
    x_h: &Tensor,
    map_h: &Tensor,
) -> Result<(GeneratorLoss, Tensor, Tensor)> {
    let fake = compose(mode, x_m, map_m)?;
    let (out, cache) = d.forward_cached(&fake)?;
    let n_out = out.data().len();
    let adv = -out.data().iter().map(|&v| v as f64).sum::<f64>() / n_out as f64;
    let (g_fake, _) = d.backward(&cache, &Tensor::full(out.shape(), -1.0 / n_out as f32), None);
    let grad_m = g_fake.zip_map(&fake, |g, y| g * (1.0 - y * y))?;

    let healthy = compose(mode, x_h, map_h)?;
    let n_px = healthy.data().len();
    let id = healthy.data().iter().zip(x_h.data()).map(|(&y, &x)| (y as f64 - x as f64).abs()).sum::<f64>()
        / n_px as f64;
    let w = (lambda_id / n_px as f64) as f32;
    let mut grad_h = healthy.clone();
    for ((g, &y), &x) in grad_h.data_mut().iter_mut().zip(healthy.data()).zip(x_h.data()) {
        let sign = if y > x { 1.0 } else if y < x { -1.0 } else { 0.0 };
        *g = w * sign * (1.0 - y * y);
    }
    Ok((GeneratorLoss { adv, id, total: adv + lambda_id * id }, grad_m, grad_h))
}

/// Generator loss for a generator/critic pair.
pub fn generator_loss(
    d: &PatchCritic,
    g: &Generator,
    x_m: &Tensor,
    x_h: &Tensor,
    cfg: &TrainingConfig,
) -> Result<GeneratorLoss> {
    ensure!(x_m.shape() == x_h.shape(), "x_M {:?} and x_H {:?} batches differ in shape", x_m.shape(), x_h.shape());
    let map_m = g.forward(x_m)?;
    let map_h = g.forward(x_h)?;
    Ok(generator_objective(d, cfg.translation_mode, cfg.lambda_id, x_m, &map_m, x_h, &map_h)?.0)
}

/// Adam with bias correction and per-call learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new<P: Parameterized>(net: &P, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Vec<f32>> = net.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Adam { beta1, beta2, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update<P: Parameterized>(&mut self, net: &mut P, grads: &P, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / c1) as f32;
        let inv_c2 = (1.0 / c2) as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in net.params_mut().into_iter().zip(grads.params()).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gr), mi), vi) in p.data.iter_mut().zip(g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gr;
                *vi = b2 * *vi + (1.0 - b2) * gr * gr;
                *w -= step_size * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
    }

    fn export<P: Parameterized>(&self, net: &P, out: &mut Vec<NamedTensor>) {
        for ((p, m), v) in net.params().iter().zip(&self.m).zip(&self.v) {
            out.push(NamedTensor { name: format!("{}.adam_m", p.name), shape: p.shape.clone(), data: m.clone() });
            out.push(NamedTensor { name: format!("{}.adam_v", p.name), shape: p.shape.clone(), data: v.clone() });
        }
    }

    fn import<P: Parameterized>(&mut self, net: &P, tensors: &[NamedTensor], step: u64) -> Result<()> {
        for ((p, m), v) in net.params().iter().zip(&mut self.m).zip(&mut self.v) {
            for (suffix, dst) in [("adam_m", &mut *m), ("adam_v", &mut *v)] {
                let key = format!("{}.{suffix}", p.name);
                let t = tensors
                    .iter()
                    .find(|t| t.name == key)
                    .ok_or_else(|| Error::validation(format!("optimizer state lacks '{key}'")))?;
                ensure!(t.data.len() == dst.len(), "optimizer state '{key}' has the wrong length");
                dst.copy_from_slice(&t.data);
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Contents of a checkpoint's `state.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub iteration: usize,
    pub h_sampler: SamplerState,
    pub m_sampler: SamplerState,
    pub generator_steps: u64,
    pub critic_steps: u64,
}

/// A checkpoint directory on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedCheckpoint {
    pub iteration: usize,
    pub dir: PathBuf,
}

impl SavedCheckpoint {
    pub fn generator_path(&self) -> PathBuf {
        self.dir.join(GENERATOR_FILE)
    }

    pub fn critic_path(&self) -> PathBuf {
        self.dir.join(CRITIC_FILE)
    }
}

pub fn checkpoint_dir(run_dir: &Path, iteration: usize) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("iter_{iteration}"))
}

/// Complete checkpoints of a run, ordered by iteration. Directories without
/// a state file (interrupted writes) are skipped.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<SavedCheckpoint>> {
    let root = run_dir.join(CHECKPOINT_DIR);
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
        let entry = entry.map_err(|e| Error::io(&root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(iteration) = name.strip_prefix("iter_").and_then(|s| s.parse().ok()) else { continue };
        if entry.path().join(STATE_FILE).exists() {
            out.push(SavedCheckpoint { iteration, dir: entry.path() });
        }
    }
    out.sort_by_key(|c| c.iteration);
    Ok(out)
}

/// Loads the generator of a checkpoint, built to the run's architecture.
pub fn load_generator(cfg: &TrainingConfig, ckpt: &SavedCheckpoint) -> Result<Generator> {
    let mut g = cfg.build_generator();
    load_params(&mut g, &read_tensors(&ckpt.generator_path())?, "")?;
    Ok(g)
}

/// Reads the resolved configuration of a run directory.
pub fn read_run_config(run_dir: &Path) -> Result<TrainingConfig> {
    let path = run_dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Controls that do not affect results.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Stop after this many iterations without a final checkpoint, leaving
    /// the run as if the process had been killed.
    pub halt_at: Option<usize>,
    /// Called with every iteration's losses.
    pub observer: Option<&'a mut dyn FnMut(&LossReport)>,
}

/// Result of a call to [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<SavedCheckpoint>,
    /// Iteration the run resumed from, 0 for a fresh run.
    pub resumed_from: usize,
    /// Whether `total_iterations` was reached.
    pub completed: bool,
}

struct TrainState {
    g: Generator,
    d: PatchCritic,
    g_opt: Adam,
    d_opt: Adam,
    pipe: DataPipe,
    iteration: usize,
}

fn write_checkpoint(run_dir: &Path, st: &TrainState) -> Result<SavedCheckpoint> {
    let dir = checkpoint_dir(run_dir, st.iteration);
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write_tensors(&tmp.join(GENERATOR_FILE), &collect_params(&st.g, ""))?;
    write_tensors(&tmp.join(CRITIC_FILE), &collect_params(&st.d, ""))?;
    let mut opt = Vec::new();
    st.g_opt.export(&st.g, &mut opt);
    st.d_opt.export(&st.d, &mut opt);
    write_tensors(&tmp.join(OPTIMIZER_FILE), &opt)?;
    let (h_sampler, m_sampler) = st.pipe.states();
    let state = CheckpointState {
        iteration: st.iteration,
        h_sampler,
        m_sampler,
        generator_steps: st.g_opt.step,
        critic_steps: st.d_opt.step,
    };
    let json = serde_json::to_string_pretty(&state).expect("state serializes");
    fs::write(tmp.join(STATE_FILE), json).map_err(|e| Error::io(tmp.join(STATE_FILE), e))?;
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
    Ok(SavedCheckpoint { iteration: st.iteration, dir })
}

fn restore(
    cfg: &TrainingConfig,
    ckpt: &SavedCheckpoint,
    h: Vec<SliceImage>,
    m: Vec<SliceImage>,
    data_seed: u64,
) -> Result<TrainState> {
    let state_path = ckpt.dir.join(STATE_FILE);
    let text = fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
    let state: CheckpointState =
        serde_json::from_str(&text).map_err(|e| Error::format(&state_path, e.to_string()))?;
    let mut g = cfg.build_generator();
    load_params(&mut g, &read_tensors(&ckpt.generator_path())?, "")?;
    let mut d = cfg.build_critic();
    load_params(&mut d, &read_tensors(&ckpt.critic_path())?, "")?;
    let opt = read_tensors(&ckpt.dir.join(OPTIMIZER_FILE))?;
    let mut g_opt = Adam::new(&g, cfg.beta1, cfg.beta2);
    g_opt.import(&g, &opt, state.generator_steps)?;
    let mut d_opt = Adam::new(&d, cfg.beta1, cfg.beta2);
    d_opt.import(&d, &opt, state.critic_steps)?;
    let pipe = DataPipe::with_state(h, m, data_seed, state.h_sampler, state.m_sampler)?;
    Ok(TrainState { g, d, g_opt, d_opt, pipe, iteration: state.iteration })
}

/// Keeps the header and rows up to `iteration`.
fn truncate_log(path: &Path, iteration: usize) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let keep = i == 0
            || line.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|it| it <= iteration);
        if keep {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn abort_non_finite(run_dir: &Path, st: &TrainState, report: &LossReport) -> Error {
    let detail = format!(
        "iteration {}: d_adv={} d_gp={} g_adv={:?} g_id={:?}; max|G param|={} max|D param|={}",
        report.iteration,
        report.d_adv,
        report.d_gp,
        report.g_adv,
        report.g_id,
        max_abs_param(&st.g),
        max_abs_param(&st.d)
    );
    let _ = fs::write(run_dir.join(DIAGNOSTIC_FILE), format!("{detail}\n"));
    Error::NonFinite { iteration: report.iteration as u64, detail }
}

fn max_abs_param<P: Parameterized>(net: &P) -> f32 {
    net.params().iter().flat_map(|p| p.data.iter()).fold(0.0f32, |a, &v| a.max(v.abs()))
}

/// Runs (or resumes) training into `run_dir`.
///
/// A directory that already holds `config.toml` is resumed from its latest
/// checkpoint; its configuration must equal `cfg`. `h` and `m` must be the
/// same slices, in the same order, on every call for a resumed run to match
/// an uninterrupted one.
pub fn train(
    cfg: &TrainingConfig,
    h: Vec<SliceImage>,
    m: Vec<SliceImage>,
    run_dir: &Path,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(!h.is_empty(), "the healthy set H is empty");
    ensure!(!m.is_empty(), "the mixed set M is empty");
    ensure!(h.iter().all(|s| s.source_set == SetId::H), "H must only contain slices from set H");
    ensure!(m.iter().all(|s| s.source_set == SetId::M), "M must only contain slices from set M");
    let side = h[0].pixels.height;
    let critic_factor = 1usize << cfg.critic.downsamplings;
    ensure!(
        side.is_multiple_of(critic_factor) && side.is_multiple_of(Generator::DOWNSAMPLING),
        "image side {side} must be divisible by {critic_factor} for this critic"
    );

    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let config_path = run_dir.join(CONFIG_FILE);
    let log_path = run_dir.join(LOG_FILE);
    let data_seed = mix_seed(&[cfg.seed, TAG_DATA]);

    let existing = if config_path.exists() { list_checkpoints(run_dir)? } else { Vec::new() };
    let mut st = if config_path.exists() {
        let stored = read_run_config(run_dir)?;
        ensure!(
            &stored == cfg,
            "run directory {} holds a different configuration; use a new directory",
            run_dir.display()
        );
        match existing.last() {
            Some(ckpt) => restore(cfg, ckpt, h, m, data_seed)?,
            None => fresh_state(cfg, h, m, data_seed)?,
        }
    } else {
        fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
        fresh_state(cfg, h, m, data_seed)?
    };
    let resumed_from = st.iteration;
    if log_path.exists() {
        truncate_log(&log_path, st.iteration)?;
    } else {
        fs::write(&log_path, format!("{LOG_HEADER}\n")).map_err(|e| Error::io(&log_path, e))?;
    }
    let log_file = fs::OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);

    let mut checkpoints: Vec<SavedCheckpoint> =
        existing.into_iter().filter(|c| c.iteration <= st.iteration).collect();
    let schedule = cfg.checkpoint_iterations();
    let mut g_grads = st.g.zeros_like();
    let mut d_grads = st.d.zeros_like();
    let b = cfg.batch_size;

    while st.iteration < cfg.total_iterations {
        if opts.halt_at.is_some_and(|k| st.iteration >= k) {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            return Ok(TrainOutcome { checkpoints, resumed_from, completed: false });
        }
        let i = st.iteration;
        let lr = cfg.learning_rate_at(i);
        let update_g = (i + 1) % cfg.d_steps_per_g_step == 0;
        let x_m = st.pipe.next_batch(SetId::M, b)?.images;
        let x_h = st.pipe.next_batch(SetId::H, b)?.images;

        let (map_m, g_cache, map_h) = if update_g {
            let (maps, cache) = st.g.forward_cached(&x_m.concat(&x_h)?)?;
            (maps.slice_batch(0, b), Some(cache), Some(maps.slice_batch(b, b)))
        } else {
            (st.g.forward(&x_m)?, None, None)
        };
        let fake = compose(cfg.translation_mode, &x_m, &map_m)?;
        let eps = sample_epsilons(&mut stream(&[cfg.seed, i as u64, TAG_EPSILON]), b);
        zero_grads(&mut d_grads);
        let closs = critic_objective(&st.d, &x_h, &fake, &eps, cfg.lambda_gp, Some(&mut d_grads))?;
        let mut report =
            LossReport { iteration: i + 1, d_adv: closs.adv, d_gp: closs.gp, g_adv: None, g_id: None };
        if !report.is_finite() {
            return Err(abort_non_finite(run_dir, &st, &report));
        }
        st.d_opt.update(&mut st.d, &d_grads, lr);

        if let (Some(cache), Some(map_h)) = (g_cache, map_h) {
            let (gloss, grad_m, grad_h) =
                generator_objective(&st.d, cfg.translation_mode, cfg.lambda_id, &x_m, &map_m, &x_h, &map_h)?;
            report.g_adv = Some(gloss.adv);
            report.g_id = Some(gloss.id);
            if !report.is_finite() {
                return Err(abort_non_finite(run_dir, &st, &report));
            }
            zero_grads(&mut g_grads);
            st.g.backward(&cache, &grad_m.concat(&grad_h)?, &mut g_grads);
            st.g_opt.update(&mut st.g, &g_grads, lr);
        }

        st.iteration += 1;
        writeln!(log, "{}", report.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        if let Some(obs) = opts.observer.as_deref_mut() {
            obs(&report);
        }
        if schedule.binary_search(&st.iteration).is_ok() {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            checkpoints.push(write_checkpoint(run_dir, &st)?);
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome { checkpoints, resumed_from, completed: true })
}

fn fresh_state(cfg: &TrainingConfig, h: Vec<SliceImage>, m: Vec<SliceImage>, data_seed: u64) -> Result<TrainState> {
    let g = cfg.build_generator();
    let d = cfg.build_critic();
    let g_opt = Adam::new(&g, cfg.beta1, cfg.beta2);
    let d_opt = Adam::new(&d, cfg.beta1, cfg.beta2);
    Ok(TrainState { g, d, g_opt, d_opt, pipe: DataPipe::new(h, m, data_seed)?, iteration: 0 })
}

fn zero_grads<P: Parameterized>(net: &mut P) {
    for p in net.params_mut() {
        p.data.fill(0.0);
    }
}
