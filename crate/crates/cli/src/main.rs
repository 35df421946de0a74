use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use brainomaly::data::{slices_of, Dataset, Manifest, SetId, MANIFEST_FILE};
use brainomaly::detection::{DiffMode, ScoreTable};
use brainomaly::eval::{
    ablate, evaluate_checkpoints, evaluate_splits, roc_curve, run_pipeline, score_checkpoint, EvalData, EvalOptions,
    ExperimentConfig, RunLock, Variant, SELECTION_FILE,
};
use brainomaly::modelselect::{select_best, selection_report, Criterion};
use brainomaly::nets::TranslationMode;
use brainomaly::phantom::{generate_dataset, LesionSign, PhantomSpec, SplitSizes};
use brainomaly::training::{list_checkpoints, read_run_config, train, LossReport, SavedCheckpoint, TrainOptions};

/// Unsupervised disease detection by adversarial healthy translation.
#[derive(Parser)]
#[command(name = "brainomaly", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic phantom dataset.
    Phantom(PhantomArgs),
    /// Train a generator/critic pair, resuming if the run directory exists.
    Train(ExperimentArgs),
    /// Score subjects with one checkpoint of a run.
    Score(ScoreArgs),
    /// Evaluate every checkpoint of a run and pick the inference model.
    Select(SelectArgs),
    /// Transductive and inductive AUCs and ROC files for one checkpoint.
    Eval(EvalArgs),
    /// Train, select, score and report in one go.
    Pipeline(ExperimentArgs),
    /// Sweep identity loss and/or translation mode over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with `[spec]` and `[split]` tables; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    slices: Option<usize>,
    #[arg(long)]
    delta: Option<f32>,
    #[arg(long)]
    radius: Option<f32>,
    #[arg(long)]
    noise: Option<f32>,
    /// darken or brighten
    #[arg(long)]
    sign: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    m_healthy: Option<usize>,
    #[arg(long)]
    m_diseased: Option<usize>,
    #[arg(long)]
    holdout_healthy: Option<usize>,
    #[arg(long)]
    holdout_diseased: Option<usize>,
}

#[derive(serde::Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct PhantomFile {
    spec: PhantomSpec,
    split: Option<SplitSizes>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment TOML; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda_id: Option<f64>,
    #[arg(long)]
    lambda_gp: Option<f64>,
    /// additive or direct
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Multiplies the channel widths of both networks.
    #[arg(long)]
    width_factor: Option<f64>,
    /// aucp or fid
    #[arg(long)]
    criterion: Option<String>,
    /// absolute or signed
    #[arg(long)]
    diff_mode: Option<String>,
    #[arg(long)]
    no_fid: bool,
    /// Stop after this many iterations without a final checkpoint.
    #[arg(long)]
    halt_at: Option<usize>,
    /// Print losses every N iterations (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint iteration; defaults to the latest.
    #[arg(long)]
    iteration: Option<usize>,
    /// H, M, holdout, or all
    #[arg(long, default_value = "all")]
    set: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "absolute")]
    diff_mode: String,
    /// Attach true labels from this manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "aucp")]
    criterion: String,
    /// Fill in holdout AUC from this manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    no_fid: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    iteration: Option<usize>,
    /// Defaults to `<dataset>/manifest.csv`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory for report and ROC files; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// identity, mode, or all
    #[arg(long, default_value = "all")]
    sweep: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    /// Root directory for the sweep.
    #[arg(long)]
    out: PathBuf,
}

/// An error carrying its exit status.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn classify(error: anyhow::Error) -> Failure {
    let validation = error
        .chain()
        .any(|e| e.downcast_ref::<brainomaly::Error>().is_some_and(brainomaly::Error::is_validation));
    let usage = error.downcast_ref::<UsageError>().is_some();
    Failure { code: if validation || usage { 1 } else { 2 }, error }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_arg<T: std::str::FromStr<Err = brainomaly::Error>>(s: &str) -> anyhow::Result<T> {
    s.parse::<T>().map_err(anyhow::Error::from)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let f = classify(e);
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Train(a) => train_cmd(a),
        Command::Score(a) => score(a),
        Command::Select(a) => select(a),
        Command::Eval(a) => eval(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

fn phantom(a: PhantomArgs) -> anyhow::Result<()> {
    let mut file = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<PhantomFile>(&text).map_err(|e| usage(format!("invalid phantom config: {e}")))?
        }
        None => PhantomFile::default(),
    };
    let spec = &mut file.spec;
    set(&mut spec.image_size, a.image_size);
    set(&mut spec.slices_per_subject, a.slices);
    set(&mut spec.lesion_intensity_delta, a.delta);
    set(&mut spec.lesion_radius_frac, a.radius);
    set(&mut spec.texture_noise_sigma, a.noise);
    set(&mut spec.seed, a.seed);
    if let Some(s) = &a.sign {
        spec.lesion_sign = match s.as_str() {
            "darken" => LesionSign::Darken,
            "brighten" => LesionSign::Brighten,
            other => return Err(usage(format!("unknown lesion sign '{other}'"))),
        };
    }
    let mut split = file.split.unwrap_or(SplitSizes {
        h_size: spec.n_healthy,
        m_healthy: spec.n_healthy / 2,
        m_diseased: spec.n_diseased,
        holdout_healthy: 0,
        holdout_diseased: 0,
    });
    set(&mut split.h_size, a.h);
    set(&mut split.m_healthy, a.m_healthy);
    set(&mut split.m_diseased, a.m_diseased);
    set(&mut split.holdout_healthy, a.holdout_healthy);
    set(&mut split.holdout_diseased, a.holdout_diseased);
    let manifest = generate_dataset(&file.spec, &split, &a.out)?;
    let positives = manifest.iter().filter(|e| e.label == 1).count();
    println!("wrote {} subjects ({positives} lesioned) to {}", manifest.len(), a.out.display());
    Ok(())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn experiment_config(a: &ExperimentArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    set(&mut cfg.dataset, a.dataset.clone());
    if a.manifest.is_some() {
        cfg.manifest = a.manifest.clone();
    }
    set(&mut cfg.output, a.output.clone());
    if a.crop.is_some() {
        cfg.crop = a.crop;
    }
    let t = &mut cfg.training;
    set(&mut t.total_iterations, a.iterations);
    set(&mut t.checkpoint_interval, a.checkpoint_interval);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.learning_rate, a.learning_rate);
    set(&mut t.lambda_id, a.lambda_id);
    set(&mut t.lambda_gp, a.lambda_gp);
    set(&mut t.seed, a.seed);
    if let Some(m) = &a.mode {
        t.translation_mode = parse_arg::<TranslationMode>(m)?;
    }
    if let Some(w) = a.width_factor {
        t.generator.width_factor = w;
        t.critic.width_factor = w;
    }
    if let Some(c) = &a.criterion {
        cfg.selection = parse_arg::<Criterion>(c)?;
    }
    if let Some(d) = &a.diff_mode {
        cfg.eval.diff_mode = parse_arg::<DiffMode>(d)?;
    }
    if a.no_fid {
        cfg.eval.compute_fid = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress_printer(every: usize) -> impl FnMut(&LossReport) {
    move |r: &LossReport| {
        if every > 0 && r.iteration.is_multiple_of(every) {
            let g = match (r.g_adv, r.g_id) {
                (Some(a), Some(i)) => format!(" g_adv={a:.5} g_id={i:.5}"),
                _ => String::new(),
            };
            eprintln!("iter {:>7} d_adv={:.5} d_gp={:.5}{g}", r.iteration, r.d_adv, r.d_gp);
        }
    }
}

fn train_cmd(a: ExperimentArgs) -> anyhow::Result<()> {
    let cfg = experiment_config(&a)?;
    let _lock = RunLock::acquire(&cfg.output)?;
    let dataset = Dataset::open(&cfg.dataset, cfg.crop)?;
    let h = dataset.load_set(SetId::H)?;
    let m = dataset.load_set(SetId::M)?;
    let mut printer = progress_printer(a.log_every);
    let opts = TrainOptions { halt_at: a.halt_at, observer: Some(&mut printer) };
    let out = train(&cfg.training, slices_of(&h), slices_of(&m), &cfg.output, opts)?;
    let its: Vec<String> = out.checkpoints.iter().map(|c| c.iteration.to_string()).collect();
    let state = if out.completed { "finished" } else { "halted" };
    println!("{state}; checkpoints: {}", its.join(" "));
    Ok(())
}

fn find_checkpoint(run: &Path, iteration: Option<usize>) -> anyhow::Result<SavedCheckpoint> {
    let all = list_checkpoints(run)?;
    match iteration {
        Some(i) => all
            .into_iter()
            .find(|c| c.iteration == i)
            .ok_or_else(|| usage(format!("run {} has no checkpoint at iteration {i}", run.display()))),
        None => all.into_iter().last().ok_or_else(|| usage(format!("run {} has no checkpoints", run.display()))),
    }
}

fn load_labels(path: Option<PathBuf>, dataset: &Path) -> anyhow::Result<Option<Manifest>> {
    let path = path.or_else(|| Some(dataset.join(MANIFEST_FILE)).filter(|p| p.exists()));
    Ok(match path {
        Some(p) => Some(Manifest::read(&p)?),
        None => None,
    })
}

fn score(a: ScoreArgs) -> anyhow::Result<()> {
    let cfg = read_run_config(&a.run)?;
    let ckpt = find_checkpoint(&a.run, a.iteration)?;
    let dataset = Dataset::open(&a.dataset, None)?;
    let sets: Vec<SetId> = match a.set.as_str() {
        "all" => vec![SetId::H, SetId::M, SetId::Holdout],
        s => vec![SetId::parse(s)?],
    };
    let mut subjects = Vec::new();
    for s in sets {
        subjects.extend(dataset.load_set(s)?);
    }
    if subjects.is_empty() {
        return Err(usage("no subjects found in the requested sets"));
    }
    if let Some(m) = load_labels(a.manifest, &a.dataset)? {
        m.attach(&mut subjects);
    }
    let table = score_checkpoint(&cfg, &ckpt, &subjects, parse_arg(&a.diff_mode)?)?;
    table.write_csv(&a.out)?;
    println!("scored {} subjects with checkpoint {} -> {}", table.rows.len(), ckpt.iteration, a.out.display());
    Ok(())
}

fn eval_data(dataset: &Path, manifest: Option<PathBuf>) -> anyhow::Result<EvalData> {
    let ds = Dataset::open(dataset, None)?;
    let mut data = EvalData::load(&ds)?;
    if let Some(m) = load_labels(manifest, dataset)? {
        data.attach_labels(&m)?;
    }
    Ok(data)
}

fn select(a: SelectArgs) -> anyhow::Result<()> {
    let cfg = read_run_config(&a.run)?;
    let criterion: Criterion = parse_arg(&a.criterion)?;
    let _lock = RunLock::acquire(&a.run)?;
    let data = eval_data(&a.dataset, a.manifest)?;
    let opts = EvalOptions { compute_fid: !a.no_fid, ..EvalOptions::default() };
    if criterion == Criterion::Fid && a.no_fid {
        return Err(usage("--criterion fid needs FID; drop --no-fid"));
    }
    let records = evaluate_checkpoints(&cfg, &a.run, &data, &opts)?;
    let text = selection_report(&records);
    let path = a.run.join(SELECTION_FILE);
    fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    print!("{text}");
    let best = select_best(&records, criterion)?;
    println!("selected iteration {} by {criterion}", records[best].iteration);
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let cfg = read_run_config(&a.run)?;
    let iteration = match a.iteration {
        Some(i) => Some(i),
        None => selected_from_file(&a.run.join(SELECTION_FILE))?,
    };
    let ckpt = find_checkpoint(&a.run, iteration)?;
    let data = eval_data(&a.dataset, a.manifest)?;
    if !data.labelled {
        return Err(usage("eval needs a manifest with true labels"));
    }
    let out = a.out.unwrap_or_else(|| a.run.clone());
    fs::create_dir_all(&out)?;
    let diff = DiffMode::Absolute;
    let mixed = score_checkpoint(&cfg, &ckpt, &data.h_and_m(), diff)?;
    let holdout = score_checkpoint(&cfg, &ckpt, &data.holdout, diff)?;
    for (name, table) in [("mixed", &mixed), ("holdout", &holdout)] {
        table.write_csv(&out.join(format!("scores_{name}.csv")))?;
        write_roc(table, &out.join(format!("roc_{name}.dat")))?;
    }
    let split = evaluate_splits(&mixed, &holdout)?;
    let text = format!(
        "iteration = {}\ntransductive_auc = {}\ninductive_auc = {}\ngap = {}\n",
        ckpt.iteration, split.transductive_auc, split.inductive_auc, split.gap
    );
    fs::write(out.join("eval.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn write_roc(table: &ScoreTable, path: &Path) -> anyhow::Result<()> {
    let labels: Vec<u8> = table
        .rows
        .iter()
        .map(|r| r.true_label.ok_or_else(|| anyhow!("subject {} has no label", r.subject_id)))
        .collect::<anyhow::Result<_>>()?;
    roc_curve(&table.scores(), &labels)?.write_dat(path)?;
    Ok(())
}

/// Reads the AUCp selection from a `selection.csv`, if present.
fn selected_from_file(path: &Path) -> anyhow::Result<Option<usize>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .find_map(|l| l.strip_prefix("selected_iteration,aucp,"))
        .and_then(|v| v.trim().parse().ok()))
}

fn pipeline(a: ExperimentArgs) -> anyhow::Result<()> {
    let cfg = experiment_config(&a)?;
    let mut printer = progress_printer(a.log_every);
    let report = run_pipeline(&cfg, TrainOptions { halt_at: a.halt_at, observer: Some(&mut printer) })?;
    if let Some(i) = report.selected_iteration {
        println!("selected iteration {i} by {}", cfg.selection);
    }
    if let Some(s) = &report.splits {
        println!(
            "transductive AUC {:.4}, inductive AUC {:.4}, gap {:.4}",
            s.transductive_auc, s.inductive_auc, s.gap
        );
    }
    println!("report: {}", cfg.output.join(brainomaly::eval::REPORT_FILE).display());
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> anyhow::Result<()> {
    let base = experiment_config(&a.experiment)?;
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| usage(format!("bad seed '{s}'"))))
        .collect::<anyhow::Result<_>>()?;
    let variants = match a.sweep.as_str() {
        "identity" => vec![Variant::baseline(), Variant::no_identity()],
        "mode" => vec![Variant::baseline(), Variant::direct()],
        "all" => vec![Variant::baseline(), Variant::no_identity(), Variant::direct()],
        other => return Err(usage(format!("unknown sweep '{other}'"))),
    };
    let report = ablate(&base, &variants, &seeds, &a.out, |v, s| eprintln!("running {v} seed {s}"))?;
    print!("{}", report.to_csv());
    Ok(())
}
