//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 5-9 train nine 5,000-iteration models on 64×64 phantoms (about an
//! hour on one CPU core). Set `BRAINOMALY_ACCEPTANCE_DIR` to keep the runs;
//! finished runs found there are reused on the next invocation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use brainomaly::data::SetId;
use brainomaly::detection::{pseudo_label, ScoreRow, ScoreTable};
use brainomaly::eval::{
    ablate, median, roc_curve, run_pipeline, AblationReport, ExperimentConfig, Variant,
};
use brainomaly::modelselect::{auc, aucp};
use brainomaly::nets::{compose_healthy, CriticConfig, Generator, GeneratorConfig, PatchCritic};
use brainomaly::phantom::{generate_dataset, PhantomSpec, SplitSizes};
use brainomaly::training::{list_checkpoints, TrainOptions, TrainingConfig, LOG_FILE};
use brainomaly::Tensor;

struct Ledger {
    failures: usize,
}

impl Ledger {
    fn record(&mut self, id: u32, name: &str, ok: bool, detail: impl AsRef<str>) {
        if !ok {
            self.failures += 1;
        }
        println!("[{}] C{id:02} {name}: {}", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
    }
}

fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &p) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &n) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

/// Scores on a coarse grid half the time, so ties are common.
fn random_table(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.gen_range(2..=200);
    let coarse = rng.gen_bool(0.5);
    let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let scores = (0..n)
        .map(|_| if coarse { rng.gen_range(0..8) as f64 } else { rng.gen::<f64>() })
        .collect();
    (scores, labels)
}

fn metric_oracle(l: &mut Ledger) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    for _ in 0..100 {
        let (s, y) = random_table(&mut rng);
        worst = worst.max((auc(&s, &y).unwrap() - brute_force_auc(&s, &y)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    l.record(1, "auc vs pairwise oracle", worst <= 1e-12 && secs < 10.0, format!("max |err| {worst:.1e}, {secs:.2}s"));
}

fn row(i: usize, set: SetId, score: f64, label: u8) -> ScoreRow {
    ScoreRow { subject_id: format!("{set}-{i:04}"), source_set: set, score, pseudo_label: pseudo_label(set), true_label: Some(label) }
}

fn aucp_soundness(l: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut clean_exact, mut worst) = (true, 0f64);
    for t in 0..100 {
        let n_h = rng.gen_range(1..60);
        let n_sick = rng.gen_range(1..60);
        let n_hidden = if t < 50 { 0 } else { rng.gen_range(1..60) };
        let mut rows = Vec::new();
        for i in 0..n_h {
            rows.push(row(i, SetId::H, rng.gen_range(0.0..1.0), 0));
        }
        for i in 0..n_sick {
            rows.push(row(n_h + i, SetId::M, rng.gen_range(0.3..1.3), 1));
        }
        for i in 0..n_hidden {
            rows.push(row(n_h + n_sick + i, SetId::M, rng.gen_range(0.0..1.0), 0));
        }
        let table = ScoreTable::new(rows);
        let got = aucp(&table).unwrap();
        if n_hidden == 0 {
            let labels: Vec<u8> = table.rows.iter().map(|r| r.true_label.unwrap()).collect();
            clean_exact &= got == auc(&table.scores(), &labels).unwrap();
        } else {
            let pseudo: Vec<u8> = table.rows.iter().map(|r| r.pseudo_label).collect();
            worst = worst.max((got - brute_force_auc(&table.scores(), &pseudo)).abs());
        }
    }
    l.record(
        2,
        "aucp soundness",
        clean_exact && worst <= 1e-12,
        format!("uncontaminated exact: {clean_exact}, contaminated max |err| {worst:.1e}"),
    );
}

/// Input gradient of the summed score map of a single 3×3 zero-padded
/// convolution over an `n`×`n` image.
fn linear_gradient(w: &[f32; 9], n: usize) -> Vec<f64> {
    let mut g = vec![0.0; n * n];
    for pr in 0..n as isize {
        for pc in 0..n as isize {
            for dr in 0..3isize {
                for dc in 0..3isize {
                    let (r, c) = (pr + dr - 1, pc + dc - 1);
                    if (0..n as isize).contains(&r) && (0..n as isize).contains(&c) {
                        g[(r * n as isize + c) as usize] += w[(dr * 3 + dc) as usize] as f64;
                    }
                }
            }
        }
    }
    g
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn gradient_penalty_check(l: &mut Ledger) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut closed_err = 0f64;
    for n in [1usize, 2, 4, 8] {
        for _ in 0..10 {
            let mut w = [0f32; 9];
            w.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            let critic = PatchCritic::single_layer(w, rng.gen_range(-1.0..1.0));
            let x = random_tensor(&mut rng, [3, 1, n, n]);
            let norm = linear_gradient(&w, n).iter().map(|v| v * v).sum::<f64>().sqrt();
            let got = critic.gradient_penalty(&x, None, 1.0).unwrap().penalty;
            closed_err = closed_err.max((got - (norm - 1.0).powi(2)).abs());
        }
    }

    // Central differences are only an oracle where the critic is linear on
    // the whole stencil; inputs whose one-sided slopes disagree straddle a
    // leaky-ReLU kink and are redrawn.
    let (mut fd_rel, mut redrawn) = (0f64, 0);
    let h = 1e-2f32;
    for seed in 0..10 {
        let critic = PatchCritic::new(&CriticConfig {
            width_factor: 1.0 / 16.0,
            downsamplings: 3,
            seed,
            ..CriticConfig::default()
        });
        let mut checked = 0;
        while checked < 2 {
            let x = random_tensor(&mut rng, [1, 1, 8, 8]);
            let norm = critic.gradient_penalty(&x, None, 1.0).unwrap().grad_norms[0];
            let score = |t: &Tensor| -> f64 { critic.forward(t).unwrap().data().iter().map(|&v| v as f64).sum() };
            let s0 = score(&x);
            let (mut sq, mut kink) = (0.0, false);
            for j in 0..64 {
                let mut plus = x.clone();
                plus.data_mut()[j] += h;
                let mut minus = x.clone();
                minus.data_mut()[j] -= h;
                let (up, down) = (score(&plus) - s0, s0 - score(&minus));
                kink |= (up - down).abs() > 1e-4 * h as f64;
                sq += ((up + down) / (2.0 * h as f64)).powi(2);
            }
            if kink {
                redrawn += 1;
                continue;
            }
            fd_rel = fd_rel.max((norm - sq.sqrt()).abs() / sq.sqrt());
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    l.record(
        3,
        "gradient penalty",
        closed_err <= 1e-6 && fd_rel <= 1e-3 && secs < 60.0,
        format!(
            "closed form max |err| {closed_err:.1e}, finite differences max rel {fd_rel:.1e} \
             ({redrawn} inputs near a kink redrawn), {secs:.2}s"
        ),
    );
}

fn shape_invariants(l: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut extremes = vec![f32::MAX, f32::MIN, 1e6, -1e6, 30.0, -30.0, 9.5, -9.5, 0.0];
    extremes.extend((0..1000).map(|_| rng.gen_range(-50.0..50.0)));
    let n = extremes.len();
    let x = Tensor::from_vec([1, 1, 1, n], extremes.iter().rev().copied().collect()).unwrap();
    let a = Tensor::from_vec([1, 1, 1, n], extremes).unwrap();
    let open = compose_healthy(&x, &a).unwrap().data().iter().all(|v| v.abs() < 1.0);

    let desk = TrainingConfig::desk();
    let critic = PatchCritic::new(&desk.critic);
    let generator = Generator::new(&GeneratorConfig { residual_blocks: 2, ..desk.generator.clone() });
    let mut shapes = Vec::new();
    let mut ok = open;
    for (side, patch) in [(192, 3), (64, 1)] {
        let img = random_tensor(&mut rng, [1, 1, side, side]);
        let d = critic.forward(&img).unwrap().shape();
        let g = generator.forward(&img).unwrap().shape();
        ok &= d == [1, 1, patch, patch] && g == [1, 1, side, side];
        shapes.push(format!("{side}: critic {}×{}, generator {}×{}", d[2], d[3], g[2], g[3]));
    }
    l.record(4, "shape and range invariants", ok, format!("outputs open: {open}; {}", shapes.join("; ")));
}

fn roc_equivalence(l: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0f64;
    for _ in 0..100 {
        let (s, y) = random_table(&mut rng);
        let roc = roc_curve(&s, &y).unwrap();
        let area: f64 = roc.points.windows(2).map(|p| (p[1].0 - p[0].0) * (p[1].1 + p[0].1) / 2.0).sum();
        worst = worst.max((area - auc(&s, &y).unwrap()).abs());
    }
    l.record(11, "roc trapezoid equals auc", worst <= 1e-9, format!("max |err| {worst:.1e}"));
}

fn small_experiment(root: &Path) -> ExperimentConfig {
    let data = root.join("data");
    let spec = PhantomSpec { image_size: 32, slices_per_subject: 2, seed: 9, ..PhantomSpec::default() };
    let split = SplitSizes { h_size: 6, m_healthy: 3, m_diseased: 3, holdout_healthy: 2, holdout_diseased: 2 };
    generate_dataset(&spec, &split, &data).unwrap();
    let mut training = TrainingConfig::desk();
    training.total_iterations = 40;
    training.checkpoint_interval = 10;
    training.batch_size = 4;
    training.critic.downsamplings = 5;
    training.generator.residual_blocks = 2;
    ExperimentConfig { dataset: data, output: root.join("run"), training, diffmap_subjects: 1, ..ExperimentConfig::default() }
}

/// Every file under the checkpoint directory, plus the loss log.
fn run_fingerprint(run: &Path) -> Vec<(usize, Vec<u8>, Vec<u8>)> {
    list_checkpoints(run)
        .unwrap()
        .into_iter()
        .map(|c| (c.iteration, fs::read(c.generator_path()).unwrap(), fs::read(c.critic_path()).unwrap()))
        .collect()
}

fn determinism(l: &mut Ledger) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_experiment(tmp.path());
    let mut cfgs = Vec::new();
    for name in ["first", "second", "resumed"] {
        cfgs.push(ExperimentConfig { output: tmp.path().join(name), ..cfg.clone() });
    }
    let a = run_pipeline(&cfgs[0], TrainOptions::default()).unwrap();
    let b = run_pipeline(&cfgs[1], TrainOptions::default()).unwrap();
    let halted = run_pipeline(&cfgs[2], TrainOptions { halt_at: Some(25), ..TrainOptions::default() }).unwrap();
    let c = run_pipeline(&cfgs[2], TrainOptions::default()).unwrap();

    let read = |cfg: &ExperimentConfig, f: &str| fs::read(cfg.output.join(f)).unwrap();
    let same_scores = ["scores_mixed.csv", "scores_holdout.csv"]
        .iter()
        .all(|f| read(&cfgs[0], f) == read(&cfgs[1], f) && read(&cfgs[0], f) == read(&cfgs[2], f));
    let same_selection = a.selected_iteration == b.selected_iteration && a.selected_iteration == c.selected_iteration;
    let reference = run_fingerprint(&cfgs[0].output);
    let same_ckpts = reference == run_fingerprint(&cfgs[1].output) && reference == run_fingerprint(&cfgs[2].output);
    let same_log = read(&cfgs[0], LOG_FILE) == read(&cfgs[2], LOG_FILE);
    let ok = halted.status == "halted" && same_scores && same_selection && same_ckpts && same_log;
    l.record(
        10,
        "determinism and resume",
        ok,
        format!(
            "selected {:?}/{:?}/{:?}, {} checkpoints identical: {same_ckpts}, score tables identical: {same_scores}, log identical: {same_log}",
            a.selected_iteration,
            b.selected_iteration,
            c.selected_iteration,
            reference.len()
        ),
    );
}

fn phantom_root() -> (PathBuf, Option<tempfile::TempDir>) {
    match std::env::var_os("BRAINOMALY_ACCEPTANCE_DIR") {
        Some(d) => {
            let p = PathBuf::from(d);
            fs::create_dir_all(&p).unwrap();
            (p, None)
        }
        None => {
            let t = tempfile::tempdir().unwrap();
            (t.path().to_path_buf(), Some(t))
        }
    }
}

fn phantom_experiment() -> AblationReport {
    let (root, _guard) = phantom_root();
    let data = root.join("data");
    if !data.join("dataset.toml").exists() {
        let split = SplitSizes { h_size: 200, m_healthy: 50, m_diseased: 50, holdout_healthy: 25, holdout_diseased: 25 };
        generate_dataset(&PhantomSpec::default(), &split, &data).unwrap();
    }
    let base = ExperimentConfig { dataset: data, output: root.join("unused"), ..ExperimentConfig::default() };
    let start = Instant::now();
    let report = ablate(&base, &[Variant::baseline(), Variant::no_identity(), Variant::direct()], &[0, 1, 2], &root, |v, s| {
        eprintln!("  training {v} seed {s} ({:.0}s elapsed)", start.elapsed().as_secs_f64());
    })
    .unwrap();
    eprintln!("  phantom experiment done in {:.0}s", start.elapsed().as_secs_f64());
    report
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4}"))
}

fn per_seed(report: &AblationReport, variant: &str, stat: impl Fn(&brainomaly::eval::PipelineReport) -> Option<f64>) -> String {
    report.runs_of(variant).map(|r| fmt_opt(stat(&r.report))).collect::<Vec<_>>().join(", ")
}

fn phantom_criteria(l: &mut Ledger, report: &AblationReport) {
    let inductive = |r: &brainomaly::eval::PipelineReport| r.splits.as_ref().map(|s| s.inductive_auc);
    let base = report.median_inductive_auc("baseline");
    l.record(
        5,
        "phantom detection, median holdout AUC >= 0.90",
        base.is_some_and(|v| v >= 0.90),
        format!("median {} (seeds: {})", fmt_opt(base), per_seed(report, "baseline", inductive)),
    );

    let r_aucp = report.median_of("baseline", |r| r.aucp_correlation);
    let r_fid = report.median_of("baseline", |r| r.fid_correlation);
    l.record(
        6,
        "aucp correlates better than fid",
        matches!((r_aucp, r_fid), (Some(a), Some(f)) if a > f),
        format!(
            "median |r| aucp {} vs fid {} (aucp seeds: {}; fid seeds: {})",
            fmt_opt(r_aucp),
            fmt_opt(r_fid),
            per_seed(report, "baseline", |r| r.aucp_correlation),
            per_seed(report, "baseline", |r| r.fid_correlation)
        ),
    );

    let no_id = report.median_inductive_auc("lambda_id_0");
    l.record(
        7,
        "identity loss ablation",
        matches!((base, no_id), (Some(b), Some(n)) if b >= n),
        format!("lambda_id=1 {} vs lambda_id=0 {} (seeds: {})", fmt_opt(base), fmt_opt(no_id), per_seed(report, "lambda_id_0", inductive)),
    );

    let direct = report.median_inductive_auc("direct");
    l.record(
        8,
        "translation mode ablation",
        matches!((base, direct), (Some(b), Some(d)) if b >= d),
        format!("additive {} vs direct {} (seeds: {})", fmt_opt(base), fmt_opt(direct), per_seed(report, "direct", inductive)),
    );

    let gaps: Option<Vec<f64>> = report.runs_of("baseline").map(|r| r.report.splits.as_ref().map(|s| s.gap.abs())).collect();
    let gap = gaps.as_deref().and_then(median);
    l.record(
        9,
        "transductive vs inductive gap <= 0.10",
        gap.is_some_and(|g| g <= 0.10),
        format!(
            "median |gap| {} (transductive: {}; inductive: {})",
            fmt_opt(gap),
            per_seed(report, "baseline", |r| r.splits.as_ref().map(|s| s.transductive_auc)),
            per_seed(report, "baseline", inductive)
        ),
    );
}

fn main() {
    // libtest passes flags such as `--list` or filters; honour `--list` so
    // tooling that enumerates tests does not start the long experiment.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut l = Ledger { failures: 0 };
    metric_oracle(&mut l);
    aucp_soundness(&mut l);
    gradient_penalty_check(&mut l);
    shape_invariants(&mut l);
    determinism(&mut l);
    roc_equivalence(&mut l);
    let report = phantom_experiment();
    phantom_criteria(&mut l, &report);
    println!("{} of 11 criteria passed", 11 - l.failures);
    if l.failures > 0 {
        std::process::exit(1);
    }
}
