use std::fs;
use std::path::Path;

use brainomaly::eval::{run_pipeline, ExperimentConfig, PipelineReport, REPORT_FILE, SELECTION_FILE};
use brainomaly::phantom::{generate_dataset, PhantomSpec, SplitSizes};
use brainomaly::training::{TrainOptions, TrainingConfig, CONFIG_FILE, LOG_FILE};

fn tiny(root: &Path) -> ExperimentConfig {
    let data = root.join("data");
    let spec = PhantomSpec { image_size: 16, slices_per_subject: 2, seed: 5, ..PhantomSpec::default() };
    let split = SplitSizes { h_size: 4, m_healthy: 2, m_diseased: 2, holdout_healthy: 2, holdout_diseased: 2 };
    generate_dataset(&spec, &split, &data).unwrap();
    let mut training = TrainingConfig::desk();
    training.total_iterations = 8;
    training.checkpoint_interval = 4;
    training.batch_size = 2;
    training.critic.downsamplings = 4;
    training.generator.residual_blocks = 1;
    ExperimentConfig { dataset: data, output: root.join("run"), training, diffmap_subjects: 1, ..ExperimentConfig::default() }
}

#[test]
fn pipeline_writes_run_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let report = run_pipeline(&cfg, TrainOptions::default()).unwrap();
    assert!(report.is_complete());
    assert_eq!(report.checkpoints.iter().map(|c| c.iteration).collect::<Vec<_>>(), vec![4, 8]);
    assert!(report.splits.is_some());

    let run = &cfg.output;
    for f in [CONFIG_FILE, LOG_FILE, REPORT_FILE, SELECTION_FILE, "scores_mixed.csv", "scores_holdout.csv", "roc_mixed.dat", "roc_holdout.dat"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    for it in [4, 8] {
        let dir = run.join("checkpoints").join(format!("iter_{it}"));
        for f in ["generator.tensors", "discriminator.tensors", "optimizer.tensors", "state.json"] {
            assert!(dir.join(f).is_file(), "missing iter_{it}/{f}");
        }
    }
    assert!(!run.join(".lock").exists());
    assert_eq!(PipelineReport::read(&run.join(REPORT_FILE)).unwrap(), report);

    let roc = fs::read_to_string(run.join("roc_holdout.dat")).unwrap();
    for line in roc.lines() {
        let cols: Vec<f64> = line.split_whitespace().map(|v| v.parse().unwrap()).collect();
        assert_eq!(cols.len(), 2);
    }
    let log = fs::read_to_string(run.join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 1 + 8);

    let maps: Vec<_> = fs::read_dir(run.join("diffmaps")).unwrap().collect();
    assert_eq!(maps.len(), 1);
}

#[test]
fn failed_stage_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    fs::write(cfg.dataset.join("manifest.csv"), "subject_id,split,label\nnobody,M,1\n").unwrap();
    assert!(run_pipeline(&cfg, TrainOptions::default()).is_err());
    let report = PipelineReport::read(&cfg.output.join(REPORT_FILE)).unwrap();
    assert_eq!(report.status, "failed");
    assert_eq!(report.failed_stage.as_deref(), Some("labels"));
    // Training finished before the labels were read.
    assert!(cfg.output.join("checkpoints/iter_8").is_dir());
}

#[test]
fn completed_run_is_not_retrained() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    run_pipeline(&cfg, TrainOptions::default()).unwrap();
    let log = fs::read(cfg.output.join(LOG_FILE)).unwrap();
    let again = run_pipeline(&cfg, TrainOptions::default()).unwrap();
    assert!(again.is_complete());
    assert_eq!(fs::read(cfg.output.join(LOG_FILE)).unwrap(), log);
}
