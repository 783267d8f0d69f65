//! End-to-end behaviour of the staged training procedure on small data.

use saeda::eval::{alignment_diagnostic, classification_metrics};
use saeda::model::{load_model, HeadKind};
use saeda::pipeline::{
    build_model_for, num_classes, predict, prepare_stage1_data, run_full_pipeline, train_stage1_autoencoders,
    train_stage2_classifier, train_stage3_finetune, CwsGradient, EpochRecord, NoLog, PipelineData, RunOptions, Stage,
};
use saeda::{generate_paired, AdaptationModel, Dataset, DatasetConfig, Error, HeadOutput, PairedData, Task, TrainingConfig};

fn small(task: Task, seed: u64) -> PairedData {
    let base = match task {
        Task::Classification => DatasetConfig::default(),
        Task::Regression => DatasetConfig::regression(),
    };
    generate_paired(&DatasetConfig {
        samples_per_class_source: 24,
        samples_per_class_target_labeled: 6,
        samples_per_class_target_unlabeled: 12,
        seed,
        ..base
    })
    .unwrap()
}

fn quick() -> TrainingConfig {
    TrainingConfig {
        autoencoder_max_epochs: Some(2),
        max_epochs_per_stage: 4,
        ..TrainingConfig::default()
    }
}

fn data(d: &PairedData) -> PipelineData<'_> {
    PipelineData {
        source: &d.source,
        target_labeled: &d.target_labeled,
        target_unlabeled: &d.target_unlabeled,
    }
}

fn fresh(d: &PairedData, task: Task, cfg: &TrainingConfig) -> AdaptationModel {
    let c = num_classes(&d.source, &d.target_labeled).unwrap();
    build_model_for(&d.source, &d.target_labeled, task, c, cfg).unwrap()
}

fn after_stage1(d: &PairedData, cfg: &TrainingConfig) -> AdaptationModel {
    let mut m = fresh(d, Task::Classification, cfg);
    let (s, t) = prepare_stage1_data(&d.source, &d.target_labeled, cfg.seed).unwrap();
    train_stage1_autoencoders(&mut m, &s, &t, cfg, &mut NoLog).unwrap();
    m
}

fn blocks(m: &AdaptationModel) -> Vec<Vec<u32>> {
    [
        m.source_ae().encoder_params(),
        m.source_ae().decoder_params(),
        m.target_ae().encoder_params(),
        m.target_ae().decoder_params(),
    ]
    .iter()
    .map(|b| b.iter().map(|v| v.to_bits()).collect())
    .collect()
}

#[test]
fn same_seed_gives_identical_runs() {
    let d = small(Task::Classification, 3);
    let run = || run_full_pipeline(data(&d), Task::Classification, &quick(), &RunOptions::default(), &mut NoLog).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.model, b.model);
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(
        a.reports.iter().map(|r| &r.loss_history).collect::<Vec<_>>(),
        b.reports.iter().map(|r| &r.loss_history).collect::<Vec<_>>()
    );
}

#[test]
fn epoch_records_match_reports() {
    let d = small(Task::Classification, 0);
    let mut log: Vec<EpochRecord> = Vec::new();
    let out = run_full_pipeline(data(&d), Task::Classification, &quick(), &RunOptions::default(), &mut log).unwrap();
    for r in &out.reports {
        assert_eq!(r.loss_history.len(), r.epochs_run);
        let logged: Vec<f64> = log
            .iter()
            .filter(|e| e.stage == r.stage.number())
            .map(|e| e.loss)
            .collect();
        assert_eq!(logged, r.loss_history);
        assert_eq!(r.final_loss, r.loss_history.last().copied());
    }
    let keys: Vec<&str> = log[0].parts.keys().map(String::as_str).collect();
    assert_eq!(keys, ["cws_mmd", "source_reconstruction", "target_loss", "target_reconstruction"]);
    for e in log.iter().filter(|e| e.stage == 1) {
        let total = e.parts["source_reconstruction"] + e.parts["target_loss"];
        assert!((e.loss - total).abs() < 1e-9);
        let target = e.parts["target_reconstruction"] + 0.25 * e.parts["cws_mmd"];
        assert!((e.parts["target_loss"] - target).abs() < 1e-9);
    }
}

#[test]
fn zero_beta_logs_target_loss_equal_to_reconstruction() {
    let d = small(Task::Classification, 0);
    let mut cfg = quick();
    cfg.loss.beta = 0.0;
    let mut log: Vec<EpochRecord> = Vec::new();
    let opts = RunOptions {
        stop_after: Some(Stage::Autoencoders),
        ..RunOptions::default()
    };
    run_full_pipeline(data(&d), Task::Classification, &cfg, &opts, &mut log).unwrap();
    assert!(!log.is_empty());
    for e in &log {
        assert_eq!(e.parts["target_loss"], e.parts["target_reconstruction"]);
    }
}

#[test]
fn zero_epochs_report_nothing_run() {
    let d = small(Task::Classification, 0);
    let cfg = TrainingConfig {
        autoencoder_max_epochs: Some(0),
        ..quick()
    };
    let mut m = fresh(&d, Task::Classification, &cfg);
    let before = blocks(&m);
    let (s, t) = prepare_stage1_data(&d.source, &d.target_labeled, 0).unwrap();
    let r = train_stage1_autoencoders(&mut m, &s, &t, &cfg, &mut NoLog).unwrap();
    assert_eq!(r.epochs_run, 0);
    assert!(!r.converged);
    assert!(r.final_loss.is_none());
    assert_eq!(blocks(&m), before);
}

#[test]
fn stage1_leaves_the_head_alone_and_trains_both_autoencoders() {
    let d = small(Task::Classification, 1);
    let cfg = quick();
    let m0 = fresh(&d, Task::Classification, &cfg);
    let m1 = after_stage1(&d, &cfg);
    assert_eq!(m0.head().params(), m1.head().params());
    let (b0, b1) = (blocks(&m0), blocks(&m1));
    assert!(b0.iter().zip(&b1).all(|(a, b)| a != b));
}

#[test]
fn target_only_alignment_spares_the_source_encoder() {
    let d = small(Task::Classification, 2);
    let mut no_align = quick();
    no_align.loss.beta = 0.0;
    let target_only = TrainingConfig {
        cws_gradient: CwsGradient::TargetOnly,
        ..quick()
    };
    let both = quick();
    let (a, b, c) = (after_stage1(&d, &no_align), after_stage1(&d, &target_only), after_stage1(&d, &both));
    assert_eq!(blocks(&a)[0], blocks(&b)[0], "source encoder must ignore the alignment term");
    assert_ne!(blocks(&b)[2], blocks(&a)[2], "target encoder must feel the alignment term");
    assert_ne!(blocks(&c)[0], blocks(&a)[0]);
}

#[test]
fn stage1_loss_trend_is_downward() {
    let d = small(Task::Classification, 0);
    let cfg = TrainingConfig {
        autoencoder_max_epochs: Some(12),
        ..quick()
    };
    let mut m = fresh(&d, Task::Classification, &cfg);
    let (s, t) = prepare_stage1_data(&d.source, &d.target_labeled, 0).unwrap();
    let r = train_stage1_autoencoders(&mut m, &s, &t, &cfg, &mut NoLog).unwrap();
    for w in r.loss_history.windows(5) {
        assert!(w[4] <= w[0], "loss rose across a 5-epoch window: {w:?}");
    }
}

#[test]
fn stage1_reduces_class_wise_discrepancy() {
    // Untrained bottlenecks sit near zero and the raw discrepancy grows with
    // feature scale, so compare it against the mismatched-class discrepancy.
    let d = generate_paired(&DatasetConfig::default()).unwrap();
    let cfg = TrainingConfig {
        autoencoder_max_epochs: Some(2),
        ..TrainingConfig::default()
    };
    let ratio = |m: &AdaptationModel| alignment_diagnostic(m, &d.source, &d.target_labeled).unwrap().ratio();
    let before = ratio(&fresh(&d, Task::Classification, &cfg));
    let after = ratio(&after_stage1(&d, &cfg));
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn identical_domains_without_alignment_train_alike() {
    let d = small(Task::Classification, 0);
    let twin = Dataset {
        split: saeda::Split::TargetLabeled,
        ..d.source.clone()
    };
    let mut cfg = quick();
    cfg.loss.beta = 0.0;
    cfg.autoencoder_max_epochs = Some(4);
    let c = num_classes(&d.source, &twin).unwrap();
    let mut m = build_model_for(&d.source, &twin, Task::Classification, c, &cfg).unwrap();
    let mut log: Vec<EpochRecord> = Vec::new();
    train_stage1_autoencoders(&mut m, &d.source, &twin, &cfg, &mut log).unwrap();
    let last = log.last().unwrap();
    let (ls, lr) = (last.parts["source_reconstruction"], last.parts["target_reconstruction"]);
    assert!((ls - lr).abs() / ls < 0.05, "source {ls} vs target {lr}");
}

#[test]
fn head_stages_freeze_the_autoencoders() {
    let d = small(Task::Classification, 4);
    let cfg = quick();
    let mut m = after_stage1(&d, &cfg);
    let frozen = blocks(&m);
    train_stage2_classifier(&mut m, &d.source, &cfg, &mut NoLog).unwrap();
    assert_eq!(blocks(&m), frozen);
    let head2 = m.head().params().to_vec();
    train_stage3_finetune(&mut m, &d.target_labeled, &cfg, &mut NoLog).unwrap();
    assert_eq!(blocks(&m), frozen);
    assert_ne!(m.head().params(), head2.as_slice());
}

#[test]
fn stages_must_run_in_order() {
    let d = small(Task::Classification, 0);
    let cfg = quick();
    let mut m = fresh(&d, Task::Classification, &cfg);
    assert!(matches!(
        train_stage2_classifier(&mut m, &d.source, &cfg, &mut NoLog),
        Err(Error::StageOrder(_))
    ));
    assert!(matches!(
        train_stage3_finetune(&mut m, &d.target_labeled, &cfg, &mut NoLog),
        Err(Error::StageOrder(_))
    ));
    assert!(matches!(predict(&m, &d.target_unlabeled), Err(Error::StageOrder(_))));
    let mut m = after_stage1(&d, &cfg);
    assert!(matches!(
        train_stage3_finetune(&mut m, &d.target_labeled, &cfg, &mut NoLog),
        Err(Error::StageOrder(_))
    ));
}

#[test]
fn finetuning_needs_every_class() {
    let d = small(Task::Classification, 0);
    let cfg = quick();
    let mut m = after_stage1(&d, &cfg);
    train_stage2_classifier(&mut m, &d.source, &cfg, &mut NoLog).unwrap();
    let labels = d.target_labeled.labels().unwrap();
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 2).collect();
    let partial = d.target_labeled.select(&keep);
    assert!(matches!(
        train_stage3_finetune(&mut m, &partial, &cfg, &mut NoLog),
        Err(Error::MissingClass { class: 2, .. })
    ));
}

#[test]
fn separable_features_are_learned_by_the_classifier() {
    let d = generate_paired(&DatasetConfig {
        samples_per_class_source: 24,
        samples_per_class_target_labeled: 6,
        samples_per_class_target_unlabeled: 6,
        noise_sigma_source: 0.0,
        noise_sigma_target: 0.0,
        latent_jitter: 0.0,
        ..DatasetConfig::default()
    })
    .unwrap();
    let cfg = TrainingConfig {
        autoencoder_max_epochs: Some(1),
        learning_rate: 1e-3,
        ..TrainingConfig::default()
    };
    let mut m = after_stage1(&d, &cfg);
    train_stage2_classifier(&mut m, &d.source, &cfg, &mut NoLog).unwrap();
    let HeadOutput::Classes { labels, .. } = m.forward_source(&d.source.samples).unwrap() else {
        panic!("classifier expected")
    };
    let (acc, _) = classification_metrics(d.source.labels().unwrap(), &labels, 4).unwrap();
    assert!(acc >= 0.99, "training accuracy {acc}");
}

#[test]
fn finetuning_on_a_copy_of_the_source_domain_keeps_accuracy() {
    // One source-domain pool split three ways: source, labeled "target", held out.
    let d = generate_paired(&DatasetConfig {
        samples_per_class_source: 60,
        samples_per_class_target_labeled: 1,
        samples_per_class_target_unlabeled: 1,
        noise_sigma_source: 0.0,
        latent_jitter: 0.0,
        seed: 8,
        ..DatasetConfig::default()
    })
    .unwrap();
    let labels = d.source.labels().unwrap().to_vec();
    let part = |range: std::ops::Range<usize>, split: saeda::Split| {
        let keep: Vec<usize> = (0..4)
            .flat_map(|k| {
                let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
                members[range.clone()].to_vec()
            })
            .collect();
        Dataset {
            split,
            ..d.source.select(&keep)
        }
    };
    let twin = PairedData {
        source: part(0..24, saeda::Split::Source),
        target_labeled: part(24..30, saeda::Split::TargetLabeled),
        ..d.clone()
    };
    let held_out = part(30..60, saeda::Split::TargetUnlabeled);
    let cfg = TrainingConfig {
        autoencoder_max_epochs: Some(5),
        learning_rate: 1e-3,
        ..TrainingConfig::default()
    };
    let accuracy = |out: HeadOutput| {
        let HeadOutput::Classes { labels, .. } = out else {
            panic!("classifier expected")
        };
        classification_metrics(held_out.labels().unwrap(), &labels, 4).unwrap().0
    };

    let mut m = fresh(&twin, Task::Classification, &cfg);
    let (s, t) = prepare_stage1_data(&twin.source, &twin.target_labeled, cfg.seed).unwrap();
    train_stage1_autoencoders(&mut m, &s, &t, &cfg, &mut NoLog).unwrap();
    train_stage2_classifier(&mut m, &twin.source, &cfg, &mut NoLog).unwrap();
    let stage2 = accuracy(m.forward_source(&held_out.samples).unwrap());
    assert!(stage2 >= 0.9, "source-trained accuracy {stage2}");
    train_stage3_finetune(&mut m, &twin.target_labeled, &cfg, &mut NoLog).unwrap();
    let stage3 = accuracy(m.forward_target(&held_out.samples).unwrap());
    assert!(stage3 >= stage2 - 0.02, "fine-tuned {stage3} vs source-trained {stage2}");
}

#[test]
fn prediction_ignores_batch_partitioning() {
    let d = small(Task::Classification, 5);
    let out = run_full_pipeline(data(&d), Task::Classification, &quick(), &RunOptions::default(), &mut NoLog).unwrap();
    let whole = out.predictions.unwrap();
    let HeadOutput::Classes { labels, probabilities } = &whole else {
        panic!("classifier expected")
    };
    for row in probabilities.iter_rows() {
        assert!((row.iter().map(|&p| f64::from(p)).sum::<f64>() - 1.0).abs() < 1e-6);
    }
    for i in 0..d.target_unlabeled.len() {
        let one = predict(&out.model, &d.target_unlabeled.select(&[i])).unwrap();
        let HeadOutput::Classes { labels: l1, probabilities: p1 } = one else {
            panic!("classifier expected")
        };
        assert_eq!(l1[0], labels[i]);
        assert_eq!(p1.row(0), probabilities.row(i));
    }
}

#[test]
fn regression_uses_a_linear_regressor() {
    let d = small(Task::Regression, 0);
    let out = run_full_pipeline(data(&d), Task::Regression, &quick(), &RunOptions::default(), &mut NoLog).unwrap();
    assert_eq!(out.model.head().kind(), HeadKind::LinearRegressor);
    let Some(HeadOutput::Values(v)) = out.predictions else {
        panic!("regressor expected")
    };
    assert_eq!(v.len(), d.target_unlabeled.len());
    assert!(v.iter().all(|x| x.is_finite()));
}

#[test]
fn regression_without_targets_is_rejected() {
    let mut d = small(Task::Regression, 0);
    d.target_labeled.targets = None;
    let err = run_full_pipeline(data(&d), Task::Regression, &quick(), &RunOptions::default(), &mut NoLog).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)));
}

#[test]
fn skipping_finetune_still_predicts() {
    let d = small(Task::Classification, 0);
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        skip_stage3: true,
        ..RunOptions::default()
    };
    let out = run_full_pipeline(data(&d), Task::Classification, &quick(), &opts, &mut NoLog).unwrap();
    assert_eq!(out.reports.len(), 2);
    assert!(out.predictions.is_some());
    let saved = load_model(dir.path().join("stage3")).unwrap();
    assert!(saved.stages().finetune_skipped && !saved.stages().finetune);
}

#[test]
fn resuming_checks_its_checkpoints() {
    let d = small(Task::Classification, 0);
    let cfg = quick();
    let no_dir = RunOptions {
        resume_from: Some(Stage::Classifier),
        ..RunOptions::default()
    };
    assert!(matches!(
        run_full_pipeline(data(&d), Task::Classification, &cfg, &no_dir, &mut NoLog),
        Err(Error::InvalidConfig(_))
    ));

    let dir = tempfile::tempdir().unwrap();
    let stage1_only = RunOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        stop_after: Some(Stage::Autoencoders),
        ..RunOptions::default()
    };
    run_full_pipeline(data(&d), Task::Classification, &cfg, &stage1_only, &mut NoLog).unwrap();

    let skip_ahead = RunOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        resume_from: Some(Stage::Finetune),
        ..RunOptions::default()
    };
    assert!(run_full_pipeline(data(&d), Task::Classification, &cfg, &skip_ahead, &mut NoLog).is_err());

    let wrong_task = RunOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        resume_from: Some(Stage::Classifier),
        ..RunOptions::default()
    };
    let r = small(Task::Regression, 0);
    assert!(matches!(
        run_full_pipeline(data(&r), Task::Regression, &cfg, &wrong_task, &mut NoLog),
        Err(Error::KindMismatch { .. } | Error::ShapeMismatch(_))
    ));

    let params = dir.path().join("stage1").join("params.f32");
    let mut bytes = std::fs::read(&params).unwrap();
    bytes[100] ^= 0x40;
    std::fs::write(&params, bytes).unwrap();
    assert!(matches!(
        run_full_pipeline(data(&d), Task::Classification, &cfg, &wrong_task, &mut NoLog),
        Err(Error::HashMismatch(_))
    ));
}

#[test]
fn one_sided_class_fails_before_training() {
    let d = small(Task::Classification, 0);
    let labels = d.target_labeled.labels().unwrap();
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
    let partial = d.target_labeled.select(&keep);
    let err = run_full_pipeline(
        PipelineData {
            target_labeled: &partial,
            ..data(&d)
        },
        Task::Classification,
        &quick(),
        &RunOptions::default(),
        &mut NoLog,
    );
    assert!(err.is_err());
}
