use super::*;
use crate::data::{synth_dataset, Dataset, SynthSpec, Task};
use crate::model::{load_checkpoint, ModelConfig};

fn tiny_spec(videos: usize) -> SynthSpec {
    SynthSpec {
        num_videos: videos,
        duration_range: [16.0, 24.0],
        vocab: ["walk", "run fast", "jump", "swim"].map(String::from).to_vec(),
        noise: 0.1,
        feature_dim: 6,
        segment_frames: [3, 8],
        segments_per_video: [1, 2],
        ..SynthSpec::default()
    }
}

fn tiny_config() -> RunConfig {
    RunConfig {
        batch_size: 2,
        model: ModelConfig {
            input_dim: 6,
            d_model: 8,
            num_heads: 2,
            ffn_multiplier: 2,
            cmfe_layers: 1,
            tgfd_layers: 1,
            vocab_size: 128,
            max_text_tokens: 64,
            ..ModelConfig::default()
        },
        schedule: ScheduleConfig {
            epochs: 3,
            warmup_epochs: 1,
            ..ScheduleConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_writes_artifacts() {
    let data = Dataset::in_memory(synth_dataset(&tiny_spec(5), 1).unwrap());
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let a = train(
        &cfg,
        &data,
        &TrainOptions {
            out_dir: Some(dir.path()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let b = train(&cfg, &data, &TrainOptions::default()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
    assert_eq!(a.steps, 9);

    let (log, final_ckpt, best_ckpt) = artifact_paths(dir.path());
    let lines: Vec<LogRecord> = std::fs::read_to_string(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, a.log);
    let (restored, run_config) = load_checkpoint(&final_ckpt, Some(&cfg.model)).unwrap();
    assert_eq!(restored, a.model);
    assert_eq!(run_config.unwrap(), cfg.to_json());
    assert!(best_ckpt.exists());

    let LogRecord::Step { learning_rate, .. } = a.log[0] else {
        panic!("first record is a step");
    };
    assert_eq!(learning_rate, 0.0);
}

#[test]
fn empty_dataset_rejected() {
    assert!(train(&tiny_config(), &Dataset::in_memory(vec![]), &TrainOptions::default()).is_err());
}

#[test]
fn diverging_run_aborts_with_diagnostics() {
    let data = Dataset::in_memory(synth_dataset(&tiny_spec(2), 1).unwrap());
    let mut cfg = tiny_config();
    cfg.optimizer.learning_rate = 1e300;
    cfg.optimizer.grad_clip = 0.0;
    cfg.schedule.warmup_epochs = 0;
    match train(&cfg, &data, &TrainOptions::default()) {
        Err(crate::Error::Diverged { detail, .. }) => assert!(detail.contains("non-finite"), "{detail}"),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn checkpoint_round_trip_gives_identical_reports() {
    let data = Dataset::in_memory(synth_dataset(&tiny_spec(4), 2).unwrap());
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        &cfg,
        &data,
        &TrainOptions {
            out_dir: Some(dir.path()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let before = evaluate(&out.model, &data, None, &cfg.eval).unwrap();
    let (model, _) = load_checkpoint(&dir.path().join("final.json"), None).unwrap();
    let after = evaluate(&model, &data, None, &cfg.eval).unwrap();
    assert_eq!(before, after);
}

#[test]
fn tad_and_mr_share_one_forward() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let cfg = tiny_config();
    let model = crate::model::Model::new(cfg.model.clone(), &mut rng).unwrap();
    let mut tad = synth_dataset(&tiny_spec(1), 4).unwrap();
    let mut mr = tad.clone();
    for a in &mut mr[0].annotations {
        a.task = Task::Mr;
    }
    // TAD categories equal to the video's own queries, in the same order
    let queries = Dataset::in_memory(tad.clone()).queries(None);
    tad[0].annotations.sort_by_key(|a| queries.iter().position(|q| *q == a.query));
    let t = evaluate(&model, &Dataset::in_memory(tad), Some(&queries), &cfg.eval).unwrap();
    let m = evaluate(&model, &Dataset::in_memory(mr), None, &cfg.eval).unwrap();
    assert!(!t.detections.is_empty());
    assert_eq!(t.detections, m.detections);
    assert!(t.report.tad.is_some() && t.report.mr_recall_at_1.is_none());
    assert!(m.report.tad.is_none() && m.report.mr_recall_at_1.is_some());
}

#[test]
fn evaluate_rejects_bad_category_lists() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let cfg = tiny_config();
    let model = crate::model::Model::new(cfg.model.clone(), &mut rng).unwrap();
    let data = Dataset::in_memory(synth_dataset(&tiny_spec(2), 4).unwrap());
    assert!(evaluate(&model, &data, Some(&[]), &cfg.eval).is_err());
    let missing = vec!["walk".to_string()];
    assert!(evaluate(&model, &data, Some(&missing), &cfg.eval).is_err());
}

#[test]
fn detect_rejects_duplicate_queries() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let cfg = tiny_config();
    let model = crate::model::Model::new(cfg.model.clone(), &mut rng).unwrap();
    let data = synth_dataset(&tiny_spec(1), 4).unwrap();
    let input = data[0].video_input(std::path::Path::new(".")).unwrap();
    let q = vec!["walk".to_string(), " walk".to_string()];
    assert!(detect(&model, &input, &q, &cfg.eval).is_err());
}

#[test]
fn single_sample_is_memorized() {
    let data = Dataset::in_memory(synth_dataset(&tiny_spec(1), 5).unwrap());
    let mut cfg = tiny_config();
    cfg.batch_size = 1;
    cfg.model.d_model = 16;
    cfg.optimizer.learning_rate = 1e-2;
    cfg.optimizer.weight_decay = 0.0;
    cfg.schedule = ScheduleConfig {
        epochs: 500,
        warmup_epochs: 5,
        decay: Decay::Cosine,
    };
    let out = train(&cfg, &data, &TrainOptions::default()).unwrap();
    assert_eq!(out.steps, 500);
    let last = *out.epoch_losses().last().unwrap();
    assert!(last < 0.01, "final loss {last}");
}
