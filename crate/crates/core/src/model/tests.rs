use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::prompt::{build_prompt, HashTokenizer};

fn small_config(d: usize) -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        d_model: d,
        num_heads: 2,
        ffn_multiplier: 2,
        cmfe_layers: 1,
        tgfd_layers: 1,
        vocab_size: 64,
        max_text_tokens: 128,
        init_std: 0.2,
        ..ModelConfig::default()
    }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn video(rng: &mut impl Rng, frames: usize, dim: usize) -> VideoInput {
    VideoInput::new(random_matrix(rng, frames, dim), frames as f64).unwrap()
}

fn prompt(queries: &[&str], vocab: usize) -> StructuredPrompt {
    build_prompt(queries, &HashTokenizer::new(vocab)).unwrap()
}

fn map(values: Matrix, modality: Modality) -> FeatureMap {
    let rows = (modality == Modality::Video).then(|| multiscale_rows(values.nrows(), values.nrows() as f64, 1));
    FeatureMap {
        values,
        modality,
        stage: Stage::Raw,
        rows,
    }
}

/// Zeroes the value path of every attention block and every feed-forward
/// weight, so each residual block reduces to its skip connection.
fn zero_value_and_ffn(model: &mut Model) {
    for (name, m) in model.params_mut().iter_mut() {
        let value_path = [".v.w", ".v.b", ".o.w", ".o.b"].iter().any(|s| name.ends_with(s));
        let ffn = name.contains("_ffn.fc") || name.contains(".ffn.fc");
        if value_path || ffn {
            m.fill(0.0);
        }
    }
}

#[test]
fn encode_video_shapes_and_finiteness() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = ModelConfig {
        input_dim: 5,
        d_model: 16,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, &mut rng).unwrap();
    let out = model.encode_video(&video(&mut rng, 8, 5)).unwrap();
    assert_eq!(out.values.dim(), (8, 16));
    assert!(out.values.iter().all(|v| v.is_finite()));
    assert!(VideoInput::new(Matrix::zeros((0, 5)), 1.0).is_err());
}

#[test]
fn identical_frames_without_mixing_give_identical_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = ModelConfig {
        input_dim: 4,
        d_model: 8,
        video_temporal_mixing: false,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, &mut rng).unwrap();
    let frame = random_matrix(&mut rng, 1, 4);
    let frames = Matrix::from_shape_fn((6, 4), |(_, j)| frame[[0, j]]);
    let out = model.encode_video(&VideoInput::new(frames, 6.0).unwrap()).unwrap();
    for r in 1..6 {
        assert_eq!(out.values.row(r), out.values.row(0));
    }
}

#[test]
fn encode_text_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Model::new(small_config(8), &mut rng).unwrap();
    let p = prompt(&["long jump", "high jump"], 64);
    let out = model.encode_text(&p).unwrap();
    assert_eq!(out.values.dim(), (6, 8));

    let wide = prompt(&["a b c d e f g h i j"; 1], 64);
    let tight = Model::new(ModelConfig { max_text_tokens: 4, ..small_config(8) }, &mut rng).unwrap();
    assert!(matches!(tight.encode_text(&wide), Err(Error::TokenBudget { .. })));
}

#[test]
fn cmfe_preserves_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Model::new(ModelConfig { cmfe_layers: 3, ..small_config(16) }, &mut rng).unwrap();
    let v = map(random_matrix(&mut rng, 8, 16), Modality::Video);
    let t = map(random_matrix(&mut rng, 12, 16), Modality::Text);
    let (vo, to) = model.cmfe(&v, &t).unwrap();
    assert_eq!(vo.values.dim(), (8, 16));
    assert_eq!(to.values.dim(), (12, 16));
    assert!(model.cmfe(&v, &map(random_matrix(&mut rng, 12, 8), Modality::Text)).is_err());
}

#[test]
fn zero_value_and_ffn_weights_make_fusion_the_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = Model::new(
        ModelConfig {
            cmfe_layers: 3,
            tgfd_layers: 6,
            ..small_config(16)
        },
        &mut rng,
    )
    .unwrap();
    zero_value_and_ffn(&mut model);
    let v = map(random_matrix(&mut rng, 16, 16), Modality::Video);
    let t = map(random_matrix(&mut rng, 9, 16), Modality::Text);
    let (vo, to) = model.cmfe(&v, &t).unwrap();
    assert_eq!(vo.values, v.values);
    assert_eq!(to.values, t.values);

    let q = QueryRepresentations {
        values: random_matrix(&mut rng, 3, 16),
    };
    let ms = map(random_matrix(&mut rng, 31, 16), Modality::Video);
    assert_eq!(model.tgfd(&ms, &q).unwrap().values, ms.values);
}

#[test]
fn fpn_row_counts_and_timestamps() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.multiscale_rows(64), 124);
    assert_eq!(cfg.multiscale_rows(16), 31);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Model::new(small_config(8), &mut rng).unwrap();
    let input = video(&mut rng, 16, 6);
    let v = model.encode_video(&input).unwrap();
    let ms = model.fpn(&v, input.duration()).unwrap();
    assert_eq!(ms.values.nrows(), 31);
    let rows = ms.rows.unwrap();
    let level0: Vec<f64> = rows.iter().filter(|r| r.level == 0).map(|r| r.timestamp).collect();
    assert_eq!(level0, input.frame_timestamps());
    // level 2 windows cover frames 4k..4k+3, centered at 4k + 2 seconds
    let level2: Vec<f64> = rows.iter().filter(|r| r.level == 2).map(|r| r.timestamp).collect();
    assert_eq!(level2, vec![2.0, 6.0, 10.0, 14.0]);
    assert!(rows.iter().all(|r| r.stride == (1 << r.level) as f64));

    let short = model.encode_video(&video(&mut rng, 15, 6)).unwrap();
    assert!(matches!(model.fpn(&short, 15.0), Err(Error::TooShort { len: 15, min: 16 })));
}

#[test]
fn odd_lengths_clip_the_last_window() {
    let rows = multiscale_rows(5, 5.0, 2);
    assert_eq!(rows.len(), 8);
    let last = rows.last().unwrap();
    assert_eq!((last.timestamp, last.stride, last.level), (4.5, 2.0, 1));
}

#[test]
fn qwp_pooling_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let text = map(
        Matrix::from_shape_vec((3, 2), vec![1.0, 3.0, 3.0, 5.0, 7.0, -1.0]).unwrap(),
        Modality::Text,
    );
    let avg = Model::new(ModelConfig { d_model: 2, num_heads: 1, ..small_config(2) }, &mut rng).unwrap();
    let q = avg.qwp(&text, &[0..2, 2..3]).unwrap();
    assert_eq!(q.values.row(0).to_vec(), vec![2.0, 4.0]);
    assert_eq!(q.values.row(1).to_vec(), vec![7.0, -1.0]);

    let max = Model::new(
        ModelConfig {
            d_model: 2,
            num_heads: 1,
            pooling: PoolingMode::Max,
            ..small_config(2)
        },
        &mut rng,
    )
    .unwrap();
    assert_eq!(max.qwp(&text, &[0..3]).unwrap().values.row(0).to_vec(), vec![7.0, 5.0]);

    for pooling in [PoolingMode::Average, PoolingMode::Max, PoolingMode::Attentive] {
        let m = Model::new(ModelConfig { pooling, ..small_config(8) }, &mut rng).unwrap();
        let rows = random_matrix(&mut rng, 5, 8);
        let single = m.qwp(&map(rows.clone(), Modality::Text), &[3..4]).unwrap();
        assert_eq!(single.values.row(0), rows.row(3));
        assert!(m.qwp(&map(rows, Modality::Text), &[2..2]).is_err());
    }
}

#[test]
fn heads_orthogonal_rows_give_zero_logit_and_decode() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = Model::new(ModelConfig { d_model: 4, num_heads: 1, ..small_config(4) }, &mut rng).unwrap();
    *model.params_mut().get_mut("head.cls_proj.w").unwrap() = Matrix::eye(4);
    model.params_mut().get_mut("head.cls_bias").unwrap().fill(0.0);
    let v = Matrix::from_shape_vec((1, 4), vec![1.0, -1.0, 0.0, 0.0]).unwrap();
    let q = Matrix::from_shape_vec((1, 4), vec![0.0, 0.0, 1.0, -1.0]).unwrap();
    let decoded = FeatureMap {
        values: v,
        modality: Modality::Video,
        stage: Stage::Decoded,
        rows: Some(vec![RowMeta { timestamp: 10.0, stride: 2.0, level: 1 }]),
    };
    let pred = model.heads(&decoded, &QueryRepresentations { values: q }, 20.0).unwrap();
    assert!(pred.logits[[0, 0]].abs() < 1e-12);
    assert!(pred.regressions.iter().all(|&d| d > 0.0));

    let row = RowMeta { timestamp: 10.0, stride: 2.0, level: 1 };
    assert_eq!(row.decode(1.5, 2.0), (7.0, 14.0));
}

#[test]
fn forward_shape_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for d in [8, 16] {
        let model = Model::new(small_config(d), &mut rng).unwrap();
        for frames in [32, 64, 128, 256] {
            let input = video(&mut rng, frames, 6);
            for lq in [1, 7, 35] {
                let names: Vec<String> = (0..lq).map(|i| format!("query {i}")).collect();
                let names: Vec<&str> = names.iter().map(String::as_str).collect();
                let p = prompt(&names, 64);
                let pred = model.forward(&input, &p).unwrap();
                let rows: usize = (0..5).map(|l| frames.div_ceil(1 << l)).sum();
                assert_eq!(pred.logits.dim(), (rows, lq));
                assert_eq!(pred.regressions.dim(), (rows, 2));
            }
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = Model::new(small_config(8), &mut rng).unwrap();
    let input = video(&mut rng, 64, 6);
    let p = prompt(&["a", "b c", "d e f", "g", "h"], 64);
    let a = model.forward(&input, &p).unwrap();
    let b = model.forward(&input, &p).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.logits.dim(), (124, 5));
}

#[test]
fn text_cannot_reach_regressions_without_fusion() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = Model::new(
        ModelConfig {
            cmfe_enabled: false,
            tgfd_enabled: false,
            ..small_config(8)
        },
        &mut rng,
    )
    .unwrap();
    let input = video(&mut rng, 32, 6);
    let a = model.forward(&input, &prompt(&["long jump", "swim"], 64)).unwrap();
    let b = model.forward(&input, &prompt(&["something else entirely"], 64)).unwrap();
    assert_eq!(a.regressions, b.regressions);

    let full = Model::new(small_config(8), &mut rng).unwrap();
    let a = full.forward(&input, &prompt(&["long jump", "swim"], 64)).unwrap();
    let b = full.forward(&input, &prompt(&["something else entirely"], 64)).unwrap();
    assert_ne!(a.regressions, b.regressions);
}

#[test]
fn chunked_forward_matches_single_prompt() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = Model::new(small_config(8), &mut rng).unwrap();
    let input = video(&mut rng, 32, 6);
    let whole = model.forward(&input, &prompt(&["a b", "c", "d e f"], 64)).unwrap();
    let chunked = model
        .forward_chunked(&input, &[prompt(&["a b"], 64), prompt(&["c", "d e f"], 64)])
        .unwrap();
    assert_eq!(whole, chunked);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = Model::new(small_config(8), &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&path, &model, Some(serde_json::json!({"seed": 3}))).unwrap();
    let (loaded, run) = load_checkpoint(&path, Some(model.config())).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(run.unwrap()["seed"], 3);

    let other = ModelConfig { d_model: 16, ..small_config(16) };
    assert!(matches!(load_checkpoint(&path, Some(&other)), Err(Error::ConfigMismatch(_))));
}

#[test]
fn mismatched_inputs_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = Model::new(small_config(8), &mut rng).unwrap();
    let p = prompt(&["a"], 64);
    assert!(matches!(model.forward(&video(&mut rng, 32, 5), &p), Err(Error::Shape(_))));
    assert!(matches!(model.forward(&video(&mut rng, 8, 6), &p), Err(Error::TooShort { .. })));
    let big_vocab = prompt(&["zebra crossing"], 4096);
    if big_vocab.token_ids().iter().any(|&id| id >= 64) {
        assert!(model.forward(&video(&mut rng, 32, 6), &big_vocab).is_err());
    }
}
