#![allow(dead_code)]

use std::collections::BTreeMap;

use owmd::autograd::Matrix;
use owmd::geometry::TemporalSegment;
use owmd::harness::loss_and_gradients;
use owmd::loss::{assign_targets, total_loss, LossConfig, TargetAssignment};
use owmd::model::{Model, ModelConfig, PoolingMode, VideoInput};
use owmd::prompt::{build_prompt, HashTokenizer, StructuredPrompt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error with a floor on the denominator so that two vanishing
/// gradients compare equal.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// A loss instance: model, one video, one prompt and fixed targets.
pub struct Instance {
    pub model: Model,
    pub input: VideoInput,
    pub prompt: StructuredPrompt,
    pub assignment: TargetAssignment,
    pub loss: LossConfig,
}

pub fn grad_config(pooling: PoolingMode) -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        d_model: 8,
        num_heads: 2,
        ffn_multiplier: 2,
        cmfe_layers: 1,
        tgfd_layers: 1,
        vocab_size: 64,
        max_text_tokens: 32,
        init_std: 0.3,
        pooling,
        ..ModelConfig::default()
    }
}

/// 16 frames over 16 s with a 3-query prompt; two queries have ground truth.
pub fn instance(config: ModelConfig, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(config.clone(), &mut rng).unwrap();
    let features = Matrix::from_shape_fn((16, config.input_dim), |_| rng.random_range(-1.0..1.0));
    let input = VideoInput::new(features, 16.0).unwrap();
    let tokenizer = HashTokenizer::new(config.vocab_size);
    let prompt = build_prompt(&["long jump", "run", "swim in a pool"], &tokenizer).unwrap();
    let loss = LossConfig::default();
    let rows = owmd::model::multiscale_rows(16, 16.0, config.fpn_levels);
    let gts = [
        (TemporalSegment::new(2.0, 5.0).unwrap(), 0),
        (TemporalSegment::new(6.0, 15.0).unwrap(), 2),
        (TemporalSegment::new(9.0, 11.0).unwrap(), 0),
    ];
    let assignment = assign_targets(&rows, &gts, 3, &loss).unwrap();
    assert!(assignment.positive_count > 0);
    Instance {
        model,
        input,
        prompt,
        assignment,
        loss,
    }
}

impl Instance {
    pub fn loss_value(&self, model: &Model) -> f64 {
        let pred = model.forward(&self.input, &self.prompt).unwrap();
        total_loss(&pred, &self.assignment, &self.loss).unwrap().total
    }

    pub fn analytic(&self) -> BTreeMap<String, Matrix> {
        let scale = 1.0 / self.assignment.positive_count.max(1) as f64;
        loss_and_gradients(&self.model, &self.loss, &self.input, &self.prompt, &self.assignment, scale)
            .unwrap()
            .1
    }
}

/// Worst relative error per parameter tensor between analytic gradients and
/// central differences over every entry of the tensors selected by `filter`.
pub fn check_gradients(inst: &Instance, h: f64, floor: f64, filter: impl Fn(&str) -> bool) -> BTreeMap<String, f64> {
    let analytic = inst.analytic();
    let mut worst = BTreeMap::new();
    let mut model = inst.model.clone();
    let names: Vec<String> = model.params().names().filter(|n| filter(n)).cloned().collect();
    for name in names {
        let shape = model.params().get(&name).unwrap().dim();
        let g = analytic.get(&name).cloned().unwrap_or_else(|| Matrix::zeros(shape));
        let mut max_err: f64 = 0.0;
        for (r, c) in ndarray::indices(shape) {
            let orig = model.params().get(&name).unwrap()[[r, c]];
            model.params_mut().get_mut(&name).unwrap()[[r, c]] = orig + h;
            let plus = inst.loss_value(&model);
            model.params_mut().get_mut(&name).unwrap()[[r, c]] = orig - h;
            let minus = inst.loss_value(&model);
            model.params_mut().get_mut(&name).unwrap()[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_err = max_err.max(rel_err(g[[r, c]], numeric, floor));
        }
        worst.insert(name, max_err);
    }
    worst
}
