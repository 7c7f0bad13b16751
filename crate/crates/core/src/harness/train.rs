use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::evaluate::evaluate;
use super::optim::{clip_global_norm, AdamW};
use crate::autograd::Matrix;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{assign_targets, total_loss_with_grad, LossBreakdown, LossConfig, TargetAssignment};
use crate::model::{forward_graph, multiscale_rows, save_checkpoint, Model, RawPrediction, RowMeta, VideoInput};
use crate::prompt::{sample_training_prompt, HashTokenizer, LabeledQuery, StructuredPrompt};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        learning_rate: f64,
        loss: f64,
        classification: f64,
        regression: f64,
        positives: usize,
        grad_norm: f64,
    },
    Epoch {
        epoch: usize,
        mean_loss: f64,
        steps: usize,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        validation_map: Option<f64>,
    },
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    /// Directory for the log and checkpoints; nothing is written without it.
    pub out_dir: Option<&'a Path>,
    /// Scored with mAP at the first configured threshold after every
    /// `validate_every` epochs; the best epoch is checkpointed.
    pub validation: Option<&'a Dataset>,
    pub validate_every: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRecord>,
    pub best_epoch: usize,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.log
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch { mean_loss, .. } => Some(*mean_loss),
                _ => None,
            })
            .collect()
    }
}

struct Prepared {
    input: VideoInput,
    positives: Vec<LabeledQuery>,
    negatives: Vec<String>,
    rows: Vec<RowMeta>,
}

fn negative_pool(config: &RunConfig, dataset: &Dataset) -> Result<Vec<String>> {
    let Some(path) = &config.prompt.negative_pool_path else {
        return Ok(dataset.queries(None));
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|q| !q.is_empty() && seen.insert(*q))
        .map(str::to_owned)
        .collect())
}

fn prepare(config: &RunConfig, dataset: &Dataset) -> Result<Vec<Prepared>> {
    let pool = negative_pool(config, dataset)?;
    dataset
        .samples
        .iter()
        .map(|s| {
            s.validate()?;
            let input = s.video_input(&dataset.base_dir)?;
            let positives = s.labeled_queries();
            let own: HashSet<&str> = positives.iter().map(|p| p.query.as_str()).collect();
            let negatives = pool.iter().filter(|q| !own.contains(q.as_str())).cloned().collect();
            let rows = multiscale_rows(input.num_frames(), input.duration(), config.model.fpn_levels);
            Ok(Prepared {
                input,
                positives,
                negatives,
                rows,
            })
        })
        .collect()
}

/// Loss terms of one sample and the parameter gradients of
/// `scale * (classification + lambda * regression)`. Passing
/// `1 / max(positives, 1)` as `scale` gives the gradient of the normalized loss.
pub fn loss_and_gradients(
    model: &Model,
    loss: &LossConfig,
    input: &VideoInput,
    prompt: &StructuredPrompt,
    assignment: &TargetAssignment,
    scale: f64,
) -> Result<(LossBreakdown, BTreeMap<String, Matrix>)> {
    let g = model.graph();
    let out = forward_graph(&g, model.config(), input, std::slice::from_ref(prompt))?;
    let prediction = RawPrediction {
        logits: g.value(out.logits),
        regressions: g.value(out.regressions),
        rows: out.rows,
        duration: input.duration(),
    };
    let bad = |m: &Matrix| m.iter().filter(|v| !v.is_finite()).count();
    let (bad_logits, bad_regs) = (bad(&prediction.logits), bad(&prediction.regressions));
    if bad_logits + bad_regs > 0 {
        return Err(Error::Diverged {
            step: 0,
            detail: format!("forward pass produced {bad_logits} non-finite logits and {bad_regs} non-finite regressions"),
        });
    }
    let lg = total_loss_with_grad(&prediction, assignment, loss)?;
    let grads = g.tape.backward(&[
        (out.logits, lg.d_logits * scale),
        (out.regressions, lg.d_regressions * scale),
    ]);
    Ok((lg.breakdown, g.param_grads(&grads)))
}

fn write_log(file: &mut Option<fs::File>, path: &Path, record: &LogRecord) -> Result<()> {
    if let Some(f) = file {
        let line = serde_json::to_string(record)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Trains a fresh model. Samples are visited in a seeded shuffled order each
/// epoch; each gets a freshly sampled prompt of its positives plus negatives.
/// Batch gradients are computed per sample in parallel and summed in sample
/// order, so results do not depend on the thread count.
pub fn train(config: &RunConfig, dataset: &Dataset, options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let prepared = prepare(config, dataset)?;
    let tokenizer = HashTokenizer::new(config.model.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::new(config.model.clone(), &mut rng)?;
    let mut optimizer = AdamW::new(config.optimizer.clone());

    let log_path = options.out_dir.map(|d| d.join("train_log.jsonl")).unwrap_or_default();
    let mut log_file = match options.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?)
        }
        None => None,
    };
    let run_json = config.to_json();
    let checkpoint = |model: &Model, name: &str| -> Result<()> {
        match options.out_dir {
            Some(dir) => save_checkpoint(&dir.join(name), model, Some(run_json.clone())),
            None => Ok(()),
        }
    };

    let steps_per_epoch = prepared.len().div_ceil(config.batch_size);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    let mut best: Option<(f64, usize)> = None;

    for epoch in 0..config.schedule.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut work = Vec::with_capacity(batch.len());
            for &i in batch {
                let p = &prepared[i];
                let (prompt, labels) =
                    sample_training_prompt(&p.positives, &p.negatives, config.prompt.cap, &tokenizer, &mut rng)?;
                let assignment = assign_targets(&p.rows, &labels.ground_truths(), prompt.num_queries(), &config.loss)?;
                work.push((&p.input, prompt, assignment));
            }
            let positives: usize = work.iter().map(|(_, _, a)| a.positive_count).sum();
            let scale = 1.0 / positives.max(1) as f64;

            let results: Vec<(LossBreakdown, BTreeMap<String, Matrix>)> = work
                .par_iter()
                .map(|(input, prompt, assignment)| loss_and_gradients(&model, &config.loss, input, prompt, assignment, scale))
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::Diverged { detail, .. } => Error::Diverged { step, detail },
                    other => other,
                })?;

            let mut grads: BTreeMap<String, Matrix> = BTreeMap::new();
            let (mut cls, mut reg) = (0.0, 0.0);
            for (b, g) in results {
                cls += b.classification;
                reg += b.regression;
                for (name, m) in g {
                    match grads.get_mut(&name) {
                        Some(acc) => *acc += &m,
                        None => {
                            grads.insert(name, m);
                        }
                    }
                }
            }
            let loss = (cls + config.loss.lambda * reg) * scale;
            let grad_norm = clip_global_norm(&mut grads, config.optimizer.grad_clip);
            if !loss.is_finite() || !grad_norm.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!(
                        "epoch {epoch}: loss {loss} (classification {cls}, regression {reg}), gradient norm {grad_norm}"
                    ),
                });
            }
            let lr = config
                .schedule
                .learning_rate(config.optimizer.learning_rate, step, steps_per_epoch);
            optimizer.step(model.params_mut(), &grads, lr);

            let record = LogRecord::Step {
                step,
                epoch,
                learning_rate: lr,
                loss,
                classification: cls * scale,
                regression: reg * scale,
                positives,
                grad_norm,
            };
            write_log(&mut log_file, &log_path, &record)?;
            log.push(record);
            epoch_loss += loss;
            step += 1;
        }

        let mean_loss = epoch_loss / steps_per_epoch as f64;
        let validation_map = match options.validation {
            Some(val) if options.validate_every > 0 && (epoch + 1) % options.validate_every == 0 => {
                let out = evaluate(&model, val, None, &config.eval)?;
                Some(out.report.tad.as_ref().map_or(0.0, |t| t.per_threshold[0].value))
            }
            _ => None,
        };
        // higher validation mAP is better; otherwise lower training loss
        let score = validation_map.map_or(-mean_loss, |m| m);
        if validation_map.is_some() || options.validation.is_none() {
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, epoch));
                checkpoint(&model, "best.json")?;
            }
        }
        let record = LogRecord::Epoch {
            epoch,
            mean_loss,
            steps: steps_per_epoch,
            validation_map,
        };
        write_log(&mut log_file, &log_path, &record)?;
        log.push(record);
    }
    checkpoint(&model, "final.json")?;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: best.map_or(config.schedule.epochs - 1, |(_, e)| e),
        steps: step,
    })
}

/// Paths of the artifacts `train` writes into its output directory.
pub fn artifact_paths(out_dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        out_dir.join("train_log.jsonl"),
        out_dir.join("final.json"),
        out_dir.join("best.json"),
    )
}
