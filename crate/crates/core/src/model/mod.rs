//! Video-text fusion model: stand-in encoders, cross-modality fusion encoder,
//! temporal pyramid, query-wise pooler, text-guided fusion decoder and the
//! classification/regression heads.

mod checkpoint;
mod config;
pub mod graph;
mod params;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{ModelConfig, PoolingMode};
pub use graph::Graph;
pub use params::{param_specs, Init, ParamSpec, ParamStore};

use crate::autograd::{Matrix, Var};
use crate::error::{Error, Result};
use crate::prompt::StructuredPrompt;

/// Per-frame input features of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoInput {
    features: Matrix,
    duration: f64,
}

impl VideoInput {
    pub fn new(features: Matrix, duration: f64) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::InvalidInput("video has no frames".into()));
        }
        if !(duration.is_finite() && duration > 0.0) {
            return Err(Error::InvalidInput(format!("invalid video duration {duration}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite frame feature".into()));
        }
        Ok(VideoInput { features, duration })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn num_frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn frame_interval(&self) -> f64 {
        self.duration / self.num_frames() as f64
    }

    /// Frame centers in seconds.
    pub fn frame_timestamps(&self) -> Vec<f64> {
        let dt = self.frame_interval();
        (0..self.num_frames()).map(|i| (i as f64 + 0.5) * dt).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Raw,
    Fused,
    Multiscale,
    Decoded,
}

/// Location of one video row on the time axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowMeta {
    /// Center of the row's stride window, seconds.
    pub timestamp: f64,
    /// Window length, seconds.
    pub stride: f64,
    pub level: usize,
}

impl RowMeta {
    /// Stride of the finest level, seconds.
    pub fn base_stride(&self) -> f64 {
        self.stride / (1u64 << self.level) as f64
    }

    /// Segment reached by stride-normalized distances from this row.
    pub fn decode(&self, d_start: f64, d_end: f64) -> (f64, f64) {
        (
            self.timestamp - d_start * self.stride,
            self.timestamp + d_end * self.stride,
        )
    }
}

/// Row metadata for the stacked pyramid of a `frames`-long video.
pub fn multiscale_rows(frames: usize, duration: f64, levels: usize) -> Vec<RowMeta> {
    let dt = duration / frames as f64;
    let mut rows = Vec::new();
    for level in 0..levels {
        let stride_frames = 1usize << level;
        for i in 0..frames.div_ceil(stride_frames) {
            let first = i * stride_frames;
            let last = ((i + 1) * stride_frames).min(frames) - 1;
            let center = 0.5 * ((first as f64 + 0.5) + (last as f64 + 0.5)) * dt;
            rows.push(RowMeta {
                timestamp: center,
                stride: stride_frames as f64 * dt,
                level,
            });
        }
    }
    rows
}

/// A stage-tagged feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Matrix,
    pub modality: Modality,
    pub stage: Stage,
    /// Present on video maps.
    pub rows: Option<Vec<RowMeta>>,
}

impl FeatureMap {
    fn check_finite(&self) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput("feature map holds non-finite values".into()))
        }
    }
}

/// Pooled per-query vectors, aligned with the prompt's queries.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRepresentations {
    pub values: Matrix,
}

/// Head outputs for one video and one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    /// `rows x queries`.
    pub logits: Matrix,
    /// `rows x 2`: stride-normalized distances to start and end.
    pub regressions: Matrix,
    pub rows: Vec<RowMeta>,
    pub duration: f64,
}

impl RawPrediction {
    pub fn segment_at(&self, row: usize) -> (f64, f64) {
        self.rows[row].decode(self.regressions[[row, 0]], self.regressions[[row, 1]])
    }
}

/// Variables produced by a training forward pass.
pub struct ForwardOutput {
    pub logits: Var,
    pub regressions: Var,
    pub rows: Vec<RowMeta>,
}

/// Text tokens of several prompts encoded separately and concatenated, with
/// spans shifted into the joint sequence.
fn joint_text(prompts: &[StructuredPrompt], cfg: &ModelConfig) -> Result<(Vec<usize>, Vec<usize>, Vec<Range<usize>>)> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("at least one prompt is required".into()));
    }
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut spans = Vec::new();
    for p in prompts {
        if p.num_tokens() > cfg.max_text_tokens {
            return Err(Error::TokenBudget {
                budget: cfg.max_text_tokens,
                tokens: p.num_tokens(),
                index: p.num_queries().saturating_sub(1),
                query: p.queries().last().cloned().unwrap_or_default(),
            });
        }
        if let Some(&bad) = p.token_ids().iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside the vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let offset = ids.len();
        ids.extend(p.token_ids().iter().map(|&i| i as usize));
        positions.extend_from_slice(p.positions());
        spans.extend(p.query_spans().iter().map(|s| s.start + offset..s.end + offset));
    }
    Ok((ids, positions, spans))
}

/// Records the full pipeline for `input` against the concatenation of
/// `prompts`. Logit columns follow the prompts' queries in order.
pub fn forward_graph(
    g: &Graph,
    cfg: &ModelConfig,
    input: &VideoInput,
    prompts: &[StructuredPrompt],
) -> Result<ForwardOutput> {
    check_video(cfg, input)?;
    let (ids, positions, spans) = joint_text(prompts, cfg)?;

    let frames = g.constant(input.features().clone());
    let video = graph::encode_video(g, cfg, frames);
    let text = graph::encode_text(g, &ids, &positions);
    let (video, text) = graph::cmfe(g, cfg, video, text);
    let video_ms = graph::fpn(g, cfg, video);
    let queries = graph::qwp(g, cfg, text, &spans);
    let decoded = graph::tgfd(g, cfg, video_ms, queries);
    let (logits, regressions) = graph::heads(g, cfg, decoded, queries);
    Ok(ForwardOutput {
        logits,
        regressions,
        rows: multiscale_rows(input.num_frames(), input.duration(), cfg.fpn_levels),
    })
}

fn check_video(cfg: &ModelConfig, input: &VideoInput) -> Result<()> {
    if input.features().ncols() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "video features have width {}, model expects {}",
            input.features().ncols(),
            cfg.input_dim
        )));
    }
    if input.num_frames() < cfg.min_frames() {
        return Err(Error::TooShort {
            len: input.num_frames(),
            min: cfg.min_frames(),
        });
    }
    Ok(())
}

/// Configuration and parameters of a model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config, rng);
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::new(&self.params)
    }

    pub fn encode_video(&self, input: &VideoInput) -> Result<FeatureMap> {
        if input.features().ncols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "video features have width {}, model expects {}",
                input.features().ncols(),
                self.config.input_dim
            )));
        }
        let g = self.graph();
        let x = g.constant(input.features().clone());
        let out = graph::encode_video(&g, &self.config, x);
        let rows = multiscale_rows(input.num_frames(), input.duration(), 1);
        Ok(FeatureMap {
            values: g.value(out),
            modality: Modality::Video,
            stage: Stage::Raw,
            rows: Some(rows),
        })
    }

    pub fn encode_text(&self, prompt: &StructuredPrompt) -> Result<FeatureMap> {
        let (ids, positions, _) = joint_text(std::slice::from_ref(prompt), &self.config)?;
        let g = self.graph();
        let out = graph::encode_text(&g, &ids, &positions);
        Ok(FeatureMap {
            values: g.value(out),
            modality: Modality::Text,
            stage: Stage::Raw,
            rows: None,
        })
    }

    fn check_width(&self, m: &Matrix, what: &str) -> Result<()> {
        if m.ncols() != self.config.d_model {
            return Err(Error::Shape(format!(
                "{what} has width {}, model width is {}",
                m.ncols(),
                self.config.d_model
            )));
        }
        Ok(())
    }

    pub fn cmfe(&self, video: &FeatureMap, text: &FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
        if video.modality != Modality::Video || text.modality != Modality::Text {
            return Err(Error::Shape("cmfe expects a video map and a text map".into()));
        }
        self.check_width(&video.values, "video map")?;
        self.check_width(&text.values, "text map")?;
        let g = self.graph();
        let v = g.constant(video.values.clone());
        let t = g.constant(text.values.clone());
        let (v, t) = graph::cmfe(&g, &self.config, v, t);
        let video_out = FeatureMap {
            values: g.value(v),
            stage: Stage::Fused,
            ..video.clone()
        };
        let text_out = FeatureMap {
            values: g.value(t),
            stage: Stage::Fused,
            ..text.clone()
        };
        video_out.check_finite()?;
        text_out.check_finite()?;
        Ok((video_out, text_out))
    }

    pub fn fpn(&self, video_fused: &FeatureMap, duration: f64) -> Result<FeatureMap> {
        self.check_width(&video_fused.values, "video map")?;
        let frames = video_fused.values.nrows();
        if frames < self.config.min_frames() {
            return Err(Error::TooShort {
                len: frames,
                min: self.config.min_frames(),
            });
        }
        let g = self.graph();
        let v = g.constant(video_fused.values.clone());
        let out = graph::fpn(&g, &self.config, v);
        Ok(FeatureMap {
            values: g.value(out),
            modality: Modality::Video,
            stage: Stage::Multiscale,
            rows: Some(multiscale_rows(frames, duration, self.config.fpn_levels)),
        })
    }

    pub fn qwp(&self, text_fused: &FeatureMap, spans: &[Range<usize>]) -> Result<QueryRepresentations> {
        self.check_width(&text_fused.values, "text map")?;
        let rows = text_fused.values.nrows();
        if spans.is_empty() {
            return Err(Error::InvalidInput("no query spans".into()));
        }
        if let Some(bad) = spans.iter().find(|s| s.is_empty() || s.end > rows) {
            return Err(Error::InvalidInput(format!(
                "span {bad:?} is empty or outside the {rows}-row text map"
            )));
        }
        let g = self.graph();
        let t = g.constant(text_fused.values.clone());
        let out = graph::qwp(&g, &self.config, t, spans);
        Ok(QueryRepresentations { values: g.value(out) })
    }

    pub fn tgfd(&self, video_ms: &FeatureMap, queries: &QueryRepresentations) -> Result<FeatureMap> {
        self.check_width(&video_ms.values, "video map")?;
        self.check_width(&queries.values, "query representations")?;
        let g = self.graph();
        let v = g.constant(video_ms.values.clone());
        let q = g.constant(queries.values.clone());
        let out = graph::tgfd(&g, &self.config, v, q);
        let decoded = FeatureMap {
            values: g.value(out),
            stage: Stage::Decoded,
            ..video_ms.clone()
        };
        decoded.check_finite()?;
        Ok(decoded)
    }

    pub fn heads(&self, decoded: &FeatureMap, queries: &QueryRepresentations, duration: f64) -> Result<RawPrediction> {
        self.check_width(&decoded.values, "video map")?;
        self.check_width(&queries.values, "query representations")?;
        let rows = decoded
            .rows
            .clone()
            .ok_or_else(|| Error::InvalidInput("decoded map lacks row metadata".into()))?;
        if rows.len() != decoded.values.nrows() {
            return Err(Error::Shape("row metadata does not match the map".into()));
        }
        let g = self.graph();
        let v = g.constant(decoded.values.clone());
        let q = g.constant(queries.values.clone());
        let (logits, regressions) = graph::heads(&g, &self.config, v, q);
        Ok(RawPrediction {
            logits: g.value(logits),
            regressions: g.value(regressions),
            rows,
            duration,
        })
    }

    pub fn forward(&self, input: &VideoInput, prompt: &StructuredPrompt) -> Result<RawPrediction> {
        self.forward_chunked(input, std::slice::from_ref(prompt))
    }

    /// Joint forward over prompts whose text is encoded chunk by chunk and
    /// concatenated before fusion.
    pub fn forward_chunked(&self, input: &VideoInput, prompts: &[StructuredPrompt]) -> Result<RawPrediction> {
        let g = self.graph();
        let out = forward_graph(&g, &self.config, input, prompts)?;
        let prediction = RawPrediction {
            logits: g.value(out.logits),
            regressions: g.value(out.regressions),
            rows: out.rows,
            duration: input.duration(),
        };
        if prediction.logits.iter().chain(prediction.regressions.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("forward pass produced non-finite values".into()));
        }
        Ok(prediction)
    }
}

#[cfg(test)]
mod tests;
