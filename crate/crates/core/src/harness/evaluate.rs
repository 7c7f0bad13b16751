use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Task};
use crate::error::{Error, Result};
use crate::eval::{
    decode_detections, mean_average_precision, merge_chunked, recall_at_1, ChunkDetections, EvalConfig, GroundTruthMap,
    ThresholdScore, VideoDetection,
};
use crate::geometry::Detection;
use crate::model::{Model, RawPrediction, VideoInput};
use crate::prompt::{chunk_eval_prompts, HashTokenizer};

/// Line of the detection JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video_id: String,
    pub query_index: usize,
    pub query: String,
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

impl DetectionRecord {
    fn new(video_id: &str, queries: &[String], d: &Detection) -> Self {
        DetectionRecord {
            video_id: video_id.to_owned(),
            query_index: d.query_index,
            query: queries[d.query_index].clone(),
            start: d.segment.start(),
            end: d.segment.end(),
            score: d.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TadReport {
    pub per_threshold: Vec<ThresholdScore>,
    pub average: f64,
    /// AP per category at each threshold.
    pub per_class: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Configuration that produced the evaluated weights, when known.
    pub run_config: Option<serde_json::Value>,
    pub eval_config: EvalConfig,
    pub num_videos: usize,
    pub num_categories: usize,
    #[serde(flatten)]
    pub tad: Option<TadReport>,
    pub mr_recall_at_1: Option<Vec<ThresholdScore>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub detections: Vec<DetectionRecord>,
}

/// Scores `queries` against one video: the queries are packed into prompts of
/// at most `chunk_size`, run jointly, decoded per chunk and merged back into
/// global query indices.
pub fn detect(model: &Model, input: &VideoInput, queries: &[String], config: &EvalConfig) -> Result<Vec<Detection>> {
    let mut seen = HashSet::new();
    if let Some(dup) = queries.iter().find(|q| !seen.insert(q.trim())) {
        return Err(Error::InvalidInput(format!("query {dup:?} appears more than once")));
    }
    let tokenizer = HashTokenizer::new(model.config().vocab_size);
    let prompts = chunk_eval_prompts(queries, &tokenizer, config.chunk_size, model.config().max_text_tokens)?;
    let joint = model.forward_chunked(input, &prompts)?;

    let mut chunks = Vec::with_capacity(prompts.len());
    let mut offset = 0;
    for p in &prompts {
        let n = p.num_queries();
        let part = RawPrediction {
            logits: joint.logits.slice(ndarray::s![.., offset..offset + n]).to_owned(),
            regressions: joint.regressions.clone(),
            rows: joint.rows.clone(),
            duration: joint.duration,
        };
        chunks.push(ChunkDetections {
            offset,
            num_queries: n,
            detections: decode_detections(&part, config),
        });
        offset += n;
    }
    merge_chunked(&chunks)
}

/// Runs detection over a dataset and scores it: mAP over `categories` for
/// TAD annotations, Recall@1 over each video's own queries for MR
/// annotations. Without `categories` the dataset's TAD queries are used.
pub fn evaluate(model: &Model, dataset: &Dataset, categories: Option<&[String]>, config: &EvalConfig) -> Result<EvalOutput> {
    config.validate()?;
    let categories: Vec<String> = match categories {
        Some([]) => return Err(Error::InvalidInput("the category list is empty".into())),
        Some(c) => c.iter().map(|q| q.trim().to_owned()).collect(),
        None => dataset.queries(Some(Task::Tad)),
    };
    let has_mr = dataset.has_task(Task::Mr);
    let run_tad = dataset.has_task(Task::Tad) || (!has_mr && !categories.is_empty());
    if run_tad && categories.is_empty() {
        return Err(Error::InvalidInput("no categories to evaluate".into()));
    }
    let class_of: BTreeMap<&str, usize> = categories.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();

    struct VideoResult {
        tad: Vec<Detection>,
        mr_queries: Vec<String>,
        mr: Vec<Detection>,
    }
    let results: Vec<VideoResult> = dataset
        .samples
        .par_iter()
        .map(|s| {
            s.validate()?;
            let input = s.video_input(&dataset.base_dir)?;
            let tad = if run_tad {
                detect(model, &input, &categories, config)?
            } else {
                Vec::new()
            };
            let mut seen = HashSet::new();
            let mr_queries: Vec<String> = s
                .annotations
                .iter()
                .filter(|a| a.task == Task::Mr)
                .map(|a| a.query.trim().to_owned())
                .filter(|q| seen.insert(q.clone()))
                .collect();
            let mr = if mr_queries.is_empty() {
                Vec::new()
            } else {
                detect(model, &input, &mr_queries, config)?
            };
            Ok(VideoResult { tad, mr_queries, mr })
        })
        .collect::<Result<_>>()?;

    let mut detections = Vec::new();
    let mut tad_dets = Vec::new();
    let mut mr_dets = Vec::new();
    let mut gts: GroundTruthMap = BTreeMap::new();
    let mut mr_gts = BTreeMap::new();
    for (s, r) in dataset.samples.iter().zip(&results) {
        let list = gts.entry(s.video_id.clone()).or_default();
        for a in s.annotations.iter().filter(|a| a.task == Task::Tad) {
            let class = class_of.get(a.query.trim()).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "video {}: annotation query {:?} is not in the category list",
                    s.video_id, a.query
                ))
            })?;
            list.push((a.segment, *class));
        }
        for a in s.annotations.iter().filter(|a| a.task == Task::Mr) {
            let qi = r.mr_queries.iter().position(|q| q == a.query.trim()).unwrap();
            // one ground truth per (video, query): the first annotation wins
            mr_gts.entry((s.video_id.clone(), qi)).or_insert(a.segment);
        }
        for d in &r.tad {
            detections.push(DetectionRecord::new(&s.video_id, &categories, d));
            tad_dets.push(VideoDetection {
                video_id: s.video_id.clone(),
                detection: *d,
            });
        }
        for d in &r.mr {
            detections.push(DetectionRecord::new(&s.video_id, &r.mr_queries, d));
            mr_dets.push(VideoDetection {
                video_id: s.video_id.clone(),
                detection: *d,
            });
        }
    }

    let tad = if run_tad {
        let m = mean_average_precision(&tad_dets, &gts, &config.iou_thresholds)?;
        Some(TadReport {
            per_threshold: m.per_threshold,
            average: m.average,
            per_class: m.per_class.into_iter().map(|(c, aps)| (categories[c].clone(), aps)).collect(),
        })
    } else {
        None
    };
    let mr_recall_at_1 = if has_mr {
        Some(recall_at_1(&mr_dets, &mr_gts, &config.recall_thresholds)?)
    } else {
        None
    };
    Ok(EvalOutput {
        report: EvalReport {
            run_config: None,
            eval_config: config.clone(),
            num_videos: dataset.len(),
            num_categories: categories.len(),
            tad,
            mr_recall_at_1,
        },
        detections,
    })
}

pub fn write_detections(path: &Path, detections: &[DetectionRecord]) -> Result<()> {
    let mut out = Vec::new();
    for d in detections {
        serde_json::to_writer(&mut out, d)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
