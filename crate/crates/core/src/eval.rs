//! Decoding head outputs into detections, merging chunked-prompt results, and
//! the mAP / Recall@1 metrics.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::error::{Error, Result};
use crate::geometry::{detection_order, soft_nms, temporal_iou, Detection, NmsConfig, TemporalSegment};
use crate::model::RawPrediction;

pub const ACTIVITYNET_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
pub const THUMOS_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
pub const MR_THRESHOLDS: [f64; 2] = [0.5, 0.7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// tIoU thresholds for mAP, strictly increasing in (0, 1].
    pub iou_thresholds: Vec<f64>,
    /// tIoU thresholds for Recall@1.
    pub recall_thresholds: Vec<f64>,
    pub score_floor: f64,
    /// Candidates kept per query before NMS.
    pub top_k: usize,
    /// Queries per evaluation prompt.
    pub chunk_size: usize,
    pub nms: NmsConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: ACTIVITYNET_THRESHOLDS.to_vec(),
            recall_thresholds: MR_THRESHOLDS.to_vec(),
            score_floor: 0.001,
            top_k: 200,
            chunk_size: 35,
            nms: NmsConfig::default(),
        }
    }
}

fn check_thresholds(ts: &[f64], name: &str) -> Result<()> {
    let increasing = ts.windows(2).all(|w| w[0] < w[1]);
    if ts.is_empty() || !increasing || ts.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::Config(format!(
            "{name} must be nonempty, strictly increasing and within (0, 1]"
        )));
    }
    Ok(())
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        check_thresholds(&self.iou_thresholds, "iou_thresholds")?;
        check_thresholds(&self.recall_thresholds, "recall_thresholds")?;
        if self.top_k == 0 || self.chunk_size == 0 {
            return Err(Error::Config("top_k and chunk_size must be positive".into()));
        }
        Ok(())
    }
}

/// Scores every (row, query) pair, drops those under the floor, decodes and
/// clamps segments, keeps the `top_k` best per query and applies NMS per query.
pub fn decode_detections(prediction: &RawPrediction, config: &EvalConfig) -> Vec<Detection> {
    let (rows, queries) = prediction.logits.dim();
    let mut out = Vec::new();
    for q in 0..queries {
        let mut cands: Vec<Detection> = (0..rows)
            .filter_map(|r| {
                let score = sigmoid(prediction.logits[[r, q]]);
                if !(score >= config.score_floor) {
                    return None;
                }
                let (s, e) = prediction.segment_at(r);
                let segment = TemporalSegment::new(s, e).ok()?.clamp_to(prediction.duration)?;
                Some(Detection {
                    segment,
                    query_index: q,
                    score,
                })
            })
            .collect();
        cands.sort_by(detection_order);
        cands.truncate(config.top_k);
        out.extend(soft_nms(&cands, &config.nms));
    }
    out.sort_by(detection_order);
    out
}

/// Detections of one evaluation chunk, indexed within the chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkDetections {
    /// Global index of the chunk's first query.
    pub offset: usize,
    pub num_queries: usize,
    pub detections: Vec<Detection>,
}

/// Shifts each chunk's query indices to global indices and concatenates, with
/// no suppression across chunks.
pub fn merge_chunked(chunks: &[ChunkDetections]) -> Result<Vec<Detection>> {
    let mut ranges: Vec<(usize, usize)> = chunks.iter().map(|c| (c.offset, c.offset + c.num_queries)).collect();
    ranges.sort_unstable();
    if let Some(w) = ranges.windows(2).find(|w| w[1].0 < w[0].1) {
        return Err(Error::InvalidInput(format!(
            "chunk query ranges {:?} and {:?} overlap",
            w[0], w[1]
        )));
    }
    let mut out = Vec::new();
    for c in chunks {
        for d in &c.detections {
            if d.query_index >= c.num_queries {
                return Err(Error::InvalidInput(format!(
                    "detection query {} outside a chunk of {} queries",
                    d.query_index, c.num_queries
                )));
            }
            out.push(Detection {
                query_index: d.query_index + c.offset,
                ..*d
            });
        }
    }
    out.sort_by(detection_order);
    Ok(out)
}

/// A detection tagged with the video it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoDetection {
    pub video_id: String,
    pub detection: Detection,
}

/// Ground-truth `(segment, class)` pairs per video. Videos without ground
/// truth must still be present so their detections count as false positives.
pub type GroundTruthMap = BTreeMap<String, Vec<(TemporalSegment, usize)>>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdScore {
    pub threshold: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapReport {
    /// mAP at each threshold, averaged over classes with ground truth.
    pub per_threshold: Vec<ThresholdScore>,
    /// Mean of `per_threshold`.
    pub average: f64,
    /// AP per class at each threshold, in threshold order.
    pub per_class: BTreeMap<usize, Vec<f64>>,
}

impl MapReport {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.per_threshold.iter().find(|t| t.threshold == threshold).map(|t| t.value)
    }
}

fn ranked(a: &VideoDetection, b: &VideoDetection) -> Ordering {
    detection_order(&a.detection, &b.detection).then_with(|| a.video_id.cmp(&b.video_id))
}

/// 101-point interpolated AP of a ranked list of true/false positive flags.
fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while k < recall.len() && recall[k] < level {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    sum / 101.0
}

/// Greedy matching in descending score order: each detection takes the
/// unmatched ground truth of its video and class with the highest tIoU at or
/// above `threshold` (ties to the earlier ground truth).
fn class_ap(dets: &[&VideoDetection], gts: &BTreeMap<&str, Vec<TemporalSegment>>, num_gt: usize, threshold: f64) -> f64 {
    let mut used: BTreeMap<&str, Vec<bool>> = gts.iter().map(|(v, g)| (*v, vec![false; g.len()])).collect();
    let tp: Vec<bool> = dets
        .iter()
        .map(|d| {
            let Some(cands) = gts.get(d.video_id.as_str()) else {
                return false;
            };
            let flags = used.get_mut(d.video_id.as_str()).unwrap();
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in cands.iter().enumerate() {
                let iou = temporal_iou(&d.detection.segment, g);
                if !flags[j] && iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    flags[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    interpolated_ap(&tp, num_gt)
}

/// mAP per threshold with global score pooling per class. Classes without
/// ground truth are excluded; with no ground truth at all every value is 0.
pub fn mean_average_precision(dets: &[VideoDetection], gts: &GroundTruthMap, thresholds: &[f64]) -> Result<MapReport> {
    if let Some(d) = dets.iter().find(|d| !gts.contains_key(&d.video_id)) {
        return Err(Error::InvalidInput(format!("detection references unknown video {:?}", d.video_id)));
    }
    let classes: Vec<usize> = gts
        .values()
        .flatten()
        .map(|&(_, c)| c)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let per_class: BTreeMap<usize, Vec<f64>> = classes
        .par_iter()
        .map(|&c| {
            let mut class_dets: Vec<&VideoDetection> = dets.iter().filter(|d| d.detection.query_index == c).collect();
            class_dets.sort_by(|a, b| ranked(a, b));
            let mut class_gts: BTreeMap<&str, Vec<TemporalSegment>> = BTreeMap::new();
            for (v, list) in gts {
                let segs: Vec<TemporalSegment> = list.iter().filter(|(_, k)| *k == c).map(|(s, _)| *s).collect();
                if !segs.is_empty() {
                    class_gts.insert(v.as_str(), segs);
                }
            }
            let num_gt = class_gts.values().map(Vec::len).sum();
            let aps = thresholds.iter().map(|&t| class_ap(&class_dets, &class_gts, num_gt, t)).collect();
            (c, aps)
        })
        .collect();

    let per_threshold: Vec<ThresholdScore> = thresholds
        .iter()
        .enumerate()
        .map(|(i, &threshold)| {
            let value = if per_class.is_empty() {
                0.0
            } else {
                per_class.values().map(|aps| aps[i]).sum::<f64>() / per_class.len() as f64
            };
            ThresholdScore { threshold, value }
        })
        .collect();
    let average = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().map(|t| t.value).sum::<f64>() / per_threshold.len() as f64
    };
    Ok(MapReport {
        per_threshold,
        average,
        per_class,
    })
}

/// Fraction of `(video, query)` pairs whose highest-scored detection reaches
/// each tIoU threshold. Pairs without any detection count as misses.
pub fn recall_at_1(
    dets: &[VideoDetection],
    gts: &BTreeMap<(String, usize), TemporalSegment>,
    thresholds: &[f64],
) -> Result<Vec<ThresholdScore>> {
    let mut top: BTreeMap<(&str, usize), &VideoDetection> = BTreeMap::new();
    for d in dets {
        let key = (d.video_id.as_str(), d.detection.query_index);
        if !gts.contains_key(&(d.video_id.clone(), d.detection.query_index)) {
            return Err(Error::InvalidInput(format!(
                "no ground truth for video {:?} query {}",
                key.0, key.1
            )));
        }
        let slot = top.entry(key).or_insert(d);
        if detection_order(&d.detection, &slot.detection) == Ordering::Less {
            *slot = d;
        }
    }
    let total = gts.len().max(1) as f64;
    Ok(thresholds
        .iter()
        .map(|&threshold| {
            let hits = gts
                .iter()
                .filter(|((v, q), g)| {
                    top.get(&(v.as_str(), *q))
                        .is_some_and(|d| temporal_iou(&d.detection.segment, g) >= threshold)
                })
                .count();
            ThresholdScore {
                threshold,
                value: hits as f64 / total,
            }
        })
        .collect())
}
