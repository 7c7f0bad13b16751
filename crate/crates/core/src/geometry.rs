//! Temporal interval arithmetic: IoU, one-dimensional DIoU and per-query NMS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open interval `[start, end)` on the video time axis, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSegment", into = "RawSegment")]
pub struct TemporalSegment {
    start: f64,
    end: f64,
}

#[derive(Serialize, Deserialize)]
struct RawSegment {
    start: f64,
    end: f64,
}

impl TryFrom<RawSegment> for TemporalSegment {
    type Error = Error;

    fn try_from(raw: RawSegment) -> Result<Self> {
        TemporalSegment::new(raw.start, raw.end)
    }
}

impl From<TemporalSegment> for RawSegment {
    fn from(seg: TemporalSegment) -> Self {
        RawSegment {
            start: seg.start,
            end: seg.end,
        }
    }
}

impl TemporalSegment {
    /// Zero-length and reversed intervals are rejected rather than clamped.
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::InvalidSegment {
                start,
                end,
                reason: "endpoints must be finite",
            });
        }
        if start >= end {
            return Err(Error::InvalidSegment {
                start,
                end,
                reason: "start must be strictly before end",
            });
        }
        Ok(TemporalSegment { start, end })
    }

    /// Validates the segment against a video of known duration.
    pub fn within(start: f64, end: f64, duration: f64) -> Result<Self> {
        let seg = Self::new(start, end)?;
        if start < 0.0 || end > duration {
            return Err(Error::InvalidSegment {
                start,
                end,
                reason: "segment lies outside [0, duration]",
            });
        }
        Ok(seg)
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn intersection(&self, other: &TemporalSegment) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    /// Clamps to `[0, duration]`, returning `None` if nothing remains.
    pub fn clamp_to(&self, duration: f64) -> Option<TemporalSegment> {
        TemporalSegment::new(self.start.max(0.0), self.end.min(duration)).ok()
    }
}

/// One decoded output: a segment, the prompt query it answers, and its confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub segment: TemporalSegment,
    pub query_index: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(segment: TemporalSegment, query_index: usize, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidInput(format!(
                "detection score {score} outside [0, 1]"
            )));
        }
        Ok(Detection {
            segment,
            query_index,
            score,
        })
    }
}

/// Temporal intersection over union.
pub fn temporal_iou(a: &TemporalSegment, b: &TemporalSegment) -> f64 {
    let inter = a.intersection(b);
    let union = a.length() + b.length() - inter;
    inter / union
}

/// One-dimensional distance-IoU loss: `1 - IoU + rho^2 / c^2`, with `rho` the
/// distance between centers and `c` the length of the enclosing interval.
pub fn diou_loss(pred: &TemporalSegment, gt: &TemporalSegment) -> f64 {
    let enclosure = pred.end.max(gt.end) - pred.start.min(gt.start);
    let rho = pred.center() - gt.center();
    1.0 - temporal_iou(pred, gt) + (rho * rho) / (enclosure * enclosure)
}

/// DIoU loss together with its partial derivatives with respect to the
/// predicted start and end. Subgradients at the kinks of `min`/`max` take the
/// branch where the prediction is not the active endpoint.
pub fn diou_loss_with_grad(pred: &TemporalSegment, gt: &TemporalSegment) -> (f64, f64, f64) {
    let (ps, pe, gs, ge) = (pred.start, pred.end, gt.start, gt.end);

    let raw_inter = pe.min(ge) - ps.max(gs);
    let overlapping = raw_inter > 0.0;
    let inter = raw_inter.max(0.0);
    let (di_ds, di_de) = if overlapping {
        (if ps > gs { -1.0 } else { 0.0 }, if pe < ge { 1.0 } else { 0.0 })
    } else {
        (0.0, 0.0)
    };

    let union = (pe - ps) + (ge - gs) - inter;
    let du_ds = -1.0 - di_ds;
    let du_de = 1.0 - di_de;
    let iou = inter / union;
    let diou_ds = (di_ds * union - inter * du_ds) / (union * union);
    let diou_de = (di_de * union - inter * du_de) / (union * union);

    let enclosure = pe.max(ge) - ps.min(gs);
    let dc_ds = if ps < gs { -1.0 } else { 0.0 };
    let dc_de = if pe > ge { 1.0 } else { 0.0 };
    let rho = 0.5 * (ps + pe) - 0.5 * (gs + ge);
    let c2 = enclosure * enclosure;
    let penalty = rho * rho / c2;
    let dpen = |dc: f64| rho / c2 - 2.0 * rho * rho * dc / (c2 * enclosure);

    (
        1.0 - iou + penalty,
        -diou_ds + dpen(dc_ds),
        -diou_de + dpen(dc_de),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmsMode {
    Hard,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NmsConfig {
    pub mode: NmsMode,
    pub iou_threshold: f64,
    pub sigma: f64,
    pub score_floor: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            mode: NmsMode::Hard,
            iou_threshold: 0.6,
            sigma: 0.5,
            score_floor: 0.001,
        }
    }
}

/// Ranking used everywhere detections are ordered: higher score first, then
/// earlier start, then smaller query index.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.segment.start.total_cmp(&b.segment.start))
        .then(a.query_index.cmp(&b.query_index))
}

/// Per-query non-maximum suppression. Detections of different queries never
/// interact.
pub fn soft_nms(dets: &[Detection], config: &NmsConfig) -> Vec<Detection> {
    let mut pending: Vec<Detection> = dets
        .iter()
        .copied()
        .filter(|d| d.score >= config.score_floor)
        .collect();
    let mut kept = Vec::with_capacity(pending.len());

    while !pending.is_empty() {
        let best = (0..pending.len())
            .min_by(|&i, &j| detection_order(&pending[i], &pending[j]))
            .unwrap();
        let top = pending.swap_remove(best);
        kept.push(top);
        pending.retain_mut(|d| {
            if d.query_index != top.query_index {
                return true;
            }
            let iou = temporal_iou(&d.segment, &top.segment);
            match config.mode {
                NmsMode::Hard => iou <= config.iou_threshold,
                NmsMode::Gaussian => {
                    d.score *= (-(iou * iou) / config.sigma).exp();
                    d.score >= config.score_floor
                }
            }
        });
    }

    kept.sort_by(detection_order);
    kept
}
