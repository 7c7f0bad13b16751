//! Target assignment and the training objective: per-logit sigmoid focal loss
//! plus DIoU regression on positive rows, normalized by the positive count.

use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, Matrix};
use crate::error::{Error, Result};
use crate::geometry::{diou_loss_with_grad, TemporalSegment};
use crate::model::{RawPrediction, RowMeta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the regression term.
    pub lambda: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Radius of the positive region around a segment center, in strides.
    pub center_sampling_radius: f64,
    /// Per pyramid level `[min, max)` of the largest regression distance, in
    /// units of the finest stride.
    pub regression_ranges: Vec<[f64; 2]>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            center_sampling_radius: 1.5,
            regression_ranges: vec![[0.0, 4.0], [4.0, 8.0], [8.0, 16.0], [16.0, 32.0], [32.0, 1e12]],
        }
    }
}

impl LossConfig {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.regression_ranges.len() < levels {
            return Err(Error::Config(format!(
                "{} regression ranges configured for {levels} pyramid levels",
                self.regression_ranges.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config("focal_alpha must lie in [0, 1]; gamma and lambda must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Classification and regression targets for every multiscale row.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    /// `rows x queries`, entries 0 or 1.
    pub cls_targets: Matrix,
    /// Stride-normalized `(d_start, d_end)` on positive rows.
    pub reg_targets: Vec<Option<(f64, f64)>>,
    pub positive_mask: Vec<bool>,
    pub positive_count: usize,
}

/// Center sampling with per-level regression ranges; a row claimed by several
/// ground truths goes to the shortest one (ties: smaller query index, then
/// earlier ground truth).
pub fn assign_targets(
    rows: &[RowMeta],
    gts: &[(TemporalSegment, usize)],
    num_queries: usize,
    config: &LossConfig,
) -> Result<TargetAssignment> {
    if let Some((_, q)) = gts.iter().find(|(_, q)| *q >= num_queries) {
        return Err(Error::InvalidInput(format!(
            "ground truth references query {q} but the prompt has {num_queries}"
        )));
    }
    let mut cls_targets = Matrix::zeros((rows.len(), num_queries));
    let mut reg_targets = vec![None; rows.len()];
    let mut positive_mask = vec![false; rows.len()];

    for (r, row) in rows.iter().enumerate() {
        let Some(&[lo, hi]) = config.regression_ranges.get(row.level) else {
            continue;
        };
        let ts = row.timestamp;
        let mut best: Option<(f64, usize, usize)> = None;
        for (gi, (seg, q)) in gts.iter().enumerate() {
            let left = ts - seg.start();
            let right = seg.end() - ts;
            if left <= 0.0 || right <= 0.0 {
                continue;
            }
            if (ts - seg.center()).abs() >= config.center_sampling_radius * row.stride {
                continue;
            }
            let reach = left.max(right) / row.base_stride();
            if reach < lo || reach >= hi {
                continue;
            }
            let key = (seg.length(), *q, gi);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
        if let Some((_, q, gi)) = best {
            let seg = gts[gi].0;
            cls_targets[[r, q]] = 1.0;
            reg_targets[r] = Some(((ts - seg.start()) / row.stride, (seg.end() - ts) / row.stride));
            positive_mask[r] = true;
        }
    }
    let positive_count = positive_mask.iter().filter(|&&p| p).count();
    Ok(TargetAssignment {
        cls_targets,
        reg_targets,
        positive_mask,
        positive_count,
    })
}

/// Sigmoid focal loss of one logit and its derivative.
pub fn focal_term(logit: f64, target: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = crate::autograd::sigmoid(logit);
    if target {
        let log_p = -softplus(-logit);
        let w = (1.0 - p).powf(gamma);
        (-alpha * w * log_p, alpha * w * (gamma * p * log_p - (1.0 - p)))
    } else {
        let log_q = -softplus(logit);
        let w = p.powf(gamma);
        (-(1.0 - alpha) * w * log_q, (1.0 - alpha) * w * (p - gamma * (1.0 - p) * log_q))
    }
}

/// Focal loss summed over every (row, query) logit, with its gradient.
pub fn focal_contrastive_loss_with_grad(logits: &Matrix, cls_targets: &Matrix, config: &LossConfig) -> Result<(f64, Matrix)> {
    if logits.dim() != cls_targets.dim() {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            logits.dim(),
            cls_targets.dim()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite logit".into()));
    }
    let mut grad = Matrix::zeros(logits.dim());
    let mut total = 0.0;
    for ((g, &x), &y) in grad.iter_mut().zip(logits.iter()).zip(cls_targets.iter()) {
        let (l, d) = focal_term(x, y > 0.5, config.focal_alpha, config.focal_gamma);
        total += l;
        *g = d;
    }
    Ok((total, grad))
}

pub fn focal_contrastive_loss(logits: &Matrix, cls_targets: &Matrix, config: &LossConfig) -> Result<f64> {
    focal_contrastive_loss_with_grad(logits, cls_targets, config).map(|(l, _)| l)
}

/// DIoU summed over positive rows, with its gradient w.r.t. the distances.
pub fn regression_loss_with_grad(
    regressions: &Matrix,
    rows: &[RowMeta],
    assignment: &TargetAssignment,
) -> Result<(f64, Matrix)> {
    if regressions.dim() != (rows.len(), 2) || assignment.positive_mask.len() != rows.len() {
        return Err(Error::Shape(format!(
            "regressions {:?} for {} rows and {} targets",
            regressions.dim(),
            rows.len(),
            assignment.positive_mask.len()
        )));
    }
    let mut grad = Matrix::zeros(regressions.dim());
    let mut total = 0.0;
    for (r, row) in rows.iter().enumerate() {
        if !assignment.positive_mask[r] {
            continue;
        }
        let (ts, te) = assignment.reg_targets[r]
            .ok_or_else(|| Error::InvalidInput(format!("positive row {r} has no regression target")))?;
        let (ps, pe) = row.decode(regressions[[r, 0]], regressions[[r, 1]]);
        let (gs, ge) = row.decode(ts, te);
        let pred = TemporalSegment::new(ps, pe)?;
        let gt = TemporalSegment::new(gs, ge)?;
        let (l, d_ps, d_pe) = diou_loss_with_grad(&pred, &gt);
        total += l;
        grad[[r, 0]] = -row.stride * d_ps;
        grad[[r, 1]] = row.stride * d_pe;
    }
    Ok((total, grad))
}

pub fn regression_loss(regressions: &Matrix, rows: &[RowMeta], assignment: &TargetAssignment) -> Result<f64> {
    regression_loss_with_grad(regressions, rows, assignment).map(|(l, _)| l)
}

/// Unnormalized loss terms and the normalizer of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub regression: f64,
    pub positives: usize,
    /// `(classification + lambda * regression) / max(positives, 1)`.
    pub total: f64,
}

/// Loss terms with gradients of the *unnormalized* sum
/// `classification + lambda * regression` w.r.t. logits and regressions.
pub struct LossGradients {
    pub breakdown: LossBreakdown,
    pub d_logits: Matrix,
    pub d_regressions: Matrix,
}

pub fn total_loss_with_grad(
    prediction: &RawPrediction,
    assignment: &TargetAssignment,
    config: &LossConfig,
) -> Result<LossGradients> {
    let (cls, d_logits) = focal_contrastive_loss_with_grad(&prediction.logits, &assignment.cls_targets, config)?;
    let (reg, d_reg) = regression_loss_with_grad(&prediction.regressions, &prediction.rows, assignment)?;
    let norm = assignment.positive_count.max(1) as f64;
    Ok(LossGradients {
        breakdown: LossBreakdown {
            classification: cls,
            regression: reg,
            positives: assignment.positive_count,
            total: (cls + config.lambda * reg) / norm,
        },
        d_logits,
        d_regressions: d_reg * config.lambda,
    })
}

pub fn total_loss(prediction: &RawPrediction, assignment: &TargetAssignment, config: &LossConfig) -> Result<LossBreakdown> {
    total_loss_with_grad(prediction, assignment, config).map(|g| g.breakdown)
}
