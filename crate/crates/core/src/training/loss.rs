//! Alignment, regression and total losses.

use crate::error::{Error, Result};
use crate::eval::interval_iou;
use crate::localizer::{raw_refined, units_to_seconds, Candidate};
use crate::numeric::{smooth_l1, Graph, Tensor, Var};

/// Scores are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the logarithms.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub aln: f64,
    pub reg: f64,
    pub total: f64,
    pub best: usize,
}

/// Per-sample supervision derived from the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// IoU of every unrefined candidate with the ground truth.
    pub ious: Vec<f64>,
    /// Highest-IoU candidate; ties go to the smallest index.
    pub best: usize,
    /// Ground truth in unit coordinates with an inclusive end, matching
    /// `t + d`.
    pub gt_units: (f64, f64),
}

/// Ground truth seconds to unit coordinates: `(ξs·T/D, ξe·T/D − 1)`.
pub fn gt_units(moment: (f64, f64), duration: f64, t: usize) -> (f64, f64) {
    let per = t as f64 / duration;
    (moment.0 * per, moment.1 * per - 1.0)
}

pub fn targets(candidates: &[Candidate], moment: (f64, f64), duration: f64, t: usize) -> Result<Targets> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidates to supervise".into()));
    }
    let mut ious = Vec::with_capacity(candidates.len());
    for c in candidates {
        let span = units_to_seconds((c.start as f64, c.end as f64), t, duration);
        ious.push(interval_iou(span, moment)?);
    }
    let mut best = 0;
    for (k, &v) in ious.iter().enumerate() {
        if v > ious[best] {
            best = k;
        }
    }
    Ok(Targets {
        ious,
        best,
        gt_units: gt_units(moment, duration, t),
    })
}

/// Mean soft-target binary cross-entropy of `r` against IoU targets.
pub fn alignment_loss(g: &mut Graph, r: Var, iou: &[f64]) -> Result<Var> {
    if iou.is_empty() {
        return Err(Error::Config("alignment loss needs at least one candidate".into()));
    }
    g.soft_bce(r, iou, BCE_EPS)
}

/// Smooth-L1 distance between the best candidate's refined boundary
/// `t + d` and the ground truth, both in units. The refined boundary is
/// taken before clamping so the loss keeps a gradient at the edges.
pub fn regression_loss(
    g: &mut Graph,
    d_start: Var,
    d_end: Var,
    best: &Candidate,
    k: usize,
    gt: (f64, f64),
) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    for (d, t0, target) in [(d_start, best.start, gt.0), (d_end, best.end, gt.1)] {
        let dk = g.index(d, k)?;
        let t0 = g.constant(Tensor::scalar(t0 as f64));
        let xi = g.add(t0, dk)?;
        let target = g.constant(Tensor::scalar(target));
        let diff = g.sub(target, xi)?;
        terms.push(g.smooth_l1(diff));
    }
    g.add(terms[0], terms[1])
}

pub fn total_loss(g: &mut Graph, aln: Var, reg: Var, alpha: f64) -> Result<Var> {
    let weighted = g.scale(reg, alpha);
    g.add(aln, weighted)
}

/// Plain-value alignment loss, identical in arithmetic to the graph op.
pub fn alignment_loss_value(r: &[f64], iou: &[f64]) -> Result<f64> {
    if r.is_empty() {
        return Err(Error::Config("alignment loss needs at least one candidate".into()));
    }
    let mut g = Graph::new();
    let rv = g.constant(Tensor::vector(r.to_vec())?);
    let l = alignment_loss(&mut g, rv, iou)?;
    Ok(g.value(l).item())
}

pub fn regression_loss_value(best: &Candidate, d: (f64, f64), gt: (f64, f64)) -> f64 {
    let (s, e) = raw_refined(best, d.0, d.1);
    smooth_l1(gt.0 - s) + smooth_l1(gt.1 - e)
}

pub fn total_loss_value(aln: f64, reg: f64, alpha: f64) -> f64 {
    aln + alpha * reg
}
