use serde::{Deserialize, Serialize};

use super::hungarian::{Assignment, CostMatrix};
use crate::error::{Error, Result};
use crate::geometry::LineSegment;
use crate::numeric::{FocalParams, Graph, Tensor, Var};

/// Weights of the class and endpoint terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_class: f64,
    pub lambda_line: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_class: 2.0,
            lambda_line: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_class > 0.0 && self.lambda_line > 0.0) {
            return Err(Error::config("loss weights must be positive"));
        }
        Ok(())
    }
}

/// One query's output: line probability and predicted segment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub prob: f64,
    pub line: LineSegment,
}

/// Supervision target of a single query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum QueryTarget {
    Line(LineSegment),
    NoLine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Weighted class term.
    pub class: f64,
    /// Weighted endpoint term.
    pub line: f64,
}

/// Label-conditional focal loss; probabilities are clamped to `[1e-8, 1 − 1e-8]`.
pub fn focal_loss(p: f64, is_line: bool) -> f64 {
    FocalParams::default().eval(p, is_line).0
}

/// Summed absolute endpoint difference of the canonicalized segments, zero when unmatched.
pub fn line_l1_loss(pred: &LineSegment, gt: &LineSegment, matched: bool) -> f64 {
    if !matched {
        return 0.0;
    }
    let a = pred.canonicalize().to_array();
    let b = gt.canonicalize().to_array();
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

/// `cost(q, g) = −λ_cls·p̂_q + λ_line·‖l̂_q − l_g‖₁`.
pub fn build_cost_matrix(preds: &[Prediction], gts: &[LineSegment], w: &LossWeights) -> CostMatrix {
    let mut data = Vec::with_capacity(preds.len() * gts.len());
    for p in preds {
        for g in gts {
            data.push(-w.lambda_class * p.prob + w.lambda_line * line_l1_loss(&p.line, g, true));
        }
    }
    CostMatrix::new(preds.len(), gts.len(), data).expect("finite predictions give a finite cost matrix")
}

/// Per-query targets implied by an assignment: matched queries get their line, the rest no-line.
pub fn targets_from_assignment(n_pred: usize, gts: &[LineSegment], a: &Assignment) -> Vec<QueryTarget> {
    a.gt_for_pred(n_pred)
        .into_iter()
        .map(|g| g.map_or(QueryTarget::NoLine, |g| QueryTarget::Line(gts[g])))
        .collect()
}

/// Weighted focal plus endpoint loss summed over all queries.
pub fn total_loss(preds: &[Prediction], gts: &[LineSegment], assignment: &Assignment, w: &LossWeights) -> LossBreakdown {
    let targets = targets_from_assignment(preds.len(), gts, assignment);
    loss_for_targets(preds, &targets, w)
}

/// [`total_loss`] with explicit per-query targets (used for fixed denoising assignments).
pub fn loss_for_targets(preds: &[Prediction], targets: &[QueryTarget], w: &LossWeights) -> LossBreakdown {
    let mut class = 0.0;
    let mut line = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        match t {
            QueryTarget::Line(gt) => {
                class += focal_loss(p.prob, true);
                line += line_l1_loss(&p.line, gt, true);
            }
            QueryTarget::NoLine => class += focal_loss(p.prob, false),
        }
    }
    let class = w.lambda_class * class;
    let line = w.lambda_line * line;
    LossBreakdown {
        total: class + line,
        class,
        line,
    }
}

/// Tape variables of the loss on one set of queries.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub class: Var,
    pub line: Var,
}

/// Records the loss for probabilities `[N, 1]` and lines `[N, 4]` against `targets`.
///
/// Predicted segments are canonicalized by permuting their endpoints, so the endpoint gradient
/// reaches whichever output slots currently hold the lexicographically first point.
pub fn loss_on_graph(g: &mut Graph, probs: Var, lines: Var, targets: &[QueryTarget], w: &LossWeights) -> LossVars {
    let n = g.shape(probs)[0];
    assert_eq!(n, targets.len());
    let positive: Vec<bool> = targets.iter().map(|t| matches!(t, QueryTarget::Line(_))).collect();
    let focal = g.focal(probs, positive, FocalParams::default());
    let class_sum = g.sum(focal);
    let class = g.scale(class_sum, w.lambda_class);

    let matched: Vec<(usize, LineSegment)> = targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| match t {
            QueryTarget::Line(l) => Some((i, *l)),
            QueryTarget::NoLine => None,
        })
        .collect();
    let line = if matched.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let vals = g.value(lines).clone();
        let mut idx = Vec::with_capacity(matched.len() * 2);
        let mut gt = Vec::with_capacity(matched.len() * 4);
        for &(i, l) in &matched {
            let row = vals.row(i);
            let seg = LineSegment::new(row[0], row[1], row[2], row[3]);
            if seg.canonicalize() == seg {
                idx.extend([2 * i, 2 * i + 1]);
            } else {
                idx.extend([2 * i + 1, 2 * i]);
            }
            gt.extend(l.canonicalize().to_array());
        }
        let points = g.reshape(lines, vec![2 * n, 2]);
        let picked = g.gather_rows(points, idx);
        let target = g.constant(Tensor::from_parts(vec![2 * matched.len(), 2], gt));
        let diff = g.sub(picked, target);
        let abs = g.abs(diff);
        let s = g.sum(abs);
        g.scale(s, w.lambda_line)
    };
    let total = g.add(class, line);
    LossVars { total, class, line }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::hungarian_assign;

    #[test]
    fn focal_values() {
        assert!((focal_loss(0.5, true) - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((focal_loss(0.5, false) - 0.0625 * 2f64.ln()).abs() < 1e-12);
        assert!(focal_loss(1.0, true) < 1e-12);
        assert!(focal_loss(0.0, true).is_finite());
    }

    #[test]
    fn l1_values() {
        let l = LineSegment::new(0.2, 0.3, 0.6, 0.7);
        let p = LineSegment::new(0.25, 0.3, 0.5, 0.75);
        assert!((line_l1_loss(&p, &l, true) - 0.2).abs() < 1e-12);
        assert!((line_l1_loss(&p.swapped(), &l, true) - 0.2).abs() < 1e-12);
        assert_eq!(line_l1_loss(&p, &l, false), 0.0);
        assert_eq!(line_l1_loss(&l, &l, true), 0.0);
    }

    #[test]
    fn cost_examples() {
        let w = LossWeights::default();
        let gt = LineSegment::new(0.2, 0.3, 0.6, 0.7);
        let c = build_cost_matrix(&[Prediction { prob: 1.0, line: gt }], &[gt], &w);
        assert!((c.get(0, 0) + 2.0).abs() < 1e-12);
        let p = Prediction {
            prob: 0.5,
            line: LineSegment::new(0.25, 0.3, 0.5, 0.75),
        };
        let c = build_cost_matrix(&[p], &[gt], &w);
        assert!(c.get(0, 0).abs() < 1e-12);
    }

    #[test]
    fn composed_total() {
        let gt = LineSegment::new(0.2, 0.3, 0.6, 0.7);
        let p = Prediction {
            prob: 0.5,
            line: LineSegment::new(0.25, 0.3, 0.5, 0.75),
        };
        let w = LossWeights::default();
        let a = hungarian_assign(&build_cost_matrix(&[p], &[gt], &w)).unwrap();
        let b = total_loss(&[p], &[gt], &a, &w);
        assert!((b.total - (2.0 * 0.25 * 2f64.ln() + 1.0)).abs() < 1e-12);
        assert!((b.line - 1.0).abs() < 1e-12);
    }

    #[test]
    fn graph_matches_plain() {
        let preds = [
            Prediction {
                prob: 0.3,
                line: LineSegment::new(0.7, 0.2, 0.1, 0.4),
            },
            Prediction {
                prob: 0.8,
                line: LineSegment::new(0.1, 0.1, 0.5, 0.6),
            },
        ];
        let targets = [QueryTarget::Line(LineSegment::new(0.2, 0.5, 0.6, 0.1)), QueryTarget::NoLine];
        let w = LossWeights::default();
        let plain = loss_for_targets(&preds, &targets, &w);
        let mut g = Graph::new();
        let probs = g.constant(Tensor::new(vec![2, 1], preds.iter().map(|p| p.prob).collect()).unwrap());
        let lines = g.constant(Tensor::new(vec![2, 4], preds.iter().flat_map(|p| p.line.to_array()).collect()).unwrap());
        let v = loss_on_graph(&mut g, probs, lines, &targets, &w);
        assert!((g.value(v.total).data()[0] - plain.total).abs() < 1e-12);
        assert!((g.value(v.line).data()[0] - plain.line).abs() < 1e-12);
    }
}
