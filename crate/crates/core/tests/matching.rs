use dtlsd::matching::{build_cost_matrix, hungarian_assign, total_loss, CostMatrix, LossWeights, Prediction};
use dtlsd::LineSegment;
use proptest::prelude::*;

fn assignment_cost(c: &CostMatrix, pred_for_gt: &[usize]) -> f64 {
    pred_for_gt.iter().enumerate().map(|(g, &p)| c.get(p, g)).sum()
}

fn brute_force(c: &CostMatrix) -> f64 {
    fn go(c: &CostMatrix, g: usize, used: &mut [bool], acc: f64) -> f64 {
        if g == c.cols() {
            return acc;
        }
        let mut best = f64::INFINITY;
        for p in 0..c.rows() {
            if !used[p] {
                used[p] = true;
                best = best.min(go(c, g + 1, used, acc + c.get(p, g)));
                used[p] = false;
            }
        }
        best
    }
    go(c, 0, &mut vec![false; c.rows()], 0.0)
}

fn line(v: [f64; 4]) -> LineSegment {
    LineSegment::from_array(v).canonicalize()
}

#[test]
fn perfect_predictions_cost_almost_nothing() {
    let gts = [line([0.1, 0.2, 0.8, 0.3]), line([0.4, 0.9, 0.5, 0.1])];
    let preds = [
        Prediction { prob: 1.0 - 1e-9, line: gts[1] },
        Prediction { prob: 1e-9, line: line([0.3, 0.3, 0.6, 0.6]) },
        Prediction { prob: 1.0 - 1e-9, line: gts[0] },
    ];
    let w = LossWeights::default();
    let a = hungarian_assign(&build_cost_matrix(&preds, &gts, &w)).unwrap();
    assert_eq!(a.pred_for_gt, vec![2, 0]);
    assert!(total_loss(&preds, &gts, &a, &w).total < 1e-12);
}

proptest! {
    #[test]
    fn hungarian_is_optimal(n_gt in 1usize..6, extra in 0usize..3, data in prop::collection::vec(-100i32..100, 64)) {
        let n_pred = n_gt + extra;
        let c = CostMatrix::new(n_pred, n_gt, data[..n_pred * n_gt].iter().map(|&v| v as f64 / 4.0).collect()).unwrap();
        let a = hungarian_assign(&c).unwrap();
        prop_assert_eq!(assignment_cost(&c, &a.pred_for_gt), brute_force(&c));
    }

    #[test]
    fn common_weight_scale_keeps_the_assignment(
        probs in prop::collection::vec(0.01f64..0.99, 5),
        coords in prop::collection::vec(0.0f64..1.0, 32),
        k in 0.1f64..10.0,
    ) {
        let preds: Vec<Prediction> = (0..5)
            .map(|i| Prediction { prob: probs[i], line: line([coords[4 * i], coords[4 * i + 1], coords[4 * i + 2], coords[4 * i + 3]]) })
            .collect();
        let gts: Vec<LineSegment> = (5..8).map(|i| line([coords[4 * i], coords[4 * i + 1], coords[4 * i + 2], coords[4 * i + 3]])).collect();
        let w = LossWeights::default();
        let scaled = LossWeights { lambda_class: w.lambda_class * k, lambda_line: w.lambda_line * k };
        let c = build_cost_matrix(&preds, &gts, &w);
        let a = hungarian_assign(&c).unwrap();
        let b = hungarian_assign(&build_cost_matrix(&preds, &gts, &scaled)).unwrap();
        // Identical up to ties: the unscaled cost of both assignments agrees.
        let diff = (assignment_cost(&c, &a.pred_for_gt) - assignment_cost(&c, &b.pred_for_gt)).abs();
        prop_assert!(diff < 1e-9);
    }

    #[test]
    fn loss_is_invariant_to_gt_order(
        probs in prop::collection::vec(0.01f64..0.99, 4),
        coords in prop::collection::vec(0.0f64..1.0, 28),
    ) {
        let preds: Vec<Prediction> = (0..4)
            .map(|i| Prediction { prob: probs[i], line: line([coords[4 * i], coords[4 * i + 1], coords[4 * i + 2], coords[4 * i + 3]]) })
            .collect();
        let gts: Vec<LineSegment> = (4..7).map(|i| line([coords[4 * i], coords[4 * i + 1], coords[4 * i + 2], coords[4 * i + 3]])).collect();
        let rev: Vec<LineSegment> = gts.iter().rev().copied().collect();
        let w = LossWeights::default();
        let l1 = total_loss(&preds, &gts, &hungarian_assign(&build_cost_matrix(&preds, &gts, &w)).unwrap(), &w);
        let l2 = total_loss(&preds, &rev, &hungarian_assign(&build_cost_matrix(&preds, &rev, &w)).unwrap(), &w);
        prop_assert!((l1.total - l2.total).abs() < 1e-9);
        prop_assert!(l1.total >= 0.0);
    }
}
