//! One-to-one assignment of predictions to ground truth and the detection loss.

mod hungarian;
mod loss;

pub use hungarian::{hungarian_assign, Assignment, CostMatrix};
pub use loss::{
    build_cost_matrix, focal_loss, line_l1_loss, loss_for_targets, loss_on_graph, targets_from_assignment, total_loss,
    LossBreakdown, LossVars, LossWeights, Prediction, QueryTarget,
};
