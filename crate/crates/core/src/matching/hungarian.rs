use crate::error::{Error, Result};

/// Prediction × ground-truth cost table.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::arg(format!("{rows}x{cols} cost matrix needs {} entries", rows * cols)));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::arg(format!("cost matrix entry {v} is not finite")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::arg("ragged cost matrix"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// The same costs multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }
}

/// One prediction per ground truth; `pred_for_gt[g]` is the prediction matched to `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pred_for_gt: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    /// Inverse view: the ground truth matched to each of `n_pred` predictions.
    pub fn gt_for_pred(&self, n_pred: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_pred];
        for (g, &p) in self.pred_for_gt.iter().enumerate() {
            out[p] = Some(g);
        }
        out
    }
}

/// Minimum-cost matching of every ground truth (column) to a distinct prediction (row).
///
/// Shortest augmenting paths with dual potentials, `O(n_gt² · n_pred)`. Ties resolve towards
/// lower prediction indices.
pub fn hungarian_assign(c: &CostMatrix) -> Result<Assignment> {
    let (n_pred, n_gt) = (c.rows, c.cols);
    if n_pred < n_gt {
        return Err(Error::arg(format!("{n_pred} predictions cannot cover {n_gt} ground truths")));
    }
    if n_gt == 0 {
        return Ok(Assignment {
            pred_for_gt: Vec::new(),
            total_cost: 0.0,
        });
    }
    // Ground truths are the "rows" of the classic formulation (1-based, index 0 is a sentinel),
    // predictions are the "columns".
    let (n, m) = (n_gt, n_pred);
    let cost = |i: usize, j: usize| c.get(j - 1, i - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pred_for_gt = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            pred_for_gt[owner[j] - 1] = j - 1;
        }
    }
    let total_cost = pred_for_gt.iter().enumerate().map(|(g, &p)| c.get(p, g)).sum();
    Ok(Assignment {
        pred_for_gt,
        total_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let a = hungarian_assign(&c).unwrap();
        assert_eq!(a.pred_for_gt, vec![0, 1]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn zero_matrix_identity() {
        let c = CostMatrix::new(5, 3, vec![0.0; 15]).unwrap();
        let a = hungarian_assign(&c).unwrap();
        assert_eq!(a.pred_for_gt, vec![0, 1, 2]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn rectangular_picks_cheapest_rows() {
        let c = CostMatrix::from_rows(&[vec![9.0], vec![3.0], vec![4.0]]).unwrap();
        let a = hungarian_assign(&c).unwrap();
        assert_eq!(a.pred_for_gt, vec![1]);
        assert_eq!(a.gt_for_pred(3), vec![None, Some(0), None]);
    }

    #[test]
    fn errors() {
        let c = CostMatrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(matches!(hungarian_assign(&c), Err(Error::Argument(_))));
        assert!(CostMatrix::new(1, 1, vec![f64::NAN]).is_err());
        let empty = CostMatrix::new(3, 0, vec![]).unwrap();
        assert_eq!(hungarian_assign(&empty).unwrap().pred_for_gt, Vec::<usize>::new());
    }
}
