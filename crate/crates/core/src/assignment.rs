//! Minimum-cost bipartite assignment and the evaluation metrics built on it.

use std::collections::BTreeSet;

use crate::error::{shape_err, Error, Result};

/// Occupancy threshold used to binarize reconstructions.
pub const OCCUPANCY_THRESHOLD: f64 = 0.5;

/// Dense row-major `rows x cols` cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyCostMatrix);
        }
        if data.len() != rows * cols {
            return Err(shape_err(
                "CostMatrix::new",
                format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("cost matrix has non-finite entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("CostMatrix::from_rows", "ragged rows"));
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
}

/// An optimal one-to-one matching of size `min(rows, cols)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub matches: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    /// Column matched to `row`, if any.
    pub fn col_of(&self, row: usize) -> Option<usize> {
        self.matches.iter().find(|m| m.0 == row).map(|m| m.1)
    }
}

/// Optimal cost of assigning every row of `sub(rows, cols)` when
/// `rows.len() <= cols.len()`, via shortest augmenting paths with potentials.
fn min_cost_rows(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    let m = cols.len();
    debug_assert!(n <= m);
    let a = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) matched to column j; way[j]: previous column on the path
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| a(i + 1, row_to_col[i] + 1)).sum();
    (total, row_to_col)
}

/// Optimal cost of a maximum-size matching between the given rows and
/// columns.
fn optimum(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    if rows.len() <= cols.len() {
        min_cost_rows(cost, rows, cols).0
    } else {
        let t = transpose(cost);
        min_cost_rows(&t, cols, rows).0
    }
}

fn transpose(cost: &CostMatrix) -> CostMatrix {
    let mut data = Vec::with_capacity(cost.data.len());
    for c in 0..cost.cols {
        for r in 0..cost.rows {
            data.push(cost.get(r, c));
        }
    }
    CostMatrix {
        rows: cost.cols,
        cols: cost.rows,
        data,
    }
}

/// Minimum-cost assignment of size `min(rows, cols)`.
///
/// Among all optimal assignments (costs within a relative `1e-9` of the
/// optimum) the lexicographically smallest row-sorted match list is
/// returned, so ties resolve the same way on every run.
pub fn hungarian_min_cost(cost: &CostMatrix) -> Assignment {
    let all_rows: Vec<usize> = (0..cost.rows).collect();
    let all_cols: Vec<usize> = (0..cost.cols).collect();
    let opt = optimum(cost, &all_rows, &all_cols);
    let tol = 1e-9 * (1.0 + opt.abs());
    let size = cost.rows.min(cost.cols);

    let mut matches = Vec::with_capacity(size);
    let mut fixed = 0.0;
    let mut used_cols = vec![false; cost.cols];
    let mut next_row = 0;
    while matches.len() < size {
        let mut chosen = None;
        'search: for r in next_row..cost.rows {
            let rest_rows: Vec<usize> = (r + 1..cost.rows).collect();
            for c in 0..cost.cols {
                if used_cols[c] {
                    continue;
                }
                let rest_cols: Vec<usize> = (0..cost.cols).filter(|&j| !used_cols[j] && j != c).collect();
                let needed = size - matches.len() - 1;
                if rest_rows.len().min(rest_cols.len()) < needed {
                    continue;
                }
                let total = fixed + cost.get(r, c) + optimum(cost, &rest_rows, &rest_cols);
                if total <= opt + tol {
                    chosen = Some((r, c));
                    break 'search;
                }
            }
        }
        let (r, c) = chosen.expect("an optimal completion always exists");
        fixed += cost.get(r, c);
        used_cols[c] = true;
        next_row = r + 1;
        matches.push((r, c));
    }
    let total_cost = matches.iter().map(|&(r, c)| cost.get(r, c)).sum();
    Assignment {
        matches,
        total_cost,
    }
}

/// Hard per-voxel reading of a reconstruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartAssignment {
    pub slots: usize,
    /// Argmax-mask slot of every voxel (ties go to the lowest slot).
    pub slot: Vec<usize>,
    /// Combined value at or above [`OCCUPANCY_THRESHOLD`].
    pub occupied: Vec<bool>,
}

/// Binarizes a reconstruction given its combined value `[N]` and the
/// normalized per-slot masks `[M, N]` (row-major).
pub fn binarize_parts(combined: &[f64], masks: &[f64], slots: usize) -> Result<PartAssignment> {
    let n = combined.len();
    if slots == 0 || masks.len() != slots * n {
        return Err(shape_err(
            "binarize_parts",
            format!("{} mask entries for {slots} slots x {n} voxels", masks.len()),
        ));
    }
    let slot = (0..n)
        .map(|i| {
            let mut best = 0;
            for m in 1..slots {
                if masks[m * n + i] > masks[best * n + i] {
                    best = m;
                }
            }
            best
        })
        .collect();
    Ok(PartAssignment {
        slots,
        slot,
        occupied: combined.iter().map(|&v| v >= OCCUPANCY_THRESHOLD).collect(),
    })
}

/// Instance ids present in a part grid (0 is empty), ascending.
pub fn part_ids(part_grid: &[u8]) -> Vec<u8> {
    part_grid
        .iter()
        .filter(|&&k| k != 0)
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// IoU matrix `[slots x gt_parts]` between predicted and ground-truth parts.
pub fn iou_matrix(pred: &PartAssignment, part_grid: &[u8]) -> Result<(Vec<u8>, Vec<Vec<f64>>)> {
    if pred.slot.len() != part_grid.len() {
        return Err(shape_err(
            "mean_part_iou",
            format!("{} predicted voxels vs {} ground truth", pred.slot.len(), part_grid.len()),
        ));
    }
    let ids = part_ids(part_grid);
    let mut index = [usize::MAX; 256];
    for (j, &k) in ids.iter().enumerate() {
        index[k as usize] = j;
    }
    let g = ids.len();
    let mut inter = vec![vec![0usize; g]; pred.slots];
    let mut pred_size = vec![0usize; pred.slots];
    let mut gt_size = vec![0usize; g];
    for (i, &k) in part_grid.iter().enumerate() {
        let occupied = pred.occupied[i];
        if occupied {
            pred_size[pred.slot[i]] += 1;
        }
        if k != 0 {
            let j = index[k as usize];
            gt_size[j] += 1;
            if occupied {
                inter[pred.slot[i]][j] += 1;
            }
        }
    }
    let iou = (0..pred.slots)
        .map(|m| {
            (0..g)
                .map(|j| {
                    let union = pred_size[m] + gt_size[j] - inter[m][j];
                    if union == 0 {
                        0.0
                    } else {
                        inter[m][j] as f64 / union as f64
                    }
                })
                .collect()
        })
        .collect();
    Ok((ids, iou))
}

/// Hungarian-matched mean IoU, averaged over the ground-truth part count.
pub fn mean_part_iou(pred: &PartAssignment, part_grid: &[u8]) -> Result<f64> {
    let (ids, iou) = iou_matrix(pred, part_grid)?;
    if ids.is_empty() {
        return Err(Error::Invalid("ground truth has no parts".into()));
    }
    let cost = CostMatrix::from_rows(&iou.iter().map(|row| row.iter().map(|v| 1.0 - v).collect()).collect::<Vec<_>>())?;
    let a = hungarian_min_cost(&cost);
    let matched: f64 = a.matches.iter().map(|&(m, j)| iou[m][j]).sum();
    Ok(matched / ids.len() as f64)
}

/// Mean squared error between a reconstruction and binary occupancy.
pub fn shape_mse(pred: &[f64], occupancy: &[bool]) -> Result<f64> {
    if pred.len() != occupancy.len() || pred.is_empty() {
        return Err(shape_err(
            "shape_mse",
            format!("{} predicted voxels vs {} ground truth", pred.len(), occupancy.len()),
        ));
    }
    let sum: f64 = pred
        .iter()
        .zip(occupancy)
        .map(|(&p, &o)| {
            let d = p - if o { 1.0 } else { 0.0 };
            d * d
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Fraction of samples whose predicted non-null label set equals the ground
/// truth set exactly. Label `0` is the null label and is ignored.
pub fn set_ap(pred: &[Vec<u8>], gt: &[Vec<u8>]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Invalid("set_ap needs at least one sample".into()));
    }
    if pred.len() != gt.len() {
        return Err(shape_err("set_ap", format!("{} predictions vs {} targets", pred.len(), gt.len())));
    }
    let set = |v: &[u8]| v.iter().filter(|&&l| l != 0).copied().collect::<BTreeSet<_>>();
    let hits = pred.iter().zip(gt).filter(|(p, g)| set(p) == set(g)).count();
    Ok(hits as f64 / pred.len() as f64)
}
