//! Set-prediction matching between predicted and ground-truth anchors, and
//! the anchor loss `λ_seg·Σ(|Δc| + |Δd|) + λ_span·Σ(1 − overlap/hull)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::temporal::{hull_overlap_ratio, TemporalAnchor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_seg: f64,
    pub lambda_span: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_seg: 10.0,
            lambda_span: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_seg: f64, lambda_span: f64) -> Result<Self> {
        if !(lambda_seg >= 0.0 && lambda_span >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got ({lambda_seg}, {lambda_span})"
            )));
        }
        Ok(Self {
            lambda_seg,
            lambda_span,
        })
    }
}

/// Row-major `rows × cols` matrix; rows are predictions, columns ground truths.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                what: "cost matrix data",
                left: data.len(),
                right: rows * cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, pred: usize, gt: usize) -> f64 {
        self.data[pred * self.cols + gt]
    }
}

/// Matched `(prediction, ground truth)` pairs, one per ground truth, sorted by
/// ground-truth index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn total(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(p, g)| cost.get(p, g)).sum()
    }

    /// Prediction matched to ground truth `gt`.
    pub fn pred_for(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(_, g)| g == gt).map(|&(p, _)| p)
    }

    pub fn is_matched(&self, pred: usize) -> bool {
        self.pairs.iter().any(|&(p, _)| p == pred)
    }
}

/// Loss of a single (prediction, target) pair.
pub fn pair_loss(pred: TemporalAnchor, gt: TemporalAnchor, w: LossWeights) -> f64 {
    let seg = (pred.center() - gt.center()).abs() + (pred.duration() - gt.duration()).abs();
    let span = 1.0 - hull_overlap_ratio(pred.span(), gt.span());
    w.lambda_seg * seg + w.lambda_span * span
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Subgradient of [`pair_loss`] with respect to the prediction's
/// `(center, duration)`. Kinks (ties in `|·|`, `min`, `max`, clamping
/// boundaries) take the zero branch.
pub fn pair_loss_grad(pred: TemporalAnchor, gt: TemporalAnchor, w: LossWeights) -> [f64; 2] {
    let (c, d) = (pred.center(), pred.duration());
    let mut gc = w.lambda_seg * sign(c - gt.center());
    let mut gd = w.lambda_seg * sign(d - gt.duration());

    let raw_s = c - d / 2.0;
    let raw_e = c + d / 2.0;
    let (ps, pe) = (raw_s.clamp(0.0, 1.0), raw_e.clamp(0.0, 1.0));
    // ∂(start, end)/∂(c, d) with clamping.
    let ds = if raw_s > 0.0 && raw_s < 1.0 { [1.0, -0.5] } else { [0.0, 0.0] };
    let de = if raw_e > 0.0 && raw_e < 1.0 { [1.0, 0.5] } else { [0.0, 0.0] };

    let gspan = gt.span();
    let (gs, ge) = (gspan.start(), gspan.end());
    let inter = pe.min(ge) - ps.max(gs);
    let hull = pe.max(ge) - ps.min(gs);
    if hull > 0.0 {
        let inter_pos = inter > 0.0;
        let i_val = inter.max(0.0);
        let di_de = if inter_pos && pe < ge { 1.0 } else { 0.0 };
        let di_ds = if inter_pos && ps > gs { -1.0 } else { 0.0 };
        let dh_de = if pe > ge { 1.0 } else { 0.0 };
        let dh_ds = if ps < gs { -1.0 } else { 0.0 };
        // r = I / H; loss term is −λ_span · r.
        let dr_de = (di_de * hull - i_val * dh_de) / (hull * hull);
        let dr_ds = (di_ds * hull - i_val * dh_ds) / (hull * hull);
        for k in 0..2 {
            let dr = dr_de * de[k] + dr_ds * ds[k];
            let g = -w.lambda_span * dr;
            if k == 0 {
                gc += g;
            } else {
                gd += g;
            }
        }
    }
    [gc, gd]
}

pub fn pairwise_cost(preds: &[TemporalAnchor], gts: &[TemporalAnchor], w: LossWeights) -> Result<CostMatrix> {
    if gts.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let data = preds
        .iter()
        .flat_map(|&p| gts.iter().map(move |&g| pair_loss(p, g, w)))
        .collect();
    CostMatrix::new(preds.len(), gts.len(), data)
}

/// Minimum-cost assignment over `active_gts × active_preds` (needs
/// `|gts| ≤ |preds|`), shortest augmenting path form of the Kuhn–Munkres
/// algorithm. Returns `(total, pred index for each active gt)`.
fn solve(cost: &CostMatrix, gts: &[usize], preds: &[usize]) -> (f64, Vec<usize>) {
    let n = gts.len();
    let m = preds.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let a = |i: usize, j: usize| cost.get(preds[j - 1], gts[i - 1]);
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
    let mut result = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            result[owner[j] - 1] = preds[j - 1];
        }
    }
    let total = result.iter().zip(gts).map(|(&p, &g)| cost.get(p, g)).sum();
    (total, result)
}

/// Relative slack used to decide that two assignment totals are equal.
const TIE_TOL: f64 = 1e-9;

/// Optimal one-to-one assignment of every ground truth to a distinct
/// prediction. Among equal-cost optima the result is the lexicographically
/// smallest when ground truths are visited in order and each takes the lowest
/// prediction index that still admits an optimal completion.
pub fn hungarian_match(cost: &CostMatrix) -> Result<Assignment> {
    let (m, n) = (cost.rows(), cost.cols());
    if n == 0 {
        return Err(Error::NoGroundTruth);
    }
    if m < n {
        return Err(Error::TooFewPredictions { rows: m, cols: n });
    }
    for p in 0..m {
        for g in 0..n {
            if !cost.get(p, g).is_finite() {
                return Err(Error::NonFiniteCost { row: p, col: g });
            }
        }
    }
    let all_gts: Vec<usize> = (0..n).collect();
    let all_preds: Vec<usize> = (0..m).collect();
    let (best, first) = solve(cost, &all_gts, &all_preds);
    let tol = TIE_TOL * (1.0 + best.abs());

    let mut pairs = Vec::with_capacity(n);
    let mut free_preds = all_preds;
    let mut fixed_total = 0.0;
    for g in 0..n {
        let rest_gts: Vec<usize> = (g + 1..n).collect();
        let mut chosen = None;
        for (slot, &p) in free_preds.iter().enumerate() {
            let c = cost.get(p, g);
            if fixed_total + c > best + tol {
                continue;
            }
            let remaining: Vec<usize> = free_preds.iter().copied().filter(|&q| q != p).collect();
            let (rest, _) = solve(cost, &rest_gts, &remaining);
            if fixed_total + c + rest <= best + tol {
                chosen = Some((slot, p, c));
                break;
            }
        }
        // Rounding can in principle reject every candidate; fall back to the
        // unrefined optimum for this ground truth.
        let (slot, p, c) = chosen.unwrap_or_else(|| {
            let p = first[g];
            let slot = free_preds.iter().position(|&q| q == p).unwrap_or(0);
            (slot, free_preds[slot], cost.get(free_preds[slot], g))
        });
        fixed_total += c;
        pairs.push((p, g));
        free_preds.remove(slot);
    }
    Ok(Assignment { pairs })
}

/// Anchor loss under the optimal assignment. Unmatched predictions contribute
/// nothing.
pub fn anchor_loss(
    preds: &[TemporalAnchor],
    gts: &[TemporalAnchor],
    w: LossWeights,
) -> Result<(f64, Assignment)> {
    let cost = pairwise_cost(preds, gts, w)?;
    let assignment = hungarian_match(&cost)?;
    Ok((assignment.total(&cost), assignment))
}

/// `∂loss/∂(center, duration)` for every prediction, holding the assignment
/// fixed. Unmatched predictions get `[0, 0]`.
pub fn anchor_loss_grad(
    preds: &[TemporalAnchor],
    gts: &[TemporalAnchor],
    w: LossWeights,
    assignment: &Assignment,
) -> Vec<[f64; 2]> {
    let mut grads = vec![[0.0; 2]; preds.len()];
    for &(p, g) in assignment.pairs() {
        let gp = pair_loss_grad(preds[p], gts[g], w);
        grads[p][0] += gp[0];
        grads[p][1] += gp[1];
    }
    grads
}

/// Positionally aligned anchor loss (no matching): `Σ_i pair_loss(pred_i, gt_i)`.
pub fn aligned_loss(preds: &[TemporalAnchor], gts: &[TemporalAnchor], w: LossWeights) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch {
            what: "aligned anchors",
            left: preds.len(),
            right: gts.len(),
        });
    }
    Ok(preds.iter().zip(gts).map(|(&p, &g)| pair_loss(p, g, w)).sum())
}
