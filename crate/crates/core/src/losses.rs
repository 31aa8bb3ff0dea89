//! Training objectives: occupancy reconstruction, the permutation-invariant
//! affordance set loss and the weighted total with the cuboid regularizer.

use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian_min_cost, CostMatrix};
use crate::data::{Category, VoxelSample};
use crate::error::{Error, Result};
use crate::geometry::{cuboid_loss, scale_penalty, surface_mask, CuboidContext, CuboidWeighting};
use crate::model::ModelOutput;
use crate::tensor::{Graph, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the BCE.
pub const PROB_CLAMP: f64 = 1e-7;

/// Per-pair cost used to match slots to labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchCost {
    /// `-log softmax(logits)[label]`.
    #[default]
    CrossEntropy,
    /// Mean squared difference between `softmax(logits)` and the one-hot label.
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub recon: f64,
    pub pred: f64,
    pub cuboid: f64,
    /// Multiplies the scale penalty inside the cuboid term.
    pub scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            pred: 0.5,
            cuboid: 0.1,
            scale: 0.01,
        }
    }
}

impl LossWeights {
    /// The first training stage: no cuboid or scale term.
    pub fn without_cuboid(self) -> Self {
        Self {
            cuboid: 0.0,
            scale: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("recon", self.recon), ("pred", self.pred), ("cuboid", self.cuboid), ("scale", self.scale)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Invalid(format!("loss weight {name} = {w}")));
            }
        }
        Ok(())
    }
}

/// Mean binary cross-entropy between the target occupancy and `combined`.
pub fn reconstruction_loss(g: &mut Graph, target: &[f64], combined: Var) -> Result<Var> {
    let n = g.value(combined).len();
    if target.len() != n {
        return Err(Error::Invalid(format!("{} targets for {n} predictions", target.len())));
    }
    let shape = g.shape(combined).to_vec();
    let p = g.clamp(combined, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let t = g.constant(Tensor::new(&shape, target.to_vec())?);
    let log_p = g.log(p)?;
    let q = g.one_minus(p)?;
    let log_q = g.log(q)?;
    let u = g.one_minus(t)?;
    let a = g.mul(t, log_p)?;
    let b = g.mul(u, log_q)?;
    let ll = g.add(a, b)?;
    let mean = g.reduce_mean(ll)?;
    g.neg(mean)
}

/// Head classes of `gt` padded with the null class (0) to `slots` entries.
pub fn padded_targets(gt: &[usize], slots: usize) -> Result<Vec<usize>> {
    if gt.len() > slots {
        return Err(Error::Invalid(format!("{} labels but only {slots} slots", gt.len())));
    }
    let mut t = gt.to_vec();
    t.resize(slots, 0);
    Ok(t)
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cost of assigning class `class` to a slot with logits `row`.
pub fn pair_cost(row: &[f64], class: usize, cost: MatchCost) -> f64 {
    match cost {
        MatchCost::CrossEntropy => {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            lse - row[class]
        }
        MatchCost::Mse => {
            let p = softmax_row(row);
            let k = row.len() as f64;
            p.iter()
                .enumerate()
                .map(|(j, &pj)| {
                    let t = if j == class { 1.0 } else { 0.0 };
                    (pj - t) * (pj - t)
                })
                .sum::<f64>()
                / k
        }
    }
}

/// Outcome of matching slots to a padded label set.
#[derive(Clone, Debug, PartialEq)]
pub struct SetMatch {
    /// Head class assigned to each slot.
    pub targets: Vec<usize>,
    /// Mean matched cost.
    pub cost: f64,
}

/// Matches the rows of `logits: [M, K]` to `gt` padded with null.
pub fn match_slots(logits: &Tensor, gt: &[usize], cost: MatchCost) -> Result<SetMatch> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Invalid(format!("logits of shape {s:?}")));
    }
    let (m, k) = (s[0], s[1]);
    let padded = padded_targets(gt, m)?;
    if let Some(&c) = padded.iter().find(|&&c| c >= k) {
        return Err(Error::Invalid(format!("class {c} outside {k} head classes")));
    }
    let rows: Vec<&[f64]> = logits.data().chunks(k).collect();
    let mut data = Vec::with_capacity(m * m);
    for row in &rows {
        data.extend(padded.iter().map(|&c| pair_cost(row, c, cost)));
    }
    let a = hungarian_min_cost(&CostMatrix::new(m, m, data)?);
    let targets: Vec<usize> = (0..m).map(|r| padded[a.col_of(r).expect("square")]).collect();
    let costs: Vec<f64> = rows.iter().zip(&targets).map(|(row, &c)| pair_cost(row, c, cost)).collect();
    let total: f64 = canonical_order(&targets, &costs).iter().map(|&i| costs[i]).sum();
    Ok(SetMatch {
        targets,
        cost: total / m as f64,
    })
}

/// Slot order by (target class, cost). Summing in this order makes the set
/// loss bitwise independent of slot order.
fn canonical_order(targets: &[usize], costs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| targets[a].cmp(&targets[b]).then(costs[a].total_cmp(&costs[b])));
    order
}

/// Mean cost of the given slot targets, differentiable in `logits`.
pub fn assigned_loss(g: &mut Graph, logits: Var, targets: &[usize], cost: MatchCost) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::Invalid(format!("logits {s:?} for {} targets", targets.len())));
    }
    let (m, k) = (s[0], s[1]);
    let mut onehot = vec![0.0; m * k];
    for (slot, &c) in targets.iter().enumerate() {
        if c >= k {
            return Err(Error::Invalid(format!("class {c} outside {k} head classes")));
        }
        onehot[slot * k + c] = 1.0;
    }
    let t = g.constant(Tensor::new(&[m, k], onehot)?);
    let per_slot = match cost {
        MatchCost::CrossEntropy => {
            let lp = g.log_softmax_along(logits, 1)?;
            let picked = g.mul(lp, t)?;
            let s = g.reduce_sum_axis(picked, 1)?;
            g.neg(s)?
        }
        MatchCost::Mse => {
            let p = g.softmax_along(logits, 1)?;
            let d = g.sub(p, t)?;
            let d2 = g.mul(d, d)?;
            let s = g.reduce_sum_axis(d2, 1)?;
            g.scale(s, 1.0 / k as f64)?
        }
    };
    let costs = g.value(per_slot).data().to_vec();
    let order = canonical_order(targets, &costs);
    let parts = order
        .iter()
        .map(|&i| g.slice(per_slot, 0, i, 1))
        .collect::<Result<Vec<_>>>()?;
    let sorted = g.concat(&parts, 0)?;
    let sum = g.reduce_sum(sorted)?;
    g.scale(sum, 1.0 / m as f64)
}

/// Hungarian-matched set loss. The assignment is a constant of the graph;
/// `frozen` bypasses the matching with given slot targets.
pub fn set_prediction_loss(
    g: &mut Graph,
    logits: Var,
    gt: &[usize],
    cost: MatchCost,
    frozen: Option<&[usize]>,
) -> Result<(Var, Vec<usize>)> {
    let targets = match frozen {
        Some(t) => t.to_vec(),
        None => match_slots(g.value(logits), gt, cost)?.targets,
    };
    let loss = assigned_loss(g, logits, &targets, cost)?;
    Ok((loss, targets))
}

/// Everything the losses need from one ground-truth sample.
#[derive(Clone, Debug)]
pub struct LossTarget {
    pub id: String,
    pub occupancy: Vec<f64>,
    /// Head classes of the affordance set, ascending.
    pub classes: Vec<usize>,
    pub cuboid: CuboidContext,
}

impl LossTarget {
    pub fn new(sample: &VoxelSample, category: Category) -> Result<Self> {
        let classes = sample
            .affordance_set()
            .into_iter()
            .map(|l| {
                category
                    .class_of(l)
                    .ok_or_else(|| Error::Invalid(format!("{}: label {l} outside the {category} family", sample.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mask = surface_mask(&sample.occupancy, sample.res)?;
        Ok(Self {
            id: sample.id.clone(),
            occupancy: sample.occupancy_values(),
            classes,
            cuboid: CuboidContext::new(&mask),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossOptions {
    pub match_cost: MatchCost,
    pub cuboid_weighting: CuboidWeighting,
}

/// Graph nodes of the total loss. A term whose weight is zero is not built.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub recon: Var,
    pub pred: Option<Var>,
    pub cuboid: Option<Var>,
    pub scale: Option<Var>,
    /// Head class matched to each slot (empty without the set term).
    pub matching: Vec<usize>,
    pub weights: LossWeights,
}

/// Scalar values of a [`LossTerms`]; terms that were not built read zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub pred: f64,
    pub cuboid: f64,
    pub scale: f64,
    pub total: f64,
    pub matching: Vec<usize>,
}

impl LossTerms {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        LossBreakdown {
            recon: g.value(self.recon).item(),
            pred: val(self.pred),
            cuboid: val(self.cuboid),
            scale: val(self.scale),
            total: g.value(self.total).item(),
            matching: self.matching.clone(),
        }
    }
}

fn finite(g: &Graph, v: Var, term: &'static str, id: &str) -> Result<Var> {
    if g.value(v).item().is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss {
            term,
            sample: id.to_string(),
        })
    }
}

/// `recon_w * recon + pred_w * pred + cuboid_w * (cuboid + scale_w * scale)`.
pub fn total_loss(
    g: &mut Graph,
    out: &ModelOutput,
    target: &LossTarget,
    weights: &LossWeights,
    opts: &LossOptions,
    frozen: Option<&[usize]>,
) -> Result<LossTerms> {
    weights.validate()?;
    let id = target.id.as_str();
    let recon = reconstruction_loss(g, &target.occupancy, out.combined)?;
    let recon = finite(g, recon, "recon", id)?;
    let mut total = g.scale(recon, weights.recon)?;

    let (mut pred, mut matching) = (None, Vec::new());
    if weights.pred > 0.0 {
        let (p, m) = set_prediction_loss(g, out.logits, &target.classes, opts.match_cost, frozen)?;
        let p = finite(g, p, "pred", id)?;
        let wp = g.scale(p, weights.pred)?;
        total = g.add(total, wp)?;
        pred = Some(p);
        matching = m;
    }

    let (mut cuboid, mut scale) = (None, None);
    if weights.cuboid > 0.0 {
        let c = cuboid_loss(
            g,
            out.values,
            out.masks,
            out.scales,
            out.rotations,
            &target.cuboid,
            opts.cuboid_weighting,
        )?;
        let c = finite(g, c.loss, "cuboid", id)?;
        let mut reg = c;
        if weights.scale > 0.0 {
            let s = scale_penalty(g, out.scales)?;
            let s = finite(g, s, "scale", id)?;
            let ws = g.scale(s, weights.scale)?;
            reg = g.add(reg, ws)?;
            scale = Some(s);
        }
        let wc = g.scale(reg, weights.cuboid)?;
        total = g.add(total, wc)?;
        cuboid = Some(c);
    }
    let total = finite(g, total, "total", id)?;
    Ok(LossTerms {
        total,
        recon,
        pred,
        cuboid,
        scale,
        matching,
        weights: *weights,
    })
}
