use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{binarize_parts, mean_part_iou, set_ap, shape_mse};
use crate::data::{AffordanceVocab, Category, VoxelSample};
use crate::error::{Error, Result};
use crate::losses::PROB_CLAMP;
use crate::model::{Prediction, SlotModel};

/// Scores of one evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub mean_iou: f64,
    pub mse: f64,
    /// Reconstruction binary cross entropy, probabilities clamped like the
    /// training loss.
    pub bce: f64,
    /// Predicted affordance names, absent when affordances are not trained.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted: Option<Vec<String>>,
    pub truth: Vec<String>,
}

/// Split-level metrics with the per-sample breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mean_iou: f64,
    pub mse: f64,
    pub bce: f64,
    /// Exact-set accuracy; `None` when the affordance branch is off.
    pub ap: Option<f64>,
    pub records: Vec<SampleRecord>,
}

/// Affordance ids predicted by a forward pass: the arg-max class of every
/// slot, nulls dropped, deduplicated and sorted.
pub fn predicted_labels(pred: &Prediction, category: Category) -> Vec<u8> {
    let mut labels: Vec<u8> = pred
        .slot_classes()
        .into_iter()
        .filter(|&c| c != 0)
        .map(|c| category.label_of_class(c))
        .collect();
    labels.sort();
    labels.dedup();
    labels
}

fn names(labels: &[u8]) -> Vec<String> {
    labels
        .iter()
        .filter_map(|&l| AffordanceVocab::name(l))
        .map(String::from)
        .collect()
}

/// Slot initialization noise used to evaluate sample `index`. Independent of
/// the training stream so evaluation never perturbs training.
pub fn eval_noise(model: &SlotModel, seed: u64, index: usize) -> Option<crate::tensor::Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    model.sample_noise(&mut rng)
}

fn reconstruction_bce(combined: &[f64], occupancy: &[bool]) -> f64 {
    let total: f64 = combined
        .iter()
        .zip(occupancy)
        .map(|(&v, &o)| {
            let p = v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if o {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / combined.len() as f64
}

/// Scores a prediction against its ground truth.
pub fn score_prediction(
    pred: &Prediction,
    sample: &VoxelSample,
    category: Category,
    with_affordances: bool,
) -> Result<(SampleRecord, Vec<u8>)> {
    let parts = binarize_parts(&pred.combined, &pred.masks, pred.slots)?;
    let labels = predicted_labels(pred, category);
    Ok((
        SampleRecord {
            id: sample.id.clone(),
            mean_iou: mean_part_iou(&parts, &sample.part_grid)?,
            mse: shape_mse(&pred.combined, &sample.occupancy)?,
            bce: reconstruction_bce(&pred.combined, &sample.occupancy),
            predicted: with_affordances.then(|| names(&labels)),
            truth: sample.affordance_names().into_iter().map(String::from).collect(),
        },
        labels,
    ))
}

/// Mean IoU, MSE and AP of `model` on `samples`.
pub fn evaluate(
    model: &SlotModel,
    samples: &[&VoxelSample],
    category: Category,
    with_affordances: bool,
    noise_seed: u64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty split".into()));
    }
    let mut records = Vec::with_capacity(samples.len());
    let mut pred_sets = Vec::with_capacity(samples.len());
    let mut gt_sets = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let noise = eval_noise(model, noise_seed, i);
        let pred = model.predict(&s.occupancy_values(), noise.as_ref())?;
        let (record, labels) = score_prediction(&pred, s, category, with_affordances)?;
        records.push(record);
        pred_sets.push(labels);
        gt_sets.push(s.affordance_set());
    }
    let n = records.len() as f64;
    let ap = if with_affordances {
        Some(set_ap(&pred_sets, &gt_sets)?)
    } else {
        None
    };
    Ok(EvalReport {
        samples: records.len(),
        mean_iou: records.iter().map(|r| r.mean_iou).sum::<f64>() / n,
        mse: records.iter().map(|r| r.mse).sum::<f64>() / n,
        bce: records.iter().map(|r| r.bce).sum::<f64>() / n,
        ap,
        records,
    })
}
