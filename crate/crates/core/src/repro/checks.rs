//! Property suites behind the non-training recipes. Each returns named
//! metrics that the recipe bounds are applied to.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian_min_cost, mean_part_iou, set_ap, CostMatrix, PartAssignment};
use crate::data::{
    augment_remove_parts, decode_sample, encode_sample, generate_dataset, generate_object, Category, Dataset,
    DatasetSpec, GenConfig, SplitSizes,
};
use crate::error::Result;
use crate::geometry::{point_cuboid_distance, Cuboid, Vec3};
use crate::losses::{set_prediction_loss, total_loss, LossOptions, LossTarget, LossWeights, MatchCost};
use crate::model::{ModelConfig, SlotModel};
use crate::tensor::{grad_check, grad_check_params, GradCheckReport, Graph, GruWeights, Tensor, Var};
use crate::train::{train, Checkpoint, StageConfig, TrainConfig};

pub type Metrics = BTreeMap<String, f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Gradients,
    Hungarian,
    Geometry,
    Normalization,
    Determinism,
    Metrics,
}

impl Check {
    pub fn run(self) -> Result<Metrics> {
        match self {
            Check::Gradients => gradients(),
            Check::Hungarian => hungarian(),
            Check::Geometry => geometry(),
            Check::Normalization => normalization(),
            Check::Determinism => determinism(),
            Check::Metrics => metric_sanity(),
        }
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("finite")
}

/// Weighted sum with fixed weights so every output coordinate reaches the
/// checked scalar.
fn probe(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect())?;
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.reduce_sum(p)
}

type OpFn = Box<dyn Fn(&mut Graph, Var, &[Var]) -> Result<Var>>;

/// Finite-difference check of every differentiable op and of the full
/// stage-2 loss of a toy model.
fn gradients() -> Result<Metrics> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&[2, 3], &mut rng);
    let b = rand_tensor(&[2, 3], &mut rng);
    let row = rand_tensor(&[3], &mut rng);
    let positive = Tensor::new(&[2, 3], a.data().iter().map(|v| v.abs() + 0.5).collect())?;
    let off_kink = Tensor::new(&[2, 3], a.data().iter().map(|v| if v.abs() < 0.05 { 0.3 } else { *v }).collect())?;
    let m34 = rand_tensor(&[3, 4], &mut rng);
    let ln = rand_tensor(&[3, 5], &mut rng);
    let (gain, bias) = (rand_tensor(&[5], &mut rng), rand_tensor(&[5], &mut rng));
    let vol = rand_tensor(&[2, 2, 5, 4, 3], &mut rng);
    let kernel = rand_tensor(&[3, 2, 3, 3, 3], &mut rng);
    let kb = rand_tensor(&[3], &mut rng);
    let small = rand_tensor(&[3, 2, 3, 2], &mut rng);
    let tkernel = rand_tensor(&[3, 2, 4, 4, 4], &mut rng);
    let tb = rand_tensor(&[2], &mut rng);
    let gru: Vec<Tensor> = (0..3)
        .flat_map(|_| [rand_tensor(&[6, 3], &mut rng), rand_tensor(&[3], &mut rng)])
        .collect();
    let (h0, x0) = (rand_tensor(&[2, 3], &mut rng), rand_tensor(&[2, 3], &mut rng));

    // (name, checked input, constants, op)
    let cases: Vec<(&str, Tensor, Vec<Tensor>, OpFn)> = vec![
        ("add", a.clone(), vec![b.clone()], Box::new(|g, x, c| g.add(x, c[0]))),
        ("add broadcast", row.clone(), vec![b.clone()], Box::new(|g, x, c| g.add(c[0], x))),
        ("sub", a.clone(), vec![row.clone()], Box::new(|g, x, c| g.sub(c[0], x))),
        ("mul", row.clone(), vec![b.clone()], Box::new(|g, x, c| g.mul(c[0], x))),
        ("div numerator", a.clone(), vec![positive.clone()], Box::new(|g, x, c| g.div(x, c[0]))),
        ("div denominator", positive.clone(), vec![a.clone()], Box::new(|g, x, c| g.div(c[0], x))),
        ("relu", off_kink, vec![], Box::new(|g, x, _| g.relu(x))),
        ("sigmoid", a.clone(), vec![], Box::new(|g, x, _| g.sigmoid(x))),
        ("tanh", a.clone(), vec![], Box::new(|g, x, _| g.tanh(x))),
        ("softplus", a.clone(), vec![], Box::new(|g, x, _| g.softplus(x))),
        ("exp", a.clone(), vec![], Box::new(|g, x, _| g.exp(x))),
        ("log", positive.clone(), vec![], Box::new(|g, x, _| g.log(x))),
        ("sqrt", positive.clone(), vec![], Box::new(|g, x, _| g.sqrt(x))),
        ("clamp", a.clone(), vec![], Box::new(|g, x, _| g.clamp(x, -0.5, 0.5))),
        (
            "scale and offset",
            a.clone(),
            vec![],
            Box::new(|g, x, _| {
                let s = g.scale(x, -2.5)?;
                g.offset(s, 1.0)
            }),
        ),
        ("reduce_mean", a.clone(), vec![], Box::new(|g, x, _| g.reduce_mean(x))),
        ("reduce_sum_axis", a.clone(), vec![], Box::new(|g, x, _| g.reduce_sum_axis(x, 0))),
        ("broadcast_to", row.clone(), vec![], Box::new(|g, x, _| g.broadcast_to(x, &[4, 3]))),
        ("reshape", a.clone(), vec![], Box::new(|g, x, _| g.reshape(x, &[3, 2]))),
        ("transpose", a.clone(), vec![], Box::new(|g, x, _| g.transpose(x))),
        ("softmax", a.clone(), vec![], Box::new(|g, x, _| g.softmax_along(x, 0))),
        ("log_softmax", a.clone(), vec![], Box::new(|g, x, _| g.log_softmax_along(x, 1))),
        ("slice", a.clone(), vec![], Box::new(|g, x, _| g.slice(x, 1, 1, 2))),
        ("concat", a.clone(), vec![b.clone()], Box::new(|g, x, c| g.concat(&[c[0], x, x], 1))),
        ("matmul lhs", a.clone(), vec![m34.clone()], Box::new(|g, x, c| g.matmul(x, c[0]))),
        ("matmul rhs", m34, vec![a.clone()], Box::new(|g, x, c| g.matmul(c[0], x))),
        (
            "layer_norm",
            ln.clone(),
            vec![gain.clone(), bias.clone()],
            Box::new(|g, x, c| g.layer_norm(x, 1, c[0], c[1])),
        ),
        (
            "layer_norm gain",
            gain,
            vec![ln, bias],
            Box::new(|g, x, c| g.layer_norm(c[0], 1, x, c[1])),
        ),
        (
            "conv3d",
            vol.clone(),
            vec![kernel.clone(), kb.clone()],
            Box::new(|g, x, c| g.conv3d(x, c[0], Some(c[1]), 2, 1)),
        ),
        (
            "conv3d kernel",
            kernel,
            vec![vol, kb],
            Box::new(|g, x, c| g.conv3d(c[0], x, Some(c[1]), 1, 1)),
        ),
        (
            "conv_transpose3d",
            small.clone(),
            vec![tkernel.clone(), tb.clone()],
            Box::new(|g, x, c| g.conv_transpose3d(x, c[0], Some(c[1]), 2, 1)),
        ),
        (
            "conv_transpose3d kernel",
            tkernel,
            vec![small, tb],
            Box::new(|g, x, c| g.conv_transpose3d(c[0], x, Some(c[1]), 2, 1)),
        ),
        (
            "gru input",
            x0,
            [vec![h0.clone()], gru.clone()].concat(),
            Box::new(|g, x, c| g.gru_cell(x, c[0], &gru_weights(&c[1..]))),
        ),
        (
            "gru hidden",
            h0,
            [vec![rand_tensor(&[2, 3], &mut rng)], gru].concat(),
            Box::new(|g, x, c| g.gru_cell(c[0], x, &gru_weights(&c[1..]))),
        ),
    ];

    let mut ops_error: f64 = 0.0;
    for (_, x, consts, op) in &cases {
        let r = grad_check(
            |g, v| {
                let c: Vec<Var> = consts.iter().map(|t| g.constant(t.clone())).collect();
                let y = op(g, v, &c)?;
                probe(g, y)
            },
            x,
            1e-5,
        )?;
        ops_error = ops_error.max(r.max_rel_error);
    }

    let loss = stage_two_loss_check()?;
    let mut m = Metrics::new();
    m.insert("ops_checked".into(), cases.len() as f64);
    m.insert("ops_max_rel_error".into(), ops_error);
    m.insert("loss_max_rel_error".into(), loss.max_rel_error);
    m.insert("loss_kink_fraction".into(), loss.kinks as f64 / (loss.checked + loss.kinks).max(1) as f64);
    m.insert("max_rel_error".into(), ops_error.max(loss.max_rel_error));
    m.insert("seconds".into(), start.elapsed().as_secs_f64());
    Ok(m)
}

fn gru_weights(c: &[Var]) -> GruWeights {
    GruWeights {
        w_z: c[0],
        b_z: c[1],
        w_r: c[2],
        b_r: c[3],
        w_h: c[4],
        b_h: c[5],
    }
}

/// Full stage-2 loss at 8^3, D = 16, with the set assignment frozen. Biases
/// are jittered so relu inputs do not sit exactly on the kink.
fn stage_two_loss_check() -> Result<GradCheckReport> {
    let mut model = SlotModel::new(ModelConfig {
        slots: 4,
        ..ModelConfig::toy(8, 16)
    })?;
    let sample = generate_object(Category::Sittable, 3, &GenConfig::with_res(8))?;
    let target = LossTarget::new(&sample, Category::Sittable)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise = model.sample_noise(&mut rng).expect("slot attention samples noise");
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let p = model.params.get_mut(id);
        if p.name().ends_with(".bias") {
            for v in p.value_mut().data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
    }
    let (opts, w) = (LossOptions::default(), LossWeights::default());
    let mut g = Graph::new();
    let out = model.forward(&mut g, &target.occupancy, Some(&noise))?;
    let frozen = total_loss(&mut g, &out, &target, &w, &opts, None)?.matching;
    let f = |g: &mut Graph, store: &_| {
        let out = model.forward_with(store, g, &target.occupancy, Some(&noise))?;
        Ok(total_loss(g, &out, &target, &w, &opts, Some(&frozen))?.total)
    };
    grad_check_params(f, &model.params, 1e-5, 8)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Minimum over all injective maps of the smaller side into the larger.
fn brute_min(cost: &[Vec<f64>]) -> f64 {
    let (r, c) = (cost.len(), cost[0].len());
    let big = r.max(c);
    permutations(big)
        .into_iter()
        .map(|p| {
            if r <= c {
                (0..r).map(|i| cost[i][p[i]]).sum::<f64>()
            } else {
                (0..c).map(|j| cost[p[j]][j]).sum::<f64>()
            }
        })
        .fold(f64::INFINITY, f64::min)
}

/// Solver against exhaustive search, and the set loss against the minimum
/// over every slot permutation.
fn hungarian() -> Result<Metrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut cases, mut mismatches) = (0usize, 0usize);
    for rows in 1..=6 {
        for cols in 1..=6 {
            for _ in 0..200 {
                // dyadic entries keep every partial sum exact
                let c: Vec<Vec<f64>> = (0..rows)
                    .map(|_| (0..cols).map(|_| rng.random_range(0..4096) as f64 / 64.0).collect())
                    .collect();
                let a = hungarian_min_cost(&CostMatrix::from_rows(&c)?);
                cases += 1;
                mismatches += usize::from(a.total_cost != brute_min(&c));
            }
        }
    }

    let mut set_err: f64 = 0.0;
    for m in 1..=5 {
        let k = 5;
        for _ in 0..200 {
            let logits = rand_tensor(&[m, k], &mut rng);
            let n_gt = rng.random_range(0..=m);
            let mut gt: Vec<usize> = (1..k).collect();
            gt.truncate(n_gt.min(k - 1));
            for cost in [MatchCost::CrossEntropy, MatchCost::Mse] {
                let mut g = Graph::new();
                let l = g.constant(logits.clone());
                let (loss, _) = set_prediction_loss(&mut g, l, &gt, cost, None)?;
                let got = g.value(loss).data()[0];
                let mut padded = gt.clone();
                padded.resize(m, 0);
                let best = permutations(m)
                    .into_iter()
                    .map(|p| {
                        (0..m)
                            .map(|i| slot_cost(&logits.data()[i * k..(i + 1) * k], padded[p[i]], cost))
                            .sum::<f64>()
                            / m as f64
                    })
                    .fold(f64::INFINITY, f64::min);
                set_err = set_err.max((got - best).abs());
            }
        }
    }
    let mut out = Metrics::new();
    out.insert("matrices".into(), cases as f64);
    out.insert("cost_mismatches".into(), mismatches as f64);
    out.insert("set_loss_max_error".into(), set_err);
    Ok(out)
}

/// Per-slot cost written out directly: cross entropy, or the mean
/// squared error of the softmax against the one-hot target.
fn slot_cost(row: &[f64], class: usize, cost: MatchCost) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let p: Vec<f64> = row.iter().map(|v| (v - max).exp() / z).collect();
    match cost {
        MatchCost::CrossEntropy => -p[class].ln(),
        MatchCost::Mse => {
            p.iter()
                .enumerate()
                .map(|(j, &pj)| (pj - f64::from(u8::from(j == class))).powi(2))
                .sum::<f64>()
                / row.len() as f64
        }
    }
}

fn random_unit_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = [0; 4].map(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            let q = q.map(|v| v / n);
            return if q[0] < 0.0 { q.map(|v| -v) } else { q };
        }
    }
}

/// Rotates `v` by `-angle` about the quaternion's axis (Rodrigues), which
/// is the inverse rotation written without a matrix.
fn inverse_rotate(q: [f64; 4], v: Vec3) -> Vec3 {
    let s = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if s < 1e-15 {
        return v;
    }
    let angle = -2.0 * s.atan2(q[0]);
    let k = [q[1] / s, q[2] / s, q[3] / s];
    let kxv = [k[1] * v[2] - k[2] * v[1], k[2] * v[0] - k[0] * v[2], k[0] * v[1] - k[1] * v[0]];
    let kv = k[0] * v[0] + k[1] * v[1] + k[2] * v[2];
    let (c, sn) = (angle.cos(), angle.sin());
    [0, 1, 2].map(|i| v[i] * c + kxv[i] * sn + k[i] * kv * (1.0 - c))
}

/// Distance to the surface of the box `[-s, s]`: to the nearest face plane
/// from inside, to the clamped point from outside.
fn axis_aligned_distance(p: Vec3, s: Vec3) -> f64 {
    let inside = (0..3).all(|k| p[k].abs() <= s[k]);
    if inside {
        (0..3).map(|k| s[k] - p[k].abs()).fold(f64::INFINITY, f64::min)
    } else {
        (0..3)
            .map(|k| (p[k] - p[k].clamp(-s[k], s[k])).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn random_cuboid(rng: &mut ChaCha8Rng) -> Result<Cuboid> {
    Cuboid::new(
        [0; 3].map(|_| rng.random_range(-10.0..10.0)),
        [0; 3].map(|_| rng.random_range(0.25..6.0)),
        random_unit_quat(rng),
    )
}

fn geometry() -> Result<Metrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut oracle, mut motion, mut boundary): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..10_000 {
        let cub = random_cuboid(&mut rng)?;
        let p: Vec3 = [0; 3].map(|_| rng.random_range(-16.0..16.0));
        let d = point_cuboid_distance(p, &cub);
        let local = inverse_rotate(cub.rotation, [0, 1, 2].map(|k| p[k] - cub.center[k]));
        oracle = oracle.max((d - axis_aligned_distance(local, cub.scale)).abs());

        let rot = random_unit_quat(&mut rng);
        let t: Vec3 = [0; 3].map(|_| rng.random_range(-5.0..5.0));
        let moved = cub.transformed(rot, t)?;
        let r = crate::geometry::quat_to_rotation(rot)?;
        let pm: Vec3 = [0, 1, 2].map(|i| (0..3).map(|j| r[i][j] * p[j]).sum::<f64>() + t[i]);
        motion = motion.max((point_cuboid_distance(pm, &moved) - d).abs());

        // a point on a random face, mapped to world coordinates
        let axis = rng.random_range(0..3);
        let mut l: Vec3 = [0, 1, 2].map(|k| rng.random_range(-cub.scale[k]..cub.scale[k]));
        l[axis] = if rng.random_bool(0.5) { cub.scale[axis] } else { -cub.scale[axis] };
        let rc = cub.rotation_matrix();
        let w: Vec3 = [0, 1, 2].map(|i| (0..3).map(|j| rc[i][j] * l[j]).sum::<f64>() + cub.center[i]);
        boundary = boundary.max(point_cuboid_distance(w, &cub));
    }
    let mut m = Metrics::new();
    m.insert("oracle_max_error".into(), oracle);
    m.insert("rigid_motion_max_error".into(), motion);
    m.insert("surface_max_distance".into(), boundary);
    Ok(m)
}

/// Mask and attention normalization and the range of the combination over
/// random inputs.
fn normalization() -> Result<Metrics> {
    let model = SlotModel::new(ModelConfig {
        slots: 4,
        iters: 3,
        ..ModelConfig::toy(16, 16)
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut mask_err, mut att_err, mut outside): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let n = model.config.voxels();
    let m = model.config.slots;
    for _ in 0..100 {
        let density = rng.random_range(0.05..0.6);
        let occ: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(density)))).collect();
        let noise = model.sample_noise(&mut rng);
        let p = model.predict(&occ, noise.as_ref())?;
        for i in 0..n {
            let s: f64 = (0..m).map(|k| p.masks[k * n + i]).sum();
            mask_err = mask_err.max((s - 1.0).abs());
            let c = p.combined[i];
            outside = outside.max((-c).max(c - 1.0).max(0.0));
        }
        for att in &p.attention {
            for row in att.chunks(m) {
                att_err = att_err.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let mut out = Metrics::new();
    out.insert("mask_sum_max_error".into(), mask_err);
    out.insert("attention_sum_max_error".into(), att_err);
    out.insert("combined_out_of_range".into(), outside);
    Ok(out)
}

fn determinism() -> Result<Metrics> {
    let tmp = tempfile::tempdir()?;
    let dir = tmp.path();
    let spec = DatasetSpec {
        category: Category::Sittable,
        count: 10,
        seed: 17,
        split: Some(SplitSizes { train: 6, val: 2, test: 2 }),
        gen: GenConfig::with_res(8),
    };
    let (a_dir, b_dir) = (dir.join("a"), dir.join("b"));
    generate_dataset(&spec, &a_dir)?;
    generate_dataset(&spec, &b_dir)?;
    let mut file_mismatch = 0usize;
    for entry in std::fs::read_dir(a_dir.join("samples"))? {
        let path = entry?.path();
        let a = std::fs::read(&path)?;
        let b = std::fs::read(b_dir.join("samples").join(path.file_name().expect("file")))?;
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let round = encode_sample(&decode_sample(&a, id)?)?;
        file_mismatch += usize::from(a != b || round != a);
    }
    file_mismatch += usize::from(
        std::fs::read(a_dir.join(crate::data::MANIFEST_FILE))? != std::fs::read(b_dir.join(crate::data::MANIFEST_FILE))?,
    );

    let data = Dataset::load(&a_dir)?;
    let cfg = TrainConfig {
        batch_size: 2,
        stage1: StageConfig { lr: 1e-3, epochs: 2 },
        stage2: StageConfig { lr: 5e-4, epochs: 1 },
        model: ModelConfig::toy(8, 16),
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let r1 = train(&cfg, &data, Some(&dir.join("run1")), &mut |_| {})?;
    let r2 = train(&cfg, &data, Some(&dir.join("run2")), &mut |_| {})?;
    let h1 = std::fs::read(dir.join("run1").join(crate::train::HISTORY_FILE))?;
    let h2 = std::fs::read(dir.join("run2").join(crate::train::HISTORY_FILE))?;
    let history_mismatch = usize::from(h1 != h2 || r1.history != r2.history);

    let bytes = r1.last.to_bytes();
    let back = Checkpoint::from_bytes(&bytes)?;
    let ckpt_mismatch = usize::from(back.to_bytes() != bytes || back != r1.last || r2.last.to_bytes() != bytes);

    let mut gen = GenConfig::default();
    gen.sittable.p_backrest = 1.0;
    gen.sittable.p_armrests = 1.0;
    let sample = generate_object(Category::Sittable, 9, &gen)?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let hits: usize = (0..10_000)
        .map(|_| usize::from(augment_remove_parts(&sample, &mut rng, 0.3).1))
        .sum();
    tmp.close()?;

    let mut m = Metrics::new();
    m.insert("dataset_mismatches".into(), file_mismatch as f64);
    m.insert("history_mismatch".into(), history_mismatch as f64);
    m.insert("checkpoint_mismatch".into(), ckpt_mismatch as f64);
    m.insert("augmentation_rate".into(), hits as f64 / 10_000.0);
    Ok(m)
}

/// Part IoU on oracle, disjoint and slot-permuted predictions, and set AP on
/// a hand-scored fixture.
fn metric_sanity() -> Result<Metrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut oracle_err, mut disjoint, mut perm_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..100 {
        let n = 216;
        let grid: Vec<u8> = (0..n).map(|_| rng.random_range(0..5)).collect();
        if grid.iter().all(|&k| k == 0) {
            continue;
        }
        let exact = PartAssignment {
            slots: 5,
            slot: grid.iter().map(|&k| k as usize).collect(),
            occupied: grid.iter().map(|&k| k != 0).collect(),
        };
        oracle_err = oracle_err.max((mean_part_iou(&exact, &grid)? - 1.0).abs());

        let apart = PartAssignment {
            slots: 5,
            slot: vec![0; n],
            occupied: grid.iter().map(|&k| k == 0).collect(),
        };
        disjoint = disjoint.max(mean_part_iou(&apart, &grid)?);

        let noisy = PartAssignment {
            slots: 5,
            slot: (0..n).map(|_| rng.random_range(0..5)).collect(),
            occupied: (0..n).map(|_| rng.random_bool(0.7)).collect(),
        };
        let mut permuted = noisy.clone();
        let perm = [2usize, 4, 0, 1, 3];
        for s in permuted.slot.iter_mut() {
            *s = perm[*s];
        }
        perm_err = perm_err.max((mean_part_iou(&noisy, &grid)? - mean_part_iou(&permuted, &grid)?).abs());
    }

    // 10 samples; entries marked * are exact matches: 6 of 10
    let gt: Vec<Vec<u8>> = vec![
        vec![1, 4],
        vec![1, 4, 5, 7],
        vec![1, 7],
        vec![2, 7],
        vec![2],
        vec![3, 6],
        vec![3],
        vec![1, 4, 7],
        vec![2, 7],
        vec![3, 6, 8],
    ];
    let pred: Vec<Vec<u8>> = vec![
        vec![4, 1],       // *
        vec![1, 4, 5],    // missing framework
        vec![7, 1, 7],    // * duplicates collapse
        vec![2, 7],       // *
        vec![2, 7],       // extra
        vec![6, 3],       // *
        vec![],           // empty
        vec![1, 4, 7, 0], // * null dropped
        vec![2, 7],       // *
        vec![3, 6],       // missing containment
    ];
    let ap = set_ap(&pred, &gt)?;
    let mut m = Metrics::new();
    m.insert("oracle_iou_error".into(), oracle_err);
    m.insert("disjoint_iou".into(), disjoint);
    m.insert("permutation_iou_error".into(), perm_err);
    m.insert("set_ap_error".into(), (ap - 0.6).abs());
    Ok(m)
}
