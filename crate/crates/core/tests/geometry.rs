use std::sync::Arc;

use partafford::geometry::{
    cuboid_distances, cuboid_loss, point_cuboid_distance, quat_to_rotation, quat_to_rotation_var,
    scale_penalty, surface_mask, voxel_positions, Cuboid, CuboidContext, CuboidWeighting, Vec3,
};
use partafford::tensor::{grad_check, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 {
            return q.map(|v| v / n);
        }
    }
}

fn random_cuboid(rng: &mut ChaCha8Rng) -> Cuboid {
    let c = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
    let s = std::array::from_fn(|_| rng.random_range(0.2..2.0));
    Cuboid::new(c, s, random_quat(rng)).unwrap()
}

#[test]
fn rotation_is_proper_orthogonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let r = quat_to_rotation(q).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        assert!((det - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cuboid_validation() {
    assert!(Cuboid::new([0.0; 3], [1.0, 0.0, 1.0], [1.0, 0.0, 0.0, 0.0]).is_err());
    assert!(Cuboid::new([0.0; 3], [1.0; 3], [2.0, 0.0, 0.0, 0.0]).is_err());
}

#[test]
fn distance_is_invariant_under_rigid_motion() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..500 {
        let cub = random_cuboid(&mut rng);
        let p: Vec3 = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
        let rot = random_quat(&mut rng);
        let t: Vec3 = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
        let r = quat_to_rotation(rot).unwrap();
        let moved: Vec3 = std::array::from_fn(|i| (0..3).map(|k| r[i][k] * p[k]).sum::<f64>() + t[i]);
        let a = point_cuboid_distance(p, &cub);
        let b = point_cuboid_distance(moved, &cub.transformed(rot, t).unwrap());
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn distance_is_continuous_across_faces() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let cub = random_cuboid(&mut rng);
        let r = cub.rotation_matrix();
        let axis = rng.random_range(0..3);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        // a point on the face, away from edges
        let mut local: Vec3 = std::array::from_fn(|k| rng.random_range(-0.8..0.8) * cub.scale[k]);
        local[axis] = side * cub.scale[axis];
        let world = |l: Vec3| -> Vec3 {
            std::array::from_fn(|i| (0..3).map(|k| r[i][k] * l[k]).sum::<f64>() + cub.center[i])
        };
        assert!(point_cuboid_distance(world(local), &cub) < 1e-12);
        for eps in [1e-4, 1e-7] {
            let mut inner = local;
            inner[axis] -= side * eps;
            let mut outer = local;
            outer[axis] += side * eps;
            assert!((point_cuboid_distance(world(inner), &cub) - eps).abs() < 1e-9);
            assert!((point_cuboid_distance(world(outer), &cub) - eps).abs() < 1e-9);
        }
    }
}

#[test]
fn rotation_op_gradient() {
    let q = Tensor::from_vec(vec![0.7, -0.3, 0.5, 0.2]).unwrap();
    let r = grad_check(
        |g, v| {
            let m = quat_to_rotation_var(g, v)?;
            let w = g.constant(Tensor::new(&[3, 3], (0..9).map(|i| i as f64 - 3.7).collect())?);
            let p = g.mul(m, w)?;
            g.reduce_sum(p)
        },
        &q,
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

fn sample_points(rng: &mut ChaCha8Rng, n: usize) -> Arc<Vec<Vec3>> {
    Arc::new((0..n).map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0))).collect())
}

#[test]
fn distance_op_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let points = sample_points(&mut rng, 40);
    let params = Tensor::from_vec(vec![0.3, -0.2, 0.1, 1.1, 0.7, 1.4, 0.9, 0.2, -0.3, 0.4]).unwrap();
    let r = grad_check(
        |g, v| {
            let c = g.slice(v, 0, 0, 3)?;
            let s = g.slice(v, 0, 3, 3)?;
            let q = g.slice(v, 0, 6, 4)?;
            let d = cuboid_distances(g, c, s, q, Arc::clone(&points))?;
            let w = g.constant(Tensor::new(&[40], (0..40).map(|i| (i % 7) as f64 * 0.3 - 0.5).collect())?);
            let p = g.mul(d, w)?;
            g.reduce_sum(p)
        },
        &params,
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

fn block_grid(res: usize, lo: [usize; 3], hi: [usize; 3]) -> Vec<bool> {
    let mut occ = vec![false; res * res * res];
    for x in lo[0]..hi[0] {
        for y in lo[1]..hi[1] {
            for z in lo[2]..hi[2] {
                occ[(x * res + y) * res + z] = true;
            }
        }
    }
    occ
}

#[test]
fn exactly_wrapped_part_has_zero_loss() {
    let res = 8;
    let occ = block_grid(res, [1, 2, 3], [5, 5, 6]);
    let ctx = CuboidContext::new(&surface_mask(&occ, res).unwrap());
    let mut g = Graph::new();
    let v: Vec<f64> = occ.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
    let values = g.constant(Tensor::new(&[1, 512], v).unwrap());
    let masks = g.constant(Tensor::ones(&[1, 512]));
    // voxel centers at integer positions, faces pass through the outer voxels
    let scales = g.constant(Tensor::new(&[1, 3], vec![1.5, 1.0, 1.0]).unwrap());
    let rots = g.constant(Tensor::new(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    let out = cuboid_loss(&mut g, values, masks, scales, rots, &ctx, CuboidWeighting::Masked).unwrap();
    assert_eq!(g.value(out.centers[0]).data(), &[2.5, 3.0, 4.0]);
    assert!(g.value(out.loss).item().abs() < 1e-12);
}

#[test]
fn empty_surface_gives_zero_loss() {
    let res = 4;
    let ctx = CuboidContext::new(&surface_mask(&[false; 64], res).unwrap());
    let mut g = Graph::new();
    let values = g.constant(Tensor::full(&[2, 64], 0.7));
    let masks = g.constant(Tensor::full(&[2, 64], 0.5));
    let scales = g.constant(Tensor::full(&[2, 3], 0.3));
    let rots = g.constant(Tensor::new(&[2, 4], vec![1.0, 0.2, 0.0, 0.0, 0.3, 0.0, 1.0, 0.0]).unwrap());
    let out = cuboid_loss(&mut g, values, masks, scales, rots, &ctx, CuboidWeighting::Masked).unwrap();
    assert_eq!(g.value(out.loss).item(), 0.0);
}

#[test]
fn single_surface_voxel_contribution() {
    let res = 8;
    let mut occ = vec![false; 512];
    let idx = (1 * 8 + 1) * 8 + 1;
    occ[idx] = true;
    let ctx = CuboidContext::new(&surface_mask(&occ, res).unwrap());
    let mut g = Graph::new();
    let mut v = vec![0.0; 512];
    v[idx] = 1.0;
    let values = g.constant(Tensor::new(&[1, 512], v).unwrap());
    let masks = g.constant(Tensor::ones(&[1, 512]));
    // center lands on the voxel itself; half-extent 2 puts each face 2 away
    let scales = g.constant(Tensor::full(&[1, 3], 2.0));
    let rots = g.constant(Tensor::new(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    let out = cuboid_loss(&mut g, values, masks, scales, rots, &ctx, CuboidWeighting::Masked).unwrap();
    assert!((g.value(out.loss).item() - 2.0 / 512.0).abs() < 1e-15);
}

#[test]
fn degenerate_slot_is_flagged() {
    let res = 4;
    let occ = block_grid(res, [1, 1, 1], [3, 3, 3]);
    let ctx = CuboidContext::new(&surface_mask(&occ, res).unwrap());
    let mut g = Graph::new();
    let values = g.constant(Tensor::zeros(&[1, 64]));
    let masks = g.constant(Tensor::ones(&[1, 64]));
    let scales = g.constant(Tensor::ones(&[1, 3]));
    let rots = g.constant(Tensor::new(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    let out = cuboid_loss(&mut g, values, masks, scales, rots, &ctx, CuboidWeighting::Masked).unwrap();
    assert_eq!(out.degenerate, vec![true]);
    assert_eq!(g.value(out.centers[0]).data(), &[1.5, 1.5, 1.5]);
}

#[test]
fn slot_count_mismatch_is_an_error() {
    let ctx = CuboidContext::new(&surface_mask(&[true; 8], 2).unwrap());
    let mut g = Graph::new();
    let values = g.constant(Tensor::ones(&[2, 8]));
    let masks = g.constant(Tensor::ones(&[2, 8]));
    let scales = g.constant(Tensor::ones(&[3, 3]));
    let rots = g.constant(Tensor::ones(&[2, 4]));
    assert!(cuboid_loss(&mut g, values, masks, scales, rots, &ctx, CuboidWeighting::Masked).is_err());
}

#[test]
fn scale_penalty_examples() {
    let mut g = Graph::new();
    for (shape, data, expect) in [
        ([1, 3], vec![1.0, 1.0, 1.0], 3.0),
        ([2, 3], vec![0.5; 6], 3.0),
        ([1, 3], vec![1.0, 2.0, 3.0], 6.0),
    ] {
        let s = g.constant(Tensor::new(&shape, data).unwrap());
        let p = scale_penalty(&mut g, s).unwrap();
        assert_eq!(g.value(p).item(), expect);
    }
}

#[test]
fn cuboid_loss_gradient() {
    let res = 6;
    let m = 2;
    let n = res * res * res;
    let occ = block_grid(res, [1, 1, 2], [5, 4, 5]);
    let ctx = CuboidContext::new(&surface_mask(&occ, res).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let values: Vec<f64> = (0..m * n).map(|_| rng.random_range(0.05..0.95)).collect();
    let masks: Vec<f64> = (0..m * n).map(|_| rng.random_range(0.05..0.95)).collect();
    let params: Vec<f64> = vec![
        1.3, 0.9, 1.7, 2.1, 1.2, 0.8, // scales
        0.9, 0.1, -0.2, 0.3, 0.8, -0.3, 0.4, 0.2, // rotations
    ];
    let build = |g: &mut Graph, vals: partafford::tensor::Var, p: partafford::tensor::Var| {
        let masks = g.constant(Tensor::new(&[m, n], masks.clone())?);
        let s = g.slice(p, 0, 0, 6)?;
        let s = g.reshape(s, &[m, 3])?;
        let q = g.slice(p, 0, 6, 8)?;
        let q = g.reshape(q, &[m, 4])?;
        let out = cuboid_loss(g, vals, masks, s, q, &ctx, CuboidWeighting::Masked)?;
        Ok(out.loss)
    };
    let vt = Tensor::new(&[m, n], values.clone()).unwrap();
    let pt = Tensor::from_vec(params.clone()).unwrap();
    let r = grad_check(
        |g, p| {
            let v = g.constant(vt.clone());
            build(g, v, p)
        },
        &pt,
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "params: {r:?}");
    let r = grad_check(
        |g, v| {
            let p = g.constant(pt.clone());
            build(g, v, p)
        },
        &vt,
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "values: {r:?}");
}

fn brute_surface(occ: &[bool], res: usize) -> Vec<bool> {
    let r = res as i64;
    let get = |x: i64, y: i64, z: i64| {
        if x < 0 || y < 0 || z < 0 || x >= r || y >= r || z >= r {
            false
        } else {
            occ[((x * r + y) * r + z) as usize]
        }
    };
    let mut out = Vec::with_capacity(occ.len());
    for x in 0..r {
        for y in 0..r {
            for z in 0..r {
                let nb = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                out.push(get(x, y, z) && nb.iter().any(|&(a, b, c)| !get(x + a, y + b, z + c)));
            }
        }
    }
    out
}

#[test]
fn positions_follow_flat_index() {
    let p = voxel_positions(3);
    assert_eq!(p[(2 * 3 + 1) * 3], [2.0, 1.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn surface_mask_matches_neighbor_scan(res in 1usize..7, seed in 0u64..10_000, density in 0.1f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let occ: Vec<bool> = (0..res * res * res).map(|_| rng.random_bool(density)).collect();
        let m = surface_mask(&occ, res).unwrap();
        let brute = brute_surface(&occ, res);
        prop_assert_eq!(m.flags(), brute.as_slice());
        prop_assert!(m.flags().iter().zip(&occ).all(|(&f, &o)| !f || o));
    }
}
