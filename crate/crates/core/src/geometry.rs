//! Quaternion-parameterized cuboids, point-to-face distances, surface masks
//! and the cuboid regularizer.
//!
//! Voxel grids are cubes of side `res` stored with flat index
//! `(x * res + y) * res + z`. The position of voxel `(x, y, z)` is its integer
//! index triple, so a cuboid's center, half-extents and distances are all in
//! voxel units.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{CustomOp, Graph, Tensor, Var};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

const MIN_QUAT_NORM: f64 = 1e-12;
/// Total weight below which a slot has no meaningful center.
pub const MIN_CENTER_WEIGHT: f64 = 1e-8;

/// Oriented box: center, strictly positive half-extents and a unit quaternion
/// `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cuboid {
    pub center: Vec3,
    pub scale: Vec3,
    pub rotation: [f64; 4],
}

impl Cuboid {
    pub fn new(center: Vec3, scale: Vec3, rotation: [f64; 4]) -> Result<Self> {
        if scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Invalid(format!("cuboid scale must be positive, got {scale:?}")));
        }
        let n = quat_norm(&rotation);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("cuboid rotation norm {n} is not 1")));
        }
        Ok(Self {
            center,
            scale,
            rotation,
        })
    }

    pub fn axis_aligned(center: Vec3, scale: Vec3) -> Result<Self> {
        Self::new(center, scale, [1.0, 0.0, 0.0, 0.0])
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_rotation(self.rotation).expect("unit quaternion")
    }

    /// Applies the rigid motion `p -> R p + t` to the cuboid.
    pub fn transformed(&self, rot: [f64; 4], t: Vec3) -> Result<Self> {
        let r = quat_to_rotation(rot)?;
        let c = add(mat_vec(&r, self.center), t);
        let q = normalize_quat(quat_mul(normalize_quat(rot)?, self.rotation))?;
        Self::new(c, self.scale, q)
    }

    /// The eight corners, ordered by the sign pattern of `(x, y, z)` with x
    /// varying slowest.
    pub fn corners(&self) -> [Vec3; 8] {
        let r = self.rotation_matrix();
        let mut out = [[0.0; 3]; 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let local = [
                if i & 4 != 0 { self.scale[0] } else { -self.scale[0] },
                if i & 2 != 0 { self.scale[1] } else { -self.scale[1] },
                if i & 1 != 0 { self.scale[2] } else { -self.scale[2] },
            ];
            *corner = add(mat_vec(&r, local), self.center);
        }
        out
    }
}

fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn normalize_quat(q: [f64; 4]) -> Result<[f64; 4]> {
    let n = quat_norm(&q);
    if !(n >= MIN_QUAT_NORM) {
        return Err(Error::DegenerateQuaternion(n));
    }
    Ok(q.map(|v| v / n))
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

fn rotation_of_unit(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Partial derivatives of [`rotation_of_unit`] with respect to `w, x, y, z`.
fn rotation_partials(q: [f64; 4]) -> [Mat3; 4] {
    let [w, x, y, z] = q;
    [
        [[0.0, -2.0 * z, 2.0 * y], [2.0 * z, 0.0, -2.0 * x], [-2.0 * y, 2.0 * x, 0.0]],
        [[0.0, 2.0 * y, 2.0 * z], [2.0 * y, -4.0 * x, -2.0 * w], [2.0 * z, 2.0 * w, -4.0 * x]],
        [[-4.0 * y, 2.0 * x, 2.0 * w], [2.0 * x, 0.0, 2.0 * z], [-2.0 * w, 2.0 * z, -4.0 * y]],
        [[-4.0 * z, -2.0 * w, 2.0 * x], [2.0 * w, -4.0 * z, 2.0 * y], [2.0 * x, 2.0 * y, 0.0]],
    ]
}

/// Rotation matrix of a (not necessarily unit) quaternion `(w, x, y, z)`.
pub fn quat_to_rotation(q: [f64; 4]) -> Result<Mat3> {
    Ok(rotation_of_unit(normalize_quat(q)?))
}

/// Pulls a gradient with respect to the rotation matrix back onto the raw
/// (unnormalized) quaternion.
fn quat_grad_from_rotation_grad(q: [f64; 4], grad_r: &Mat3) -> [f64; 4] {
    let n = quat_norm(&q);
    let u = q.map(|v| v / n);
    let partials = rotation_partials(u);
    let mut gu = [0.0; 4];
    for (k, pk) in partials.iter().enumerate() {
        for a in 0..3 {
            for b in 0..3 {
                gu[k] += grad_r[a][b] * pk[a][b];
            }
        }
    }
    let dot: f64 = (0..4).map(|k| gu[k] * u[k]).sum();
    [0, 1, 2, 3].map(|k| (gu[k] - u[k] * dot) / n)
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [0, 1, 2].map(|i| m[0][i] * v[0] + m[1][i] * v[1] + m[2][i] * v[2])
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

/// Distance from a point already expressed in the cuboid frame to the
/// nearest face, with its gradients with respect to the local point and the
/// half-extents.
fn local_distance(pl: Vec3, s: Vec3) -> (f64, Vec3, Vec3) {
    let a = pl.map(f64::abs);
    if (0..3).all(|k| a[k] <= s[k]) {
        // Inside: nearest face along the axis with the smallest margin; ties
        // go to the first axis.
        let mut j = 0;
        for k in 1..3 {
            if s[k] - a[k] < s[j] - a[j] {
                j = k;
            }
        }
        let mut gp = [0.0; 3];
        let mut gs = [0.0; 3];
        gp[j] = -sign(pl[j]);
        gs[j] = 1.0;
        (s[j] - a[j], gp, gs)
    } else {
        let q = [0, 1, 2].map(|k| (a[k] - s[k]).max(0.0));
        let d = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        let gp = [0, 1, 2].map(|k| q[k] / d * sign(pl[k]));
        let gs = [0, 1, 2].map(|k| -q[k] / d);
        (d, gp, gs)
    }
}

/// Euclidean distance from `p` to the closest face of `cub` (inside or
/// outside).
pub fn point_cuboid_distance(p: Vec3, cub: &Cuboid) -> f64 {
    let r = cub.rotation_matrix();
    let u = [p[0] - cub.center[0], p[1] - cub.center[1], p[2] - cub.center[2]];
    local_distance(mat_t_vec(&r, u), cub.scale).0
}

/// Accumulated gradients of `sum_i coef_i * d_i` with respect to the cuboid
/// parameters.
struct ParamGrads {
    center: Vec3,
    scale: Vec3,
    rot: Mat3,
}

impl ParamGrads {
    fn zero() -> Self {
        Self {
            center: [0.0; 3],
            scale: [0.0; 3],
            rot: [[0.0; 3]; 3],
        }
    }

    fn add_point(&mut self, coef: f64, u: Vec3, r: &Mat3, gp: Vec3, gs: Vec3) {
        // p' = R^T u with u = p - c
        let gc = mat_vec(r, gp);
        for k in 0..3 {
            self.center[k] -= coef * gc[k];
            self.scale[k] += coef * gs[k];
            for a in 0..3 {
                self.rot[a][k] += coef * gp[k] * u[a];
            }
        }
    }
}

fn cuboid_inputs(inputs: &[&Tensor]) -> (Vec3, Vec3, [f64; 4]) {
    let c = inputs[0].data();
    let s = inputs[1].data();
    let q = inputs[2].data();
    ([c[0], c[1], c[2]], [s[0], s[1], s[2]], [q[0], q[1], q[2], q[3]])
}

fn check_cuboid_vars(g: &Graph, center: Var, scale: Var, rotation: Var) -> Result<([f64; 4], Mat3)> {
    for (v, n, what) in [(center, 3, "center"), (scale, 3, "scale"), (rotation, 4, "rotation")] {
        if g.value(v).len() != n {
            return Err(shape_err(
                "cuboid",
                format!("{what} has {} entries, expected {n}", g.value(v).len()),
            ));
        }
    }
    let q = g.value(rotation).data();
    let q = [q[0], q[1], q[2], q[3]];
    let r = quat_to_rotation(q)?;
    Ok((q, r))
}

struct DistanceOp {
    points: Arc<Vec<Vec3>>,
}

impl CustomOp for DistanceOp {
    fn name(&self) -> &'static str {
        "point_cuboid_distance"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (c, s, q) = cuboid_inputs(inputs);
        let r = quat_to_rotation(q).expect("validated in forward");
        let mut acc = ParamGrads::zero();
        for (p, &gi) in self.points.iter().zip(grad) {
            if gi == 0.0 {
                continue;
            }
            let u = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            let (_, gp, gs) = local_distance(mat_t_vec(&r, u), s);
            acc.add_point(gi, u, &r, gp, gs);
        }
        vec![
            Some(acc.center.to_vec()),
            Some(acc.scale.to_vec()),
            Some(quat_grad_from_rotation_grad(q, &acc.rot).to_vec()),
        ]
    }
}

/// Differentiable distances `[n]` from fixed `points` to the cuboid given by
/// `center: [3]`, `scale: [3]` and a raw quaternion `rotation: [4]`
/// (normalized internally).
pub fn cuboid_distances(
    g: &mut Graph,
    center: Var,
    scale: Var,
    rotation: Var,
    points: Arc<Vec<Vec3>>,
) -> Result<Var> {
    let (_, r) = check_cuboid_vars(g, center, scale, rotation)?;
    let c = g.value(center).data().to_vec();
    let s = g.value(scale).data();
    let s = [s[0], s[1], s[2]];
    let d: Vec<f64> = points
        .iter()
        .map(|p| local_distance(mat_t_vec(&r, [p[0] - c[0], p[1] - c[1], p[2] - c[2]]), s).0)
        .collect();
    let value = Tensor::new(&[d.len()], d)?;
    g.custom(&[center, scale, rotation], value, Box::new(DistanceOp { points }))
}

struct QuatRotationOp;

impl CustomOp for QuatRotationOp {
    fn name(&self) -> &'static str {
        "quat_to_rotation"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let q = inputs[0].data();
        let gr = [
            [grad[0], grad[1], grad[2]],
            [grad[3], grad[4], grad[5]],
            [grad[6], grad[7], grad[8]],
        ];
        vec![Some(quat_grad_from_rotation_grad([q[0], q[1], q[2], q[3]], &gr).to_vec())]
    }
}

/// Differentiable rotation matrix `[3, 3]` of a raw quaternion `[4]`.
pub fn quat_to_rotation_var(g: &mut Graph, q: Var) -> Result<Var> {
    let d = g.value(q).data();
    if d.len() != 4 {
        return Err(shape_err("quat_to_rotation", format!("{} entries", d.len())));
    }
    let r = quat_to_rotation([d[0], d[1], d[2], d[3]])?;
    let value = Tensor::new(&[3, 3], r.iter().flatten().copied().collect())?;
    g.custom(&[q], value, Box::new(QuatRotationOp))
}

/// Binary per-voxel flags marking occupied voxels that touch empty space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurfaceMask {
    res: usize,
    flags: Vec<bool>,
}

impl SurfaceMask {
    pub fn res(&self) -> usize {
        self.res
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Flat indices of surface voxels in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }
}

/// A voxel is on the surface iff it is occupied and at least one of its six
/// face neighbors is empty or outside the grid.
pub fn surface_mask(occupancy: &[bool], res: usize) -> Result<SurfaceMask> {
    if occupancy.len() != res * res * res {
        return Err(shape_err(
            "surface_mask",
            format!("{} voxels for resolution {res}", occupancy.len()),
        ));
    }
    let at = |x: usize, y: usize, z: usize| occupancy[(x * res + y) * res + z];
    let mut flags = vec![false; occupancy.len()];
    for x in 0..res {
        for y in 0..res {
            for z in 0..res {
                if !at(x, y, z) {
                    continue;
                }
                let boundary = x == 0 || y == 0 || z == 0 || x + 1 == res || y + 1 == res || z + 1 == res;
                flags[(x * res + y) * res + z] = boundary
                    || !at(x - 1, y, z)
                    || !at(x + 1, y, z)
                    || !at(x, y - 1, z)
                    || !at(x, y + 1, z)
                    || !at(x, y, z - 1)
                    || !at(x, y, z + 1);
            }
        }
    }
    Ok(SurfaceMask { res, flags })
}

/// Integer coordinates of every voxel in flat-index order.
pub fn voxel_positions(res: usize) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(res * res * res);
    for x in 0..res {
        for y in 0..res {
            for z in 0..res {
                out.push([x as f64, y as f64, z as f64]);
            }
        }
    }
    out
}

/// Center of the grid in voxel coordinates.
pub fn grid_center(res: usize) -> Vec3 {
    let c = (res as f64 - 1.0) / 2.0;
    [c, c, c]
}

/// Weighted mean position. Falls back to the grid center (and reports
/// `degenerate = true`) when the total weight is at most
/// [`MIN_CENTER_WEIGHT`].
pub fn compute_center(weights: &[f64], positions: &[Vec3], res: usize) -> Result<(Vec3, bool)> {
    if weights.len() != positions.len() {
        return Err(shape_err("compute_center", "weights and positions differ in length"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > MIN_CENTER_WEIGHT) {
        return Ok((grid_center(res), true));
    }
    let mut c = [0.0; 3];
    for (w, p) in weights.iter().zip(positions) {
        for k in 0..3 {
            c[k] += w * p[k];
        }
    }
    Ok((c.map(|v| v / total), false))
}

/// Differentiable version of [`compute_center`] for `weights: [n]`.
pub fn compute_center_var(
    g: &mut Graph,
    weights: Var,
    positions: &Tensor,
    res: usize,
) -> Result<(Var, bool)> {
    let n = g.value(weights).len();
    if positions.shape() != [n, 3] {
        return Err(shape_err("compute_center", format!("positions {:?} for {n} weights", positions.shape())));
    }
    if !(g.value(weights).sum() > MIN_CENTER_WEIGHT) {
        let c = g.constant(Tensor::new(&[3], grid_center(res).to_vec())?);
        return Ok((c, true));
    }
    let w = g.reshape(weights, &[1, n])?;
    let p = g.constant(positions.clone());
    let num = g.matmul(w, p)?;
    let num = g.reshape(num, &[3])?;
    let den = g.reduce_sum(weights)?;
    Ok((g.div(num, den)?, false))
}

/// Positions as an `[n, 3]` tensor.
pub fn positions_tensor(positions: &[Vec3]) -> Tensor {
    Tensor::new(
        &[positions.len(), 3],
        positions.iter().flatten().copied().collect(),
    )
    .expect("finite positions")
}

struct SurfaceDistanceOp {
    points: Arc<Vec<Vec3>>,
    surface: Arc<Vec<usize>>,
}

impl CustomOp for SurfaceDistanceOp {
    fn name(&self) -> &'static str {
        "weighted_surface_distance"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let gout = grad[0];
        let w = inputs[0].data();
        let (c, s, q) = cuboid_inputs(&inputs[1..]);
        let r = quat_to_rotation(q).expect("validated in forward");
        let mut gw = vec![0.0; w.len()];
        let mut acc = ParamGrads::zero();
        for &i in self.surface.iter() {
            let p = self.points[i];
            let u = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            let (d, gp, gs) = local_distance(mat_t_vec(&r, u), s);
            gw[i] = gout * d;
            acc.add_point(gout * w[i], u, &r, gp, gs);
        }
        vec![
            Some(gw),
            Some(acc.center.to_vec()),
            Some(acc.scale.to_vec()),
            Some(quat_grad_from_rotation_grad(q, &acc.rot).to_vec()),
        ]
    }
}

/// `sum_i f(i) w_i d_i` over the surface voxels for one cuboid.
fn weighted_surface_distance(
    g: &mut Graph,
    weights: Var,
    center: Var,
    scale: Var,
    rotation: Var,
    points: &Arc<Vec<Vec3>>,
    surface: &Arc<Vec<usize>>,
) -> Result<Var> {
    let (_, r) = check_cuboid_vars(g, center, scale, rotation)?;
    let w = g.value(weights).data();
    let c = g.value(center).data();
    let s = g.value(scale).data();
    let s = [s[0], s[1], s[2]];
    let mut total = 0.0;
    for &i in surface.iter() {
        let p = points[i];
        let u = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        total += w[i] * local_distance(mat_t_vec(&r, u), s).0;
    }
    g.custom(
        &[weights, center, scale, rotation],
        Tensor::scalar(total),
        Box::new(SurfaceDistanceOp {
            points: Arc::clone(points),
            surface: Arc::clone(surface),
        }),
    )
}

/// Which per-voxel weight the cuboid regularizer uses for slot `m`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CuboidWeighting {
    /// `mask * value`: only the slot's own region pulls on its cuboid.
    #[default]
    Masked,
    /// The slot's raw reconstruction value.
    Raw,
}

/// Fixed per-grid inputs of the cuboid regularizer.
#[derive(Clone, Debug)]
pub struct CuboidContext {
    pub res: usize,
    pub points: Arc<Vec<Vec3>>,
    pub positions: Tensor,
    pub surface: Arc<Vec<usize>>,
}

impl CuboidContext {
    pub fn new(mask: &SurfaceMask) -> Self {
        let points = voxel_positions(mask.res());
        Self {
            res: mask.res(),
            positions: positions_tensor(&points),
            points: Arc::new(points),
            surface: Arc::new(mask.indices()),
        }
    }
}

/// Result of [`cuboid_loss`].
#[derive(Clone, Debug)]
pub struct CuboidLoss {
    pub loss: Var,
    /// Per-slot centers `[3]`.
    pub centers: Vec<Var>,
    /// Slots whose center fell back to the grid center.
    pub degenerate: Vec<bool>,
}

/// `(1 / N) * sum_m sum_i f(i) w_i^m d_i^m` with `N` the voxel count.
///
/// `values` and `masks` are `[M, N]`, `scales` `[M, 3]` and `rotations`
/// `[M, 4]`. Centers are the `w`-weighted mean voxel positions.
pub fn cuboid_loss(
    g: &mut Graph,
    values: Var,
    masks: Var,
    scales: Var,
    rotations: Var,
    ctx: &CuboidContext,
    weighting: CuboidWeighting,
) -> Result<CuboidLoss> {
    let vs = g.shape(values).to_vec();
    let n = ctx.points.len();
    if vs.len() != 2 || vs[1] != n || g.shape(masks) != vs.as_slice() {
        return Err(shape_err(
            "cuboid_loss",
            format!("values {vs:?}, masks {:?}, grid {n}", g.shape(masks)),
        ));
    }
    let m = vs[0];
    if g.shape(scales) != [m, 3] || g.shape(rotations) != [m, 4] {
        return Err(Error::Invalid(format!(
            "{m} slots but cuboid parameters of shape {:?} / {:?}",
            g.shape(scales),
            g.shape(rotations)
        )));
    }
    let weights = match weighting {
        CuboidWeighting::Masked => g.mul(values, masks)?,
        CuboidWeighting::Raw => values,
    };
    let mut terms = Vec::with_capacity(m);
    let mut centers = Vec::with_capacity(m);
    let mut degenerate = Vec::with_capacity(m);
    for slot in 0..m {
        let w = g.slice(weights, 0, slot, 1)?;
        let w = g.reshape(w, &[n])?;
        let (c, deg) = compute_center_var(g, w, &ctx.positions, ctx.res)?;
        let s = g.slice(scales, 0, slot, 1)?;
        let s = g.reshape(s, &[3])?;
        let q = g.slice(rotations, 0, slot, 1)?;
        let q = g.reshape(q, &[4])?;
        terms.push(weighted_surface_distance(g, w, c, s, q, &ctx.points, &ctx.surface)?);
        centers.push(c);
        degenerate.push(deg);
    }
    let all = g.concat(&terms, 0)?;
    let total = g.reduce_sum(all)?;
    let loss = g.scale(total, 1.0 / n as f64)?;
    Ok(CuboidLoss {
        loss,
        centers,
        degenerate,
    })
}

/// `sum_m ||s^m||_1` for `scales: [M, 3]`.
pub fn scale_penalty(g: &mut Graph, scales: Var) -> Result<Var> {
    let a = g.abs(scales)?;
    g.reduce_sum(a)
}
