use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AffordanceVocab, Category, VoxelSample};
use crate::error::{Error, Result};

/// Closed interval sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    fn sample(self, rng: &mut impl Rng) -> f64 {
        if self.1 > self.0 {
            rng.random_range(self.0..=self.1)
        } else {
            self.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

/// An oriented box in unit object coordinates (`[0, 1]^3`, y up), optionally
/// rotated about one axis through its own center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub center: [f64; 3],
    pub half: [f64; 3],
    pub rotation: Option<(Axis, f64)>,
}

impl Placement {
    fn aligned(center: [f64; 3], half: [f64; 3]) -> Self {
        Self {
            center,
            half,
            rotation: None,
        }
    }

    /// Columns are the box's local axes in object coordinates.
    fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let Some((axis, a)) = self.rotation else {
            return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        };
        let (s, c) = a.sin_cos();
        match axis {
            Axis::X => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
            Axis::Y => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
            Axis::Z => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    fn contains(&self, r: &[[f64; 3]; 3], p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        (0..3).all(|k| {
            let local = r[0][k] * d[0] + r[1][k] * d[1] + r[2][k] * d[2];
            local.abs() <= self.half[k]
        })
    }

    /// The eight corners in object coordinates.
    pub fn corners(&self) -> Vec<[f64; 3]> {
        let r = self.rotation_matrix();
        (0..8)
            .map(|i| {
                let l = [
                    if i & 4 != 0 { self.half[0] } else { -self.half[0] },
                    if i & 2 != 0 { self.half[1] } else { -self.half[1] },
                    if i & 1 != 0 { self.half[2] } else { -self.half[2] },
                ];
                std::array::from_fn(|a| self.center[a] + (0..3).map(|k| r[a][k] * l[k]).sum::<f64>())
            })
            .collect()
    }
}

/// One part instance: a group of boxes sharing an affordance.
#[derive(Clone, Debug, PartialEq)]
pub struct PartBlueprint {
    pub affordance: u8,
    pub boxes: Vec<Placement>,
    pub removable: bool,
}

/// Uniform ranges for chair-like objects, unit coordinates, half-extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SittableRanges {
    pub seat_height: Range,
    pub seat_half_x: Range,
    pub seat_half_z: Range,
    pub seat_half_thickness: Range,
    pub leg_half_width: Range,
    pub backrest_top: Range,
    pub backrest_half_thickness: Range,
    pub armrest_height: Range,
    pub armrest_half_thickness: Range,
    pub p_backrest: f64,
    pub p_armrests: f64,
}

impl Default for SittableRanges {
    fn default() -> Self {
        Self {
            seat_height: Range(0.38, 0.5),
            seat_half_x: Range(0.22, 0.36),
            seat_half_z: Range(0.22, 0.34),
            seat_half_thickness: Range(0.03, 0.05),
            leg_half_width: Range(0.03, 0.045),
            backrest_top: Range(0.8, 0.95),
            backrest_half_thickness: Range(0.03, 0.045),
            armrest_height: Range(0.12, 0.2),
            armrest_half_thickness: Range(0.03, 0.045),
            p_backrest: 0.8,
            p_armrests: 0.5,
        }
    }
}

/// Uniform ranges for table-like objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupportRanges {
    pub top_height: Range,
    pub top_half_x: Range,
    pub top_half_z: Range,
    pub top_half_thickness: Range,
    pub leg_half_width: Range,
}

impl Default for SupportRanges {
    fn default() -> Self {
        Self {
            top_height: Range(0.55, 0.8),
            top_half_x: Range(0.3, 0.45),
            top_half_z: Range(0.22, 0.38),
            top_half_thickness: Range(0.025, 0.045),
            leg_half_width: Range(0.03, 0.05),
        }
    }
}

/// Uniform ranges for cabinet-like objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenableRanges {
    pub width: Range,
    pub height: Range,
    pub depth: Range,
    pub wall_half_thickness: Range,
    pub door_half_thickness: Range,
    /// Opening angle in degrees.
    pub door_angle: Range,
    pub handle_half_width: Range,
    pub handle_half_height: Range,
    pub handle_half_depth: Range,
}

impl Default for OpenableRanges {
    fn default() -> Self {
        Self {
            width: Range(0.36, 0.56),
            height: Range(0.36, 0.6),
            depth: Range(0.2, 0.3),
            wall_half_thickness: Range(0.025, 0.04),
            door_half_thickness: Range(0.025, 0.04),
            door_angle: Range(0.0, 90.0),
            handle_half_width: Range(0.02, 0.03),
            handle_half_height: Range(0.06, 0.12),
            handle_half_depth: Range(0.02, 0.03),
        }
    }
}

/// Generation parameters. Datasets are reproducible from `(GenConfig, seed)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub res: usize,
    /// Smallest half-extent, in voxels, so thin parts survive coarse grids.
    pub min_half_voxels: f64,
    pub sittable: SittableRanges,
    pub support: SupportRanges,
    pub openable: OpenableRanges,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            res: 32,
            min_half_voxels: 1.0,
            sittable: SittableRanges::default(),
            support: SupportRanges::default(),
            openable: OpenableRanges::default(),
        }
    }
}

impl GenConfig {
    pub fn with_res(res: usize) -> Self {
        Self {
            res,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn label(name: &str) -> u8 {
    AffordanceVocab::id(name).expect("label in vocabulary")
}

struct Sampler<'a, R: Rng> {
    rng: &'a mut R,
    min_half: f64,
}

impl<R: Rng> Sampler<'_, R> {
    fn any(&mut self, r: Range) -> f64 {
        r.sample(self.rng)
    }

    /// A half-extent, floored at the configured voxel minimum.
    fn half(&mut self, r: Range) -> f64 {
        r.sample(self.rng).max(self.min_half)
    }

    fn coin(&mut self, p: f64) -> bool {
        self.rng.random_bool(p.clamp(0.0, 1.0))
    }
}

fn posts(xs: [f64; 2], zs: [f64; 2], w: f64, bottom: f64, top: f64) -> Vec<Placement> {
    let mut out = Vec::new();
    for &x in &xs {
        for &z in &zs {
            out.push(Placement::aligned([x, (bottom + top) / 2.0, z], [w, (top - bottom) / 2.0, w]));
        }
    }
    out
}

const FLOOR: f64 = 0.02;

fn sittable(s: &mut Sampler<impl Rng>, r: &SittableRanges) -> Vec<PartBlueprint> {
    let ys = s.any(r.seat_height);
    let sx = s.half(r.seat_half_x);
    let sz = s.half(r.seat_half_z);
    let st = s.half(r.seat_half_thickness);
    let lw = s.half(r.leg_half_width);
    let seat_top = ys + st;
    let mut parts = vec![PartBlueprint {
        affordance: label("sittable"),
        boxes: vec![Placement::aligned([0.5, ys, 0.5], [sx, st, sz])],
        removable: false,
    }];

    let bt = s.half(r.backrest_half_thickness);
    let top = s.any(r.backrest_top);
    if s.coin(r.p_backrest) {
        parts.push(PartBlueprint {
            affordance: label("backrest"),
            boxes: vec![Placement::aligned(
                [0.5, (seat_top + top) / 2.0, 0.5 - sz + bt],
                [sx, (top - seat_top) / 2.0, bt],
            )],
            removable: true,
        });
    }

    let ah = s.any(r.armrest_height);
    let at = s.half(r.armrest_half_thickness);
    if s.coin(r.p_armrests) {
        // clear of the backrest slot even when no backrest is present
        let zc = 0.5 + bt;
        let hz = 0.85 * (sz - bt);
        let boxes = [-1.0, 1.0]
            .map(|side| Placement::aligned([0.5 + side * (sx - at), seat_top + ah / 2.0, zc], [at, ah / 2.0, hz]))
            .to_vec();
        parts.push(PartBlueprint {
            affordance: label("armrest"),
            boxes,
            removable: true,
        });
    }

    let legs = posts(
        [0.5 - sx + lw, 0.5 + sx - lw],
        [0.5 - sz + lw, 0.5 + sz - lw],
        lw,
        FLOOR,
        ys - st,
    );
    parts.push(PartBlueprint {
        affordance: label("framework"),
        boxes: legs,
        removable: false,
    });
    parts
}

fn support(s: &mut Sampler<impl Rng>, r: &SupportRanges) -> Vec<PartBlueprint> {
    let yt = s.any(r.top_height);
    let tx = s.half(r.top_half_x);
    let tz = s.half(r.top_half_z);
    let tt = s.half(r.top_half_thickness);
    let lw = s.half(r.leg_half_width);
    vec![
        PartBlueprint {
            affordance: label("support"),
            boxes: vec![Placement::aligned([0.5, yt, 0.5], [tx, tt, tz])],
            removable: false,
        },
        PartBlueprint {
            affordance: label("framework"),
            boxes: posts(
                [0.5 - tx + lw, 0.5 + tx - lw],
                [0.5 - tz + lw, 0.5 + tz - lw],
                lw,
                FLOOR,
                yt - tt,
            ),
            // only the back leg pair is removable, see `removal_units`
            removable: false,
        },
    ]
}

fn openable(s: &mut Sampler<impl Rng>, r: &OpenableRanges) -> Vec<PartBlueprint> {
    let w = s.any(r.width);
    let h = s.any(r.height);
    let d = s.any(r.depth);
    let wt = s.half(r.wall_half_thickness);
    let t = s.half(r.door_half_thickness);
    let angle = s.any(r.door_angle).to_radians();
    let hw = s.half(r.handle_half_width);
    let hh = s.half(r.handle_half_height);
    let hd = s.half(r.handle_half_depth);

    let (x0, x1) = (0.5 - w / 2.0, 0.5 + w / 2.0);
    let (y0, y1) = (FLOOR, FLOOR + h);
    let (z0, zf) = (0.03, 0.03 + d);
    let (xc, yc, zc) = (0.5, (y0 + y1) / 2.0, (z0 + zf) / 2.0);
    let shell = vec![
        Placement::aligned([xc, yc, z0 + wt], [w / 2.0, h / 2.0, wt]),
        Placement::aligned([x0 + wt, yc, zc], [wt, h / 2.0, d / 2.0]),
        Placement::aligned([x1 - wt, yc, zc], [wt, h / 2.0, d / 2.0]),
        Placement::aligned([xc, y0 + wt, zc], [w / 2.0, wt, d / 2.0]),
        Placement::aligned([xc, y1 - wt, zc], [w / 2.0, wt, d / 2.0]),
    ];

    // Door hinged on the vertical edge at (x0, zf), swinging outward; `u`
    // runs along the door, `n` is its outward normal.
    let (sa, ca) = angle.sin_cos();
    let u = [ca, 0.0, sa];
    let n = [-sa, 0.0, ca];
    let at = |along: f64, out: f64, y: f64| [x0 + along * u[0] + out * n[0], y, zf + along * u[2] + out * n[2]];
    let rotation = Some((Axis::Y, -angle));
    let door = Placement {
        center: at(w / 2.0, t, yc),
        half: [w / 2.0, h / 2.0, t],
        rotation,
    };
    let handle = Placement {
        center: at(w - (3.0 * hw).max(0.05), 2.0 * t + hd, yc),
        half: [hw, hh, hd],
        rotation,
    };
    vec![
        PartBlueprint {
            affordance: label("framework"),
            boxes: shell,
            removable: false,
        },
        PartBlueprint {
            affordance: label("openable"),
            boxes: vec![door],
            removable: false,
        },
        PartBlueprint {
            affordance: label("handle"),
            boxes: vec![handle],
            removable: true,
        },
    ]
}

/// Part layout of one object of `category`.
pub fn generate_blueprints(category: Category, rng: &mut impl Rng, cfg: &GenConfig) -> Vec<PartBlueprint> {
    let mut s = Sampler {
        rng,
        min_half: cfg.min_half_voxels / cfg.res as f64,
    };
    match category {
        Category::Sittable => sittable(&mut s, &cfg.sittable),
        Category::Support => support(&mut s, &cfg.support),
        Category::Openable => openable(&mut s, &cfg.openable),
    }
}

/// Rasterizes parts at `res^3`: a voxel is filled when its center lies inside
/// a box, later parts overwrite earlier ones, and instance ids follow list
/// order. Parts left without voxels are dropped and the remaining ids
/// compacted. Returns `(part_grid, part_affordances)`.
pub fn voxelize_cuboids(parts: &[PartBlueprint], res: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if parts.is_empty() {
        return Err(Error::Invalid("nothing to voxelize".into()));
    }
    if parts.len() > u8::MAX as usize {
        return Err(Error::Invalid(format!("{} parts exceed the u8 instance range", parts.len())));
    }
    let mut grid = vec![0u8; res * res * res];
    let inv = 1.0 / res as f64;
    for (k, part) in parts.iter().enumerate() {
        for b in &part.boxes {
            let r = b.rotation_matrix();
            // only scan the box's bounding range
            let corners = b.corners();
            let lo = |a: usize| {
                let m = corners.iter().map(|c| c[a]).fold(f64::INFINITY, f64::min);
                ((m * res as f64 - 0.5).floor().max(0.0)) as usize
            };
            let hi = |a: usize| {
                let m = corners.iter().map(|c| c[a]).fold(f64::NEG_INFINITY, f64::max);
                ((m * res as f64 - 0.5).ceil().max(-1.0) + 1.0).min(res as f64) as usize
            };
            for x in lo(0)..hi(0) {
                for y in lo(1)..hi(1) {
                    for z in lo(2)..hi(2) {
                        let p = [(x as f64 + 0.5) * inv, (y as f64 + 0.5) * inv, (z as f64 + 0.5) * inv];
                        if b.contains(&r, p) {
                            grid[(x * res + y) * res + z] = k as u8 + 1;
                        }
                    }
                }
            }
        }
    }
    let mut used = vec![false; parts.len()];
    for &g in &grid {
        if g != 0 {
            used[g as usize - 1] = true;
        }
    }
    if !used.iter().any(|&u| u) {
        return Err(Error::Invalid("no voxel is covered by any part".into()));
    }
    let mut remap = vec![0u8; parts.len() + 1];
    let mut affordances = Vec::new();
    for (k, part) in parts.iter().enumerate() {
        if used[k] {
            affordances.push(part.affordance);
            remap[k + 1] = affordances.len() as u8;
        }
    }
    for g in grid.iter_mut() {
        *g = remap[*g as usize];
    }
    Ok((grid, affordances))
}

/// Generates and voxelizes one object from an explicit random stream.
pub fn generate_object_with_rng(
    category: Category,
    id: String,
    rng: &mut impl Rng,
    cfg: &GenConfig,
) -> Result<VoxelSample> {
    let parts = generate_blueprints(category, rng, cfg);
    let (part_grid, part_affordances) = voxelize_cuboids(&parts, cfg.res)?;
    Ok(VoxelSample {
        id,
        category,
        res: cfg.res,
        occupancy: part_grid.iter().map(|&p| p != 0).collect(),
        part_grid,
        part_affordances,
    })
}

/// Generates one object; the result depends only on `(category, seed, cfg)`.
pub fn generate_object(category: Category, seed: u64, cfg: &GenConfig) -> Result<VoxelSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_object_with_rng(category, format!("{category}-seed{seed}"), &mut rng, cfg)
}
