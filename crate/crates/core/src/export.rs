//! File exports for inspecting predictions: ASCII PLY meshes with per-vertex
//! colors and scalar grids in the sample grid layout.
//!
//! Affordance palette (id, label, RGB):
//!
//! | id | label | color |
//! |----|-------|-------|
//! | 0 | null | 160 160 160 |
//! | 1 | sittable | 230 25 75 |
//! | 2 | support | 60 180 75 |
//! | 3 | openable | 255 225 25 |
//! | 4 | backrest | 0 130 200 |
//! | 5 | armrest | 245 130 48 |
//! | 6 | handle | 145 30 180 |
//! | 7 | framework | 70 240 240 |
//! | 8 | containment | 240 50 230 |
//! | 9 | liquidcontainment | 210 245 60 |
//! | 10 | display | 250 190 212 |
//! | 11 | cutting | 0 128 128 |
//! | 12 | pressable | 220 190 255 |
//! | 13 | hanging | 170 110 40 |
//! | 14 | wrapgrasp | 255 250 200 |
//! | 15 | illumination | 128 0 0 |
//! | 16 | lyable | 170 255 195 |
//! | 17 | headrest | 128 128 0 |
//! | 18 | step | 255 215 180 |
//! | 19 | pourable | 0 0 128 |
//! | 20 | twistable | 128 128 128 |
//! | 21 | rollable | 255 255 255 |
//! | 22 | lever | 0 0 0 |
//! | 23 | pinchable | 100 100 220 |
//! | 24 | audible | 200 120 120 |

use std::fmt::Write;

use crate::data::{AffordanceVocab, Category};
use crate::error::{Error, Result};
use crate::geometry::Cuboid;
use crate::model::Prediction;

pub const PALETTE: [[u8; 3]; AffordanceVocab::LEN] = [
    [160, 160, 160],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [128, 128, 128],
    [255, 255, 255],
    [0, 0, 0],
    [100, 100, 220],
    [200, 120, 120],
];

/// Quads of a box whose corners are indexed by the sign bits of (x, y, z),
/// x slowest; counter-clockwise seen from outside.
const BOX_FACES: [[usize; 4]; 6] = [
    [0, 1, 3, 2],
    [4, 6, 7, 5],
    [0, 4, 5, 1],
    [2, 3, 7, 6],
    [0, 2, 6, 4],
    [1, 5, 7, 3],
];

/// An indexed polygon mesh with one color per vertex.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub colors: Vec<[u8; 3]>,
    pub faces: Vec<[usize; 4]>,
}

impl Mesh {
    /// Appends a box from corners ordered like [`Cuboid::corners`].
    pub fn push_box(&mut self, corners: &[[f64; 3]; 8], color: [u8; 3]) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(corners);
        self.colors.extend(std::iter::repeat_n(color, 8));
        self.faces.extend(BOX_FACES.iter().map(|f| f.map(|i| base + i)));
    }

    pub fn to_ply(&self) -> String {
        let mut s = String::new();
        s.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(s, "element vertex {}", self.vertices.len());
        s.push_str("property float x\nproperty float y\nproperty float z\n");
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
        let _ = writeln!(s, "element face {}", self.faces.len());
        s.push_str("property list uchar int vertex_indices\nend_header\n");
        for (v, c) in self.vertices.iter().zip(&self.colors) {
            let _ = writeln!(s, "{} {} {} {} {} {}", v[0], v[1], v[2], c[0], c[1], c[2]);
        }
        for f in &self.faces {
            let _ = writeln!(s, "4 {} {} {} {}", f[0], f[1], f[2], f[3]);
        }
        s
    }
}

pub fn label_color(label: u8) -> [u8; 3] {
    PALETTE.get(label as usize).copied().unwrap_or(PALETTE[0])
}

/// Unit cubes for every voxel the prediction marks occupied, colored by the
/// affordance predicted for the voxel's slot.
pub fn parts_mesh(pred: &Prediction, category: Category, res: usize) -> Result<Mesh> {
    let parts = crate::assignment::binarize_parts(&pred.combined, &pred.masks, pred.slots)?;
    if parts.occupied.len() != res * res * res {
        return Err(Error::Invalid(format!("{} voxels for resolution {res}", parts.occupied.len())));
    }
    let labels: Vec<u8> = pred
        .slot_classes()
        .into_iter()
        .map(|c| if c == 0 { 0 } else { category.label_of_class(c) })
        .collect();
    let mut mesh = Mesh::default();
    for (i, _) in parts.occupied.iter().enumerate().filter(|(_, &o)| o) {
        let (x, y, z) = (i / (res * res), (i / res) % res, i % res);
        let mut corners = [[0.0; 3]; 8];
        for (k, c) in corners.iter_mut().enumerate() {
            *c = [
                x as f64 - 0.5 + ((k >> 2) & 1) as f64,
                y as f64 - 0.5 + ((k >> 1) & 1) as f64,
                z as f64 - 0.5 + (k & 1) as f64,
            ];
        }
        mesh.push_box(&corners, label_color(labels[parts.slot[i]]));
    }
    Ok(mesh)
}

pub fn cuboid_mesh(cuboid: &Cuboid, color: [u8; 3]) -> Mesh {
    let mut mesh = Mesh::default();
    mesh.push_box(&cuboid.corners(), color);
    mesh
}

/// Trilinear resampling of a `t^3` grid of cell values to `res^3`. Cell
/// centers sit at the middle of the `res / t` voxel blocks they cover and
/// values are clamped at the border.
pub fn upsample_trilinear(grid: &[f64], t: usize, res: usize) -> Result<Vec<f64>> {
    if t == 0 || grid.len() != t * t * t || res == 0 {
        return Err(Error::Invalid(format!("{} cells for a {t}^3 grid", grid.len())));
    }
    let scale = t as f64 / res as f64;
    let axis: Vec<(usize, usize, f64)> = (0..res)
        .map(|v| {
            let u = ((v as f64 + 0.5) * scale - 0.5).clamp(0.0, (t - 1) as f64);
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(t - 1);
            (lo, hi, u - lo as f64)
        })
        .collect();
    let at = |x: usize, y: usize, z: usize| grid[(x * t + y) * t + z];
    let mut out = Vec::with_capacity(res * res * res);
    for &(x0, x1, fx) in &axis {
        for &(y0, y1, fy) in &axis {
            for &(z0, z1, fz) in &axis {
                let lerp = |a: f64, b: f64, f: f64| a + (b - a) * f;
                let c00 = lerp(at(x0, y0, z0), at(x0, y0, z1), fz);
                let c01 = lerp(at(x0, y1, z0), at(x0, y1, z1), fz);
                let c10 = lerp(at(x1, y0, z0), at(x1, y0, z1), fz);
                let c11 = lerp(at(x1, y1, z0), at(x1, y1, z1), fz);
                out.push(lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fx));
            }
        }
    }
    Ok(out)
}

pub const GRID_MAGIC: &[u8; 4] = b"PAVG";
pub const GRID_VERSION: u16 = 1;

/// Scalar grid file: magic, version `u16`, resolution `u16`, channel count
/// `u16`, then `channels * res^3` little-endian `f64`s, channel-major, each
/// channel in the sample grid order `(x * res + y) * res + z`.
pub fn encode_grid(values: &[f64], res: usize, channels: usize) -> Result<Vec<u8>> {
    let n = res * res * res;
    if values.len() != channels * n {
        return Err(Error::Invalid(format!("{} values for {channels} x {res}^3", values.len())));
    }
    let narrow = |v: usize| u16::try_from(v).map_err(|_| Error::Invalid(format!("{v} exceeds the u16 range")));
    let mut out = Vec::with_capacity(10 + 8 * values.len());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    out.extend_from_slice(&narrow(res)?.to_le_bytes());
    out.extend_from_slice(&narrow(channels)?.to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Inverse of [`encode_grid`]: `(values, res, channels)`.
pub fn decode_grid(bytes: &[u8]) -> Result<(Vec<f64>, usize, usize)> {
    if bytes.len() < 10 {
        return Err(Error::Truncated {
            expected: 10,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != GRID_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
    if word(4) != GRID_VERSION as usize {
        return Err(Error::Version {
            expected: GRID_VERSION as u32,
            found: word(4) as u32,
        });
    }
    let (res, channels) = (word(6), word(8));
    let total = 10 + 8 * channels * res * res * res;
    if bytes.len() != total {
        return Err(Error::Truncated {
            expected: total,
            found: bytes.len(),
        });
    }
    let values = bytes[10..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((values, res, channels))
}

/// Per-iteration attention as `res^3` grids, one channel per slot.
pub fn attention_grids(pred: &Prediction, token_res: usize, res: usize) -> Result<Vec<Vec<f64>>> {
    let n = token_res.pow(3);
    let m = pred.slots;
    pred.attention
        .iter()
        .map(|att| {
            if att.len() != n * m {
                return Err(Error::Invalid(format!("attention map of {} entries for {n} x {m}", att.len())));
            }
            let mut out = Vec::with_capacity(m * res.pow(3));
            for s in 0..m {
                let cells: Vec<f64> = (0..n).map(|i| att[i * m + s]).collect();
                out.extend(upsample_trilinear(&cells, token_res, res)?);
            }
            Ok(out)
        })
        .collect()
}
