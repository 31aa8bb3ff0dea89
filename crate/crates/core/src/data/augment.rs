use rand::Rng;

use super::{AffordanceVocab, Category, VoxelSample};

/// A piece of an object that augmentation may delete.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RemovalUnit {
    pub instance: u8,
    /// Only the voxels with `z < res / 2` (the back half) are removed.
    pub back_half: bool,
}

fn is_back(i: usize, res: usize) -> bool {
    i % res < res / 2
}

/// Removable units of a sample, derived from its family and labels so that
/// files on disk need no extra metadata: backrests and armrests of sittable
/// objects, handles of openable objects, and the back leg pair of support
/// objects.
pub fn removal_units(sample: &VoxelSample) -> Vec<RemovalUnit> {
    let name = |k: usize| AffordanceVocab::name(sample.part_affordances[k]).unwrap_or("");
    let mut units = Vec::new();
    for k in 0..sample.part_count() {
        let instance = k as u8 + 1;
        let whole = match sample.category {
            Category::Sittable => matches!(name(k), "backrest" | "armrest"),
            Category::Openable => name(k) == "handle",
            Category::Support => false,
        };
        if whole {
            units.push(RemovalUnit {
                instance,
                back_half: false,
            });
        } else if sample.category == Category::Support && name(k) == "framework" {
            let (mut back, mut front) = (false, false);
            for (i, &p) in sample.part_grid.iter().enumerate() {
                if p == instance {
                    if is_back(i, sample.res) {
                        back = true;
                    } else {
                        front = true;
                    }
                }
            }
            if back && front {
                units.push(RemovalUnit {
                    instance,
                    back_half: true,
                });
            }
        }
    }
    units
}

fn remove(sample: &VoxelSample, units: &[RemovalUnit]) -> VoxelSample {
    let mut grid = sample.part_grid.clone();
    for u in units {
        for (i, g) in grid.iter_mut().enumerate() {
            if *g == u.instance && (!u.back_half || is_back(i, sample.res)) {
                *g = 0;
            }
        }
    }
    let mut present = vec![false; sample.part_count() + 1];
    for &g in &grid {
        present[g as usize] = true;
    }
    let mut remap = vec![0u8; sample.part_count() + 1];
    let mut affordances = Vec::new();
    for k in 1..=sample.part_count() {
        if present[k] {
            affordances.push(sample.part_affordances[k - 1]);
            remap[k] = affordances.len() as u8;
        }
    }
    for g in grid.iter_mut() {
        *g = remap[*g as usize];
    }
    VoxelSample {
        id: sample.id.clone(),
        category: sample.category,
        res: sample.res,
        occupancy: grid.iter().map(|&g| g != 0).collect(),
        part_grid: grid,
        part_affordances: affordances,
    }
}

/// With probability `prob`, deletes a uniformly chosen non-empty subset of
/// the sample's removable units and renumbers the remaining instances.
/// Returns the (possibly unchanged) sample and whether anything was removed.
///
/// Exactly one coin is drawn per call, plus one subset draw when it lands,
/// so the random stream advances the same way for every sample.
pub fn augment_remove_parts(sample: &VoxelSample, rng: &mut impl Rng, prob: f64) -> (VoxelSample, bool) {
    let hit = rng.random_bool(prob.clamp(0.0, 1.0));
    let units = removal_units(sample);
    if !hit || units.is_empty() {
        return (sample.clone(), false);
    }
    let subset: u32 = rng.random_range(1..1u32 << units.len());
    let chosen: Vec<RemovalUnit> = units
        .iter()
        .enumerate()
        .filter(|(i, _)| subset & (1 << i) != 0)
        .map(|(_, u)| *u)
        .collect();
    (remove(sample, &chosen), true)
}
