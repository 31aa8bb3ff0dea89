//! Procedurally generated voxel objects with part-level affordance labels,
//! their on-disk format, dataset splits and part-removal augmentation.

mod augment;
mod format;
mod generate;

pub use augment::{augment_remove_parts, removal_units, RemovalUnit};
pub use format::{
    build_split, decode_sample, encode_sample, generate_dataset, read_sample, write_sample, Dataset,
    DatasetSpec, ManifestRecord, Split, SplitSizes, SplitTag, FORMAT_VERSION, MAGIC, MANIFEST_FILE,
};
pub use generate::{
    generate_blueprints, generate_object, generate_object_with_rng, voxelize_cuboids, Axis, GenConfig,
    OpenableRanges, PartBlueprint, Placement, Range, SittableRanges, SupportRanges,
};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The label vocabulary. Id `0` is the null label; label `AFFORDANCE_LABELS[i]`
/// has id `i + 1`.
pub const AFFORDANCE_LABELS: [&str; 24] = [
    "sittable",
    "support",
    "openable",
    "backrest",
    "armrest",
    "handle",
    "framework",
    "containment",
    "liquidcontainment",
    "display",
    "cutting",
    "pressable",
    "hanging",
    "wrapgrasp",
    "illumination",
    "lyable",
    "headrest",
    "step",
    "pourable",
    "twistable",
    "rollable",
    "lever",
    "pinchable",
    "audible",
];

pub const NULL_LABEL: u8 = 0;

/// Lookup between label names and stable ids.
pub struct AffordanceVocab;

impl AffordanceVocab {
    pub const LEN: usize = AFFORDANCE_LABELS.len() + 1;

    pub fn id(name: &str) -> Option<u8> {
        AFFORDANCE_LABELS
            .iter()
            .position(|&l| l == name)
            .map(|i| i as u8 + 1)
    }

    pub fn name(id: u8) -> Option<&'static str> {
        match id {
            0 => Some("null"),
            i => AFFORDANCE_LABELS.get(i as usize - 1).copied(),
        }
    }

    fn must(name: &str) -> u8 {
        Self::id(name).expect("label in vocabulary")
    }
}

/// Object family of a benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Sittable,
    Support,
    Openable,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Sittable, Category::Support, Category::Openable];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Sittable => "sittable",
            Category::Support => "support",
            Category::Openable => "openable",
        }
    }

    /// Labels that objects of this family can carry.
    pub fn label_names(self) -> &'static [&'static str] {
        match self {
            Category::Sittable => &["sittable", "backrest", "armrest", "framework"],
            Category::Support => &["support", "framework"],
            Category::Openable => &["openable", "framework", "handle"],
        }
    }

    pub fn label_ids(self) -> Vec<u8> {
        self.label_names().iter().map(|n| AffordanceVocab::must(n)).collect()
    }

    /// Largest affordance set an object of this family can have.
    pub fn max_set_size(self) -> usize {
        self.label_names().len()
    }

    /// Class count of the affordance head: the family's labels plus null.
    pub fn head_classes(self) -> usize {
        self.max_set_size() + 1
    }

    /// Head class of a global label id: `0` for null, `1 + position` for the
    /// family's labels.
    pub fn class_of(self, label: u8) -> Option<usize> {
        if label == NULL_LABEL {
            return Some(0);
        }
        self.label_ids().iter().position(|&l| l == label).map(|p| p + 1)
    }

    /// Inverse of [`Category::class_of`].
    pub fn label_of_class(self, class: usize) -> u8 {
        if class == 0 {
            NULL_LABEL
        } else {
            self.label_ids()[class - 1]
        }
    }

    /// Family whose defining label (the first of its set) occurs in `labels`.
    pub fn infer(labels: &[u8]) -> Option<Category> {
        Self::ALL
            .into_iter()
            .find(|c| labels.contains(&c.label_ids()[0]))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown category {s:?}")))
    }
}

/// One voxelized object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelSample {
    pub id: String,
    pub category: Category,
    pub res: usize,
    /// `res^3` flags, flat index `(x * res + y) * res + z`.
    pub occupancy: Vec<bool>,
    /// `0` for empty voxels, `k` for part instance `k` (1-based).
    pub part_grid: Vec<u8>,
    /// Affordance id of instance `k` at position `k - 1`.
    pub part_affordances: Vec<u8>,
}

impl VoxelSample {
    pub fn voxels(&self) -> usize {
        self.res * self.res * self.res
    }

    pub fn part_count(&self) -> usize {
        self.part_affordances.len()
    }

    /// Sorted, deduplicated affordance ids.
    pub fn affordance_set(&self) -> Vec<u8> {
        self.part_affordances
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn affordance_names(&self) -> Vec<&'static str> {
        self.affordance_set()
            .into_iter()
            .filter_map(AffordanceVocab::name)
            .collect()
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    /// Occupancy as `0.0` / `1.0` values.
    pub fn occupancy_values(&self) -> Vec<f64> {
        self.occupancy.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect()
    }

    /// Checks every structural invariant of a sample.
    pub fn validate(&self) -> Result<()> {
        let n = self.voxels();
        if self.occupancy.len() != n || self.part_grid.len() != n {
            return Err(Error::Format(format!("grid sizes do not match resolution {}", self.res)));
        }
        let k = self.part_count();
        let mut seen = vec![false; k];
        for (&o, &p) in self.occupancy.iter().zip(&self.part_grid) {
            if o != (p != 0) {
                return Err(Error::Format("part grid disagrees with occupancy".into()));
            }
            if p as usize > k {
                return Err(Error::Format(format!("instance id {p} outside table of {k}")));
            }
            if p != 0 {
                seen[p as usize - 1] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("instance {} has no voxels", i + 1)));
        }
        let allowed = self.category.label_ids();
        if let Some(&bad) = self.part_affordances.iter().find(|a| !allowed.contains(a)) {
            return Err(Error::Format(format!(
                "label {bad} is not part of the {} family",
                self.category
            )));
        }
        if k == 0 {
            return Err(Error::Format("sample has no parts".into()));
        }
        Ok(())
    }
}
