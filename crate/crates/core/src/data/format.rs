use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_object_with_rng, AffordanceVocab, Category, GenConfig, VoxelSample};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PAVS";
pub const FORMAT_VERSION: u16 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
const GEN_CONFIG_FILE: &str = "gen.toml";
const SAMPLE_DIR: &str = "samples";
const SAMPLE_EXT: &str = "pavs";

/// Serializes a sample: magic, version `u16`, resolution `u16`, part count
/// `u8`, one affordance byte per part, then `res^3` occupancy bytes and
/// `res^3` instance bytes. Multi-byte fields are little-endian.
pub fn encode_sample(sample: &VoxelSample) -> Result<Vec<u8>> {
    sample.validate()?;
    let res = u16::try_from(sample.res).map_err(|_| Error::Invalid(format!("resolution {} too large", sample.res)))?;
    let k = u8::try_from(sample.part_count())
        .map_err(|_| Error::Invalid(format!("{} parts exceed the u8 range", sample.part_count())))?;
    let n = sample.voxels();
    let mut out = Vec::with_capacity(9 + k as usize + 2 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&res.to_le_bytes());
    out.push(k);
    out.extend_from_slice(&sample.part_affordances);
    out.extend(sample.occupancy.iter().map(|&o| o as u8));
    out.extend_from_slice(&sample.part_grid);
    Ok(out)
}

/// Parses a sample produced by [`encode_sample`]. The category is inferred
/// from the labels.
pub fn decode_sample(bytes: &[u8], id: &str) -> Result<VoxelSample> {
    let need = |len: usize| {
        if bytes.len() < len {
            Err(Error::Truncated {
                expected: len,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(9)?;
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION as u32,
            found: version as u32,
        });
    }
    let res = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    if res == 0 {
        return Err(Error::Format("zero resolution".into()));
    }
    let k = bytes[8] as usize;
    let n = res * res * res;
    let total = 9 + k + 2 * n;
    need(total)?;
    if bytes.len() > total {
        return Err(Error::Format(format!(
            "{} trailing bytes after a {res}^3 grid",
            bytes.len() - total
        )));
    }
    let table = bytes[9..9 + k].to_vec();
    let occ_bytes = &bytes[9 + k..9 + k + n];
    let part_grid = bytes[9 + k + n..total].to_vec();
    if let Some(&b) = occ_bytes.iter().find(|&&b| b > 1) {
        return Err(Error::Format(format!("occupancy byte {b} is not 0 or 1")));
    }
    if let Some(&p) = part_grid.iter().find(|&&p| p as usize > k) {
        return Err(Error::Format(format!("instance id {p} outside table of {k}")));
    }
    if let Some(&l) = table.iter().find(|&&l| AffordanceVocab::name(l).is_none() || l == 0) {
        return Err(Error::Format(format!("unknown affordance id {l}")));
    }
    let category = Category::infer(&table)
        .ok_or_else(|| Error::Format("labels do not identify an object family".into()))?;
    let sample = VoxelSample {
        id: id.to_string(),
        category,
        res,
        occupancy: occ_bytes.iter().map(|&b| b == 1).collect(),
        part_grid,
        part_affordances: table,
    };
    sample.validate()?;
    Ok(sample)
}

pub fn write_sample(path: &Path, sample: &VoxelSample) -> Result<()> {
    fs::write(path, encode_sample(sample)?)?;
    Ok(())
}

/// Reads a sample; its id is the file stem.
pub fn read_sample(path: &Path) -> Result<VoxelSample> {
    let bytes = fs::read(path)?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    decode_sample(&bytes, id)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            _ => Err(Error::Invalid(format!("unknown split {s:?}"))),
        }
    }
}

/// Explicit split sizes; must add up to the sample count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// 7:1:2 with train and val rounded and test taking the rest.
    pub fn from_ratio(n: usize) -> Self {
        let train = (0.7 * n as f64).round() as usize;
        let val = ((0.1 * n as f64).round() as usize).min(n - train);
        Self {
            train,
            val,
            test: n - train - val,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Sample indices of each split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed` and cuts it into train/val/test. Without
/// explicit sizes the 7:1:2 ratio is used.
pub fn build_split(n: usize, seed: u64, sizes: Option<SplitSizes>) -> Result<Split> {
    let sizes = match sizes {
        Some(s) if s.total() != n => {
            return Err(Error::Invalid(format!("split sizes add up to {}, not {n}", s.total())));
        }
        Some(s) => s,
        None if n < 10 => return Err(Error::Invalid(format!("need at least 10 samples to split, got {n}"))),
        None => SplitSizes::from_ratio(n),
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let test = order.split_off(sizes.train + sizes.val);
    let val = order.split_off(sizes.train);
    Ok(Split {
        train: order,
        val,
        test,
    })
}

/// One line of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub category: Category,
    pub labels: Vec<String>,
    pub path: String,
    pub split: SplitTag,
}

/// What to generate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub category: Category,
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub split: Option<SplitSizes>,
    #[serde(default)]
    pub gen: GenConfig,
}

/// Generates `spec.count` objects into `dir` (`samples/*.pavs`,
/// `manifest.jsonl` and the generation config). Sample `i` uses stream `i`
/// of a generator seeded with `spec.seed`, so the output is a pure function
/// of the spec.
pub fn generate_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<ManifestRecord>> {
    let split = build_split(spec.count, spec.seed, spec.split)?;
    let mut tags = vec![SplitTag::Train; spec.count];
    for &i in &split.val {
        tags[i] = SplitTag::Val;
    }
    for &i in &split.test {
        tags[i] = SplitTag::Test;
    }
    fs::create_dir_all(dir.join(SAMPLE_DIR))?;
    fs::write(dir.join(GEN_CONFIG_FILE), spec.gen.to_toml())?;
    let mut records = Vec::with_capacity(spec.count);
    for (i, &tag) in tags.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        let id = format!("{}-{i:05}", spec.category);
        let sample = generate_object_with_rng(spec.category, id.clone(), &mut rng, &spec.gen)?;
        let rel = format!("{SAMPLE_DIR}/{id}.{SAMPLE_EXT}");
        write_sample(&dir.join(&rel), &sample)?;
        records.push(ManifestRecord {
            id,
            category: spec.category,
            labels: sample.affordance_names().into_iter().map(String::from).collect(),
            path: rel,
            split: tag,
        });
    }
    let mut out = fs::File::create(dir.join(MANIFEST_FILE))?;
    for r in &records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(records)
}

/// A loaded dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub samples: Vec<VoxelSample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let file = fs::File::open(dir.join(MANIFEST_FILE))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<ManifestRecord>(&line)?);
        }
        let mut samples = Vec::with_capacity(records.len());
        for r in &records {
            let s = read_sample(&dir.join(&r.path))?;
            if s.id != r.id || s.category != r.category {
                return Err(Error::Format(format!("{} disagrees with its manifest record", r.path)));
            }
            let names: Vec<String> = s.affordance_names().into_iter().map(String::from).collect();
            if names != r.labels {
                return Err(Error::Format(format!("{}: labels {names:?} vs manifest {:?}", r.id, r.labels)));
            }
            if let Some(first) = samples.first() {
                let first: &VoxelSample = first;
                if first.res != s.res {
                    return Err(Error::Format(format!(
                        "{} has resolution {}, dataset uses {}",
                        r.id, s.res, first.res
                    )));
                }
            }
            samples.push(s);
        }
        if samples.is_empty() {
            return Err(Error::Invalid(format!("dataset at {} is empty", dir.display())));
        }
        Ok(Self {
            root: dir.to_path_buf(),
            records,
            samples,
        })
    }

    pub fn res(&self) -> usize {
        self.samples[0].res
    }

    pub fn category(&self) -> Category {
        self.samples[0].category
    }

    pub fn split(&self, tag: SplitTag) -> Vec<&VoxelSample> {
        self.records
            .iter()
            .zip(&self.samples)
            .filter(|(r, _)| r.split == tag)
            .map(|(_, s)| s)
            .collect()
    }

    /// Largest affordance set in the dataset.
    pub fn max_set_size(&self) -> usize {
        self.samples.iter().map(|s| s.affordance_set().len()).max().unwrap_or(0)
    }
}
