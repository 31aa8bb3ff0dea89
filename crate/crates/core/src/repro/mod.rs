//! Experiment recipes: a dataset, one or more training runs (or a property
//! suite), metric bounds and a runtime budget, executed end to end.

pub mod checks;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checks::{Check, Metrics};

use crate::data::{generate_dataset, Dataset, DatasetSpec, SplitTag};
use crate::error::{Error, Result};
use crate::train::{evaluate, train, TrainConfig, TrainEvent};

/// Built-in recipes as `(name, toml)`.
pub const BUILTIN: [(&str, &str); 16] = [
    ("gradients", include_str!("../../recipes/gradients.toml")),
    ("hungarian", include_str!("../../recipes/hungarian.toml")),
    ("geometry", include_str!("../../recipes/geometry.toml")),
    ("normalization", include_str!("../../recipes/normalization.toml")),
    ("overfit", include_str!("../../recipes/overfit.toml")),
    ("overfit-16", include_str!("../../recipes/overfit-16.toml")),
    ("sittable-full", include_str!("../../recipes/sittable-full.toml")),
    ("ablations", include_str!("../../recipes/ablations.toml")),
    ("determinism", include_str!("../../recipes/determinism.toml")),
    ("metrics", include_str!("../../recipes/metrics.toml")),
    ("slot-mlp", include_str!("../../recipes/slot-mlp.toml")),
    ("soft-kmeans", include_str!("../../recipes/soft-kmeans.toml")),
    ("recon-only-no-aug", include_str!("../../recipes/recon-only-no-aug.toml")),
    ("no-afford-no-aug", include_str!("../../recipes/no-afford-no-aug.toml")),
    ("no-cuboid", include_str!("../../recipes/no-cuboid.toml")),
    ("impossible", include_str!("../../recipes/impossible.toml")),
];

/// One training configuration of a recipe, repeated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    /// Each seed replaces `train.seed`; metrics are averaged over seeds.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Split the trained model is scored on.
    #[serde(default = "default_split")]
    pub split: SplitTag,
    pub train: TrainConfig,
    /// Bounds every seed is held to; `<run>.seed_pass` is the fraction of
    /// seeds meeting all of them.
    #[serde(default)]
    pub seed_bounds: Vec<Bound>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_split() -> SplitTag {
    SplitTag::Test
}

/// A bound on a metric: an absolute range and/or "at least another metric
/// plus a margin".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_least: Option<String>,
    #[serde(default)]
    pub margin: f64,
}

impl Bound {
    fn evaluate(&self, metrics: &Metrics) -> BoundOutcome {
        let value = metrics.get(&self.metric).copied();
        let other = self.at_least.as_ref().map(|m| metrics.get(m).copied());
        let pass = match value {
            None => false,
            Some(v) => {
                self.min.is_none_or(|lo| v >= lo)
                    && self.max.is_none_or(|hi| v <= hi)
                    && match other {
                        None => true,
                        Some(None) => false,
                        Some(Some(o)) => v >= o + self.margin,
                    }
            }
        };
        BoundOutcome {
            bound: self.to_string(),
            value,
            pass,
        }
    }
}

fn number(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(lo) = self.min {
            parts.push(format!("{} >= {}", self.metric, number(lo)));
        }
        if let Some(hi) = self.max {
            parts.push(format!("{} <= {}", self.metric, number(hi)));
        }
        if let Some(o) = &self.at_least {
            if self.margin == 0.0 {
                parts.push(format!("{} >= {o}", self.metric));
            } else {
                parts.push(format!("{} >= {o} + {}", self.metric, self.margin));
            }
        }
        if parts.is_empty() {
            parts.push(format!("{} present", self.metric));
        }
        write!(f, "{}", parts.join(" and "))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Acceptance criterion the recipe decides, if any.
    #[serde(default)]
    pub criterion: Option<u8>,
    pub budget_minutes: f64,
    #[serde(default)]
    pub check: Option<Check>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub runs: Vec<RunSpec>,
    #[serde(default)]
    pub bounds: Vec<Bound>,
}

impl Recipe {
    pub fn from_toml(text: &str) -> Result<Self> {
        let r: Self = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Invalid(format!("no recipe named {name:?}")))?;
        Self::from_toml(text)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.check, &self.dataset, self.runs.is_empty()) {
            (Some(_), None, true) | (None, Some(_), false) => {}
            _ => {
                return Err(Error::Invalid(format!(
                    "recipe {} needs either a check or a dataset with runs",
                    self.name
                )))
            }
        }
        for run in &self.runs {
            if run.seeds.is_empty() {
                return Err(Error::Invalid(format!("run {} has no seeds", run.name)));
            }
            run.train.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundOutcome {
    pub bound: String,
    pub value: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeReport {
    pub name: String,
    pub criterion: Option<u8>,
    pub metrics: Metrics,
    pub bounds: Vec<BoundOutcome>,
    pub seconds: f64,
    pub budget_seconds: f64,
}

impl RecipeReport {
    pub fn within_budget(&self) -> bool {
        self.seconds <= self.budget_seconds
    }

    pub fn passed(&self) -> bool {
        self.within_budget() && self.bounds.iter().all(|b| b.pass)
    }
}

impl fmt::Display for RecipeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "recipe {}", self.name)?;
        for (k, v) in &self.metrics {
            writeln!(f, "  {k:<32} {v:.6}")?;
        }
        for b in &self.bounds {
            let v = b.value.map_or("missing".to_string(), |v| format!("{v:.6}"));
            writeln!(f, "  [{}] {} (value {v})", if b.pass { "pass" } else { "FAIL" }, b.bound)?;
        }
        writeln!(
            f,
            "  [{}] runtime {:.1} s of {:.0} s budget",
            if self.within_budget() { "pass" } else { "FAIL" },
            self.seconds,
            self.budget_seconds
        )?;
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Progress notifications of a recipe.
pub enum RecipeEvent<'a> {
    RunStarted { run: &'a str, seed: u64 },
    Train(&'a TrainEvent),
    RunFinished { run: &'a str, seed: u64, metrics: &'a Metrics },
}

/// Runs `recipe` inside `work` (dataset in `work/data`, runs in
/// `work/runs/<run>-seed<k>`), writes `work/report.json` and returns the
/// report. Bound violations are reported, not raised.
pub fn run_recipe(recipe: &Recipe, work: &Path, events: &mut dyn FnMut(RecipeEvent)) -> Result<RecipeReport> {
    recipe.validate()?;
    let start = Instant::now();
    fs::create_dir_all(work)?;
    fs::write(work.join("recipe.toml"), toml::to_string(recipe).map_err(|e| Error::Toml(e.to_string()))?)?;

    let metrics = match (recipe.check, &recipe.dataset) {
        (Some(check), _) => check.run()?,
        (None, Some(spec)) => train_runs(recipe, spec, work, events)?,
        (None, None) => unreachable!("validated"),
    };
    let report = RecipeReport {
        name: recipe.name.clone(),
        criterion: recipe.criterion,
        bounds: recipe.bounds.iter().map(|b| b.evaluate(&metrics)).collect(),
        metrics,
        seconds: start.elapsed().as_secs_f64(),
        budget_seconds: recipe.budget_minutes * 60.0,
    };
    fs::write(work.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn train_runs(recipe: &Recipe, spec: &DatasetSpec, work: &Path, events: &mut dyn FnMut(RecipeEvent)) -> Result<Metrics> {
    let data_dir = work.join("data");
    let spec_text = toml::to_string(spec).map_err(|e| Error::Toml(e.to_string()))?;
    let spec_file = data_dir.join("dataset.toml");
    // the dataset is a pure function of its spec, so a matching one is reused
    if fs::read_to_string(&spec_file).ok().as_deref() != Some(spec_text.as_str()) {
        if data_dir.exists() {
            fs::remove_dir_all(&data_dir)?;
        }
        generate_dataset(spec, &data_dir)?;
        fs::write(&spec_file, &spec_text)?;
    }
    let data = Dataset::load(&data_dir)?;

    let mut metrics = Metrics::new();
    for run in &recipe.runs {
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut passing = 0usize;
        for &seed in &run.seeds {
            events(RecipeEvent::RunStarted { run: &run.name, seed });
            let cfg = TrainConfig {
                seed,
                ..run.train.clone()
            };
            let out = work.join("runs").join(format!("{}-seed{seed}", run.name));
            let outcome = train(&cfg, &data, Some(&out), &mut |e| events(RecipeEvent::Train(e)))?;
            let split = data.split(run.split);
            let report = evaluate(
                outcome.selected(),
                &split,
                cfg.category,
                cfg.mode.predicts_affordances(),
                cfg.seed,
            )?;
            fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
            let mut seed_metrics = Metrics::new();
            seed_metrics.insert("mean_iou".into(), report.mean_iou);
            seed_metrics.insert("mse".into(), report.mse);
            seed_metrics.insert("bce".into(), report.bce);
            if let Some(ap) = report.ap {
                seed_metrics.insert("ap".into(), ap);
            }
            if let Some(steps) = outcome.history.last().map(|r| r.step) {
                seed_metrics.insert("steps".into(), steps as f64);
            }
            passing += usize::from(run.seed_bounds.iter().all(|b| b.evaluate(&seed_metrics).pass));
            events(RecipeEvent::RunFinished {
                run: &run.name,
                seed,
                metrics: &seed_metrics,
            });
            for (k, v) in &seed_metrics {
                metrics.insert(format!("{}.seed{seed}.{k}", run.name), *v);
                *sums.entry(k.clone()).or_default() += v;
            }
        }
        let n = run.seeds.len() as f64;
        for (k, v) in sums {
            metrics.insert(format!("{}.{k}", run.name), v / n);
        }
        if !run.seed_bounds.is_empty() {
            metrics.insert(format!("{}.seed_pass", run.name), passing as f64 / n);
        }
    }
    Ok(metrics)
}
