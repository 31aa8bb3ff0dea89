use serde::{Deserialize, Serialize};

use crate::data::Category;
use crate::error::{Error, Result};
use crate::losses::{LossOptions, LossWeights};
use crate::model::{Bottleneck, ModelConfig};

/// Which model variant to train.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    /// Ordered slots from a perceptron instead of slot attention.
    SlotMlp,
    /// Slot attention reduced to soft k-means.
    SoftKmeans,
    /// No affordance set loss.
    NoAfford,
    /// No cuboid stage.
    NoCuboid,
    /// Reconstruction only: neither affordance nor cuboid term.
    ReconOnly,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Full,
        Mode::SlotMlp,
        Mode::SoftKmeans,
        Mode::NoAfford,
        Mode::NoCuboid,
        Mode::ReconOnly,
    ];

    pub fn bottleneck(self) -> Bottleneck {
        match self {
            Mode::SlotMlp => Bottleneck::SlotMlp,
            Mode::SoftKmeans => Bottleneck::SoftKmeans,
            _ => Bottleneck::SlotAttention,
        }
    }

    /// Whether the affordance set loss is trained (and AP reported).
    pub fn predicts_affordances(self) -> bool {
        !matches!(self, Mode::NoAfford | Mode::ReconOnly)
    }

    /// Whether the cuboid stage runs.
    pub fn uses_cuboids(self) -> bool {
        !matches!(self, Mode::NoCuboid | Mode::ReconOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::SlotMlp => "slot_mlp",
            Mode::SoftKmeans => "soft_kmeans",
            Mode::NoAfford => "no_afford",
            Mode::NoCuboid => "no_cuboid",
            Mode::ReconOnly => "recon_only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub lr: f64,
    pub epochs: usize,
}

/// Everything that determines a training run besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub category: Category,
    /// Slot count; defaults to the category's largest affordance set.
    pub slots: Option<usize>,
    pub mode: Mode,
    pub augment: bool,
    pub augment_prob: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Reconstruction and set prediction.
    pub stage1: StageConfig,
    /// Adds the cuboid regularizer.
    pub stage2: StageConfig,
    pub weights: LossWeights,
    pub loss: LossOptions,
    /// Architecture; `res`, `slots`, `classes`, `bottleneck` and `init_seed`
    /// are overwritten from the data and the fields above.
    pub model: ModelConfig,
    /// Stops after this many optimizer steps, mid-epoch if need be.
    pub max_steps: Option<usize>,
    /// Validation interval in epochs; 0 disables per-epoch validation.
    pub eval_every: usize,
    /// Periodic checkpoint interval in epochs; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            category: Category::Sittable,
            slots: None,
            mode: Mode::Full,
            augment: true,
            augment_prob: 0.3,
            seed: 0,
            batch_size: 8,
            clip_norm: 10.0,
            stage1: StageConfig { lr: 4e-4, epochs: 30 },
            stage2: StageConfig { lr: 2e-4, epochs: 20 },
            weights: LossWeights::default(),
            loss: LossOptions::default(),
            model: ModelConfig::default(),
            max_steps: None,
            eval_every: 1,
            checkpoint_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn for_category(category: Category) -> Self {
        Self {
            category,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn slot_count(&self) -> usize {
        self.slots.unwrap_or_else(|| self.category.max_set_size())
    }

    /// Epochs of the cuboid stage actually run in this mode.
    pub fn stage2_epochs(&self) -> usize {
        if self.mode.uses_cuboids() {
            self.stage2.epochs
        } else {
            0
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1.epochs + self.stage2_epochs()
    }

    /// Stage (1 or 2) of a 1-based epoch.
    pub fn stage_of(&self, epoch: usize) -> u8 {
        if epoch <= self.stage1.epochs {
            1
        } else {
            2
        }
    }

    /// Loss weights of a stage after the mode's switches.
    pub fn stage_weights(&self, stage: u8) -> LossWeights {
        let mut w = self.weights;
        if !self.mode.predicts_affordances() {
            w.pred = 0.0;
        }
        if stage == 1 || !self.mode.uses_cuboids() {
            w = w.without_cuboid();
        }
        w
    }

    pub fn stage_lr(&self, stage: u8) -> f64 {
        if stage == 1 {
            self.stage1.lr
        } else {
            self.stage2.lr
        }
    }

    /// Model configuration for data of resolution `res`.
    pub fn model_config(&self, res: usize) -> ModelConfig {
        ModelConfig {
            res,
            slots: self.slot_count(),
            classes: self.category.head_classes(),
            bottleneck: self.mode.bottleneck(),
            init_seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invalid(m));
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return fail(format!("augmentation probability {}", self.augment_prob));
        }
        if !(self.clip_norm > 0.0) {
            return fail(format!("clip norm {}", self.clip_norm));
        }
        for (name, s) in [("stage1", self.stage1), ("stage2", self.stage2)] {
            if !(s.lr.is_finite() && s.lr >= 0.0) {
                return fail(format!("{name} learning rate {}", s.lr));
            }
        }
        if self.stage2_epochs() > 0 && self.stage2.lr >= self.stage1.lr {
            return fail(format!(
                "stage 2 learning rate {} must be below stage 1's {}",
                self.stage2.lr, self.stage1.lr
            ));
        }
        if self.slot_count() == 0 {
            return fail("slot count must be positive".into());
        }
        self.weights.validate()
    }
}
