use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What sits between the encoder and the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bottleneck {
    /// Iterative slot attention with a GRU update and residual perceptron.
    #[default]
    SlotAttention,
    /// Slot attention without GRU, perceptron or value projection: slots
    /// become the attention-weighted means of the inputs.
    SoftKmeans,
    /// Pooled, flattened features mapped to `M` ordered slots by a perceptron.
    SlotMlp,
}

/// Network shape. Resolutions must be divisible so that the decoder ends
/// exactly at `res`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input grid side.
    pub res: usize,
    /// Slot count `M`.
    pub slots: usize,
    /// Attention iterations `T`.
    pub iters: usize,
    /// Slot and token width `D`.
    pub width: usize,
    pub encoder_channels: [usize; 5],
    /// Stride of each encoder layer; the product sets the token grid.
    pub encoder_strides: [usize; 5],
    /// Channels of the broadcast grid and after the first two transposed
    /// convolutions; the third keeps the last width.
    pub decoder_channels: [usize; 3],
    /// Tile each slot over the broadcast grid with a positional term and map
    /// every cell through a shared linear layer; otherwise one linear layer
    /// emits the whole grid.
    pub spatial_broadcast: bool,
    /// Affordance classes including null.
    pub classes: usize,
    pub bottleneck: Bottleneck,
    /// Residual perceptron after the GRU update.
    pub residual_mlp: bool,
    /// Hidden width of the slot-MLP baseline.
    pub slot_mlp_hidden: usize,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            res: 32,
            slots: 4,
            iters: 3,
            width: 64,
            encoder_channels: [16, 32, 32, 64, 64],
            encoder_strides: [1, 2, 1, 2, 1],
            decoder_channels: [64, 32, 16],
            spatial_broadcast: true,
            classes: 5,
            bottleneck: Bottleneck::SlotAttention,
            residual_mlp: true,
            slot_mlp_hidden: 256,
            init_seed: 0,
        }
    }
}

/// Upsampling stages of the decoder, each doubling the grid.
pub const DECODER_STAGES: usize = 3;

impl ModelConfig {
    /// Small configuration used for gradient checks.
    pub fn toy(res: usize, width: usize) -> Self {
        Self {
            res,
            width,
            slots: 3,
            iters: 2,
            encoder_channels: [4, 4, 6, 6, width],
            decoder_channels: [6, 4, 4],
            slot_mlp_hidden: 8,
            ..Self::default()
        }
    }

    pub fn token_res(&self) -> usize {
        self.res / self.encoder_strides.iter().product::<usize>()
    }

    pub fn tokens(&self) -> usize {
        self.token_res().pow(3)
    }

    pub fn broadcast_res(&self) -> usize {
        self.res >> DECODER_STAGES
    }

    pub fn voxels(&self) -> usize {
        self.res.pow(3)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invalid(m));
        if self.slots == 0 {
            return fail("slot count must be at least 1".into());
        }
        if self.iters == 0 && self.bottleneck != Bottleneck::SlotMlp {
            return fail("attention needs at least one iteration".into());
        }
        if self.width == 0 || self.classes < 2 {
            return fail(format!("width {} / classes {} too small", self.width, self.classes));
        }
        if self.encoder_channels[4] != self.width {
            return fail(format!(
                "last encoder width {} must equal slot width {}",
                self.encoder_channels[4], self.width
            ));
        }
        if self.encoder_channels.contains(&0) || self.decoder_channels.contains(&0) {
            return fail("zero channel width".into());
        }
        let stride: usize = self.encoder_strides.iter().product();
        if self.encoder_strides.iter().any(|&s| s == 0 || s > 2) || self.res % stride != 0 || self.token_res() == 0 {
            return fail(format!("encoder strides {:?} do not tile res {}", self.encoder_strides, self.res));
        }
        if self.res % (1 << DECODER_STAGES) != 0 || self.broadcast_res() == 0 {
            return fail(format!("res {} is not a multiple of {}", self.res, 1 << DECODER_STAGES));
        }
        if self.tokens() < self.slots && self.bottleneck != Bottleneck::SlotMlp {
            return fail(format!("{} tokens for {} slots", self.tokens(), self.slots));
        }
        Ok(())
    }
}
