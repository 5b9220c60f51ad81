use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{Grid, PatchConfig};

/// Clip geometry the model consumes (one training window).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub drop_path_rate: f64,
    pub dropout: f64,
    pub patch: PatchConfig,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidConfig(
                "encoder depth must be at least 1".into(),
            ));
        }
        if self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.n_heads
            )));
        }
        if self.patch.embed_dim != self.embed_dim {
            return Err(Error::InvalidConfig(
                "patch embed_dim must equal encoder embed_dim".into(),
            ));
        }
        for (name, rate) in [
            ("drop_path_rate", self.drop_path_rate),
            ("dropout", self.dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::InvalidConfig(format!(
                    "{name} {rate} outside [0, 1)"
                )));
            }
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::InvalidConfig("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Stochastic depth of block `i`, linear from 0 to `drop_path_rate`.
    pub fn block_drop_path(&self, i: usize) -> f64 {
        if self.depth <= 1 {
            self.drop_path_rate
        } else {
            self.drop_path_rate * i as f64 / (self.depth - 1) as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    /// Zero means the decoder is the linear head alone.
    pub depth: usize,
    pub n_heads: usize,
    pub output_patch_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    ClsToken,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub n_classes: usize,
    pub pooling: Pooling,
}

impl ClassifierHead {
    pub fn mean(n_classes: usize) -> Self {
        Self {
            n_classes,
            pooling: Pooling::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: InputGeometry,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub head: Option<ClassifierHead>,
}

impl ModelConfig {
    /// Small-scale default: 16×64×64×3 windows, patch 8, tubelet 2, SPT on.
    pub fn small_default() -> Self {
        Self::build(
            InputGeometry {
                frames: 16,
                height: 64,
                width: 64,
                channels: 3,
            },
            8,
            2,
            true,
            128,
            6,
            4,
            64,
            2,
            4,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn build(
        input: InputGeometry,
        patch_size: usize,
        tubelet_size: usize,
        use_spt: bool,
        embed_dim: usize,
        depth: usize,
        n_heads: usize,
        decoder_dim: usize,
        decoder_depth: usize,
        decoder_heads: usize,
    ) -> Self {
        let patch = PatchConfig::new(patch_size, tubelet_size, embed_dim, use_spt);
        Self {
            input,
            encoder: EncoderConfig {
                embed_dim,
                depth,
                n_heads,
                mlp_ratio: 4.0,
                drop_path_rate: 0.0,
                dropout: 0.0,
                patch,
            },
            decoder: DecoderConfig {
                embed_dim: decoder_dim,
                depth: decoder_depth,
                n_heads: decoder_heads,
                output_patch_dim: patch.patch_dim(input.channels),
            },
            head: None,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        self.encoder
            .patch
            .grid_for(self.input.frames, self.input.height, self.input.width)
    }

    pub fn n_tokens(&self) -> usize {
        self.grid().map(|g| g.len()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.grid()?;
        let expected = self.encoder.patch.patch_dim(self.input.channels);
        if self.decoder.output_patch_dim != expected {
            return Err(Error::InvalidConfig(format!(
                "decoder output_patch_dim {} but patches hold {expected} values",
                self.decoder.output_patch_dim
            )));
        }
        if self.decoder.embed_dim == 0 {
            return Err(Error::InvalidConfig(
                "decoder embed_dim must be positive".into(),
            ));
        }
        if self.decoder.depth > 0
            && (self.decoder.n_heads == 0
                || !self.decoder.embed_dim.is_multiple_of(self.decoder.n_heads))
        {
            return Err(Error::InvalidConfig(
                "decoder embed_dim not divisible by its heads".into(),
            ));
        }
        if let Some(head) = self.head {
            if head.n_classes < 2 {
                return Err(Error::InvalidConfig(
                    "classifier needs at least 2 classes".into(),
                ));
            }
        }
        Ok(())
    }
}
