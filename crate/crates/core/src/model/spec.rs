use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv_output_size;
use crate::pooling::PoolMode;

/// Number of high-resolution crops pooled jointly by the local branch.
pub const CROPS_PER_IMAGE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    /// One low-resolution view of the whole image.
    GlobalOnly,
    /// Four high-resolution crops through a shared trunk, pooled together.
    LocalOnly,
    /// Both branches, features concatenated (global first) before the head.
    MultiRes,
}

impl BranchKind {
    pub const ALL: [BranchKind; 3] = [
        BranchKind::GlobalOnly,
        BranchKind::LocalOnly,
        BranchKind::MultiRes,
    ];

    pub fn uses_global(&self) -> bool {
        matches!(self, BranchKind::GlobalOnly | BranchKind::MultiRes)
    }

    pub fn uses_local(&self) -> bool {
        matches!(self, BranchKind::LocalOnly | BranchKind::MultiRes)
    }

    pub fn label(&self) -> &'static str {
        match self {
            BranchKind::GlobalOnly => "global_only",
            BranchKind::LocalOnly => "local_only",
            BranchKind::MultiRes => "multi_res",
        }
    }

    /// Row caption in ablation tables.
    pub fn caption(&self) -> &'static str {
        match self {
            BranchKind::GlobalOnly => "Whole Image (low res)",
            BranchKind::LocalOnly => "Multi-crop (just high res)",
            BranchKind::MultiRes => "Multi-crop (high and low res)",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub kind: BranchKind,
    /// Side of the square global-branch input; images are resized so their
    /// shortest side equals this before cropping.
    pub global_input_size: usize,
    /// Side of each square local crop, taken after resizing the shortest side
    /// to twice this value.
    pub local_crop_size: usize,
    pub crops_per_image: usize,
    pub pool_mode: PoolMode,
}

impl BranchSpec {
    pub fn validate(&self) -> Result<()> {
        self.pool_mode.validate()?;
        if self.kind.uses_local() && self.crops_per_image != CROPS_PER_IMAGE {
            return Err(Error::Config(format!(
                "the local branch pools exactly {CROPS_PER_IMAGE} crops, got {}",
                self.crops_per_image
            )));
        }
        if self.global_input_size == 0 || self.local_crop_size == 0 {
            return Err(Error::Config("branch input sizes must be >= 1".into()));
        }
        Ok(())
    }

    /// Shortest side the local branch resizes to.
    pub fn local_resize(&self) -> usize {
        2 * self.local_crop_size
    }
}

/// One convolution followed by a rectifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkSpec {
    pub in_channels: usize,
    pub blocks: Vec<ConvBlock>,
}

impl TrunkSpec {
    /// Two strided 3x3 blocks of widths 8 and 16; a 32 pixel input ends as an
    /// 8x8 map.
    pub fn desk() -> Self {
        TrunkSpec {
            in_channels: 3,
            blocks: vec![
                ConvBlock {
                    channels: 8,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                ConvBlock {
                    channels: 16,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
            ],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks
            .last()
            .map(|b| b.channels)
            .unwrap_or(self.in_channels)
    }

    /// Spatial side of the final map for a square input of side `input`.
    pub fn output_side(&self, input: usize) -> Result<usize> {
        self.blocks.iter().try_fold(input, |s, b| {
            conv_output_size(s, b.kernel, b.stride, b.padding)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("trunk needs at least one conv block".into()));
        }
        if self.in_channels == 0
            || self
                .blocks
                .iter()
                .any(|b| b.channels == 0 || b.kernel == 0 || b.stride == 0)
        {
            return Err(Error::Config(
                "trunk channels, kernels and strides must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub branch: BranchSpec,
    pub trunk: TrunkSpec,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.branch.validate()?;
        self.trunk.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.branch.kind.uses_global() {
            self.trunk.output_side(self.branch.global_input_size)?;
        }
        if self.branch.kind.uses_local() {
            self.trunk.output_side(self.branch.local_crop_size)?;
        }
        Ok(())
    }

    /// Width of the concatenated pooled feature vector fed to the head.
    pub fn feature_dim(&self) -> usize {
        let c = self.trunk.out_channels();
        match self.branch.kind {
            BranchKind::MultiRes => 2 * c,
            _ => c,
        }
    }
}
