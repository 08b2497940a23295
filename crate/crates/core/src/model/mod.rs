//! Multi-resolution crop pooling: a low-resolution whole-image branch, a
//! four-crop high-resolution branch pooled across crops, and the single-branch
//! variants used in the ablation grid.

mod crop;
mod network;
mod spec;
mod trunk;

pub use crop::{
    make_crop_plan, make_crop_plan_seeded, shortest_side_resize, BranchView, CropPlan, Phase, Rect,
};
pub use network::{Model, ModelContext, ModelGrads, ModelInput};
pub use spec::{BranchKind, BranchSpec, ConvBlock, ModelSpec, TrunkSpec, CROPS_PER_IMAGE};
pub use trunk::{Trunk, TrunkCache, TrunkGrads};

#[cfg(test)]
mod tests;
