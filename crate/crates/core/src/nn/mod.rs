//! Building blocks: DropBlock, spatial attention, pre-activation residual
//! blocks and the residual spatial attention block.

pub mod attention;
pub mod dropblock;
pub mod layers;
pub mod params;
pub mod residual;

pub use attention::{Attended, SpatialAttention, SA_KERNEL};
pub use dropblock::{
    apply_dropblock, dropblock_mask, expected_drop_fraction, DropBlockConfig, DropBlockMask, SeedRate,
};
pub use layers::{BatchNorm, BatchNormConfig, Conv2d, Upsample};
pub use params::{Ctx, Initializer, Mode, ParamId, ParamStore, Parameter};
pub use residual::{BlockConfig, ConvUnit, DropBlockPlacement, PreActResidualBlock, Rsab, SaPlacement};
