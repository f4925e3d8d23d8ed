//! Layer library, architecture descriptors and model checkpoints.

pub mod checkpoint;
mod descriptor;
mod model;

pub use descriptor::{
    desk_descriptor, tiny_descriptor, vgg19_descriptor, ArchDescriptor, Block, DescriptorError,
    FeatureShape,
};
pub use model::{ConvUnit, ForwardPass, Mode, Model, ModelError, ParamRole, BN_EPS, BN_MOMENTUM};
