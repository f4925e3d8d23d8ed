//! Dynamic channel execution for convolutional networks.
//!
//! At every training step a combinatorial UCB bandit picks a fixed-size subset of
//! convolutional channels to run. Only that "thin" network is executed and
//! updated, and first-order Taylor saliencies of the active channels feed back
//! into the bandit. After training, the most salient channels are extracted
//! into a compact model and fine-tuned.

pub mod bandit;
pub mod channel;
pub mod data;
pub mod nn;
pub mod saliency;
pub mod surgeon;
pub mod tensor;
pub mod trainer;

pub mod prelude {
    pub use crate::bandit::{BanditState, InitStrategy};
    pub use crate::channel::{ChannelId, ChannelMask, ChannelRegistry};
    pub use crate::nn::{ArchDescriptor, Mode, Model};
    pub use crate::saliency::SaliencyReport;
    pub use crate::tensor::{Graph, Tensor, Var};
}
