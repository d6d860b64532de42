//! Meta-learned implicit semantic data augmentation for fine-grained
//! classification, on small dense networks and synthetic or IDX data.

pub mod augment_loss;
pub mod datakit;
pub mod error;
pub mod metagrad;
pub mod networks;
pub mod numkit;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/augmentation-loss.md")]
    pub struct AugmentationLoss;
    #[doc = include_str!("../../../book/src/networks.md")]
    pub struct Networks;
    #[doc = include_str!("../../../book/src/meta-gradient.md")]
    pub struct MetaGradient;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/data.md")]
    pub struct Data;
    #[doc = include_str!("../../../book/src/command-line.md")]
    pub struct CommandLine;
}
