//! Tensor storage, seeded normal draws and distributional statistics.

mod container;
mod rng;
mod stats;
mod tensor;

pub use container::{read_tensor, read_tensor_file, write_tensor, write_tensor_file, MAGIC};
pub use rng::{randn, RngState};
pub use stats::{
    ks_standard_normal, moments, normal_cdf, normality, pearson, MomentStats, NormalityCheck,
    KS_CRITICAL_001,
};
pub use tensor::Tensor;
