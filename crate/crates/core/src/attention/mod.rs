//! Attention blocks used in cost regularization and cross-modal fusion.

pub mod ecft;
pub mod flops;
pub mod seca;
pub mod triplet;
pub mod vanilla;

pub use ecft::{AugSc, Ecaa, EcaaConfig, EcaaParts, Ecft, FusionBranch, FusionDirections, Gffn, QueryNorm};
pub use flops::{bench_forward, fit_exponent, flop_count, Mechanism};
pub use seca::{eca_kernel_size, Eca, Seca, SecaParts};
pub use triplet::{zpool, TripletAttention, TA_KERNEL};
pub use vanilla::{vanilla_attention, VanillaAttention};
