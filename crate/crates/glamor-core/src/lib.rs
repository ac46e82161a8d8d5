//! glamor-core: the numerical heart of glamor-kit.
//!
//! A self-contained, dependency-free library for metric-learning re-id at
//! desk scale: dense tensors with hand-written convolution gradients, four
//! normalization schemes, triplet + label-smoothed softmax losses with
//! batch-hard mining, global/local attention with fixed-mask fusion, a toy
//! residual backbone with Adam training, ranking evaluation (mAP / CMC), and
//! identity-balanced sampling with random-erasing augmentation.
//!
//! Everything is `f64`, single-threaded by default, and bit-reproducible
//! from a single seed.

pub mod attention;
pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod norms;
pub mod reid;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use attention::{fuse, global_attention, local_attention, ChannelMasks, GAParams, LAParams};
pub use backbone::{
    sparsity_probe, train_step, Adam, ForwardPass, Model, ModelConfig, SparsityReport, StageSpec,
    StemSpec,
};
pub use data::{
    lr_at, make_synthetic_dataset, pk_sample, random_erase, EraseConfig, EraseFill, EraseOutcome,
    PkSamplerConfig, ScheduleConfig, ScheduleKind, SyntheticDataset,
};
pub use error::{Error, Result};
pub use gradcheck::{
    grad_check, grad_check_multi_step, grad_check_named, ClosureFn, GradCheckReport, ScalarFn,
};
pub use reid::{distance_matrix, rank, EmbeddingSet, Protocol, RankingReport};
pub use losses::{
    batch_hard_mine, pairwise_distances, smoothed_softmax_loss, triplet_loss, trisoft_loss,
    AnchorTriplet, BatchHardResult, LossConfig, LossValue, Reduction, Smoothing,
};
pub use norms::{
    l2_normalize, neck, norm_backward, normalize, normalize_forward, NormKind, NormSpec, NormState,
};
pub use rng::SplitMix64;
pub use tensor::{conv2d, conv2d_backward, leaky_relu, sigmoid, ConvKernel, Matrix, Tensor4};
