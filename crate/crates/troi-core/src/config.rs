//! Run configuration shared by the CLI and the pipeline.

use crate::sampling::SamplingStrategy;
use crate::tensor::Dtype;

/// Operator hyperparameters plus harness knobs. The defaults are the
/// operator's standard settings: K=4 similar positions, N=4 attention blocks,
/// 7x7 pooling, 14 uniformly sampled support frames.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Most-similar positions gathered per target position.
    pub k: usize,
    /// Temporal attention blocks (channel groups).
    pub n_blocks: usize,
    /// Pooled ROI height.
    pub pool_h: usize,
    /// Pooled ROI width.
    pub pool_w: usize,
    /// Number of support frames.
    pub t_support: usize,
    /// Support-frame sampling strategy.
    pub strategy: SamplingStrategy,
    /// Bilinear samples per bin axis in ROI align.
    pub sampling_ratio: usize,
    /// Seed for synthetic data and parameter initialization.
    pub seed: u64,
    /// Scalar type for tensors on disk and in benchmarks.
    pub dtype: Dtype,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: 4,
            n_blocks: 4,
            pool_h: 7,
            pool_w: 7,
            t_support: 14,
            strategy: SamplingStrategy::Uniform,
            sampling_ratio: 2,
            seed: 0,
            dtype: Dtype::F64,
        }
    }
}
