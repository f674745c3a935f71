// Indexed loops are deliberate in the kernels (the summation order is part of
// the determinism contract), and `!(x > 0)` guards intentionally reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

//! Temporal ROI align operators.
//!
//! Feature extraction for video proposals that looks beyond the target frame:
//! conventional ROI align on the target, most-similar ROI align against
//! support frames (cosine-similarity top-K gathering), and temporal
//! attentional aggregation across the resulting feature stack. Every operator
//! has an analytic vector-Jacobian product verified against central finite
//! differences, a naive reference route, and a vectorized route that agrees
//! with it bitwise.

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod ms_roi_align;
pub mod pipeline;
pub mod rng;
pub mod roi_align;
pub mod sampling;
pub mod tafa;
pub mod tensor;

pub use config::RunConfig;
pub use error::{Result, TroiError};
pub use ms_roi_align::{
    most_similar_entries, most_similar_roi_align, most_similar_roi_align_naive,
    most_similar_roi_align_vjp, similarity_map, top_k, weight_and_gather, SimilarityEntry,
};
pub use rng::SplitMix64;
pub use roi_align::{bilinear_sample, bilinear_sample_vjp, roi_align, roi_align_vjp, RoiBox};
pub use sampling::{sample_support_frames, SamplingPlan, SamplingStrategy};
pub use tafa::{
    aggregate, aggregate_average, aggregate_vjp, channel_concat, channel_split, embed, embed_vjp,
    tafa_forward, tafa_forward_naive, tafa_forward_vjp, tafa_forward_with_weights,
    temporal_attention_weights, temporal_attention_weights_vjp, AttentionBlockParams,
    TafaGradients, TafaParams, TemporalRoiStack,
};
pub use tensor::{
    l2_normalize, l2_normalize_vjp, matmul, matmul_vjp, softmax, softmax_vjp, Dtype, Element,
    Tensor, NORM_EPS,
};
