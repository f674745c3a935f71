//! Support-frame sampling plans.
//!
//! Three strategies: consecutive neighbors, fixed stride, and uniform over the
//! whole video. Indices falling outside the video are clamped to the first or
//! last frame, which duplicates that frame in the resulting stack.

use std::fmt;

use crate::error::{Result, TroiError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingStrategy {
    /// t +/- 1, 2, ..., T/2 around the target.
    Consecutive,
    /// t +/- S, 2S, ..., (T/2)S around the target.
    Strided(usize),
    /// T points evenly spaced over the full video span.
    Uniform,
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingStrategy::Consecutive => write!(f, "consecutive"),
            SamplingStrategy::Strided(s) => write!(f, "strided({s})"),
            SamplingStrategy::Uniform => write!(f, "uniform"),
        }
    }
}

/// Ordered support-frame indices for one target frame. The target itself is
/// not listed; duplicates are legal and mean "copy that frame".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingPlan {
    pub indices: Vec<usize>,
    pub strategy: SamplingStrategy,
    pub video_len: usize,
    pub target: usize,
}

impl SamplingPlan {
    pub fn support_count(&self) -> usize {
        self.indices.len()
    }
}

/// Build the support plan for a target frame.
///
/// `video_len` >= 1, `target` < `video_len`. For the symmetric strategies
/// (consecutive, strided) `support_count` must be even; uniform accepts any
/// count, including zero.
pub fn sample_support_frames(
    video_len: usize,
    target: usize,
    support_count: usize,
    strategy: SamplingStrategy,
) -> Result<SamplingPlan> {
    if video_len == 0 {
        return Err(TroiError::invalid("empty video"));
    }
    if target >= video_len {
        return Err(TroiError::invalid(format!(
            "target index {target} out of range for video of length {video_len}"
        )));
    }
    if let SamplingStrategy::Strided(s) = strategy {
        if s == 0 {
            return Err(TroiError::invalid("stride must be >= 1"));
        }
    }

    let indices = match strategy {
        SamplingStrategy::Consecutive => symmetric_offsets(video_len, target, support_count, 1)?,
        SamplingStrategy::Strided(s) => symmetric_offsets(video_len, target, support_count, s)?,
        SamplingStrategy::Uniform => uniform_span(video_len, support_count),
    };
    Ok(SamplingPlan {
        indices,
        strategy,
        video_len,
        target,
    })
}

fn symmetric_offsets(
    video_len: usize,
    target: usize,
    support_count: usize,
    stride: usize,
) -> Result<Vec<usize>> {
    if !support_count.is_multiple_of(2) {
        return Err(TroiError::invalid(format!(
            "symmetric strategies need an even support count, got {support_count}"
        )));
    }
    let half = (support_count / 2) as i64;
    let t = target as i64;
    let s = stride as i64;
    let last = (video_len - 1) as i64;
    let mut indices = Vec::with_capacity(support_count);
    for i in -half..=half {
        if i == 0 {
            continue;
        }
        // clamping past either end copies the first/last frame
        let idx = (t + i * s).clamp(0, last);
        indices.push(idx as usize);
    }
    Ok(indices)
}

fn uniform_span(video_len: usize, support_count: usize) -> Vec<usize> {
    match support_count {
        0 => Vec::new(),
        1 => vec![0],
        _ => {
            let last = (video_len - 1) as f64;
            let denom = (support_count - 1) as f64;
            (0..support_count)
                // round half away from zero; arguments are non-negative
                .map(|j| (j as f64 * last / denom).round() as usize)
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consecutive_interior() {
        let plan = sample_support_frames(10, 5, 4, SamplingStrategy::Consecutive).unwrap();
        assert_eq!(plan.indices, vec![3, 4, 6, 7]);
    }

    #[test]
    fn consecutive_clamps_at_video_start() {
        let plan = sample_support_frames(10, 0, 4, SamplingStrategy::Consecutive).unwrap();
        assert_eq!(plan.indices, vec![0, 0, 1, 2]);
    }

    #[test]
    fn consecutive_clamps_at_video_end() {
        let plan = sample_support_frames(10, 9, 4, SamplingStrategy::Consecutive).unwrap();
        assert_eq!(plan.indices, vec![7, 8, 9, 9]);
    }

    #[test]
    fn strided_applies_stride() {
        let plan = sample_support_frames(30, 14, 4, SamplingStrategy::Strided(5)).unwrap();
        assert_eq!(plan.indices, vec![4, 9, 19, 24]);
    }

    #[test]
    fn uniform_spans_whole_video() {
        let plan = sample_support_frames(15, 7, 3, SamplingStrategy::Uniform).unwrap();
        assert_eq!(plan.indices, vec![0, 7, 14]);
    }

    #[test]
    fn uniform_degenerate_counts() {
        assert_eq!(
            sample_support_frames(9, 0, 1, SamplingStrategy::Uniform)
                .unwrap()
                .indices,
            vec![0]
        );
        assert!(sample_support_frames(9, 0, 0, SamplingStrategy::Uniform)
            .unwrap()
            .indices
            .is_empty());
    }

    #[test]
    fn odd_count_rejected_for_symmetric() {
        assert!(sample_support_frames(10, 5, 3, SamplingStrategy::Consecutive).is_err());
        assert!(sample_support_frames(10, 5, 5, SamplingStrategy::Strided(2)).is_err());
    }

    #[test]
    fn invalid_target_rejected() {
        assert!(sample_support_frames(10, 10, 4, SamplingStrategy::Consecutive).is_err());
        assert!(sample_support_frames(0, 0, 0, SamplingStrategy::Uniform).is_err());
    }

    #[test]
    fn interior_consecutive_has_no_duplicates_and_skips_target() {
        for t in 2..=7usize {
            let plan = sample_support_frames(10, t, 4, SamplingStrategy::Consecutive).unwrap();
            let mut sorted = plan.indices.clone();
            sorted.dedup();
            assert_eq!(sorted.len(), 4);
            assert!(!plan.indices.contains(&t));
        }
    }
}
