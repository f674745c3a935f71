//! End-to-end per-proposal pipeline and the operator benchmark.
//!
//! For one proposal on the target frame: pool its ROI features, extract
//! most-similar ROI features from every planned support frame, then aggregate
//! the stack with temporal attention. Synthetic data generation for the
//! harness lives here too.

use std::time::Instant;

use crate::config::RunConfig;
use crate::error::{Result, TroiError};
use crate::ms_roi_align::{most_similar_roi_align, most_similar_roi_align_naive};
use crate::rng::SplitMix64;
use crate::roi_align::{roi_align, RoiBox};
use crate::sampling::{sample_support_frames, SamplingPlan};
use crate::tafa::{tafa_forward_naive, tafa_forward_with_weights, TafaParams, TemporalRoiStack};
use crate::tensor::{Dtype, Element, Tensor};

/// Which implementation route the pipeline uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Naive,
    Vectorized,
}

/// Output of the pipeline for one proposal.
#[derive(Clone, Debug)]
pub struct ProposalRun<T: Element = f64> {
    /// Temporal ROI features, pooled_h x pooled_w x C.
    pub features: Tensor<T>,
    /// The support plan that produced the stack.
    pub plan: SamplingPlan,
    /// Attention-weight entropy in nats, averaged over blocks and positions.
    pub mean_attention_entropy: f64,
}

/// Full pipeline for one proposal.
pub fn run_proposal<T: Element>(
    frames: &[Tensor<T>],
    target: usize,
    roi: &RoiBox,
    cfg: &RunConfig,
    params: &TafaParams<T>,
    route: Route,
) -> Result<ProposalRun<T>> {
    if frames.is_empty() {
        return Err(TroiError::invalid("empty video"));
    }
    let dims = frames[0].dims();
    for f in frames {
        if f.dims() != dims {
            return Err(TroiError::shape(format!(
                "frame dims {:?} differ from {:?}",
                f.dims(),
                dims
            )));
        }
    }
    let plan = sample_support_frames(frames.len(), target, cfg.t_support, cfg.strategy)?;
    let target_features = roi_align(
        &frames[target],
        roi,
        cfg.pool_h,
        cfg.pool_w,
        cfg.sampling_ratio,
    )?;

    // Stack frames in temporal order with the target's own features inserted
    // among the supports.
    let insert_at = plan.indices.iter().filter(|&&i| i < target).count();
    let mut stack_frames = Vec::with_capacity(plan.indices.len() + 1);
    for (pos, &idx) in plan.indices.iter().enumerate() {
        if pos == insert_at {
            stack_frames.push(target_features.clone());
        }
        let ms = match route {
            Route::Vectorized => most_similar_roi_align(&target_features, &frames[idx], cfg.k)?,
            Route::Naive => most_similar_roi_align_naive(&target_features, &frames[idx], cfg.k)?,
        };
        stack_frames.push(ms);
    }
    if insert_at == plan.indices.len() {
        stack_frames.push(target_features.clone());
    }
    let stack = TemporalRoiStack::new(stack_frames, insert_at)?;

    let (features, weights) = match route {
        Route::Vectorized => tafa_forward_with_weights(&stack, params)?,
        Route::Naive => {
            // the naive route recomputes the weights for the entropy summary
            let out = tafa_forward_naive(&stack, params)?;
            let (_, w) = tafa_forward_with_weights(&stack, params)?;
            (out, w)
        }
    };

    let mut entropy_sum = 0.0;
    let mut entropy_count = 0usize;
    for block in &weights {
        let frames_in_stack = block.dims()[0];
        let positions = block.dims()[1] * block.dims()[2];
        for p in 0..positions {
            let mut h = 0.0f64;
            for i in 0..frames_in_stack {
                let w = block.data()[i * positions + p].to_f64();
                h -= w * libm::log(w);
            }
            entropy_sum += h;
            entropy_count += 1;
        }
    }

    Ok(ProposalRun {
        features,
        plan,
        mean_attention_entropy: if entropy_count == 0 {
            0.0
        } else {
            entropy_sum / entropy_count as f64
        },
    })
}

/// Pipeline over all proposals of one video; features stacked into a
/// P x pooled_h x pooled_w x C tensor.
pub struct VideoRun<T: Element = f64> {
    pub stacked: Tensor<T>,
    pub proposals: Vec<ProposalRun<T>>,
}

pub fn run_video<T: Element>(
    frames: &[Tensor<T>],
    target: usize,
    boxes: &[RoiBox],
    cfg: &RunConfig,
    params: &TafaParams<T>,
    route: Route,
) -> Result<VideoRun<T>> {
    if boxes.is_empty() {
        return Err(TroiError::invalid("no proposals in boxes file"));
    }
    let mut proposals = Vec::with_capacity(boxes.len());
    for roi in boxes {
        proposals.push(run_proposal(frames, target, roi, cfg, params, route)?);
    }
    let (h, w, c) = {
        let d = proposals[0].features.dims();
        (d[0], d[1], d[2])
    };
    let mut stacked = Tensor::zeros(&[boxes.len(), h, w, c])?;
    let per = h * w * c;
    for (i, p) in proposals.iter().enumerate() {
        stacked.data_mut()[i * per..(i + 1) * per].copy_from_slice(p.features.data());
    }
    Ok(VideoRun { stacked, proposals })
}

/// Synthetic H x W x C feature map, values uniform in [-1, 1).
pub fn synthetic_feature_map<T: Element>(
    rng: &mut SplitMix64,
    h: usize,
    w: usize,
    c: usize,
) -> Result<Tensor<T>> {
    let data = (0..h * w * c)
        .map(|_| T::from_f64(rng.next_signed_unit()))
        .collect();
    Tensor::from_vec(&[h, w, c], data)
}

/// Random well-formed proposal boxes inside an H x W map.
pub fn synthetic_boxes(
    rng: &mut SplitMix64,
    count: usize,
    map_h: usize,
    map_w: usize,
) -> Vec<RoiBox> {
    let max_x = (map_w - 1) as f64;
    let max_y = (map_h - 1) as f64;
    (0..count)
        .map(|_| {
            let x1 = rng.next_range(0.0, max_x * 0.6);
            let y1 = rng.next_range(0.0, max_y * 0.6);
            RoiBox {
                x1,
                y1,
                x2: x1 + rng.next_range(1.0, max_x - x1),
                y2: y1 + rng.next_range(1.0, max_y - y1),
            }
        })
        .collect()
}

/// Benchmark row: median per-proposal latency of both routes of one operator.
#[derive(Clone, Debug)]
pub struct OpBench {
    pub name: String,
    pub naive_ns: f64,
    pub vectorized_ns: f64,
    pub max_abs_diff: f64,
}

impl OpBench {
    pub fn speedup(&self) -> f64 {
        self.naive_ns / self.vectorized_ns
    }
}

/// Agreement tolerance between the two routes before a benchmark may report.
pub fn agreement_tol(dtype: Dtype) -> f64 {
    match dtype {
        Dtype::F64 => 1e-12,
        // f32 accumulations genuinely differ in the last bits at these sizes
        Dtype::F32 => 1e-4,
    }
}

fn median_ns(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[samples.len() / 2]
}

fn time_reps<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<f64> {
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_nanos() as f64);
    }
    Ok(median_ns(samples))
}

/// Time naive vs vectorized most-similar ROI align (over all support frames of
/// one proposal) and temporal aggregation (one stack), checking that the two
/// routes agree before reporting.
pub fn bench_operators<T: Element>(
    cfg: &RunConfig,
    map_h: usize,
    map_w: usize,
    channels: usize,
    reps: usize,
) -> Result<Vec<OpBench>> {
    if reps == 0 {
        return Err(TroiError::invalid("bench repetitions must be >= 1"));
    }
    if cfg.n_blocks == 0 || !channels.is_multiple_of(cfg.n_blocks) {
        return Err(TroiError::invalid(format!(
            "block count {} does not divide {channels} channels",
            cfg.n_blocks
        )));
    }
    let tol = agreement_tol(T::DTYPE);
    let mut rng = SplitMix64::new(cfg.seed);
    let video_len = cfg.t_support.max(1) + 1;
    let frames: Vec<Tensor<T>> = (0..video_len)
        .map(|_| synthetic_feature_map(&mut rng, map_h, map_w, channels))
        .collect::<Result<_>>()?;
    let target = video_len / 2;
    let roi = synthetic_boxes(&mut rng, 1, map_h, map_w)[0];
    let params = TafaParams::<T>::seeded(cfg.n_blocks, channels / cfg.n_blocks, cfg.seed)?;

    let plan = sample_support_frames(video_len, target, cfg.t_support, cfg.strategy)?;
    let target_features = roi_align(
        &frames[target],
        &roi,
        cfg.pool_h,
        cfg.pool_w,
        cfg.sampling_ratio,
    )?;

    // agreement gate first; a mismatch aborts with a diff summary
    let mut ms_diff = 0.0f64;
    let mut stack_frames = vec![target_features.clone()];
    for &idx in &plan.indices {
        let naive = most_similar_roi_align_naive(&target_features, &frames[idx], cfg.k)?;
        let fast = most_similar_roi_align(&target_features, &frames[idx], cfg.k)?;
        ms_diff = ms_diff.max(naive.max_abs_diff(&fast)?);
        stack_frames.push(fast);
    }
    if ms_diff > tol {
        return Err(TroiError::invalid(format!(
            "most_similar_roi_align route disagreement: max abs diff {ms_diff:.3e} > {tol:.0e}"
        )));
    }
    let stack = TemporalRoiStack::new(stack_frames, 0)?;
    let tafa_naive = tafa_forward_naive(&stack, &params)?;
    let (tafa_fast, _) = tafa_forward_with_weights(&stack, &params)?;
    let tafa_diff = tafa_naive.max_abs_diff(&tafa_fast)?;
    if tafa_diff > tol {
        return Err(TroiError::invalid(format!(
            "tafa_forward route disagreement: max abs diff {tafa_diff:.3e} > {tol:.0e}"
        )));
    }

    let ms_naive_ns = time_reps(reps, || {
        for &idx in &plan.indices {
            most_similar_roi_align_naive(&target_features, &frames[idx], cfg.k)?;
        }
        Ok(())
    })?;
    let ms_fast_ns = time_reps(reps, || {
        for &idx in &plan.indices {
            most_similar_roi_align(&target_features, &frames[idx], cfg.k)?;
        }
        Ok(())
    })?;
    let tafa_naive_ns = time_reps(reps, || {
        tafa_forward_naive(&stack, &params)?;
        Ok(())
    })?;
    let tafa_fast_ns = time_reps(reps, || {
        crate::tafa::tafa_forward(&stack, &params)?;
        Ok(())
    })?;

    Ok(vec![
        OpBench {
            name: "most_similar_roi_align".into(),
            naive_ns: ms_naive_ns,
            vectorized_ns: ms_fast_ns,
            max_abs_diff: ms_diff,
        },
        OpBench {
            name: "tafa_forward".into(),
            naive_ns: tafa_naive_ns,
            vectorized_ns: tafa_fast_ns,
            max_abs_diff: tafa_diff,
        },
        OpBench {
            name: "pipeline (ms + tafa)".into(),
            naive_ns: ms_naive_ns + tafa_naive_ns,
            vectorized_ns: ms_fast_ns + tafa_fast_ns,
            max_abs_diff: ms_diff.max(tafa_diff),
        },
    ])
}
