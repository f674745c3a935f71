//! The standard gradient-check suite: one [`CheckCase`] per analytic VJP in
//! the library, with input samplers that keep probes away from top-K
//! selection boundaries and other non-differentiable corners.

use crate::error::Result;
use crate::gradcheck::{Accept, CheckCase, Sampler, VjpOp, DEFAULT_EPS};
use crate::ms_roi_align::{
    most_similar_roi_align, most_similar_roi_align_vjp, similarity_map, weight_and_gather,
    weight_and_gather_vjp, SimilarityEntry,
};
use crate::rng::SplitMix64;
use crate::roi_align::{
    bilinear_sample, bilinear_sample_vjp, roi_align, roi_align_vjp, sample_coordinates, RoiBox,
};
use crate::tafa::{
    aggregate, aggregate_vjp, embed, embed_vjp, tafa_forward, tafa_forward_vjp,
    temporal_attention_weights, temporal_attention_weights_vjp, AttentionBlockParams, TafaParams,
    TemporalRoiStack,
};
use crate::tensor::{
    l2_normalize, l2_normalize_vjp, matmul, matmul_vjp, softmax, softmax_vjp, Tensor, NORM_EPS,
};

/// Tolerance for the small tensor primitives.
pub const CORE_TOL: f64 = 1e-6;
/// Tolerance for the composite operators.
pub const OP_TOL: f64 = 1e-5;

fn random_tensor(rng: &mut SplitMix64, dims: &[usize]) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.next_signed_unit()).collect())
}

fn sampler_of(dims: Vec<Vec<usize>>) -> Sampler {
    Box::new(move |rng| dims.iter().map(|d| random_tensor(rng, d)).collect())
}

/// Smallest channel-vector norm across an H x W x C map.
fn min_channel_norm(map: &Tensor) -> f64 {
    let c = *map.dims().last().unwrap();
    let mut worst = f64::INFINITY;
    for row in map.data().chunks_exact(c) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < worst {
            worst = norm;
        }
    }
    worst
}

struct L2NormalizeOp;

impl VjpOp for L2NormalizeOp {
    fn name(&self) -> &str {
        "l2_normalize"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Tensor::from_vec(inputs[0].dims(), l2_normalize(inputs[0].data(), NORM_EPS)?)
    }
    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>> {
        let g = l2_normalize_vjp(inputs[0].data(), NORM_EPS, cotangent.data())?;
        Ok(vec![Tensor::from_vec(inputs[0].dims(), g)?])
    }
}

struct SoftmaxOp;

impl VjpOp for SoftmaxOp {
    fn name(&self) -> &str {
        "softmax"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Tensor::from_vec(inputs[0].dims(), softmax(inputs[0].data())?)
    }
    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>> {
        let g = softmax_vjp(inputs[0].data(), cotangent.data())?;
        Ok(vec![Tensor::from_vec(inputs[0].dims(), g)?])
    }
}

struct MatmulOp;

impl VjpOp for MatmulOp {
    fn name(&self) -> &str {
        "matmul"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        matmul(&inputs[0], &inputs[1])
    }
    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>> {
        let (da, db) = matmul_vjp(&inputs[0], &inputs[1], cotangent)?;
        Ok(vec![da, db])
    }
}

struct BilinearSampleOp {
    x: f64,
    y: f64,
}

impl VjpOp for BilinearSampleOp {
    fn name(&self) -> &str {
        "bilinear_sample"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let v = bilinear_sample(&inputs[0], self.x, self.y)?;
        Tensor::from_vec(&[v.len()], v)
    }
    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![bilinear_sample_vjp(
            &inputs[0],
            self.x,
            self.y,
            cotangent.data(),
        )?])
    }
}

struct RoiAlignOp {
    roi: RoiBox,
    pooled_h: usize,
    pooled_w: usize,
    ratio: usize,
}

impl VjpOp for RoiAlignOp {
    fn name(&self) -> &str {
        "roi_align"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        roi_align(
            &inputs[0],
            &self.roi,
            self.pooled_h,
            self.pooled_w,
            self.ratio,
        )
    }
    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![roi_align_vjp(
            inputs[0].dims(),
            &self.roi,
            self.pooled_h,
            self.pooled_w,
            self.ratio,
            cotangent,
        )?])
    }
}

struct WeightAndGatherOp {
    positions: Vec<(usize, usize)>,
}

impl WeightAndGatherOp {
    fn entry(&self, scores: &Tensor) -> SimilarityEntry {
        SimilarityEntry {
            scores: scores.data().to_vec(),
            positions: self.positions.clone(),
        }
    }
}

impl VjpOp for WeightAndGatherOp {
    fn name(&self) -> &str {
        "weight_and_gather"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let v = weight_and_gather(&self.entry(&inputs[0]), &inputs[1])?;
        Tensor::from_vec(&[v.len()], v)
    }
    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>> {
        let (ds, dsup) =
            weight_and_gather_vjp(&self.entry(&inputs[0]), &inputs[1], cotangent.data())?;
        Ok(vec![Tensor::from_vec(inputs[0].dims(), ds)?, dsup])
    }
}

struct MsRoiAlignOp {
    k: usize,
}

impl VjpOp for MsRoiAlignOp {
    fn name(&self) -> &str {
        "most_similar_roi_align"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        most_similar_roi_align(&inputs[0], &inputs[1], self.k)
    }
    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>> {
        let (dt, ds) = most_similar_roi_align_vjp(&inputs[0], &inputs[1], self.k, cotangent)?;
        Ok(vec![dt, ds])
    }
}

struct EmbedOp;

fn block_from(kernel: &Tensor, bias: &Tensor) -> AttentionBlockParams {
    AttentionBlockParams {
        kernel: kernel.clone(),
        bias: bias.clone(),
    }
}

impl VjpOp for EmbedOp {
    fn name(&self) -> &str {
        "embed"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        embed(&inputs[0], &block_from(&inputs[1], &inputs[2]))
    }
    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>> {
        let (dx, dk, db) = embed_vjp(&inputs[0], &block_from(&inputs[1], &inputs[2]), cotangent)?;
        Ok(vec![dx, dk, db])
    }
}

struct AttentionWeightsOp {
    target_index: usize,
}

impl VjpOp for AttentionWeightsOp {
    fn name(&self) -> &str {
        "temporal_attention_weights"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        temporal_attention_weights(inputs, self.target_index)
    }
    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>> {
        temporal_attention_weights_vjp(inputs, self.target_index, cotangent)
    }
}

/// Checked with respect to the frame features only: the weight precondition
/// (rows summing to one) cannot survive elementwise perturbation, so weight
/// gradients are exercised through the full tafa_forward chain instead.
struct AggregateOp {
    weights: Tensor,
}

impl VjpOp for AggregateOp {
    fn name(&self) -> &str {
        "aggregate"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        aggregate(inputs, &self.weights)
    }
    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>> {
        let (dg, _dw) = aggregate_vjp(inputs, &self.weights, cotangent)?;
        Ok(dg)
    }
}

struct TafaOp {
    n_blocks: usize,
    frame_count: usize,
    target_index: usize,
}

impl TafaOp {
    fn assemble(&self, inputs: &[Tensor]) -> Result<(TemporalRoiStack, TafaParams)> {
        let frames = inputs[..self.frame_count].to_vec();
        let mut blocks = Vec::with_capacity(self.n_blocks);
        for b in 0..self.n_blocks {
            blocks.push(AttentionBlockParams {
                kernel: inputs[self.frame_count + 2 * b].clone(),
                bias: inputs[self.frame_count + 2 * b + 1].clone(),
            });
        }
        Ok((
            TemporalRoiStack::new(frames, self.target_index)?,
            TafaParams { blocks },
        ))
    }
}

impl VjpOp for TafaOp {
    fn name(&self) -> &str {
        "tafa_forward"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let (stack, params) = self.assemble(inputs)?;
        tafa_forward(&stack, &params)
    }
    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>> {
        let (stack, params) = self.assemble(inputs)?;
        let grads = tafa_forward_vjp(&stack, &params, cotangent)?;
        let mut out = grads.frames;
        for (k, b) in grads.kernels.into_iter().zip(grads.biases) {
            out.push(k);
            out.push(b);
        }
        Ok(out)
    }
}

/// Wraps an op and flips the sign of one gradient element: the negative
/// control that the harness must flag as a failure.
pub struct CorruptedVjp<O: VjpOp>(pub O);

impl<O: VjpOp> VjpOp for CorruptedVjp<O> {
    fn name(&self) -> &str {
        "corrupted_vjp"
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        self.0.forward(inputs)
    }
    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>> {
        let mut grads = self.0.vjp(inputs, cotangent)?;
        grads[0].data_mut()[0] = -grads[0].data_mut()[0];
        Ok(grads)
    }
}

/// Keep every channel vector well away from the zero-norm guard.
const MIN_NORM: f64 = 0.3;
/// Minimum separation between candidate scores: 10x the finite-difference step.
const SCORE_GAP: f64 = 10.0 * DEFAULT_EPS;

/// Reject instances where any target position sees two candidate scores
/// closer than [`SCORE_GAP`]: top-K membership must not move under the
/// finite-difference perturbation.
fn accept_selection_gap() -> Accept {
    Box::new(|inputs: &[Tensor]| {
        let (target, support) = (&inputs[0], &inputs[1]);
        if min_channel_norm(target) < MIN_NORM || min_channel_norm(support) < MIN_NORM {
            return false;
        }
        let c = target.dims()[2];
        for query in target.data().chunks_exact(c) {
            let scores = match similarity_map(query, support) {
                Ok(s) => s,
                Err(_) => return false,
            };
            let mut sorted: Vec<f64> = scores.data().to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if sorted.windows(2).any(|w| (w[1] - w[0]).abs() < SCORE_GAP) {
                return false;
            }
        }
        true
    })
}

/// A proposal box whose sampling grid stays strictly inside the map and off
/// the integer lattice, where bilinear interpolation is not differentiable.
fn interior_box(
    rng: &mut SplitMix64,
    map_h: usize,
    map_w: usize,
    pooled: usize,
    ratio: usize,
) -> RoiBox {
    loop {
        let x1 = rng.next_range(0.5, map_w as f64 - 3.5);
        let y1 = rng.next_range(0.5, map_h as f64 - 3.5);
        let roi = RoiBox {
            x1,
            y1,
            x2: x1 + rng.next_range(1.0, 2.5),
            y2: y1 + rng.next_range(1.0, 2.5),
        };
        let good = sample_coordinates(&roi, pooled, pooled, ratio)
            .iter()
            .all(|&(x, y)| {
                let fx = x.fract();
                let fy = y.fract();
                (0.05..=0.95).contains(&fx)
                    && (0.05..=0.95).contains(&fy)
                    && x > 0.1
                    && y > 0.1
                    && x < map_w as f64 - 1.1
                    && y < map_h as f64 - 1.1
            });
        if good {
            return roi;
        }
    }
}

/// Per-position normalized weights built from seeded random scores.
fn normalized_weights(rng: &mut SplitMix64, frames: usize, h: usize, w: usize) -> Result<Tensor> {
    let mut weights = Tensor::zeros(&[frames, h, w])?;
    for p in 0..h * w {
        let scores: Vec<f64> = (0..frames).map(|_| rng.next_signed_unit()).collect();
        let soft = softmax(&scores)?;
        for i in 0..frames {
            weights.data_mut()[i * h * w + p] = soft[i];
        }
    }
    Ok(weights)
}

/// Every analytic VJP in the library, wired for [`crate::gradcheck::check_op`].
pub fn standard_cases() -> Result<Vec<CheckCase>> {
    let mut setup = SplitMix64::new(0x5EED_CA5E);
    let mut cases = Vec::new();

    cases.push(CheckCase {
        op: Box::new(L2NormalizeOp),
        sampler: sampler_of(vec![vec![8]]),
        accept: Some(Box::new(|inputs: &[Tensor]| {
            inputs[0].data().iter().map(|v| v * v).sum::<f64>().sqrt() >= MIN_NORM
        })),
        tol: CORE_TOL,
    });

    cases.push(CheckCase {
        op: Box::new(SoftmaxOp),
        sampler: sampler_of(vec![vec![8]]),
        accept: None,
        tol: CORE_TOL,
    });

    cases.push(CheckCase {
        op: Box::new(MatmulOp),
        sampler: sampler_of(vec![vec![3, 4], vec![4, 2]]),
        accept: None,
        tol: CORE_TOL,
    });

    cases.push(CheckCase {
        op: Box::new(BilinearSampleOp { x: 2.3, y: 1.7 }),
        sampler: sampler_of(vec![vec![5, 6, 3]]),
        accept: None,
        tol: OP_TOL,
    });

    cases.push(CheckCase {
        op: Box::new(RoiAlignOp {
            roi: interior_box(&mut setup, 7, 7, 3, 2),
            pooled_h: 3,
            pooled_w: 3,
            ratio: 2,
        }),
        sampler: sampler_of(vec![vec![7, 7, 3]]),
        accept: None,
        tol: OP_TOL,
    });

    cases.push(CheckCase {
        op: Box::new(WeightAndGatherOp {
            positions: vec![(0, 1), (2, 3), (4, 0)],
        }),
        sampler: sampler_of(vec![vec![3], vec![5, 5, 4]]),
        accept: None,
        tol: OP_TOL,
    });

    cases.push(CheckCase {
        op: Box::new(MsRoiAlignOp { k: 4 }),
        sampler: sampler_of(vec![vec![3, 3, 4], vec![6, 6, 4]]),
        accept: Some(accept_selection_gap()),
        tol: OP_TOL,
    });

    cases.push(CheckCase {
        op: Box::new(EmbedOp),
        sampler: sampler_of(vec![vec![5, 5, 3], vec![3, 3, 3, 3], vec![3]]),
        accept: None,
        tol: OP_TOL,
    });

    cases.push(CheckCase {
        op: Box::new(AttentionWeightsOp { target_index: 1 }),
        sampler: sampler_of(vec![vec![4, 4, 3]; 3]),
        accept: None,
        tol: OP_TOL,
    });

    cases.push(CheckCase {
        op: Box::new(AggregateOp {
            weights: normalized_weights(&mut setup, 3, 4, 4)?,
        }),
        sampler: sampler_of(vec![vec![4, 4, 3]; 3]),
        accept: None,
        tol: OP_TOL,
    });

    let frame_count = 3;
    let n_blocks = 4;
    let mut tafa_dims = vec![vec![5, 5, 8]; frame_count];
    for _ in 0..n_blocks {
        tafa_dims.push(vec![3, 3, 2, 2]);
        tafa_dims.push(vec![2]);
    }
    cases.push(CheckCase {
        op: Box::new(TafaOp {
            n_blocks,
            frame_count,
            target_index: 1,
        }),
        sampler: sampler_of(tafa_dims),
        accept: None,
        tol: OP_TOL,
    });

    Ok(cases)
}

/// The negative control: softmax with one VJP sign flipped. The checker must
/// report failure on it.
pub fn corrupted_case() -> CheckCase {
    CheckCase {
        op: Box::new(CorruptedVjp(SoftmaxOp)),
        sampler: sampler_of(vec![vec![8]]),
        accept: None,
        tol: CORE_TOL,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_op, DEFAULT_PROBES};

    #[test]
    fn full_suite_passes() {
        let mut rng = SplitMix64::new(2024);
        for case in standard_cases().unwrap() {
            let report = check_op(&case, DEFAULT_PROBES, DEFAULT_EPS, &mut rng).unwrap();
            assert!(report.pass, "{report}");
        }
    }

    #[test]
    fn corrupted_vjp_fails() {
        let mut rng = SplitMix64::new(2025);
        let report = check_op(&corrupted_case(), DEFAULT_PROBES, DEFAULT_EPS, &mut rng).unwrap();
        assert!(
            !report.pass,
            "negative control unexpectedly passed: {report}"
        );
    }

    #[test]
    fn softmax_case_at_tight_tolerance() {
        // 32 probes on random 8-vectors at 1e-6
        let mut rng = SplitMix64::new(2026);
        let case = CheckCase {
            op: Box::new(SoftmaxOp),
            sampler: sampler_of(vec![vec![8]]),
            accept: None,
            tol: 1e-6,
        };
        let report = check_op(&case, 32, DEFAULT_EPS, &mut rng).unwrap();
        assert!(report.pass, "{report}");
    }
}
