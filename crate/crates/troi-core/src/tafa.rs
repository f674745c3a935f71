//! Temporal attentional feature aggregation.
//!
//! ROI features from the target frame and its support frames are split into N
//! channel groups. Each group has its own 3x3 convolutional embedding; per
//! spatial position, the dot product between a frame's embedding and the
//! target frame's embedding scores that frame, a softmax across frames turns
//! the scores into weights, and the raw (un-embedded) group features are
//! convexly combined. Concatenating the N aggregated groups yields temporal
//! ROI features with the same shape as the target's.
//!
//! The naive route composes the per-op functions below with a direct
//! convolution; the vectorized route lowers the convolution to an im2col
//! matrix multiply batched over frames. The two accumulate in the same order
//! and agree bitwise.

use crate::error::{Result, TroiError};
use crate::rng::SplitMix64;
use crate::tensor::{matmul, softmax_into, softmax_vjp, Element, Tensor};

/// Weights of one temporal attention block: a 3x3 convolution over the block's
/// channel group. Blocks do not share weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlockParams<T: Element = f64> {
    /// `[3, 3, group_channels, group_channels]`, laid out (ky, kx, c_in, c_out).
    pub kernel: Tensor<T>,
    /// `[group_channels]`
    pub bias: Tensor<T>,
}

impl<T: Element> AttentionBlockParams<T> {
    pub fn zeros(group_channels: usize) -> Result<Self> {
        Ok(AttentionBlockParams {
            kernel: Tensor::zeros(&[3, 3, group_channels, group_channels])?,
            bias: Tensor::zeros(&[group_channels])?,
        })
    }

    pub fn group_channels(&self) -> usize {
        self.bias.dims()[0]
    }

    fn validate_for(&self, group_channels: usize) -> Result<()> {
        if self.kernel.dims() != [3, 3, group_channels, group_channels] {
            return Err(TroiError::shape(format!(
                "kernel dims {:?}, expected [3, 3, {group_channels}, {group_channels}]",
                self.kernel.dims()
            )));
        }
        if self.bias.dims() != [group_channels] {
            return Err(TroiError::shape(format!(
                "bias dims {:?}, expected [{group_channels}]",
                self.bias.dims()
            )));
        }
        Ok(())
    }
}

/// Parameters of all N temporal attention blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct TafaParams<T: Element = f64> {
    pub blocks: Vec<AttentionBlockParams<T>>,
}

impl<T: Element> TafaParams<T> {
    /// Deterministic seeded initialization: uniform in (-b, b) with
    /// b = 1/sqrt(fan_in), fan_in = 9 * group_channels.
    pub fn seeded(n_blocks: usize, group_channels: usize, seed: u64) -> Result<Self> {
        if n_blocks == 0 || group_channels == 0 {
            return Err(TroiError::invalid(
                "n_blocks and group_channels must be >= 1",
            ));
        }
        let mut rng = SplitMix64::new(seed);
        let bound = 1.0 / ((9 * group_channels) as f64).sqrt();
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let kn = 9 * group_channels * group_channels;
            let kernel = Tensor::from_vec(
                &[3, 3, group_channels, group_channels],
                (0..kn)
                    .map(|_| T::from_f64(rng.next_range(-bound, bound)))
                    .collect(),
            )?;
            let bias = Tensor::from_vec(
                &[group_channels],
                (0..group_channels)
                    .map(|_| T::from_f64(rng.next_range(-bound, bound)))
                    .collect(),
            )?;
            blocks.push(AttentionBlockParams { kernel, bias });
        }
        Ok(TafaParams { blocks })
    }

    pub fn zeros(n_blocks: usize, group_channels: usize) -> Result<Self> {
        Ok(TafaParams {
            blocks: (0..n_blocks)
                .map(|_| AttentionBlockParams::zeros(group_channels))
                .collect::<Result<_>>()?,
        })
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }
}

/// Ordered ROI features for the target frame and its support frames.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalRoiStack<T: Element = f64> {
    frames: Vec<Tensor<T>>,
    target_index: usize,
}

impl<T: Element> TemporalRoiStack<T> {
    pub fn new(frames: Vec<Tensor<T>>, target_index: usize) -> Result<Self> {
        if frames.is_empty() {
            return Err(TroiError::invalid(
                "temporal stack needs at least one frame",
            ));
        }
        if target_index >= frames.len() {
            return Err(TroiError::invalid(format!(
                "target index {target_index} out of range for {} frames",
                frames.len()
            )));
        }
        let dims = frames[0].dims().to_vec();
        if dims.len() != 3 {
            return Err(TroiError::shape(format!(
                "stack frames must be h x w x C, got {dims:?}"
            )));
        }
        for f in &frames {
            if f.dims() != dims {
                return Err(TroiError::shape(format!(
                    "stack frame dims {:?} differ from {:?}",
                    f.dims(),
                    dims
                )));
            }
        }
        Ok(TemporalRoiStack {
            frames,
            target_index,
        })
    }

    pub fn frames(&self) -> &[Tensor<T>] {
        &self.frames
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn frame_dims(&self) -> &[usize] {
        self.frames[0].dims()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Split h x w x C features into N channel groups of C/N channels each, in
/// original channel order. Concatenating the groups reproduces the input.
pub fn channel_split<T: Element>(features: &Tensor<T>, n_groups: usize) -> Result<Vec<Tensor<T>>> {
    if features.rank() != 3 {
        return Err(TroiError::shape(format!(
            "channel_split expects h x w x C, got {:?}",
            features.dims()
        )));
    }
    let (h, w, c) = (features.dims()[0], features.dims()[1], features.dims()[2]);
    if n_groups == 0 || !c.is_multiple_of(n_groups) {
        return Err(TroiError::invalid(format!(
            "group count {n_groups} does not divide {c} channels"
        )));
    }
    let cg = c / n_groups;
    let mut groups = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let mut out = Tensor::zeros(&[h, w, cg])?;
        for p in 0..h * w {
            let src = &features.data()[p * c + g * cg..p * c + (g + 1) * cg];
            out.data_mut()[p * cg..(p + 1) * cg].copy_from_slice(src);
        }
        groups.push(out);
    }
    Ok(groups)
}

/// Inverse of [`channel_split`].
pub fn channel_concat<T: Element>(groups: &[Tensor<T>]) -> Result<Tensor<T>> {
    if groups.is_empty() {
        return Err(TroiError::invalid("channel_concat of no groups"));
    }
    let (h, w, cg) = (
        groups[0].dims()[0],
        groups[0].dims()[1],
        groups[0].dims()[2],
    );
    for g in groups {
        if g.dims() != [h, w, cg] {
            return Err(TroiError::shape("channel_concat group dims differ"));
        }
    }
    let c = cg * groups.len();
    let mut out = Tensor::zeros(&[h, w, c])?;
    for (gi, g) in groups.iter().enumerate() {
        for p in 0..h * w {
            let dst = &mut out.data_mut()[p * c + gi * cg..p * c + (gi + 1) * cg];
            dst.copy_from_slice(&g.data()[p * cg..(p + 1) * cg]);
        }
    }
    Ok(out)
}

/// 3x3 convolution, stride 1, zero padding 1, plus bias; no activation.
/// Direct-loop route.
pub fn embed<T: Element>(group: &Tensor<T>, params: &AttentionBlockParams<T>) -> Result<Tensor<T>> {
    let cg = check_group(group)?;
    params.validate_for(cg)?;
    let (h, w) = (group.dims()[0], group.dims()[1]);
    let kd = params.kernel.data();
    let bias = params.bias.data();
    let mut out = Tensor::zeros(&[h, w, cg])?;
    for y in 0..h {
        for x in 0..w {
            for co in 0..cg {
                let mut acc = T::ZERO;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let row = group.channel_slice(sy as usize, sx as usize);
                        let kbase = ((ky * 3 + kx) * cg) * cg + co;
                        for ci in 0..cg {
                            acc += row[ci] * kd[kbase + ci * cg];
                        }
                    }
                }
                let off = out.off3(y, x, co);
                out.data_mut()[off] = acc + bias[co];
            }
        }
    }
    Ok(out)
}

/// im2col patch matrix for a batch of equally-shaped groups: one row per
/// (frame, position), columns ordered (ky, kx, c_in) to match the kernel
/// layout. Out-of-range taps contribute zero.
fn im2col_batch<T: Element>(groups: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (h, w, cg) = {
        let d = groups[0].dims();
        (d[0], d[1], d[2])
    };
    let rows = groups.len() * h * w;
    let cols = 9 * cg;
    let mut patches = Tensor::zeros(&[rows, cols])?;
    let pd = patches.data_mut();
    for (fi, g) in groups.iter().enumerate() {
        let gd = g.data();
        for y in 0..h {
            for x in 0..w {
                let row_base = ((fi * h + y) * w + x) * cols;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((sy as usize * w) + sx as usize) * cg;
                        let dst = row_base + (ky * 3 + kx) * cg;
                        pd[dst..dst + cg].copy_from_slice(&gd[src..src + cg]);
                    }
                }
            }
        }
    }
    Ok(patches)
}

/// Convolve a batch of groups with one block's kernel via im2col + matmul.
/// Bitwise-equal to calling [`embed`] per group.
fn embed_batch_im2col<T: Element>(
    groups: &[&Tensor<T>],
    params: &AttentionBlockParams<T>,
) -> Result<Vec<Tensor<T>>> {
    let (h, w, cg) = {
        let d = groups[0].dims();
        (d[0], d[1], d[2])
    };
    params.validate_for(cg)?;
    let patches = im2col_batch(groups)?;
    // The kernel's (ky, kx, c_in, c_out) layout is already a (9*cg) x cg matrix.
    let kmat = params.kernel.reshaped(&[9 * cg, cg])?;
    let prod = matmul(&patches, &kmat)?;
    let bias = params.bias.data();
    let mut outs = Vec::with_capacity(groups.len());
    let per_frame = h * w * cg;
    for fi in 0..groups.len() {
        let mut out = Tensor::zeros(&[h, w, cg])?;
        let od = out.data_mut();
        let src = &prod.data()[fi * per_frame..(fi + 1) * per_frame];
        for p in 0..h * w {
            for co in 0..cg {
                od[p * cg + co] = src[p * cg + co] + bias[co];
            }
        }
        outs.push(out);
    }
    Ok(outs)
}

/// VJP of [`embed`] with respect to the input group, the kernel and the bias.
pub fn embed_vjp<T: Element>(
    group: &Tensor<T>,
    params: &AttentionBlockParams<T>,
    cotangent: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let cg = check_group(group)?;
    params.validate_for(cg)?;
    if cotangent.dims() != group.dims() {
        return Err(TroiError::shape(format!(
            "embed cotangent dims {:?} vs {:?}",
            cotangent.dims(),
            group.dims()
        )));
    }
    let (h, w) = (group.dims()[0], group.dims()[1]);
    let kd = params.kernel.data();
    let mut grad_input = Tensor::zeros(group.dims())?;
    let mut grad_kernel = Tensor::zeros(params.kernel.dims())?;
    let mut grad_bias = Tensor::zeros(params.bias.dims())?;

    for y in 0..h {
        for x in 0..w {
            let cot = cotangent.channel_slice(y, x);
            for co in 0..cg {
                grad_bias.data_mut()[co] += cot[co];
            }
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let in_base = ((sy as usize * w) + sx as usize) * cg;
                    let k_base = (ky * 3 + kx) * cg * cg;
                    for ci in 0..cg {
                        let xin = group.data()[in_base + ci];
                        let gin = &mut grad_input.data_mut()[in_base + ci];
                        let mut acc = T::ZERO;
                        for co in 0..cg {
                            let g = cot[co];
                            grad_kernel.data_mut()[k_base + ci * cg + co] += xin * g;
                            acc += kd[k_base + ci * cg + co] * g;
                        }
                        *gin += acc;
                    }
                }
            }
        }
    }
    Ok((grad_input, grad_kernel, grad_bias))
}

/// Cross-frame attention weights: per position, the dot product of each
/// frame's embedding with the target frame's embedding, softmaxed across
/// frames (target included). Returns a [frames, h, w] tensor.
pub fn temporal_attention_weights<T: Element>(
    embedded: &[Tensor<T>],
    target_index: usize,
) -> Result<Tensor<T>> {
    check_frame_list(embedded, target_index)?;
    let (h, w, cg) = {
        let d = embedded[0].dims();
        (d[0], d[1], d[2])
    };
    let frames = embedded.len();
    let mut out = Tensor::zeros(&[frames, h, w])?;
    let mut scores = vec![T::ZERO; frames];
    let mut weights = vec![T::ZERO; frames];
    for p in 0..h * w {
        let target_row = &embedded[target_index].data()[p * cg..(p + 1) * cg];
        for (i, e) in embedded.iter().enumerate() {
            let row = &e.data()[p * cg..(p + 1) * cg];
            let mut dot = T::ZERO;
            for c in 0..cg {
                dot += row[c] * target_row[c];
            }
            scores[i] = dot;
        }
        softmax_into(&scores, &mut weights)?;
        for i in 0..frames {
            out.data_mut()[i * h * w + p] = weights[i];
        }
    }
    Ok(out)
}

/// VJP of [`temporal_attention_weights`] with respect to every embedded frame.
pub fn temporal_attention_weights_vjp<T: Element>(
    embedded: &[Tensor<T>],
    target_index: usize,
    cotangent: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    check_frame_list(embedded, target_index)?;
    let (h, w, cg) = {
        let d = embedded[0].dims();
        (d[0], d[1], d[2])
    };
    let frames = embedded.len();
    if cotangent.dims() != [frames, h, w] {
        return Err(TroiError::shape(format!(
            "attention cotangent dims {:?}, expected [{frames}, {h}, {w}]",
            cotangent.dims()
        )));
    }
    let mut grads: Vec<Tensor<T>> = (0..frames)
        .map(|_| Tensor::zeros(embedded[0].dims()))
        .collect::<Result<_>>()?;
    let mut scores = vec![T::ZERO; frames];
    let mut cot_row = vec![T::ZERO; frames];
    for p in 0..h * w {
        let target_row = &embedded[target_index].data()[p * cg..(p + 1) * cg];
        for (i, e) in embedded.iter().enumerate() {
            let row = &e.data()[p * cg..(p + 1) * cg];
            let mut dot = T::ZERO;
            for c in 0..cg {
                dot += row[c] * target_row[c];
            }
            scores[i] = dot;
            cot_row[i] = cotangent.data()[i * h * w + p];
        }
        let dz = softmax_vjp(&scores, &cot_row)?;
        // z_i = <e_i, e_target>: both arguments receive gradient; for the
        // target frame that doubles up, which the loop handles naturally.
        for i in 0..frames {
            let erow: Vec<T> = embedded[i].data()[p * cg..(p + 1) * cg].to_vec();
            {
                let gi = &mut grads[i].data_mut()[p * cg..(p + 1) * cg];
                for c in 0..cg {
                    gi[c] += dz[i] * target_row[c];
                }
            }
            let gt = &mut grads[target_index].data_mut()[p * cg..(p + 1) * cg];
            for c in 0..cg {
                gt[c] += dz[i] * erow[c];
            }
        }
    }
    Ok(grads)
}

/// Convex per-position combination of the raw group features across frames.
/// `weights` must be normalized per position (sum 1 within 1e-9).
pub fn aggregate<T: Element>(groups: &[Tensor<T>], weights: &Tensor<T>) -> Result<Tensor<T>> {
    if groups.is_empty() {
        return Err(TroiError::invalid("aggregate of no frames"));
    }
    let (h, w, cg) = {
        let d = groups[0].dims();
        (d[0], d[1], d[2])
    };
    let frames = groups.len();
    if weights.dims() != [frames, h, w] {
        return Err(TroiError::shape(format!(
            "weight dims {:?}, expected [{frames}, {h}, {w}]",
            weights.dims()
        )));
    }
    for p in 0..h * w {
        let mut sum = T::ZERO;
        for i in 0..frames {
            sum += weights.data()[i * h * w + p];
        }
        if (sum.to_f64() - 1.0).abs() > T::WEIGHT_SUM_TOL {
            return Err(TroiError::invalid(format!(
                "aggregate weights at position {p} sum to {} (want 1)",
                sum.to_f64()
            )));
        }
    }
    let mut out = Tensor::zeros(&[h, w, cg])?;
    for p in 0..h * w {
        let dst = &mut out.data_mut()[p * cg..(p + 1) * cg];
        for (i, g) in groups.iter().enumerate() {
            let wk = weights.data()[i * h * w + p];
            let src = &g.data()[p * cg..(p + 1) * cg];
            for c in 0..cg {
                dst[c] += wk * src[c];
            }
        }
    }
    Ok(out)
}

/// VJP of [`aggregate`] with respect to the group features and the weights.
pub fn aggregate_vjp<T: Element>(
    groups: &[Tensor<T>],
    weights: &Tensor<T>,
    cotangent: &Tensor<T>,
) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
    let (h, w, cg) = {
        let d = groups[0].dims();
        (d[0], d[1], d[2])
    };
    let frames = groups.len();
    if cotangent.dims() != [h, w, cg] {
        return Err(TroiError::shape(format!(
            "aggregate cotangent dims {:?}, expected [{h}, {w}, {cg}]",
            cotangent.dims()
        )));
    }
    let mut grad_groups: Vec<Tensor<T>> = (0..frames)
        .map(|_| Tensor::zeros(groups[0].dims()))
        .collect::<Result<_>>()?;
    let mut grad_weights = Tensor::zeros(weights.dims())?;
    for p in 0..h * w {
        let cot = &cotangent.data()[p * cg..(p + 1) * cg];
        for i in 0..frames {
            let wk = weights.data()[i * h * w + p];
            let src = &groups[i].data()[p * cg..(p + 1) * cg];
            let dst = &mut grad_groups[i].data_mut()[p * cg..(p + 1) * cg];
            let mut dot = T::ZERO;
            for c in 0..cg {
                dst[c] += wk * cot[c];
                dot += cot[c] * src[c];
            }
            grad_weights.data_mut()[i * h * w + p] = dot;
        }
    }
    Ok((grad_groups, grad_weights))
}

fn run_tafa<T: Element>(
    stack: &TemporalRoiStack<T>,
    params: &TafaParams<T>,
    vectorized: bool,
    collect_weights: bool,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let groups_per_frame = split_stack(stack, params)?;
    let n = params.block_count();
    let mut aggregated = Vec::with_capacity(n);
    let mut all_weights = Vec::new();
    for (bi, block) in params.blocks.iter().enumerate() {
        let block_groups: Vec<&Tensor<T>> = groups_per_frame.iter().map(|g| &g[bi]).collect();
        let embedded: Vec<Tensor<T>> = if vectorized {
            embed_batch_im2col(&block_groups, block)?
        } else {
            block_groups
                .iter()
                .map(|g| embed(g, block))
                .collect::<Result<_>>()?
        };
        let weights = temporal_attention_weights(&embedded, stack.target_index())?;
        let owned: Vec<Tensor<T>> = block_groups.into_iter().cloned().collect();
        aggregated.push(aggregate(&owned, &weights)?);
        if collect_weights {
            all_weights.push(weights);
        }
    }
    Ok((channel_concat(&aggregated)?, all_weights))
}

/// Full temporal aggregation, vectorized convolution route.
pub fn tafa_forward<T: Element>(
    stack: &TemporalRoiStack<T>,
    params: &TafaParams<T>,
) -> Result<Tensor<T>> {
    Ok(run_tafa(stack, params, true, false)?.0)
}

/// Naive route composing [`channel_split`], [`embed`],
/// [`temporal_attention_weights`] and [`aggregate`] directly.
pub fn tafa_forward_naive<T: Element>(
    stack: &TemporalRoiStack<T>,
    params: &TafaParams<T>,
) -> Result<Tensor<T>> {
    Ok(run_tafa(stack, params, false, false)?.0)
}

/// [`tafa_forward`] plus the per-block attention weight tensors
/// ([frames, h, w] each), for reporting.
pub fn tafa_forward_with_weights<T: Element>(
    stack: &TemporalRoiStack<T>,
    params: &TafaParams<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    run_tafa(stack, params, true, true)
}

/// Plain elementwise mean over frames: the aggregation baseline.
pub fn aggregate_average<T: Element>(stack: &TemporalRoiStack<T>) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(stack.frame_dims())?;
    for f in stack.frames() {
        for (o, &v) in out.data_mut().iter_mut().zip(f.data()) {
            *o += v;
        }
    }
    let inv = T::ONE / T::from_f64(stack.len() as f64);
    for o in out.data_mut() {
        *o *= inv;
    }
    Ok(out)
}

/// Gradients of [`tafa_forward`] with respect to every stack frame and every
/// block's parameters.
#[derive(Clone, Debug)]
pub struct TafaGradients<T: Element = f64> {
    pub frames: Vec<Tensor<T>>,
    pub kernels: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
}

/// VJP of [`tafa_forward`]. Gradients reach each frame both directly through
/// the convex combination and through the attention weights via the
/// embeddings.
pub fn tafa_forward_vjp<T: Element>(
    stack: &TemporalRoiStack<T>,
    params: &TafaParams<T>,
    cotangent: &Tensor<T>,
) -> Result<TafaGradients<T>> {
    if cotangent.dims() != stack.frame_dims() {
        return Err(TroiError::shape(format!(
            "tafa cotangent dims {:?} vs frame dims {:?}",
            cotangent.dims(),
            stack.frame_dims()
        )));
    }
    let groups_per_frame = split_stack(stack, params)?;
    let n = params.block_count();
    let frames = stack.len();
    let cot_groups = channel_split(cotangent, n)?;

    let mut grad_frame_groups: Vec<Vec<Tensor<T>>> = Vec::with_capacity(frames);
    for f in &groups_per_frame {
        grad_frame_groups.push(
            f.iter()
                .map(|g| Tensor::zeros(g.dims()))
                .collect::<Result<_>>()?,
        );
    }
    let mut grad_kernels = Vec::with_capacity(n);
    let mut grad_biases = Vec::with_capacity(n);

    for (bi, block) in params.blocks.iter().enumerate() {
        let block_groups: Vec<Tensor<T>> = groups_per_frame.iter().map(|g| g[bi].clone()).collect();
        let embedded: Vec<Tensor<T>> = block_groups
            .iter()
            .map(|g| embed(g, block))
            .collect::<Result<_>>()?;
        let weights = temporal_attention_weights(&embedded, stack.target_index())?;

        let (dgroups_direct, dweights) = aggregate_vjp(&block_groups, &weights, &cot_groups[bi])?;
        let dembedded = temporal_attention_weights_vjp(&embedded, stack.target_index(), &dweights)?;

        let mut gk = Tensor::zeros(block.kernel.dims())?;
        let mut gb = Tensor::zeros(block.bias.dims())?;
        for fi in 0..frames {
            let (dg_embed, dk, db) = embed_vjp(&block_groups[fi], block, &dembedded[fi])?;
            let dst = &mut grad_frame_groups[fi][bi];
            for ((o, &a), &b) in dst
                .data_mut()
                .iter_mut()
                .zip(dgroups_direct[fi].data())
                .zip(dg_embed.data())
            {
                *o += a + b;
            }
            for (o, &v) in gk.data_mut().iter_mut().zip(dk.data()) {
                *o += v;
            }
            for (o, &v) in gb.data_mut().iter_mut().zip(db.data()) {
                *o += v;
            }
        }
        grad_kernels.push(gk);
        grad_biases.push(gb);
    }

    let grad_frames = grad_frame_groups
        .iter()
        .map(|g| channel_concat(g))
        .collect::<Result<Vec<_>>>()?;
    Ok(TafaGradients {
        frames: grad_frames,
        kernels: grad_kernels,
        biases: grad_biases,
    })
}

fn split_stack<T: Element>(
    stack: &TemporalRoiStack<T>,
    params: &TafaParams<T>,
) -> Result<Vec<Vec<Tensor<T>>>> {
    let n = params.block_count();
    let c = stack.frame_dims()[2];
    if n == 0 || !c.is_multiple_of(n) {
        return Err(TroiError::invalid(format!(
            "block count {n} does not divide {c} channels"
        )));
    }
    let cg = c / n;
    for b in &params.blocks {
        b.validate_for(cg)?;
    }
    stack.frames().iter().map(|f| channel_split(f, n)).collect()
}

fn check_group<T: Element>(group: &Tensor<T>) -> Result<usize> {
    if group.rank() != 3 {
        return Err(TroiError::shape(format!(
            "group tensor must be h x w x c, got {:?}",
            group.dims()
        )));
    }
    Ok(group.dims()[2])
}

fn check_frame_list<T: Element>(frames: &[Tensor<T>], target_index: usize) -> Result<()> {
    if frames.is_empty() {
        return Err(TroiError::invalid("empty frame list"));
    }
    if target_index >= frames.len() {
        return Err(TroiError::invalid(format!(
            "target index {target_index} out of range for {} frames",
            frames.len()
        )));
    }
    let dims = frames[0].dims();
    for f in frames {
        if f.dims() != dims {
            return Err(TroiError::shape("frame dims differ"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SplitMix64::new(seed);
        let n: usize = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.next_signed_unit()).collect()).unwrap()
    }

    #[test]
    fn split_single_group_is_identity() {
        let x = random_tensor(&[3, 3, 4], 1);
        let groups = channel_split(&x, 1).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0], x);
    }

    #[test]
    fn split_pairs_of_channels() {
        let x = Tensor::from_vec(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let groups = channel_split(&x, 2).unwrap();
        assert_eq!(groups[0].data(), &[1.0, 2.0]);
        assert_eq!(groups[1].data(), &[3.0, 4.0]);
    }

    #[test]
    fn split_concat_round_trips_bitwise() {
        let x = random_tensor(&[4, 5, 8], 2);
        for n in [1, 2, 4, 8] {
            let back = channel_concat(&channel_split(&x, n).unwrap()).unwrap();
            assert_eq!(back, x);
        }
    }

    #[test]
    fn split_rejects_non_dividing_groups() {
        let x = random_tensor(&[2, 2, 6], 3);
        assert!(channel_split(&x, 4).is_err());
    }

    fn identity_params(cg: usize) -> AttentionBlockParams<f64> {
        let mut p = AttentionBlockParams::zeros(cg).unwrap();
        for c in 0..cg {
            let off = p.kernel.off4(1, 1, c, c);
            p.kernel.data_mut()[off] = 1.0;
        }
        p
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = random_tensor(&[5, 4, 3], 4);
        let out = embed(&x, &identity_params(3)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let x = random_tensor(&[4, 4, 2], 5);
        let out = embed(&x, &AttentionBlockParams::zeros(2).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_matches_six_loop_oracle() {
        let x = random_tensor(&[7, 7, 4], 6);
        let params = TafaParams::seeded(1, 4, 60).unwrap();
        let block = &params.blocks[0];
        let out = embed(&x, block).unwrap();
        // independent direct convolution, all six loops spelled out
        for y in 0..7i64 {
            for xx in 0..7i64 {
                for co in 0..4usize {
                    let mut acc = 0.0;
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            for ci in 0..4usize {
                                let sy = y + ky - 1;
                                let sx = xx + kx - 1;
                                if !(0..7).contains(&sy) || !(0..7).contains(&sx) {
                                    continue;
                                }
                                let xv = x.data()[x.off3(sy as usize, sx as usize, ci)];
                                let kv = block.kernel.data()
                                    [block.kernel.off4(ky as usize, kx as usize, ci, co)];
                                acc += xv * kv;
                            }
                        }
                    }
                    acc += block.bias.data()[co];
                    let got = out.data()[out.off3(y as usize, xx as usize, co)];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn im2col_route_matches_direct_bitwise() {
        let params = TafaParams::seeded(1, 4, 61).unwrap();
        let frames: Vec<Tensor<f64>> = (0..3).map(|i| random_tensor(&[5, 5, 4], 70 + i)).collect();
        let refs: Vec<&Tensor<f64>> = frames.iter().collect();
        let fast = embed_batch_im2col(&refs, &params.blocks[0]).unwrap();
        for (f, got) in frames.iter().zip(&fast) {
            let want = embed(f, &params.blocks[0]).unwrap();
            assert_eq!(*got, want);
        }
    }

    #[test]
    fn single_frame_weights_are_one() {
        let e = random_tensor(&[3, 3, 2], 7);
        let w = temporal_attention_weights(&[e], 0).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_embeddings_give_uniform_weights() {
        let e = random_tensor(&[3, 3, 2], 8);
        let w = temporal_attention_weights(&[e.clone(), e.clone(), e], 1).unwrap();
        for &v in w.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_frame_ln2_closed_form() {
        // target embedding [sqrt(ln 2), 0] scores <e_t, e_t> = ln 2 against
        // itself; the orthogonal frame scores 0. Weights are 2/3 and 1/3.
        let target =
            Tensor::from_vec(&[1, 1, 2], vec![std::f64::consts::LN_2.sqrt(), 0.0]).unwrap();
        let other = Tensor::from_vec(&[1, 1, 2], vec![0.0, 5.0]).unwrap();
        let w = temporal_attention_weights(&[target, other], 0).unwrap();
        assert!((w.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_identical_features_ignores_weights() {
        let g = random_tensor(&[2, 2, 3], 9);
        let weights =
            Tensor::from_vec(&[2, 2, 2], vec![0.9, 0.1, 0.4, 0.25, 0.1, 0.9, 0.6, 0.75]).unwrap();
        let out = aggregate(&[g.clone(), g.clone()], &weights).unwrap();
        for (o, v) in out.data().iter().zip(g.data()) {
            assert!((o - v).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_one_hot_selects_frame() {
        let a = random_tensor(&[2, 2, 2], 10);
        let b = random_tensor(&[2, 2, 2], 11);
        let mut weights = Tensor::<f64>::zeros(&[2, 2, 2]).unwrap();
        for p in 0..4 {
            weights.data_mut()[4 + p] = 1.0; // frame 1 everywhere
        }
        let out = aggregate(&[a, b.clone()], &weights).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn aggregate_quarter_three_quarter() {
        let a = Tensor::from_vec(&[1, 1, 1], vec![0.0]).unwrap();
        let b = Tensor::from_vec(&[1, 1, 1], vec![4.0]).unwrap();
        let weights = Tensor::from_vec(&[2, 1, 1], vec![0.25, 0.75]).unwrap();
        let out = aggregate(&[a, b], &weights).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn aggregate_rejects_unnormalized_weights() {
        let a = random_tensor(&[1, 1, 1], 12);
        let weights = Tensor::from_vec(&[1, 1, 1], vec![0.7]).unwrap();
        assert!(aggregate(&[a], &weights).is_err());
    }

    fn stack_of(frames: Vec<Tensor<f64>>, target: usize) -> TemporalRoiStack<f64> {
        TemporalRoiStack::new(frames, target).unwrap()
    }

    #[test]
    fn single_frame_stack_is_identity() {
        let x = random_tensor(&[3, 3, 8], 13);
        let params = TafaParams::seeded(4, 2, 62).unwrap();
        let out = tafa_forward(&stack_of(vec![x.clone()], 0), &params).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn identical_frames_return_target() {
        let x = random_tensor(&[3, 3, 8], 14);
        let params = TafaParams::seeded(4, 2, 63).unwrap();
        let stack = stack_of(vec![x.clone(), x.clone(), x.clone()], 1);
        let out = tafa_forward(&stack, &params).unwrap();
        assert!(out.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn naive_and_vectorized_agree_bitwise() {
        let params = TafaParams::seeded(4, 2, 64).unwrap();
        let frames: Vec<Tensor<f64>> = (0..3).map(|i| random_tensor(&[7, 7, 8], 80 + i)).collect();
        let stack = stack_of(frames, 1);
        let a = tafa_forward_naive(&stack, &params).unwrap();
        let b = tafa_forward(&stack, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_kernels_reduce_to_averaging() {
        let params = TafaParams::zeros(4, 2).unwrap();
        let frames: Vec<Tensor<f64>> = (0..4).map(|i| random_tensor(&[3, 3, 8], 90 + i)).collect();
        let stack = stack_of(frames, 2);
        let tafa = tafa_forward(&stack, &params).unwrap();
        let avg = aggregate_average(&stack).unwrap();
        assert!(tafa.max_abs_diff(&avg).unwrap() < 1e-12);
    }

    #[test]
    fn average_basics() {
        let x = random_tensor(&[2, 2, 2], 20);
        let s1 = stack_of(vec![x.clone()], 0);
        assert_eq!(aggregate_average(&s1).unwrap(), x);
        let a = Tensor::from_vec(&[1, 1, 1], vec![0.0]).unwrap();
        let b = Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap();
        let s2 = stack_of(vec![a, b], 0);
        assert_eq!(aggregate_average(&s2).unwrap().data(), &[1.0]);
    }

    #[test]
    fn average_equals_tafa_with_equal_scores() {
        // zero kernels force all dot products to zero, hence uniform weights
        let params = TafaParams::zeros(2, 3).unwrap();
        let frames: Vec<Tensor<f64>> = (0..3).map(|i| random_tensor(&[2, 2, 6], 95 + i)).collect();
        let stack = stack_of(frames, 0);
        let tafa = tafa_forward(&stack, &params).unwrap();
        let avg = aggregate_average(&stack).unwrap();
        assert!(tafa.max_abs_diff(&avg).unwrap() < 1e-12);
    }

    #[test]
    fn stack_validation() {
        assert!(TemporalRoiStack::<f64>::new(vec![], 0).is_err());
        let a = random_tensor(&[2, 2, 2], 21);
        let b = random_tensor(&[2, 3, 2], 22);
        assert!(TemporalRoiStack::new(vec![a.clone(), b], 0).is_err());
        assert!(TemporalRoiStack::new(vec![a], 1).is_err());
    }
}
