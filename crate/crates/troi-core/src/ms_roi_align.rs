//! Most-similar ROI align: for every spatial position of the target ROI
//! features, find the K most cosine-similar positions on a support frame's
//! feature map and gather a softmax-weighted feature vector from them.
//!
//! Similarity uses L2-normalized vectors; the gather uses the raw support
//! features. Two routes compute the same thing: a per-position naive route
//! composing the small ops below, and a vectorized route that normalizes the
//! support map once and scores all positions with a single matrix multiply.
//! Both accumulate in the same order, so they agree bitwise.

use crate::error::{Result, TroiError};
use crate::tensor::{
    l2_normalize_into, l2_normalize_vjp, softmax, softmax_vjp, transpose2, Element, Tensor,
    NORM_EPS,
};

/// Top-K result for one target position: scores sorted non-increasing with
/// their (row, col) positions in the support map. Ties break toward the
/// smaller row-major index.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityEntry<T: Element = f64> {
    pub scores: Vec<T>,
    pub positions: Vec<(usize, usize)>,
}

/// Cosine similarity of one query channel vector against every position of a
/// support map. Zero vectors (under the normalization guard) score 0.
pub fn similarity_map<T: Element>(query: &[T], support: &Tensor<T>) -> Result<Tensor<T>> {
    check_support(support)?;
    let (h, w, c) = (support.dims()[0], support.dims()[1], support.dims()[2]);
    if query.len() != c {
        return Err(TroiError::shape(format!(
            "query has {} channels, support has {c}",
            query.len()
        )));
    }
    let eps = T::from_f64(NORM_EPS);
    let mut q_hat = vec![T::ZERO; c];
    l2_normalize_into(query, eps, &mut q_hat)?;
    let mut u_hat = vec![T::ZERO; c];
    let mut out = Tensor::zeros(&[h, w])?;
    for y in 0..h {
        for x in 0..w {
            l2_normalize_into(support.channel_slice(y, x), eps, &mut u_hat)?;
            let mut dot = T::ZERO;
            for i in 0..c {
                dot += q_hat[i] * u_hat[i];
            }
            out.data_mut()[y * w + x] = dot;
        }
    }
    Ok(out)
}

/// The K largest scores of a rank-2 map with deterministic tie-breaking.
pub fn top_k<T: Element>(score_map: &Tensor<T>, k: usize) -> Result<SimilarityEntry<T>> {
    if score_map.rank() != 2 {
        return Err(TroiError::shape(format!(
            "top_k expects a rank-2 score map, got {:?}",
            score_map.dims()
        )));
    }
    top_k_flat(score_map.data(), score_map.dims()[1], k)
}

/// [`top_k`] on a raw row-major score buffer with row width `w`.
pub(crate) fn top_k_flat<T: Element>(
    scores: &[T],
    w: usize,
    k: usize,
) -> Result<SimilarityEntry<T>> {
    let n = scores.len();
    if k == 0 {
        return Err(TroiError::invalid("top_k requires K >= 1"));
    }
    if k > n {
        return Err(TroiError::invalid(format!(
            "top_k K={k} exceeds {n} candidate positions"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // score descending, then row-major index ascending
    order.sort_by(|&a, &b| match scores[b].partial_cmp(&scores[a]) {
        Some(std::cmp::Ordering::Equal) | None => a.cmp(&b),
        Some(o) => o,
    });
    order.truncate(k);
    Ok(SimilarityEntry {
        scores: order.iter().map(|&i| scores[i]).collect(),
        positions: order.iter().map(|&i| (i / w, i % w)).collect(),
    })
}

/// Softmax-weight the K scores and gather the weighted sum of the raw support
/// features at the selected positions.
pub fn weight_and_gather<T: Element>(
    entry: &SimilarityEntry<T>,
    support: &Tensor<T>,
) -> Result<Vec<T>> {
    check_support(support)?;
    let (h, w, c) = (support.dims()[0], support.dims()[1], support.dims()[2]);
    if entry.scores.len() != entry.positions.len() {
        return Err(TroiError::shape("entry scores/positions length mismatch"));
    }
    for &(y, x) in &entry.positions {
        if y >= h || x >= w {
            return Err(TroiError::invalid(format!(
                "position ({y}, {x}) outside {h} x {w} support map"
            )));
        }
    }
    let weights = softmax(&entry.scores)?;
    let mut out = vec![T::ZERO; c];
    for (wk, &(y, x)) in weights.iter().zip(&entry.positions) {
        let feat = support.channel_slice(y, x);
        for i in 0..c {
            out[i] += *wk * feat[i];
        }
    }
    Ok(out)
}

/// VJP of [`weight_and_gather`] with respect to the entry scores and the
/// support map, with the selected positions held fixed.
pub fn weight_and_gather_vjp<T: Element>(
    entry: &SimilarityEntry<T>,
    support: &Tensor<T>,
    cotangent: &[T],
) -> Result<(Vec<T>, Tensor<T>)> {
    check_support(support)?;
    let c = support.dims()[2];
    if cotangent.len() != c {
        return Err(TroiError::shape(format!(
            "cotangent length {} vs {c} channels",
            cotangent.len()
        )));
    }
    let sup_w = support.dims()[1];
    let weights = softmax(&entry.scores)?;
    let mut grad_support = Tensor::zeros(support.dims())?;
    let mut score_cot = vec![T::ZERO; entry.scores.len()];
    for (ki, (&wk, &(y, x))) in weights.iter().zip(&entry.positions).enumerate() {
        let lin = y * sup_w + x;
        let feat = support.channel_slice(y, x);
        let grow = &mut grad_support.data_mut()[lin * c..(lin + 1) * c];
        let mut dot = T::ZERO;
        for i in 0..c {
            grow[i] += wk * cotangent[i];
            dot += cotangent[i] * feat[i];
        }
        score_cot[ki] = dot;
    }
    let grad_scores = softmax_vjp(&entry.scores, &score_cot)?;
    Ok((grad_scores, grad_support))
}

/// Per-position naive route: compose similarity map, top-K and gather for each
/// target position independently. Reference path for benchmarks and checks.
pub fn most_similar_roi_align_naive<T: Element>(
    target_roi: &Tensor<T>,
    support: &Tensor<T>,
    k: usize,
) -> Result<Tensor<T>> {
    check_pair(target_roi, support)?;
    let (h, w, c) = (
        target_roi.dims()[0],
        target_roi.dims()[1],
        target_roi.dims()[2],
    );
    let mut out = Tensor::zeros(&[h, w, c])?;
    for y in 0..h {
        for x in 0..w {
            let scores = similarity_map(target_roi.channel_slice(y, x), support)?;
            let entry = top_k(&scores, k)?;
            let gathered = weight_and_gather(&entry, support)?;
            let base = out.off3(y, x, 0);
            out.data_mut()[base..base + c].copy_from_slice(&gathered);
        }
    }
    Ok(out)
}

/// Normalize every channel vector of an H x W x C map into an (H*W) x C matrix.
fn normalized_rows<T: Element>(map: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = (map.dims()[0], map.dims()[1], map.dims()[2]);
    let eps = T::from_f64(NORM_EPS);
    let mut out = Tensor::zeros(&[h * w, c])?;
    for p in 0..h * w {
        let src = &map.data()[p * c..(p + 1) * c];
        let dst = &mut out.data_mut()[p * c..(p + 1) * c];
        l2_normalize_into(src, eps, dst)?;
    }
    Ok(out)
}

/// Score every (target position, support position) pair with one matrix
/// multiply of the normalized query block against the normalized support map.
fn score_block<T: Element>(target_roi: &Tensor<T>, support: &Tensor<T>) -> Result<Tensor<T>> {
    let q_hat = normalized_rows(target_roi)?; // (h*w) x C
    let u_hat = normalized_rows(support)?; // (H*W) x C
    crate::tensor::matmul(&q_hat, &transpose2(&u_hat)) // (h*w) x (H*W)
}

/// Top-K entries for every target position, computed on the vectorized score
/// block.
pub fn most_similar_entries<T: Element>(
    target_roi: &Tensor<T>,
    support: &Tensor<T>,
    k: usize,
) -> Result<Vec<SimilarityEntry<T>>> {
    check_pair(target_roi, support)?;
    let sup_w = support.dims()[1];
    let positions = support.dims()[0] * sup_w;
    let scores = score_block(target_roi, support)?;
    (0..target_roi.dims()[0] * target_roi.dims()[1])
        .map(|m| top_k_flat(&scores.data()[m * positions..(m + 1) * positions], sup_w, k))
        .collect()
}

/// Vectorized most-similar ROI align. Equal to the naive route bitwise.
pub fn most_similar_roi_align<T: Element>(
    target_roi: &Tensor<T>,
    support: &Tensor<T>,
    k: usize,
) -> Result<Tensor<T>> {
    check_pair(target_roi, support)?;
    let (h, w, c) = (
        target_roi.dims()[0],
        target_roi.dims()[1],
        target_roi.dims()[2],
    );
    let entries = most_similar_entries(target_roi, support, k)?;
    let mut out = Tensor::zeros(&[h, w, c])?;
    for (m, entry) in entries.iter().enumerate() {
        let gathered = weight_and_gather(entry, support)?;
        out.data_mut()[m * c..(m + 1) * c].copy_from_slice(&gathered);
    }
    Ok(out)
}

/// VJP of [`most_similar_roi_align`] with respect to the target ROI features
/// and the support map.
///
/// The top-K indices are held constant (the usual subgradient choice for hard
/// selection); gradients flow into the support map both through the gathered
/// features and through the selected similarity scores, and into the target
/// features through the normalized query.
pub fn most_similar_roi_align_vjp<T: Element>(
    target_roi: &Tensor<T>,
    support: &Tensor<T>,
    k: usize,
    cotangent: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_pair(target_roi, support)?;
    if cotangent.dims() != target_roi.dims() {
        return Err(TroiError::shape(format!(
            "cotangent dims {:?} vs target {:?}",
            cotangent.dims(),
            target_roi.dims()
        )));
    }
    let c = target_roi.dims()[2];
    let (sup_h, sup_w) = (support.dims()[0], support.dims()[1]);
    let positions = sup_h * sup_w;
    let eps = T::from_f64(NORM_EPS);

    let entries = most_similar_entries(target_roi, support, k)?;
    let q_hat = normalized_rows(target_roi)?;
    let u_hat = normalized_rows(support)?;

    let mut grad_target = Tensor::zeros(target_roi.dims())?;
    let mut grad_support = Tensor::zeros(support.dims())?;
    // cotangent accumulated on the normalized support rows, resolved through
    // the normalization at the end (several target positions may select the
    // same support position)
    let mut u_hat_cot = vec![T::ZERO; positions * c];

    for (m, entry) in entries.iter().enumerate() {
        let g = &cotangent.data()[m * c..(m + 1) * c];
        let weights = softmax(&entry.scores)?;

        // direct feature path of the gather, plus the score cotangents
        let mut score_cot = vec![T::ZERO; k];
        for (ki, (&wk, &(y, x))) in weights.iter().zip(&entry.positions).enumerate() {
            let lin = y * sup_w + x;
            let feat = support.channel_slice(y, x);
            let grow = &mut grad_support.data_mut()[lin * c..(lin + 1) * c];
            let mut dot = T::ZERO;
            for i in 0..c {
                grow[i] += wk * g[i];
                dot += g[i] * feat[i];
            }
            score_cot[ki] = dot;
        }

        // through the softmax over the K raw scores
        let ds = softmax_vjp(&entry.scores, &score_cot)?;

        // s_k = <q_hat, u_hat[p_k]>
        let mut q_hat_cot = vec![T::ZERO; c];
        for (ki, &(y, x)) in entry.positions.iter().enumerate() {
            let lin = y * sup_w + x;
            let urow = &u_hat.data()[lin * c..(lin + 1) * c];
            let qrow = &q_hat.data()[m * c..(m + 1) * c];
            let ucot = &mut u_hat_cot[lin * c..(lin + 1) * c];
            for i in 0..c {
                q_hat_cot[i] += ds[ki] * urow[i];
                ucot[i] += ds[ki] * qrow[i];
            }
        }

        let gq = l2_normalize_vjp(&target_roi.data()[m * c..(m + 1) * c], eps, &q_hat_cot)?;
        grad_target.data_mut()[m * c..(m + 1) * c].copy_from_slice(&gq);
    }

    for p in 0..positions {
        let cot = &u_hat_cot[p * c..(p + 1) * c];
        if cot.iter().all(|v| *v == T::ZERO) {
            continue;
        }
        let gu = l2_normalize_vjp(&support.data()[p * c..(p + 1) * c], eps, cot)?;
        let grow = &mut grad_support.data_mut()[p * c..(p + 1) * c];
        for i in 0..c {
            grow[i] += gu[i];
        }
    }

    Ok((grad_target, grad_support))
}

fn check_support<T: Element>(support: &Tensor<T>) -> Result<()> {
    if support.rank() != 3 {
        return Err(TroiError::shape(format!(
            "support map must be H x W x C, got {:?}",
            support.dims()
        )));
    }
    Ok(())
}

fn check_pair<T: Element>(target_roi: &Tensor<T>, support: &Tensor<T>) -> Result<()> {
    check_support(support)?;
    if target_roi.rank() != 3 {
        return Err(TroiError::shape(format!(
            "target ROI features must be h x w x C, got {:?}",
            target_roi.dims()
        )));
    }
    if target_roi.dims()[2] != support.dims()[2] {
        return Err(TroiError::shape(format!(
            "channel mismatch: target {} vs support {}",
            target_roi.dims()[2],
            support.dims()[2]
        )));
    }
    Ok(())
}
