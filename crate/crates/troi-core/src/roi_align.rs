//! Single-frame ROI Align: bilinear sampling and bin-averaged pooling of
//! proposal features from one H x W x C feature map.
//!
//! Conventions, fixed so every oracle agrees bit for bit: a continuous
//! coordinate c lands on pixel center c (no half-pixel offset added to box
//! coordinates), out-of-range coordinates clamp to the border, each output bin
//! averages `sampling_ratio`^2 bilinear samples at the centers of an evenly
//! subdivided grid.

use crate::error::{Result, TroiError};
use crate::tensor::{Element, Tensor};

/// Proposal rectangle in continuous feature-map coordinates.
///
/// Coordinates may extend past the map; sampling clamps at the border.
/// Degenerate (zero-area) boxes are legal and collapse all samples onto one
/// point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl RoiBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = RoiBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(TroiError::NonFinite("roi box".into()));
        }
        if self.x2 < self.x1 || self.y2 < self.y1 {
            return Err(TroiError::invalid(format!(
                "roi box corners out of order: ({}, {}) .. ({}, {})",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
}

/// Border-clamped interpolation weights along one axis: low index, high index
/// and the fractional weight on the high side.
#[inline]
fn axis_coeffs(extent: usize, coord: f64) -> (usize, usize, f64) {
    let last = (extent - 1) as f64;
    let c = coord.clamp(0.0, last);
    let i0 = c.floor() as usize;
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, c - i0 as f64)
}

/// Bilinear interpolation of the channel vector at continuous `(x, y)`.
///
/// Coordinates outside `[0, W-1] x [0, H-1]` are clamped to the border first.
pub fn bilinear_sample<T: Element>(feature_map: &Tensor<T>, x: f64, y: f64) -> Result<Vec<T>> {
    check_feature_map(feature_map)?;
    if !x.is_finite() || !y.is_finite() {
        return Err(TroiError::NonFinite("bilinear sample coordinate".into()));
    }
    let channels = feature_map.dims()[2];
    let mut out = vec![T::ZERO; channels];
    accumulate_bilinear(feature_map, x, y, T::ONE, &mut out);
    Ok(out)
}

/// out[c] += scale * bilinear(F, x, y)[c]; the four corner terms accumulate in
/// a fixed order.
#[inline]
fn accumulate_bilinear<T: Element>(
    feature_map: &Tensor<T>,
    x: f64,
    y: f64,
    scale: T,
    out: &mut [T],
) {
    let (h, w) = (feature_map.dims()[0], feature_map.dims()[1]);
    let (y0, y1, fy) = axis_coeffs(h, y);
    let (x0, x1, fx) = axis_coeffs(w, x);
    let w00 = T::from_f64((1.0 - fy) * (1.0 - fx)) * scale;
    let w01 = T::from_f64((1.0 - fy) * fx) * scale;
    let w10 = T::from_f64(fy * (1.0 - fx)) * scale;
    let w11 = T::from_f64(fy * fx) * scale;
    let r00 = feature_map.channel_slice(y0, x0);
    let r01 = feature_map.channel_slice(y0, x1);
    let r10 = feature_map.channel_slice(y1, x0);
    let r11 = feature_map.channel_slice(y1, x1);
    for c in 0..out.len() {
        out[c] += w00 * r00[c] + w01 * r01[c] + w10 * r10[c] + w11 * r11[c];
    }
}

/// Scatter counterpart of [`accumulate_bilinear`]: grad[corner] += weight * cot.
#[inline]
fn scatter_bilinear<T: Element>(grad: &mut Tensor<T>, x: f64, y: f64, scale: T, cotangent: &[T]) {
    let (h, w) = (grad.dims()[0], grad.dims()[1]);
    let (y0, y1, fy) = axis_coeffs(h, y);
    let (x0, x1, fx) = axis_coeffs(w, x);
    let w00 = T::from_f64((1.0 - fy) * (1.0 - fx)) * scale;
    let w01 = T::from_f64((1.0 - fy) * fx) * scale;
    let w10 = T::from_f64(fy * (1.0 - fx)) * scale;
    let w11 = T::from_f64(fy * fx) * scale;
    let channels = grad.dims()[2];
    for c in 0..channels {
        let g = cotangent[c];
        let o00 = grad.off3(y0, x0, c);
        grad.data_mut()[o00] += w00 * g;
        let o01 = grad.off3(y0, x1, c);
        grad.data_mut()[o01] += w01 * g;
        let o10 = grad.off3(y1, x0, c);
        grad.data_mut()[o10] += w10 * g;
        let o11 = grad.off3(y1, x1, c);
        grad.data_mut()[o11] += w11 * g;
    }
}

/// VJP of [`bilinear_sample`] with respect to the feature map.
pub fn bilinear_sample_vjp<T: Element>(
    feature_map: &Tensor<T>,
    x: f64,
    y: f64,
    cotangent: &[T],
) -> Result<Tensor<T>> {
    check_feature_map(feature_map)?;
    let channels = feature_map.dims()[2];
    if cotangent.len() != channels {
        return Err(TroiError::shape(format!(
            "cotangent length {} vs {channels} channels",
            cotangent.len()
        )));
    }
    let mut grad = Tensor::zeros(feature_map.dims())?;
    scatter_bilinear(&mut grad, x, y, T::ONE, cotangent);
    Ok(grad)
}

fn check_feature_map<T: Element>(feature_map: &Tensor<T>) -> Result<()> {
    if feature_map.rank() != 3 {
        return Err(TroiError::shape(format!(
            "feature map must be H x W x C, got {:?}",
            feature_map.dims()
        )));
    }
    Ok(())
}

/// The sampling grid of one pooled bin: the centers of a `ratio` x `ratio`
/// subdivision.
#[inline]
fn bin_samples(
    origin: f64,
    bin_size: f64,
    bin_index: usize,
    ratio: usize,
) -> impl Iterator<Item = f64> {
    (0..ratio)
        .map(move |s| origin + (bin_index as f64 + (s as f64 + 0.5) / ratio as f64) * bin_size)
}

/// Pool an `pooled_h` x `pooled_w` x C feature grid for one proposal.
pub fn roi_align<T: Element>(
    feature_map: &Tensor<T>,
    roi: &RoiBox,
    pooled_h: usize,
    pooled_w: usize,
    sampling_ratio: usize,
) -> Result<Tensor<T>> {
    check_feature_map(feature_map)?;
    roi.validate()?;
    if pooled_h == 0 || pooled_w == 0 {
        return Err(TroiError::invalid("pooled extents must be >= 1"));
    }
    if sampling_ratio == 0 {
        return Err(TroiError::invalid("sampling_ratio must be >= 1"));
    }
    let channels = feature_map.dims()[2];
    let bin_h = roi.height() / pooled_h as f64;
    let bin_w = roi.width() / pooled_w as f64;
    let inv_count = T::ONE / T::from_f64((sampling_ratio * sampling_ratio) as f64);

    let mut out = Tensor::zeros(&[pooled_h, pooled_w, channels])?;
    let mut acc = vec![T::ZERO; channels];
    for by in 0..pooled_h {
        for bx in 0..pooled_w {
            acc.iter_mut().for_each(|v| *v = T::ZERO);
            for y in bin_samples(roi.y1, bin_h, by, sampling_ratio) {
                for x in bin_samples(roi.x1, bin_w, bx, sampling_ratio) {
                    accumulate_bilinear(feature_map, x, y, T::ONE, &mut acc);
                }
            }
            let base = out.off3(by, bx, 0);
            for c in 0..channels {
                out.data_mut()[base + c] = acc[c] * inv_count;
            }
        }
    }
    Ok(out)
}

/// VJP of [`roi_align`] with respect to the feature map: the bilinear weights
/// of every sample scatter back into the map.
pub fn roi_align_vjp<T: Element>(
    feature_map_dims: &[usize],
    roi: &RoiBox,
    pooled_h: usize,
    pooled_w: usize,
    sampling_ratio: usize,
    cotangent: &Tensor<T>,
) -> Result<Tensor<T>> {
    if feature_map_dims.len() != 3 {
        return Err(TroiError::shape(format!(
            "feature map dims must be H x W x C, got {feature_map_dims:?}"
        )));
    }
    roi.validate()?;
    let channels = feature_map_dims[2];
    if cotangent.dims() != [pooled_h, pooled_w, channels] {
        return Err(TroiError::shape(format!(
            "cotangent dims {:?}, expected [{pooled_h}, {pooled_w}, {channels}]",
            cotangent.dims()
        )));
    }
    let bin_h = roi.height() / pooled_h as f64;
    let bin_w = roi.width() / pooled_w as f64;
    let inv_count = T::ONE / T::from_f64((sampling_ratio * sampling_ratio) as f64);

    let mut grad = Tensor::zeros(feature_map_dims)?;
    for by in 0..pooled_h {
        for bx in 0..pooled_w {
            let base = cotangent.off3(by, bx, 0);
            let cot = &cotangent.data()[base..base + channels];
            for y in bin_samples(roi.y1, bin_h, by, sampling_ratio) {
                for x in bin_samples(roi.x1, bin_w, bx, sampling_ratio) {
                    scatter_bilinear(&mut grad, x, y, inv_count, cot);
                }
            }
        }
    }
    Ok(grad)
}

/// Every continuous sample coordinate `roi_align` would use for this box.
/// Exposed for the gradient checker, which must keep samples away from the
/// integer lattice where bilinear interpolation changes cells.
pub fn sample_coordinates(
    roi: &RoiBox,
    pooled_h: usize,
    pooled_w: usize,
    sampling_ratio: usize,
) -> Vec<(f64, f64)> {
    let bin_h = roi.height() / pooled_h as f64;
    let bin_w = roi.width() / pooled_w as f64;
    let mut coords = Vec::with_capacity(pooled_h * pooled_w * sampling_ratio * sampling_ratio);
    for by in 0..pooled_h {
        for bx in 0..pooled_w {
            for y in bin_samples(roi.y1, bin_h, by, sampling_ratio) {
                for x in bin_samples(roi.x1, bin_w, bx, sampling_ratio) {
                    coords.push((x, y));
                }
            }
        }
    }
    coords
}
