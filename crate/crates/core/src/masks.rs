//! Binary region masks that gate every supervision signal.
//!
//! Each teacher is trusted only inside the organ region it predicts; the
//! shared background region is the intersection of all teachers' background
//! predictions. Feature-level supervision uses max-pool downsampled copies
//! of the organ masks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-teacher organ masks, their downsampled versions, and the shared
/// background mask.
#[derive(Debug, Clone)]
pub struct RegionMaskSet {
    /// One H×W binary mask per teacher, 1 where that teacher predicts its organ.
    pub organ_masks: Vec<Tensor>,
    /// H×W binary mask, 1 where every teacher predicts background.
    pub background_mask: Tensor,
    /// Organ masks max-pooled `level` times, (H/2^l)×(W/2^l) each.
    pub downsampled: Vec<Tensor>,
    /// Number of 2×2 max-pool passes applied to produce `downsampled`.
    pub level: u32,
}

/// Binarizes a teacher's 2×H×W logits: 1 iff the organ logit strictly exceeds
/// the background logit. Ties go to background.
pub fn binarize_prediction(teacher_logits: &Tensor) -> Result<Tensor> {
    let (c, h, w) = teacher_logits.chw()?;
    if c != 2 {
        return Err(Error::shape(format!("teacher logits must have 2 channels, got {c}")));
    }
    if !teacher_logits.all_finite() {
        return Err(Error::invalid("teacher logits contain non-finite values"));
    }
    let bg = teacher_logits.channel(0);
    let organ = teacher_logits.channel(1);
    let data = organ
        .iter()
        .zip(bg)
        .map(|(&o, &b)| if o > b { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(&[h, w], data)
}

/// Elementwise product of the organ-mask complements: 1 only where no teacher
/// predicts an organ.
pub fn background_mask(organ_masks: &[Tensor]) -> Result<Tensor> {
    let first = organ_masks
        .first()
        .ok_or_else(|| Error::invalid("background_mask needs at least one organ mask"))?;
    let shape = first.shape().to_vec();
    for (k, m) in organ_masks.iter().enumerate() {
        if m.shape() != shape.as_slice() {
            return Err(Error::shape(format!(
                "organ mask {} has shape {:?}, expected {:?}",
                k + 1,
                m.shape(),
                shape
            )));
        }
        if !m.is_binary() {
            return Err(Error::invalid(format!("organ mask {} is not binary", k + 1)));
        }
    }
    let mut out = Tensor::full(&shape, 1.0);
    for m in organ_masks {
        for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
            *o *= 1.0 - v;
        }
    }
    Ok(out)
}

/// Applies `levels` successive 2×2 max-pool passes. A coarse pixel is 1 iff
/// any of its four fine pixels is 1. `levels == 0` returns the input.
pub fn downsample_mask(mask: &Tensor, levels: u32) -> Result<Tensor> {
    let (h, w) = mask.hw()?;
    let div = 1usize << levels;
    if h % div != 0 || w % div != 0 {
        return Err(Error::shape(format!(
            "mask shape {h}×{w} not divisible by 2^{levels}"
        )));
    }
    let mut cur = mask.clone();
    for _ in 0..levels {
        let (ch, cw) = cur.hw()?;
        let (nh, nw) = (ch / 2, cw / 2);
        let mut next = Tensor::zeros(&[nh, nw]);
        let src = cur.data();
        let dst = next.data_mut();
        for y in 0..nh {
            for x in 0..nw {
                let a = src[(2 * y) * cw + 2 * x];
                let b = src[(2 * y) * cw + 2 * x + 1];
                let c = src[(2 * y + 1) * cw + 2 * x];
                let d = src[(2 * y + 1) * cw + 2 * x + 1];
                dst[y * nw + x] = a.max(b).max(c).max(d);
            }
        }
        cur = next;
    }
    Ok(cur)
}

/// Builds the full mask set from the K frozen teacher forward passes.
pub fn region_masks(teacher_logits: &[Tensor], level: u32) -> Result<RegionMaskSet> {
    let organ_masks: Vec<Tensor> = teacher_logits
        .iter()
        .map(binarize_prediction)
        .collect::<Result<_>>()?;
    let background = background_mask(&organ_masks)?;
    let downsampled = organ_masks
        .iter()
        .map(|m| downsample_mask(m, level))
        .collect::<Result<_>>()?;
    Ok(RegionMaskSet {
        organ_masks,
        background_mask: background,
        downsampled,
        level,
    })
}
