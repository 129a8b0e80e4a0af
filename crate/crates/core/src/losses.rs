//! Supervision signals: teacher segmentation loss, logits dimension transfer,
//! region-masked KL losses, channel-sorted feature loss, and the weighted total.
//!
//! Masked KL losses normalize by the full pixel count of the image (or feature
//! map), not by the mask cardinality, so magnitudes scale with region area.
//! KL arguments are ordered (teacher-derived target, student); zero target
//! entries contribute exactly zero. Student probabilities are floored at
//! `PROB_FLOOR` inside logarithms so underflow cannot produce -inf.

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

/// Floor applied to student probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Smoothing added to both numerator and denominator of the soft dice ratio.
pub const DICE_EPS: f64 = 1e-5;

/// Weights for the background logits loss and the feature loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !lambda1.is_finite() || !lambda2.is_finite() || lambda1 < 0.0 || lambda2 < 0.0 {
            return Err(Error::config(format!(
                "loss weights must be finite and non-negative, got lambda1={lambda1}, lambda2={lambda2}"
            )));
        }
        Ok(LossWeights { lambda1, lambda2 })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 10.0 }
    }
}

/// All components of the distillation loss, kept separate for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub per_organ_logit: Vec<f64>,
    pub background_logit: f64,
    pub per_organ_feature: Vec<f64>,
    pub total: f64,
}

/// Per-pixel channel softmax for a C×H×W tensor, stabilized by subtracting
/// the per-pixel max logit.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let (c, h, w) = logits.chw()?;
    if c < 2 {
        return Err(Error::shape(format!("softmax needs at least 2 channels, got {c}")));
    }
    if !logits.all_finite() {
        return Err(Error::invalid("softmax input contains non-finite values"));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(logits.shape());
    let src = logits.data();
    let dst = out.data_mut();
    for i in 0..plane {
        let mut max = f64::NEG_INFINITY;
        for ch in 0..c {
            max = max.max(src[ch * plane + i]);
        }
        let mut sum = 0.0;
        for ch in 0..c {
            let e = (src[ch * plane + i] - max).exp();
            dst[ch * plane + i] = e;
            sum += e;
        }
        for ch in 0..c {
            dst[ch * plane + i] /= sum;
        }
    }
    Ok(out)
}

/// Embeds a teacher's 2-class distribution into the student's (K+1)-class
/// space: background stays on channel 0, the organ probability moves to
/// channel `organ_index`, every other channel is 0.
pub fn transfer_logits(teacher_probs: &Tensor, organ_index: usize, num_organs: usize) -> Result<Tensor> {
    let (c, h, w) = teacher_probs.chw()?;
    if c != 2 {
        return Err(Error::shape(format!("teacher probabilities must have 2 channels, got {c}")));
    }
    if organ_index < 1 || organ_index > num_organs {
        return Err(Error::invalid(format!(
            "organ index {organ_index} out of range 1..={num_organs}"
        )));
    }
    let mut out = Tensor::zeros(&[num_organs + 1, h, w]);
    out.channel_mut(0).copy_from_slice(teacher_probs.channel(0));
    out.channel_mut(organ_index).copy_from_slice(teacher_probs.channel(1));
    Ok(out)
}

/// Elementwise mean of the K transferred teacher signals.
pub fn background_signal(transferred: &[Tensor]) -> Result<Tensor> {
    let first = transferred
        .first()
        .ok_or_else(|| Error::invalid("background_signal needs at least one tensor"))?;
    let shape = first.shape().to_vec();
    for t in transferred {
        if t.shape() != shape.as_slice() {
            return Err(Error::shape(format!(
                "transferred signal shapes differ: {:?} vs {:?}",
                t.shape(),
                shape
            )));
        }
    }
    let mut out = Tensor::zeros(&shape);
    let k = transferred.len() as f64;
    for t in transferred {
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *o += v / k;
        }
    }
    Ok(out)
}

/// KL(target || student) summed over masked pixels, divided by the full pixel
/// count of the image. `0 * ln(0/q)` is taken as 0.
pub fn masked_kl(target_probs: &Tensor, student_probs: &Tensor, mask: &Tensor) -> Result<f64> {
    let (c, h, w) = target_probs.chw()?;
    if student_probs.shape() != target_probs.shape() {
        return Err(Error::shape(format!(
            "target shape {:?} vs student shape {:?}",
            target_probs.shape(),
            student_probs.shape()
        )));
    }
    let (mh, mw) = mask.hw()?;
    if (mh, mw) != (h, w) {
        return Err(Error::shape(format!("mask shape {mh}×{mw} vs image {h}×{w}")));
    }
    if !mask.is_binary() {
        return Err(Error::invalid("mask is not binary"));
    }
    if target_probs.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("target probabilities contain negative values"));
    }
    let plane = h * w;
    let t = target_probs.data();
    let s = student_probs.data();
    let mut sum = 0.0;
    for (i, &m) in mask.data().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for ch in 0..c {
            let tv = t[ch * plane + i];
            if tv > 0.0 {
                let sv = s[ch * plane + i].max(PROB_FLOOR);
                sum += tv * (tv / sv).ln();
            }
        }
    }
    Ok(sum / plane as f64)
}

/// Logits-wise loss for one organ region: the teacher's transferred signal
/// against the student inside that teacher's organ mask.
pub fn organ_logit_loss(
    teacher_probs: &Tensor,
    student_probs: &Tensor,
    organ_mask: &Tensor,
    organ_index: usize,
    num_organs: usize,
) -> Result<f64> {
    let target = transfer_logits(teacher_probs, organ_index, num_organs)?;
    masked_kl(&target, student_probs, organ_mask)
}

/// Logits-wise loss for the shared background region: the mean of all
/// transferred teacher signals against the student inside the background mask.
pub fn background_logit_loss(
    all_teacher_probs: &[Tensor],
    student_probs: &Tensor,
    background_mask: &Tensor,
) -> Result<f64> {
    let num_organs = all_teacher_probs.len();
    let transferred: Vec<Tensor> = all_teacher_probs
        .iter()
        .enumerate()
        .map(|(i, p)| transfer_logits(p, i + 1, num_organs))
        .collect::<Result<_>>()?;
    let target = background_signal(&transferred)?;
    masked_kl(&target, student_probs, background_mask)
}

/// KL between per-pixel channel distributions after sorting both in
/// descending order, accumulated over masked pixels and divided by the full
/// coarse pixel count. Sorting makes the loss invariant to channel
/// permutations, which differ between independently trained networks.
pub fn sorted_feature_loss(
    teacher_features: &Tensor,
    student_features: &Tensor,
    mask: &Tensor,
) -> Result<f64> {
    let (c, h, w) = teacher_features.chw()?;
    let (sc, sh, sw) = student_features.chw()?;
    if sc != c {
        return Err(Error::shape(format!(
            "feature channel mismatch: teacher {c} vs student {sc}"
        )));
    }
    if (sh, sw) != (h, w) {
        return Err(Error::shape(format!(
            "feature spatial mismatch: teacher {h}×{w} vs student {sh}×{sw}"
        )));
    }
    let (mh, mw) = mask.hw()?;
    if (mh, mw) != (h, w) {
        return Err(Error::shape(format!("mask shape {mh}×{mw} vs features {h}×{w}")));
    }
    if !mask.is_binary() {
        return Err(Error::invalid("mask is not binary"));
    }
    let plane = h * w;
    let t = teacher_features.data();
    let s = student_features.data();
    let mut tv = vec![0.0; c];
    let mut sv = vec![0.0; c];
    let mut sum = 0.0;
    for (i, &m) in mask.data().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for ch in 0..c {
            tv[ch] = t[ch * plane + i];
            sv[ch] = s[ch * plane + i];
        }
        sort_descending(&mut tv);
        sort_descending(&mut sv);
        for r in 0..c {
            if tv[r] > 0.0 {
                sum += tv[r] * (tv[r] / sv[r].max(PROB_FLOOR)).ln();
            }
        }
    }
    Ok(sum / plane as f64)
}

/// Weighted sum of the loss components, with the breakdown retained.
pub fn total_loss(
    per_organ_logit: &[f64],
    background_logit: f64,
    per_organ_feature: &[f64],
    weights: LossWeights,
) -> Result<LossBreakdown> {
    let all = per_organ_logit
        .iter()
        .chain(std::iter::once(&background_logit))
        .chain(per_organ_feature.iter());
    for &v in all {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::invalid(format!(
                "loss components must be finite and non-negative, got {v}"
            )));
        }
    }
    let total = per_organ_logit.iter().sum::<f64>()
        + weights.lambda1 * background_logit
        + weights.lambda2 * per_organ_feature.iter().sum::<f64>();
    Ok(LossBreakdown {
        per_organ_logit: per_organ_logit.to_vec(),
        background_logit,
        per_organ_feature: per_organ_feature.to_vec(),
        total,
    })
}

/// Soft dice loss plus pixel-mean cross-entropy, unit weights on each term.
/// The dice ratio is smoothed in both numerator and denominator so an empty
/// class with an all-background prediction contributes zero.
pub fn seg_loss_dice_ce(logits: &Tensor, labels: &LabelMap) -> Result<f64> {
    Ok(seg_loss_dice_ce_grad_impl(logits, labels, false)?.0)
}

/// Value and analytic gradient of [`seg_loss_dice_ce`] with respect to the logits.
pub fn seg_loss_dice_ce_grad(logits: &Tensor, labels: &LabelMap) -> Result<(f64, Tensor)> {
    let (loss, grad) = seg_loss_dice_ce_grad_impl(logits, labels, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn seg_loss_dice_ce_grad_impl(
    logits: &Tensor,
    labels: &LabelMap,
    want_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    let (c, h, w) = logits.chw()?;
    let (lh, lw) = labels.hw()?;
    if (lh, lw) != (h, w) {
        return Err(Error::shape(format!("labels {lh}×{lw} vs logits {h}×{w}")));
    }
    for &y in labels.data() {
        if y < 0 || y as usize >= c {
            return Err(Error::invalid(format!("label {y} out of range 0..{c}")));
        }
    }
    let probs = softmax_channels(logits)?;
    let plane = h * w;
    let n = plane as f64;
    let p = probs.data();
    let y = labels.data();

    // Per-class dice statistics.
    let mut inter = vec![0.0; c]; // sum of p_c over pixels labeled c
    let mut p_sum = vec![0.0; c];
    let mut y_sum = vec![0.0; c];
    for i in 0..plane {
        let yc = y[i] as usize;
        inter[yc] += p[yc * plane + i];
        y_sum[yc] += 1.0;
        for ch in 0..c {
            p_sum[ch] += p[ch * plane + i];
        }
    }
    let mut dice = 0.0;
    for ch in 0..c {
        dice += 1.0 - (2.0 * inter[ch] + DICE_EPS) / (p_sum[ch] + y_sum[ch] + DICE_EPS);
    }
    dice /= c as f64;

    let mut ce = 0.0;
    for i in 0..plane {
        ce -= p[y[i] as usize * plane + i].max(PROB_FLOOR).ln();
    }
    ce /= n;

    let loss = dice + ce;
    if !want_grad {
        return Ok((loss, None));
    }

    // Gradient w.r.t. probabilities, then through the softmax.
    let mut d_p = vec![0.0; c * plane];
    let inv_c = 1.0 / c as f64;
    for ch in 0..c {
        let denom = p_sum[ch] + y_sum[ch] + DICE_EPS;
        let num = 2.0 * inter[ch] + DICE_EPS;
        for i in 0..plane {
            let y_ci = if y[i] as usize == ch { 1.0 } else { 0.0 };
            // d/dp of -(2*inter+eps)/denom, averaged over classes
            d_p[ch * plane + i] += inv_c * (num - 2.0 * y_ci * denom) / (denom * denom);
            if y_ci == 1.0 {
                d_p[ch * plane + i] -= 1.0 / (n * p[ch * plane + i].max(PROB_FLOOR));
            }
        }
    }
    let mut grad = Tensor::zeros(logits.shape());
    let g = grad.data_mut();
    for i in 0..plane {
        let mut dot = 0.0;
        for ch in 0..c {
            dot += d_p[ch * plane + i] * p[ch * plane + i];
        }
        for ch in 0..c {
            g[ch * plane + i] = p[ch * plane + i] * (d_p[ch * plane + i] - dot);
        }
    }
    Ok((loss, Some(grad)))
}

/// Full distillation loss breakdown plus analytic gradients with respect to
/// the student's raw logits and raw feature tap.
///
/// `teacher_probs` are the K post-softmax 2×H×W teacher outputs,
/// `teacher_feature_probs` the K channel-softmaxed feature taps.
pub fn distill_loss_and_grads(
    teacher_probs: &[Tensor],
    teacher_feature_probs: &[Tensor],
    masks: &crate::masks::RegionMaskSet,
    student_logits: &Tensor,
    student_features: &Tensor,
    weights: LossWeights,
) -> Result<(LossBreakdown, Tensor, Tensor)> {
    let num_organs = teacher_probs.len();
    if num_organs == 0 {
        return Err(Error::invalid("distillation requires at least one teacher"));
    }
    if teacher_feature_probs.len() != num_organs
        || masks.organ_masks.len() != num_organs
        || masks.downsampled.len() != num_organs
    {
        return Err(Error::shape(format!(
            "teacher count mismatch: {} probs, {} features, {} masks",
            num_organs,
            teacher_feature_probs.len(),
            masks.organ_masks.len()
        )));
    }
    let (sc, h, w) = student_logits.chw()?;
    if sc != num_organs + 1 {
        return Err(Error::shape(format!(
            "student logits have {sc} channels, expected {}",
            num_organs + 1
        )));
    }
    let student_probs = softmax_channels(student_logits)?;
    let student_feat_probs = softmax_channels(student_features)?;
    let plane = h * w;

    let mut d_logits = Tensor::zeros(student_logits.shape());
    let mut d_features = Tensor::zeros(student_features.shape());

    let mut per_organ_logit = Vec::with_capacity(num_organs);
    let transferred: Vec<Tensor> = teacher_probs
        .iter()
        .enumerate()
        .map(|(i, p)| transfer_logits(p, i + 1, num_organs))
        .collect::<Result<_>>()?;
    for (k, target) in transferred.iter().enumerate() {
        per_organ_logit.push(masked_kl(target, &student_probs, &masks.organ_masks[k])?);
        accumulate_kl_logit_grad(&mut d_logits, target, &student_probs, &masks.organ_masks[k], 1.0);
    }

    let bg_target = background_signal(&transferred)?;
    let background_logit = masked_kl(&bg_target, &student_probs, &masks.background_mask)?;
    accumulate_kl_logit_grad(
        &mut d_logits,
        &bg_target,
        &student_probs,
        &masks.background_mask,
        weights.lambda1,
    );

    let mut per_organ_feature = Vec::with_capacity(num_organs);
    for (k, teacher_feat) in teacher_feature_probs.iter().enumerate() {
        per_organ_feature.push(sorted_feature_loss(
            teacher_feat,
            &student_feat_probs,
            &masks.downsampled[k],
        )?);
        accumulate_sorted_feature_grad(
            &mut d_features,
            teacher_feat,
            &student_feat_probs,
            &masks.downsampled[k],
            weights.lambda2,
        )?;
    }

    let breakdown = total_loss(&per_organ_logit, background_logit, &per_organ_feature, weights)?;
    debug_assert_eq!(d_logits.len(), (num_organs + 1) * plane);
    Ok((breakdown, d_logits, d_features))
}

/// d/dz of weight * masked_kl(target, softmax(z), mask): per masked pixel,
/// weight * (sum(target) * s_c - target_c) / (H*W).
fn accumulate_kl_logit_grad(
    d_logits: &mut Tensor,
    target: &Tensor,
    student_probs: &Tensor,
    mask: &Tensor,
    weight: f64,
) {
    let (c, h, w) = target.chw().expect("validated by caller");
    let plane = h * w;
    let scale = weight / plane as f64;
    let t = target.data();
    let s = student_probs.data();
    let d = d_logits.data_mut();
    for (i, &m) in mask.data().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let mut t_sum = 0.0;
        for ch in 0..c {
            t_sum += t[ch * plane + i];
        }
        for ch in 0..c {
            d[ch * plane + i] += scale * (t_sum * s[ch * plane + i] - t[ch * plane + i]);
        }
    }
}

/// Gradient of the sorted feature KL with respect to the student's raw
/// features. The sort pairs teacher and student values by rank, so each
/// student channel is matched with the teacher value of its own rank.
fn accumulate_sorted_feature_grad(
    d_features: &mut Tensor,
    teacher_feat_probs: &Tensor,
    student_feat_probs: &Tensor,
    mask: &Tensor,
    weight: f64,
) -> Result<()> {
    let (c, h, w) = teacher_feat_probs.chw()?;
    let plane = h * w;
    let scale = weight / plane as f64;
    let t = teacher_feat_probs.data();
    let s = student_feat_probs.data();
    let d = d_features.data_mut();
    let mut tv = vec![0.0; c];
    let mut order: Vec<usize> = (0..c).collect();
    for (i, &m) in mask.data().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let mut t_sum = 0.0;
        for ch in 0..c {
            tv[ch] = t[ch * plane + i];
            t_sum += tv[ch];
        }
        sort_descending(&mut tv);
        // Rank student channels: order[r] = channel holding rank r.
        order.clear();
        order.extend(0..c);
        order.sort_by(|&a, &b| {
            s[b * plane + i]
                .partial_cmp(&s[a * plane + i])
                .expect("finite probabilities")
                .then(a.cmp(&b))
        });
        for (rank, &ch) in order.iter().enumerate() {
            d[ch * plane + i] += scale * (t_sum * s[ch * plane + i] - tv[rank]);
        }
    }
    Ok(())
}

fn sort_descending(v: &mut [f64]) {
    v.sort_by(|a, b| b.partial_cmp(a).expect("finite values"));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn pixel_probs(shape_c: usize, probs: &[f64]) -> Tensor {
        Tensor::from_vec(&[shape_c, 1, 1], probs.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let t = Tensor::from_vec(&[2, 1, 1], vec![0.0, 0.0]).unwrap();
        let p = softmax_channels(&t).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-12);

        let a = Tensor::from_vec(&[2, 1, 1], vec![0.3, -1.2]).unwrap();
        let b = Tensor::from_vec(&[2, 1, 1], vec![0.3 + 5.0, -1.2 + 5.0]).unwrap();
        let pa = softmax_channels(&a).unwrap();
        let pb = softmax_channels(&b).unwrap();
        for (x, y) in pa.data().iter().zip(pb.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let t = Tensor::from_vec(&[2, 1, 1], vec![1.0f64.ln(), 3.0f64.ln()]).unwrap();
        let p = softmax_channels(&t).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut t = Tensor::zeros(&[2, 1, 1]);
        t.data_mut()[1] = f64::INFINITY;
        assert!(matches!(softmax_channels(&t), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn transfer_places_channels() {
        let p = pixel_probs(2, &[0.2, 0.8]);
        let out = transfer_logits(&p, 2, 3).unwrap();
        assert_eq!(out.data(), &[0.2, 0.0, 0.8, 0.0]);

        let p = pixel_probs(2, &[0.4, 0.6]);
        let out = transfer_logits(&p, 1, 1).unwrap();
        assert_eq!(out.data(), &[0.4, 0.6]);

        let p = pixel_probs(2, &[0.6, 0.4]);
        let out = transfer_logits(&p, 1, 2).unwrap();
        assert_eq!(out.data(), &[0.6, 0.4, 0.0]);
    }

    #[test]
    fn transfer_rejects_out_of_range_organ() {
        let p = pixel_probs(2, &[0.5, 0.5]);
        assert!(matches!(transfer_logits(&p, 0, 3), Err(Error::InvalidInput(_))));
        assert!(matches!(transfer_logits(&p, 4, 3), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn background_signal_is_mean() {
        let a = pixel_probs(3, &[0.6, 0.4, 0.0]);
        let b = pixel_probs(3, &[0.8, 0.0, 0.2]);
        let out = background_signal(&[a, b]).unwrap();
        for (got, want) in out.data().iter().zip([0.7, 0.2, 0.1]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_kl_examples() {
        // Identical distributions -> 0 for any mask.
        let p = pixel_probs(3, &[0.5, 0.25, 0.25]);
        let m = Tensor::full(&[1, 1], 1.0);
        assert_eq!(masked_kl(&p, &p, &m).unwrap(), 0.0);

        // All-zero mask -> 0.
        let q = pixel_probs(3, &[1.0, 0.0, 0.0]);
        let m0 = Tensor::zeros(&[1, 1]);
        assert_eq!(masked_kl(&q, &p, &m0).unwrap(), 0.0);

        // 2x2 image, one masked pixel, target (1,0,0), student (0.5,0.25,0.25).
        let mut target = Tensor::zeros(&[3, 2, 2]);
        target.channel_mut(0).copy_from_slice(&[1.0; 4]);
        let mut student = Tensor::zeros(&[3, 2, 2]);
        student.channel_mut(0).copy_from_slice(&[0.5; 4]);
        student.channel_mut(1).copy_from_slice(&[0.25; 4]);
        student.channel_mut(2).copy_from_slice(&[0.25; 4]);
        let mask = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let got = masked_kl(&target, &student, &mask).unwrap();
        assert!((got - 2.0f64.ln() / 4.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn masked_kl_rejects_negative_target() {
        let t = pixel_probs(2, &[-0.1, 1.1]);
        let s = pixel_probs(2, &[0.5, 0.5]);
        let m = Tensor::full(&[1, 1], 1.0);
        assert!(matches!(masked_kl(&t, &s, &m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn organ_logit_loss_examples() {
        // Mask all zero -> 0 even for a maximally confident teacher.
        let teacher = pixel_probs(2, &[1.0, 0.0]);
        let student = pixel_probs(3, &[0.2, 0.3, 0.5]);
        let m0 = Tensor::zeros(&[1, 1]);
        assert_eq!(organ_logit_loss(&teacher, &student, &m0, 1, 2).unwrap(), 0.0);

        // Student equal to the transferred target on the mask -> 0.
        let teacher = pixel_probs(2, &[0.3, 0.7]);
        let student = pixel_probs(3, &[0.3, 0.7, 0.0]);
        let m1 = Tensor::full(&[1, 1], 1.0);
        assert!(organ_logit_loss(&teacher, &student, &m1, 1, 2).unwrap().abs() < 1e-12);

        // Hand-evaluated single pixel: 0.9*ln(0.9/0.8).
        let teacher = pixel_probs(2, &[0.9, 0.1]);
        let student = pixel_probs(3, &[0.8, 0.1, 0.1]);
        let got = organ_logit_loss(&teacher, &student, &m1, 1, 2).unwrap();
        let want = 0.9 * (0.9f64 / 0.8).ln();
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        assert!((want - 0.10601).abs() < 5e-6);
    }

    #[test]
    fn background_logit_loss_examples() {
        let teachers = vec![pixel_probs(2, &[1.0, 0.0]), pixel_probs(2, &[1.0, 0.0])];
        let student = pixel_probs(3, &[0.5, 0.3, 0.2]);
        let m0 = Tensor::zeros(&[1, 1]);
        assert_eq!(background_logit_loss(&teachers, &student, &m0).unwrap(), 0.0);

        let m1 = Tensor::full(&[1, 1], 1.0);
        let matched = pixel_probs(3, &[1.0, 0.0, 0.0]);
        assert!(background_logit_loss(&teachers, &matched, &m1).unwrap().abs() < 1e-12);

        let got = background_logit_loss(&teachers, &student, &m1).unwrap();
        assert!((got - 2.0f64.ln()).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn sorted_feature_loss_examples() {
        let m1 = Tensor::full(&[1, 1], 1.0);

        let t = pixel_probs(2, &[0.75, 0.25]);
        assert_eq!(sorted_feature_loss(&t, &t, &m1).unwrap(), 0.0);

        // A channel permutation of the teacher sorts to the same vectors.
        let swapped = pixel_probs(2, &[0.25, 0.75]);
        assert_eq!(sorted_feature_loss(&t, &swapped, &m1).unwrap(), 0.0);

        let s = pixel_probs(2, &[0.6, 0.4]);
        let got = sorted_feature_loss(&t, &s, &m1).unwrap();
        let want = 0.75 * (0.75f64 / 0.6).ln() + 0.25 * (0.25f64 / 0.4).ln();
        assert!((got - want).abs() < 1e-12);
        assert!((want - 0.04984).abs() < 5e-5);
    }

    #[test]
    fn sorted_feature_loss_rejects_channel_mismatch() {
        let t = pixel_probs(2, &[0.5, 0.5]);
        let s = pixel_probs(3, &[0.4, 0.3, 0.3]);
        let m = Tensor::full(&[1, 1], 1.0);
        assert!(matches!(sorted_feature_loss(&t, &s, &m), Err(Error::Shape(_))));
    }

    #[test]
    fn total_loss_weighted_sum() {
        let w = LossWeights::default();
        assert_eq!(w.lambda1, 1.0);
        assert_eq!(w.lambda2, 10.0);
        let b = total_loss(&[0.5], 0.2, &[0.03], w).unwrap();
        assert!((b.total - 1.0).abs() < 1e-12);

        let lw_only = total_loss(&[0.5], 0.2, &[0.03], LossWeights::new(1.0, 0.0).unwrap()).unwrap();
        assert!((lw_only.total - 0.7).abs() < 1e-12);

        let zero = total_loss(&[0.0, 0.0], 0.0, &[0.0, 0.0], w).unwrap();
        assert_eq!(zero.total, 0.0);
    }

    #[test]
    fn total_loss_rejects_negative_component() {
        let w = LossWeights::default();
        assert!(total_loss(&[-0.1], 0.0, &[0.0], w).is_err());
    }

    #[test]
    fn dice_ce_uniform_logits_ce_term() {
        // Uniform logits, C=2, balanced labels: CE term is ln 2 exactly.
        let logits = Tensor::zeros(&[2, 2, 2]);
        let labels = LabelMap::from_vec(&[2, 2], vec![0, 0, 1, 1]).unwrap();
        let loss = seg_loss_dice_ce(&logits, &labels).unwrap();
        // Dice per class with p=0.5 everywhere: 1 - (2*0.5*2 + eps)/(0.5*4 + 2 + eps) = 0.5 - O(eps).
        let dice_c = 1.0 - (2.0 * 0.5 * 2.0 + DICE_EPS) / (0.5 * 4.0 + 2.0 + DICE_EPS);
        let want = dice_c + 2.0f64.ln();
        assert!((loss - want).abs() < 1e-12, "loss {loss}, want {want}");
    }

    #[test]
    fn dice_ce_confident_correct_approaches_zero() {
        let mut logits = Tensor::zeros(&[2, 2, 2]);
        // Labels [0,1,1,0]; push 40-logit margins toward the correct class.
        let labels = LabelMap::from_vec(&[2, 2], vec![0, 1, 1, 0]).unwrap();
        for i in 0..4 {
            let y = labels.data()[i] as usize;
            logits.data_mut()[y * 4 + i] = 40.0;
        }
        let loss = seg_loss_dice_ce(&logits, &labels).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn dice_ce_empty_foreground_correct_background() {
        let mut logits = Tensor::zeros(&[2, 2, 2]);
        for i in 0..4 {
            logits.data_mut()[i] = 40.0; // all background, confidently
        }
        let labels = LabelMap::from_vec(&[2, 2], vec![0, 0, 0, 0]).unwrap();
        let loss = seg_loss_dice_ce(&logits, &labels).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn dice_ce_rejects_out_of_range_label() {
        let logits = Tensor::zeros(&[2, 1, 2]);
        let labels = LabelMap::from_vec(&[1, 2], vec![0, 2]).unwrap();
        assert!(matches!(seg_loss_dice_ce(&logits, &labels), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn masked_kl_mask_monotonicity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let c = 3;
            let logits_t: Vec<f64> = (0..c * 9).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let logits_s: Vec<f64> = (0..c * 9).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let t = softmax_channels(&Tensor::from_vec(&[c, 3, 3], logits_t).unwrap()).unwrap();
            let s = softmax_channels(&Tensor::from_vec(&[c, 3, 3], logits_s).unwrap()).unwrap();
            let mut small = Tensor::zeros(&[3, 3]);
            let mut big = Tensor::zeros(&[3, 3]);
            for i in 0..9 {
                let in_small = rng.gen_bool(0.4);
                if in_small {
                    small.data_mut()[i] = 1.0;
                    big.data_mut()[i] = 1.0;
                } else if rng.gen_bool(0.5) {
                    big.data_mut()[i] = 1.0;
                }
            }
            let a = masked_kl(&t, &s, &small).unwrap();
            let b = masked_kl(&t, &s, &big).unwrap();
            assert!(b >= a - 1e-15);
        }
    }

    #[test]
    fn feature_loss_permutation_invariance() {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..25 {
            let c = 4;
            let plane = 4;
            let t = softmax_channels(
                &Tensor::from_vec(&[c, 2, 2], (0..c * plane).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap(),
            )
            .unwrap();
            let s = softmax_channels(
                &Tensor::from_vec(&[c, 2, 2], (0..c * plane).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap(),
            )
            .unwrap();
            let mask = Tensor::from_vec(&[2, 2], (0..4).map(|_| f64::from(rng.gen_bool(0.7))).collect()).unwrap();

            // Apply a per-pixel channel permutation to the student.
            let mut permuted = s.clone();
            for i in 0..plane {
                let mut chans: Vec<usize> = (0..c).collect();
                chans.shuffle(&mut rng);
                for (dst, &src) in chans.iter().enumerate() {
                    permuted.data_mut()[dst * plane + i] = s.data()[src * plane + i];
                }
            }
            let a = sorted_feature_loss(&t, &s, &mask).unwrap();
            let b = sorted_feature_loss(&t, &permuted, &mask).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }
}
