//! Adam optimizer with per-parameter moment tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{GradientSet, SegModel};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates plus the step counter. Learning rate is
/// owned by the training schedule and passed per update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &SegModel) -> Self {
        AdamState {
            m: model.params().iter().map(|p| Tensor::zeros(p.tensor.shape())).collect(),
            v: model.params().iter().map(|p| Tensor::zeros(p.tensor.shape())).collect(),
            step: 0,
        }
    }

    /// One Adam step. Updated parameters and moments are rounded to f32 so
    /// checkpoints round-trip bitwise.
    pub fn apply_update(&mut self, model: &mut SegModel, grads: &GradientSet, lr: f64) -> Result<()> {
        if grads.len() != model.params().len() {
            return Err(Error::shape(format!(
                "gradient set has {} tensors, model has {} parameters",
                grads.len(),
                model.params().len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = &mut model.params_mut()[i];
            if g.shape() != p.tensor.shape() {
                return Err(Error::shape(format!(
                    "gradient {} shape {:?} does not match parameter shape {:?}",
                    p.name,
                    g.shape(),
                    p.tensor.shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = p.tensor.data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            p.tensor.quantize_f32();
            self.m[i].quantize_f32();
            self.v[i].quantize_f32();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn tiny() -> SegModel {
        build_model(
            ModelConfig {
                in_channels: 1,
                out_channels: 2,
                depth: 1,
                base_width: 2,
                feature_tap_level: 0,
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn identical_updates_from_identical_state() {
        let mut a = tiny();
        let mut b = a.clone();
        let mut sa = AdamState::new(&a);
        let mut sb = AdamState::new(&b);
        let grads: GradientSet = a
            .params()
            .iter()
            .map(|p| Tensor::from_vec(p.tensor.shape(), (0..p.tensor.len()).map(|i| (i as f64) * 0.01 - 0.1).collect()).unwrap())
            .collect();
        sa.apply_update(&mut a, &grads, 1e-3).unwrap();
        sb.apply_update(&mut b, &grads, 1e-3).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.tensor, pb.tensor);
        }
        assert_eq!(sa, sb);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut model = tiny();
        let before: Vec<Tensor> = model.params().iter().map(|p| p.tensor.clone()).collect();
        let grads = model.zero_gradients();
        let mut state = AdamState::new(&model);
        state.apply_update(&mut model, &grads, 1e-3).unwrap();
        for (b, p) in before.iter().zip(model.params()) {
            assert_eq!(b, &p.tensor);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut model = tiny();
        let mut grads = model.zero_gradients();
        grads[0] = Tensor::zeros(&[1]);
        let mut state = AdamState::new(&model);
        assert!(matches!(
            state.apply_update(&mut model, &grads, 1e-3),
            Err(Error::Shape(_))
        ));
    }
}
