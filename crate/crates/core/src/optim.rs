//! Adam with decoupled weight decay, and the inverse-square-root warmup
//! schedule used for sequence-to-sequence fine-tuning.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamGrads, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Skip weight decay for biases and layer-norm parameters.
    pub exclude_bias_and_norm: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            exclude_bias_and_norm: true,
        }
    }
}

/// First and second moment estimates keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

pub fn applies_weight_decay(name: &str) -> bool {
    !(name.ends_with("bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

/// One bias-corrected Adam step over every parameter that has a gradient.
///
/// Weight decay is decoupled: `p -= lr·wd·p` before the moment update.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(Error::ParamShape {
                name: name.clone(),
                expected: p.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
        for moments in [&state.m, &state.v] {
            if let Some(t) = moments.get(name) {
                if t.shape() != p.shape() {
                    return Err(Error::ParamShape {
                        name: name.clone(),
                        expected: p.shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let eps = T::from_f64_lossy(cfg.eps);
    let lr = T::from_f64_lossy(cfg.lr);
    let bc1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));

    for (name, g) in grads.iter() {
        let decay = if cfg.weight_decay > 0.0
            && (!cfg.exclude_bias_and_norm || applies_weight_decay(name))
        {
            T::from_f64_lossy(cfg.lr * cfg.weight_decay)
        } else {
            T::zero()
        };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let p = params.get_mut(name).expect("checked above");
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            pd[i] -= decay * pd[i];
            md[i] = b1 * md[i] + (T::one() - b1) * gi;
            vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, warmup: u64, d_model: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::ZeroStep);
    }
    let s = step as f64;
    let w = warmup.max(1) as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(name: &str, data: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::from_f64(&[data.len()], data).unwrap());
        s
    }

    fn grads(name: &str, data: &[f64]) -> ParamGrads<f64> {
        let mut g = ParamGrads::new();
        g.insert(
            name.to_string(),
            Tensor::from_f64(&[data.len()], data).unwrap(),
        );
        g
    }

    fn no_decay(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay: 0.0,
            eps: 1e-8,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn first_step_is_normalized_gradient() {
        let mut p = store("w", &[1.0, -2.0, 0.5]);
        let g = [0.3, -4.0, 1e-3];
        let mut st = AdamState::new();
        let cfg = no_decay(0.1);
        adam_step(&mut p, &grads("w", &g), &mut st, &cfg).unwrap();
        let start = [1.0, -2.0, 0.5];
        for i in 0..3 {
            let want = start[i] - cfg.lr * g[i] / (g[i].abs() + cfg.eps);
            assert!((p.get("w").unwrap().data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = store("w", &[1.0, 2.0]);
        let mut st = AdamState::new();
        for _ in 0..3 {
            adam_step(&mut p, &grads("w", &[0.0, 0.0]), &mut st, &no_decay(0.1)).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn decoupled_decay_shrinks_before_update() {
        let mut p = store("w", &[2.0]);
        let mut st = AdamState::new();
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            eps: 1e-8,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &grads("w", &[0.0]), &mut st, &cfg).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);

        // Biases are excluded by default.
        let mut p = store("layer.bias", &[2.0]);
        let mut st = AdamState::new();
        adam_step(&mut p, &grads("layer.bias", &[0.0]), &mut st, &cfg).unwrap();
        assert_eq!(p.get("layer.bias").unwrap().data()[0], 2.0);
    }

    #[test]
    fn matches_hand_stepped_trace_on_quadratic() {
        // Oracle: scalar Adam written out directly for loss x^2/2 (grad = x).
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut x = 1.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for t in 1..=5 {
            let g = x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            trace.push(x);
        }

        let mut p = store("x", &[1.5]);
        let mut st = AdamState::new();
        let cfg = AdamConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: 0.0,
            exclude_bias_and_norm: true,
        };
        for want in trace {
            let cur = p.get("x").unwrap().data()[0];
            adam_step(&mut p, &grads("x", &[cur]), &mut st, &cfg).unwrap();
            assert!((p.get("x").unwrap().data()[0] - want).abs() < 1e-12);
        }
        assert_eq!(st.step, 5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = store("w", &[1.0, 2.0]);
        let mut st = AdamState::new();
        let err = adam_step(&mut p, &grads("w", &[1.0]), &mut st, &no_decay(0.1));
        assert!(matches!(err, Err(Error::ParamShape { .. })));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn noam_schedule() {
        let w = 4000;
        let at = noam_lr(w, w, 512).unwrap();
        assert!((at - (512.0f64 * 4000.0).powf(-0.5)).abs() < 1e-15);
        assert!((at - 6.987_712_429_686_843e-4).abs() < 1e-9);
        let first = noam_lr(1, w, 512).unwrap();
        assert!((first - 512f64.powf(-0.5) * 4000f64.powf(-1.5)).abs() < 1e-18);
        assert!(matches!(noam_lr(0, w, 512), Err(Error::ZeroStep)));
        for s in 1..w {
            assert!(noam_lr(s + 1, w, 512).unwrap() > noam_lr(s, w, 512).unwrap());
        }
        for s in w..w + 2000 {
            assert!(noam_lr(s + 1, w, 512).unwrap() < noam_lr(s, w, 512).unwrap());
        }
    }
}
