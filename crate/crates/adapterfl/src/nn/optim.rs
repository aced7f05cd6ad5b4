//! SGD with momentum, weight decay and a per-round multiplicative
//! learning-rate decay.

use std::collections::HashMap;

use crate::tensor::{Element, Tensor};

use super::params::ParameterSet;
use super::{ModelGraph, ParamKind};

#[derive(Clone, Copy, Debug)]
pub struct SgdHyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
}

impl Default for SgdHyper {
    fn default() -> Self {
        SgdHyper { learning_rate: 0.01, momentum: 0.5, weight_decay: 1e-3, lr_decay: 0.998 }
    }
}

/// Optimizer state: hyperparameters plus one momentum buffer per parameter,
/// created lazily with the parameter's shape.
#[derive(Clone, Debug)]
pub struct OptimizerState<F: Element = f32> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    buffers: HashMap<String, Tensor<F>>,
}

impl<F: Element> OptimizerState<F> {
    pub fn new(h: SgdHyper) -> Self {
        assert!(h.learning_rate >= 0.0, "learning rate must be nonnegative");
        assert!((0.0..1.0).contains(&h.momentum), "momentum must be in [0,1)");
        assert!(h.weight_decay >= 0.0, "weight decay must be nonnegative");
        assert!(h.lr_decay > 0.0 && h.lr_decay <= 1.0, "lr decay must be in (0,1]");
        OptimizerState {
            learning_rate: h.learning_rate,
            momentum: h.momentum,
            weight_decay: h.weight_decay,
            lr_decay: h.lr_decay,
            buffers: HashMap::new(),
        }
    }

    /// v <- momentum*v + (grad + weight_decay*w); w <- w - lr*v; grad <- 0.
    fn update(&mut self, name: &str, value: &mut [F], grad: &mut [F]) {
        let buf = self
            .buffers
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(&[value.len()]));
        debug_assert_eq!(buf.numel(), value.len(), "momentum buffer shape mismatch");
        let mom = F::from_f64(self.momentum);
        let wd = F::from_f64(self.weight_decay);
        let lr = F::from_f64(self.learning_rate);
        for ((w, g), v) in value.iter_mut().zip(grad.iter_mut()).zip(buf.data_mut()) {
            *v = mom * *v + (*g + wd * *w);
            *w = *w - lr * *v;
            *g = F::zero();
        }
    }

    /// In-place step over a model's trainable parameters.
    pub fn step_model(&mut self, model: &mut ModelGraph<F>) {
        // visit_params_mut borrows self mutably inside the closure; collect
        // names first so buffer access stays simple.
        let mut updates: Vec<(String, *mut F, *mut F, usize)> = Vec::new();
        model.visit_params_mut(&mut |p| {
            if p.kind == ParamKind::Trainable {
                if let Some(g) = p.grad {
                    updates.push((
                        p.name.clone(),
                        p.value.data_mut().as_mut_ptr(),
                        g.data_mut().as_mut_ptr(),
                        p.value.numel(),
                    ));
                }
            }
        });
        for (name, w, g, n) in updates {
            // Safety: pointers come from distinct, live tensors owned by
            // `model`, which is exclusively borrowed for this call.
            let (value, grad) = unsafe {
                (std::slice::from_raw_parts_mut(w, n), std::slice::from_raw_parts_mut(g, n))
            };
            self.update(&name, value, grad);
        }
    }

    /// Step over a detached parameter set carrying gradients. Entries
    /// without a gradient (buffers) are left untouched. No-op when empty.
    pub fn step_params(&mut self, params: &mut ParameterSet<F>) {
        let mut work: Vec<(String, *mut F, *mut F, usize)> = Vec::new();
        for e in params.iter_mut() {
            if e.kind != ParamKind::Trainable {
                continue;
            }
            if let Some(g) = e.grad.as_mut() {
                work.push((
                    e.name.clone(),
                    e.value.data_mut().as_mut_ptr(),
                    g.data_mut().as_mut_ptr(),
                    e.value.numel(),
                ));
            }
        }
        for (name, w, g, n) in work {
            let (value, grad) = unsafe {
                (std::slice::from_raw_parts_mut(w, n), std::slice::from_raw_parts_mut(g, n))
            };
            self.update(&name, value, grad);
        }
    }

    /// End-of-round schedule: learning_rate *= lr_decay.
    pub fn decay_round(&mut self) {
        self.learning_rate *= self.lr_decay;
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<F>> {
        self.buffers.get(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamEntry;

    fn single_param(w: f64, g: f64) -> ParameterSet<f64> {
        let mut s = ParameterSet::new();
        s.insert(ParamEntry {
            name: "w".into(),
            value: Tensor::filled(&[1], w),
            grad: Some(Tensor::filled(&[1], g)),
            kind: ParamKind::Trainable,
        })
        .unwrap();
        s
    }

    #[test]
    fn vanilla_step() {
        let mut opt = OptimizerState::new(SgdHyper {
            learning_rate: 0.01,
            momentum: 0.0,
            weight_decay: 0.0,
            lr_decay: 1.0,
        });
        let mut p = single_param(1.0, 0.5);
        opt.step_params(&mut p);
        let w = p.get("w").unwrap().value.data()[0];
        assert!((w - 0.995).abs() < 1e-12);
        // gradient zeroed afterwards
        assert_eq!(p.get("w").unwrap().grad.as_ref().unwrap().data()[0], 0.0);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut opt = OptimizerState::new(SgdHyper {
            learning_rate: 0.1,
            momentum: 0.3,
            weight_decay: 0.0,
            lr_decay: 1.0,
        });
        let mut p = single_param(2.5, 0.0);
        opt.step_params(&mut p);
        opt.step_params(&mut p);
        assert_eq!(p.get("w").unwrap().value.data()[0], 2.5);
    }

    #[test]
    fn momentum_matches_hand_unrolled_recurrence() {
        // Scalar oracle: v0=0; v1 = g1 + wd*w0; w1 = w0 - lr*v1;
        // v2 = m*v1 + (g2 + wd*w1); w2 = w1 - lr*v2. Computed by hand here,
        // independent of the implementation.
        let (lr, m, wd) = (0.1, 0.5, 0.01);
        let (w0, g1, g2) = (1.0, 0.2, -0.3);
        let v1 = g1 + wd * w0;
        let w1 = w0 - lr * v1;
        let v2 = m * v1 + (g2 + wd * w1);
        let w2 = w1 - lr * v2;

        let mut opt = OptimizerState::new(SgdHyper {
            learning_rate: lr,
            momentum: m,
            weight_decay: wd,
            lr_decay: 1.0,
        });
        let mut p = single_param(w0, g1);
        opt.step_params(&mut p);
        assert!((p.get("w").unwrap().value.data()[0] - w1).abs() < 1e-15);
        p.get_mut("w").unwrap().grad.as_mut().unwrap().fill(g2);
        opt.step_params(&mut p);
        assert!((p.get("w").unwrap().value.data()[0] - w2).abs() < 1e-15);
    }

    #[test]
    fn lr_decays_strictly() {
        let mut opt = OptimizerState::<f32>::new(SgdHyper::default());
        let mut prev = opt.learning_rate;
        for _ in 0..5 {
            opt.decay_round();
            assert!(opt.learning_rate < prev);
            prev = opt.learning_rate;
        }
        assert!((opt.learning_rate - 0.01 * 0.998f64.powi(5)).abs() < 1e-15);
    }

    #[test]
    fn empty_set_is_a_noop() {
        let mut opt = OptimizerState::<f32>::new(SgdHyper::default());
        let mut p = ParameterSet::new();
        opt.step_params(&mut p);
    }
}
