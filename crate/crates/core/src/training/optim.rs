use crate::numerics::{ParamSet, Real, Tensor};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored in `params`.
    pub fn update(&mut self, params: &mut ParamSet<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = T::c(lr / c1);
        let c2_sqrt = T::c(c2.sqrt());
        let eps = T::c(self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let w = p.value.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..g.len() {
                md[i] = b1 * md[i] + (T::one() - b1) * g[i];
                vd[i] = b2 * vd[i] + (T::one() - b2) * g[i] * g[i];
                w[i] -= step_size * md[i] / (vd[i].sqrt() / c2_sqrt + eps);
            }
        }
    }
}

/// Linear warmup from 0 over `warmup` steps, then constant. `step` is
/// 1-based.
pub fn learning_rate(base: f64, warmup: u64, step: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * step as f64 / warmup as f64
    }
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut ParamSet<T>, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::c(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.scale_assign(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::from_rows(&[vec![1.0, -2.0]])).unwrap();
        ps.get_mut(crate::numerics::ParamId(0)).grad = Tensor::from_rows(&[vec![0.5, -3.0]]);
        let mut opt = Adam::new(&ps);
        opt.update(&mut ps, 0.1);
        let w = ps.value(crate::numerics::ParamId(0));
        // bias-corrected first step is lr · sign(g)
        assert!((w.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((w.get(0, 1) + 1.9).abs() < 1e-6);
    }

    #[test]
    fn warmup_and_clipping() {
        assert_eq!(learning_rate(1e-3, 10, 5), 5e-4);
        assert_eq!(learning_rate(1e-3, 10, 10), 1e-3);
        assert_eq!(learning_rate(1e-3, 0, 1), 1e-3);
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::from_rows(&[vec![0.0, 0.0]])).unwrap();
        ps.get_mut(crate::numerics::ParamId(0)).grad = Tensor::from_rows(&[vec![3.0, 4.0]]);
        assert_eq!(clip_grad_norm(&mut ps, 1.0), 5.0);
        assert!((ps.grad_norm() - 1.0).abs() < 1e-12);
    }
}
