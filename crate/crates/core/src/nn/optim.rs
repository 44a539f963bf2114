use crate::scalar::{fl, Scalar};
use crate::tensor::Tensor;

use super::params::ParamSet;

/// Adam with optional global gradient-norm clipping.
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub clip_norm: Option<F>,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: i32,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ParamSet<F>, lr: F, clip_norm: Option<F>) -> Self {
        let m = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        let v = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Adam {
            lr,
            beta1: fl(0.9),
            beta2: fl(0.999),
            eps: fl(1e-8),
            clip_norm,
            m,
            v,
            t: 0,
        }
    }

    /// One update from gradients aligned with the parameter set layout.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &mut [Tensor<F>]) {
        assert_eq!(grads.len(), params.len(), "grad/param layout");
        if let Some(max_norm) = self.clip_norm {
            let total: F = grads.iter().map(|g| g.frob_norm_sq()).sum::<F>().sqrt();
            if total > max_norm {
                let k = max_norm / total;
                for g in grads.iter_mut() {
                    for x in g.data_mut() {
                        *x = *x * k;
                    }
                }
            }
        }
        self.t += 1;
        let b1c = F::one() - self.beta1.powi(self.t);
        let b2c = F::one() - self.beta2.powi(self.t);
        for i in 0..grads.len() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((mv, vv), &gv) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (F::one() - self.beta1) * gv;
                *vv = self.beta2 * *vv + (F::one() - self.beta2) * gv * gv;
            }
        }
        for i in 0..grads.len() {
            let m = &self.m[i];
            let v = &self.v[i];
            let p = crate::nn::ParamId::from_index(i);
            let t = params.tensor_mut(p);
            for ((x, &mv), &vv) in t.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mv / b1c;
                let vhat = vv / b2c;
                *x = *x - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
