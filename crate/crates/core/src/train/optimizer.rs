use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients held in `store`.
    ///
    /// Decayed parameters are first shrunk by `1 - lr * weight_decay`; the
    /// decay never enters the moment estimates.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let shrink = if p.decay { 1.0 - lr * self.weight_decay } else { 1.0 };
            let g = p.grad.data();
            let m = m.data_mut();
            let v = v.data_mut();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w = *w * shrink - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.scale_in_place(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row_vector(&[1.0, -2.0]), true);
        s.add("b", Tensor::row_vector(&[3.0]), false);
        s
    }

    #[test]
    fn zero_gradient_step_is_pure_decay() {
        let mut s = store();
        let mut opt = AdamW::new(&s, 0.01);
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.0 * (1.0 - 0.001), -2.0 * (1.0 - 0.001)]);
        assert_eq!(s.iter().nth(1).unwrap().value.data(), &[3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store();
        for p in s.iter_mut() {
            p.grad.data_mut().fill(0.5);
        }
        let mut opt = AdamW::new(&s, 0.0);
        opt.step(&mut s, 0.01).unwrap();
        let b = s.iter().nth(1).unwrap().value.item();
        assert!((b - (3.0 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut s = store();
        for p in s.iter_mut() {
            p.grad.data_mut().fill(2.0);
        }
        let pre = clip_grad_norm(&mut s, 1.0);
        assert!((pre - 12f64.sqrt()).abs() < 1e-12);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
        let mut t = store();
        let pre = clip_grad_norm(&mut t, 1.0);
        assert_eq!(pre, 0.0);
    }
}
