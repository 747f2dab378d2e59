use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Adam with decoupled weight decay. Moments are kept in `f64`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies `p ← p − lr·wd·p`, then the bias-corrected Adam update.
    /// Nothing is modified if any gradient is non-finite.
    pub fn update<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::dim("adamw", &[store.len()], &[grads.len()]));
        }
        for (i, (g, p)) in grads.iter().zip(store.tensors()).enumerate() {
            if g.shape() != p.shape() {
                return Err(Error::dim("adamw", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    name: store.name(crate::params::ParamId(i)).to_string(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (i, (p, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let g = gv.f64();
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                let x = pv.f64() * decay - lr * mhat / (vhat.sqrt() + self.eps);
                *pv = T::of(x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::vector(vals));
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store(vec![1.0, -2.0]);
        let mut opt = AdamW::new(&s, 0.0);
        opt.update(&mut s, &[Tensor::vector(vec![0.0, 0.0])], 0.1).unwrap();
        assert_eq!(s.tensors()[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(vec![1.0, 5.0]);
        let mut opt = AdamW::new(&s, 0.0);
        opt.update(&mut s, &[Tensor::vector(vec![1.0, 1.0])], 0.1).unwrap();
        for (after, before) in s.tensors()[0].data().iter().zip([1.0, 5.0]) {
            assert!((before - after - 0.1).abs() < 1e-7);
        }
    }

    #[test]
    fn decoupled_decay() {
        let mut s = store(vec![2.0]);
        let mut opt = AdamW::new(&s, 1e-5);
        opt.update(&mut s, &[Tensor::vector(vec![0.0])], 0.5).unwrap();
        assert_eq!(s.tensors()[0].data(), &[2.0 * (1.0 - 0.5 * 1e-5)]);
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut s = store(vec![1.0]);
        let mut opt = AdamW::new(&s, 0.0);
        let err = opt.update(&mut s, &[Tensor::vector(vec![f64::NAN])], 0.1).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
        assert_eq!(s.tensors()[0].data(), &[1.0]);
        assert_eq!(opt.step, 0);
    }
}
