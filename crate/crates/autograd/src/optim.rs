use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || params.iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Rebuild from saved moments.
    pub fn from_state(config: AdamWConfig, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(TensorError::invalid("adamw", "first and second moments disagree in layout"));
        }
        Ok(Self { config, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Apply one update with learning rate `lr` given dense gradients
    /// aligned with `params`.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TensorError::shape("adamw", format!("{} gradients", params.len()), format!("{}", grads.len())));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr_t = T::lit(lr);
        let decay = T::lit(lr * c.weight_decay);
        let eps = T::lit(c.eps);
        for (id, g) in grads.iter().enumerate() {
            if g.shape() != params.get(id).shape() {
                return Err(TensorError::shape("adamw", format!("{:?}", params.get(id).shape()), format!("{:?}", g.shape())));
            }
            let p = params.get_mut(id).data_mut();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] - decay * p[i] - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 to `floor` at `total - 1`.
pub fn cosine_lr(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let progress = (step.min(total - 1)) as f64 / (total - 1) as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params() {
        let mut ps = ParamStore::<f64>::new();
        ps.add("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = ps.clone();
        let mut opt = AdamW::new(&ps, AdamWConfig { weight_decay: 0.1, ..Default::default() });
        let g = vec![Tensor::from_vec(&[3], vec![0.3, 0.1, -4.0]).unwrap()];
        opt.update(&mut ps, &g, 0.0).unwrap();
        assert_eq!(ps, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr * sign(g) up to eps
        let mut ps = ParamStore::<f64>::new();
        ps.add("w", Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let mut opt = AdamW::new(&ps, AdamWConfig::default());
        let g = vec![Tensor::from_vec(&[2], vec![2.0, -0.5]).unwrap()];
        opt.update(&mut ps, &g, 0.1).unwrap();
        let w = ps.get(0).data();
        assert!((w[0] + 0.1).abs() < 1e-6 && (w[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn cosine_endpoints_and_monotone() {
        let total = 150;
        assert!((cosine_lr(1e-3, 1e-5, 0, total) - 1e-3).abs() < 1e-15);
        assert!((cosine_lr(1e-3, 1e-5, total - 1, total) - 1e-5).abs() < 1e-15);
        let lrs: Vec<f64> = (0..total).map(|s| cosine_lr(1e-3, 1e-5, s, total)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
