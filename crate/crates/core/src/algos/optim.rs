use crate::error::{Error, Result};
use crate::nets::SharedParams;
use crate::numcore::Tensor;

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.iter_mut() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &SharedParams, lr: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: &mut SharedParams, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape("adam", format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let (b1, b2) = (self.beta1, self.beta2);
            self.m[i] = self.m[i].zip_map(g, |m, g| b1 * m + (1.0 - b1) * g);
            self.v[i] = self.v[i].zip_map(g, |v, g| b2 * v + (1.0 - b2) * g * g);
            let step = self.m[i].zip_map(&self.v[i], |m, v| self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps));
            let updated = params.values()[i].zip_map(&step, |p, s| p - s);
            params.set(i, updated)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::full(1, 2, 3.0), Tensor::full(1, 2, 4.0)];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 50f64.sqrt()).abs() < 1e-12);
        let after = g.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-6);
        let mut small = vec![Tensor::full(1, 1, 0.5)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].item(), 0.5);
    }
}
