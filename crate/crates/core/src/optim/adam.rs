use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Adam with bias correction. Moments are kept in `f64` regardless of the
/// parameter type.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update over `params`, reading each tensor's gradient slot.
    /// Gradients are left in place; the caller resets them.
    ///
    /// The parameter list must be the same (same order and shapes) on every
    /// call.
    pub fn step<'a, T: Scalar + 'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
        lr: f64,
    ) -> Result<()> {
        let params: Vec<(&str, &mut Tensor<T>)> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::Contract(format!("parameter {name} has no gradient")));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || params.iter().zip(&self.m).any(|((_, t), m)| t.numel() != m.len()) {
            return Err(Error::Contract("parameter set changed between Adam steps".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((_, p), (m, v)) in params.into_iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g: Vec<f64> = p.grad().expect("checked above").iter().map(|x| x.as_f64()).collect();
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                *x = T::of(x.as_f64() - update);
            }
        }
        Ok(())
    }
}
