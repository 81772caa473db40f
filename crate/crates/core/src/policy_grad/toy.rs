use crate::diffusion::{DifferentiablePolicy, GaussianPolicy};
use crate::error::{Error, Result};

/// One-step, one-dimensional policy `x_0 ~ N(theta, sigma^2)` that ignores its
/// input state and context. With reward `r = x_0` the true gradient of the
/// expected reward with respect to `theta` is exactly 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearGaussianToy {
    pub theta: f64,
    pub sigma: f64,
}

impl LinearGaussianToy {
    pub fn new(theta: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !theta.is_finite() {
            return Err(Error::usage(format!("invalid toy policy (theta {theta}, sigma {sigma})")));
        }
        Ok(LinearGaussianToy { theta, sigma })
    }
}

impl GaussianPolicy for LinearGaussianToy {
    fn data_dim(&self) -> usize {
        1
    }

    fn steps(&self) -> usize {
        1
    }

    fn sigma(&self, _t: usize) -> f64 {
        self.sigma
    }

    fn means(&self, xs: &[f64], _t: usize, _classes: &[usize]) -> Result<Vec<f64>> {
        Ok(vec![self.theta; xs.len()])
    }
}

impl DifferentiablePolicy for LinearGaussianToy {
    fn param_count(&self) -> usize {
        1
    }

    fn mean_vjp(
        &self,
        xs: &[f64],
        t: usize,
        classes: &[usize],
        mean_grad: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        let g = mean_grad(&self.means(xs, t, classes)?)?;
        Ok(vec![g.iter().sum()])
    }
}
