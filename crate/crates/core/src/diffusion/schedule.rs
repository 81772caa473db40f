use crate::error::{Error, Result};

/// Forward-process variances and derived products, indexed by step `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced `beta_start..=beta_end` over `steps` steps, reverse
    /// standard deviation `sigma_t = sqrt(beta_t)`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::usage("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::usage(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::usage("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::usage(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> usize {
        assert!(t >= 1 && t <= self.steps(), "step {t} outside 1..={}", self.steps());
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[self.idx(t)]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[self.idx(t)]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::usage(format!("step {t} outside 1..={}", self.steps())))
        } else {
            Ok(())
        }
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if x0.len() != eps.len() {
        return Err(Error::shape("q_sample noise", x0.len(), eps.len()));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_and_two_step_products() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn fifty_step_linear_schedule() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas().len(), 50);
        assert!((s.beta(1) - 1e-4).abs() < 1e-18 && (s.beta(50) - 0.02).abs() < 1e-15);
        for w in s.alpha_bars().windows(2) {
            assert!(w[1] < w[0]);
        }
        // independent oracle: product written as exp of summed logs over freshly spaced betas
        let oracle = (0..50)
            .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 49.0))
            .map(f64::ln)
            .sum::<f64>()
            .exp();
        assert!((s.alpha_bar(50) - oracle).abs() < 1e-12);
        for t in 1..=50 {
            assert!(s.alpha_bar(t) <= s.alpha(t));
            assert!(s.sigma(t) > 0.0);
            assert!((s.sigma(t) - s.beta(t).sqrt()).abs() == 0.0);
        }
    }

    #[test]
    fn out_of_range_betas_rejected() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_cases() {
        let s = NoiseSchedule::from_betas(vec![0.25]).unwrap();
        assert_eq!(q_sample(&[0.0, 0.0], 1, &[1.0, 0.0], &s).unwrap(), vec![0.5, 0.0]);
        let s = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        let x = q_sample(&[2.0, -1.0], 4, &[0.0, 0.0], &s).unwrap();
        let a = s.alpha_bar(4).sqrt();
        assert_eq!(x, vec![2.0 * a, -a]);
        assert!(q_sample(&[0.0], 0, &[0.0], &s).is_err());
        assert!(q_sample(&[0.0], 11, &[0.0], &s).is_err());
    }
}
