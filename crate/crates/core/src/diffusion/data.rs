use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Conditioning label: one of `classes` prompt classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Context {
    pub class_id: usize,
    pub classes: usize,
}

impl Context {
    pub fn new(class_id: usize, classes: usize) -> Result<Self> {
        if class_id >= classes {
            return Err(Error::usage(format!("class {class_id} outside 0..{classes}")));
        }
        Ok(Context { class_id, classes })
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.classes];
        v[self.class_id] = 1.0;
        v
    }
}

/// Terminal-reward MDP view of the sampler. Reward arrives only at `x_0`, so
/// the discount never enters any estimator and is pinned to one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionMdpConfig {
    pub data_dim: usize,
    pub classes: usize,
    pub discount: f64,
}

impl DiffusionMdpConfig {
    pub fn new(data_dim: usize, classes: usize) -> Self {
        DiffusionMdpConfig {
            data_dim,
            classes,
            discount: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.discount != 1.0 {
            return Err(Error::usage("terminal-reward MDP requires discount 1"));
        }
        if self.data_dim == 0 || self.classes == 0 {
            return Err(Error::usage("data dimension and class count must be positive"));
        }
        Ok(())
    }
}

/// Isotropic Gaussian modes equally spaced on a circle in the plane.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MixtureSpec {
    pub classes: usize,
    pub radius: f64,
    pub stddev: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec {
            classes: 8,
            radius: 4.0,
            stddev: 0.3,
        }
    }
}

impl MixtureSpec {
    pub fn center(&self, class_id: usize) -> [f64; 2] {
        let angle = 2.0 * std::f64::consts::PI * class_id as f64 / self.classes as f64;
        [self.radius * angle.cos(), self.radius * angle.sin()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPoint {
    pub x: Vec<f64>,
    pub ctx: Context,
}

/// Draws `n` labelled points with a uniform class mix.
pub fn sample_dataset(spec: &MixtureSpec, n: usize, rng: &mut Rng) -> Result<Vec<LabeledPoint>> {
    if n == 0 {
        return Err(Error::usage("dataset size must be at least 1"));
    }
    if spec.classes < 1 || !(spec.stddev > 0.0) {
        return Err(Error::usage("mixture needs at least one class and positive stddev"));
    }
    (0..n)
        .map(|_| {
            let k = rng.random_range(0..spec.classes);
            let c = spec.center(k);
            let x = c
                .iter()
                .map(|m| m + spec.stddev * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Ok(LabeledPoint {
                x,
                ctx: Context::new(k, spec.classes)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn one_hot_has_single_unit_entry() {
        let c = Context::new(3, 8).unwrap();
        let v = c.one_hot();
        assert_eq!(v.iter().filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(v[3], 1.0);
        assert!(Context::new(8, 8).is_err());
    }

    #[test]
    fn mdp_discount_is_pinned() {
        assert!(DiffusionMdpConfig::new(2, 8).validate().is_ok());
        let mut c = DiffusionMdpConfig::new(2, 8);
        c.discount = 0.99;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(sample_dataset(&MixtureSpec::default(), 0, &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn class_histogram_and_means() {
        let spec = MixtureSpec::default();
        let data = sample_dataset(&spec, 8000, &mut rng::stream(11, 0)).unwrap();
        let mut counts = [0usize; 8];
        let mut sums = [[0.0f64; 2]; 8];
        for p in &data {
            counts[p.ctx.class_id] += 1;
            sums[p.ctx.class_id][0] += p.x[0];
            sums[p.ctx.class_id][1] += p.x[1];
        }
        // multinomial: mean 1000, sd sqrt(8000 * 1/8 * 7/8)
        let sd = (8000.0 * 0.125 * 0.875f64).sqrt();
        for k in 0..8 {
            assert!((counts[k] as f64 - 1000.0).abs() < 3.0 * sd, "class {k}: {}", counts[k]);
            let c = spec.center(k);
            let n = counts[k] as f64;
            assert!((sums[k][0] / n - c[0]).abs() < 0.05);
            assert!((sums[k][1] / n - c[1]).abs() < 0.05);
        }
    }
}
