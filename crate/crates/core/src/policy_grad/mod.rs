//! Score-function gradient estimators for the reverse-diffusion policy.
//!
//! All estimators share one accumulation path: for each visited step `t`, the
//! per-row multiplier `m = w * A` scales `∇θ log p(x_{t-1} | x_t, c)`, and the
//! sum over trajectories and steps is divided by the number of trajectories.
//! Trajectories are processed in fixed chunks whose partial sums are reduced in
//! index order, so results do not depend on the worker count.

mod toy;
mod update;

pub use toy::LinearGaussianToy;
pub use update::{policy_update_epoch, EpochStats, UpdatePlan};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::critic::Baseline;
use crate::diffusion::{gaussian_logprob, DifferentiablePolicy, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::clip_global_norm;
use crate::rng::Rng;

const CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Ddpo,
    DdpoIs,
    Cgru,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Ddpo => "ddpo",
            Estimator::DdpoIs => "ddpo_is",
            Estimator::Cgru => "cgru",
        }
    }

    fn importance_weighted(self) -> bool {
        !matches!(self, Estimator::Ddpo)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub is_clip_low: f64,
    pub is_clip_high: f64,
    pub grad_max_norm: f64,
    pub normalize_advantages: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            is_clip_low: 0.8,
            is_clip_high: 1.2,
            grad_max_norm: 1.0,
            normalize_advantages: false,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.is_clip_low > 0.0 && self.is_clip_low <= 1.0 && self.is_clip_high >= 1.0) {
            return Err(Error::Config {
                key: "estimator.is_clip_low/is_clip_high".into(),
                reason: format!("need 0 < low <= 1 <= high, got ({}, {})", self.is_clip_low, self.is_clip_high),
            });
        }
        if !(self.grad_max_norm > 0.0) {
            return Err(Error::Config {
                key: "estimator.grad_max_norm".into(),
                reason: format!("must be positive, got {}", self.grad_max_norm),
            });
        }
        Ok(())
    }
}

/// A policy-gradient estimate. `raw` is the estimate before norm clipping and
/// `grad` after it.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub grad: Vec<f64>,
    pub raw: Vec<f64>,
    pub raw_norm: f64,
    pub estimator: Estimator,
    pub n_traj: usize,
    pub clip_count: usize,
}

/// `clamp(exp(logp_new - logp_old), low, high)` and whether the clamp was active.
pub fn importance_weight(logp_new: f64, logp_old: f64, cfg: &EstimatorConfig) -> (f64, bool) {
    let w = (logp_new - logp_old).exp();
    if w < cfg.is_clip_low {
        (cfg.is_clip_low, true)
    } else if w > cfg.is_clip_high {
        (cfg.is_clip_high, true)
    } else {
        (w, false)
    }
}

/// Sets `advantages[t-1] = reward - b(x_t, c, t)` for `t = 1..=T`.
pub fn compute_advantages<B: Baseline + ?Sized>(trajs: &mut [Trajectory], baseline: &B) -> Result<()> {
    let Some(first) = trajs.first() else {
        return Ok(());
    };
    let (steps, dim) = (first.steps, first.dim);
    if trajs.iter().any(|t| t.steps != steps || t.dim != dim) {
        return Err(Error::usage("trajectories in one batch must share dimension and horizon"));
    }
    let rewards: Vec<f64> = trajs.iter().map(|t| t.reward()).collect::<Result<_>>()?;
    let classes: Vec<usize> = trajs.iter().map(|t| t.ctx.class_id).collect();
    let mut adv = vec![vec![0.0; steps]; trajs.len()];
    for t in 1..=steps {
        let xs: Vec<f64> = trajs.iter().flat_map(|tr| tr.x(t).iter().copied()).collect();
        let v = baseline.values(&xs, t, &classes)?;
        for i in 0..trajs.len() {
            adv[i][t - 1] = rewards[i] - v[i];
        }
    }
    for (tr, a) in trajs.iter_mut().zip(adv) {
        tr.advantages = Some(a);
    }
    Ok(())
}

/// A uniformly shuffled visiting order over `T..=1`.
pub fn shuffled_steps(steps: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (1..=steps).rev().collect();
    order.shuffle(rng);
    order
}

/// Per-trajectory, per-step multipliers `A[i][t-1]` before importance weighting.
pub(crate) fn multipliers(trajs: &[Trajectory], estimator: Estimator, cfg: &EstimatorConfig) -> Result<Vec<Vec<f64>>> {
    let mut m: Vec<Vec<f64>> = trajs
        .iter()
        .map(|tr| match estimator {
            Estimator::Ddpo | Estimator::DdpoIs => Ok(vec![tr.reward()?; tr.steps]),
            Estimator::Cgru => {
                let a = tr.advantages()?;
                if a.len() != tr.steps {
                    return Err(Error::shape("advantages", tr.steps, a.len()));
                }
                Ok(a.to_vec())
            }
        })
        .collect::<Result<_>>()?;
    if cfg.normalize_advantages {
        let n = m.iter().map(Vec::len).sum::<usize>() as f64;
        let mean = m.iter().flatten().sum::<f64>() / n;
        let var = m.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt() + 1e-8;
        m.iter_mut().flatten().for_each(|v| *v = (*v - mean) / sd);
    }
    Ok(m)
}

#[derive(Clone, Debug, Default)]
pub(crate) struct Accumulated {
    pub grad: Vec<f64>,
    pub clips: usize,
    pub weights: usize,
    /// `Σ w * A` over visited (trajectory, step) pairs.
    pub weighted: f64,
}

impl Accumulated {
    fn merge(&mut self, other: Accumulated) {
        if self.grad.is_empty() {
            self.grad = other.grad;
        } else {
            self.grad.iter_mut().zip(&other.grad).for_each(|(a, b)| *a += b);
        }
        self.clips += other.clips;
        self.weights += other.weights;
        self.weighted += other.weighted;
    }
}

fn check_batch<P: DifferentiablePolicy + ?Sized>(policy: &P, trajs: &[Trajectory]) -> Result<()> {
    if trajs.is_empty() {
        return Err(Error::usage("gradient estimate needs at least one trajectory"));
    }
    for tr in trajs {
        if tr.steps != policy.steps() || tr.dim != policy.data_dim() {
            return Err(Error::usage(format!(
                "trajectory shape (T={}, d={}) does not match the policy (T={}, d={})",
                tr.steps,
                tr.dim,
                policy.steps(),
                policy.data_dim()
            )));
        }
        if tr.logp_old.len() != tr.steps {
            return Err(Error::shape("behaviour log-likelihoods", tr.steps, tr.logp_old.len()));
        }
    }
    Ok(())
}

/// `Σ_i Σ_{t in steps} m[i][t-1] * w_{i,t} * ∇θ log p(x_{t-1} | x_t, c_i)`,
/// visiting steps in the given order.
pub(crate) fn accumulate<P: DifferentiablePolicy + ?Sized>(
    policy: &P,
    trajs: &[Trajectory],
    mult: &[Vec<f64>],
    steps: &[usize],
    weighted: bool,
    cfg: &EstimatorConfig,
) -> Result<Accumulated> {
    let d = policy.data_dim();
    let parts: Vec<Result<Accumulated>> = trajs
        .par_chunks(CHUNK)
        .zip(mult.par_chunks(CHUNK))
        .map(|(chunk, m)| {
            let classes: Vec<usize> = chunk.iter().map(|t| t.ctx.class_id).collect();
            let mut acc = Accumulated {
                grad: vec![0.0; policy.param_count()],
                ..Default::default()
            };
            for &t in steps {
                if t == 0 || t > policy.steps() {
                    return Err(Error::usage(format!("step {t} outside 1..={}", policy.steps())));
                }
                let xs: Vec<f64> = chunk.iter().flat_map(|tr| tr.x(t).iter().copied()).collect();
                let var = policy.sigma(t) * policy.sigma(t);
                let (mut clips, mut wsum) = (0, 0.0);
                let g = policy.mean_vjp(&xs, t, &classes, &mut |mu: &[f64]| {
                    let mut out = vec![0.0; mu.len()];
                    for (i, tr) in chunk.iter().enumerate() {
                        let next = tr.x(t - 1);
                        let mu_i = &mu[i * d..(i + 1) * d];
                        let w = if weighted {
                            let lp = gaussian_logprob(next, mu_i, policy.sigma(t))?;
                            let (w, clipped) = importance_weight(lp, tr.logp_old[t - 1], cfg);
                            clips += clipped as usize;
                            w
                        } else {
                            1.0
                        };
                        let a = w * m[i][t - 1];
                        wsum += a;
                        for k in 0..d {
                            out[i * d + k] = a * (next[k] - mu_i[k]) / var;
                        }
                    }
                    Ok(out)
                })?;
                acc.grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                acc.clips += clips;
                acc.weights += if weighted { chunk.len() } else { 0 };
                acc.weighted += wsum;
            }
            Ok(acc)
        })
        .collect();
    let mut total = Accumulated::default();
    for p in parts {
        total.merge(p?);
    }
    Ok(total)
}

fn finish(acc: Accumulated, n: usize, estimator: Estimator, cfg: &EstimatorConfig) -> Result<GradientEstimate> {
    let raw: Vec<f64> = acc.grad.iter().map(|g| g / n as f64).collect();
    if raw.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("{} gradient", estimator.name())));
    }
    let mut grad = raw.clone();
    let raw_norm = clip_global_norm(&mut grad, cfg.grad_max_norm);
    Ok(GradientEstimate {
        grad,
        raw,
        raw_norm,
        estimator,
        n_traj: n,
        clip_count: acc.clips,
    })
}

fn descending(steps: usize) -> Vec<usize> {
    (1..=steps).rev().collect()
}

/// Terminal-reward score-function estimate, on-policy (no importance weights).
pub fn ddpo_gradient<P: DifferentiablePolicy + ?Sized>(
    policy: &P,
    trajs: &[Trajectory],
    cfg: &EstimatorConfig,
) -> Result<GradientEstimate> {
    estimate(policy, trajs, Estimator::Ddpo, cfg, &descending(policy.steps()))
}

/// Terminal-reward estimate with clamped importance weights against `logp_old`.
pub fn ddpo_is_gradient<P: DifferentiablePolicy + ?Sized>(
    policy: &P,
    trajs: &[Trajectory],
    cfg: &EstimatorConfig,
) -> Result<GradientEstimate> {
    estimate(policy, trajs, Estimator::DdpoIs, cfg, &descending(policy.steps()))
}

/// Advantage-weighted estimate with clamped importance weights; steps are
/// visited in `order` (a permutation of `1..=T`).
pub fn cgru_gradient<P: DifferentiablePolicy + ?Sized>(
    policy: &P,
    trajs: &[Trajectory],
    cfg: &EstimatorConfig,
    order: &[usize],
) -> Result<GradientEstimate> {
    estimate(policy, trajs, Estimator::Cgru, cfg, order)
}

/// Any estimator over an explicit step order.
pub fn estimate<P: DifferentiablePolicy + ?Sized>(
    policy: &P,
    trajs: &[Trajectory],
    estimator: Estimator,
    cfg: &EstimatorConfig,
    order: &[usize],
) -> Result<GradientEstimate> {
    check_batch(policy, trajs)?;
    check_order(order, policy.steps())?;
    let mult = multipliers(trajs, estimator, cfg)?;
    let acc = accumulate(policy, trajs, &mult, order, estimator.importance_weighted(), cfg)?;
    finish(acc, trajs.len(), estimator, cfg)
}

pub(crate) fn check_order(order: &[usize], steps: usize) -> Result<()> {
    let mut seen = vec![false; steps + 1];
    for &t in order {
        if t == 0 || t > steps || std::mem::replace(&mut seen[t], true) {
            return Err(Error::usage(format!("step order must be a permutation of 1..={steps}")));
        }
    }
    if order.len() != steps {
        return Err(Error::usage(format!("step order must be a permutation of 1..={steps}")));
    }
    Ok(())
}

/// `(1/N) Σ_i Σ_t ∇θ log p(x_{t-1} | x_t, c_i) * b(x_t, c_i, t)`, unclipped.
pub fn baseline_term_estimate<P, B>(policy: &P, trajs: &[Trajectory], baseline: &B) -> Result<Vec<f64>>
where
    P: DifferentiablePolicy + ?Sized,
    B: Baseline + ?Sized,
{
    check_batch(policy, trajs)?;
    let classes: Vec<usize> = trajs.iter().map(|t| t.ctx.class_id).collect();
    let mut mult = vec![vec![0.0; policy.steps()]; trajs.len()];
    for t in 1..=policy.steps() {
        let xs: Vec<f64> = trajs.iter().flat_map(|tr| tr.x(t).iter().copied()).collect();
        for (m, v) in mult.iter_mut().zip(baseline.values(&xs, t, &classes)?) {
            m[t - 1] = v;
        }
    }
    let cfg = EstimatorConfig::default();
    let acc = accumulate(policy, trajs, &mult, &descending(policy.steps()), false, &cfg)?;
    Ok(acc.grad.iter().map(|g| g / trajs.len() as f64).collect())
}

/// One single-trajectory estimate per trajectory (unclipped), for standard
/// errors and per-sample variance.
pub fn per_trajectory_gradients<P: DifferentiablePolicy + ?Sized>(
    policy: &P,
    trajs: &[Trajectory],
    estimator: Estimator,
    cfg: &EstimatorConfig,
) -> Result<Vec<Vec<f64>>> {
    check_batch(policy, trajs)?;
    let mult = multipliers(trajs, estimator, cfg)?;
    let order = descending(policy.steps());
    trajs
        .par_iter()
        .zip(mult.par_iter())
        .map(|(tr, m)| {
            let acc = accumulate(
                policy,
                std::slice::from_ref(tr),
                std::slice::from_ref(m),
                &order,
                estimator.importance_weighted(),
                cfg,
            )?;
            Ok(acc.grad)
        })
        .collect()
}

/// Mean over coordinates of the unbiased per-coordinate sample variance.
pub fn sample_variance(vectors: &[&[f64]]) -> Result<f64> {
    if vectors.len() < 2 {
        return Err(Error::usage("variance needs at least two estimates"));
    }
    let p = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != p) {
        return Err(Error::shape("gradient estimates", p, v.len()));
    }
    if p == 0 {
        return Ok(0.0);
    }
    let n = vectors.len() as f64;
    let mut total = 0.0;
    for k in 0..p {
        let mean = vectors.iter().map(|v| v[k]).sum::<f64>() / n;
        total += vectors.iter().map(|v| (v[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    }
    Ok(total / p as f64)
}

/// [`sample_variance`] of the unclipped estimates.
pub fn gradient_variance(estimates: &[GradientEstimate]) -> Result<f64> {
    let v: Vec<&[f64]> = estimates.iter().map(|e| e.raw.as_slice()).collect();
    sample_variance(&v)
}

/// Per-trajectory estimator variance at each constant baseline, all evaluated on
/// the same rewarded trajectories.
pub fn optimal_baseline_probe<P: DifferentiablePolicy + ?Sized>(
    policy: &P,
    trajs: &[Trajectory],
    baselines: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let cfg = EstimatorConfig::default();
    let scores = per_trajectory_gradients(policy, trajs, Estimator::Ddpo, &cfg)?;
    // the estimate is linear in the multiplier: g(r - b) = g(r) - b g(1)
    let mut unit = trajs.to_vec();
    for tr in &mut unit {
        tr.reward = Some(1.0);
    }
    let basis = per_trajectory_gradients(policy, &unit, Estimator::Ddpo, &cfg)?;
    baselines
        .iter()
        .map(|&b| {
            let est: Vec<Vec<f64>> = scores
                .iter()
                .zip(&basis)
                .map(|(s, u)| s.iter().zip(u).map(|(s, u)| s - b * u).collect())
                .collect();
            let refs: Vec<&[f64]> = est.iter().map(Vec::as_slice).collect();
            Ok((b, sample_variance(&refs)?))
        })
        .collect()
}
