use rand::Rng as _;
use rayon::prelude::*;
use rand_distr::StandardNormal;

use super::data::Context;
use super::model::{EpsNet, NoisePredictor};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng;

/// A reverse kernel `p(x_{t-1} | x_t, c) = N(mean(x_t, t, c), sigma_t^2 I)`.
pub trait GaussianPolicy: Sync {
    fn data_dim(&self) -> usize;
    fn steps(&self) -> usize;
    fn sigma(&self, t: usize) -> f64;
    /// Means for rows `xs` (`n x data_dim`) that all sit at step `t`.
    fn means(&self, xs: &[f64], t: usize, classes: &[usize]) -> Result<Vec<f64>>;
}

/// A Gaussian policy whose mean is differentiable in a flat parameter vector.
pub trait DifferentiablePolicy: GaussianPolicy {
    fn param_count(&self) -> usize;

    /// Gradient of `Σ_rows <g_row, mean(row)>` where `g = mean_grad(means)`.
    ///
    /// The closure sees the means computed on the same forward pass, so callers
    /// can form log-likelihood gradients without a second evaluation.
    fn mean_vjp(
        &self,
        xs: &[f64],
        t: usize,
        classes: &[usize],
        mean_grad: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>>;
}

/// `log N(x; mu, sigma^2 I)`.
pub fn gaussian_logprob(x: &[f64], mu: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::usage(format!("sigma must be positive, got {sigma}")));
    }
    if x.len() != mu.len() {
        return Err(Error::shape("gaussian_logprob", x.len(), mu.len()));
    }
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    let var = sigma * sigma;
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var))
}

/// `(x_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t)`, row-wise.
pub fn reverse_mean_from_eps(xs: &[f64], eps: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    if ab >= 1.0 {
        return Err(Error::Schedule(format!("alpha_bar at step {t} equals 1")));
    }
    let coef = sched.beta(t) / (1.0 - ab).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    Ok(xs.iter().zip(eps).map(|(x, e)| (x - coef * e) * inv).collect())
}

/// Reverse mean for a single point.
pub fn reverse_mean<P: NoisePredictor + ?Sized>(
    predictor: &P,
    x_t: &[f64],
    t: usize,
    ctx: &Context,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    let eps = predictor.predict(x_t, &[t], &[ctx.class_id])?;
    reverse_mean_from_eps(x_t, &eps, t, sched)
}

/// The DDPM reverse kernel of a noise predictor under a schedule.
pub struct DiffusionPolicy<'a, P: ?Sized> {
    pub predictor: &'a P,
    pub sched: &'a NoiseSchedule,
}

impl<'a, P: NoisePredictor + ?Sized> DiffusionPolicy<'a, P> {
    pub fn new(predictor: &'a P, sched: &'a NoiseSchedule) -> Result<Self> {
        if let Some(t) = (1..=sched.steps()).find(|&t| sched.alpha_bar(t) >= 1.0) {
            return Err(Error::Schedule(format!("alpha_bar at step {t} equals 1")));
        }
        Ok(DiffusionPolicy { predictor, sched })
    }
}

impl<P: NoisePredictor + ?Sized> GaussianPolicy for DiffusionPolicy<'_, P> {
    fn data_dim(&self) -> usize {
        self.predictor.data_dim()
    }

    fn steps(&self) -> usize {
        self.sched.steps()
    }

    fn sigma(&self, t: usize) -> f64 {
        self.sched.sigma(t)
    }

    fn means(&self, xs: &[f64], t: usize, classes: &[usize]) -> Result<Vec<f64>> {
        let ts = vec![t; classes.len()];
        let eps = self.predictor.predict(xs, &ts, classes)?;
        reverse_mean_from_eps(xs, &eps, t, self.sched)
    }
}

impl DifferentiablePolicy for DiffusionPolicy<'_, EpsNet> {
    fn param_count(&self) -> usize {
        self.predictor.net.param_count()
    }

    fn mean_vjp(
        &self,
        xs: &[f64],
        t: usize,
        classes: &[usize],
        mean_grad: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        let ts = vec![t; classes.len()];
        let (_, tape) = self.predictor.predict_tape(xs, &ts, classes)?;
        let means = reverse_mean_from_eps(xs, tape.output(), t, self.sched)?;
        let g = mean_grad(&means)?;
        if g.len() != means.len() {
            return Err(Error::shape("mean gradient", means.len(), g.len()));
        }
        // d mean / d eps = -beta_t / (sqrt(alpha_t) sqrt(1 - alpha_bar_t))
        let scale = -self.sched.beta(t) / (self.sched.alpha(t).sqrt() * (1.0 - self.sched.alpha_bar(t)).sqrt());
        let eps_grad: Vec<f64> = g.iter().map(|v| v * scale).collect();
        let mut grads = vec![0.0; self.predictor.net.param_count()];
        self.predictor.net.backward_tape(&tape, &eps_grad, &mut grads)?;
        Ok(grads)
    }
}

/// One reverse rollout `x_T -> x_0` with the behaviour log-likelihoods of each step.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub ctx: Context,
    pub dim: usize,
    pub steps: usize,
    /// Row `k` holds `x_{steps - k}`.
    pub latents: Vec<f64>,
    /// `logp_old[t - 1] = log p_old(x_{t-1} | x_t, c)`.
    pub logp_old: Vec<f64>,
    pub reward: Option<f64>,
    /// `advantages[t - 1]` belongs to the transition out of `x_t`.
    pub advantages: Option<Vec<f64>>,
    pub seed: u64,
    pub stream: u64,
}

impl Trajectory {
    /// The latent at step `t` (`t = 0` is the sample).
    pub fn x(&self, t: usize) -> &[f64] {
        let k = self.steps - t;
        &self.latents[k * self.dim..(k + 1) * self.dim]
    }

    pub fn x0(&self) -> &[f64] {
        self.x(0)
    }

    pub fn reward(&self) -> Result<f64> {
        self.reward.ok_or_else(|| Error::usage("trajectory reward has not been assigned"))
    }

    pub fn advantages(&self) -> Result<&[f64]> {
        self.advantages
            .as_deref()
            .ok_or_else(|| Error::usage("trajectory advantages have not been computed"))
    }
}

const CHUNK: usize = 32;

struct Rollout {
    finals: Vec<f64>,
    latents: Vec<Vec<f64>>,
    logps: Vec<Vec<f64>>,
}

/// Runs the reverse chain for one chunk of items from `start_t` to 0.
/// Item `i` draws from stream `first_stream + i`.
fn rollout_chunk<P: GaussianPolicy + ?Sized>(
    policy: &P,
    classes: &[usize],
    start: Option<(&[f64], usize)>,
    seed: u64,
    first_stream: u64,
    record: bool,
) -> Result<Rollout> {
    let d = policy.data_dim();
    let n = classes.len();
    let mut rngs: Vec<_> = (0..n).map(|i| rng::stream(seed, first_stream + i as u64)).collect();
    let (mut x, start_t) = match start {
        Some((xs, t)) => (xs.to_vec(), t),
        None => {
            let mut x = vec![0.0; n * d];
            for (row, r) in x.chunks_exact_mut(d).zip(rngs.iter_mut()) {
                row.iter_mut().for_each(|v| *v = r.sample(StandardNormal));
            }
            (x, policy.steps())
        }
    };
    let mut latents = vec![Vec::new(); if record { n } else { 0 }];
    let mut logps = vec![Vec::new(); if record { n } else { 0 }];
    if record {
        for (i, l) in latents.iter_mut().enumerate() {
            l.reserve((start_t + 1) * d);
            l.extend_from_slice(&x[i * d..(i + 1) * d]);
            logps[i] = vec![0.0; start_t];
        }
    }
    for t in (1..=start_t).rev() {
        let mu = policy.means(&x, t, classes)?;
        let sigma = policy.sigma(t);
        for i in 0..n {
            let row = &mut x[i * d..(i + 1) * d];
            for (v, m) in row.iter_mut().zip(&mu[i * d..(i + 1) * d]) {
                let z: f64 = rngs[i].sample(StandardNormal);
                *v = m + sigma * z;
            }
            if record {
                logps[i][t - 1] = gaussian_logprob(row, &mu[i * d..(i + 1) * d], sigma)?;
                latents[i].extend_from_slice(row);
            }
        }
    }
    Ok(Rollout {
        finals: x,
        latents,
        logps,
    })
}

/// Samples one trajectory per context; trajectory `i` uses stream `first_stream + i`
/// under `seed`, so the result does not depend on the worker count.
pub fn sample_trajectories<P: GaussianPolicy + ?Sized>(
    policy: &P,
    ctxs: &[Context],
    seed: u64,
    first_stream: u64,
) -> Result<Vec<Trajectory>> {
    let classes: Vec<usize> = ctxs.iter().map(|c| c.class_id).collect();
    let chunks: Vec<Result<Vec<Trajectory>>> = classes
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, cls)| {
            let base = first_stream + (ci * CHUNK) as u64;
            let r = rollout_chunk(policy, cls, None, seed, base, true)?;
            Ok(r.latents
                .into_iter()
                .zip(r.logps)
                .enumerate()
                .map(|(i, (latents, logp_old))| Trajectory {
                    ctx: ctxs[ci * CHUNK + i],
                    dim: policy.data_dim(),
                    steps: policy.steps(),
                    latents,
                    logp_old,
                    reward: None,
                    advantages: None,
                    seed,
                    stream: base + i as u64,
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(ctxs.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Single trajectory on stream `stream`.
pub fn sample_trajectory<P: GaussianPolicy + ?Sized>(
    policy: &P,
    ctx: &Context,
    seed: u64,
    stream: u64,
) -> Result<Trajectory> {
    Ok(sample_trajectories(policy, std::slice::from_ref(ctx), seed, stream)?.remove(0))
}

/// Final samples `x_0` only (`n x data_dim`), same streams as [`sample_trajectories`].
pub fn sample_finals<P: GaussianPolicy + ?Sized>(
    policy: &P,
    classes: &[usize],
    seed: u64,
    first_stream: u64,
) -> Result<Vec<f64>> {
    continue_finals(policy, classes, None, seed, first_stream)
}

/// Continues the reverse chain from states `xs` at step `t` down to `x_0`.
pub fn rollout_from<P: GaussianPolicy + ?Sized>(
    policy: &P,
    xs: &[f64],
    t: usize,
    classes: &[usize],
    seed: u64,
    first_stream: u64,
) -> Result<Vec<f64>> {
    if t > policy.steps() {
        return Err(Error::usage(format!("step {t} outside 0..={}", policy.steps())));
    }
    if xs.len() != classes.len() * policy.data_dim() {
        return Err(Error::shape("rollout start states", classes.len() * policy.data_dim(), xs.len()));
    }
    continue_finals(policy, classes, Some((xs, t)), seed, first_stream)
}

fn continue_finals<P: GaussianPolicy + ?Sized>(
    policy: &P,
    classes: &[usize],
    start: Option<(&[f64], usize)>,
    seed: u64,
    first_stream: u64,
) -> Result<Vec<f64>> {
    let d = policy.data_dim();
    let parts: Vec<Result<Vec<f64>>> = classes
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, cls)| {
            let s = start.map(|(xs, t)| (&xs[ci * CHUNK * d..(ci * CHUNK + cls.len()) * d], t));
            Ok(rollout_chunk(policy, cls, s, seed, first_stream + (ci * CHUNK) as u64, false)?.finals)
        })
        .collect();
    let mut out = Vec::with_capacity(classes.len() * d);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
