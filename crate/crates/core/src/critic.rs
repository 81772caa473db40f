//! Per-timestep value network `V(x_t, c, t)`.
//!
//! The timestep reaches the network only through a sinusoidal embedding that
//! drives two FiLM sites. A "plain" critic has the same layers and parameter
//! count but receives a zero conditioning vector, so it cannot see `t`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    sample_trajectories, Context, DiffusionPolicy, GaussianPolicy, NoisePredictor, NoiseSchedule, Trajectory,
};
use crate::error::{Error, Result};
use crate::numerics::{embedding_table, Activation, AdamState, Layer, Network, Tensor};
use crate::rewards::{assign_rewards, RewardModel};
use crate::rng::{self, Rng};

/// `gamma_scale ⊙ x + gamma_shift`.
pub fn film_modulate(features: &[f64], gamma_scale: &[f64], gamma_shift: &[f64]) -> Result<Vec<f64>> {
    if gamma_scale.len() != features.len() || gamma_shift.len() != features.len() {
        return Err(Error::shape(
            "film_modulate",
            features.len(),
            format!("{}/{}", gamma_scale.len(), gamma_shift.len()),
        ));
    }
    Ok(features
        .iter()
        .zip(gamma_scale)
        .zip(gamma_shift)
        .map(|((x, s), h)| s * x + h)
        .collect())
}

/// Regression target for the critic: one noisy state and its trajectory's terminal reward.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticSample {
    pub x_t: Vec<f64>,
    pub ctx: Context,
    pub t: usize,
    pub r_final: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticSpec {
    pub data_dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub spec: CriticSpec,
    pub net: Network,
    /// When false the conditioning vector is zero and `t` is invisible.
    pub timestep_aware: bool,
    embeds: Vec<Vec<f64>>,
}

impl Critic {
    pub fn layers(spec: &CriticSpec) -> Vec<Layer> {
        let (h, e) = (spec.hidden, spec.embed_dim);
        vec![
            Layer::Dense { inputs: spec.data_dim + spec.classes, outputs: h },
            Layer::Film { features: h, cond: e },
            Layer::Act(Activation::Tanh),
            Layer::Dense { inputs: h, outputs: h },
            Layer::Film { features: h, cond: e },
            Layer::Act(Activation::Tanh),
            Layer::Dense { inputs: h, outputs: 1 },
        ]
    }

    pub fn new(spec: CriticSpec, timestep_aware: bool, rng: &mut Rng) -> Result<Self> {
        Self::from_network(spec, Network::init(Self::layers(&spec), rng)?, timestep_aware)
    }

    pub fn zeros(spec: CriticSpec) -> Result<Self> {
        Self::from_network(spec, Network::zeros(Self::layers(&spec))?, true)
    }

    pub fn from_network(spec: CriticSpec, net: Network, timestep_aware: bool) -> Result<Self> {
        if net.layers() != Self::layers(&spec).as_slice() {
            return Err(Error::usage("network architecture does not match the critic shape"));
        }
        Ok(Critic {
            spec,
            net,
            timestep_aware,
            embeds: embedding_table(spec.embed_dim, spec.steps)?,
        })
    }

    fn inputs(&self, xs: &[f64], ts: &[usize], classes: &[usize]) -> Result<(Tensor, Tensor)> {
        let (d, k, e) = (self.spec.data_dim, self.spec.classes, self.spec.embed_dim);
        let n = ts.len();
        if xs.len() != n * d || classes.len() != n {
            return Err(Error::shape("critic batch", n * d, xs.len()));
        }
        let mut input = vec![0.0; n * (d + k)];
        let mut cond = vec![0.0; n * e];
        for i in 0..n {
            if ts[i] > self.spec.steps {
                return Err(Error::usage(format!("step {} outside 0..={}", ts[i], self.spec.steps)));
            }
            if classes[i] >= k {
                return Err(Error::usage(format!("class {} outside 0..{k}", classes[i])));
            }
            let row = &mut input[i * (d + k)..(i + 1) * (d + k)];
            row[..d].copy_from_slice(&xs[i * d..(i + 1) * d]);
            row[d + classes[i]] = 1.0;
            if self.timestep_aware {
                cond[i * e..(i + 1) * e].copy_from_slice(&self.embeds[ts[i]]);
            }
        }
        Ok((
            Tensor::from_parts_unchecked(vec![n, d + k], input),
            Tensor::from_parts_unchecked(vec![n, e], cond),
        ))
    }

    /// Values for a batch of states.
    pub fn values(&self, xs: &[f64], ts: &[usize], classes: &[usize]) -> Result<Vec<f64>> {
        if ts.is_empty() {
            return Ok(Vec::new());
        }
        let (input, cond) = self.inputs(xs, ts, classes)?;
        Ok(self.net.forward(&input, Some(&cond))?.into_data())
    }

    /// Parameter gradient of `sum_i out_grad[i] * V_i`.
    pub fn values_vjp(&self, xs: &[f64], ts: &[usize], classes: &[usize], out_grad: &[f64]) -> Result<Vec<f64>> {
        if out_grad.len() != ts.len() {
            return Err(Error::shape("critic output gradient", ts.len(), out_grad.len()));
        }
        let (input, cond) = self.inputs(xs, ts, classes)?;
        let tape = self.net.forward_tape(&input, Some(&cond))?;
        let mut grads = vec![0.0; self.net.param_count()];
        self.net.backward_tape(&tape, out_grad, &mut grads)?;
        Ok(grads)
    }

    /// Mean squared error against `targets` and its parameter gradient.
    fn mse_grad(&self, xs: &[f64], ts: &[usize], classes: &[usize], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (input, cond) = self.inputs(xs, ts, classes)?;
        let tape = self.net.forward_tape(&input, Some(&cond))?;
        let n = targets.len() as f64;
        let mut loss = 0.0;
        let g: Vec<f64> = tape
            .output()
            .iter()
            .zip(targets)
            .map(|(v, r)| {
                loss += (v - r) * (v - r);
                2.0 * (v - r) / n
            })
            .collect();
        let mut grads = vec![0.0; self.net.param_count()];
        self.net.backward_tape(&tape, &g, &mut grads)?;
        Ok((loss / n, grads))
    }
}

/// `V(x_t, c, t)` for a single state.
pub fn critic_forward(critic: &Critic, x_t: &[f64], ctx: &Context, t: usize) -> Result<f64> {
    if t > critic.spec.steps {
        return Err(Error::usage(format!("step {t} outside 0..={}", critic.spec.steps)));
    }
    Ok(critic.values(x_t, &[t], &[ctx.class_id])?[0])
}

/// State-dependent baseline `b(x_t, c, t)` subtracted from terminal rewards.
pub trait Baseline: Sync {
    fn values(&self, xs: &[f64], t: usize, classes: &[usize]) -> Result<Vec<f64>>;
}

impl Baseline for Critic {
    fn values(&self, xs: &[f64], t: usize, classes: &[usize]) -> Result<Vec<f64>> {
        Critic::values(self, xs, &vec![t; classes.len()], classes)
    }
}

/// The same value for every state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantBaseline(pub f64);

impl Baseline for ConstantBaseline {
    fn values(&self, _xs: &[f64], _t: usize, classes: &[usize]) -> Result<Vec<f64>> {
        Ok(vec![self.0; classes.len()])
    }
}

/// Samples `n_traj` trajectories (contexts cycle through `prompts`), scores
/// them and stores every pre-action state `x_t`, `t = 1..=T`, with the
/// trajectory's terminal reward. The buffer is returned shuffled.
pub fn build_critic_buffer<P: NoisePredictor + ?Sized>(
    predictor: &P,
    prompts: &[Context],
    reward: &RewardModel<'_>,
    sched: &NoiseSchedule,
    seed: u64,
    n_traj: usize,
) -> Result<Vec<CriticSample>> {
    if n_traj == 0 {
        return Err(Error::usage("critic buffer needs at least one trajectory"));
    }
    if prompts.is_empty() {
        return Err(Error::usage("critic buffer needs at least one prompt"));
    }
    let policy = DiffusionPolicy::new(predictor, sched)?;
    let ctxs: Vec<Context> = (0..n_traj).map(|i| prompts[i % prompts.len()]).collect();
    let mut trajs = sample_trajectories(&policy, &ctxs, rng::derive(seed, "buffer-sampling"), 0)?;
    assign_rewards(&mut trajs, reward)?;
    let mut buf = buffer_from_trajectories(&trajs)?;
    buf.shuffle(&mut rng::stream(rng::derive(seed, "buffer-shuffle"), 0));
    Ok(buf)
}

/// Unshuffled samples, trajectory-major with `t` descending.
pub fn buffer_from_trajectories(trajs: &[Trajectory]) -> Result<Vec<CriticSample>> {
    let mut buf = Vec::with_capacity(trajs.iter().map(|t| t.steps).sum());
    for tr in trajs {
        let r = tr.reward()?;
        for t in (1..=tr.steps).rev() {
            buf.push(CriticSample {
                x_t: tr.x(t).to_vec(),
                ctx: tr.ctx,
                t,
                r_final: r,
            });
        }
    }
    Ok(buf)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for CriticTrainConfig {
    fn default() -> Self {
        CriticTrainConfig {
            epochs: 20,
            batch_size: 128,
            lr: 1e-3,
        }
    }
}

fn canonical_order(buffer: &[CriticSample]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..buffer.len()).collect();
    let key = |s: &CriticSample| {
        (
            s.t,
            s.ctx.class_id,
            s.x_t.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            s.r_final.to_bits(),
        )
    };
    idx.sort_by_cached_key(|&i| key(&buffer[i]));
    idx
}

/// Minimises `mean (V(x_t, c, t) - r_final)^2` with Adam over reshuffled
/// minibatches; returns the mean loss of each epoch.
///
/// The buffer is put into a canonical order before the seeded shuffles, so the
/// result does not depend on the order the samples arrive in.
pub fn critic_train(
    critic: &mut Critic,
    buffer: &[CriticSample],
    cfg: &CriticTrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if buffer.is_empty() {
        return Err(Error::usage("critic training needs a non-empty buffer"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::usage("batch size must be positive"));
    }
    let d = critic.spec.data_dim;
    let mut opt = AdamState::new(critic.net.param_count(), cfg.lr);
    let mut order = canonical_order(buffer);
    let mut history = Vec::with_capacity(cfg.epochs);
    let (mut xs, mut ts, mut cs, mut rs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            xs.clear();
            ts.clear();
            cs.clear();
            rs.clear();
            for &i in chunk {
                let s = &buffer[i];
                if s.x_t.len() != d {
                    return Err(Error::shape("critic sample", d, s.x_t.len()));
                }
                xs.extend_from_slice(&s.x_t);
                ts.push(s.t);
                cs.push(s.ctx.class_id);
                rs.push(s.r_final);
            }
            let (loss, grads) = critic.mse_grad(&xs, &ts, &cs, &rs)?;
            opt.update(critic.net.params_mut(), &grads)?;
            total += loss * chunk.len() as f64;
        }
        history.push(total / buffer.len() as f64);
    }
    Ok(history)
}

/// Mean squared error of the critic over a set of samples.
pub fn critic_mse(critic: &Critic, samples: &[CriticSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::usage("no samples to evaluate"));
    }
    let xs: Vec<f64> = samples.iter().flat_map(|s| s.x_t.iter().copied()).collect();
    let ts: Vec<usize> = samples.iter().map(|s| s.t).collect();
    let cs: Vec<usize> = samples.iter().map(|s| s.ctx.class_id).collect();
    let v = critic.values(&xs, &ts, &cs)?;
    Ok(v.iter().zip(samples).map(|(v, s)| (v - s.r_final).powi(2)).sum::<f64>() / samples.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    pub train: CriticTrainConfig,
    /// Fraction of the buffer held out for evaluation.
    pub holdout: f64,
}

/// Held-out MSE of a timestep-aware and a plain critic trained with identical
/// initial weights, minibatch schedule and budget.
pub fn ablation_compare(
    buffer: &[CriticSample],
    data_dim: usize,
    classes: usize,
    steps: usize,
    cfg: &AblationConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let first_t = buffer.first().map(|s| s.t);
    if buffer.iter().all(|s| Some(s.t) == first_t) {
        return Err(Error::usage("ablation needs samples from more than one timestep"));
    }
    if !(cfg.holdout > 0.0 && cfg.holdout < 1.0) {
        return Err(Error::usage("holdout fraction must lie in (0, 1)"));
    }
    let mut idx = canonical_order(buffer);
    idx.shuffle(&mut rng::stream(rng::derive(seed, "ablation-split"), 0));
    let n_held = ((buffer.len() as f64 * cfg.holdout).round() as usize).clamp(1, buffer.len() - 1);
    let held: Vec<CriticSample> = idx[..n_held].iter().map(|&i| buffer[i].clone()).collect();
    let train: Vec<CriticSample> = idx[n_held..].iter().map(|&i| buffer[i].clone()).collect();
    let spec = CriticSpec {
        data_dim,
        classes,
        hidden: cfg.hidden,
        embed_dim: cfg.embed_dim,
        steps,
    };
    let run = |aware: bool| -> Result<f64> {
        let mut critic = Critic::new(spec, aware, &mut rng::stream(rng::derive(seed, "ablation-init"), 0))?;
        critic_train(
            &mut critic,
            &train,
            &cfg.train,
            &mut rng::stream(rng::derive(seed, "ablation-train"), 0),
        )?;
        critic_mse(&critic, &held)
    };
    Ok((run(true)?, run(false)?))
}

/// Monte-Carlo estimate of `E[r(x_0, c) | x_t, c, t]` from `n_rollouts`
/// continuations of the reverse chain.
pub fn rollout_value<P: GaussianPolicy + ?Sized>(
    policy: &P,
    reward: &RewardModel<'_>,
    x_t: &[f64],
    ctx: &Context,
    t: usize,
    n_rollouts: usize,
    seed: u64,
) -> Result<f64> {
    if n_rollouts == 0 {
        return Err(Error::usage("need at least one rollout"));
    }
    let xs: Vec<f64> = (0..n_rollouts).flat_map(|_| x_t.iter().copied()).collect();
    let classes = vec![ctx.class_id; n_rollouts];
    let finals = crate::diffusion::rollout_from(policy, &xs, t, &classes, seed, 0)?;
    let r = reward.score(&finals, &classes)?;
    Ok(r.iter().sum::<f64>() / n_rollouts as f64)
}
