//! Diagnostic experiments on the frozen pretrained model and on the one-step
//! linear-Gaussian toy.

use std::path::Path;

use rand::Rng as _;

use super::artifacts::{self as art, Csv};
use super::config::RunConfig;
use super::phases::{load_classifier, load_critic, load_eps, prompts};
use crate::critic::{ablation_compare, build_critic_buffer, critic_forward, rollout_value, AblationConfig, ConstantBaseline};
use crate::diffusion::{sample_trajectories, Context, DiffusionPolicy, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::l2_norm;
use crate::policy_grad::{
    baseline_term_estimate, compute_advantages, estimate, gradient_variance, optimal_baseline_probe,
    per_trajectory_gradients, Estimator, EstimatorConfig, GradientEstimate, LinearGaussianToy,
};
use crate::rewards::{assign_rewards, RewardKind, RewardModel};
use crate::rng;

pub const VARIANCE_CSV: &str = "variance.csv";
pub const TOY_CSV: &str = "unbiasedness_toy.csv";
pub const BTERM_CSV: &str = "unbiasedness.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const BASELINE_CSV: &str = "baseline_optimum.csv";
pub const FIDELITY_CSV: &str = "critic_fidelity.csv";

/// Absolute error tolerated between critic and rollout oracle.
pub const FIDELITY_TOLERANCE: f64 = 0.5;

/// Paired bootstrap of CGRU against DDPO gradient variance.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceComparison {
    /// `(cgru, ddpo)` variance per bootstrap replicate.
    pub replicates: Vec<(f64, f64)>,
}

impl VarianceComparison {
    pub fn cgru_wins(&self) -> usize {
        self.replicates.iter().filter(|(c, d)| c < d).count()
    }
}

/// Draws `variance_batches` batches of `variance_batch_size` trajectories from
/// the base model, scores each batch with both estimators, then compares the
/// across-batch variances on paired bootstrap resamples of the batch index.
pub fn variance_experiment(cfg: &RunConfig, dir: &Path) -> Result<VarianceComparison> {
    let d = &cfg.diag;
    if d.variance_batches < 2 {
        return Err(Error::usage("variance experiment needs at least two batches"));
    }
    let clf = load_classifier(cfg, dir)?;
    let base = load_eps(cfg, &dir.join(art::BASE_CKPT))?;
    let critic = load_critic(cfg, dir)?;
    let sched = cfg.schedule()?;
    let policy = DiffusionPolicy::new(&base, &sched)?;
    let reward = RewardModel::new(cfg.reward_spec(), Some(&clf), cfg.mixture())?;
    let ctxs = prompts(cfg, d.variance_batch_size);
    let seed = rng::derive(cfg.seed, "variance-sampling");
    let order: Vec<usize> = (1..=sched.steps()).rev().collect();

    let mut cgru = Vec::with_capacity(d.variance_batches);
    let mut ddpo = Vec::with_capacity(d.variance_batches);
    for b in 0..d.variance_batches {
        let mut trajs = sample_trajectories(&policy, &ctxs, seed, (b * ctxs.len()) as u64)?;
        assign_rewards(&mut trajs, &reward)?;
        compute_advantages(&mut trajs, &critic)?;
        cgru.push(estimate(&policy, &trajs, Estimator::Cgru, &cfg.estimator, &order)?);
        ddpo.push(estimate(&policy, &trajs, Estimator::Ddpo, &cfg.estimator, &order)?);
    }

    let mut boot = rng::stream(rng::derive(cfg.seed, "variance-bootstrap"), 0);
    let mut replicates = Vec::with_capacity(d.bootstrap_resamples);
    for _ in 0..d.bootstrap_resamples {
        let idx: Vec<usize> = (0..cgru.len()).map(|_| boot.random_range(0..cgru.len())).collect();
        let pick = |all: &[GradientEstimate]| idx.iter().map(|&i| all[i].clone()).collect::<Vec<_>>();
        replicates.push((gradient_variance(&pick(&cgru))?, gradient_variance(&pick(&ddpo))?));
    }
    let mut csv = Csv::new("replicate,var_cgru,var_ddpo");
    for (i, (c, dd)) in replicates.iter().enumerate() {
        csv.row(&[&i, c, dd]);
    }
    csv.write(&dir.join(VARIANCE_CSV))?;
    Ok(VarianceComparison { replicates })
}

/// Mean and standard error of one toy gradient estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCheck {
    pub estimator: Estimator,
    pub baseline: f64,
    pub mean: f64,
    pub std_err: f64,
    pub analytic: f64,
}

impl ToyCheck {
    /// Distance from the analytic gradient in standard errors.
    pub fn z(&self) -> f64 {
        (self.mean - self.analytic).abs() / self.std_err
    }
}

/// Norm of the baseline term against the norm of the gradient estimate at one
/// sample size.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineTerm {
    pub n: usize,
    pub b_norm: f64,
    pub grad_norm: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Unbiasedness {
    pub toy: Vec<ToyCheck>,
    pub baseline_terms: Vec<BaselineTerm>,
}

/// Toy-policy batch with reward `r = x_0`, whose expected-reward gradient is 1.
fn toy_batch(theta: f64, n: usize, seed: u64) -> Result<(LinearGaussianToy, Vec<Trajectory>)> {
    let toy = LinearGaussianToy::new(theta, 1.0)?;
    let ctxs = vec![Context::new(0, 1)?; n];
    let mut trajs = sample_trajectories(&toy, &ctxs, seed, 0)?;
    for t in &mut trajs {
        t.reward = Some(t.x0()[0]);
    }
    Ok((toy, trajs))
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Checks the toy estimators against the analytic gradient for constant
/// baselines 0, 0.5 and 1, then sweeps the trained critic's baseline term over
/// the configured sample sizes on the base model.
pub fn unbiasedness(cfg: &RunConfig, dir: &Path) -> Result<Unbiasedness> {
    let d = &cfg.diag;
    if d.toy_samples < 2 {
        return Err(Error::usage("toy check needs at least two samples"));
    }
    let (toy, mut trajs) = toy_batch(d.toy_theta, d.toy_samples, rng::derive(cfg.seed, "toy-unbiased"))?;
    let est_cfg = EstimatorConfig::default();
    let mut toy_rows = Vec::new();
    let mut push = |estimator, baseline, trajs: &[Trajectory]| -> Result<()> {
        let g = per_trajectory_gradients(&toy, trajs, estimator, &est_cfg)?;
        let (mean, std_err) = mean_and_se(&g.iter().map(|g| g[0]).collect::<Vec<_>>());
        toy_rows.push(ToyCheck { estimator, baseline, mean, std_err, analytic: 1.0 });
        Ok(())
    };
    push(Estimator::Ddpo, 0.0, &trajs)?;
    for b in [0.0, 0.5, 1.0] {
        compute_advantages(&mut trajs, &ConstantBaseline(b))?;
        push(Estimator::Cgru, b, &trajs)?;
    }
    let mut toy_csv = Csv::new("estimator,baseline,mean,std_err,analytic,z");
    for r in &toy_rows {
        toy_csv.row(&[&r.estimator.name(), &r.baseline, &r.mean, &r.std_err, &r.analytic, &r.z()]);
    }
    toy_csv.write(&dir.join(TOY_CSV))?;

    let clf = load_classifier(cfg, dir)?;
    let base = load_eps(cfg, &dir.join(art::BASE_CKPT))?;
    let critic = load_critic(cfg, dir)?;
    let sched = cfg.schedule()?;
    let policy = DiffusionPolicy::new(&base, &sched)?;
    let reward = RewardModel::new(cfg.reward_spec(), Some(&clf), cfg.mixture())?;
    let order: Vec<usize> = (1..=sched.steps()).rev().collect();
    if d.unbiased_sizes.is_empty() || d.unbiased_sizes.contains(&0) {
        return Err(Error::usage("unbiasedness sweep needs positive sample sizes"));
    }
    let root = rng::derive(cfg.seed, "unbiasedness-sampling");
    let mut terms = Vec::new();
    let mut csv = Csv::new("n,b_norm,grad_norm,ratio");
    for (k, &n) in d.unbiased_sizes.iter().enumerate() {
        let mut trajs = sample_trajectories(&policy, &prompts(cfg, n), rng::derive_index(root, k as u64), 0)?;
        assign_rewards(&mut trajs, &reward)?;
        compute_advantages(&mut trajs, &critic)?;
        let b_norm = l2_norm(&baseline_term_estimate(&policy, &trajs, &critic)?);
        let grad_norm = estimate(&policy, &trajs, Estimator::Cgru, &cfg.estimator, &order)?.raw_norm;
        let ratio = b_norm / grad_norm;
        log::info!("baseline term at N = {n}: |B| {b_norm:.4}, |grad| {grad_norm:.4}, ratio {ratio:.4}");
        csv.row(&[&n, &b_norm, &grad_norm, &ratio]);
        terms.push(BaselineTerm { n, b_norm, grad_norm, ratio });
    }
    csv.write(&dir.join(BTERM_CSV))?;
    Ok(Unbiasedness { toy: toy_rows, baseline_terms: terms })
}

/// Held-out MSE of the timestep-aware and plain critics for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub aware_mse: f64,
    pub plain_mse: f64,
}

/// Timestep-awareness ablation over `ablation_seeds` independent buffers.
pub fn ablation(cfg: &RunConfig, dir: &Path) -> Result<Vec<AblationRow>> {
    let d = &cfg.diag;
    let base = load_eps(cfg, &dir.join(art::BASE_CKPT))?;
    let clf = match d.ablation_reward {
        RewardKind::ClassifierComplement => Some(load_classifier(cfg, dir)?),
        RewardKind::ModeDistance => None,
    };
    let reward = RewardModel::new(cfg.reward_spec_of(d.ablation_reward), clf.as_ref(), cfg.mixture())?;
    let sched = cfg.schedule()?;
    let ctxs = prompts(cfg, d.ablation_n_traj);
    let ab = AblationConfig {
        hidden: cfg.critic.hidden,
        embed_dim: cfg.critic.embed_dim,
        train: crate::critic::CriticTrainConfig {
            epochs: d.ablation_epochs,
            ..cfg.critic_train()
        },
        holdout: d.ablation_holdout,
    };
    let root = rng::derive(cfg.seed, "ablation");
    let mut rows = Vec::new();
    let mut csv = Csv::new("model_kind,held_out_mse,seed");
    for s in 0..d.ablation_seeds as u64 {
        let seed = rng::derive_index(root, s);
        let buffer = build_critic_buffer(&base, &ctxs, &reward, &sched, seed, d.ablation_n_traj)?;
        let (aware_mse, plain_mse) = ablation_compare(&buffer, 2, cfg.data.classes, sched.steps(), &ab, seed)?;
        log::info!("ablation seed {s}: timestep-aware {aware_mse:.5}, plain {plain_mse:.5}");
        csv.row(&[&"timestep_aware", &aware_mse, &s]);
        csv.row(&[&"plain", &plain_mse, &s]);
        rows.push(AblationRow { seed: s, aware_mse, plain_mse });
    }
    csv.write(&dir.join(ABLATION_CSV))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineOptimum {
    pub mean_reward: f64,
    /// `(b, variance)` on the grid `E[r] - 1, E[r], E[r] + 1`.
    pub grid: Vec<(f64, f64)>,
    /// `(b, variance)` at `E[r]` and `E[r] + 0.01`.
    pub near: Vec<(f64, f64)>,
}

impl BaselineOptimum {
    pub fn mean_is_best(&self) -> bool {
        let mid = self.grid[1].1;
        mid < self.grid[0].1 && mid < self.grid[2].1
    }
}

/// Constant-baseline variance grid around the empirical mean reward of the toy.
pub fn baseline_optimum(cfg: &RunConfig, dir: &Path) -> Result<BaselineOptimum> {
    let d = &cfg.diag;
    if d.toy_samples < 2 {
        return Err(Error::usage("baseline probe needs at least two samples"));
    }
    let (toy, trajs) = toy_batch(d.toy_theta, d.toy_samples, rng::derive(cfg.seed, "toy-baseline"))?;
    let mean_reward = trajs.iter().map(|t| t.x0()[0]).sum::<f64>() / trajs.len() as f64;
    let grid = optimal_baseline_probe(&toy, &trajs, &[mean_reward - 1.0, mean_reward, mean_reward + 1.0])?;
    let near = optimal_baseline_probe(&toy, &trajs, &[mean_reward, mean_reward + 0.01])?;
    let mut csv = Csv::new("b,variance");
    for (b, v) in grid.iter().chain(&near[1..]) {
        csv.row(&[b, v]);
    }
    csv.write(&dir.join(BASELINE_CSV))?;
    Ok(BaselineOptimum { mean_reward, grid, near })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FidelityProbe {
    pub class_id: usize,
    pub t: usize,
    pub critic: f64,
    pub oracle: f64,
}

impl FidelityProbe {
    pub fn abs_err(&self) -> f64 {
        (self.critic - self.oracle).abs()
    }
}

/// Compares the trained critic with Monte-Carlo rollout values at states
/// visited by the base model, each at a uniformly drawn step.
pub fn critic_fidelity(cfg: &RunConfig, dir: &Path) -> Result<Vec<FidelityProbe>> {
    let d = &cfg.diag;
    let clf = load_classifier(cfg, dir)?;
    let base = load_eps(cfg, &dir.join(art::BASE_CKPT))?;
    let critic = load_critic(cfg, dir)?;
    let sched = cfg.schedule()?;
    let policy = DiffusionPolicy::new(&base, &sched)?;
    let reward = RewardModel::new(cfg.reward_spec(), Some(&clf), cfg.mixture())?;
    let root = rng::derive(cfg.seed, "critic-fidelity");
    let trajs = sample_trajectories(&policy, &prompts(cfg, d.probe_states), root, 0)?;
    let mut pick = rng::stream(root, u64::MAX);
    let mut probes = Vec::with_capacity(trajs.len());
    let mut csv = Csv::new("probe,class,t,critic,oracle,abs_err");
    for (i, tr) in trajs.iter().enumerate() {
        let t = pick.random_range(1..=sched.steps());
        let x_t = tr.x(t);
        let v = critic_forward(&critic, x_t, &tr.ctx, t)?;
        let oracle = rollout_value(&policy, &reward, x_t, &tr.ctx, t, d.mc_rollouts, rng::derive_index(root, i as u64))?;
        let p = FidelityProbe { class_id: tr.ctx.class_id, t, critic: v, oracle };
        csv.row(&[&i, &p.class_id, &t, &v, &oracle, &p.abs_err()]);
        probes.push(p);
    }
    csv.write(&dir.join(FIDELITY_CSV))?;
    Ok(probes)
}
