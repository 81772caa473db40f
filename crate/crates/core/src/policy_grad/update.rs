use serde::{Deserialize, Serialize};

use super::{accumulate, check_batch, multipliers, shuffled_steps, Estimator, EstimatorConfig};
use crate::diffusion::{DiffusionPolicy, EpsNet, NoiseSchedule, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::{clip_global_norm, AdamState};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdatePlan {
    pub estimator: Estimator,
    /// Trajectories per minibatch.
    pub batch_size: usize,
    /// Timesteps whose gradients are summed into one optimizer step.
    pub grad_accum: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    /// Mean of `-w * A` over every visited (trajectory, step) pair.
    pub mean_loss: f64,
    pub clip_count: usize,
    pub weight_count: usize,
    pub optimizer_steps: usize,
    /// Gradient norms before clipping, one per optimizer step.
    pub grad_norms: Vec<f64>,
    /// More than half of the importance weights hit the clamp.
    pub stale: bool,
}

/// One pass over a trajectory buffer collected under the current snapshot.
///
/// Each minibatch visits `T..=1` in a fresh shuffled order; every `grad_accum`
/// consecutive steps form one clipped Adam step on `-J`. Importance weights compare
/// the live parameters against the buffer's stored likelihoods.
pub fn policy_update_epoch(
    model: &mut EpsNet,
    sched: &NoiseSchedule,
    trajs: &[Trajectory],
    cfg: &EstimatorConfig,
    plan: &UpdatePlan,
    opt: &mut AdamState,
    rng: &mut Rng,
) -> Result<EpochStats> {
    if plan.batch_size == 0 || plan.grad_accum == 0 {
        return Err(Error::usage("batch size and gradient accumulation must be positive"));
    }
    check_batch(&DiffusionPolicy::new(&*model, sched)?, trajs)?;
    let mult = multipliers(trajs, plan.estimator, cfg)?;
    let weighted = plan.estimator != Estimator::Ddpo;
    let mut stats = EpochStats::default();
    let (mut loss, mut pairs) = (0.0, 0usize);
    for (mb, m) in trajs.chunks(plan.batch_size).zip(mult.chunks(plan.batch_size)) {
        let order = shuffled_steps(sched.steps(), rng);
        for group in order.chunks(plan.grad_accum) {
            let acc = {
                let policy = DiffusionPolicy::new(&*model, sched)?;
                accumulate(&policy, mb, m, group, weighted, cfg)?
            };
            // ascent on J is descent on -J
            let mut grad: Vec<f64> = acc.grad.iter().map(|g| -(g / mb.len() as f64)).collect();
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("{} policy gradient", plan.estimator.name())));
            }
            stats.grad_norms.push(clip_global_norm(&mut grad, cfg.grad_max_norm));
            opt.update(model.net.params_mut(), &grad)?;
            stats.optimizer_steps += 1;
            stats.clip_count += acc.clips;
            stats.weight_count += acc.weights;
            loss -= acc.weighted;
            pairs += mb.len() * group.len();
        }
    }
    stats.mean_loss = loss / pairs as f64;
    stats.stale = 2 * stats.clip_count > stats.weight_count;
    if stats.stale {
        log::warn!(
            "{} of {} importance weights clipped; the trajectory buffer is stale",
            stats.clip_count,
            stats.weight_count
        );
    }
    Ok(stats)
}
