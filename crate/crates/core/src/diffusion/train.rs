use rand::Rng as _;
use rand_distr::StandardNormal;

use super::data::LabeledPoint;
use super::model::{EpsNet, NoisePredictor};
use super::schedule::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::AdamState;
use crate::rng::Rng;

/// Noise draws for one denoising-loss minibatch.
struct NoisedBatch {
    ts: Vec<usize>,
    eps: Vec<f64>,
    xt: Vec<f64>,
    classes: Vec<usize>,
}

fn noise_batch(batch: &[LabeledPoint], sched: &NoiseSchedule, rng: &mut Rng) -> Result<NoisedBatch> {
    if batch.is_empty() {
        return Err(Error::usage("empty training batch"));
    }
    let d = batch[0].x.len();
    let mut out = NoisedBatch {
        ts: Vec::with_capacity(batch.len()),
        eps: Vec::with_capacity(batch.len() * d),
        xt: Vec::with_capacity(batch.len() * d),
        classes: Vec::with_capacity(batch.len()),
    };
    for p in batch {
        let t = rng.random_range(1..=sched.steps());
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        out.xt.extend(q_sample(&p.x, t, &eps, sched)?);
        out.eps.extend(eps);
        out.ts.push(t);
        out.classes.push(p.ctx.class_id);
    }
    Ok(out)
}

/// Mean over the batch of `||eps - eps_hat(q_sample(x0, t, eps), t, c)||^2`.
pub fn ddpm_loss<P: NoisePredictor + ?Sized>(
    predictor: &P,
    batch: &[LabeledPoint],
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    let nb = noise_batch(batch, sched, rng)?;
    let pred = predictor.predict(&nb.xt, &nb.ts, &nb.classes)?;
    Ok(pred.iter().zip(&nb.eps).map(|(p, e)| (p - e) * (p - e)).sum::<f64>() / batch.len() as f64)
}

/// Denoising loss and its parameter gradient; draws the same noise as [`ddpm_loss`].
pub fn ddpm_train_step(
    model: &EpsNet,
    batch: &[LabeledPoint],
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>)> {
    let nb = noise_batch(batch, sched, rng)?;
    let (_, tape) = model.predict_tape(&nb.xt, &nb.ts, &nb.classes)?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let grad_out: Vec<f64> = tape
        .output()
        .iter()
        .zip(&nb.eps)
        .map(|(p, e)| {
            loss += (p - e) * (p - e);
            2.0 * (p - e) / n
        })
        .collect();
    let mut grads = vec![0.0; model.net.param_count()];
    model.net.backward_tape(&tape, &grad_out, &mut grads)?;
    Ok((loss / n, grads))
}

/// Runs `steps` Adam updates on random minibatches of `data`, returning the loss per step.
pub fn train_denoiser(
    model: &mut EpsNet,
    data: &[LabeledPoint],
    sched: &NoiseSchedule,
    opt: &mut AdamState,
    steps: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::usage("denoiser training needs data and a positive batch size"));
    }
    let mut losses = Vec::with_capacity(steps);
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..steps {
        batch.clear();
        for _ in 0..batch_size {
            batch.push(data[rng.random_range(0..data.len())].clone());
        }
        let (loss, grads) = ddpm_train_step(model, &batch, sched, rng)?;
        opt.update(model.net.params_mut(), &grads)?;
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::data::{sample_dataset, Context, MixtureSpec};
    use crate::diffusion::model::{EpsNetSpec, ZeroPredictor};
    use crate::rng;

    /// Recovers the exact noise when every training point is the same `x0`.
    struct KnownX0<'a> {
        x0: Vec<f64>,
        sched: &'a NoiseSchedule,
    }

    impl NoisePredictor for KnownX0<'_> {
        fn data_dim(&self) -> usize {
            self.x0.len()
        }
        fn predict(&self, xs: &[f64], ts: &[usize], _c: &[usize]) -> Result<Vec<f64>> {
            let d = self.x0.len();
            Ok(xs
                .chunks_exact(d)
                .zip(ts)
                .flat_map(|(x, &t)| {
                    let ab = self.sched.alpha_bar(t);
                    x.iter()
                        .zip(&self.x0)
                        .map(move |(xi, x0)| (xi - ab.sqrt() * x0) / (1.0 - ab).sqrt())
                })
                .collect())
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let sched = NoiseSchedule::linear(50, 1e-4, 0.2).unwrap();
        let x0 = vec![1.5, -0.5];
        let batch: Vec<_> = (0..64)
            .map(|_| LabeledPoint { x: x0.clone(), ctx: Context::new(0, 1).unwrap() })
            .collect();
        let oracle = KnownX0 { x0, sched: &sched };
        let loss = ddpm_loss(&oracle, &batch, &sched, &mut rng::stream(1, 0)).unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn zero_predictor_loss_is_data_dimension() {
        let sched = NoiseSchedule::linear(50, 1e-4, 0.2).unwrap();
        let data = sample_dataset(&MixtureSpec::default(), 20_000, &mut rng::stream(4, 0)).unwrap();
        // per-sample ||eps||^2 ~ chi^2_2: mean 2, variance 4
        let loss = ddpm_loss(&ZeroPredictor(2), &data, &sched, &mut rng::stream(4, 1)).unwrap();
        let se = (4.0f64 / 20_000.0).sqrt();
        assert!((loss - 2.0).abs() < 3.0 * se, "{loss}");
    }

    #[test]
    fn empty_batch_rejected() {
        let sched = NoiseSchedule::linear(5, 1e-3, 0.1).unwrap();
        assert!(ddpm_loss(&ZeroPredictor(2), &[], &sched, &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn loss_and_train_step_agree() {
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let spec = EpsNetSpec { data_dim: 2, classes: 8, embed_dim: 8, hidden: 16, steps: 20 };
        let model = EpsNet::new(spec, &mut rng::stream(0, 0)).unwrap();
        let data = sample_dataset(&MixtureSpec::default(), 32, &mut rng::stream(0, 1)).unwrap();
        let a = ddpm_loss(&model, &data, &sched, &mut rng::stream(9, 0)).unwrap();
        let (b, g) = ddpm_train_step(&model, &data, &sched, &mut rng::stream(9, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(g.len(), model.net.param_count());
    }

    #[test]
    fn short_training_run_reduces_loss() {
        let sched = NoiseSchedule::linear(50, 1e-4, 0.2).unwrap();
        let spec = EpsNetSpec { data_dim: 2, classes: 8, embed_dim: 32, hidden: 128, steps: 50 };
        let mut model = EpsNet::new(spec, &mut rng::stream(3, 0)).unwrap();
        let data = sample_dataset(&MixtureSpec::default(), 4000, &mut rng::stream(3, 1)).unwrap();
        let eval = |m: &EpsNet| ddpm_loss(m, &data[..2000], &sched, &mut rng::stream(3, 2)).unwrap();
        let before = eval(&model);
        let mut opt = AdamState::new(model.net.param_count(), 1e-3);
        train_denoiser(&mut model, &data, &sched, &mut opt, 300, 64, &mut rng::stream(3, 3)).unwrap();
        let after = eval(&model);
        assert!(after < before, "{after} !< {before}");
    }
}
