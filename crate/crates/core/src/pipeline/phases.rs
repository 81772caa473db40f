//! The run phases: classifier, pretraining, critic, unlearning and evaluation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use super::artifacts::{self as art, Csv, PhaseRecord, PhaseStatus, RunLock, RunManifest};
use super::config::RunConfig;
use crate::critic::{build_critic_buffer, critic_train, Critic};
use crate::diffusion::{
    sample_dataset, sample_finals, sample_trajectories, train_denoiser, Context, DiffusionPolicy, EpsNet,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, feature_stats, EvalReport, FeatureStats};
use crate::numerics::{l2_norm, AdamState, Network};
use crate::policy_grad::{
    compute_advantages, per_trajectory_gradients, policy_update_epoch, sample_variance, Estimator, UpdatePlan,
};
use crate::rewards::{assign_rewards, train_classifier, Classifier, RewardModel};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Ddpo,
    Cgru,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Cgru, Method::Ddpo];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ddpo => "ddpo",
            Method::Cgru => "cgru",
        }
    }

    /// The estimator used for policy updates.
    pub fn estimator(self) -> Estimator {
        match self {
            Method::Ddpo => Estimator::DdpoIs,
            Method::Cgru => Estimator::Cgru,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpo" => Ok(Method::Ddpo),
            "cgru" => Ok(Method::Cgru),
            other => Err(Error::usage(format!("unknown method `{other}` (expected ddpo or cgru)"))),
        }
    }
}

pub fn load_classifier(cfg: &RunConfig, dir: &Path) -> Result<Classifier> {
    let mut net = Network::zeros(Classifier::layers(2, cfg.classifier.hidden, cfg.data.classes))?;
    net.load_into(&dir.join(art::CLASSIFIER_CKPT))?;
    Classifier::from_network(net)
}

pub fn load_eps(cfg: &RunConfig, path: &Path) -> Result<EpsNet> {
    let mut net = Network::zeros(EpsNet::layers(&cfg.eps_spec()))?;
    net.load_into(path)?;
    EpsNet::from_network(cfg.eps_spec(), net)
}

pub fn load_critic(cfg: &RunConfig, dir: &Path) -> Result<Critic> {
    let spec = cfg.critic_spec();
    let mut net = Network::zeros(Critic::layers(&spec))?;
    net.load_into(&dir.join(art::CRITIC_CKPT))?;
    Critic::from_network(spec, net, true)
}

pub fn prompts(cfg: &RunConfig, n: usize) -> Vec<Context> {
    cfg.prompt_mix(n)
        .into_iter()
        .map(|c| Context { class_id: c, classes: cfg.data.classes })
        .collect()
}

/// Statistics of real retain-class points, the reference for the Fréchet distance.
pub fn reference_stats(cfg: &RunConfig) -> Result<FeatureStats> {
    let data = sample_dataset(
        &cfg.mixture(),
        cfg.data.train_size,
        &mut rng::stream(rng::derive(cfg.seed, "reference-data"), 0),
    )?;
    let xs: Vec<f64> = data
        .iter()
        .filter(|p| p.ctx.class_id != cfg.reward.target_class)
        .flat_map(|p| p.x.iter().copied())
        .collect();
    feature_stats(&xs, 2)
}

/// Trains the reward classifier on fresh mixture data; returns held-out accuracy.
pub fn run_classifier(cfg: &RunConfig, dir: &Path) -> Result<Vec<String>> {
    let mix = cfg.mixture();
    let train = sample_dataset(&mix, cfg.data.train_size, &mut rng::stream(rng::derive(cfg.seed, "classifier-data"), 0))?;
    let held = sample_dataset(&mix, cfg.data.train_size / 4 + 1, &mut rng::stream(rng::derive(cfg.seed, "classifier-heldout"), 0))?;
    let clf = train_classifier(
        &train,
        cfg.data.classes,
        &cfg.classifier,
        &mut rng::stream(rng::derive(cfg.seed, "classifier-train"), 0),
    )?;
    let (train_acc, held_acc) = (clf.accuracy(&train)?, clf.accuracy(&held)?);
    log::info!("classifier accuracy: train {train_acc:.4}, held-out {held_acc:.4}");
    clf.net.save(&dir.join(art::CLASSIFIER_CKPT))?;
    let mut csv = Csv::new("split,accuracy");
    csv.row(&[&"train", &train_acc]);
    csv.row(&[&"heldout", &held_acc]);
    csv.write(&dir.join("classifier_eval.csv"))?;
    Ok(vec![art::CLASSIFIER_CKPT.into(), "classifier_eval.csv".into()])
}

/// Per-class accuracy of the classifier on conditional samples from `model`.
pub fn conditional_accuracy(cfg: &RunConfig, model: &EpsNet, clf: &Classifier, seed: u64, per_class: usize) -> Result<Vec<f64>> {
    let sched = cfg.schedule()?;
    let policy = DiffusionPolicy::new(model, &sched)?;
    let classes: Vec<usize> = (0..cfg.data.classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    let xs = sample_finals(&policy, &classes, seed, 0)?;
    let pred = clf.predict(&xs)?;
    Ok((0..cfg.data.classes)
        .map(|c| {
            let hits = (c * per_class..(c + 1) * per_class).filter(|&i| pred[i] == c).count();
            hits as f64 / per_class as f64
        })
        .collect())
}

/// Trains the base denoiser until every class's conditional samples are
/// recognised by the classifier at the configured rate, or the step budget
/// runs out (a phase failure; the checkpoint is still written).
pub fn run_pretrain(cfg: &RunConfig, dir: &Path) -> Result<Vec<String>> {
    let clf = load_classifier(cfg, dir)?;
    let sched = cfg.schedule()?;
    let data = sample_dataset(&cfg.mixture(), cfg.data.train_size, &mut rng::stream(rng::derive(cfg.seed, "pretrain-data"), 0))?;
    let mut model = EpsNet::new(cfg.eps_spec(), &mut rng::stream(rng::derive(cfg.seed, "eps-init"), 0))?;
    let mut opt = AdamState::new(model.net.param_count(), cfg.pretrain.lr);
    let mut batches = rng::stream(rng::derive(cfg.seed, "pretrain-batches"), 0);
    let eval_seed = rng::derive(cfg.seed, "pretrain-eval");
    let p = &cfg.pretrain;
    let mut loss_csv = Csv::new("step,loss");
    let mut eval_csv = Csv::new("step,class,accuracy");
    let mut done = 0;
    let mut worst = 0.0;
    while done < p.max_steps {
        let block = p.eval_every.min(p.max_steps - done);
        let losses = train_denoiser(&mut model, &data, &sched, &mut opt, block, p.batch_size, &mut batches)?;
        for (i, l) in losses.iter().enumerate() {
            loss_csv.row(&[&(done + i + 1), l]);
        }
        done += block;
        if done < p.min_steps && done < p.max_steps {
            continue;
        }
        let acc = conditional_accuracy(cfg, &model, &clf, eval_seed, p.eval_samples_per_class)?;
        for (c, a) in acc.iter().enumerate() {
            eval_csv.row(&[&done, &c, a]);
        }
        worst = acc.iter().copied().fold(f64::INFINITY, f64::min);
        log::info!("pretrain step {done}: loss {:.4}, worst class accuracy {worst:.3}", losses.last().unwrap_or(&f64::NAN));
        if worst >= p.accuracy_threshold {
            break;
        }
    }
    model.net.save(&dir.join(art::BASE_CKPT))?;
    loss_csv.write(&dir.join("pretrain_loss.csv"))?;
    eval_csv.write(&dir.join("pretrain_eval.csv"))?;
    if worst < p.accuracy_threshold {
        return Err(Error::Phase {
            phase: "pretrain".into(),
            reason: format!(
                "worst per-class sample accuracy {worst:.3} is below {} after {done} steps (see pretrain_eval.csv)",
                p.accuracy_threshold
            ),
        });
    }
    Ok(vec![art::BASE_CKPT.into(), "pretrain_loss.csv".into(), "pretrain_eval.csv".into()])
}

/// Fits the value network to terminal rewards of trajectories from the frozen base model.
pub fn run_critic(cfg: &RunConfig, dir: &Path) -> Result<Vec<String>> {
    let clf = load_classifier(cfg, dir)?;
    let base = load_eps(cfg, &dir.join(art::BASE_CKPT))?;
    let sched = cfg.schedule()?;
    let reward = RewardModel::new(cfg.reward_spec(), Some(&clf), cfg.mixture())?;
    let buffer = build_critic_buffer(
        &base,
        &prompts(cfg, cfg.critic.n_traj),
        &reward,
        &sched,
        rng::derive(cfg.seed, "critic-buffer"),
        cfg.critic.n_traj,
    )?;
    let mut critic = Critic::new(cfg.critic_spec(), true, &mut rng::stream(rng::derive(cfg.seed, "critic-init"), 0))?;
    let losses = critic_train(
        &mut critic,
        &buffer,
        &cfg.critic_train(),
        &mut rng::stream(rng::derive(cfg.seed, "critic-train"), 0),
    )?;
    log::info!("critic loss {:.4} -> {:.4}", losses[0], losses[losses.len() - 1]);
    critic.net.save(&dir.join(art::CRITIC_CKPT))?;
    let mut csv = Csv::new("epoch,loss");
    for (i, l) in losses.iter().enumerate() {
        csv.row(&[&(i + 1), l]);
    }
    csv.write(&dir.join("critic_loss.csv"))?;
    Ok(vec![art::CRITIC_CKPT.into(), "critic_loss.csv".into()])
}

/// Everything an evaluation needs besides the model.
pub struct Evaluator {
    pub clf: Classifier,
    pub reference: FeatureStats,
}

impl Evaluator {
    pub fn new(cfg: &RunConfig, dir: &Path) -> Result<Self> {
        Ok(Evaluator {
            clf: load_classifier(cfg, dir)?,
            reference: reference_stats(cfg)?,
        })
    }

    pub fn evaluate(&self, cfg: &RunConfig, model: &EpsNet) -> Result<EvalReport> {
        let sched = cfg.schedule()?;
        let policy = DiffusionPolicy::new(model, &sched)?;
        evaluate(&policy, &self.clf, cfg.reward.target_class, cfg.data.classes, &self.reference, &cfg.eval_protocol())
    }
}

/// Fine-tunes the base model with `method`; writes the final checkpoint, the
/// per-evaluation metrics and the per-iteration diagnostics.
pub fn run_unlearn(cfg: &RunConfig, dir: &Path, method: Method) -> Result<Vec<String>> {
    let critic = match method {
        Method::Cgru => Some(load_critic(cfg, dir)?),
        Method::Ddpo => None,
    };
    let clf = load_classifier(cfg, dir)?;
    let mut model = load_eps(cfg, &dir.join(art::BASE_CKPT))?;
    let sched = cfg.schedule()?;
    let reward = RewardModel::new(cfg.reward_spec(), Some(&clf), cfg.mixture())?;
    let evaluator = Evaluator {
        clf: clf.clone(),
        reference: reference_stats(cfg)?,
    };
    let run_id = cfg.run_id();
    let pc = &cfg.policy;
    let plan = UpdatePlan {
        estimator: method.estimator(),
        batch_size: pc.batch_size,
        grad_accum: pc.grad_accum,
    };
    let ctxs = prompts(cfg, pc.traj_per_iteration);
    let sampling_seed = rng::derive(cfg.seed, "unlearn-sampling");
    let mut update_rng = rng::stream(rng::derive(cfg.seed, "unlearn-update"), 0);
    let mut opt = AdamState::new(model.net.param_count(), pc.lr);

    let mut metrics = Csv::new(EvalReport::CSV_HEADER);
    let mut diag = Csv::new(art::DIAGNOSTICS_HEADER);
    let report = evaluator.evaluate(cfg, &model)?;
    metrics.line(&report.csv_row(&run_id, method.name(), 0));
    for it in 0..pc.iterations {
        let mut trajs = {
            let policy = DiffusionPolicy::new(&model, &sched)?;
            sample_trajectories(&policy, &ctxs, sampling_seed, (it * ctxs.len()) as u64)?
        };
        assign_rewards(&mut trajs, &reward)?;
        if let Some(c) = &critic {
            compute_advantages(&mut trajs, c)?;
        }
        let mean_reward = trajs.iter().map(|t| t.reward.unwrap_or(0.0)).sum::<f64>() / trajs.len() as f64;
        let (grad_norm, grad_variance) = {
            let policy = DiffusionPolicy::new(&model, &sched)?;
            let per = per_trajectory_gradients(&policy, &trajs, method.estimator(), &cfg.estimator)?;
            let n = per.len() as f64;
            let mut mean = vec![0.0; per[0].len()];
            for g in &per {
                mean.iter_mut().zip(g).for_each(|(m, v)| *m += v / n);
            }
            let refs: Vec<&[f64]> = per.iter().map(Vec::as_slice).collect();
            let var = if per.len() > 1 { sample_variance(&refs)? } else { 0.0 };
            (l2_norm(&mean), var)
        };
        let mut clips = 0;
        for _ in 0..pc.inner_epochs {
            let stats = policy_update_epoch(&mut model, &sched, &trajs, &cfg.estimator, &plan, &mut opt, &mut update_rng)?;
            clips += stats.clip_count;
        }
        diag.row(&[
            &(it + 1),
            &method.name(),
            &trajs.len(),
            &grad_norm,
            &grad_variance,
            &clips,
            &mean_reward,
        ]);
        if (it + 1) % cfg.eval.every == 0 || it + 1 == pc.iterations {
            let report = evaluator.evaluate(cfg, &model)?;
            log::info!(
                "{method} iteration {}: reward {mean_reward:.3}, ua {:.3}, ira {:.3}, fd {:.4}",
                it + 1,
                report.ua,
                report.ira,
                report.fd
            );
            metrics.line(&report.csv_row(&run_id, method.name(), it + 1));
        }
    }
    let ckpt = art::unlearned_ckpt(method.name());
    model.net.save(&dir.join(&ckpt))?;
    metrics.write(&dir.join(art::metrics_csv(method.name())))?;
    diag.write(&dir.join(art::diagnostics_csv(method.name())))?;
    Ok(vec![ckpt, art::metrics_csv(method.name()), art::diagnostics_csv(method.name())])
}

/// Scores the base model and every unlearned checkpoint present in `dir`.
pub fn run_eval(cfg: &RunConfig, dir: &Path) -> Result<(Vec<String>, Vec<(String, EvalReport)>)> {
    let evaluator = Evaluator::new(cfg, dir)?;
    let run_id = cfg.run_id();
    let mut csv = Csv::new(EvalReport::CSV_HEADER);
    let mut reports = Vec::new();
    let base = load_eps(cfg, &dir.join(art::BASE_CKPT))?;
    let r = evaluator.evaluate(cfg, &base)?;
    csv.line(&r.csv_row(&run_id, "base", 0));
    reports.push(("base".to_string(), r));
    for m in Method::ALL {
        let path = dir.join(art::unlearned_ckpt(m.name()));
        if !path.exists() {
            continue;
        }
        let r = evaluator.evaluate(cfg, &load_eps(cfg, &path)?)?;
        csv.line(&r.csv_row(&run_id, m.name(), cfg.policy.iterations));
        reports.push((m.name().to_string(), r));
    }
    csv.write(&dir.join("eval.csv"))?;
    Ok((vec!["eval.csv".into()], reports))
}

/// Runs `f` as phase `name`, recording its status, duration and artifacts in
/// the manifest of `dir`.
pub fn tracked<T>(
    cfg: &RunConfig,
    dir: &Path,
    name: &str,
    f: impl FnOnce() -> Result<(Vec<String>, T)>,
) -> Result<T> {
    let manifest_path = dir.join(art::MANIFEST);
    let mut manifest = match RunManifest::load(&manifest_path) {
        Ok(m) if m.config_hash == cfg.hash() => m,
        _ => RunManifest::new(cfg.hash(), cfg.seed),
    };
    let start = Instant::now();
    let result = f();
    let seconds = start.elapsed().as_secs_f64();
    manifest.phases.retain(|p| p.name != name);
    let (status, error, value) = match result {
        Ok((artifacts, v)) => {
            for a in &artifacts {
                manifest.record_artifact(dir, a)?;
            }
            (PhaseStatus::Completed, None, Ok(v))
        }
        Err(e) => (PhaseStatus::Failed, Some(e.to_string()), Err(e)),
    };
    manifest.phases.push(PhaseRecord {
        name: name.to_string(),
        status,
        seconds,
        error,
    });
    manifest.save(&manifest_path)?;
    value
}

/// Every phase in order, then the evaluation table; returns the manifest.
pub fn run_full(cfg: &RunConfig, dir: &Path) -> Result<RunManifest> {
    let _lock = RunLock::acquire(dir)?;
    run_full_unlocked(cfg, dir)
}

pub(crate) fn run_full_unlocked(cfg: &RunConfig, dir: &Path) -> Result<RunManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let _ = std::fs::remove_file(dir.join(art::MANIFEST));
    write_config(cfg, dir)?;
    tracked(cfg, dir, "config", || Ok((vec!["config.toml".into()], ())))?;
    tracked(cfg, dir, "classifier", || Ok((run_classifier(cfg, dir)?, ())))?;
    tracked(cfg, dir, "pretrain", || Ok((run_pretrain(cfg, dir)?, ())))?;
    tracked(cfg, dir, "critic", || Ok((run_critic(cfg, dir)?, ())))?;
    for m in Method::ALL {
        tracked(cfg, dir, &format!("unlearn_{m}"), || Ok((run_unlearn(cfg, dir, m)?, ())))?;
    }
    tracked(cfg, dir, "eval", || run_eval(cfg, dir).map(|(a, _)| (a, ())))?;
    RunManifest::load(&dir.join(art::MANIFEST))
}

/// The effective configuration, as written next to the artifacts.
pub fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    art::write_atomic(&dir.join("config.toml"), cfg.to_toml_string().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        for o in [
            "diffusion.steps=4",
            "diffusion.hidden=16",
            "diffusion.embed_dim=8",
            "data.train_size=400",
            "pretrain.max_steps=40",
            "pretrain.min_steps=20",
            "pretrain.eval_every=20",
            "pretrain.accuracy_threshold=0",
            "pretrain.eval_samples_per_class=4",
            "classifier.epochs=1",
            "classifier.hidden=16",
            "critic.hidden=8",
            "critic.embed_dim=8",
            "critic.n_traj=16",
            "critic.epochs=2",
            "policy.iterations=3",
            "policy.traj_per_iteration=6",
            "policy.batch_size=3",
            "policy.lr=1e-3",
            "eval.forget_samples=8",
            "eval.retain_samples=4",
            "eval.every=2",
        ] {
            cfg.apply_override(o).unwrap();
        }
        cfg.validate().unwrap();
        cfg
    }

    fn hashes(m: &RunManifest) -> Vec<(String, String)> {
        m.artifacts.iter().map(|(k, a)| (k.clone(), a.sha256.clone())).collect()
    }

    #[test]
    fn full_run_is_deterministic_and_complete() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = tiny();
        let ma = run_full(&cfg, a.path()).unwrap();
        let mb = run_full(&cfg, b.path()).unwrap();
        assert_eq!(hashes(&ma), hashes(&mb));
        assert!(ma.verify(a.path()).is_empty());
        assert!(ma.phases.iter().all(|p| p.status == PhaseStatus::Completed));
        let names: Vec<&str> = ma.phases.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["config", "classifier", "pretrain", "critic", "unlearn_cgru", "unlearn_ddpo", "eval"]);
        assert!(!a.path().join(art::LOCK).exists());
        let metrics = fs::read_to_string(a.path().join(art::metrics_csv("cgru"))).unwrap();
        let epochs: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
        assert_eq!(epochs, ["0", "2", "3"]);
        let diag = fs::read_to_string(a.path().join(art::diagnostics_csv("ddpo"))).unwrap();
        assert_eq!(diag.lines().count(), 4);
    }

    #[test]
    fn unlearning_respects_phase_boundaries() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        run_classifier(&cfg, dir.path()).unwrap();
        run_pretrain(&cfg, dir.path()).unwrap();
        match run_unlearn(&cfg, dir.path(), Method::Cgru) {
            Err(Error::MissingArtifact(p)) => assert!(p.ends_with(art::CRITIC_CKPT)),
            other => panic!("{other:?}"),
        }
        run_unlearn(&cfg, dir.path(), Method::Ddpo).unwrap();
        run_critic(&cfg, dir.path()).unwrap();
        run_unlearn(&cfg, dir.path(), Method::Cgru).unwrap();
        let first = fs::read(dir.path().join(art::unlearned_ckpt("cgru"))).unwrap();
        for f in ["critic_loss.csv", "pretrain_loss.csv", "classifier_eval.csv", "metrics_ddpo.csv"] {
            fs::remove_file(dir.path().join(f)).unwrap();
        }
        run_unlearn(&cfg, dir.path(), Method::Cgru).unwrap();
        assert_eq!(fs::read(dir.path().join(art::unlearned_ckpt("cgru"))).unwrap(), first);

        cfg.policy.iterations = 0;
        run_unlearn(&cfg, dir.path(), Method::Cgru).unwrap();
        let base = load_eps(&cfg, &dir.path().join(art::BASE_CKPT)).unwrap();
        let out = load_eps(&cfg, &dir.path().join(art::unlearned_ckpt("cgru"))).unwrap();
        assert_eq!(base.net.params(), out.net.params());
    }

    #[test]
    fn corrupt_checkpoint_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        run_classifier(&cfg, dir.path()).unwrap();
        fs::write(dir.path().join(art::BASE_CKPT), b"JUNKJUNKJUNK").unwrap();
        let err = run_critic(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
        assert!(err.to_string().contains(art::BASE_CKPT));
    }

    #[test]
    fn failed_phase_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let err = tracked(&cfg, dir.path(), "critic", || run_critic(&cfg, dir.path()).map(|a| (a, ())));
        assert!(err.is_err());
        let m = RunManifest::load(&dir.path().join(art::MANIFEST)).unwrap();
        assert_eq!(m.phases.len(), 1);
        assert_eq!(m.phases[0].status, PhaseStatus::Failed);
        assert!(m.phases[0].error.as_deref().unwrap().contains("missing artifact"));
    }

    #[test]
    fn pretrain_budget_exhaustion_fails() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.pretrain.accuracy_threshold = 1.0;
        run_classifier(&cfg, dir.path()).unwrap();
        assert!(matches!(run_pretrain(&cfg, dir.path()), Err(Error::Phase { .. })));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("sgd".parse::<Method>().is_err());
        assert_eq!(Method::Ddpo.estimator(), Estimator::DdpoIs);
    }
}
