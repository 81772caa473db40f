//! Terminal rewards on final samples.
//!
//! The unlearning reward is the complement probability of the target class
//! under a trained classifier, scaled to `[0, scale]`. A smooth distance-to-mode
//! reward serves the estimator comparisons.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffusion::{LabeledPoint, MixtureSpec, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::{Activation, AdamState, Layer, Network, Tensor};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    ClassifierComplement,
    ModeDistance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub kind: RewardKind,
    /// Class whose probability is penalised; required for the classifier reward.
    pub target_class: Option<usize>,
    pub scale: f64,
}

impl RewardSpec {
    pub fn classifier(target: usize) -> Self {
        RewardSpec {
            kind: RewardKind::ClassifierComplement,
            target_class: Some(target),
            scale: 10.0,
        }
    }

    pub fn mode_distance() -> Self {
        RewardSpec {
            kind: RewardKind::ModeDistance,
            target_class: None,
            scale: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::usage("reward scale must be positive"));
        }
        if self.kind == RewardKind::ClassifierComplement && self.target_class.is_none() {
            return Err(Error::usage("classifier reward needs a target class"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            hidden: 64,
            epochs: 3,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

/// Softmax MLP over points.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub net: Network,
    pub classes: usize,
}

impl Classifier {
    pub fn layers(data_dim: usize, hidden: usize, classes: usize) -> Vec<Layer> {
        vec![
            Layer::Dense { inputs: data_dim, outputs: hidden },
            Layer::Act(Activation::Tanh),
            Layer::Dense { inputs: hidden, outputs: hidden },
            Layer::Act(Activation::Tanh),
            Layer::Dense { inputs: hidden, outputs: classes },
            Layer::Act(Activation::Softmax),
        ]
    }

    pub fn from_network(net: Network) -> Result<Self> {
        if net.layers().last() != Some(&Layer::Act(Activation::Softmax)) {
            return Err(Error::usage("classifier network must end in softmax"));
        }
        let classes = net.output_dim();
        Ok(Classifier { net, classes })
    }

    pub fn data_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Class probabilities for rows of `xs` (`n x classes`).
    pub fn probs(&self, xs: &[f64]) -> Result<Tensor> {
        let d = self.data_dim();
        let input = Tensor::matrix(xs.len() / d.max(1), d, xs.to_vec())?;
        self.net.forward(&input, None)
    }

    pub fn predict(&self, xs: &[f64]) -> Result<Vec<usize>> {
        let p = self.probs(xs)?;
        Ok((0..p.rows()).map(|i| argmax(p.row(i))).collect())
    }

    pub fn accuracy(&self, data: &[LabeledPoint]) -> Result<f64> {
        let xs: Vec<f64> = data.iter().flat_map(|p| p.x.iter().copied()).collect();
        let pred = self.predict(&xs)?;
        let hits = pred.iter().zip(data).filter(|(p, d)| **p == d.ctx.class_id).count();
        Ok(hits as f64 / data.len() as f64)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy training of a fresh classifier with Adam.
pub fn train_classifier(
    data: &[LabeledPoint],
    classes: usize,
    cfg: &ClassifierTrainConfig,
    rng: &mut Rng,
) -> Result<Classifier> {
    let mut seen = vec![false; classes];
    for p in data {
        if p.ctx.class_id >= classes {
            return Err(Error::usage(format!("label {} outside 0..{classes}", p.ctx.class_id)));
        }
        seen[p.ctx.class_id] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::usage("classifier training needs at least two classes present"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::usage("batch size must be positive"));
    }
    let d = data[0].x.len();
    let net = Network::init(Classifier::layers(d, cfg.hidden, classes), rng)?;
    let mut clf = Classifier { net, classes };
    let mut opt = AdamState::new(clf.net.param_count(), cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<f64> = chunk.iter().flat_map(|&i| data[i].x.iter().copied()).collect();
            let input = Tensor::matrix(chunk.len(), d, xs)?;
            let tape = clf.net.forward_tape(&input, None)?;
            let p = tape.output();
            let n = chunk.len() as f64;
            // d(-log p_y)/dp = -1/p_y at the label
            let mut g = vec![0.0; p.len()];
            for (r, &i) in chunk.iter().enumerate() {
                let y = data[i].ctx.class_id;
                g[r * classes + y] = -1.0 / (p[r * classes + y].max(1e-300) * n);
            }
            let mut grads = vec![0.0; clf.net.param_count()];
            clf.net.backward_tape(&tape, &g, &mut grads)?;
            opt.update(clf.net.params_mut(), &grads)?;
        }
    }
    Ok(clf)
}

/// `scale * (1 - p_target)`.
pub fn complement_reward(p_target: f64, scale: f64) -> f64 {
    (scale * (1.0 - p_target)).clamp(0.0, scale)
}

pub fn classifier_reward(clf: &Classifier, x0: &[f64], target: usize, scale: f64) -> Result<f64> {
    if target >= clf.classes {
        return Err(Error::usage(format!("target class {target} outside 0..{}", clf.classes)));
    }
    let p = clf.probs(x0)?;
    Ok(complement_reward(p.data()[target], scale))
}

/// `scale * exp(-||x0 - center||^2)`.
pub fn mode_distance_reward(x0: &[f64], center: &[f64], scale: f64) -> f64 {
    let sq: f64 = x0.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
    scale * (-sq).exp()
}

/// Everything needed to score a final sample.
#[derive(Clone, Copy, Debug)]
pub struct RewardModel<'a> {
    pub spec: RewardSpec,
    pub classifier: Option<&'a Classifier>,
    /// Mode centres for the distance reward; each context is scored against its own mode.
    pub mixture: MixtureSpec,
}

impl<'a> RewardModel<'a> {
    pub fn new(spec: RewardSpec, classifier: Option<&'a Classifier>, mixture: MixtureSpec) -> Result<Self> {
        spec.validate()?;
        if spec.kind == RewardKind::ClassifierComplement && classifier.is_none() {
            return Err(Error::usage("classifier reward requested but no classifier was provided"));
        }
        Ok(RewardModel { spec, classifier, mixture })
    }

    /// Rewards for final samples `x0s` (`n x d`) under their prompt classes.
    pub fn score(&self, x0s: &[f64], classes: &[usize]) -> Result<Vec<f64>> {
        match self.spec.kind {
            RewardKind::ClassifierComplement => {
                let clf = self.classifier.expect("checked in new");
                let target = self.spec.target_class.expect("validated");
                if target >= clf.classes {
                    return Err(Error::usage(format!("target class {target} outside 0..{}", clf.classes)));
                }
                if classes.is_empty() {
                    return Ok(Vec::new());
                }
                let p = clf.probs(x0s)?;
                Ok((0..p.rows())
                    .map(|i| complement_reward(p.row(i)[target], self.spec.scale))
                    .collect())
            }
            RewardKind::ModeDistance => {
                let d = if classes.is_empty() { 0 } else { x0s.len() / classes.len() };
                Ok(classes
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        mode_distance_reward(&x0s[i * d..(i + 1) * d], &self.mixture.center(c), self.spec.scale)
                    })
                    .collect())
            }
        }
    }
}

/// Sets each trajectory's terminal reward from its `x_0` and context.
pub fn assign_rewards(trajs: &mut [Trajectory], model: &RewardModel<'_>) -> Result<()> {
    if trajs.is_empty() {
        return Ok(());
    }
    let x0s: Vec<f64> = trajs.iter().flat_map(|t| t.x0().iter().copied()).collect();
    let classes: Vec<usize> = trajs.iter().map(|t| t.ctx.class_id).collect();
    let r = model.score(&x0s, &classes)?;
    for (t, r) in trajs.iter_mut().zip(r) {
        t.reward = Some(r);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{sample_dataset, Context};
    use crate::rng;

    /// A classifier whose output is the fixed distribution `probs` everywhere.
    pub(crate) fn constant_classifier(probs: &[f64]) -> Classifier {
        let k = probs.len();
        let mut net = Network::zeros(Classifier::layers(2, 4, k)).unwrap();
        let logits: Vec<f64> = probs.iter().map(|p| p.max(1e-300).ln()).collect();
        net.param_slice_mut("4.bias").unwrap().copy_from_slice(&logits);
        Classifier::from_network(net).unwrap()
    }

    #[test]
    fn complement_endpoints_and_linearity() {
        assert_eq!(complement_reward(1.0, 10.0), 0.0);
        assert_eq!(complement_reward(0.0, 10.0), 10.0);
        assert_eq!(complement_reward(0.25, 10.0), 7.5);
        let clf = constant_classifier(&[0.25, 0.75]);
        assert!((classifier_reward(&clf, &[0.0, 0.0], 0, 10.0).unwrap() - 7.5).abs() < 1e-12);
        assert!(classifier_reward(&clf, &[0.0, 0.0], 2, 10.0).is_err());
    }

    #[test]
    fn distance_reward_cases() {
        assert_eq!(mode_distance_reward(&[1.0, 2.0], &[1.0, 2.0], 10.0), 10.0);
        assert!(mode_distance_reward(&[10.0, 0.0], &[0.0, 0.0], 10.0) < 1e-40 * 10.0);
        let r = mode_distance_reward(&[1.0, 0.0], &[0.0, 0.0], 10.0);
        assert!((r - 10.0 * (-1.0f64).exp()).abs() < 1e-12);
        assert!((r - 3.6788).abs() < 1e-4);
    }

    #[test]
    fn spec_validation() {
        assert!(RewardSpec { target_class: None, ..RewardSpec::classifier(0) }.validate().is_err());
        assert!(RewardSpec { scale: 0.0, ..RewardSpec::mode_distance() }.validate().is_err());
        assert!(RewardModel::new(RewardSpec::classifier(0), None, MixtureSpec::default()).is_err());
    }

    fn traj(class: usize, x0: [f64; 2]) -> Trajectory {
        Trajectory {
            ctx: Context::new(class, 8).unwrap(),
            dim: 2,
            steps: 1,
            latents: vec![0.0, 0.0, x0[0], x0[1]],
            logp_old: vec![0.0],
            reward: None,
            advantages: None,
            seed: 0,
            stream: 0,
        }
    }

    #[test]
    fn assign_with_oracle_classifier() {
        let mut probs = vec![0.955 / 7.0; 8];
        probs[0] = 0.045;
        let clf = constant_classifier(&probs);
        let model = RewardModel::new(RewardSpec::classifier(0), Some(&clf), MixtureSpec::default()).unwrap();
        let mut ts = vec![traj(0, [1.0, 1.0]), traj(3, [0.0, -2.0])];
        assign_rewards(&mut ts, &model).unwrap();
        for t in &ts {
            assert!((t.reward.unwrap() - 9.55).abs() < 1e-12);
        }
        let mut empty: Vec<Trajectory> = Vec::new();
        assign_rewards(&mut empty, &model).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn assigned_rewards_match_standalone_evaluation() {
        let mix = MixtureSpec::default();
        let clf = train_classifier(
            &sample_dataset(&mix, 2000, &mut rng::stream(1, 0)).unwrap(),
            8,
            &ClassifierTrainConfig { epochs: 1, ..Default::default() },
            &mut rng::stream(1, 1),
        )
        .unwrap();
        let model = RewardModel::new(RewardSpec::classifier(2), Some(&clf), mix).unwrap();
        let mut ts: Vec<_> = (0..20).map(|i| traj(i % 8, [i as f64 * 0.3 - 3.0, 1.0 - i as f64 * 0.1])).collect();
        assign_rewards(&mut ts, &model).unwrap();
        for t in &ts {
            let r = classifier_reward(&clf, t.x0(), 2, 10.0).unwrap();
            assert_eq!(r.to_bits(), t.reward.unwrap().to_bits());
        }
        let dist = RewardModel::new(RewardSpec::mode_distance(), None, mix).unwrap();
        assign_rewards(&mut ts, &dist).unwrap();
        for t in &ts {
            let r = mode_distance_reward(t.x0(), &mix.center(t.ctx.class_id), 10.0);
            assert_eq!(r.to_bits(), t.reward.unwrap().to_bits());
        }
    }

    #[test]
    fn single_class_training_rejected() {
        let data: Vec<_> = (0..10)
            .map(|i| LabeledPoint { x: vec![i as f64, 0.0], ctx: Context::new(1, 8).unwrap() })
            .collect();
        let err = train_classifier(&data, 8, &ClassifierTrainConfig::default(), &mut rng::stream(0, 0));
        assert!(err.is_err());
    }

    #[test]
    fn trained_classifier_quality() {
        let mix = MixtureSpec::default();
        let train = sample_dataset(&mix, 8000, &mut rng::stream(21, 0)).unwrap();
        let held = sample_dataset(&mix, 2000, &mut rng::stream(21, 1)).unwrap();
        let clf = train_classifier(&train, 8, &ClassifierTrainConfig::default(), &mut rng::stream(21, 2)).unwrap();
        let acc = clf.accuracy(&held).unwrap();
        assert!(acc >= 0.95, "held-out accuracy {acc}");
        let xs: Vec<f64> = held.iter().take(200).flat_map(|p| p.x.iter().copied()).collect();
        let p = clf.probs(&xs).unwrap();
        for i in 0..p.rows() {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for k in 0..8 {
            assert_eq!(clf.predict(&mix.center(k)).unwrap(), vec![k]);
        }
    }
}
