//! Run configuration: TOML on disk, dotted-key overrides, a content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::critic::{CriticSpec, CriticTrainConfig};
use crate::diffusion::{EpsNetSpec, MixtureSpec, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::EvalProtocol;
use crate::policy_grad::EstimatorConfig;
use crate::rewards::{ClassifierTrainConfig, RewardKind, RewardSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub embed_dim: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub radius: f64,
    pub stddev: f64,
    pub train_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub max_steps: usize,
    pub min_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub accuracy_threshold: f64,
    pub eval_samples_per_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub kind: RewardKind,
    /// The class to forget; also the classifier-reward target.
    pub target_class: usize,
    pub scale: f64,
    /// Share of policy and critic prompts that use the forget class.
    pub forget_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    pub n_traj: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub iterations: usize,
    pub traj_per_iteration: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub lr: f64,
    pub inner_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub forget_samples: usize,
    pub retain_samples: usize,
    pub seed: u64,
    /// Evaluate every this many policy iterations (and always after the last).
    pub every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagConfig {
    pub variance_batches: usize,
    pub variance_batch_size: usize,
    pub bootstrap_resamples: usize,
    pub unbiased_sizes: Vec<usize>,
    pub toy_theta: f64,
    pub toy_samples: usize,
    pub ablation_seeds: usize,
    pub ablation_n_traj: usize,
    pub ablation_epochs: usize,
    pub ablation_reward: RewardKind,
    pub ablation_holdout: f64,
    pub probe_states: usize,
    pub mc_rollouts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub diffusion: DiffusionConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub classifier: ClassifierTrainConfig,
    pub reward: RewardConfig,
    pub critic: CriticConfig,
    pub policy: PolicyConfig,
    pub estimator: EstimatorConfig,
    pub eval: EvalConfig,
    pub diag: DiagConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            diffusion: DiffusionConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            classifier: ClassifierTrainConfig::default(),
            reward: RewardConfig::default(),
            critic: CriticConfig::default(),
            policy: PolicyConfig::default(),
            estimator: EstimatorConfig::default(),
            eval: EvalConfig::default(),
            diag: DiagConfig::default(),
        }
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.2,
            embed_dim: 32,
            hidden: 128,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 8,
            radius: 4.0,
            stddev: 0.3,
            train_size: 8000,
        }
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            max_steps: 8000,
            min_steps: 2000,
            batch_size: 128,
            lr: 1e-3,
            eval_every: 1000,
            accuracy_threshold: 0.9,
            eval_samples_per_class: 100,
        }
    }
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            kind: RewardKind::ClassifierComplement,
            target_class: 0,
            scale: 10.0,
            forget_fraction: 0.5,
        }
    }
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            hidden: 64,
            embed_dim: 32,
            n_traj: 512,
            epochs: 20,
            batch_size: 128,
            lr: 1e-3,
        }
    }
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            iterations: 50,
            traj_per_iteration: 64,
            batch_size: 64,
            grad_accum: 2,
            lr: 2e-5,
            inner_epochs: 1,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            forget_samples: 200,
            retain_samples: 100,
            seed: 7,
            every: 10,
        }
    }
}

impl Default for DiagConfig {
    fn default() -> Self {
        DiagConfig {
            variance_batches: 20,
            variance_batch_size: 16,
            bootstrap_resamples: 20,
            unbiased_sizes: vec![100, 1000, 10000],
            toy_theta: 0.5,
            toy_samples: 10000,
            ablation_seeds: 5,
            ablation_n_traj: 256,
            ablation_epochs: 20,
            ablation_reward: RewardKind::ModeDistance,
            ablation_holdout: 0.2,
            probe_states: 50,
            mc_rollouts: 1000,
        }
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(&toml_error_key(&e), e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config always serialises")
    }

    /// Applies `key=value`, where `key` is a dotted path to an existing field
    /// and `value` must parse as that field's type. Cross-field constraints are
    /// left to [`RunConfig::validate`], so overrides may be applied in any order.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(assignment, "override must look like key=value"))?;
        let (key, raw) = (key.trim(), raw.trim());
        let mut root = toml::Value::try_from(&*self).expect("run config always serialises");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| config_err(key, "unknown configuration key"))?;
        }
        *slot = parse_like(slot, raw).map_err(|reason| config_err(key, reason))?;
        *self = root.try_into().map_err(|e: toml::de::Error| config_err(key, e.message()))?;
        Ok(())
    }

    /// SHA-256 over a key-sorted serialisation with `out_dir` removed, so the
    /// hash ignores field order in the file and where the run is written.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("run config always serialises");
        if let Some(m) = v.as_object_mut() {
            m.remove("out_dir");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn run_id(&self) -> String {
        self.hash()[..12].to_string()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion.steps, self.diffusion.beta_start, self.diffusion.beta_end)
    }

    pub fn mixture(&self) -> MixtureSpec {
        MixtureSpec {
            classes: self.data.classes,
            radius: self.data.radius,
            stddev: self.data.stddev,
        }
    }

    pub fn eps_spec(&self) -> EpsNetSpec {
        EpsNetSpec {
            data_dim: 2,
            classes: self.data.classes,
            embed_dim: self.diffusion.embed_dim,
            hidden: self.diffusion.hidden,
            steps: self.diffusion.steps,
        }
    }

    pub fn critic_spec(&self) -> CriticSpec {
        CriticSpec {
            data_dim: 2,
            classes: self.data.classes,
            hidden: self.critic.hidden,
            embed_dim: self.critic.embed_dim,
            steps: self.diffusion.steps,
        }
    }

    pub fn critic_train(&self) -> CriticTrainConfig {
        CriticTrainConfig {
            epochs: self.critic.epochs,
            batch_size: self.critic.batch_size,
            lr: self.critic.lr,
        }
    }

    pub fn reward_spec(&self) -> RewardSpec {
        self.reward_spec_of(self.reward.kind)
    }

    pub fn reward_spec_of(&self, kind: RewardKind) -> RewardSpec {
        RewardSpec {
            kind,
            target_class: (kind == RewardKind::ClassifierComplement).then_some(self.reward.target_class),
            scale: self.reward.scale,
        }
    }

    pub fn eval_protocol(&self) -> EvalProtocol {
        EvalProtocol {
            forget_samples: self.eval.forget_samples,
            retain_samples: self.eval.retain_samples,
            seed: self.eval.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("diffusion.steps", self.diffusion.steps),
            ("diffusion.hidden", self.diffusion.hidden),
            ("data.classes", self.data.classes),
            ("data.train_size", self.data.train_size),
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("pretrain.eval_every", self.pretrain.eval_every),
            ("pretrain.eval_samples_per_class", self.pretrain.eval_samples_per_class),
            ("classifier.hidden", self.classifier.hidden),
            ("classifier.epochs", self.classifier.epochs),
            ("classifier.batch_size", self.classifier.batch_size),
            ("critic.hidden", self.critic.hidden),
            ("critic.n_traj", self.critic.n_traj),
            ("critic.epochs", self.critic.epochs),
            ("critic.batch_size", self.critic.batch_size),
            ("policy.traj_per_iteration", self.policy.traj_per_iteration),
            ("policy.batch_size", self.policy.batch_size),
            ("policy.grad_accum", self.policy.grad_accum),
            ("policy.inner_epochs", self.policy.inner_epochs),
            ("eval.forget_samples", self.eval.forget_samples),
            ("eval.retain_samples", self.eval.retain_samples),
            ("eval.every", self.eval.every),
            ("diag.variance_batches", self.diag.variance_batches),
            ("diag.variance_batch_size", self.diag.variance_batch_size),
            ("diag.bootstrap_resamples", self.diag.bootstrap_resamples),
            ("diag.toy_samples", self.diag.toy_samples),
            ("diag.ablation_seeds", self.diag.ablation_seeds),
            ("diag.ablation_n_traj", self.diag.ablation_n_traj),
            ("diag.ablation_epochs", self.diag.ablation_epochs),
            ("diag.probe_states", self.diag.probe_states),
            ("diag.mc_rollouts", self.diag.mc_rollouts),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(config_err(key, "must be at least 1"));
            }
        }
        for (key, v) in [("diffusion.embed_dim", self.diffusion.embed_dim), ("critic.embed_dim", self.critic.embed_dim)] {
            if v == 0 || v % 2 != 0 {
                return Err(config_err(key, "must be a positive even number"));
            }
        }
        let d = &self.diffusion;
        if !(d.beta_start > 0.0 && d.beta_start <= d.beta_end && d.beta_end < 1.0) {
            return Err(config_err("diffusion.beta_start", "need 0 < beta_start <= beta_end < 1"));
        }
        if self.data.classes < 2 {
            return Err(config_err("data.classes", "need at least two classes"));
        }
        if !(self.data.radius > 0.0) || !(self.data.stddev > 0.0) {
            return Err(config_err("data.stddev", "radius and stddev must be positive"));
        }
        if self.reward.target_class >= self.data.classes {
            return Err(config_err("reward.target_class", format!("must be below data.classes = {}", self.data.classes)));
        }
        if !(0.0..=1.0).contains(&self.reward.forget_fraction) {
            return Err(config_err("reward.forget_fraction", "must lie in [0, 1]"));
        }
        if self.pretrain.min_steps > self.pretrain.max_steps {
            return Err(config_err("pretrain.min_steps", "must not exceed pretrain.max_steps"));
        }
        if !(0.0..=1.0).contains(&self.pretrain.accuracy_threshold) {
            return Err(config_err("pretrain.accuracy_threshold", "must lie in [0, 1]"));
        }
        for (key, lr) in [
            ("pretrain.lr", self.pretrain.lr),
            ("classifier.lr", self.classifier.lr),
            ("critic.lr", self.critic.lr),
            ("policy.lr", self.policy.lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(config_err(key, "must be a positive finite number"));
            }
        }
        if !(self.diag.ablation_holdout > 0.0 && self.diag.ablation_holdout < 1.0) {
            return Err(config_err("diag.ablation_holdout", "must lie in (0, 1)"));
        }
        if self.diag.unbiased_sizes.is_empty() || self.diag.unbiased_sizes.contains(&0) {
            return Err(config_err("diag.unbiased_sizes", "need at least one positive size"));
        }
        self.reward_spec().validate()?;
        self.estimator.validate()
    }

    /// Prompt classes for `n` trajectories: the first `round(n * forget_fraction)`
    /// use the forget class, the rest cycle through the retain classes.
    pub fn prompt_mix(&self, n: usize) -> Vec<usize> {
        let forget = (n as f64 * self.reward.forget_fraction).round() as usize;
        let retain: Vec<usize> = (0..self.data.classes).filter(|&c| c != self.reward.target_class).collect();
        (0..n)
            .map(|i| if i < forget { self.reward.target_class } else { retain[(i - forget) % retain.len()] })
            .collect()
    }
}

fn toml_error_key(e: &toml::de::Error) -> String {
    let msg = e.message();
    msg.split('`').nth(1).unwrap_or("config").to_string()
}

fn parse_like(current: &toml::Value, raw: &str) -> std::result::Result<toml::Value, String> {
    use toml::Value;
    let bad = |ty: &str| format!("expected {ty}, got `{raw}`");
    Ok(match current {
        Value::Integer(_) => Value::Integer(raw.parse().map_err(|_| bad("an integer"))?),
        Value::Float(_) => {
            let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
            Value::Float(v)
        }
        Value::Boolean(_) => Value::Boolean(raw.parse().map_err(|_| bad("true or false"))?),
        Value::String(_) => Value::String(raw.trim_matches('"').to_string()),
        Value::Array(_) => {
            let doc: toml::Table = format!("v = {raw}").parse().map_err(|_| bad("an array"))?;
            match doc.get("v") {
                Some(v @ Value::Array(_)) => v.clone(),
                _ => return Err(bad("an array")),
            }
        }
        _ => return Err("this key cannot be overridden".into()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn omitted_fields_take_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 4\n[policy]\niterations = 3\n").unwrap();
        let mut want = RunConfig::default();
        want.seed = 4;
        want.policy.iterations = 3;
        assert_eq!(cfg, want);
    }

    #[test]
    fn overrides_are_type_checked() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("policy.iterations=7").unwrap();
        assert_eq!(cfg.policy.iterations, 7);
        cfg.apply_override("policy.lr = 1e-3").unwrap();
        assert_eq!(cfg.policy.lr, 1e-3);
        cfg.apply_override("estimator.normalize_advantages=true").unwrap();
        assert!(cfg.estimator.normalize_advantages);
        cfg.apply_override("reward.kind=mode_distance").unwrap();
        assert_eq!(cfg.reward.kind, RewardKind::ModeDistance);
        cfg.apply_override("diag.unbiased_sizes=[10, 20]").unwrap();
        assert_eq!(cfg.diag.unbiased_sizes, vec![10, 20]);

        let err = cfg.apply_override("policy.iterations=banana").unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("policy.iterations"), "{err}");
        assert!(cfg.apply_override("policy.nope=1").is_err());
        assert!(cfg.apply_override("policy").is_err());
        assert!(cfg.apply_override("reward.kind=bogus").is_err());
        assert_eq!(cfg.policy.iterations, 7);
        cfg.apply_override("diffusion.steps=0").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.apply_override("pretrain.max_steps=40").unwrap();
        cfg.apply_override("pretrain.min_steps=20").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.diffusion.steps = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.reward.target_class = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.critic.embed_dim = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.diffusion.beta_end = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::default().to_toml_string();
        text.push_str("\n[extra]\nx = 1\n");
        let err = RunConfig::from_toml_str(&text).unwrap_err();
        assert!(err.is_usage());
    }

    #[test]
    fn hash_ignores_order_and_output_dir() {
        let cfg = RunConfig::default();
        let table: toml::Table = cfg.to_toml_string().parse().unwrap();
        let mut scalars = String::new();
        let mut sections = String::new();
        for (k, v) in table.iter().rev() {
            match v {
                toml::Value::Table(t) => {
                    sections.push_str(&format!("[{k}]\n"));
                    for (ik, iv) in t.iter().rev() {
                        sections.push_str(&format!("{ik} = {iv}\n"));
                    }
                }
                _ => scalars.push_str(&format!("{k} = {v}\n")),
            }
        }
        let reordered = format!("{scalars}{sections}");
        assert_ne!(reordered, cfg.to_toml_string());
        assert_eq!(RunConfig::from_toml_str(&reordered).unwrap().hash(), cfg.hash());
        let mut b = cfg.clone();
        b.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(b.hash(), cfg.hash());
        let mut c = cfg.clone();
        c.seed = 1;
        assert_ne!(c.hash(), cfg.hash());
        assert_eq!(cfg.run_id().len(), 12);
    }

    #[test]
    fn prompt_mix_split() {
        let cfg = RunConfig::default();
        let p = cfg.prompt_mix(16);
        assert_eq!(p.iter().filter(|&&c| c == 0).count(), 8);
        assert_eq!(&p[8..15], &[1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(p[15], 1);
    }
}
