use std::path::PathBuf;

use crate::blocks::{parse_key_values, ModelConfig};
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::{AttrLossKind, LossConfig};

pub const DETERMINISTIC_ENV: &str = "DAHAR_DETERMINISTIC";

/// Everything a training run depends on. Serialized as flat `key=value`
/// text; model keys, augmentation keys and the keys below share one file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub lr_gamma: f64,
    /// Epoch indices (0-based) at whose start the rate is multiplied by
    /// `lr_gamma`. `None` means halfway and three quarters through.
    pub lr_milestones: Option<Vec<usize>>,
    pub epochs: usize,
    /// Stops after this many optimizer steps, mid-epoch if necessary.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Logs wall time as zero so logs are byte-reproducible.
    pub deterministic: bool,
}

impl TrainConfig {
    /// SGD settings from the reference recipe on the toy network.
    pub fn toy(num_attributes: usize) -> Self {
        TrainConfig {
            model: ModelConfig::toy(num_attributes),
            loss: LossConfig::default(),
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr: 0.003,
            lr_gamma: 0.1,
            lr_milestones: None,
            epochs: 20,
            max_steps: None,
            seed: 0,
            train_data: None,
            test_data: None,
            augment: true,
            augmentation: AugmentConfig::toy(),
            deterministic: false,
        }
    }

    /// Recipe for the synthetic distraction benchmark: the toy model trained
    /// from scratch, which wants a far larger step than fine-tuning does.
    pub fn benchmark(num_attributes: usize) -> Self {
        TrainConfig {
            lr: 0.1,
            epochs: 12,
            ..Self::toy(num_attributes)
        }
    }

    pub fn milestones(&self) -> Vec<usize> {
        match &self.lr_milestones {
            Some(m) => m.clone(),
            None => {
                let mut m: Vec<usize> = [self.epochs / 2, self.epochs * 3 / 4]
                    .into_iter()
                    .filter(|&e| e > 0 && e < self.epochs)
                    .collect();
                m.dedup();
                m
            }
        }
    }

    /// Learning rate during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones().iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_gamma.powi(passed as i32)
    }

    /// Honours `DAHAR_DETERMINISTIC=1`.
    pub fn apply_env(&mut self) {
        if std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1") {
            self.deterministic = true;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augmentation.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad(format!("lr must be positive and lr_gamma in (0, 1], got {} and {}", self.lr, self.lr_gamma));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight_decay non-negative".into());
        }
        if !(self.loss.mask_weight >= 0.0) {
            return bad("mask_weight must be non-negative".into());
        }
        let m = self.milestones();
        if m.windows(2).any(|w| w[0] >= w[1]) || m.iter().any(|&e| e >= self.epochs) {
            return bad(format!("lr_milestones {m:?} must ascend strictly and stay below epochs={}", self.epochs));
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive when set".into());
        }
        let (fh, fw) = self.augmentation.final_size;
        if (fh, fw) != (self.model.input_h, self.model.input_w) {
            return bad(format!(
                "augmentation final size {fh}x{fw} differs from model input {}x{}",
                self.model.input_h, self.model.input_w
            ));
        }
        Ok(())
    }

    /// Canonical text: every key, fixed order.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let milestones: Vec<String> = self.milestones().iter().map(|m| m.to_string()).collect();
        let mut s = self.model.to_text();
        s.push_str(&self.augmentation.to_text());
        s.push_str(&format!(
            "loss={}\nignore_unknown={}\nmask_weight={}\nbatch_size={}\nmomentum={}\nweight_decay={}\nlr={}\nlr_gamma={}\nlr_milestones={}\nepochs={}\nmax_steps={}\nseed={}\ntrain_data={}\ntest_data={}\naugment={}\ndeterministic={}\n",
            self.loss.kind,
            self.loss.ignore_unknown,
            self.loss.mask_weight,
            self.batch_size,
            self.momentum,
            self.weight_decay,
            self.lr,
            self.lr_gamma,
            milestones.join(","),
            self.epochs,
            self.max_steps.map(|m| m.to_string()).unwrap_or_default(),
            self.seed,
            path(&self.train_data),
            path(&self.test_data),
            self.augment,
            self.deterministic,
        ));
        s
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if self.model.set(key, v)? || self.augmentation.set(key, v)? {
            return Ok(());
        }
        let num = |v: &str| -> Result<f64> { v.parse().map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}"))) };
        let int = |v: &str| -> Result<usize> { v.parse().map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}"))) };
        let flag = |v: &str| match v {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
        };
        let opt_path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "loss" => self.loss.kind = v.parse()?,
            "ignore_unknown" => self.loss.ignore_unknown = flag(v)?,
            "mask_weight" => self.loss.mask_weight = num(v)?,
            "batch_size" => self.batch_size = int(v)?,
            "momentum" => self.momentum = num(v)?,
            "weight_decay" => self.weight_decay = num(v)?,
            "lr" => self.lr = num(v)?,
            "lr_gamma" => self.lr_gamma = num(v)?,
            "lr_milestones" => {
                self.lr_milestones = Some(if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| int(s.trim())).collect::<Result<_>>()?
                })
            }
            "epochs" => self.epochs = int(v)?,
            "max_steps" => self.max_steps = if v.is_empty() { None } else { Some(int(v)?) },
            "seed" => self.seed = v.parse().map_err(|_| Error::Config(format!("seed: expected an integer, got {v:?}")))?,
            "train_data" => self.train_data = opt_path(v),
            "test_data" => self.test_data = opt_path(v),
            "augment" => self.augment = flag(v)?,
            "deterministic" => self.deterministic = flag(v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses over [`TrainConfig::toy`] defaults. `num_attributes` is taken
    /// from the text when present, otherwise 8.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let mut cfg = TrainConfig::toy(8);
        for (k, v) in &kv {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Documentation for every configuration key, printed by `--help`.
pub const CONFIG_KEYS_HELP: &str = "\
Config files hold one key=value per line; # starts a comment.
Training keys (defaults in brackets):
  loss [bce]             bce | wbce | mixed
  ignore_unknown [true]  drop 'u' labels from the loss instead of treating them as negative
  mask_weight [1]        weight of the mask-supervision term
  batch_size [32]  momentum [0.9]  weight_decay [0.0005]
  lr [0.003]  lr_gamma [0.1]
  lr_milestones          comma-separated 0-based epochs; default epochs/2 and 3*epochs/4
  epochs [20]  max_steps [unset]  seed [0]
  train_data / test_data dataset directories
  augment [true]         random multi-scale corner/centre crops, flips, colour jitter
  deterministic [false]  wall time logged as 0; also set by DAHAR_DETERMINISTIC=1
Augmentation keys: resize_h resize_w [73] crop_sizes [73,64,55,48,37] final_h final_w [64]
  flip_prob [0.5] jitter [0.2]
Model keys: stage_blocks [2,2,2] stage_widths [16,32,64] stem_width [16] stem_kernel [3]
  self_mask_stages [1] fusion_tap_stages [0,1,2] fusion_width [32] attention_hidden [32]
  num_attributes [8] input_h input_w [64] enable_self_mask enable_fusion_multilevel
  enable_masked_attention enable_side_branch [true]
Evaluation averages the five crop logits before the sigmoid.";

pub(crate) fn loss_kind_needs_omega(kind: AttrLossKind) -> bool {
    kind != AttrLossKind::Bce
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule() {
        let cfg = TrainConfig::toy(8);
        assert_eq!(cfg.milestones(), vec![10, 15]);
        assert_eq!(cfg.lr_at(0), 0.003);
        assert!((cfg.lr_at(12) - 3e-4).abs() < 1e-15);
        assert!((cfg.lr_at(15) - 3e-5).abs() < 1e-15);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::toy(5);
        cfg.loss.kind = AttrLossKind::Mixed;
        cfg.max_steps = Some(300);
        cfg.train_data = Some("data/train".into());
        cfg.lr_milestones = Some(vec![3]);
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        assert!(TrainConfig::from_text("lr=-1").is_err());
        assert!(TrainConfig::from_text("epochs=4\nlr_milestones=2,1").is_err());
        assert!(TrainConfig::from_text("epochs=4\nlr_milestones=4").is_err());
        assert!(TrainConfig::from_text("input_h=32").is_err());
        assert!(TrainConfig::from_text("colour=blue").is_err());
    }
}
