use super::optim::{OptimConfig, OptimizerKind};
use super::{Result, TrainError};
use crate::audio::ErasingConfig;
use crate::config::KeyValues;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub random_roll: bool,
    pub speed_p: f64,
    pub speed_rates: (f64, f64),
    pub erasing: ErasingConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { random_roll: true, speed_p: 0.5, speed_rates: (0.5, 1.5), erasing: ErasingConfig::default() }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { random_roll: false, speed_p: 0.0, erasing: ErasingConfig { p: 0.0, ..Default::default() }, ..Default::default() }
    }

    /// Whether any augmentation acts on the waveform (forcing per-epoch
    /// spectrogram extraction).
    pub fn on_waveform(&self) -> bool {
        self.random_roll || self.speed_p > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub optim: OptimConfig,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub mixup_alpha: f64,
    pub label_smoothing: f64,
    pub drop_path: f64,
    pub clip_seconds: f64,
    pub resample: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 4e-3,
            optim: OptimConfig::default(),
            optimizer: OptimizerKind::AdamW,
            epochs: 60,
            warmup_epochs: 20,
            batch_size: 32,
            eval_batch_size: 64,
            mixup_alpha: 0.8,
            label_smoothing: 0.1,
            drop_path: 0.4,
            clip_seconds: 10.0,
            resample: false,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale recipe for the synthetic dataset: 1 s clips, 15 epochs,
    /// spectrogram-domain augmentation only, no mixup or drop path.
    pub fn toy() -> Self {
        Self {
            epochs: 15,
            warmup_epochs: 2,
            mixup_alpha: 0.0,
            drop_path: 0.0,
            clip_seconds: 1.0,
            augment: AugmentConfig { random_roll: false, speed_p: 0.0, ..Default::default() },
            ..Default::default()
        }
    }
}

pub const KEYS: &[&str] = &[
    "base_lr",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "pos_lr_mult",
    "sig_lr_mult",
    "optimizer",
    "epochs",
    "warmup_epochs",
    "batch_size",
    "eval_batch_size",
    "mixup_alpha",
    "label_smoothing",
    "drop_path",
    "grad_clip",
    "clip_seconds",
    "resample",
    "random_roll",
    "speed_p",
    "speed_min",
    "speed_max",
    "erase_p",
    "erase_scale_min",
    "erase_scale_max",
    "erase_ratio_min",
    "erase_ratio_max",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Invalid(m));
        if self.warmup_epochs > self.epochs {
            return bad(format!("warmup_epochs ({}) exceeds epochs ({})", self.warmup_epochs, self.epochs));
        }
        if !(self.base_lr > 0.0) || self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("base_lr and batch sizes must be positive".into());
        }
        let o = &self.optim;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        if !(o.weight_decay >= 0.0 && o.pos_lr_mult >= 0.0 && o.sig_lr_mult >= 0.0) {
            return bad("weight_decay and lr multipliers must be non-negative".into());
        }
        if !(self.mixup_alpha >= 0.0) || !(0.0..1.0).contains(&self.label_smoothing) || !(0.0..1.0).contains(&self.drop_path) {
            return bad("need mixup_alpha ≥ 0, label_smoothing and drop_path in [0, 1)".into());
        }
        if !(self.clip_seconds > 0.0) {
            return bad("clip_seconds must be positive".into());
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.speed_p) || !(0.0 < a.speed_rates.0 && a.speed_rates.0 < a.speed_rates.1) {
            return bad("need speed_p in [0, 1] and 0 < speed_min < speed_max".into());
        }
        let e = &a.erasing;
        if !(0.0..=1.0).contains(&e.p) || !(0.0 < e.scale.0 && e.scale.0 < e.scale.1 && e.scale.1 <= 1.0) || !(0.0 < e.ratio.0 && e.ratio.0 < e.ratio.1) {
            return bad("invalid erasing parameters".into());
        }
        Ok(())
    }

    /// Overrides defaults with the keys present in `kv`.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.reject_unknown(KEYS)?;
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        set!("base_lr", self.base_lr);
        set!("beta1", self.optim.beta1);
        set!("beta2", self.optim.beta2);
        set!("adam_eps", self.optim.eps);
        set!("weight_decay", self.optim.weight_decay);
        set!("pos_lr_mult", self.optim.pos_lr_mult);
        set!("sig_lr_mult", self.optim.sig_lr_mult);
        set!("optimizer", self.optimizer);
        set!("epochs", self.epochs);
        set!("warmup_epochs", self.warmup_epochs);
        set!("batch_size", self.batch_size);
        set!("eval_batch_size", self.eval_batch_size);
        set!("mixup_alpha", self.mixup_alpha);
        set!("label_smoothing", self.label_smoothing);
        set!("drop_path", self.drop_path);
        set!("clip_seconds", self.clip_seconds);
        set!("resample", self.resample);
        set!("random_roll", self.augment.random_roll);
        set!("speed_p", self.augment.speed_p);
        set!("speed_min", self.augment.speed_rates.0);
        set!("speed_max", self.augment.speed_rates.1);
        set!("erase_p", self.augment.erasing.p);
        set!("erase_scale_min", self.augment.erasing.scale.0);
        set!("erase_scale_max", self.augment.erasing.scale.1);
        set!("erase_ratio_min", self.augment.erasing.ratio.0);
        set!("erase_ratio_max", self.augment.erasing.ratio.1);
        if let Some(clip) = kv.raw("grad_clip") {
            if clip != "none" {
                return Err(TrainError::Invalid(format!("grad_clip '{clip}' not supported (only 'none')")));
            }
        }
        self.validate()
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(kv)?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.push("base_lr", self.base_lr);
        kv.push("beta1", self.optim.beta1);
        kv.push("beta2", self.optim.beta2);
        kv.push("adam_eps", self.optim.eps);
        kv.push("weight_decay", self.optim.weight_decay);
        kv.push("pos_lr_mult", self.optim.pos_lr_mult);
        kv.push("sig_lr_mult", self.optim.sig_lr_mult);
        kv.push("optimizer", self.optimizer);
        kv.push("epochs", self.epochs);
        kv.push("warmup_epochs", self.warmup_epochs);
        kv.push("batch_size", self.batch_size);
        kv.push("eval_batch_size", self.eval_batch_size);
        kv.push("mixup_alpha", self.mixup_alpha);
        kv.push("label_smoothing", self.label_smoothing);
        kv.push("drop_path", self.drop_path);
        kv.push("grad_clip", "none");
        kv.push("clip_seconds", self.clip_seconds);
        kv.push("resample", self.resample);
        kv.push("random_roll", self.augment.random_roll);
        kv.push("speed_p", self.augment.speed_p);
        kv.push("speed_min", self.augment.speed_rates.0);
        kv.push("speed_max", self.augment.speed_rates.1);
        kv.push("erase_p", self.augment.erasing.p);
        kv.push("erase_scale_min", self.augment.erasing.scale.0);
        kv.push("erase_scale_max", self.augment.erasing.scale.1);
        kv.push("erase_ratio_min", self.augment.erasing.ratio.0);
        kv.push("erase_ratio_max", self.augment.erasing.ratio.1);
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        TrainConfig::toy().validate().unwrap();
        assert!(!TrainConfig::toy().augment.on_waveform());
        let kv = KeyValues::parse(&cfg.to_key_values().render(" = "), '=').unwrap();
        assert_eq!(TrainConfig::from_key_values(&kv).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_errors() {
        let kv = KeyValues::parse("epochs = 3\nwarmup_epochs = 1\noptimizer = lamb\n", '=').unwrap();
        let cfg = TrainConfig::from_key_values(&kv).unwrap();
        assert_eq!((cfg.epochs, cfg.warmup_epochs, cfg.optimizer), (3, 1, OptimizerKind::Lamb));
        let kv = KeyValues::parse("epochs = 3\n", '=').unwrap();
        assert!(TrainConfig::from_key_values(&kv).is_err());
        let kv = KeyValues::parse("lr = 1\n", '=').unwrap();
        assert!(matches!(TrainConfig::from_key_values(&kv), Err(TrainError::Config(_))));
        let kv = KeyValues::parse("grad_clip = 1.0\n", '=').unwrap();
        assert!(TrainConfig::from_key_values(&kv).is_err());
    }
}
