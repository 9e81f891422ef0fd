//! `key = value` configuration files.
//!
//! Keys carry a dotted section prefix (`ufla.mask_ratio`); `#` starts a
//! comment. Every key is optional and defaults to the built-in value, but
//! unknown or repeated keys are rejected.

use std::fmt;
use std::path::Path;

use crate::data::LseConfig;
use crate::eval::FinetuneConfig;
use crate::ufla::UflaConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_videos: usize,
    pub batch_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_videos: 4, batch_images: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub seed: u64,
    pub ufla: UflaConfig,
    pub lse: LseConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
}

enum Slot<'a> {
    Int(&'a mut usize),
    Seed(&'a mut u64),
    Real(&'a mut f64),
}

impl Config {
    fn slots(&mut self) -> Vec<(&'static str, Slot<'_>)> {
        use Slot::*;
        let u = &mut self.ufla;
        let e = &mut u.encoder;
        let [th, tt, tl] = &mut self.lse.tau;
        vec![
            ("seed", Seed(&mut self.seed)),
            ("encoder.image_height", Int(&mut e.image_extent.0)),
            ("encoder.image_width", Int(&mut e.image_extent.1)),
            ("encoder.frame_height", Int(&mut e.frame_extent.0)),
            ("encoder.frame_width", Int(&mut e.frame_extent.1)),
            ("encoder.image_patch", Int(&mut e.image_patch)),
            ("encoder.video_patch", Int(&mut e.video_patch)),
            ("encoder.d", Int(&mut e.d)),
            ("encoder.depth", Int(&mut e.depth)),
            ("encoder.heads", Int(&mut e.heads)),
            ("encoder.frames", Int(&mut e.frames)),
            ("encoder.mlp_ratio", Int(&mut e.mlp_ratio)),
            ("ufla.queries", Int(&mut u.queries)),
            ("ufla.resampler_heads", Int(&mut u.resampler_heads)),
            ("ufla.prototypes", Int(&mut u.prototypes)),
            ("ufla.head_hidden", Int(&mut u.head_hidden)),
            ("ufla.head_bottleneck", Int(&mut u.head_bottleneck)),
            ("ufla.student_temp", Real(&mut u.student_temp)),
            ("ufla.teacher_temp", Real(&mut u.teacher_temp)),
            ("ufla.center_momentum", Real(&mut u.center_momentum)),
            ("ufla.mask_ratio", Real(&mut u.mask_ratio)),
            ("ufla.koleo_eps", Real(&mut u.koleo_eps)),
            ("ufla.align_temp", Real(&mut u.align_temp)),
            ("ufla.lambda_feature", Real(&mut u.weights.feature)),
            ("ufla.lambda_masking", Real(&mut u.weights.masking)),
            ("ufla.lambda_koleo", Real(&mut u.weights.koleo)),
            ("ufla.lambda_alignment", Real(&mut u.weights.alignment)),
            ("ufla.ema", Real(&mut u.ema)),
            ("ufla.lr", Real(&mut u.lr)),
            ("ufla.clip", Real(&mut u.clip)),
            ("lse.keypoints", Int(&mut self.lse.keypoints)),
            ("lse.areas", Int(&mut self.lse.areas)),
            ("lse.tau_head", Real(th)),
            ("lse.tau_torso", Real(tt)),
            ("lse.tau_legs", Real(tl)),
            ("lse.height", Int(&mut self.lse.extent.0)),
            ("lse.width", Int(&mut self.lse.extent.1)),
            ("lse.sigma", Real(&mut self.lse.sigma)),
            ("lse.score_noise", Real(&mut self.lse.score_noise)),
            ("train.batch_videos", Int(&mut self.train.batch_videos)),
            ("train.batch_images", Int(&mut self.train.batch_images)),
            ("finetune.lr", Real(&mut self.finetune.lr)),
            ("finetune.clip", Real(&mut self.finetune.clip)),
            ("finetune.identities_per_batch", Int(&mut self.finetune.identities_per_batch)),
            ("finetune.clips_per_identity", Int(&mut self.finetune.clips_per_identity)),
            ("finetune.margin", Real(&mut self.finetune.margin)),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Config::default().slots().into_iter().map(|(k, _)| k).collect()
    }

    /// Parses and validates.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| ConfigError::Syntax { line, msg: format!("expected `key = value`, got `{body}`") })?;
            let mut slots = cfg.slots();
            let Some((name, slot)) = slots.iter_mut().find(|(k, _)| *k == key) else {
                return Err(ConfigError::UnknownKey { line, key: key.into() });
            };
            if !seen.insert(*name) {
                return Err(ConfigError::Duplicate { line, key: key.into() });
            }
            let bad = |what: &str| ConfigError::Syntax { line, msg: format!("`{key}` expects {what}, got `{value}`") };
            match slot {
                Slot::Int(v) => **v = value.parse().map_err(|_| bad("a non-negative integer"))?,
                Slot::Seed(v) => **v = value.parse().map_err(|_| bad("a non-negative integer"))?,
                Slot::Real(v) => **v = value.parse().map_err(|_| bad("a number"))?,
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = ConfigError::Invalid;
        self.ufla.validate().map_err(|e| inv(e.to_string()))?;
        self.lse.validate().map_err(inv)?;
        self.finetune.validate().map_err(inv)?;
        if self.lse.extent != self.ufla.encoder.frame_extent {
            return Err(inv(format!(
                "LSE crops {:?} must match the frame extent {:?} so they tokenize like frames",
                self.lse.extent, self.ufla.encoder.frame_extent
            )));
        }
        if self.train.batch_videos < 2 || self.train.batch_images < 1 {
            return Err(inv("a pre-training batch needs at least 2 videos and 1 image".into()));
        }
        Ok(())
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut copy = self.clone();
        for (k, slot) in copy.slots() {
            match slot {
                Slot::Int(v) => writeln!(f, "{k} = {v}")?,
                Slot::Seed(v) => writeln!(f, "{k} = {v}")?,
                Slot::Real(v) => writeln!(f, "{k} = {v:?}")?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = Config::parse("# nothing\n\n").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.ufla.weights.koleo, 3.0);
        assert_eq!(c.ufla.encoder.d, 64);
    }

    #[test]
    fn dotted_keys_and_comments() {
        let c = Config::parse("ufla.mask_ratio = 0.25  # fewer\nencoder.depth=3\nseed = 9\n").unwrap();
        assert_eq!(c.ufla.mask_ratio, 0.25);
        assert_eq!(c.ufla.encoder.depth, 3);
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn rejections() {
        assert!(matches!(Config::parse("ufla.bogus = 1"), Err(ConfigError::UnknownKey { line: 1, .. })));
        assert!(matches!(Config::parse("seed = 1\nseed = 2"), Err(ConfigError::Duplicate { line: 2, .. })));
        assert!(matches!(Config::parse("encoder.d 64"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(Config::parse("encoder.d = -4"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(Config::parse("encoder.d = 62"), Err(ConfigError::Invalid(_))));
        assert!(matches!(Config::parse("ufla.teacher_temp = 0.2"), Err(ConfigError::Invalid(_))));
        assert!(matches!(Config::parse("lse.height = 8"), Err(ConfigError::Invalid(_))));
        assert!(matches!(Config::parse("train.batch_videos = 1"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn every_key_is_listed_once() {
        let keys = Config::keys();
        let set: std::collections::BTreeSet<_> = keys.iter().collect();
        assert_eq!(set.len(), keys.len());
        let text = Config::default().to_string();
        assert_eq!(text.lines().count(), keys.len());
    }

    proptest! {
        #[test]
        fn display_round_trips(seed in any::<u64>(), ratio in 0.0f64..1.0, lr in 1e-6f64..1.0, depth in 1usize..5) {
            let mut c = Config::default();
            c.seed = seed;
            c.ufla.mask_ratio = ratio;
            c.ufla.lr = lr;
            c.ufla.encoder.depth = depth;
            prop_assert_eq!(Config::parse(&c.to_string()).unwrap(), c);
        }
    }
}
