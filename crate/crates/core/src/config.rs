//! Run configuration and its flat `key = value` file format.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Keys absent from a file keep their defaults, unknown or repeated keys are
//! errors. [`RunConfig::to_canonical`] writes every key in a fixed order, and
//! parsing that text gives back an equal config.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::{DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_GAMMA};
use crate::nn::{Arch, CvaeArch};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub groups: usize,
    pub spatial_kernel: usize,
    /// Temporal kernel extent per block.
    pub teacher_blocks: Vec<usize>,
    pub student_blocks: Vec<usize>,
    pub attn_kernel: usize,
    pub latent_dim: usize,
    pub decoder_kernel: usize,
    pub cvae_channels: usize,
    pub cvae_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 8,
            groups: 4,
            spatial_kernel: 3,
            teacher_blocks: vec![3, 3, 3],
            student_blocks: vec![3, 3],
            attn_kernel: 3,
            latent_dim: 16,
            decoder_kernel: 3,
            cvae_channels: 2,
            cvae_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Posterior samples per reconstruction; only 1 is supported.
    pub mc_samples: usize,
    pub feature_kd_weight: f64,
    /// Weight of `L_recon` in stage 2, for the teacher and every student.
    pub recon_weight: f64,
    /// Student epochs; one metrics line each.
    pub epochs: usize,
    pub teacher_epochs: usize,
    /// Consecutive epochs spent in each stage before switching.
    pub stage_period: usize,
    pub batch_size: usize,
    pub sgd_lr: f64,
    pub sgd_momentum: f64,
    pub adam_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Validate every this many epochs (and always on the last).
    pub eval_every: usize,
    pub topk: usize,
    /// Record wall time in metrics; off by default so logs are reproducible.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            mc_samples: 1,
            feature_kd_weight: 1.0,
            recon_weight: 0.1,
            epochs: 60,
            teacher_epochs: 80,
            stage_period: 1,
            batch_size: 8,
            sgd_lr: 0.05,
            sgd_momentum: 0.9,
            adam_lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 1,
            eval_every: 1,
            topk: 2,
            log_wall_time: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for key `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{v}` for key `{key}` (expected true or false)"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

macro_rules! keys {
    ($cfg:ident; $( $key:literal => $field:expr, $kind:ident; )*) => {
        /// Every recognised key in canonical order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn set(cfg: &mut RunConfig, key: &str, v: &str) -> Result<()> {
            let $cfg = cfg;
            match key {
                $( $key => { $field = keys!(@parse $kind, $key, v)?; } )*
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
            Ok(())
        }

        fn render(cfg: &RunConfig) -> String {
            let $cfg = cfg;
            let mut out = String::new();
            $( writeln!(out, "{} = {}", $key, keys!(@show $kind, &$field)).expect("string write"); )*
            out
        }
    };
    (@parse num, $key:literal, $v:ident) => { parse_num($key, $v) };
    (@parse bool, $key:literal, $v:ident) => { parse_bool($key, $v) };
    (@parse list, $key:literal, $v:ident) => { parse_list($key, $v) };
    (@show num, $e:expr) => { $e.to_string() };
    (@show bool, $e:expr) => { $e.to_string() };
    (@show list, $e:expr) => { list($e) };
}

keys! { c;
    "num_classes" => c.data.num_classes, num;
    "train_per_class" => c.data.train_per_class, num;
    "val_per_class" => c.data.val_per_class, num;
    "frames" => c.data.frames, num;
    "height" => c.data.height, num;
    "width" => c.data.width, num;
    "speed_min" => c.data.speed_min, num;
    "speed_max" => c.data.speed_max, num;
    "noise" => c.data.noise, num;
    "blob_sigma" => c.data.blob_sigma, num;
    "blob_amplitude" => c.data.blob_amplitude, num;
    "data_seed" => c.data.seed, num;
    "channels" => c.model.channels, num;
    "groups" => c.model.groups, num;
    "spatial_kernel" => c.model.spatial_kernel, num;
    "teacher_blocks" => c.model.teacher_blocks, list;
    "student_blocks" => c.model.student_blocks, list;
    "attn_kernel" => c.model.attn_kernel, num;
    "latent_dim" => c.model.latent_dim, num;
    "decoder_kernel" => c.model.decoder_kernel, num;
    "cvae_channels" => c.model.cvae_channels, num;
    "cvae_hidden" => c.model.cvae_hidden, num;
    "alpha" => c.train.alpha, num;
    "beta" => c.train.beta, num;
    "gamma" => c.train.gamma, num;
    "mc_samples" => c.train.mc_samples, num;
    "feature_kd_weight" => c.train.feature_kd_weight, num;
    "recon_weight" => c.train.recon_weight, num;
    "epochs" => c.train.epochs, num;
    "teacher_epochs" => c.train.teacher_epochs, num;
    "stage_period" => c.train.stage_period, num;
    "batch_size" => c.train.batch_size, num;
    "sgd_lr" => c.train.sgd_lr, num;
    "sgd_momentum" => c.train.sgd_momentum, num;
    "adam_lr" => c.train.adam_lr, num;
    "adam_beta1" => c.train.adam_beta1, num;
    "adam_beta2" => c.train.adam_beta2, num;
    "adam_eps" => c.train.adam_eps, num;
    "seed" => c.train.seed, num;
    "eval_every" => c.train.eval_every, num;
    "topk" => c.train.topk, num;
    "log_wall_time" => c.train.log_wall_time, bool;
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: key `{key}` given twice", i + 1)));
            }
            set(&mut cfg, key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
            seen.push(key);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::parse(&fs::read_to_string(path)?)
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_canonical(&self) -> String {
        render(self)
    }

    /// First eight bytes (little-endian) of the SHA-256 of the canonical text.
    pub fn hash(&self) -> u64 {
        let d = Sha256::digest(self.to_canonical().as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.data.validate()?;
        let t = &self.train;
        if !(t.alpha > 0.0 && t.beta > 0.0 && t.gamma > 0.0) {
            return bad("alpha, beta and gamma must be positive");
        }
        if t.mc_samples != 1 {
            return bad("mc_samples must be 1");
        }
        if t.stage_period < 1 || t.batch_size < 1 || t.eval_every < 1 {
            return bad("stage_period, batch_size and eval_every must be at least 1");
        }
        if t.topk < 1 || t.topk > self.data.num_classes + 1 {
            return bad("topk must be between 1 and num_classes + 1");
        }
        let positive = [t.sgd_lr, t.adam_lr, t.adam_eps, t.feature_kd_weight, t.recon_weight];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("learning rates, adam_eps and the loss weights must be positive");
        }
        let unit = [t.sgd_momentum, t.adam_beta1, t.adam_beta2];
        if unit.iter().any(|v| !(0.0..1.0).contains(v)) {
            return bad("sgd_momentum and adam betas must lie in [0, 1)");
        }
        self.teacher_arch().validate()?;
        self.student_arch(true, true).validate()?;
        if self.model.teacher_blocks.len() <= self.model.student_blocks.len() {
            return bad("the teacher needs more backbone blocks than the student");
        }
        Ok(())
    }

    fn arch(&self, blocks: &[usize], attention: bool, cvae: bool) -> Arch {
        let m = &self.model;
        Arch {
            in_channels: 1,
            frames: self.data.frames,
            height: self.data.height,
            width: self.data.width,
            channels: m.channels,
            block_kt: blocks.to_vec(),
            spatial_kernel: m.spatial_kernel,
            num_classes: self.data.num_classes,
            groups: m.groups,
            attention,
            attn_kernel: m.attn_kernel,
            cvae: cvae.then(|| CvaeArch {
                reduced_channels: m.cvae_channels,
                hidden: m.cvae_hidden,
                latent_dim: m.latent_dim,
                decoder_kernel: m.decoder_kernel,
            }),
        }
    }

    /// The teacher always carries attention and a CVAE.
    pub fn teacher_arch(&self) -> Arch {
        self.arch(&self.model.teacher_blocks, true, true)
    }

    pub fn student_arch(&self, attention: bool, cvae: bool) -> Arch {
        self.arch(&self.model.student_blocks, attention, cvae)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let mut c = RunConfig::default();
        c.train.sgd_lr = 0.0125;
        c.model.student_blocks = vec![1, 1];
        c.data.seed = u64::MAX;
        let back = RunConfig::parse(&c.to_canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_canonical(), c.to_canonical());
        assert_eq!(c.to_canonical().lines().count(), KEYS.len());
    }

    #[test]
    fn comments_blank_lines_and_defaults() {
        let c = RunConfig::parse("# run\n\nepochs = 3   # short\nbeta=0.5\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.beta, 0.5);
        assert_eq!(c.train.alpha, 0.1);
    }

    #[test]
    fn unknown_key_is_named() {
        match RunConfig::parse("epochs = 3\nlearning_rate = 0.1\n") {
            Err(Error::Config(m)) => assert!(m.contains("learning_rate") && m.contains("line 2"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_values_and_duplicates() {
        assert!(RunConfig::parse("epochs = many").is_err());
        assert!(RunConfig::parse("epochs = 2\nepochs = 3").is_err());
        assert!(RunConfig::parse("mc_samples = 2").is_err());
        assert!(RunConfig::parse("groups = 3").is_err());
        assert!(RunConfig::parse("alpha = 0").is_err());
        assert!(RunConfig::parse("just text").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }
}
