//! `key=value` training configuration.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{AdamConfig, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    BetaVae,
    FactorVae,
    C2Vae,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeSource {
    Permute,
    CopulaGaussian,
    CopulaStudent,
    CopulaGmm,
}

/// How the classifier loss reaches the covariance encoder in Phase B.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovPhaseB {
    /// φ_c receives no classifier gradient.
    None,
    /// φ_c ascends the classifier loss (makes z_p harder to tell from z_q).
    Adversarial,
    /// φ_c descends the classifier loss (makes z_p easier to tell apart).
    Cooperative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    /// One Phase A batch, then one Phase B batch.
    Batch,
    /// An epoch of Phase A batches, then an epoch of Phase B batches.
    Epoch,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}; expected one of: ", $($text, " "),+),
                        s
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text,)+ })
            }
        }
    };
}

keyword_enum!(Mode { BetaVae => "beta_vae", FactorVae => "factor_vae", C2Vae => "c2vae" });
keyword_enum!(NegativeSource {
    Permute => "permute",
    CopulaGaussian => "copula_gaussian",
    CopulaStudent => "copula_student",
    CopulaGmm => "copula_gmm",
});
keyword_enum!(CovPhaseB { None => "none", Adversarial => "adversarial", Cooperative => "cooperative" });
keyword_enum!(Granularity { Batch => "batch", Epoch => "epoch" });

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    /// `None` picks `permute` in factor_vae mode and `copula_gaussian` otherwise.
    pub negative_source: Option<NegativeSource>,
    pub beta: f64,
    pub gamma: f64,
    /// `None` picks +1 in factor_vae mode or with permuted negatives, -1 otherwise.
    pub penalty_sign: Option<f64>,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Seed of the batch order; defaults to `seed`.
    pub data_seed: Option<u64>,
    pub latent_dim: usize,
    pub lr_vae: f64,
    pub lr_cls: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub cls_hidden: Vec<usize>,
    /// Width of the covariance-encoder features; 0 means `2 * latent_dim`.
    pub cov_features: usize,
    pub gmm_components: usize,
    pub student_nu: f64,
    pub cov_encoder_in_phase_b: CovPhaseB,
    pub phase_granularity: Granularity,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub audit_phases: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::C2Vae,
            negative_source: None,
            beta: 1.0,
            gamma: 10.0,
            penalty_sign: None,
            batch_size: 64,
            steps: 10_000,
            seed: 0,
            data_seed: None,
            latent_dim: 10,
            lr_vae: 1e-4,
            lr_cls: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            enc_hidden: vec![256, 256],
            dec_hidden: vec![256, 256],
            cls_hidden: vec![256; 4],
            cov_features: 0,
            gmm_components: 2,
            student_nu: 5.0,
            cov_encoder_in_phase_b: CovPhaseB::None,
            phase_granularity: Granularity::Batch,
            checkpoint_every: 0,
            audit_phases: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|w| parse(key, w.trim())).collect()
}

fn widths_text(w: &[usize]) -> String {
    w.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

fn auto_or<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl TrainConfig {
    /// Sets one field by key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "mode" => self.mode = value.parse()?,
            "negative_source" => self.negative_source = auto_or(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "penalty_sign" => {
                self.penalty_sign = match value {
                    "auto" => None,
                    "+1" | "1" => Some(1.0),
                    "-1" => Some(-1.0),
                    _ => return Err(Error::Config(format!("penalty_sign must be +1, -1 or auto, got {value:?}"))),
                }
            }
            "batch_size" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data_seed" => self.data_seed = auto_or(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "lr_vae" => self.lr_vae = parse(key, value)?,
            "lr_cls" => self.lr_cls = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "enc_hidden" => self.enc_hidden = parse_widths(key, value)?,
            "dec_hidden" => self.dec_hidden = parse_widths(key, value)?,
            "cls_hidden" => self.cls_hidden = parse_widths(key, value)?,
            "cov_features" => self.cov_features = parse(key, value)?,
            "gmm_components" => self.gmm_components = parse(key, value)?,
            "student_nu" => self.student_nu = parse(key, value)?,
            "cov_encoder_in_phase_b" => self.cov_encoder_in_phase_b = value.parse()?,
            "phase_granularity" => self.phase_granularity = value.parse()?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "audit_phases" => self.audit_phases = parse_bool(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return bad(format!("gamma must be a finite nonnegative number, got {}", self.gamma));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be a finite nonnegative number, got {}", self.beta));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.latent_dim < 2 {
            return bad("latent_dim must be at least 2".into());
        }
        for (k, lr) in [("lr_vae", self.lr_vae), ("lr_cls", self.lr_cls)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return bad(format!("{k} must be positive, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.student_nu > 2.0) || !self.student_nu.is_finite() {
            return bad(format!("student_nu must be finite and > 2, got {}", self.student_nu));
        }
        if self.negative_source() == NegativeSource::CopulaGmm && self.gmm_components < 2 {
            return bad("copula_gmm needs gmm_components >= 2".into());
        }
        if self.mode == Mode::BetaVae && self.negative_source.is_some() {
            log::warn!("negative_source is ignored in beta_vae mode");
        }
        Ok(())
    }

    pub fn negative_source(&self) -> NegativeSource {
        self.negative_source.unwrap_or(match self.mode {
            Mode::FactorVae => NegativeSource::Permute,
            _ => NegativeSource::CopulaGaussian,
        })
    }

    pub fn penalty_sign(&self) -> f64 {
        let independent = self.mode == Mode::FactorVae || self.negative_source() == NegativeSource::Permute;
        self.penalty_sign.unwrap_or(if independent { 1.0 } else { -1.0 })
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    /// Whether Phase B trains a classifier at all.
    pub fn has_classifier(&self) -> bool {
        self.mode != Mode::BetaVae
    }

    pub fn model_config(&self, input: usize) -> ModelConfig {
        ModelConfig {
            input,
            latent: self.latent_dim,
            enc_hidden: self.enc_hidden.clone(),
            dec_hidden: self.dec_hidden.clone(),
            cls_hidden: self.cls_hidden.clone(),
            cov_features: if self.cov_features == 0 { 2 * self.latent_dim } else { self.cov_features },
            gmm_components: if self.negative_source() == NegativeSource::CopulaGmm { self.gmm_components } else { 0 },
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    /// Every field as resolved `key=value` pairs (automatic choices spelled out).
    pub fn echo(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("mode", self.mode.to_string()),
            kv("negative_source", self.negative_source().to_string()),
            kv("beta", self.beta.to_string()),
            kv("gamma", self.gamma.to_string()),
            kv("penalty_sign", if self.penalty_sign() > 0.0 { "+1".into() } else { "-1".into() }),
            kv("batch_size", self.batch_size.to_string()),
            kv("steps", self.steps.to_string()),
            kv("seed", self.seed.to_string()),
            kv("data_seed", self.data_seed().to_string()),
            kv("latent_dim", self.latent_dim.to_string()),
            kv("lr_vae", self.lr_vae.to_string()),
            kv("lr_cls", self.lr_cls.to_string()),
            kv("adam_beta1", self.adam_beta1.to_string()),
            kv("adam_beta2", self.adam_beta2.to_string()),
            kv("adam_eps", self.adam_eps.to_string()),
            kv("enc_hidden", widths_text(&self.enc_hidden)),
            kv("dec_hidden", widths_text(&self.dec_hidden)),
            kv("cls_hidden", widths_text(&self.cls_hidden)),
            kv("cov_features", self.cov_features.to_string()),
            kv("gmm_components", self.gmm_components.to_string()),
            kv("student_nu", self.student_nu.to_string()),
            kv("cov_encoder_in_phase_b", self.cov_encoder_in_phase_b.to_string()),
            kv("phase_granularity", self.phase_granularity.to_string()),
            kv("checkpoint_every", self.checkpoint_every.to_string()),
            kv("audit_phases", self.audit_phases.to_string()),
        ]
    }

    /// The echo as config-file text; parsing it reproduces this config.
    pub fn to_text(&self) -> String {
        self.echo().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
