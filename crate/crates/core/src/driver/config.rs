//! Run configuration: a flat `key = value` text file with `#` comments.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::admm::AdmmConfig;
use crate::error::{Error, Result};
use crate::fixtures::GlyphSpec;
use crate::model::SynthSpec;
use crate::purify::ThresholdSearchConfig;
use crate::sa::{SaConfig, SchemeMode};
use crate::schemes::Objective;
use crate::seeds::{derive_seed, tag};

/// Where training and test data come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataConfig {
    Synth {
        train: usize,
        test: usize,
        spec: SynthSpec,
    },
    Glyphs {
        train: usize,
        test: usize,
        spec: GlyphSpec,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar10 {
        train: Vec<PathBuf>,
        test: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub arch: String,
    pub classes: usize,
    pub data: DataConfig,
    /// Truncate the training set to this many samples (0 keeps all).
    pub train_limit: usize,
    pub test_limit: usize,

    pub baseline_epochs: usize,
    pub lr: f64,
    pub batch: usize,

    pub objective: Objective,
    pub scheme: SchemeMode,
    pub rounds: usize,
    /// Default per-round reduction factor.
    pub round_target: f64,
    /// Per-round overrides; round `t` uses entry `t - 1` when present.
    pub round_targets: Vec<f64>,
    /// Accepted realized rate band, as multiples of the round target.
    pub band: (f64, f64),
    /// Aim each round at the cumulative goal instead of a fixed factor, so
    /// per-round deviations do not compound.
    pub compensate: bool,
    /// Absolute accuracy floor; `None` means baseline minus `floor_margin`.
    pub acc_floor: Option<f64>,
    pub floor_margin: f64,

    pub admm_iterations: usize,
    pub admm_epochs: usize,
    pub retrain_epochs: usize,
    pub rho0: f64,
    pub rho_growth: f64,
    pub rho_period: usize,

    pub sa_t0: Option<f64>,
    pub sa_cooling: f64,
    pub sa_k: f64,
    pub sa_iters: usize,
    pub sa_stop_ratio: f64,
    pub sa_delta_max: f64,
    pub sa_warmup: usize,
    /// Samples of the test split used for fast evaluation.
    pub eval_subset: usize,

    pub purify: bool,
    pub purify_epsilon: f64,
    pub purify_per_round: bool,
    pub purify_iters: usize,

    /// Epochs for train-from-scratch of the final structure (0 skips it).
    pub scratch_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            arch: "convnet-s".into(),
            classes: 10,
            data: DataConfig::Synth {
                train: 1000,
                test: 500,
                spec: SynthSpec::default(),
            },
            train_limit: 0,
            test_limit: 0,
            baseline_epochs: 10,
            lr: 1e-3,
            batch: 32,
            objective: Objective::Params,
            scheme: SchemeMode::Combined,
            rounds: 8,
            round_target: 2.0,
            round_targets: Vec::new(),
            band: (1.0, 1.1),
            compensate: true,
            acc_floor: None,
            floor_margin: 0.01,
            admm_iterations: 9,
            admm_epochs: 1,
            retrain_epochs: 3,
            rho0: 1e-4,
            rho_growth: 1.5,
            rho_period: 3,
            sa_t0: None,
            sa_cooling: 0.7,
            sa_k: 1e-3,
            sa_iters: 10,
            sa_stop_ratio: 0.05,
            sa_delta_max: 0.3,
            sa_warmup: 20,
            eval_subset: 1000,
            purify: true,
            purify_epsilon: 0.002,
            purify_per_round: false,
            purify_iters: 6,
            scratch_epochs: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", n + 1)));
            };
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = RunConfig::default();
        // Data source keys are collected first, then assembled.
        let mut data_kind = String::from("synth");
        let mut synth = (1000usize, 500usize, SynthSpec::default());
        let mut glyph = GlyphSpec::default();
        let mut paths: std::collections::BTreeMap<String, String> = Default::default();
        for (line, k, v) in pairs {
            let v = v.as_str();
            match k.as_str() {
                "seed" => cfg.seed = parse_num(&k, v)?,
                "arch" => cfg.arch = v.to_string(),
                "classes" => cfg.classes = parse_num(&k, v)?,
                "data" => data_kind = v.to_string(),
                "synth_train" => synth.0 = parse_num(&k, v)?,
                "synth_test" => synth.1 = parse_num(&k, v)?,
                "synth_size" => {
                    let s: usize = parse_num(&k, v)?;
                    synth.2.shape[1] = s;
                    synth.2.shape[2] = s;
                }
                "synth_channels" => synth.2.shape[0] = parse_num(&k, v)?,
                "synth_bumps" => synth.2.bumps = parse_num(&k, v)?,
                "synth_noise" => synth.2.noise = parse_num(&k, v)?,
                "synth_jitter" => synth.2.jitter = parse_num(&k, v)?,
                "glyph_size" => glyph.size = parse_num(&k, v)?,
                "glyph_strokes" => glyph.strokes = parse_num(&k, v)?,
                "glyph_wobble" => glyph.wobble = parse_num(&k, v)?,
                "glyph_shift" => glyph.shift = parse_num(&k, v)?,
                "glyph_noise" => glyph.noise = parse_num(&k, v)?,
                "glyph_clutter" => glyph.clutter = parse_num(&k, v)?,
                "train_images" | "train_labels" | "test_images" | "test_labels" | "cifar_train"
                | "cifar_test" => {
                    paths.insert(k.clone(), v.to_string());
                }
                "train_limit" => cfg.train_limit = parse_num(&k, v)?,
                "test_limit" => cfg.test_limit = parse_num(&k, v)?,
                "baseline_epochs" => cfg.baseline_epochs = parse_num(&k, v)?,
                "lr" => cfg.lr = parse_num(&k, v)?,
                "batch" => cfg.batch = parse_num(&k, v)?,
                "objective" => cfg.objective = v.parse()?,
                "scheme" => cfg.scheme = v.parse()?,
                "rounds" => cfg.rounds = parse_num(&k, v)?,
                "round_target" => cfg.round_target = parse_num(&k, v)?,
                "round_targets" => cfg.round_targets = parse_list(&k, v)?,
                "band_low" => cfg.band.0 = parse_num(&k, v)?,
                "band_high" => cfg.band.1 = parse_num(&k, v)?,
                "compensate" => cfg.compensate = parse_bool(&k, v)?,
                "acc_floor" => cfg.acc_floor = Some(parse_num(&k, v)?),
                "floor_margin" => cfg.floor_margin = parse_num(&k, v)?,
                "admm_iterations" => cfg.admm_iterations = parse_num(&k, v)?,
                "admm_epochs" => cfg.admm_epochs = parse_num(&k, v)?,
                "retrain_epochs" => cfg.retrain_epochs = parse_num(&k, v)?,
                "rho0" => cfg.rho0 = parse_num(&k, v)?,
                "rho_growth" => cfg.rho_growth = parse_num(&k, v)?,
                "rho_period" => cfg.rho_period = parse_num(&k, v)?,
                "sa_t0" => cfg.sa_t0 = Some(parse_num(&k, v)?),
                "sa_cooling" => cfg.sa_cooling = parse_num(&k, v)?,
                "sa_k" => cfg.sa_k = parse_num(&k, v)?,
                "sa_iters" => cfg.sa_iters = parse_num(&k, v)?,
                "sa_stop_ratio" => cfg.sa_stop_ratio = parse_num(&k, v)?,
                "sa_delta_max" => cfg.sa_delta_max = parse_num(&k, v)?,
                "sa_warmup" => cfg.sa_warmup = parse_num(&k, v)?,
                "eval_subset" => cfg.eval_subset = parse_num(&k, v)?,
                "purify" => cfg.purify = parse_bool(&k, v)?,
                "purify_epsilon" => cfg.purify_epsilon = parse_num(&k, v)?,
                "purify_per_round" => cfg.purify_per_round = parse_bool(&k, v)?,
                "purify_iters" => cfg.purify_iters = parse_num(&k, v)?,
                "scratch_epochs" => cfg.scratch_epochs = parse_num(&k, v)?,
                _ => return Err(Error::Config(format!("line {line}: unknown key {k:?}"))),
            }
        }
        let path = |key: &str| -> Result<PathBuf> {
            paths
                .get(key)
                .map(PathBuf::from)
                .ok_or_else(|| Error::Config(format!("data = {data_kind} requires {key}")))
        };
        cfg.data = match data_kind.as_str() {
            "synth" => DataConfig::Synth {
                train: synth.0,
                test: synth.1,
                spec: synth.2,
            },
            "glyphs" => DataConfig::Glyphs {
                train: synth.0,
                test: synth.1,
                spec: glyph,
            },
            "idx" => DataConfig::Idx {
                train_images: path("train_images")?,
                train_labels: path("train_labels")?,
                test_images: path("test_images")?,
                test_labels: path("test_labels")?,
            },
            "cifar10" => DataConfig::Cifar10 {
                train: path("cifar_train")?
                    .to_string_lossy()
                    .split(',')
                    .map(|s| PathBuf::from(s.trim()))
                    .collect(),
                test: path("cifar_test")?,
            },
            other => return Err(Error::Config(format!("data must be synth, glyphs, idx or cifar10, got {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.round_target <= 1.0 || self.round_targets.iter().any(|&c| c <= 1.0 || !c.is_finite()) {
            return bad("round targets must exceed 1");
        }
        if !(self.band.0 > 0.0 && self.band.0 <= 1.0 && self.band.1 >= 1.0) {
            return bad("band_low must be in (0, 1] and band_high >= 1");
        }
        if let Some(f) = self.acc_floor {
            if !(0.0..=1.0).contains(&f) {
                return bad("acc_floor must be in [0, 1]");
            }
        }
        if self.batch == 0 || self.eval_subset == 0 {
            return bad("batch and eval_subset must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.purify_epsilon < 0.0 {
            return bad("purify_epsilon must be >= 0");
        }
        self.sa_config(1).validate()?;
        self.admm_config(1).validate()
    }

    pub fn target_for_round(&self, round: usize) -> f64 {
        self.round_targets.get(round - 1).copied().unwrap_or(self.round_target)
    }

    pub fn sa_config(&self, round: usize) -> SaConfig {
        SaConfig {
            t0: self.sa_t0,
            t_stop_ratio: self.sa_stop_ratio,
            cooling: self.sa_cooling,
            boltzmann_k: self.sa_k,
            iters_per_temp: self.sa_iters,
            delta_max: self.sa_delta_max,
            warmup: self.sa_warmup,
            warmup_accept: 0.9,
            seed: derive_seed(self.seed, tag::round(tag::SEARCH, round)),
            objective: self.objective,
            scheme: self.scheme,
            target_band: self.band,
        }
    }

    pub fn admm_config(&self, round: usize) -> AdmmConfig {
        AdmmConfig {
            rho0: self.rho0,
            rho_growth: self.rho_growth,
            rho_period: self.rho_period,
            iterations: self.admm_iterations,
            epochs_per_iteration: self.admm_epochs,
            retrain_epochs: self.retrain_epochs,
            lr: self.lr,
            batch: self.batch,
            seed: derive_seed(self.seed, tag::round(tag::ADMM, round)),
        }
    }

    pub fn purify_config(&self, round: usize) -> ThresholdSearchConfig {
        let base = ThresholdSearchConfig::default();
        ThresholdSearchConfig {
            epsilon: self.purify_epsilon,
            objective: self.objective,
            sa: SaConfig {
                seed: derive_seed(self.seed, tag::round(tag::PURIFY, round)),
                iters_per_temp: self.purify_iters,
                ..base.sa
            },
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("arch", self.arch.clone());
        kv("classes", self.classes.to_string());
        match &self.data {
            DataConfig::Synth { train, test, spec } => {
                kv("data", "synth".into());
                kv("synth_train", train.to_string());
                kv("synth_test", test.to_string());
                kv("synth_channels", spec.shape[0].to_string());
                kv("synth_size", spec.shape[1].to_string());
                kv("synth_bumps", spec.bumps.to_string());
                kv("synth_noise", spec.noise.to_string());
                kv("synth_jitter", spec.jitter.to_string());
            }
            DataConfig::Glyphs { train, test, spec } => {
                kv("data", "glyphs".into());
                kv("synth_train", train.to_string());
                kv("synth_test", test.to_string());
                kv("glyph_size", spec.size.to_string());
                kv("glyph_strokes", spec.strokes.to_string());
                kv("glyph_wobble", spec.wobble.to_string());
                kv("glyph_shift", spec.shift.to_string());
                kv("glyph_noise", spec.noise.to_string());
                kv("glyph_clutter", spec.clutter.to_string());
            }
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                kv("data", "idx".into());
                kv("train_images", train_images.display().to_string());
                kv("train_labels", train_labels.display().to_string());
                kv("test_images", test_images.display().to_string());
                kv("test_labels", test_labels.display().to_string());
            }
            DataConfig::Cifar10 { train, test } => {
                kv("data", "cifar10".into());
                let list: Vec<String> = train.iter().map(|p| p.display().to_string()).collect();
                kv("cifar_train", list.join(","));
                kv("cifar_test", test.display().to_string());
            }
        }
        kv("train_limit", self.train_limit.to_string());
        kv("test_limit", self.test_limit.to_string());
        kv("baseline_epochs", self.baseline_epochs.to_string());
        kv("lr", self.lr.to_string());
        kv("batch", self.batch.to_string());
        kv("objective", self.objective.to_string());
        kv(
            "scheme",
            match self.scheme {
                SchemeMode::Combined => "combined",
                SchemeMode::FilterOnly => "filter",
                SchemeMode::ColumnOnly => "column",
            }
            .into(),
        );
        kv("rounds", self.rounds.to_string());
        kv("round_target", self.round_target.to_string());
        if !self.round_targets.is_empty() {
            let list: Vec<String> = self.round_targets.iter().map(f64::to_string).collect();
            kv("round_targets", list.join(","));
        }
        kv("band_low", self.band.0.to_string());
        kv("band_high", self.band.1.to_string());
        kv("compensate", self.compensate.to_string());
        if let Some(f) = self.acc_floor {
            kv("acc_floor", f.to_string());
        }
        kv("floor_margin", self.floor_margin.to_string());
        kv("admm_iterations", self.admm_iterations.to_string());
        kv("admm_epochs", self.admm_epochs.to_string());
        kv("retrain_epochs", self.retrain_epochs.to_string());
        kv("rho0", self.rho0.to_string());
        kv("rho_growth", self.rho_growth.to_string());
        kv("rho_period", self.rho_period.to_string());
        if let Some(t) = self.sa_t0 {
            kv("sa_t0", t.to_string());
        }
        kv("sa_cooling", self.sa_cooling.to_string());
        kv("sa_k", self.sa_k.to_string());
        kv("sa_iters", self.sa_iters.to_string());
        kv("sa_stop_ratio", self.sa_stop_ratio.to_string());
        kv("sa_delta_max", self.sa_delta_max.to_string());
        kv("sa_warmup", self.sa_warmup.to_string());
        kv("eval_subset", self.eval_subset.to_string());
        kv("purify", self.purify.to_string());
        kv("purify_epsilon", self.purify_epsilon.to_string());
        kv("purify_per_round", self.purify_per_round.to_string());
        kv("purify_iters", self.purify_iters.to_string());
        kv("scratch_epochs", self.scratch_epochs.to_string());
        s
    }

    /// Hash of the settings that influence a run's results.
    pub fn digest(&self) -> String {
        let mut copy = self.clone();
        // Rounds and the floor only decide where a run stops, so a resumed
        // run may extend or tighten them.
        copy.rounds = 1;
        copy.acc_floor = None;
        let h = Sha256::digest(copy.render().as_bytes());
        h[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
