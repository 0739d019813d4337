//! Plain-text run configuration: `section.key = value` lines plus
//! command-line `--set` overrides, validated against a fixed schema
//! before any work starts.

use std::path::Path;

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::Guidance;
use crate::pcnet::PcnetArch;
use crate::training::{RcopConfig, TrainConfig};
use crate::vision::Pooling;

/// Evaluation-command settings.
#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub n_sources: usize,
    pub t_test: usize,
    pub seed: u64,
    pub t_max: usize,
    pub repeats: usize,
}

impl EvalSettings {
    pub fn desk() -> Self {
        EvalSettings {
            n_sources: 2,
            t_test: 5,
            seed: 99,
            t_max: 5,
            repeats: 10,
        }
    }
}

/// Fully resolved configuration for one command invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: DataConfig,
    pub arch: PcnetArch,
    pub guidance: Guidance,
    pub freeze_trunk: bool,
    pub train: TrainConfig,
    pub rcop: RcopConfig,
    pub eval: EvalSettings,
    /// Curriculum stages (source counts), e.g. `3,4`.
    pub stages: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        v => Err(Error::InvalidConfig(format!("{key}: not a bool: '{v}'"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let trimmed = value.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|v| parse::<usize>(key, v))
        .collect()
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            data: DataConfig::desk(),
            arch: PcnetArch::desk(),
            guidance: Guidance::Class,
            freeze_trunk: false,
            train: TrainConfig::desk(),
            rcop: RcopConfig::desk(),
            eval: EvalSettings::desk(),
            stages: Vec::new(),
        }
    }

    /// Parse a config file (comments start with `#`), then apply
    /// overrides of the form `section.key=value`.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::desk();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap().trim();
                if line.is_empty() {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(Error::InvalidConfig(format!(
                        "{}:{}: expected 'section.key = value'",
                        path.display(),
                        i + 1
                    )));
                };
                cfg.apply(key.trim(), value)?;
            }
        }
        for s in sets {
            let Some((key, value)) = s.split_once('=') else {
                return Err(Error::InvalidConfig(format!(
                    "--set {s}: expected section.key=value"
                )));
            };
            cfg.apply(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `section.key = value` assignment. Unknown keys are
    /// errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data.num_classes" => self.data.num_classes = parse(key, v)?,
            "data.clips_per_class" => self.data.clips_per_class = parse(key, v)?,
            "dsp.window_len" => self.data.spec.window_len = parse(key, v)?,
            "dsp.hop_len" => self.data.spec.hop_len = parse(key, v)?,
            "dsp.fft_size" => self.data.spec.fft_size = parse(key, v)?,
            "dsp.sample_rate_hz" => self.data.spec.sample_rate_hz = parse(key, v)?,
            "dsp.clip_samples" => self.data.spec.clip_samples = parse(key, v)?,
            "dsp.warp_bins" => {
                self.data.spec.warp_bins = parse(key, v)?;
                self.arch.input_side = self.data.spec.warp_bins;
            }
            "dsp.frames" => self.data.spec.frames = parse(key, v)?,
            "vision.input_side" => self.data.vision.input_side = parse(key, v)?,
            "vision.frames" => self.data.vision.frames = parse(key, v)?,
            "vision.feature_channels" => {
                self.data.vision.feature_channels = parse(key, v)?;
                self.arch.feature_channels = self.data.vision.feature_channels;
            }
            "vision.feature_h" => {
                self.data.vision.feature_h = parse(key, v)?;
                self.arch.feature_side = self.data.vision.feature_h;
            }
            "vision.feature_w" => self.data.vision.feature_w = parse(key, v)?,
            "vision.pooling" => {
                self.data.vision.pooling = match v {
                    "mean" => Pooling::Mean,
                    "max" => Pooling::Max,
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "{key}: 'mean' or 'max', got '{v}'"
                        )))
                    }
                }
            }
            "vision.freeze_trunk" => self.freeze_trunk = parse_bool(key, v)?,
            "arch.channels" => {
                self.arch.channels = parse_list(key, v)?;
                self.arch.layers = self.arch.channels.len();
            }
            "arch.t_train" => {
                self.arch.t_train = parse(key, v)?;
                self.train.t_train = self.arch.t_train;
                self.rcop.t_train = self.arch.t_train;
            }
            "arch.t_test" => {
                self.arch.t_test = parse(key, v)?;
                self.eval.t_test = self.arch.t_test;
            }
            "arch.linear_diagnostic" => self.arch.linear_diagnostic = parse_bool(key, v)?,
            "arch.untie_weights" => self.arch.untie_weights = parse_bool(key, v)?,
            "model.guidance" => {
                self.guidance = match v {
                    "class" => Guidance::Class,
                    "frames" => Guidance::Frames,
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "{key}: 'class' or 'frames', got '{v}'"
                        )))
                    }
                }
            }
            "train.n_sources" => self.train.n_sources = parse(key, v)?,
            "train.batch" => self.train.batch = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.steps_per_epoch" => self.train.steps_per_epoch = parse(key, v)?,
            "train.t_train" => self.train.t_train = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.lr_sep" => self.train.lr_sep = parse(key, v)?,
            "train.lr_vision" => self.train.lr_vision = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "rcop.batch" => self.rcop.batch = parse(key, v)?,
            "rcop.epochs" => self.rcop.epochs = parse(key, v)?,
            "rcop.steps_per_epoch" => self.rcop.steps_per_epoch = parse(key, v)?,
            "rcop.t_train" => self.rcop.t_train = parse(key, v)?,
            "rcop.seed" => self.rcop.seed = parse(key, v)?,
            "rcop.lr" => self.rcop.lr = parse(key, v)?,
            "rcop.momentum" => self.rcop.momentum = parse(key, v)?,
            "rcop.weight_decay" => self.rcop.weight_decay = parse(key, v)?,
            "eval.n_sources" => self.eval.n_sources = parse(key, v)?,
            "eval.t_test" => self.eval.t_test = parse(key, v)?,
            "eval.seed" => self.eval.seed = parse(key, v)?,
            "eval.t_max" => self.eval.t_max = parse(key, v)?,
            "eval.repeats" => self.eval.repeats = parse(key, v)?,
            "curriculum.stages" => self.stages = parse_list(key, v)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        self.rcop.validate()?;
        if self.arch.input_side != self.data.spec.warp_bins {
            return Err(Error::InvalidConfig(format!(
                "arch input side {} != dsp.warp_bins {}",
                self.arch.input_side, self.data.spec.warp_bins
            )));
        }
        if self.arch.feature_channels != self.data.vision.feature_channels
            || self.arch.feature_side != self.data.vision.feature_h
            || self.arch.feature_side != self.data.vision.feature_w
        {
            return Err(Error::InvalidConfig(
                "vision feature shape does not match the separation net".into(),
            ));
        }
        if self.eval.n_sources < 2 || self.eval.t_test < 1 || self.eval.repeats < 1 {
            return Err(Error::InvalidConfig("bad eval settings".into()));
        }
        Ok(())
    }

    /// Canonical key=value rendering; written next to every run's
    /// artifacts so results are reproducible from the snapshot alone.
    pub fn render(&self) -> String {
        let channels = self
            .arch
            .channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let stages = self
            .stages
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let pooling = match self.data.vision.pooling {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        };
        let guidance = match self.guidance {
            Guidance::Class => "class",
            Guidance::Frames => "frames",
        };
        format!(
            "data.num_classes = {}\n\
             data.clips_per_class = {}\n\
             dsp.window_len = {}\n\
             dsp.hop_len = {}\n\
             dsp.fft_size = {}\n\
             dsp.sample_rate_hz = {}\n\
             dsp.clip_samples = {}\n\
             dsp.warp_bins = {}\n\
             dsp.frames = {}\n\
             vision.input_side = {}\n\
             vision.frames = {}\n\
             vision.feature_channels = {}\n\
             vision.feature_h = {}\n\
             vision.feature_w = {}\n\
             vision.pooling = {}\n\
             vision.freeze_trunk = {}\n\
             arch.channels = {}\n\
             arch.t_train = {}\n\
             arch.t_test = {}\n\
             arch.linear_diagnostic = {}\n\
             arch.untie_weights = {}\n\
             model.guidance = {}\n\
             train.n_sources = {}\n\
             train.batch = {}\n\
             train.epochs = {}\n\
             train.steps_per_epoch = {}\n\
             train.t_train = {}\n\
             train.seed = {}\n\
             train.lr_sep = {}\n\
             train.lr_vision = {}\n\
             train.weight_decay = {}\n\
             train.beta1 = {}\n\
             train.beta2 = {}\n\
             rcop.batch = {}\n\
             rcop.epochs = {}\n\
             rcop.steps_per_epoch = {}\n\
             rcop.t_train = {}\n\
             rcop.seed = {}\n\
             rcop.lr = {}\n\
             rcop.momentum = {}\n\
             rcop.weight_decay = {}\n\
             eval.n_sources = {}\n\
             eval.t_test = {}\n\
             eval.seed = {}\n\
             eval.t_max = {}\n\
             eval.repeats = {}\n\
             curriculum.stages = {}\n",
            self.data.num_classes,
            self.data.clips_per_class,
            self.data.spec.window_len,
            self.data.spec.hop_len,
            self.data.spec.fft_size,
            self.data.spec.sample_rate_hz,
            self.data.spec.clip_samples,
            self.data.spec.warp_bins,
            self.data.spec.frames,
            self.data.vision.input_side,
            self.data.vision.frames,
            self.data.vision.feature_channels,
            self.data.vision.feature_h,
            self.data.vision.feature_w,
            pooling,
            self.freeze_trunk,
            channels,
            self.arch.t_train,
            self.arch.t_test,
            self.arch.linear_diagnostic,
            self.arch.untie_weights,
            guidance,
            self.train.n_sources,
            self.train.batch,
            self.train.epochs,
            self.train.steps_per_epoch,
            self.train.t_train,
            self.train.seed,
            self.train.lr_sep,
            self.train.lr_vision,
            self.train.weight_decay,
            self.train.beta1,
            self.train.beta2,
            self.rcop.batch,
            self.rcop.epochs,
            self.rcop.steps_per_epoch,
            self.rcop.t_train,
            self.rcop.seed,
            self.rcop.lr,
            self.rcop.momentum,
            self.rcop.weight_decay,
            self.eval.n_sources,
            self.eval.t_test,
            self.eval.seed,
            self.eval.t_max,
            self.eval.repeats,
            stages,
        )
    }
}
