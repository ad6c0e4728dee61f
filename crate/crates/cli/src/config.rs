//! Run configuration: a `key = value` file merged with command-line flags.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use stereospike::losses::LossConfig;
use stereospike::model::ModelConfig;
use stereospike::synthdata::SceneFamily;
use stereospike::train::TrainPlan;
use stereospike::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub losses: LossConfig,
    pub family: SceneFamily,
    pub seed: u64,
    /// Scenes written by `synth-gen`.
    pub count: usize,
    /// Histogram window of each input frame, microseconds.
    pub frame_us: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            plan: TrainPlan::default(),
            losses: LossConfig::default(),
            family: SceneFamily::default(),
            seed: 0,
            count: 500,
            frame_us: 50_000,
            data: None,
            out: None,
            checkpoint: None,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config { field: key.to_string(), detail: format!("cannot parse `{value}`") })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config { field: key.to_string(), detail: format!("expected a boolean, got `{value}`") }),
    }
}

impl RunConfig {
    /// Applies one setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if ModelConfig::is_model_key(key) {
            return self.model.set(key, value);
        }
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                self.plan.seed = self.seed;
            }
            "epochs" => self.plan.epochs = parse(key, value)?,
            "lr" => self.plan.lr0 = parse(key, value)?,
            "lr_drop_epoch" => self.plan.lr_drop_epoch = parse(key, value)?,
            "lr_drop_factor" => self.plan.lr_drop_factor = parse(key, value)?,
            "batch_size" => self.plan.batch_size = parse(key, value)?,
            "weight_decay" => self.plan.weight_decay = parse(key, value)?,
            "shuffle" => self.plan.shuffle = parse_bool(key, value)?,
            "spike_penalty" => self.plan.spike_penalty_enabled = parse_bool(key, value)?,
            "clip_norm" => {
                self.plan.clip_norm = match value {
                    "none" | "off" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "calibration_probes" => self.plan.calibration_probes = parse(key, value)?,
            "calibration_density" => self.plan.calibration.density = parse(key, value)?,
            "lambda_smooth" => self.losses.lambda_smooth = parse(key, value)?,
            "lambda_spike" => self.losses.lambda_spike = parse(key, value)?,
            "lambda_offset" => self.losses.lambda_offset = parse(key, value)?,
            "count" => self.count = parse(key, value)?,
            "frame_us" => self.frame_us = parse(key, value)?,
            "scene_theta" => self.family.theta = parse(key, value)?,
            "scene_baseline" => self.family.baseline = parse(key, value)?,
            "scene_ego_speed" => self.family.ego_speed = parse(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            _ => return Err(Error::Config { field: key.to_string(), detail: "unknown configuration key".into() }),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
                path: origin.to_string(),
                detail: format!("line {}: expected `key = value`", n + 1),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.plan.validate()?;
        self.losses.validate()?;
        self.family.validate()?;
        if self.frame_us == 0 {
            return Err(Error::Config { field: "frame_us".into(), detail: "must be positive".into() });
        }
        Ok(())
    }

    /// Every effective setting, in a form [`apply_text`](Self::apply_text) reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.model.to_pairs() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        let p = &self.plan;
        let l = &self.losses;
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("epochs", p.epochs.to_string()),
            ("lr", p.lr0.to_string()),
            ("lr_drop_epoch", p.lr_drop_epoch.to_string()),
            ("lr_drop_factor", p.lr_drop_factor.to_string()),
            ("batch_size", p.batch_size.to_string()),
            ("weight_decay", p.weight_decay.to_string()),
            ("shuffle", p.shuffle.to_string()),
            ("spike_penalty", p.spike_penalty_enabled.to_string()),
            ("clip_norm", p.clip_norm.map_or("none".into(), |c| c.to_string())),
            ("calibration_probes", p.calibration_probes.to_string()),
            ("calibration_density", p.calibration.density.to_string()),
            ("lambda_smooth", l.lambda_smooth.to_string()),
            ("lambda_spike", l.lambda_spike.to_string()),
            ("lambda_offset", l.lambda_offset.to_string()),
            ("count", self.count.to_string()),
            ("frame_us", self.frame_us.to_string()),
            ("scene_theta", self.family.theta.to_string()),
            ("scene_baseline", self.family.baseline.to_string()),
            ("scene_ego_speed", self.family.ego_speed.to_string()),
        ];
        for (k, v) in pairs {
            writeln!(s, "{k} = {v}").unwrap();
        }
        for (k, v) in [("data", &self.data), ("out", &self.out), ("checkpoint", &self.checkpoint)] {
            if let Some(p) = v {
                writeln!(s, "{k} = {}", p.display()).unwrap();
            }
        }
        s
    }

    /// Writes the effective configuration to `dir/config.txt`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.txt");
        fs::write(&path, self.to_text()).map_err(|source| Error::Io { path, source })
    }
}
