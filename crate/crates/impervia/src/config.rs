//! Flat `key=value` run configuration. Precedence: command-line flag, then
//! config file, then built-in default. Unknown keys are rejected and every
//! value is validated when loaded.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use impervia_core::camarkov::AllocationParams;
use impervia_core::clustering::SignatureStat;
use impervia_core::denoiser::DenoiserConfig;
use impervia_core::diffusion::{make_schedule, DdimOptions, NoiseSchedule, TrainConfig};
use impervia_core::evaluation::{NullResolutionOptions, ResolutionDomain};

use crate::{Error, Result};

pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    /// Subcommands that read this key.
    pub used_by: &'static [&'static str],
}

const MODEL: &[&str] = &["train", "sample"];

pub const KEYS: &[KeySpec] = &[
    KeySpec { name: "seed", default: "0", help: "master random seed", used_by: &["train", "sample", "cluster", "synth"] },
    KeySpec { name: "diffusion_steps", default: "1000", help: "diffusion chain length T", used_by: MODEL },
    KeySpec { name: "beta_start", default: "0.0001", help: "first beta of the linear schedule", used_by: MODEL },
    KeySpec { name: "beta_end", default: "0.02", help: "last beta of the linear schedule", used_by: MODEL },
    KeySpec { name: "depth", default: "3", help: "UNet levels", used_by: MODEL },
    KeySpec { name: "base_channels", default: "8", help: "channels at the finest level", used_by: MODEL },
    KeySpec { name: "gn_groups", default: "4", help: "group-norm groups", used_by: MODEL },
    KeySpec { name: "embed_dim", default: "32", help: "timestep embedding width", used_by: MODEL },
    KeySpec { name: "spade_hidden", default: "8", help: "hidden width of each modulation trunk", used_by: MODEL },
    KeySpec {
        name: "n_cond",
        default: "3",
        help: "conditioning timestamps N",
        used_by: &["train", "sample"],
    },
    KeySpec {
        name: "input_side",
        default: "32",
        help: "patch side in pixels (tiling and model input)",
        used_by: &["ingest", "cluster", "train", "sample"],
    },
    KeySpec { name: "train_steps", default: "1000", help: "optimiser steps", used_by: &["train"] },
    KeySpec { name: "batch_size", default: "8", help: "patches per step", used_by: &["train"] },
    KeySpec { name: "learning_rate", default: "0.0003", help: "Adam learning rate", used_by: &["train"] },
    KeySpec { name: "ema_decay", default: "0.99", help: "EMA decay of the weights", used_by: &["train"] },
    KeySpec { name: "grad_clip", default: "1.0", help: "global gradient-norm clip, 0 disables", used_by: &["train"] },
    KeySpec { name: "ddim_steps", default: "500", help: "DDIM sampling steps", used_by: &["sample"] },
    KeySpec { name: "eta", default: "0", help: "DDIM stochasticity in [0, 1]", used_by: &["sample"] },
    KeySpec { name: "clip_x0", default: "true", help: "clamp each DDIM x0 estimate to [-1, 1]", used_by: &["sample"] },
    KeySpec { name: "seeds", default: "5", help: "forecasts per tile", used_by: &["sample"] },
    KeySpec {
        name: "cond_lag",
        default: "10",
        help: "minimum years between conditioning and target",
        used_by: &["train", "sample"],
    },
    KeySpec {
        name: "target_years",
        default: "",
        help: "comma-separated training targets; empty means every eligible year",
        used_by: &["train"],
    },
    KeySpec { name: "holdout_years", default: "", help: "years never used as training targets", used_by: &["train"] },
    KeySpec {
        name: "scales",
        default: "4,8,16,32,64,128",
        help: "aggregation cell sizes in pixels",
        used_by: &["evaluate"],
    },
    KeySpec { name: "spline_domain", default: "linear", help: "null-resolution spline abscissa: linear or log", used_by: &["evaluate"] },
    KeySpec { name: "clusters", default: "5", help: "k-medoids clusters", used_by: &["cluster"] },
    KeySpec {
        name: "signature_stat",
        default: "mean_change",
        help: "patch signature: mean_change or percent_increased",
        used_by: &["cluster"],
    },
    KeySpec { name: "ca_window", default: "5", help: "odd CA neighbourhood side", used_by: &["ca-forecast"] },
    KeySpec { name: "ca_eta", default: "0.1", help: "allocation multiplier rate", used_by: &["ca-forecast"] },
    KeySpec { name: "ca_tolerance", default: "0.005", help: "per-class area tolerance fraction", used_by: &["ca-forecast"] },
    KeySpec { name: "ca_max_iterations", default: "500", help: "allocation iteration cap", used_by: &["ca-forecast"] },
    KeySpec { name: "ca_greedy_fixup", default: "true", help: "greedy single-cell repair after the loop", used_by: &["ca-forecast"] },
    KeySpec { name: "synth_side", default: "128", help: "synthetic landscape side", used_by: &["synth"] },
    KeySpec {
        name: "synth_years",
        default: "2001,2004,2006,2008,2011,2013,2016,2019",
        help: "synthetic landscape years",
        used_by: &["synth"],
    },
];

pub fn key_spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

pub fn keys_for(command: &str) -> impl Iterator<Item = &'static KeySpec> + '_ {
    KEYS.iter().filter(move |k| k.used_by.contains(&command))
}

/// Raw key/value view with defaults filled in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect() }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key_spec(key).is_none() {
            return Err(Error::Config(format!("unknown key {key}")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("config key {key} is not declared"))
    }

    /// Applies `key=value` lines; `#` starts a comment line.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults, then the optional file, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = Self::default();
        if let Some(f) = file {
            c.merge_file(f)?;
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.settings()?;
        Ok(c)
    }

    pub fn snapshot(&self) -> BTreeMap<String, String> {
        self.values.clone()
    }

    /// Snapshot restricted to the keys one subcommand reads.
    pub fn snapshot_for(&self, command: &str) -> BTreeMap<String, String> {
        keys_for(command).map(|k| (k.name.to_string(), self.get(k.name).to_string())).collect()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| Error::Config(format!("{key}={v} is not a valid value")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("{key}: {t:?} is not a valid item"))))
            .collect()
    }

    /// Typed, validated view of every key.
    pub fn settings(&self) -> Result<Settings> {
        let model = DenoiserConfig {
            depth: self.parse("depth")?,
            base_channels: self.parse("base_channels")?,
            gn_groups: self.parse("gn_groups")?,
            embed_dim: self.parse("embed_dim")?,
            n_cond: self.parse("n_cond")?,
            input_side: self.parse("input_side")?,
            spade_hidden: self.parse("spade_hidden")?,
        };
        let invalid = |e: impervia_core::Error| Error::Config(e.to_string());
        model.validate().map_err(invalid)?;
        let schedule = make_schedule(self.parse("diffusion_steps")?, self.parse("beta_start")?, self.parse("beta_end")?)
            .map_err(invalid)?;
        let clip: f64 = self.parse("grad_clip")?;
        let seed: u64 = self.parse("seed")?;
        let train = TrainConfig {
            steps: self.parse("train_steps")?,
            batch_size: self.parse("batch_size")?,
            learning_rate: self.parse("learning_rate")?,
            ema_decay: self.parse("ema_decay")?,
            grad_clip: (clip > 0.0).then_some(clip),
            seed,
            ..TrainConfig::default()
        };
        train.validate().map_err(invalid)?;
        let ddim = DdimOptions { steps: self.parse("ddim_steps")?, eta: self.parse("eta")?, clip_x0: self.parse("clip_x0")? };
        if ddim.steps == 0 || ddim.steps > schedule.steps() {
            return Err(Error::Config(format!("ddim_steps {} must lie in 1..={}", ddim.steps, schedule.steps())));
        }
        if !(0.0..=1.0).contains(&ddim.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", ddim.eta)));
        }
        let seeds: usize = self.parse("seeds")?;
        if seeds == 0 {
            return Err(Error::Config("seeds must be positive".into()));
        }
        let scales: Vec<usize> = self.list("scales")?;
        if scales.is_empty() || scales.contains(&0) || scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("scales must be positive and strictly increasing".into()));
        }
        let domain = match self.get("spline_domain") {
            "linear" => ResolutionDomain::Linear,
            "log" => ResolutionDomain::Log,
            other => return Err(Error::Config(format!("spline_domain {other} is not linear or log"))),
        };
        let signature = match self.get("signature_stat") {
            "mean_change" => SignatureStat::MeanChange,
            "percent_increased" => SignatureStat::PercentIncreased,
            other => return Err(Error::Config(format!("signature_stat {other} is not mean_change or percent_increased"))),
        };
        let clusters: usize = self.parse("clusters")?;
        if clusters == 0 {
            return Err(Error::Config("clusters must be positive".into()));
        }
        let ca_window: usize = self.parse("ca_window")?;
        if ca_window % 2 == 0 {
            return Err(Error::Config(format!("ca_window {ca_window} must be odd")));
        }
        let allocation = AllocationParams {
            eta: self.parse("ca_eta")?,
            tolerance: self.parse("ca_tolerance")?,
            max_iterations: self.parse("ca_max_iterations")?,
            greedy_fixup: self.parse("ca_greedy_fixup")?,
        };
        if !(allocation.eta > 0.0 && allocation.tolerance >= 0.0) {
            return Err(Error::Config("ca_eta must be positive and ca_tolerance nonnegative".into()));
        }
        let synth_side: usize = self.parse("synth_side")?;
        if synth_side == 0 {
            return Err(Error::Config("synth_side must be positive".into()));
        }
        let synth_years: Vec<u16> = self.list("synth_years")?;
        if synth_years.len() < 2 || synth_years.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("synth_years needs at least two increasing years".into()));
        }
        Ok(Settings {
            seed,
            model,
            schedule,
            train,
            ddim,
            seeds,
            cond_lag: self.parse("cond_lag")?,
            target_years: self.list("target_years")?,
            holdout_years: self.list("holdout_years")?,
            scales,
            null_resolution: NullResolutionOptions { domain, ..Default::default() },
            clusters,
            signature,
            ca_window,
            allocation,
            synth_side,
            synth_years,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub model: DenoiserConfig,
    pub schedule: NoiseSchedule,
    pub train: TrainConfig,
    pub ddim: DdimOptions,
    pub seeds: usize,
    pub cond_lag: u16,
    pub target_years: Vec<u16>,
    pub holdout_years: Vec<u16>,
    pub scales: Vec<usize>,
    pub null_resolution: NullResolutionOptions,
    pub clusters: usize,
    pub signature: SignatureStat,
    pub ca_window: usize,
    pub allocation: AllocationParams,
    pub synth_side: usize,
    pub synth_years: Vec<u16>,
}
