//! Run configuration: defaults, a line-oriented `section.key = value` file
//! format, command-line overrides and a canonical echo.
//!
//! ```text
//! # comments start with '#'
//! channel.rho = 0.9
//! experiments.thresholds = 0.05, 0.1, 0.2
//! experiments.mcs_list = qpsk:0.602, qam16:0.602
//! ```
//!
//! Later assignments win, and overrides are applied after the file. The
//! canonical echo ([`RunConfig::to_config_string`]) lists every key and
//! parses back to the same configuration.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::channel::{ChannelParams, Fading, Modulation};
use crate::error::{Error, Result};
use crate::experiments::ExperimentConfig;
use crate::link_budget::LinkBudgetParams;
use crate::model::ModelConfig;
use crate::par::Execution;
use crate::restoration::{Criterion, RestorationConfig};
use crate::traces::{Activity, MIN_DURATION_S};
use crate::training::TrainConfig;

/// Synthetic trace generation for the train and validation splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceConfig {
    pub duration_s: f64,
    pub activities: Vec<Activity>,
    /// Independent recordings per activity in each split.
    pub train_repetitions: usize,
    pub val_repetitions: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            duration_s: 120.0,
            activities: Activity::ALL.to_vec(),
            train_repetitions: 1,
            val_repetitions: 1,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s >= MIN_DURATION_S) {
            return Err(Error::invalid("traces.duration_s", format!("must be >= {MIN_DURATION_S} s")));
        }
        if self.activities.is_empty() {
            return Err(Error::invalid("traces.activities", "need at least one activity"));
        }
        if self.train_repetitions == 0 || self.val_repetitions == 0 {
            return Err(Error::invalid("traces.train_repetitions", "each split needs at least one repetition"));
        }
        Ok(())
    }

    /// Generator seed for one recording. The two splits never share a seed.
    pub fn trace_seed(run_seed: u64, validation: bool, repetition: usize, activity: Activity) -> u64 {
        let split = if validation { 1u64 } else { 0 };
        let idx = Activity::ALL.iter().position(|a| *a == activity).unwrap_or(0) as u64;
        run_seed
            .wrapping_mul(1_000_003)
            .wrapping_add(split << 32)
            .wrapping_add((repetition as u64) << 8)
            .wrapping_add(idx)
    }
}

/// The complete configuration of a run.
///
/// `run.seed` seeds every random component: trace generation, channel,
/// weight initialisation, training and experiment users. The restoration
/// history length always equals the model's.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub channel: ChannelParams,
    pub link: LinkBudgetParams,
    pub traces: TraceConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub restoration: RestorationConfig,
    pub experiments: ExperimentConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            channel: ChannelParams::default(),
            link: LinkBudgetParams::default(),
            traces: TraceConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            restoration: RestorationConfig::default(),
            experiments: ExperimentConfig::default(),
            seed: 1,
            out_dir: PathBuf::from("out"),
            parallel: true,
        };
        cfg.sync();
        cfg
    }
}

fn parse_value<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
}

fn parse_f64(v: &str) -> std::result::Result<f64, String> {
    match v.to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        _ => parse_value(v),
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn parse_list<T>(v: &str, item: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(item).collect()
}

fn parse_fixed<const N: usize>(v: &str) -> std::result::Result<[f64; N], String> {
    let items = parse_list(v, parse_f64)?;
    items
        .try_into()
        .map_err(|got: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", got.len()))
}

fn parse_mcs(v: &str) -> std::result::Result<(Modulation, f64), String> {
    let (m, r) = v
        .split_once(':')
        .ok_or_else(|| format!("expected modulation:rate, got `{v}`"))?;
    Ok((parse_value(m.trim())?, parse_f64(r.trim())?))
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Propagates shared settings into the section structs.
    fn sync(&mut self) {
        let exec = if self.parallel { Execution::Parallel } else { Execution::Sequential };
        self.channel.seed = self.seed;
        self.train.seed = self.seed;
        self.train.execution = exec;
        self.experiments.seed = self.seed;
        self.experiments.execution = exec;
        self.restoration.history_len = self.model.history_len;
    }

    /// Assigns one key. Errors carry only the message; the caller adds the
    /// key and line.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let c = &mut self.channel;
        let l = &mut self.link;
        let tr = &mut self.traces;
        let m = &mut self.model;
        let t = &mut self.train;
        let r = &mut self.restoration;
        let e = &mut self.experiments;
        match key {
            "run.seed" => self.seed = parse_value(v)?,
            "run.out" => self.out_dir = PathBuf::from(v),
            "run.parallel" => self.parallel = parse_bool(v)?,

            "channel.mu_db" => c.mu_db = parse_f64(v)?,
            "channel.sigma_sh_db" => c.sigma_sh_db = parse_f64(v)?,
            "channel.rho" => c.rho = parse_f64(v)?,
            "channel.code_rate" => c.code_rate = parse_f64(v)?,
            "channel.packet_bits" => c.packet_bits = parse_value(v)?,
            "channel.diversity" => c.diversity = parse_value(v)?,
            "channel.bandwidth_hz" => c.bandwidth_hz = parse_f64(v)?,
            "channel.modulation" => c.modulation = parse_value(v)?,
            "channel.fading" => c.fading = parse_value::<Fading>(v)?,
            "channel.fec_g0_db" => c.fec_g0_db = parse_f64(v)?,

            "link.ptx_dbm" => l.ptx_dbm = parse_f64(v)?,
            "link.gtx_db" => l.gtx_db = parse_f64(v)?,
            "link.grx_db" => l.grx_db = parse_f64(v)?,
            "link.noise_floor_dbm" => l.noise_floor_dbm = parse_f64(v)?,
            "link.fc_ghz" => l.fc_ghz = parse_f64(v)?,
            "link.h_bs_m" => l.h_bs_m = parse_f64(v)?,
            "link.h_ut_m" => l.h_ut_m = parse_f64(v)?,
            "link.sigma_los_db" => l.sigma_los_db = parse_f64(v)?,
            "link.sigma_nlos_db" => l.sigma_nlos_db = parse_f64(v)?,

            "traces.duration_s" => tr.duration_s = parse_f64(v)?,
            "traces.activities" => tr.activities = parse_list(v, parse_value::<Activity>)?,
            "traces.train_repetitions" => tr.train_repetitions = parse_value(v)?,
            "traces.val_repetitions" => tr.val_repetitions = parse_value(v)?,

            "model.history_len" => m.history_len = parse_value(v)?,
            "model.latent" => m.latent = parse_value(v)?,
            "model.heads" => m.heads = parse_value(v)?,
            "model.hidden" => m.hidden = parse_value(v)?,

            "train.epochs" => t.epochs = parse_value(v)?,
            "train.batch_size" => t.batch_size = parse_value(v)?,
            "train.lr0" => t.lr0 = parse_f64(v)?,
            "train.lr_step" => t.lr_step = parse_value(v)?,
            "train.lr_gamma" => t.lr_gamma = parse_f64(v)?,
            "train.lambda_mse" => t.lambda_mse = parse_f64(v)?,
            "train.lambda_rel" => t.lambda_rel = parse_f64(v)?,
            "train.tau" => t.tau = parse_f64(v)?,
            "train.rollout_horizon" => t.rollout_horizon = parse_value(v)?,
            "train.beta1" => t.beta1 = parse_f64(v)?,
            "train.beta2" => t.beta2 = parse_f64(v)?,
            "train.adam_eps" => t.adam_eps = parse_f64(v)?,
            "train.stride" => t.stride = parse_value(v)?,

            "restoration.threshold" => r.threshold = parse_f64(v)?,
            "restoration.criterion" => r.criterion = v.parse::<Criterion>().map_err(|e| e.to_string())?,
            "restoration.tau" => r.tau = parse_f64(v)?,
            "restoration.append_failed_estimate" => r.append_failed_estimate = parse_bool(v)?,

            "experiments.steps" => e.steps = parse_f64(v).and_then(|x| {
                if x >= 0.0 && x.fract() == 0.0 && x < 1e15 {
                    Ok(x as usize)
                } else {
                    Err(format!("expected a whole number, got `{v}`"))
                }
            })?,
            "experiments.target_plr" => e.target_plr = parse_f64(v)?,
            "experiments.thresholds" => e.thresholds = parse_list(v, parse_f64)?,
            "experiments.snr_bounds" => {
                let [a, b] = parse_fixed::<2>(v)?;
                e.snr_bounds = (a, b);
            }
            "experiments.snr_tol" => e.snr_tol = parse_f64(v)?,
            "experiments.mcs_list" => e.mcs_list = parse_list(v, parse_mcs)?,
            "experiments.burst_lengths" => e.burst_lengths = parse_list(v, parse_value)?,
            "experiments.burst_period" => e.burst_period = parse_value(v)?,
            "experiments.burst_background" => e.burst_background = parse_bool(v)?,
            "experiments.bandwidths" => e.bandwidths = parse_list(v, parse_f64)?,
            "experiments.snr_db" => e.snr_db = parse_f64(v)?,
            "experiments.capacity_snr_db" => e.capacity_snr_db = parse_f64(v)?,
            "experiments.rolling_window" => e.rolling_window = parse_value(v)?,
            "experiments.rolling_stride" => e.rolling_stride = parse_value(v)?,
            "experiments.p_star" => e.p_star = parse_f64(v)?,
            "experiments.coverage_grid" => {
                let [a, b, s] = parse_fixed::<3>(v)?;
                e.coverage_grid = (a, b, s);
            }
            _ => return Err("unknown key".to_string()),
        }
        self.sync();
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.channel;
        let l = &self.link;
        let tr = &self.traces;
        let m = &self.model;
        let t = &self.train;
        let r = &self.restoration;
        let e = &self.experiments;
        vec![
            ("run.seed", self.seed.to_string()),
            ("run.out", self.out_dir.display().to_string()),
            ("run.parallel", self.parallel.to_string()),
            ("channel.mu_db", c.mu_db.to_string()),
            ("channel.sigma_sh_db", c.sigma_sh_db.to_string()),
            ("channel.rho", c.rho.to_string()),
            ("channel.code_rate", c.code_rate.to_string()),
            ("channel.packet_bits", c.packet_bits.to_string()),
            ("channel.diversity", c.diversity.to_string()),
            ("channel.bandwidth_hz", c.bandwidth_hz.to_string()),
            ("channel.modulation", c.modulation.name().to_string()),
            ("channel.fading", c.fading.to_string()),
            ("channel.fec_g0_db", c.fec_g0_db.to_string()),
            ("link.ptx_dbm", l.ptx_dbm.to_string()),
            ("link.gtx_db", l.gtx_db.to_string()),
            ("link.grx_db", l.grx_db.to_string()),
            ("link.noise_floor_dbm", l.noise_floor_dbm.to_string()),
            ("link.fc_ghz", l.fc_ghz.to_string()),
            ("link.h_bs_m", l.h_bs_m.to_string()),
            ("link.h_ut_m", l.h_ut_m.to_string()),
            ("link.sigma_los_db", l.sigma_los_db.to_string()),
            ("link.sigma_nlos_db", l.sigma_nlos_db.to_string()),
            ("traces.duration_s", tr.duration_s.to_string()),
            ("traces.activities", join(&tr.activities, |a| a.name().to_string())),
            ("traces.train_repetitions", tr.train_repetitions.to_string()),
            ("traces.val_repetitions", tr.val_repetitions.to_string()),
            ("model.history_len", m.history_len.to_string()),
            ("model.latent", m.latent.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.hidden", m.hidden.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr0", t.lr0.to_string()),
            ("train.lr_step", t.lr_step.to_string()),
            ("train.lr_gamma", t.lr_gamma.to_string()),
            ("train.lambda_mse", t.lambda_mse.to_string()),
            ("train.lambda_rel", t.lambda_rel.to_string()),
            ("train.tau", t.tau.to_string()),
            ("train.rollout_horizon", t.rollout_horizon.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.stride", t.stride.to_string()),
            ("restoration.threshold", r.threshold.to_string()),
            ("restoration.criterion", r.criterion.to_string()),
            ("restoration.tau", r.tau.to_string()),
            ("restoration.append_failed_estimate", r.append_failed_estimate.to_string()),
            ("experiments.steps", e.steps.to_string()),
            ("experiments.target_plr", e.target_plr.to_string()),
            ("experiments.thresholds", join(&e.thresholds, f64::to_string)),
            ("experiments.snr_bounds", format!("{}, {}", e.snr_bounds.0, e.snr_bounds.1)),
            ("experiments.snr_tol", e.snr_tol.to_string()),
            ("experiments.mcs_list", join(&e.mcs_list, |(m, r)| format!("{}:{r}", m.name()))),
            ("experiments.burst_lengths", join(&e.burst_lengths, usize::to_string)),
            ("experiments.burst_period", e.burst_period.to_string()),
            ("experiments.burst_background", e.burst_background.to_string()),
            ("experiments.bandwidths", join(&e.bandwidths, f64::to_string)),
            ("experiments.snr_db", e.snr_db.to_string()),
            ("experiments.capacity_snr_db", e.capacity_snr_db.to_string()),
            ("experiments.rolling_window", e.rolling_window.to_string()),
            ("experiments.rolling_stride", e.rolling_stride.to_string()),
            ("experiments.p_star", e.p_star.to_string()),
            (
                "experiments.coverage_grid",
                format!("{}, {}, {}", e.coverage_grid.0, e.coverage_grid.1, e.coverage_grid.2),
            ),
        ]
    }

    /// The canonical `key = value` echo, sufficient to replay the run.
    pub fn to_config_string(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical echo, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_config_string().as_bytes()))
    }

    /// Checks every section. The error names the offending key.
    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.link.validate()?;
        self.traces.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.restoration.validate()?;
        self.experiments.validate()
    }

    /// Parses config text, applies `overrides` (`key=value`) on top and
    /// validates the result. Override lines are numbered after the text's
    /// last line.
    pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut line_of: HashMap<String, usize> = HashMap::new();
        let text_lines = text.lines().count();
        let override_lines = overrides.iter().map(String::as_str);
        for (idx, raw) in text.lines().chain(override_lines).enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                key: content.to_string(),
                line,
                message: "expected `section.key = value`".to_string(),
            })?;
            let key = key.trim();
            cfg.set(key, value).map_err(|message| Error::Config {
                key: key.to_string(),
                line,
                message: if idx >= text_lines {
                    format!("{message} (in --set override)")
                } else {
                    message
                },
            })?;
            line_of.insert(key.to_string(), line);
        }
        cfg.validate().map_err(|e| match e {
            Error::InvalidParameter { name, reason } => Error::Config {
                key: name.to_string(),
                line: line_of.get(name).copied().unwrap_or(0),
                message: reason,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    /// Reads and parses a config file. `None` means all defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        RunConfig::parse(&text, overrides)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.channel.rho, 0.95);
        assert_eq!(cfg.channel.packet_bits, 256);
        assert_eq!(cfg.restoration.threshold, 0.1);
        assert_eq!(cfg.experiments.target_plr, 1e-5);
    }

    #[test]
    fn echo_round_trips() {
        let text = "channel.modulation = qam16\nexperiments.mcs_list = bpsk:0.5, qpsk:0.602\nrestoration.threshold = inf\ntraces.activities = dyn_tap, rb_tap\nrun.parallel = false\n";
        let cfg = RunConfig::parse(text, &[]).unwrap();
        let again = RunConfig::parse(&cfg.to_config_string(), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
        assert_eq!(again.experiments.execution, Execution::Sequential);
    }

    #[test]
    fn out_of_range_rho_names_key_and_line() {
        let err = RunConfig::parse("# header\n\nchannel.rho = 1.5\n", &[]).unwrap_err();
        match err {
            Error::Config { key, line, .. } => {
                assert_eq!(key, "channel.rho");
                assert_eq!(line, 3);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_key_and_type_errors() {
        let err = RunConfig::parse("channel.rhoo = 0.5", &[]).unwrap_err().to_string();
        assert!(err.contains("channel.rhoo") && err.contains("line 1"), "{err}");
        let err = RunConfig::parse("\nmodel.heads = four", &[]).unwrap_err().to_string();
        assert!(err.contains("model.heads") && err.contains("line 2"), "{err}");
    }

    #[test]
    fn override_wins_over_file() {
        let cfg = RunConfig::parse("experiments.steps = 5000\n", &["experiments.steps=100000".into()]).unwrap();
        assert_eq!(cfg.experiments.steps, 100_000);
        let cfg = RunConfig::parse("", &["experiments.steps=1e5".into()]).unwrap();
        assert_eq!(cfg.experiments.steps, 100_000);
    }

    #[test]
    fn seed_and_history_propagate() {
        let cfg = RunConfig::parse("run.seed = 42\nmodel.history_len = 16", &[]).unwrap();
        assert_eq!(cfg.channel.seed, 42);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.restoration.history_len, 16);
    }

    #[test]
    fn trace_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for v in [false, true] {
            for rep in 0..3 {
                for a in Activity::ALL {
                    assert!(seen.insert(TraceConfig::trace_seed(7, v, rep, a)));
                }
            }
        }
    }
}
