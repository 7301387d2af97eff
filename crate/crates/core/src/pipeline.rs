//! Pipeline stages behind the command-line subcommands.
//!
//! Every stage reads its inputs from and writes its artifacts to the run's
//! output directory, so stages can be run one at a time or chained with
//! [`Command::All`]. Outputs carry no timestamps: the same configuration
//! always produces the same bytes.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};

use crate::channel::{simulate_losses, ChannelParams};
use crate::config::{RunConfig, TraceConfig};
use crate::error::{Error, Result};
use crate::experiments::{
    burst_experiment, coverage_curve, evaluation_stream, force_dynamics_table, mcs_label, min_snr_table, network_capacity,
    one_step_errors, rolling_mse_table, threshold_sweep, ExperimentResult, Table, EXPERIMENTS,
};
use crate::model::{Normalization, XhapModel};
use crate::par::map_slice;
use crate::restoration::{run_restoration, stats_row, HoldLast, NoRestoration, Predictor, RestorationConfig, STATS_HEADER};
use crate::traces::{generate_trace, read_trace, write_trace, Activity, Trace};
use crate::training::{train, Dataset};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const EVALUATION_FILE: &str = "evaluation.csv";
pub const RESTORE_FILE: &str = "restore.csv";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.txt";
pub const MANIFEST_FILE: &str = "MANIFEST.txt";
pub const TRACE_DIR: &str = "traces";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    GenTraces,
    Train,
    Evaluate,
    Restore,
    Experiment(String),
    All,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::GenTraces => f.write_str("gen-traces"),
            Command::Train => f.write_str("train"),
            Command::Evaluate => f.write_str("evaluate"),
            Command::Restore => f.write_str("restore"),
            Command::Experiment(name) => write!(f, "experiment {name}"),
            Command::All => f.write_str("all"),
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut words = s.split_whitespace();
        let cmd = match (words.next(), words.next()) {
            (Some("gen-traces"), None) => Command::GenTraces,
            (Some("train"), None) => Command::Train,
            (Some("evaluate"), None) => Command::Evaluate,
            (Some("restore"), None) => Command::Restore,
            (Some("all"), None) => Command::All,
            (Some("experiment"), Some(name)) if EXPERIMENTS.contains(&name) => Command::Experiment(name.to_string()),
            (Some("experiment"), Some(name)) => return Err(Error::UnknownExperiment(name.to_string())),
            _ => return Err(Error::invalid("command", format!("unknown command `{s}`"))),
        };
        if words.next().is_some() {
            return Err(Error::invalid("command", format!("unexpected arguments in `{s}`")));
        }
        Ok(cmd)
    }
}

/// Which trace split a file belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// A configured run rooted at `config.out_dir`.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: RunConfig,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline { config })
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.out_dir
    }

    fn path(&self, file: &str) -> PathBuf {
        self.config.out_dir.join(file)
    }

    pub fn trace_path(&self, split: Split, activity: Activity, repetition: usize) -> PathBuf {
        self.path(TRACE_DIR)
            .join(format!("{}_{}_r{repetition}.csv", split.name(), activity.name()))
    }

    fn repetitions(&self, split: Split) -> usize {
        match split {
            Split::Train => self.config.traces.train_repetitions,
            Split::Val => self.config.traces.val_repetitions,
        }
    }

    fn trace_jobs(&self, split: Split) -> Vec<(Activity, usize)> {
        self.config
            .traces
            .activities
            .iter()
            .flat_map(|&a| (0..self.repetitions(split)).map(move |r| (a, r)))
            .collect()
    }

    /// Runs a command, writing `effective_config.txt` first.
    pub fn run(&self, command: &Command) -> Result<()> {
        std::fs::create_dir_all(self.out_dir()).map_err(|e| Error::io(self.out_dir(), e))?;
        let path = self.path(EFFECTIVE_CONFIG_FILE);
        std::fs::write(&path, self.config.to_config_string()).map_err(|e| Error::io(&path, e))?;
        let started = Instant::now();
        match command {
            Command::GenTraces => self.gen_traces()?,
            Command::Train => {
                self.train()?;
            }
            Command::Evaluate => self.evaluate()?,
            Command::Restore => self.restore()?,
            Command::Experiment(name) => {
                self.experiment(name)?;
                self.write_manifest()?;
            }
            Command::All => {
                self.gen_traces()?;
                self.train()?;
                self.evaluate()?;
                self.restore()?;
                for name in EXPERIMENTS {
                    self.experiment(name)?;
                }
                self.write_manifest()?;
            }
        }
        info!("{command} finished in {:.1} s", started.elapsed().as_secs_f64());
        Ok(())
    }

    /// Generates the raw train and validation recordings.
    pub fn gen_traces(&self) -> Result<()> {
        let dir = self.path(TRACE_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let tc = &self.config.traces;
        let mut jobs = Vec::new();
        for split in [Split::Train, Split::Val] {
            jobs.extend(self.trace_jobs(split).into_iter().map(|(a, r)| (split, a, r)));
        }
        let results = map_slice(self.config.experiments.execution, &jobs, |&(split, a, r)| {
            let seed = TraceConfig::trace_seed(self.config.seed, split == Split::Val, r, a);
            let trace = generate_trace(a, tc.duration_s, seed)?;
            write_trace(&self.trace_path(split, a, r), &trace)
        });
        results.into_iter().collect::<Result<Vec<_>>>()?;
        info!("wrote {} traces to {}", jobs.len(), dir.display());
        Ok(())
    }

    /// Loads and trims every recording of a split.
    pub fn load_traces(&self, split: Split) -> Result<Vec<Trace>> {
        self.trace_jobs(split)
            .into_iter()
            .map(|(a, r)| {
                let path = self.trace_path(split, a, r);
                if !path.exists() {
                    return Err(Error::MissingPrerequisite {
                        what: format!("trace file {}", path.display()),
                        producer: "gen-traces",
                    });
                }
                read_trace(&path, a)?.trimmed()
            })
            .collect()
    }

    /// Trains a model, saves the checkpoint and the training log, and
    /// returns the model as reloaded from disk.
    pub fn train(&self) -> Result<XhapModel> {
        let cfg = &self.config;
        let train_traces = self.load_traces(Split::Train)?;
        let val_traces = self.load_traces(Split::Val)?;
        let norm = Normalization::fit(&train_traces)?;
        let horizon = cfg.train.rollout_horizon;
        let l = cfg.model.history_len;
        let train_set = Dataset::from_traces(&train_traces, &norm, l, horizon, cfg.train.stride)?;
        let val_set = Dataset::from_traces(&val_traces, &norm, l, 1, cfg.train.stride)?;
        let mut model = XhapModel::new(cfg.model, cfg.seed)?;
        model.normalization = norm;
        info!(
            "training {} parameters on {} examples ({} validation windows)",
            model.param_count(),
            train_set.len(),
            val_set.len()
        );
        let (best, history) = train(model, &train_set, &val_set, &cfg.train)?;
        info!(
            "validation MSE {:.3e} -> {:.3e} (best epoch {})",
            history.initial_val_mse,
            history.best_val_mse(),
            history.best_epoch
        );
        history.write_csv(&self.path(TRAIN_LOG_FILE))?;
        let ckpt = self.path(CHECKPOINT_FILE);
        best.save(&ckpt)?;
        XhapModel::load(&ckpt)
    }

    pub fn load_model(&self) -> Result<XhapModel> {
        let ckpt = self.path(CHECKPOINT_FILE);
        if !ckpt.exists() {
            return Err(Error::MissingPrerequisite {
                what: format!("model checkpoint {}", ckpt.display()),
                producer: "train",
            });
        }
        XhapModel::load(&ckpt)
    }

    fn restoration_config(&self, model: &XhapModel) -> RestorationConfig {
        RestorationConfig {
            history_len: model.config.history_len,
            ..self.config.restoration
        }
    }

    /// One-step validation MSE per activity for the model and hold-last.
    pub fn evaluate(&self) -> Result<()> {
        let model = self.load_model()?;
        let val = self.load_traces(Split::Val)?;
        let l = model.config.history_len;
        let exec = self.config.experiments.execution;
        let mut table = Table::new("evaluation", &["model", "activity", "repetition", "windows", "mse"]);
        for (tr, (_, rep)) in val.iter().zip(self.trace_jobs(Split::Val)) {
            for p in [&model as &dyn Predictor, &HoldLast] {
                let errors = one_step_errors(p, tr, l, exec)?;
                let mse = errors.iter().sum::<f64>() / errors.len() as f64;
                table.push(vec![
                    p.name().to_string(),
                    tr.activity.name().to_string(),
                    rep.to_string(),
                    errors.len().to_string(),
                    format!("{mse:.8e}"),
                ]);
            }
        }
        table.write(self.out_dir())
    }

    /// Runtime restoration of each validation trace over the configured
    /// channel.
    pub fn restore(&self) -> Result<()> {
        let model = self.load_model()?;
        let val = self.load_traces(Split::Val)?;
        let rc = self.restoration_config(&model);
        let mut text = format!("activity,repetition,mu_db,raw_plr,{STATS_HEADER}\n");
        for (i, (tr, (_, rep))) in val.iter().zip(self.trace_jobs(Split::Val)).enumerate() {
            let ch = ChannelParams {
                seed: self.config.channel.seed.wrapping_add(i as u64),
                ..self.config.channel.clone()
            };
            let losses = simulate_losses(&ch, tr.len());
            for p in [&model as &dyn Predictor, &HoldLast] {
                let stats = run_restoration(tr, &losses, p, &rc)?;
                text.push_str(&format!(
                    "{},{rep},{},{:.8e},{}\n",
                    tr.activity.name(),
                    ch.mu_db,
                    losses.raw_plr,
                    stats_row(&stats, &rc, p.name())
                ));
            }
        }
        let path = self.path(RESTORE_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Runs one named experiment and writes its CSV.
    pub fn experiment(&self, name: &str) -> Result<ExperimentResult> {
        let cfg = &self.config;
        let ec = &cfg.experiments;
        let started = Instant::now();
        let table = if name == "coverage" {
            let required = self.read_min_snr()?;
            coverage_curve(&required, ec.p_star, &cfg.link, ec.coverage_grid)?
        } else {
            if !EXPERIMENTS.contains(&name) {
                return Err(Error::UnknownExperiment(name.to_string()));
            }
            let model = self.load_model()?;
            let val = self.load_traces(Split::Val)?;
            let rc = self.restoration_config(&model);
            let l = model.config.history_len;
            let stream = evaluation_stream(&val, ec.steps)?;
            let xhap: &dyn Predictor = &model;
            match name {
                "min_snr" => min_snr_table(&[xhap, &HoldLast, &NoRestoration], &stream, &cfg.channel, &rc, ec)?,
                "threshold_sweep" => threshold_sweep(&[xhap, &HoldLast], &stream, &cfg.channel, &rc, ec)?,
                "rolling_mse" => rolling_mse_table(&[xhap, &HoldLast], &stream, l, ec)?,
                "force_dynamics" => force_dynamics_table(xhap, &val, l, ec)?,
                "burst" => burst_experiment(&[xhap, &HoldLast], &stream, &cfg.channel, &rc, ec)?,
                "capacity" => network_capacity(&[xhap, &HoldLast, &NoRestoration], &stream, &cfg.channel, &rc, ec)?,
                _ => unreachable!("experiment names are checked above"),
            }
        };
        table.write(self.out_dir())?;
        info!(
            "experiment {name}: {} rows in {:.1} s",
            table.rows.len(),
            started.elapsed().as_secs_f64()
        );
        Ok(ExperimentResult {
            name: name.to_string(),
            tables: vec![table],
            config_hash: cfg.hash(),
            seed: cfg.seed,
        })
    }

    /// Required SNR per model at the base MCS and threshold, from
    /// `min_snr.csv`.
    fn read_min_snr(&self) -> Result<Vec<(String, f64)>> {
        let path = self.path("min_snr.csv");
        if !path.exists() {
            return Err(Error::MissingPrerequisite {
                what: path.display().to_string(),
                producer: "experiment min_snr",
            });
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let base_mcs = mcs_label(self.config.channel.modulation, self.config.channel.code_rate);
        let mut out: Vec<(String, f64)> = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |message: String| Error::Parse {
                path: path.clone(),
                line: i + 1,
                message,
            };
            if f.len() != 5 {
                return Err(bad(format!("expected 5 columns, found {}", f.len())));
            }
            let threshold: f64 = f[2].parse().map_err(|_| bad(format!("bad threshold `{}`", f[2])))?;
            if f[1] != base_mcs || threshold != self.config.restoration.threshold {
                continue;
            }
            if f[4] != "1" {
                warn!("{} never reaches the target; left out of the coverage curves", f[0]);
                continue;
            }
            let snr: f64 = f[3].parse().map_err(|_| bad(format!("bad SNR `{}`", f[3])))?;
            if !out.iter().any(|(m, _)| m == f[0]) {
                out.push((f[0].to_string(), snr));
            }
        }
        Ok(out)
    }

    /// Lists the columns of every CSV present in the output directory.
    pub fn write_manifest(&self) -> Result<()> {
        let mut text = format!(
            "# column index of the run's CSV outputs\nconfig_sha256 = {}\nseed = {}\n\n",
            self.config.hash(),
            self.config.seed
        );
        let files = [TRAIN_LOG_FILE, EVALUATION_FILE, RESTORE_FILE]
            .into_iter()
            .map(String::from)
            .chain(EXPERIMENTS.iter().map(|e| format!("{e}.csv")));
        for file in files {
            let path = self.path(&file);
            if let Ok(content) = std::fs::read_to_string(&path) {
                text.push_str(&format!("{file}: {}\n", content.lines().next().unwrap_or("")));
            }
        }
        let path = self.path(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
