//! System-level evaluation: minimum SNR, coverage, restoration sweeps,
//! rolling error, force dynamics, burst tolerance and network capacity.
//!
//! Every experiment returns a [`Table`] that is written to its own CSV file.
//! Grid points run through [`crate::par`] and each one owns its random
//! stream, so results do not depend on scheduling.

use std::io::Write;
use std::path::Path;

use crate::channel::{goodput, simulate_losses, spectral_efficiency, ChannelParams, LossSequence, Modulation};
use crate::error::{Error, Result};
use crate::link_budget::{coverage_probability, max_coverage_distance, max_path_loss, CoverageDistance, LinkBudgetParams};
use crate::par::{map_range, map_slice, Execution};
use crate::restoration::{run_restoration, PredictContext, Predictor, RestorationConfig, RestorationStats};
use crate::traces::{HapticSample, Trace};

/// Per-user goodput requirement: 1 kHz × 256-bit packets.
pub const USER_RATE_BPS: f64 = 256_000.0;

pub const EXPERIMENTS: [&str; 7] = [
    "min_snr",
    "coverage",
    "threshold_sweep",
    "rolling_mse",
    "force_dynamics",
    "burst",
    "capacity",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Monte Carlo length in packets.
    pub steps: usize,
    pub target_plr: f64,
    /// Restoration thresholds in newtons.
    pub thresholds: Vec<f64>,
    pub snr_bounds: (f64, f64),
    pub snr_tol: f64,
    pub mcs_list: Vec<(Modulation, f64)>,
    pub burst_lengths: Vec<usize>,
    /// One burst starts every this many packets.
    pub burst_period: usize,
    /// Union channel losses at `snr_db` into the burst pattern.
    pub burst_background: bool,
    pub bandwidths: Vec<f64>,
    /// Operating SNR for the threshold/MCS sweep and burst background.
    pub snr_db: f64,
    /// Mean SNR every user sees in the capacity experiment.
    pub capacity_snr_db: f64,
    pub rolling_window: usize,
    /// Only every `rolling_stride`-th rolling value is written out.
    pub rolling_stride: usize,
    pub p_star: f64,
    /// Coverage grid: first distance, last distance and spacing in meters.
    pub coverage_grid: (f64, f64, f64),
    pub seed: u64,
    pub execution: Execution,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            steps: 1_000_000,
            target_plr: 1e-5,
            thresholds: vec![0.05, 0.1, 0.2],
            snr_bounds: (0.0, 60.0),
            snr_tol: 0.25,
            mcs_list: vec![
                (Modulation::Bpsk, 0.602),
                (Modulation::Qpsk, 0.602),
                (Modulation::Qam16, 0.602),
            ],
            burst_lengths: (1..=8).collect(),
            burst_period: 1000,
            burst_background: false,
            bandwidths: vec![5e6, 10e6, 20e6, 40e6],
            snr_db: 12.0,
            capacity_snr_db: 20.0,
            rolling_window: 5000,
            rolling_stride: 50,
            p_star: 0.99,
            coverage_grid: (10.0, 1000.0, 10.0),
            seed: 1,
            execution: Execution::Parallel,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("experiments.steps", "must be at least 1"));
        }
        if !(self.target_plr > 0.0 && self.target_plr < 1.0) {
            return Err(Error::invalid("experiments.target_plr", "must lie in (0, 1)"));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::invalid("experiments.thresholds", "need positive thresholds"));
        }
        let (lo, hi) = self.snr_bounds;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid("experiments.snr_bounds", "must be finite and ordered"));
        }
        if !(self.snr_db.is_finite() && self.capacity_snr_db.is_finite()) {
            return Err(Error::invalid("experiments.snr_db", "operating SNRs must be finite"));
        }
        if !(self.snr_tol > 0.0) {
            return Err(Error::invalid("experiments.snr_tol", "must be positive"));
        }
        if self.burst_lengths.contains(&0) {
            return Err(Error::invalid("experiments.burst_lengths", "burst lengths must be at least 1"));
        }
        if self.burst_period == 0 {
            return Err(Error::invalid("experiments.burst_period", "must be at least 1"));
        }
        if self.bandwidths.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::invalid("experiments.bandwidths", "must be positive"));
        }
        if self.rolling_window == 0 || self.rolling_stride == 0 {
            return Err(Error::invalid("experiments.rolling_window", "window and stride must be positive"));
        }
        if !(self.p_star > 0.0 && self.p_star < 1.0) {
            return Err(Error::invalid("experiments.p_star", "must lie in (0, 1)"));
        }
        let (a, b, s) = self.coverage_grid;
        if !(a > 0.0 && b >= a && s > 0.0) {
            return Err(Error::invalid("experiments.coverage_grid", "need 0 < start <= stop and step > 0"));
        }
        Ok(())
    }

    /// Largest number of packets that may go unrestored within `steps`.
    pub fn loss_budget(&self, steps: usize) -> usize {
        (self.target_plr * steps as f64).floor() as usize
    }
}

/// A named CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &'static str, columns: &[&'static str]) -> Self {
        Table {
            name,
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len(), "row width for {}", self.name);
        self.rows.push(row);
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(self.file_name());
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(&path, e))
    }

    /// Values of one column, in row order.
    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.columns.iter().position(|c| *c == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }
}

/// Tables plus the hash of the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub name: String,
    pub tables: Vec<Table>,
    pub config_hash: String,
    pub seed: u64,
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// Concatenates `traces` cyclically into one stream of exactly `steps`
/// samples with renumbered ticks. The activity label is the first trace's.
pub fn evaluation_stream(traces: &[Trace], steps: usize) -> Result<Trace> {
    let first = traces
        .iter()
        .find(|t| !t.is_empty())
        .ok_or_else(|| Error::invalid("traces", "need at least one non-empty trace"))?;
    let samples: Vec<HapticSample> = traces
        .iter()
        .flat_map(|t| t.samples.iter())
        .cycle()
        .take(steps)
        .enumerate()
        .map(|(i, s)| HapticSample { t: i as u64, ..*s })
        .collect();
    Ok(Trace {
        activity: first.activity,
        samples,
        sample_rate_hz: first.sample_rate_hz,
    })
}

/// Result of a minimum-SNR search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MinSnr {
    /// Smallest feasible mean SNR found, within the search tolerance.
    Reached(f64),
    /// Infeasible even at the upper bound.
    Unreachable,
}

impl MinSnr {
    pub fn db(self) -> Option<f64> {
        match self {
            MinSnr::Reached(v) => Some(v),
            MinSnr::Unreachable => None,
        }
    }
}

/// Whether the effective PLR over `stream` meets the target at mean SNR
/// `mu_db`.
pub fn feasible_at(
    predictor: &dyn Predictor,
    stream: &Trace,
    channel: &ChannelParams,
    mu_db: f64,
    restoration: &RestorationConfig,
    cfg: &ExperimentConfig,
) -> Result<bool> {
    let params = ChannelParams {
        mu_db,
        ..channel.clone()
    };
    let losses = simulate_losses(&params, stream.len());
    let budget = cfg.loss_budget(stream.len());
    if losses.lost() <= budget {
        return Ok(true);
    }
    let rc = RestorationConfig {
        stop_after_unrestored: Some(budget),
        ..*restoration
    };
    let stats = run_restoration(stream, &losses, predictor, &rc)?;
    Ok(!stats.truncated && stats.effective_plr <= cfg.target_plr)
}

/// Smallest mean SNR in `cfg.snr_bounds` whose effective PLR meets the
/// target, by bisection to `cfg.snr_tol`. The channel seed is held fixed,
/// so every candidate sees the same fading and shadowing draws shifted by
/// the mean.
pub fn min_snr_for_target(
    predictor: &dyn Predictor,
    stream: &Trace,
    channel: &ChannelParams,
    restoration: &RestorationConfig,
    cfg: &ExperimentConfig,
) -> Result<MinSnr> {
    let (mut lo, mut hi) = cfg.snr_bounds;
    if feasible_at(predictor, stream, channel, lo, restoration, cfg)? {
        return Ok(MinSnr::Reached(lo));
    }
    if !feasible_at(predictor, stream, channel, hi, restoration, cfg)? {
        return Ok(MinSnr::Unreachable);
    }
    while hi - lo > cfg.snr_tol {
        let mid = 0.5 * (lo + hi);
        if feasible_at(predictor, stream, channel, mid, restoration, cfg)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(MinSnr::Reached(hi))
}

/// Label of a modulation and coding scheme in the CSV outputs.
pub fn mcs_label(m: Modulation, rate: f64) -> String {
    format!("{}_r{}", m.name(), rate)
}

/// Minimum SNR per (model, threshold) at the base MCS and per (model, MCS)
/// at the base threshold.
pub fn min_snr_table(
    models: &[&dyn Predictor],
    stream: &Trace,
    channel: &ChannelParams,
    restoration: &RestorationConfig,
    cfg: &ExperimentConfig,
) -> Result<Table> {
    let mut points: Vec<(usize, f64, Modulation, f64)> = Vec::new();
    for (mi, _) in models.iter().enumerate() {
        for &t in &cfg.thresholds {
            points.push((mi, t, channel.modulation, channel.code_rate));
        }
        for &(m, r) in &cfg.mcs_list {
            if (m, r) != (channel.modulation, channel.code_rate) {
                points.push((mi, restoration.threshold, m, r));
            }
        }
    }
    let results = map_slice(cfg.execution, &points, |&(mi, t, m, r)| {
        let ch = ChannelParams {
            modulation: m,
            code_rate: r,
            ..channel.clone()
        };
        let rc = RestorationConfig {
            threshold: t,
            ..*restoration
        };
        min_snr_for_target(models[mi], stream, &ch, &rc, cfg)
    });
    let mut table = Table::new("min_snr", &["model", "mcs", "threshold", "min_snr_db", "reachable"]);
    for (&(mi, t, m, r), res) in points.iter().zip(results) {
        let res = res?;
        table.push(vec![
            models[mi].name().to_string(),
            mcs_label(m, r),
            num(t),
            res.db().map_or_else(|| "nan".to_string(), num),
            u8::from(res.db().is_some()).to_string(),
        ]);
    }
    Ok(table)
}

/// Coverage probability over the distance grid and the distance at which it
/// falls to `p_star`, for each `(label, required SNR)`.
pub fn coverage_curve(
    required: &[(String, f64)],
    p_star: f64,
    link: &LinkBudgetParams,
    grid: (f64, f64, f64),
) -> Result<Table> {
    link.validate()?;
    let (start, stop, step) = grid;
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    let mut table = Table::new(
        "coverage",
        &["model", "snr_req_db", "pl_max_db", "d_max_m", "distance_m", "p_cov"],
    );
    for (label, snr) in required {
        let pl_max = max_path_loss(*snr, link);
        let d_max = max_coverage_distance(p_star, pl_max, link)?.meters();
        for i in 0..count {
            let d = start + step * i as f64;
            let p = coverage_probability(d, pl_max, link)?;
            table.push(vec![label.clone(), num(*snr), num(pl_max), num(d_max), num(d), num(p)]);
        }
    }
    Ok(table)
}

/// `d_max` in meters for a required SNR.
pub fn coverage_distance(snr_req_db: f64, p_star: f64, link: &LinkBudgetParams) -> Result<CoverageDistance> {
    max_coverage_distance(p_star, max_path_loss(snr_req_db, link), link)
}

/// Restoration rate versus threshold at the operating SNR, plus effective
/// PLR per MCS at the base threshold.
pub fn threshold_sweep(
    models: &[&dyn Predictor],
    stream: &Trace,
    channel: &ChannelParams,
    restoration: &RestorationConfig,
    cfg: &ExperimentConfig,
) -> Result<Table> {
    let mut points: Vec<(usize, f64, Modulation, f64)> = Vec::new();
    for (mi, _) in models.iter().enumerate() {
        for &t in &cfg.thresholds {
            points.push((mi, t, channel.modulation, channel.code_rate));
        }
        for &(m, r) in &cfg.mcs_list {
            if (m, r) != (channel.modulation, channel.code_rate) {
                points.push((mi, restoration.threshold, m, r));
            }
        }
    }
    let results = map_slice(cfg.execution, &points, |&(mi, t, m, r)| {
        let ch = ChannelParams {
            mu_db: cfg.snr_db,
            modulation: m,
            code_rate: r,
            ..channel.clone()
        };
        let losses = simulate_losses(&ch, stream.len());
        let rc = RestorationConfig {
            threshold: t,
            ..*restoration
        };
        run_restoration(stream, &losses, models[mi], &rc).map(|s| (s, losses.raw_plr))
    });
    let mut table = Table::new(
        "threshold_sweep",
        &["model", "mcs", "snr_db", "threshold", "restoration_rate", "effective_plr", "raw_plr"],
    );
    for (&(mi, t, m, r), res) in points.iter().zip(results) {
        let (s, raw) = res?;
        table.push(vec![
            models[mi].name().to_string(),
            mcs_label(m, r),
            num(cfg.snr_db),
            num(t),
            num(s.restoration_rate),
            num(s.effective_plr),
            num(raw),
        ]);
    }
    Ok(table)
}

/// Trailing mean over `window` samples; output `i` averages inputs
/// `i ..= i + window − 1`, so the output has `len − window + 1` entries.
pub fn rolling_mse(errors: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window > errors.len() {
        return Err(Error::invalid(
            "window",
            format!("{window} does not fit a sequence of {}", errors.len()),
        ));
    }
    let w = window as f64;
    let mut sum: f64 = errors[..window].iter().sum();
    let mut out = Vec::with_capacity(errors.len() - window + 1);
    out.push(sum / w);
    for i in window..errors.len() {
        sum += errors[i] - errors[i - window];
        out.push(sum / w);
    }
    Ok(out)
}

/// Per-step one-step-ahead squared error (mean over channels) when every
/// prediction sees the true history. Entry `i` scores sample `L + i`.
pub fn one_step_errors(predictor: &dyn Predictor, trace: &Trace, history_len: usize, exec: Execution) -> Result<Vec<f64>> {
    if trace.len() <= history_len {
        return Err(Error::invalid("trace", "shorter than the history window"));
    }
    let forces = trace.forces();
    let ops = trace.operators();
    let n = trace.len() - history_len;
    const CHUNK: usize = 256;
    let chunks = map_range(exec, n.div_ceil(CHUNK), |ci| {
        (ci * CHUNK..((ci + 1) * CHUNK).min(n))
            .map(|i| {
                let t = i + history_len;
                let est = predictor.predict(&PredictContext {
                    step: t,
                    forces: &forces[i..t],
                    ops: &ops[i..t],
                });
                (0..3).map(|c| (est[c] - forces[t][c]).powi(2)).sum::<f64>() / 3.0
            })
            .collect::<Vec<_>>()
    });
    Ok(chunks.into_iter().flatten().collect())
}

pub fn rolling_mse_table(
    models: &[&dyn Predictor],
    stream: &Trace,
    history_len: usize,
    cfg: &ExperimentConfig,
) -> Result<Table> {
    let mut table = Table::new("rolling_mse", &["model", "step", "rolling_mse"]);
    for m in models {
        let errors = one_step_errors(*m, stream, history_len, cfg.execution)?;
        let rolled = rolling_mse(&errors, cfg.rolling_window.min(errors.len()))?;
        let offset = history_len + cfg.rolling_window.min(errors.len()) - 1;
        for (i, v) in rolled.iter().enumerate().step_by(cfg.rolling_stride) {
            table.push(vec![m.name().to_string(), (i + offset).to_string(), num(*v)]);
        }
    }
    Ok(table)
}

/// First and second differences of the force magnitude. `rate[i]` is the
/// change from sample `i` to `i + 1`; `jerk[i]` the change of rate from
/// `i + 1` to `i + 2`.
pub fn force_rate_jerk(forces: &[[f64; 3]]) -> (Vec<f64>, Vec<f64>) {
    let mag: Vec<f64> = forces.iter().map(|f| (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt()).collect();
    let rate: Vec<f64> = mag.windows(2).map(|w| w[1] - w[0]).collect();
    let jerk: Vec<f64> = rate.windows(2).map(|w| w[1] - w[0]).collect();
    (rate, jerk)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegionStats {
    pub steps: usize,
    pub mean_abs_rate: f64,
    pub mean_abs_jerk: f64,
    pub mean_sq_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceDynamics {
    /// Rolling-MSE value separating the regions (75th percentile).
    pub split: f64,
    pub easy: RegionStats,
    pub difficult: RegionStats,
}

/// Splits the steps of a trace into easy and difficult regions by whether
/// the trailing rolling MSE exceeds its 75th percentile, and summarises the
/// force rate and jerk in each. `errors[i]` must score `forces[offset + i]`.
pub fn force_dynamics(forces: &[[f64; 3]], errors: &[f64], offset: usize, window: usize) -> Result<ForceDynamics> {
    if offset + errors.len() > forces.len() {
        return Err(Error::Shape {
            context: "force dynamics",
            expected: format!("at most {} errors after offset {offset}", forces.len() - offset.min(forces.len())),
            actual: errors.len().to_string(),
        });
    }
    let rolled = rolling_mse(errors, window)?;
    let (rate, jerk) = force_rate_jerk(forces);
    // rolled[j] ends at error index j + window − 1, i.e. sample offset + j + window − 1
    let steps: Vec<(usize, f64)> = rolled
        .iter()
        .enumerate()
        .map(|(j, &r)| (offset + j + window - 1, r))
        .filter(|&(t, _)| t >= 2)
        .collect();
    if steps.is_empty() {
        return Err(Error::invalid("window", "leaves no steps to classify"));
    }
    let mut sorted: Vec<f64> = steps.iter().map(|s| s.1).collect();
    sorted.sort_by(f64::total_cmp);
    let rank = ((0.75 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let split = sorted[rank - 1];

    let mut acc = [(0usize, 0.0, 0.0, 0.0); 2];
    for &(t, r) in &steps {
        let a = &mut acc[usize::from(r > split)];
        a.0 += 1;
        a.1 += rate[t - 1].abs();
        a.2 += jerk[t - 2].abs();
        a.3 += errors[t - offset];
    }
    let stats = |(n, r, j, e): (usize, f64, f64, f64)| {
        let d = n.max(1) as f64;
        RegionStats {
            steps: n,
            mean_abs_rate: r / d,
            mean_abs_jerk: j / d,
            mean_sq_error: e / d,
        }
    };
    Ok(ForceDynamics {
        split,
        easy: stats(acc[0]),
        difficult: stats(acc[1]),
    })
}

pub fn force_dynamics_table(
    predictor: &dyn Predictor,
    traces: &[Trace],
    history_len: usize,
    cfg: &ExperimentConfig,
) -> Result<Table> {
    let mut table = Table::new(
        "force_dynamics",
        &["model", "activity", "region", "steps", "mean_abs_rate", "mean_abs_jerk", "mean_sq_error", "split_mse"],
    );
    for tr in traces {
        let errors = one_step_errors(predictor, tr, history_len, cfg.execution)?;
        let window = cfg.rolling_window.min(errors.len());
        let fd = force_dynamics(&tr.forces(), &errors, history_len, window)?;
        for (region, s) in [("easy", fd.easy), ("difficult", fd.difficult)] {
            table.push(vec![
                predictor.name().to_string(),
                tr.activity.name().to_string(),
                region.to_string(),
                s.steps.to_string(),
                num(s.mean_abs_rate),
                num(s.mean_abs_jerk),
                num(s.mean_sq_error),
                num(fd.split),
            ]);
        }
    }
    Ok(table)
}

/// Loss mask with a burst of `k` consecutive losses at the middle of every
/// period.
pub fn burst_mask(steps: usize, period: usize, k: usize) -> LossSequence {
    let offset = period / 2;
    let mask = (0..steps)
        .map(|i| {
            let phase = i % period;
            phase >= offset && phase < offset + k
        })
        .collect();
    LossSequence::from_mask(mask)
}

/// Effective PLR per burst length.
pub fn burst_experiment(
    models: &[&dyn Predictor],
    stream: &Trace,
    channel: &ChannelParams,
    restoration: &RestorationConfig,
    cfg: &ExperimentConfig,
) -> Result<Table> {
    let background = cfg.burst_background.then(|| {
        let ch = ChannelParams {
            mu_db: cfg.snr_db,
            ..channel.clone()
        };
        simulate_losses(&ch, stream.len())
    });
    let points: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|mi| cfg.burst_lengths.iter().map(move |&k| (mi, k)))
        .collect();
    let results = map_slice(cfg.execution, &points, |&(mi, k)| {
        let mut losses = burst_mask(stream.len(), cfg.burst_period, k);
        if let Some(bg) = &background {
            let merged = losses.mask.iter().zip(&bg.mask).map(|(a, b)| *a || *b).collect();
            losses = LossSequence::from_mask(merged);
        }
        run_restoration(stream, &losses, models[mi], restoration)
    });
    let mut table = Table::new(
        "burst",
        &["model", "burst_len", "effective_plr", "restoration_rate", "meets_target"],
    );
    for (&(mi, k), res) in points.iter().zip(results) {
        let s: RestorationStats = res?;
        table.push(vec![
            models[mi].name().to_string(),
            k.to_string(),
            num(s.effective_plr),
            num(s.restoration_rate),
            u8::from(s.effective_plr <= cfg.target_plr).to_string(),
        ]);
    }
    Ok(table)
}

/// Largest burst length in `table` meeting the target for `model`, if any.
pub fn max_tolerable_burst(table: &Table, model: &str) -> Option<usize> {
    let models = table.column("model")?;
    let ks = table.column("burst_len")?;
    let ok = table.column("meets_target")?;
    models
        .iter()
        .zip(ks.iter().zip(&ok))
        .filter(|(m, (_, o))| **m == model && **o == "1")
        .filter_map(|(_, (k, _))| k.parse().ok())
        .max()
}

/// Users that fit in bandwidth `b` by rate alone: ⌊η·B / 256 kbit/s⌋.
pub fn rate_ceiling(modulation: Modulation, code_rate: f64, bandwidth_hz: f64) -> usize {
    (spectral_efficiency(modulation, code_rate) * bandwidth_hz / USER_RATE_BPS).floor() as usize
}

/// Per-user outcome for the capacity experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserLink {
    pub raw_per: f64,
    pub effective_plr: f64,
}

/// Number of users admitted in bandwidth `b`: the best `n` up to the rate
/// ceiling, counting the users among the first `n` whose goodput on an
/// equal `B/n` share reaches 256 kbit/s and whose effective PLR meets the
/// target.
pub fn admitted_users(users: &[UserLink], modulation: Modulation, code_rate: f64, bandwidth_hz: f64, target_plr: f64) -> usize {
    let ceiling = rate_ceiling(modulation, code_rate, bandwidth_hz).min(users.len());
    (1..=ceiling)
        .map(|n| {
            let share = bandwidth_hz / n as f64;
            users[..n]
                .iter()
                .filter(|u| {
                    goodput(modulation, code_rate, share, u.raw_per) >= USER_RATE_BPS
                        && u.effective_plr <= target_plr
                })
                .count()
        })
        .max()
        .unwrap_or(0)
}

/// Admitted users per bandwidth. Every user has an independent channel with
/// mean SNR `capacity_snr_db`.
pub fn network_capacity(
    models: &[&dyn Predictor],
    stream: &Trace,
    channel: &ChannelParams,
    restoration: &RestorationConfig,
    cfg: &ExperimentConfig,
) -> Result<Table> {
    let (modulation, code_rate) = (channel.modulation, channel.code_rate);
    let max_users = cfg
        .bandwidths
        .iter()
        .map(|&b| rate_ceiling(modulation, code_rate, b))
        .max()
        .unwrap_or(0);
    let budget = cfg.loss_budget(stream.len());
    let points: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|mi| (0..max_users).map(move |u| (mi, u)))
        .collect();
    let results = map_slice(cfg.execution, &points, |&(mi, u)| {
        let ch = ChannelParams {
            mu_db: cfg.capacity_snr_db,
            seed: cfg.seed.wrapping_add(1 + u as u64),
            ..channel.clone()
        };
        let losses = simulate_losses(&ch, stream.len());
        let raw = losses.raw_plr;
        if losses.lost() <= budget {
            return Ok(UserLink {
                raw_per: raw,
                effective_plr: raw,
            });
        }
        let rc = RestorationConfig {
            stop_after_unrestored: Some(budget),
            ..*restoration
        };
        let s = run_restoration(stream, &losses, models[mi], &rc)?;
        // a truncated run already exceeded the budget; report it as such
        let eff = if s.truncated { 1.0 } else { s.effective_plr };
        Ok(UserLink {
            raw_per: raw,
            effective_plr: eff,
        })
    });
    let mut per_model: Vec<Vec<UserLink>> = vec![Vec::with_capacity(max_users); models.len()];
    for (&(mi, _), r) in points.iter().zip(results) {
        per_model[mi].push(r?);
    }

    let mut table = Table::new("capacity", &["model", "bandwidth_hz", "rate_ceiling", "capacity"]);
    for (mi, users) in per_model.iter().enumerate() {
        for &b in &cfg.bandwidths {
            table.push(vec![
                models[mi].name().to_string(),
                num(b),
                rate_ceiling(modulation, code_rate, b).to_string(),
                admitted_users(users, modulation, code_rate, b, cfg.target_plr).to_string(),
            ]);
        }
    }
    Ok(table)
}
