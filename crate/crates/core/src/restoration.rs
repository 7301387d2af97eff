//! Runtime packet-loss restoration.
//!
//! The receiver keeps a sliding buffer of the last `L` force samples. A
//! delivered packet is appended as-is. A lost packet is estimated from the
//! buffer (once it is full) together with the operator's own position and
//! velocity history, which is always available locally. The estimate counts
//! as a restoration when it is within the error threshold of the true
//! sample; it is then appended in place of the missing packet, otherwise a
//! zero vector is appended. Consecutive losses therefore chain estimates
//! autoregressively.
//!
//! Comparing against the true sample is an offline evaluation device: a
//! deployed receiver would not know it.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::channel::LossSequence;
use crate::error::{Error, Result};
use crate::model::XhapModel;
use crate::traces::Trace;

/// What a predictor sees when a packet is lost.
#[derive(Debug, Clone, Copy)]
pub struct PredictContext<'a> {
    /// Index of the lost sample in the stream.
    pub step: usize,
    /// The last `L` buffered force vectors, oldest first.
    pub forces: &'a [[f64; 3]],
    /// Operator position/velocity for the same `L` steps.
    pub ops: &'a [[f64; 6]],
}

pub trait Predictor: Sync {
    fn name(&self) -> &str;
    fn predict(&self, ctx: &PredictContext<'_>) -> [f64; 3];
}

impl Predictor for XhapModel {
    fn name(&self) -> &str {
        "xhap"
    }

    fn predict(&self, ctx: &PredictContext<'_>) -> [f64; 3] {
        XhapModel::predict(self, ctx.forces, ctx.ops)
    }
}

/// Repeats the most recent buffered force.
#[derive(Debug, Clone, Copy, Default)]
pub struct HoldLast;

impl Predictor for HoldLast {
    fn name(&self) -> &str {
        "hold_last"
    }

    fn predict(&self, ctx: &PredictContext<'_>) -> [f64; 3] {
        hold_last_predict(ctx.forces)
    }
}

pub fn hold_last_predict(buffer: &[[f64; 3]]) -> [f64; 3] {
    *buffer.last().expect("hold-last needs a non-empty buffer")
}

/// Baseline that never restores anything.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoRestoration;

impl Predictor for NoRestoration {
    fn name(&self) -> &str {
        "none"
    }

    fn predict(&self, _ctx: &PredictContext<'_>) -> [f64; 3] {
        [f64::NAN; 3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    /// Mean absolute channel error at most `threshold` newtons.
    Absolute,
    /// Mean absolute channel error at most `threshold` times the mean absolute
    /// true force (floored at `tau`).
    Relative,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Absolute => "absolute",
            Criterion::Relative => "relative",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "absolute" | "abs" => Ok(Criterion::Absolute),
            "relative" | "rel" => Ok(Criterion::Relative),
            other => Err(Error::invalid("criterion", format!("unknown criterion `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestorationConfig {
    pub history_len: usize,
    /// Newtons for [`Criterion::Absolute`], a fraction for
    /// [`Criterion::Relative`]. May be `+∞`.
    pub threshold: f64,
    pub criterion: Criterion,
    /// Denominator floor of the relative criterion, newtons.
    pub tau: f64,
    /// Append the estimate even when it fails the criterion (the default
    /// appends a zero vector).
    pub append_failed_estimate: bool,
    /// Stop early once this many lost packets went unrestored. Used by
    /// feasibility searches where only "within budget or not" matters.
    pub stop_after_unrestored: Option<usize>,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        RestorationConfig {
            history_len: 64,
            threshold: 0.1,
            criterion: Criterion::Absolute,
            tau: 0.01,
            append_failed_estimate: false,
            stop_after_unrestored: None,
        }
    }
}

impl RestorationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history_len == 0 {
            return Err(Error::invalid("restoration.history_len", "must be at least 1"));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::invalid("restoration.threshold", "must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("restoration.tau", "must be positive"));
        }
        Ok(())
    }
}

/// Mean absolute channel error and whether it passes the criterion.
pub fn error_criterion(estimate: &[f64; 3], truth: &[f64; 3], config: &RestorationConfig) -> (f64, bool) {
    let e = (0..3).map(|c| (estimate[c] - truth[c]).abs()).sum::<f64>() / 3.0;
    let limit = match config.criterion {
        Criterion::Absolute => config.threshold,
        Criterion::Relative => {
            let scale = truth.iter().map(|v| v.abs()).sum::<f64>() / 3.0;
            config.threshold * scale.max(config.tau)
        }
    };
    // NaN estimates fail
    (e, e <= limit)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestorationStats {
    pub total: usize,
    pub lost: usize,
    pub restored: usize,
    pub effective_plr: f64,
    pub restoration_rate: f64,
    /// `(step, error)` for every estimate that was attempted.
    pub errors: Vec<(usize, f64)>,
    /// Set when the run stopped at `stop_after_unrestored`.
    pub truncated: bool,
}

impl RestorationStats {
    fn from_counts(total: usize, lost: usize, restored: usize, errors: Vec<(usize, f64)>, truncated: bool) -> Self {
        RestorationStats {
            total,
            lost,
            restored,
            effective_plr: (lost - restored) as f64 / total.max(1) as f64,
            restoration_rate: if lost > 0 { restored as f64 / lost as f64 } else { 0.0 },
            errors,
            truncated,
        }
    }

    pub fn unrestored(&self) -> usize {
        self.lost - self.restored
    }
}

pub const STATS_HEADER: &str = "total,lost,restored,effective_plr,restoration_rate,threshold,criterion,model";

/// One CSV row matching [`STATS_HEADER`].
pub fn stats_row(stats: &RestorationStats, config: &RestorationConfig, model: &str) -> String {
    format!(
        "{},{},{},{:.8e},{:.8e},{},{},{}",
        stats.total,
        stats.lost,
        stats.restored,
        stats.effective_plr,
        stats.restoration_rate,
        config.threshold,
        config.criterion,
        model
    )
}

pub fn write_stats_csv(path: &Path, rows: &[String]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(STATS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Replays `trace` through the loss pattern, restoring lost packets with
/// `predictor`.
pub fn run_restoration(
    trace: &Trace,
    losses: &LossSequence,
    predictor: &dyn Predictor,
    config: &RestorationConfig,
) -> Result<RestorationStats> {
    config.validate()?;
    if losses.len() != trace.len() {
        return Err(Error::Shape {
            context: "restoration",
            expected: format!("{} loss outcomes", trace.len()),
            actual: losses.len().to_string(),
        });
    }
    let l = config.history_len;
    let mut forces: VecDeque<[f64; 3]> = VecDeque::with_capacity(l + 1);
    let mut ops: VecDeque<[f64; 6]> = VecDeque::with_capacity(l + 1);
    let (mut lost, mut restored) = (0usize, 0usize);
    let mut errors = Vec::new();

    for (i, (sample, &is_lost)) in trace.samples.iter().zip(&losses.mask).enumerate() {
        let appended = if !is_lost {
            sample.force
        } else {
            lost += 1;
            if forces.len() < l {
                [0.0; 3]
            } else {
                let (fw, ow) = (forces.make_contiguous() as &[_], ops.make_contiguous() as &[_]);
                let est = predictor.predict(&PredictContext {
                    step: i,
                    forces: fw,
                    ops: ow,
                });
                let (e, pass) = error_criterion(&est, &sample.force, config);
                errors.push((i, e));
                if pass {
                    restored += 1;
                    est
                } else if config.append_failed_estimate && est.iter().all(|v| v.is_finite()) {
                    est
                } else {
                    [0.0; 3]
                }
            }
        };
        if let Some(limit) = config.stop_after_unrestored {
            if lost - restored > limit {
                return Ok(RestorationStats::from_counts(i + 1, lost, restored, errors, true));
            }
        }
        if forces.len() == l {
            forces.pop_front();
            ops.pop_front();
        }
        forces.push_back(appended);
        ops.push_back(sample.operator());
    }
    Ok(RestorationStats::from_counts(trace.len(), lost, restored, errors, false))
}
