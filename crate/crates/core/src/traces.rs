//! Synthetic 1 kHz kinesthetic haptic traces, trimming, windowing and CSV
//! trace files.
//!
//! The generator drives a 0.1 kg tool through a virtual coupling that tracks
//! a scripted operator trajectory. The tool touches a planar surface whose
//! normal is tilted per activity, so the contact force shows up on all three
//! axes. Contact force is a penalty spring plus damper along the surface
//! normal, never pulling.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math::{fmt9, round_sig9};

pub const SAMPLE_RATE_HZ: u32 = 1000;
const DT: f64 = 1.0 / SAMPLE_RATE_HZ as f64;
/// Samples dropped at each end of a raw trace.
pub const TRIM_SAMPLES: usize = 10_000;
pub const MIN_DURATION_S: f64 = 30.0;
pub const TRACE_HEADER: &str = "t,fx,fy,fz,px,py,pz,vx,vy,vz";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Activity {
    DynPush,
    DynTap,
    RbInter,
    RbPushHold,
    RbTap,
}

impl Activity {
    pub const ALL: [Activity; 5] = [
        Activity::DynPush,
        Activity::DynTap,
        Activity::RbInter,
        Activity::RbPushHold,
        Activity::RbTap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activity::DynPush => "dyn_push",
            Activity::DynTap => "dyn_tap",
            Activity::RbInter => "rb_inter",
            Activity::RbPushHold => "rb_push_hold",
            Activity::RbTap => "rb_tap",
        }
    }

    pub fn is_rigid(self) -> bool {
        matches!(self, Activity::RbInter | Activity::RbPushHold | Activity::RbTap)
    }

    pub fn is_tap(self) -> bool {
        matches!(self, Activity::DynTap | Activity::RbTap)
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Activity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Activity::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown activity `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HapticSample {
    pub t: u64,
    /// Teleoperator contact force (N).
    pub force: [f64; 3],
    /// Operator device position (m).
    pub position: [f64; 3],
    /// Operator device velocity (m/s).
    pub velocity: [f64; 3],
}

impl HapticSample {
    /// Position followed by velocity, the operator feature vector.
    pub fn operator(&self) -> [f64; 6] {
        let p = self.position;
        let v = self.velocity;
        [p[0], p[1], p[2], v[0], v[1], v[2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub activity: Activity,
    pub samples: Vec<HapticSample>,
    pub sample_rate_hz: u32,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn forces(&self) -> Vec<[f64; 3]> {
        self.samples.iter().map(|s| s.force).collect()
    }

    pub fn operators(&self) -> Vec<[f64; 6]> {
        self.samples.iter().map(HapticSample::operator).collect()
    }

    /// Drops the activation and shutdown artifacts at both ends.
    pub fn trimmed(&self) -> Result<Trace> {
        if self.len() <= 2 * TRIM_SAMPLES {
            return Err(Error::invalid(
                "trace",
                format!("{} samples, need more than {}", self.len(), 2 * TRIM_SAMPLES),
            ));
        }
        Ok(Trace {
            activity: self.activity,
            samples: self.samples[TRIM_SAMPLES..self.len() - TRIM_SAMPLES].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
        })
    }

    /// Window of `history` rows ending at index `t`, predicting `t + 1`.
    pub fn window_at(&self, t: usize, history: usize) -> WindowedExample {
        let rows = &self.samples[t + 1 - history..=t];
        WindowedExample {
            x_top: rows.iter().map(|s| s.force).collect(),
            x_op: rows.iter().map(HapticSample::operator).collect(),
            y: self.samples[t + 1].force,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedExample {
    pub x_top: Vec<[f64; 3]>,
    pub x_op: Vec<[f64; 6]>,
    pub y: [f64; 3],
}

/// Trims both ends and cuts every stride-1 window of length `history`.
pub fn trim_and_window(trace: &Trace, history: usize) -> Result<Vec<WindowedExample>> {
    if history == 0 || trace.len() <= 2 * TRIM_SAMPLES + history + 1 {
        return Err(Error::invalid(
            "trace",
            format!(
                "{} samples is too short for history {history} after trimming",
                trace.len()
            ),
        ));
    }
    let trimmed = trace.trimmed()?;
    Ok((history - 1..trimmed.len() - 1)
        .map(|t| trimmed.window_at(t, history))
        .collect())
}

/// Contact and coupling constants of the generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactModel {
    pub soft_stiffness: f64,
    pub rigid_stiffness: f64,
    pub damping: f64,
    pub tool_mass: f64,
    pub coupling_stiffness: f64,
    pub coupling_damping: f64,
    /// Position of the surface plane along its normal (m).
    pub surface_offset_m: f64,
    /// Sensor noise standard deviation while in contact (N); draws are
    /// clipped at four standard deviations.
    pub noise_std: f64,
}

impl Default for ContactModel {
    fn default() -> Self {
        ContactModel {
            soft_stiffness: 200.0,
            rigid_stiffness: 2000.0,
            damping: 5.0,
            tool_mass: 0.1,
            coupling_stiffness: 500.0,
            coupling_damping: 5.0,
            surface_offset_m: 0.0,
            noise_std: 0.002,
        }
    }
}

impl ContactModel {
    pub fn stiffness(&self, activity: Activity) -> f64 {
        if activity.is_rigid() {
            self.rigid_stiffness
        } else {
            self.soft_stiffness
        }
    }
}

/// Extremes reached by the tool during generation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ContactEnvelope {
    pub max_penetration: f64,
    /// Largest tool speed along the surface normal (m/s).
    pub max_normal_speed: f64,
    /// Largest tool acceleration along the surface normal (m/s²).
    pub max_normal_accel: f64,
}

/// Generates a synthetic trace with the default contact model.
pub fn generate_trace(activity: Activity, duration_s: f64, seed: u64) -> Result<Trace> {
    simulate_contact(activity, duration_s, seed, &ContactModel::default()).map(|(t, _)| t)
}

/// Operator trajectory expressed in the surface frame: signed height above
/// the surface and two tangential coordinates.
trait Script {
    fn at(&self, time: f64) -> [f64; 3];
}

/// Hover height outside the task and the ramp length into/out of it.
const HOVER_M: f64 = 0.03;
const RAMP_S: f64 = 2.0;
const LEAD_S: f64 = 4.0;

fn envelope_weight(time: f64, duration: f64) -> f64 {
    let start = ((time - LEAD_S) / RAMP_S).clamp(0.0, 1.0);
    let end = ((duration - LEAD_S - time) / RAMP_S).clamp(0.0, 1.0);
    let w = start.min(end);
    w * w * (3.0 - 2.0 * w)
}

struct SumOfSines {
    terms: Vec<(f64, f64, f64)>,
}

impl SumOfSines {
    fn random(rng: &mut ChaCha8Rng, n: usize, freq: (f64, f64), amp: f64) -> Self {
        let terms = (0..n)
            .map(|_| {
                (
                    amp * rng.random_range(0.5..1.0) / n as f64,
                    rng.random_range(freq.0..freq.1),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        SumOfSines { terms }
    }

    fn eval(&self, time: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(a, f, ph)| a * (std::f64::consts::TAU * f * time + ph).sin())
            .sum()
    }
}

struct Sustained {
    depth: f64,
    wobble: SumOfSines,
    slide_u: SumOfSines,
    slide_w: SumOfSines,
    lift: Option<SumOfSines>,
    duration: f64,
}

impl Script for Sustained {
    fn at(&self, time: f64) -> [f64; 3] {
        let w = envelope_weight(time, self.duration);
        let mut s = -(self.depth + self.wobble.eval(time));
        if let Some(lift) = &self.lift {
            s += lift.eval(time);
        }
        [
            HOVER_M + w * (s - HOVER_M),
            w * self.slide_u.eval(time),
            w * self.slide_w.eval(time),
        ]
    }
}

/// Periodic taps with a per-tap rate and depth.
struct Taps {
    /// (start time, period, depth)
    taps: Vec<(f64, f64, f64)>,
    clearance: f64,
    slide_u: SumOfSines,
    duration: f64,
}

impl Taps {
    fn new(rng: &mut ChaCha8Rng, duration: f64, rate: (f64, f64), depth: (f64, f64), clearance: f64) -> Self {
        let mut taps = Vec::new();
        let mut t = 0.0;
        while t < duration {
            let period = 1.0 / rng.random_range(rate.0..rate.1);
            taps.push((t, period, rng.random_range(depth.0..depth.1)));
            t += period;
        }
        Taps {
            taps,
            clearance,
            slide_u: SumOfSines::random(rng, 2, (0.05, 0.2), 0.03),
            duration,
        }
    }
}

impl Script for Taps {
    fn at(&self, time: f64) -> [f64; 3] {
        let w = envelope_weight(time, self.duration);
        let idx = self.taps.partition_point(|&(start, _, _)| start <= time).saturating_sub(1);
        let (start, period, depth) = self.taps[idx];
        let phase = ((time - start) / period).clamp(0.0, 1.0);
        let bump = (std::f64::consts::PI * phase).sin().powi(2);
        let s = self.clearance - (self.clearance + depth) * bump;
        [HOVER_M + w * (s - HOVER_M), w * self.slide_u.eval(time), 0.0]
    }
}

/// Repeated approach, press ramp, hold and release cycles.
struct PushHold {
    /// (start, approach, ramp, hold, release, depth)
    cycles: Vec<[f64; 6]>,
    duration: f64,
}

impl PushHold {
    fn new(rng: &mut ChaCha8Rng, duration: f64) -> Self {
        let mut cycles = Vec::new();
        let mut t = 0.0;
        while t < duration {
            let c = [
                t,
                rng.random_range(0.4..0.8),
                rng.random_range(0.6..1.2),
                rng.random_range(2.0..4.0),
                rng.random_range(0.4..0.8),
                rng.random_range(0.006..0.016),
            ];
            t += c[1] + c[2] + c[3] + c[4] + rng.random_range(0.5..1.0);
            cycles.push(c);
        }
        PushHold { cycles, duration }
    }
}

impl Script for PushHold {
    fn at(&self, time: f64) -> [f64; 3] {
        let w = envelope_weight(time, self.duration);
        let idx = self.cycles.partition_point(|c| c[0] <= time).saturating_sub(1);
        let [start, approach, ramp, hold, release, depth] = self.cycles[idx];
        let smooth = |x: f64| {
            let x = x.clamp(0.0, 1.0);
            x * x * (3.0 - 2.0 * x)
        };
        let top = 0.01;
        let mut tau = time - start;
        let s = if tau < approach {
            top - top * smooth(tau / approach)
        } else {
            tau -= approach;
            if tau < ramp {
                -depth * smooth(tau / ramp)
            } else {
                tau -= ramp;
                if tau < hold {
                    -depth
                } else {
                    tau -= hold;
                    -depth + (depth + top) * smooth(tau / release)
                }
            }
        };
        [HOVER_M + w * (s - HOVER_M), 0.0, 0.0]
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn surface_normal(activity: Activity) -> [f64; 3] {
    normalize(match activity {
        Activity::DynPush => [0.35, 0.2, 1.0],
        Activity::DynTap => [-0.3, 0.4, 1.0],
        Activity::RbInter => [0.25, -0.35, 1.0],
        Activity::RbPushHold => [-0.4, -0.2, 1.0],
        Activity::RbTap => [0.3, 0.3, 1.0],
    })
}

fn script_for(activity: Activity, duration: f64, rng: &mut ChaCha8Rng) -> Box<dyn Script> {
    match activity {
        Activity::DynPush => Box::new(Sustained {
            depth: 0.014,
            wobble: SumOfSines::random(rng, 3, (0.2, 0.9), 0.012),
            slide_u: SumOfSines::random(rng, 2, (0.05, 0.25), 0.05),
            slide_w: SumOfSines::random(rng, 2, (0.05, 0.25), 0.03),
            lift: None,
            duration,
        }),
        Activity::RbInter => Box::new(Sustained {
            depth: 0.002,
            wobble: SumOfSines::random(rng, 3, (0.3, 1.2), 0.006),
            slide_u: SumOfSines::random(rng, 2, (0.1, 0.4), 0.04),
            slide_w: SumOfSines::random(rng, 2, (0.1, 0.4), 0.04),
            lift: Some(SumOfSines::random(rng, 2, (0.15, 0.4), 0.008)),
            duration,
        }),
        Activity::DynTap => Box::new(Taps::new(rng, duration, (2.0, 5.0), (0.015, 0.03), 0.012)),
        Activity::RbTap => Box::new(Taps::new(rng, duration, (2.0, 5.0), (0.004, 0.01), 0.01)),
        Activity::RbPushHold => Box::new(PushHold::new(rng, duration)),
    }
}

/// Runs the contact simulation and also reports the extremes reached.
pub fn simulate_contact(
    activity: Activity,
    duration_s: f64,
    seed: u64,
    model: &ContactModel,
) -> Result<(Trace, ContactEnvelope)> {
    if !(duration_s >= MIN_DURATION_S) {
        return Err(Error::invalid("duration_s", format!("must be >= {MIN_DURATION_S} s")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (activity.index() << 56));
    let script = script_for(activity, duration_s, &mut rng);

    let n = normalize(surface_normal(activity));
    let t1 = normalize(cross(n, [0.0, 1.0, 0.0]));
    let t2 = cross(n, t1);
    let to_world = |local: [f64; 3]| -> [f64; 3] {
        std::array::from_fn(|i| local[0] * n[i] + local[1] * t1[i] + local[2] * t2[i])
    };
    let operator_at = |step: i64| to_world(script.at(step as f64 * DT));

    let k = model.stiffness(activity);
    let steps = (duration_s * SAMPLE_RATE_HZ as f64).round() as usize;
    let mut samples = Vec::with_capacity(steps);
    let mut env = ContactEnvelope::default();

    let mut prev_pos = operator_at(-1).map(round_sig9);
    let mut tool_p = operator_at(0);
    let mut tool_v = [0.0; 3];
    let mut prev_vn = 0.0;
    for step in 0..steps {
        let op_p = operator_at(step as i64).map(round_sig9);
        let op_v: [f64; 3] = std::array::from_fn(|i| (op_p[i] - prev_pos[i]) / DT);
        prev_pos = op_p;

        let height = dot(tool_p, n) - model.surface_offset_m;
        let penetration = (-height).max(0.0);
        let vn = dot(tool_v, n);
        let fn_mag = if penetration > 0.0 {
            (k * penetration - model.damping * vn).max(0.0)
        } else {
            0.0
        };
        env.max_penetration = env.max_penetration.max(penetration);
        env.max_normal_speed = env.max_normal_speed.max(vn.abs());
        if step > 0 {
            env.max_normal_accel = env.max_normal_accel.max(((vn - prev_vn) / DT).abs());
        }
        prev_vn = vn;

        let force: [f64; 3] = std::array::from_fn(|i| {
            let noise = if fn_mag > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                model.noise_std * z.clamp(-4.0, 4.0)
            } else {
                0.0
            };
            round_sig9(fn_mag * n[i] + noise)
        });
        samples.push(HapticSample {
            t: step as u64,
            force,
            position: op_p,
            velocity: op_v.map(round_sig9),
        });

        // semi-implicit Euler on the tool
        for i in 0..3 {
            let coupling = model.coupling_stiffness * (op_p[i] - tool_p[i])
                + model.coupling_damping * (op_v[i] - tool_v[i]);
            let accel = (coupling + fn_mag * n[i]) / model.tool_mass;
            tool_v[i] += accel * DT;
        }
        for i in 0..3 {
            tool_p[i] += tool_v[i] * DT;
        }
    }
    Ok((
        Trace {
            activity,
            samples,
            sample_rate_hz: SAMPLE_RATE_HZ,
        },
        env,
    ))
}

/// Writes a trace as CSV with 9 significant digits.
pub fn write_trace(path: &Path, trace: &Trace) -> Result<()> {
    let mut out = String::with_capacity(trace.len() * 140);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for s in &trace.samples {
        out.push_str(&s.t.to_string());
        for v in s.force.iter().chain(&s.position).chain(&s.velocity) {
            out.push(',');
            out.push_str(&fmt9(*v));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a trace CSV written by [`write_trace`].
pub fn read_trace(path: &Path, activity: Activity) -> Result<Trace> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace(path, &text, activity)
}

fn parse_trace(path: &Path, text: &str, activity: Activity) -> Result<Trace> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let expected: Vec<&str> = TRACE_HEADER.split(',').collect();
    match lines.next() {
        None => return Err(err(1, "no samples".into())),
        Some((_, header)) => {
            let cols: Vec<&str> = header.trim().split(',').collect();
            if let Some(missing) = expected.iter().find(|c| !cols.contains(c)) {
                return Err(err(1, format!("missing column `{missing}`")));
            }
            if cols != expected {
                return Err(err(1, format!("header must be `{TRACE_HEADER}`")));
            }
        }
    }
    let mut samples = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != expected.len() {
            return Err(err(
                lineno,
                format!("expected {} columns, found {}", expected.len(), fields.len()),
            ));
        }
        let t: u64 = fields[0]
            .parse()
            .map_err(|_| err(lineno, format!("bad step index `{}`", fields[0])))?;
        let mut vals = [0.0f64; 9];
        for (j, f) in fields[1..].iter().enumerate() {
            vals[j] = f
                .parse()
                .map_err(|_| err(lineno, format!("bad number `{f}` in column {}", expected[j + 1])))?;
            if !vals[j].is_finite() {
                return Err(err(lineno, format!("non-finite value in column {}", expected[j + 1])));
            }
        }
        if let Some(prev) = samples.last().map(|s: &HapticSample| s.t) {
            if t <= prev {
                return Err(err(lineno, "step index must be strictly increasing".into()));
            }
        }
        samples.push(HapticSample {
            t,
            force: [vals[0], vals[1], vals[2]],
            position: [vals[3], vals[4], vals[5]],
            velocity: [vals[6], vals[7], vals[8]],
        });
    }
    if samples.is_empty() {
        return Err(err(1, "no samples".into()));
    }
    Ok(Trace {
        activity,
        samples,
        sample_rate_hz: SAMPLE_RATE_HZ,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: [f64; 3]) -> f64 {
        dot(v, v).sqrt()
    }

    #[test]
    fn no_contact_means_zero_force() {
        let model = ContactModel {
            surface_offset_m: -1.0,
            ..ContactModel::default()
        };
        for activity in Activity::ALL {
            let (trace, env) = simulate_contact(activity, 30.0, 1, &model).unwrap();
            assert_eq!(env.max_penetration, 0.0);
            assert!(trace.samples.iter().all(|s| s.force == [0.0; 3]));
        }
        // hover phase before the task ramps in
        let trace = generate_trace(Activity::DynPush, 30.0, 1).unwrap();
        assert!(trace.samples[..3000].iter().all(|s| s.force == [0.0; 3]));
    }

    #[test]
    fn hold_phase_converges_to_spring_law() {
        let model = ContactModel {
            noise_std: 0.0,
            ..ContactModel::default()
        };
        let (trace, _) = simulate_contact(Activity::RbPushHold, 40.0, 3, &model).unwrap();
        // At rest the coupling and contact springs are in series.
        let k = model.rigid_stiffness;
        let kc = model.coupling_stiffness;
        let n = surface_normal(Activity::RbPushHold);
        let mut checked = 0;
        for w in trace.samples.windows(300) {
            let still = w.iter().all(|s| s.velocity == [0.0; 3]);
            let depth = -dot(w[0].position, n);
            if still && depth > 0.001 && w[0].t > 8000 && w[0].t < 30000 {
                let expected = k * kc / (k + kc) * depth;
                let got = norm(w[299].force);
                assert!((got - expected).abs() < 1e-3 * expected.max(1.0), "{got} vs {expected}");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn force_bounded_by_generator_constants() {
        let model = ContactModel::default();
        for activity in Activity::ALL {
            let (trace, env) = simulate_contact(activity, 30.0, 7, &model).unwrap();
            let k = model.stiffness(activity);
            let bound = k * env.max_penetration
                + model.damping * env.max_normal_speed
                + 5.0 * model.noise_std;
            let step_bound = k * env.max_normal_speed * DT
                + model.damping * (env.max_normal_speed + env.max_normal_accel * DT)
                + 8.0 * model.noise_std
                + 1e-9;
            for pair in trace.samples.windows(2) {
                for c in 0..3 {
                    assert!(pair[1].force[c].abs() <= bound);
                    assert!((pair[1].force[c] - pair[0].force[c]).abs() <= step_bound);
                }
            }
        }
    }

    #[test]
    fn velocity_is_discrete_derivative() {
        let trace = generate_trace(Activity::DynTap, 30.0, 2).unwrap();
        for pair in trace.samples.windows(2) {
            for c in 0..3 {
                let d = (pair[1].position[c] - pair[0].position[c]) * 1000.0;
                assert!((d - pair[1].velocity[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_trace(Activity::RbTap, 30.0, 9).unwrap();
        let b = generate_trace(Activity::RbTap, 30.0, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_trace(Activity::RbTap, 30.0, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn short_duration_rejected() {
        assert!(generate_trace(Activity::DynPush, 29.0, 0).is_err());
    }

    #[test]
    fn trimming_and_window_count() {
        let trace = generate_trace(Activity::DynPush, 120.0, 4).unwrap();
        assert_eq!(trace.len(), 120_000);
        assert_eq!(trace.trimmed().unwrap().len(), 100_000);
        let windows = trim_and_window(&trace, 64).unwrap();
        assert_eq!(windows.len(), 99_936);

        let trimmed = trace.trimmed().unwrap();
        for k in (0..windows.len()).step_by(997).take(100) {
            let t = k + 63;
            assert_eq!(windows[k].y, trimmed.samples[t + 1].force);
            assert_eq!(windows[k].x_top[63], trimmed.samples[t].force);
            assert_eq!(windows[k].x_op[0], trimmed.samples[t - 63].operator());
        }
        assert_eq!(windows[0].x_top[1..], windows[1].x_top[..63]);
        assert_eq!(windows[0].x_op[1..], windows[1].x_op[..63]);
    }

    #[test]
    fn too_short_for_windowing() {
        let trace = generate_trace(Activity::DynPush, 30.0, 4).unwrap();
        assert!(trim_and_window(&trace, 10_000).is_err());
        assert!(trim_and_window(&trace, 64).is_ok());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let trace = generate_trace(Activity::RbInter, 30.0, 5).unwrap();
        write_trace(&path, &trace).unwrap();
        let back = read_trace(&path, Activity::RbInter).unwrap();
        assert_eq!(back, trace);
        write_trace(&path, &back).unwrap();
        let again = std::fs::read(&path).unwrap();
        write_trace(&path, &trace).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), again);
    }

    #[test]
    fn malformed_csv_errors() {
        let p = Path::new("x.csv");
        let e = parse_trace(p, "", Activity::DynTap).unwrap_err();
        assert!(e.to_string().contains("no samples"));
        let e = parse_trace(p, "t,fx,fy,fz,px,py,pz,vx,vy\n", Activity::DynTap).unwrap_err();
        assert!(e.to_string().contains("missing column `vz`"));
        let text = format!("{TRACE_HEADER}\n0,1,2,3,4,5,6,7,8,9\n1,1,2,3\n");
        let e = parse_trace(p, &text, Activity::DynTap).unwrap_err();
        assert!(e.to_string().contains(":3:"), "{e}");
        let e = parse_trace(p, &format!("{TRACE_HEADER}\n"), Activity::DynTap).unwrap_err();
        assert!(e.to_string().contains("no samples"));
    }
}
