//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xhap_core::channel::{simulate_losses, ChannelParams, LossSequence};
use xhap_core::config::RunConfig;
use xhap_core::model::{ModelConfig, Normalization, XhapModel};
use xhap_core::restoration::{run_restoration, HoldLast, Predictor, RestorationConfig};
use xhap_core::traces::{generate_trace, Activity, Trace};
use xhap_core::training::{batch_gradient, batch_loss, Dataset, ExampleRef, TrainConfig};

/// The desk-scale configuration shipped with the repository.
pub fn desk_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf")
}

pub fn desk_config(out: &Path, overrides: &[&str]) -> RunConfig {
    let mut o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    o.push(format!("run.out={}", out.display()));
    RunConfig::load(Some(&desk_config_path()), &o).expect("desk config parses")
}

/// A tiny configuration that runs `all` in seconds.
pub fn tiny_config(out: &Path) -> RunConfig {
    let overrides: Vec<String> = [
        "traces.duration_s=30",
        "traces.activities=dyn_tap, rb_push_hold",
        "model.history_len=8",
        "model.latent=8",
        "model.heads=2",
        "model.hidden=8",
        "train.epochs=2",
        "train.rollout_horizon=2",
        "train.stride=200",
        "experiments.steps=20000",
        "experiments.target_plr=1e-3",
        "experiments.snr_db=10",
        "experiments.rolling_window=500",
        "experiments.bandwidths=1e6, 2e6",
        "experiments.coverage_grid=10, 200, 10",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain(std::iter::once(format!("run.out={}", out.display())))
    .collect();
    RunConfig::parse("", &overrides).expect("tiny config parses")
}

/// Outcome of one randomized restoration case.
pub struct CaseReport {
    pub case: usize,
    pub predictor: String,
    pub failure: Option<String>,
}

/// Draws `cases` random (trace segment, loss mask, thresholds) cases and
/// checks the restoration invariants for hold-last and a small untrained
/// estimator. Returns one report per case and predictor.
pub fn restoration_invariant_cases(cases: usize, seed: u64) -> Vec<CaseReport> {
    const L: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for case in 0..cases {
        let activity = Activity::ALL[rng.random_range(0..Activity::ALL.len())];
        let full = generate_trace(activity, 30.0, rng.random()).unwrap().trimmed().unwrap();
        let len = rng.random_range(1000..4000);
        let from = rng.random_range(0..full.len() - len);
        let trace = Trace {
            samples: full.samples[from..from + len].to_vec(),
            ..full
        };
        let mut mask = if rng.random_bool(0.5) {
            let p = rng.random_range(0.01..0.3);
            (0..len).map(|_| rng.random_bool(p)).collect::<Vec<bool>>()
        } else {
            let ch = ChannelParams {
                mu_db: rng.random_range(4.0..14.0),
                seed: rng.random(),
                ..Default::default()
            };
            simulate_losses(&ch, len).mask
        };
        // losses during the buffer warm-up can never be restored
        mask[..L].iter_mut().for_each(|m| *m = false);
        let losses = LossSequence::from_mask(mask);
        let mut thresholds: Vec<f64> = (0..3).map(|_| rng.random_range(0.005..0.5)).collect();
        thresholds.sort_by(f64::total_cmp);

        let mut model = XhapModel::new(
            ModelConfig {
                history_len: L,
                latent: 8,
                heads: 2,
                hidden: 8,
            },
            rng.random(),
        )
        .unwrap();
        model.normalization = Normalization::fit(std::slice::from_ref(&trace)).unwrap();

        for p in [&HoldLast as &dyn Predictor, &model] {
            reports.push(CaseReport {
                case,
                predictor: p.name().to_string(),
                failure: check_case(&trace, &losses, p, &thresholds, L).err(),
            });
        }
    }
    reports
}

fn check_case(trace: &Trace, losses: &LossSequence, p: &dyn Predictor, thresholds: &[f64], l: usize) -> Result<(), String> {
    let run = |threshold: f64| {
        let cfg = RestorationConfig {
            history_len: l,
            threshold,
            ..Default::default()
        };
        run_restoration(trace, losses, p, &cfg).map_err(|e| e.to_string())
    };
    let mut last_rate = f64::NEG_INFINITY;
    for &t in thresholds {
        let s = run(t)?;
        if s.lost != losses.lost() {
            return Err(format!("lost {} but mask has {}", s.lost, losses.lost()));
        }
        if s.restored + s.unrestored() != s.lost || s.restored > s.lost {
            return Err(format!("counters: restored {} unrestored {} lost {}", s.restored, s.unrestored(), s.lost));
        }
        if s.effective_plr > losses.raw_plr {
            return Err(format!("effective {} > raw {} at {t}", s.effective_plr, losses.raw_plr));
        }
        if s.restoration_rate < last_rate {
            return Err(format!("rate {} fell below {last_rate} at threshold {t}", s.restoration_rate));
        }
        last_rate = s.restoration_rate;
    }
    let s = run(f64::INFINITY)?;
    if s.effective_plr != 0.0 {
        return Err(format!("infinite threshold left effective PLR {}", s.effective_plr));
    }
    Ok(())
}

fn segment(activity: Activity, seed: u64, from: usize, len: usize) -> Trace {
    let tr = generate_trace(activity, 30.0, seed).unwrap();
    Trace {
        activity,
        samples: tr.samples[from..from + len].to_vec(),
        sample_rate_hz: tr.sample_rate_hz,
    }
}

/// Central differences at step 1e-5 carry roundoff of about
/// ε·|loss|/h ≈ 1e-10 here, so a 1e-4 relative comparison is only
/// meaningful for entries above ~1e-6. Smaller entries are compared against
/// this floor instead of their own magnitude.
const GRAD_FLOOR: f64 = 1e-5;

/// Worst relative disagreement between analytic and central-difference
/// gradients over every parameter entry.
fn worst_relative_error(model: &XhapModel, data: &Dataset, batch: &[ExampleRef], forcing: &[Vec<bool>], cfg: &TrainConfig) -> (f64, String) {
    let (grads, _) = batch_gradient(model, data, batch, forcing, cfg).unwrap();
    let h = 1e-5;
    let mut probe = model.clone();
    let mut worst = (0.0f64, String::new());
    let names: Vec<String> = grads.tensors().into_iter().map(|(n, _)| n).collect();
    for (ti, name) in names.iter().enumerate() {
        let n = grads.tensors()[ti].1.len();
        for i in 0..n {
            let orig = probe.params.tensors()[ti].1.as_slice()[i];
            probe.params.tensors_mut()[ti].1.as_mut_slice()[i] = orig + h;
            let up = batch_loss(&probe, data, batch, forcing, cfg).total;
            probe.params.tensors_mut()[ti].1.as_mut_slice()[i] = orig - h;
            let down = batch_loss(&probe, data, batch, forcing, cfg).total;
            probe.params.tensors_mut()[ti].1.as_mut_slice()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads.tensors()[ti].1.as_slice()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(GRAD_FLOOR);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]: analytic {an:e}, numeric {fd:e}"));
            }
        }
    }
    worst
}

/// Worst relative gradient error on a D=8, h=2, L=4 model over a small
/// batch with mixed teacher forcing, and where it occurred.
pub fn keystone_gradient_error() -> (f64, String) {
    let traces = vec![segment(Activity::DynTap, 3, 12_000, 60), segment(Activity::RbPushHold, 4, 14_000, 60)];
    let norm = Normalization::fit(&traces).unwrap();
    let config = ModelConfig {
        history_len: 4,
        latent: 8,
        heads: 2,
        hidden: 32,
    };
    let mut model = XhapModel::new(config, 21).unwrap();
    model.normalization = norm.clone();
    let cfg = TrainConfig::default();
    let data = Dataset::from_traces(&traces, &norm, 4, cfg.rollout_horizon, 7).unwrap();
    let batch: Vec<ExampleRef> = data.examples.iter().step_by(3).copied().take(5).collect();
    let forcing: Vec<Vec<bool>> = (0..batch.len())
        .map(|i| (0..cfg.rollout_horizon).map(|k| (i + k) % 3 == 0).collect())
        .collect();
    worst_relative_error(&model, &data, &batch, &forcing, &cfg)
}
