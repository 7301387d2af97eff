use xhap_core::channel::{ChannelParams, Modulation};
use xhap_core::experiments::*;
use xhap_core::link_budget::LinkBudgetParams;
use xhap_core::par::Execution;
use xhap_core::restoration::{HoldLast, NoRestoration, Predictor, RestorationConfig};
use xhap_core::traces::{generate_trace, Activity, Trace};

/// Closed-form SNR (dB) at which 0.5·erfc(√γ) = 1 − (1 − 1e-5)^(1/256).
const STATIC_ROOT_DB: f64 = 11.591458526;

fn tap_stream(steps: usize) -> Trace {
    let traces: Vec<Trace> = [Activity::DynTap, Activity::RbTap]
        .iter()
        .map(|&a| generate_trace(a, 30.0, 77).unwrap().trimmed().unwrap())
        .collect();
    evaluation_stream(&traces, steps).unwrap()
}

fn rc() -> RestorationConfig {
    RestorationConfig {
        history_len: 16,
        ..Default::default()
    }
}

fn column_f64(t: &Table, name: &str) -> Vec<f64> {
    t.column(name).unwrap().iter().map(|v| v.parse().unwrap()).collect()
}

#[test]
fn static_min_snr_matches_closed_form_at_a_million_steps() {
    let stream = evaluation_stream(&[generate_trace(Activity::DynPush, 30.0, 1).unwrap()], 1_000_000).unwrap();
    let cfg = ExperimentConfig {
        steps: stream.len(),
        snr_tol: 0.01,
        ..Default::default()
    };
    for seed in 1..=3 {
        let ch = ChannelParams {
            seed,
            ..ChannelParams::static_channel(0.0, Modulation::Qpsk, 256)
        };
        let got = min_snr_for_target(&NoRestoration, &stream, &ch, &rc(), &cfg).unwrap().db().unwrap();
        assert!((got - STATIC_ROOT_DB).abs() < 0.3, "seed {seed}: {got} dB");
    }
}

#[test]
fn min_snr_is_nonincreasing_in_threshold_and_diversity() {
    let stream = tap_stream(50_000);
    let cfg = ExperimentConfig {
        steps: stream.len(),
        target_plr: 1e-4,
        thresholds: vec![0.05, 0.1, 0.2],
        mcs_list: vec![],
        ..Default::default()
    };
    let table = min_snr_table(&[&HoldLast], &stream, &ChannelParams::default(), &rc(), &cfg).unwrap();
    let snr = column_f64(&table, "min_snr_db");
    assert!(snr.windows(2).all(|w| w[1] <= w[0]), "{snr:?}");

    let at = |diversity: usize| {
        let ch = ChannelParams {
            diversity,
            ..Default::default()
        };
        min_snr_for_target(&HoldLast, &stream, &ch, &rc(), &cfg).unwrap().db().unwrap()
    };
    let (one, three) = (at(1), at(3));
    assert!(three <= one, "L_div=3 needs {three} dB but L_div=1 needs {one} dB");
}

#[test]
fn unreachable_target_is_reported() {
    let stream = tap_stream(5_000);
    let cfg = ExperimentConfig {
        steps: stream.len(),
        target_plr: 1e-3,
        snr_bounds: (0.0, 2.0),
        ..Default::default()
    };
    let r = min_snr_for_target(&NoRestoration, &stream, &ChannelParams::default(), &rc(), &cfg).unwrap();
    assert_eq!(r, MinSnr::Unreachable);
}

#[test]
fn coverage_grows_as_required_snr_drops() {
    let link = LinkBudgetParams::default();
    let t = coverage_curve(
        &[("strict".into(), 25.0), ("relaxed".into(), 15.0)],
        0.99,
        &link,
        (10.0, 1000.0, 10.0),
    )
    .unwrap();
    let pl = column_f64(&t, "pl_max_db");
    let d = column_f64(&t, "d_max_m");
    let n = t.rows.len() / 2;
    assert_eq!(pl[n] - pl[0], 10.0);
    assert!(d[n] > d[0], "{} vs {}", d[n], d[0]);
    let direct = coverage_distance(25.0, 0.99, &link).unwrap().meters();
    assert_eq!(d[0], direct);
    let p = column_f64(&t, "p_cov");
    assert!(p[..n].windows(2).all(|w| w[1] <= w[0] + 1e-12));
}

#[test]
fn burst_loss_is_nondecreasing_in_length() {
    let stream = tap_stream(40_000);
    let cfg = ExperimentConfig {
        steps: stream.len(),
        ..Default::default()
    };
    let t = burst_experiment(&[&HoldLast], &stream, &ChannelParams::default(), &rc(), &cfg).unwrap();
    let eff = column_f64(&t, "effective_plr");
    assert_eq!(eff.len(), 8);
    assert!(eff.windows(2).all(|w| w[1] >= w[0]), "{eff:?}");
}

#[test]
fn capacity_is_monotone_and_rate_bounded() {
    let stream = tap_stream(20_000);
    let cfg = ExperimentConfig {
        steps: stream.len(),
        target_plr: 1e-3,
        capacity_snr_db: 14.0,
        bandwidths: vec![0.5e6, 1e6, 2e6, 4e6],
        ..Default::default()
    };
    let models: [&dyn Predictor; 2] = [&HoldLast, &NoRestoration];
    let t = network_capacity(&models, &stream, &ChannelParams::default(), &rc(), &cfg).unwrap();
    let cap = column_f64(&t, "capacity");
    let ceil = column_f64(&t, "rate_ceiling");
    for m in 0..2 {
        let c = &cap[m * 4..m * 4 + 4];
        assert!(c.windows(2).all(|w| w[1] >= w[0]), "{c:?}");
        assert!(c.iter().zip(&ceil[m * 4..]).all(|(c, r)| c <= r));
    }
    assert!(cap[3] > cap[0], "hold-last capacity should grow with bandwidth: {cap:?}");
    // restoration never admits fewer users than no restoration
    assert!(cap[..4].iter().zip(&cap[4..]).all(|(a, b)| a >= b), "{cap:?}");
}

#[test]
fn tap_difficult_regions_change_faster() {
    for activity in [Activity::DynTap, Activity::RbTap] {
        let tr = generate_trace(activity, 40.0, 5).unwrap().trimmed().unwrap();
        let errors = one_step_errors(&HoldLast, &tr, 16, Execution::Parallel).unwrap();
        let fd = force_dynamics(&tr.forces(), &errors, 16, 5000).unwrap();
        assert!(
            fd.difficult.mean_abs_rate > fd.easy.mean_abs_rate,
            "{activity}: difficult {:?} easy {:?}",
            fd.difficult,
            fd.easy
        );
    }
}

#[test]
fn sweep_rate_is_nondecreasing_in_threshold() {
    let stream = tap_stream(30_000);
    let cfg = ExperimentConfig {
        steps: stream.len(),
        thresholds: vec![0.02, 0.05, 0.1, 0.2, 0.5],
        mcs_list: vec![],
        snr_db: 8.0,
        ..Default::default()
    };
    let t = threshold_sweep(&[&HoldLast], &stream, &ChannelParams::default(), &rc(), &cfg).unwrap();
    let rate = column_f64(&t, "restoration_rate");
    assert!(rate.windows(2).all(|w| w[1] >= w[0]), "{rate:?}");
}

#[test]
fn grid_results_do_not_depend_on_execution() {
    let stream = tap_stream(20_000);
    let base = ExperimentConfig {
        steps: stream.len(),
        target_plr: 1e-3,
        bandwidths: vec![1e6, 2e6],
        ..Default::default()
    };
    let run = |execution| {
        let cfg = ExperimentConfig {
            execution,
            ..base.clone()
        };
        let ch = ChannelParams::default();
        (
            burst_experiment(&[&HoldLast], &stream, &ch, &rc(), &cfg).unwrap(),
            network_capacity(&[&HoldLast], &stream, &ch, &rc(), &cfg).unwrap(),
            threshold_sweep(&[&HoldLast], &stream, &ch, &rc(), &cfg).unwrap(),
        )
    };
    assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
}
