//! 3GPP TR 38.901 Urban Macro link budget and coverage analysis.

use crate::error::{Error, Result};
use crate::math::normal_cdf;

const SPEED_OF_LIGHT: f64 = 3.0e8;
/// UMa path-loss validity range for the 2D distance, in meters.
pub const MIN_DISTANCE_M: f64 = 10.0;
pub const MAX_DISTANCE_M: f64 = 5000.0;
/// Effective environment height used for the breakpoint distance.
const ENV_HEIGHT_M: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LinkBudgetParams {
    pub ptx_dbm: f64,
    pub gtx_db: f64,
    pub grx_db: f64,
    pub noise_floor_dbm: f64,
    pub fc_ghz: f64,
    pub h_bs_m: f64,
    pub h_ut_m: f64,
    pub sigma_los_db: f64,
    pub sigma_nlos_db: f64,
}

impl Default for LinkBudgetParams {
    fn default() -> Self {
        LinkBudgetParams {
            ptx_dbm: 43.0,
            gtx_db: 8.0,
            grx_db: 0.0,
            noise_floor_dbm: -90.0,
            fc_ghz: 1.8,
            h_bs_m: 25.0,
            h_ut_m: 1.5,
            sigma_los_db: 4.0,
            sigma_nlos_db: 6.0,
        }
    }
}

impl LinkBudgetParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.h_bs_m > ENV_HEIGHT_M) {
            return Err(Error::invalid("link.h_bs_m", "must exceed 1 m"));
        }
        if !(self.h_ut_m > ENV_HEIGHT_M) {
            return Err(Error::invalid("link.h_ut_m", "must exceed 1 m"));
        }
        if !(self.sigma_los_db > 0.0 && self.sigma_nlos_db > 0.0) {
            return Err(Error::invalid("link.sigma_los_db", "shadowing spreads must be > 0"));
        }
        if !(0.5..=100.0).contains(&self.fc_ghz) {
            return Err(Error::invalid("link.fc_ghz", "must lie in [0.5, 100] GHz"));
        }
        Ok(())
    }

    /// Breakpoint distance d'_BP = 4 h'_BS h'_UT f_c / c.
    pub fn breakpoint_m(&self) -> f64 {
        4.0 * (self.h_bs_m - ENV_HEIGHT_M) * (self.h_ut_m - ENV_HEIGHT_M) * self.fc_ghz * 1e9
            / SPEED_OF_LIGHT
    }
}

/// Thermal noise floor `-174 + 10 log10(B) + NF` in dBm, for comparison with
/// the configured `noise_floor_dbm`.
pub fn thermal_noise_dbm(bandwidth_hz: f64, noise_figure_db: f64) -> f64 {
    -174.0 + 10.0 * bandwidth_hz.log10() + noise_figure_db
}

/// UMa path loss in dB at 2D distance `distance_m`.
///
/// Distances above 5 km are clamped (with a warning); distances below 10 m
/// are rejected.
pub fn path_loss_uma(distance_m: f64, los: bool, params: &LinkBudgetParams) -> Result<f64> {
    if !(distance_m >= MIN_DISTANCE_M) {
        return Err(Error::invalid(
            "distance_m",
            format!("{distance_m} m is below the 10 m UMa validity limit"),
        ));
    }
    let d = if distance_m > MAX_DISTANCE_M {
        log::warn!("distance {distance_m} m clamped to {MAX_DISTANCE_M} m");
        MAX_DISTANCE_M
    } else {
        distance_m
    };
    let pl_los = los_path_loss(d, params);
    if los {
        return Ok(pl_los);
    }
    let d3 = distance_3d(d, params);
    let pl_nlos =
        13.54 + 39.08 * d3.log10() + 20.0 * params.fc_ghz.log10() - 0.6 * (params.h_ut_m - 1.5);
    Ok(pl_los.max(pl_nlos))
}

fn distance_3d(d2: f64, params: &LinkBudgetParams) -> f64 {
    let dh = params.h_bs_m - params.h_ut_m;
    (d2 * d2 + dh * dh).sqrt()
}

fn los_path_loss(d2: f64, params: &LinkBudgetParams) -> f64 {
    let d3 = distance_3d(d2, params);
    let fc = 20.0 * params.fc_ghz.log10();
    let d_bp = params.breakpoint_m();
    if d2 <= d_bp {
        28.0 + 22.0 * d3.log10() + fc
    } else {
        let dh = params.h_bs_m - params.h_ut_m;
        28.0 + 40.0 * d3.log10() + fc - 9.0 * (d_bp * d_bp + dh * dh).log10()
    }
}

/// UMa LOS probability.
pub fn los_probability(distance_m: f64, params: &LinkBudgetParams) -> f64 {
    let d = distance_m;
    if d <= 18.0 {
        return 1.0;
    }
    let base = 18.0 / d + (-d / 63.0).exp() * (1.0 - 18.0 / d);
    let c = if params.h_ut_m <= 13.0 {
        0.0
    } else {
        ((params.h_ut_m - 13.0) / 10.0).powf(1.5)
    };
    base * (1.0 + c * 1.25 * (d / 100.0).powi(3) * (-d / 150.0).exp())
}

/// Maximum tolerable path loss for a required SNR.
pub fn max_path_loss(snr_req_db: f64, params: &LinkBudgetParams) -> f64 {
    params.ptx_dbm + params.gtx_db + params.grx_db - (params.noise_floor_dbm + snr_req_db)
}

/// LOS/NLOS mixture coverage probability with log-normal shadowing.
pub fn coverage_probability(distance_m: f64, pl_max_db: f64, params: &LinkBudgetParams) -> Result<f64> {
    let p_los = los_probability(distance_m, params);
    let pl_los = path_loss_uma(distance_m, true, params)?;
    let pl_nlos = path_loss_uma(distance_m, false, params)?;
    let p = p_los * normal_cdf((pl_max_db - pl_los) / params.sigma_los_db)
        + (1.0 - p_los) * normal_cdf((pl_max_db - pl_nlos) / params.sigma_nlos_db);
    Ok(p.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoverageDistance {
    /// Target missed even at the minimum distance.
    NoCoverage,
    /// Target met across the whole validity range.
    FullRange,
    Within(f64),
}

impl CoverageDistance {
    /// Distance in meters, with 0 for no coverage and the range limit for
    /// full coverage.
    pub fn meters(self) -> f64 {
        match self {
            CoverageDistance::NoCoverage => 0.0,
            CoverageDistance::FullRange => MAX_DISTANCE_M,
            CoverageDistance::Within(d) => d,
        }
    }
}

pub const BISECTION_TOL_M: f64 = 0.1;
const BISECTION_MAX_ITER: usize = 60;

/// Largest distance in `[10, 5000]` m whose coverage probability still meets
/// `p_star`, found by bisection.
pub fn max_coverage_distance(
    p_star: f64,
    pl_max_db: f64,
    params: &LinkBudgetParams,
) -> Result<CoverageDistance> {
    if !(p_star > 0.0 && p_star < 1.0) {
        return Err(Error::invalid("p_star", "must lie in (0, 1)"));
    }
    let p = |d: f64| coverage_probability(d, pl_max_db, params);
    if p(MIN_DISTANCE_M)? < p_star {
        return Ok(CoverageDistance::NoCoverage);
    }
    if p(MAX_DISTANCE_M)? >= p_star {
        return Ok(CoverageDistance::FullRange);
    }
    let (mut lo, mut hi) = (MIN_DISTANCE_M, MAX_DISTANCE_M);
    for _ in 0..BISECTION_MAX_ITER {
        if hi - lo <= BISECTION_TOL_M {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if p(mid)? >= p_star {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(CoverageDistance::Within(lo))
}
