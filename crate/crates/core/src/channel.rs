//! Temporally correlated effective-SNR process and packet-loss model.
//!
//! Each step draws a log-normal shadowing innovation that is smoothed by a
//! first-order autoregressive filter around the mean SNR, applies Rayleigh
//! fading on each diversity branch, averages the branches in the linear
//! domain, adds a heuristic FEC coding gain and maps the result through
//! BER and PER to a Bernoulli packet outcome.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::math::{db_to_linear, erfc, linear_to_db};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modulation {
    Bpsk,
    Qpsk,
    Qam16,
}

impl Modulation {
    /// Bits carried per symbol, b(M).
    pub fn bits_per_symbol(self) -> u32 {
        match self {
            Modulation::Bpsk => 1,
            Modulation::Qpsk => 2,
            Modulation::Qam16 => 4,
        }
    }

    /// Constellation size M.
    pub fn order(self) -> u32 {
        1 << self.bits_per_symbol()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Bpsk => "BPSK",
            Modulation::Qpsk => "QPSK",
            Modulation::Qam16 => "QAM16",
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modulation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "BPSK" => Ok(Modulation::Bpsk),
            "QPSK" => Ok(Modulation::Qpsk),
            "QAM16" | "16QAM" | "16-QAM" => Ok(Modulation::Qam16),
            other => Err(format!("unknown modulation `{other}`")),
        }
    }
}

/// Small-scale fading applied on each diversity branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fading {
    None,
    /// Unit-mean exponential power gain per branch per step.
    Rayleigh,
}

impl FromStr for Fading {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "off" => Ok(Fading::None),
            "rayleigh" => Ok(Fading::Rayleigh),
            other => Err(format!("unknown fading model `{other}`")),
        }
    }
}

impl fmt::Display for Fading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fading::None => "none",
            Fading::Rayleigh => "rayleigh",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    /// Average SNR in dB.
    pub mu_db: f64,
    /// Shadowing standard deviation in dB.
    pub sigma_sh_db: f64,
    /// Temporal correlation of the shadowing filter, in `[0, 1)`.
    pub rho: f64,
    pub code_rate: f64,
    pub packet_bits: u32,
    /// Number of independently faded branches combined per packet.
    pub diversity: usize,
    pub bandwidth_hz: f64,
    pub modulation: Modulation,
    pub fading: Fading,
    /// Maximum coding-gain scale in dB; zero disables FEC gain.
    pub fec_g0_db: f64,
    pub seed: u64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            mu_db: 20.0,
            sigma_sh_db: 4.0,
            rho: 0.95,
            code_rate: 0.602,
            packet_bits: 256,
            diversity: 3,
            bandwidth_hz: 20e6,
            modulation: Modulation::Qpsk,
            fading: Fading::Rayleigh,
            fec_g0_db: 8.0,
            seed: 1,
        }
    }
}

impl ChannelParams {
    /// A channel with every random component and the FEC gain switched off,
    /// so that the SNR equals `mu_db` at every step.
    pub fn static_channel(mu_db: f64, modulation: Modulation, packet_bits: u32) -> Self {
        ChannelParams {
            mu_db,
            sigma_sh_db: 0.0,
            rho: 0.0,
            code_rate: 1.0,
            packet_bits,
            diversity: 1,
            modulation,
            fading: Fading::None,
            fec_g0_db: 0.0,
            ..ChannelParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu_db.is_finite() {
            return Err(Error::invalid("channel.mu_db", "must be finite"));
        }
        if !(self.sigma_sh_db >= 0.0 && self.sigma_sh_db.is_finite()) {
            return Err(Error::invalid("channel.sigma_sh_db", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::invalid("channel.rho", "must lie in [0, 1)"));
        }
        if !(self.code_rate > 0.0 && self.code_rate <= 1.0) {
            return Err(Error::invalid("channel.code_rate", "must lie in (0, 1]"));
        }
        if self.packet_bits < 1 {
            return Err(Error::invalid("channel.packet_bits", "must be >= 1"));
        }
        if self.diversity < 1 {
            return Err(Error::invalid("channel.diversity", "must be >= 1"));
        }
        if !(self.bandwidth_hz > 0.0 && self.bandwidth_hz.is_finite()) {
            return Err(Error::invalid("channel.bandwidth_hz", "must be > 0"));
        }
        if !(self.fec_g0_db >= 0.0 && self.fec_g0_db.is_finite()) {
            return Err(Error::invalid("channel.fec_g0_db", "must be >= 0"));
        }
        Ok(())
    }
}

/// Evolving channel state: the filtered shadowing deviation and the
/// generator that drives every draw for this link.
#[derive(Debug, Clone)]
pub struct LinkState {
    shadow_db: f64,
    rng: ChaCha8Rng,
}

impl LinkState {
    pub fn new(seed: u64) -> Self {
        Self::with_shadow(seed, 0.0)
    }

    pub fn with_shadow(seed: u64, shadow_db: f64) -> Self {
        LinkState {
            shadow_db,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Current AR(1)-filtered deviation from the mean SNR, in dB.
    pub fn shadow_db(&self) -> f64 {
        self.shadow_db
    }

    /// Advances the filter with a caller-supplied innovation, bypassing the
    /// random draws.
    pub fn advance_with(&mut self, rho: f64, innovation_db: f64) -> f64 {
        self.shadow_db = rho * self.shadow_db + (1.0 - rho) * innovation_db;
        self.shadow_db
    }

    pub(crate) fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrSample {
    pub snr_db: f64,
    pub snr_eff_db: f64,
    pub gamma_lin: f64,
    pub ber: f64,
    pub per: f64,
}

impl SnrSample {
    fn from_snr(snr_db: f64, params: &ChannelParams) -> Self {
        let snr_eff_db = snr_db + fec_gain(params.code_rate, snr_db, params.fec_g0_db);
        let gamma_lin = db_to_linear(snr_eff_db);
        let ber = ber(params.modulation, gamma_lin);
        SnrSample {
            snr_db,
            snr_eff_db,
            gamma_lin,
            ber,
            per: per(ber, params.packet_bits),
        }
    }
}

/// Heuristic FEC coding gain in dB: `g0 * (1 - R)` scaled by a ramp that is
/// zero below -10 dB, linear up to 0 dB and saturated above.
pub fn fec_gain(code_rate: f64, snr_db: f64, g0_db: f64) -> f64 {
    let ramp = if snr_db <= -10.0 {
        0.0
    } else if snr_db >= 0.0 {
        1.0
    } else {
        (snr_db + 10.0) / 10.0
    };
    g0_db * (1.0 - code_rate) * ramp
}

/// Bit error probability at linear SNR `gamma`.
pub fn ber(modulation: Modulation, gamma: f64) -> f64 {
    let gamma = gamma.max(0.0);
    match modulation {
        Modulation::Bpsk | Modulation::Qpsk => 0.5 * erfc(gamma.sqrt()),
        Modulation::Qam16 => 0.375 * erfc((0.4 * gamma).sqrt()),
    }
}

/// Packet error probability for independent bit errors over `packet_bits`.
pub fn per(ber: f64, packet_bits: u32) -> f64 {
    // 1 - (1 - ber)^n, computed without cancellation for tiny ber.
    let p = -f64::exp_m1(packet_bits as f64 * f64::ln_1p(-ber));
    p.clamp(0.0, 1.0)
}

/// Linear-domain average of branch SNRs.
///
/// # Panics
///
/// Panics on an empty slice.
pub fn diversity_combine(gammas: &[f64]) -> f64 {
    assert!(!gammas.is_empty(), "diversity_combine needs at least one branch");
    gammas.iter().sum::<f64>() / gammas.len() as f64
}

/// Spectral efficiency η = b(M)·R in bit/s/Hz.
pub fn spectral_efficiency(modulation: Modulation, code_rate: f64) -> f64 {
    modulation.bits_per_symbol() as f64 * code_rate
}

/// Coded data rate η·B with symbol rate equal to the bandwidth.
pub fn coded_rate(modulation: Modulation, code_rate: f64, bandwidth_hz: f64) -> f64 {
    spectral_efficiency(modulation, code_rate) * bandwidth_hz
}

/// Successfully delivered information rate in bit/s.
pub fn goodput(modulation: Modulation, code_rate: f64, bandwidth_hz: f64, per: f64) -> f64 {
    coded_rate(modulation, code_rate, bandwidth_hz) * (1.0 - per)
}

/// Advances the link by one packet interval and returns the resulting SNR
/// sample.
///
/// Draw order per step is fixed: one standard normal for shadowing, then one
/// unit exponential per diversity branch. Shadowing is shared by all
/// branches and is the only component passed through the AR(1) filter;
/// fading is independent per branch and per step.
pub fn step_snr(state: &mut LinkState, params: &ChannelParams) -> SnrSample {
    let n: f64 = state.rng.sample(StandardNormal);
    let innovation = params.sigma_sh_db * n;
    let shadow = state.advance_with(params.rho, innovation);
    let local_db = params.mu_db + shadow;

    let snr_db = match params.fading {
        Fading::None => {
            for _ in 0..params.diversity {
                let _: f64 = state.rng.sample(Exp1);
            }
            local_db
        }
        Fading::Rayleigh => {
            let mean_lin = db_to_linear(local_db);
            let mut sum = 0.0;
            for _ in 0..params.diversity {
                let g: f64 = state.rng.sample(Exp1);
                sum += mean_lin * g;
            }
            linear_to_db(sum / params.diversity as f64)
        }
    };
    SnrSample::from_snr(snr_db, params)
}

/// Outcome of a packet-level Monte Carlo run.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSequence {
    /// `true` marks a lost packet.
    pub mask: Vec<bool>,
    pub raw_plr: f64,
    pub per_step: Option<Vec<SnrSample>>,
}

impl LossSequence {
    pub fn from_mask(mask: Vec<bool>) -> Self {
        let lost = mask.iter().filter(|&&m| m).count();
        let raw_plr = if mask.is_empty() {
            0.0
        } else {
            lost as f64 / mask.len() as f64
        };
        LossSequence {
            mask,
            raw_plr,
            per_step: None,
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn lost(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Writes the per-step record as `step,snr_db,snr_eff_db,ber,per,lost`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let samples = self
            .per_step
            .as_ref()
            .ok_or_else(|| Error::invalid("per_step", "loss sequence was not recorded"))?;
        let mut out = String::from("step,snr_db,snr_eff_db,ber,per,lost\n");
        for (i, (s, lost)) in samples.iter().zip(&self.mask).enumerate() {
            out.push_str(&format!(
                "{i},{:.6},{:.6},{:.6e},{:.6e},{}\n",
                s.snr_db, s.snr_eff_db, s.ber, s.per, *lost as u8
            ));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Runs the channel for `steps` packets with one Bernoulli draw per packet.
pub fn simulate_losses(params: &ChannelParams, steps: usize) -> LossSequence {
    simulate(params, steps, false)
}

/// Same as [`simulate_losses`] but keeps every [`SnrSample`].
pub fn simulate_losses_recorded(params: &ChannelParams, steps: usize) -> LossSequence {
    simulate(params, steps, true)
}

fn simulate(params: &ChannelParams, steps: usize, record: bool) -> LossSequence {
    let mut state = LinkState::new(params.seed);
    let mut mask = Vec::with_capacity(steps);
    let mut samples = record.then(|| Vec::with_capacity(steps));
    for _ in 0..steps {
        let s = step_snr(&mut state, params);
        let u = state.uniform();
        mask.push(u < s.per);
        if let Some(v) = samples.as_mut() {
            v.push(s);
        }
    }
    let mut seq = LossSequence::from_mask(mask);
    seq.per_step = samples;
    seq
}
