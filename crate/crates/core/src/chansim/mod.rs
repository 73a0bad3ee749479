//! Synthetic multi-domain channel frequency response generator.
//!
//! Each multipath tap fades with a sum-of-sinusoids Jakes process; taps are
//! mixed across receive antennas with an exponential correlation matrix and
//! summed with their delay phase ramps to give the per-subcarrier response.

mod io;
mod stats;

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub use io::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use stats::{
    analytic_frequency_correlation, empirical_autocorrelation, ensemble_stats, mean_power, rms_distance, Axis, EnsembleStats,
};

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Sinusoids per Jakes fading process.
pub const SINUSOIDS_PER_TAP: usize = 16;

/// Largest supported antenna count.
pub const MAX_ANTENNAS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TapSpec {
    /// Excess delay in seconds.
    pub delay: f64,
    /// Linear power.
    pub power: f64,
}

impl TapSpec {
    pub fn new(delay: f64, power: f64) -> Self {
        Self { delay, power }
    }

    /// Exponential power-delay profile sampled every `tap_spacing` seconds,
    /// `P(tau) ~ exp(-tau / rms_delay_spread)`, normalized to unit power.
    pub fn exponential_profile(num_taps: usize, rms_delay_spread: f64, tap_spacing: f64) -> Vec<TapSpec> {
        let mut taps: Vec<TapSpec> = (0..num_taps)
            .map(|l| {
                let delay = l as f64 * tap_spacing;
                let power = if rms_delay_spread > 0.0 {
                    (-delay / rms_delay_spread).exp()
                } else if l == 0 {
                    1.0
                } else {
                    0.0
                };
                TapSpec { delay, power }
            })
            .collect();
        let total: f64 = taps.iter().map(|t| t.power).sum();
        for t in &mut taps {
            t.power /= total;
        }
        taps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub num_subcarriers: usize,
    /// Hz.
    pub subcarrier_spacing: f64,
    pub num_frames: usize,
    /// Seconds between consecutive frames.
    pub frame_interval: f64,
    pub num_antennas: usize,
    /// Hz.
    pub carrier_freq: f64,
    /// m/s.
    pub user_speed: f64,
    pub taps: Vec<TapSpec>,
    pub antenna_correlation: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    /// 20 MHz LTE carrier at 1.9 GHz: 200 pilot subcarriers, 2 receive
    /// antennas, 1 ms sub-frames, walking speed.
    fn default() -> Self {
        Self {
            num_subcarriers: 200,
            subcarrier_spacing: 90e3,
            num_frames: 100,
            frame_interval: 1e-3,
            num_antennas: 2,
            carrier_freq: 1.9e9,
            user_speed: 1.4,
            taps: TapSpec::exponential_profile(8, 300e-9, 100e-9),
            antenna_correlation: 0.5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("subcarrier_spacing", self.subcarrier_spacing),
            ("frame_interval", self.frame_interval),
            ("carrier_freq", self.carrier_freq),
            ("user_speed", self.user_speed),
            ("antenna_correlation", self.antenna_correlation),
        ];
        for (name, v) in reals {
            if !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite, got {v}")));
            }
        }
        if self.num_subcarriers == 0 || self.num_frames == 0 {
            return Err(Error::config("num_subcarriers and num_frames must be at least 1"));
        }
        if !(1..=MAX_ANTENNAS).contains(&self.num_antennas) {
            return Err(Error::config(format!(
                "num_antennas must be in 1..={MAX_ANTENNAS}, got {}",
                self.num_antennas
            )));
        }
        if self.frame_interval <= 0.0 {
            return Err(Error::config("frame_interval must be positive"));
        }
        if self.user_speed < 0.0 || self.subcarrier_spacing < 0.0 || self.carrier_freq < 0.0 {
            return Err(Error::config("speed, spacing and carrier must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.antenna_correlation) {
            return Err(Error::config("antenna_correlation must lie in [0, 1]"));
        }
        if self.taps.is_empty() {
            return Err(Error::config("at least one tap is required"));
        }
        for (l, t) in self.taps.iter().enumerate() {
            if !t.delay.is_finite() || !t.power.is_finite() || t.delay < 0.0 || t.power < 0.0 {
                return Err(Error::config(format!("tap {l} has invalid delay/power")));
            }
        }
        if self.taps.iter().map(|t| t.power).sum::<f64>() <= 0.0 {
            return Err(Error::config("tap powers sum to zero"));
        }
        Ok(())
    }

    /// Taps with powers rescaled to sum to one.
    pub fn normalized_taps(&self) -> Vec<TapSpec> {
        let total: f64 = self.taps.iter().map(|t| t.power).sum();
        self.taps
            .iter()
            .map(|t| TapSpec::new(t.delay, t.power / total))
            .collect()
    }

    /// Maximum Doppler shift in Hz.
    pub fn max_doppler(&self) -> f64 {
        self.user_speed * self.carrier_freq / SPEED_OF_LIGHT
    }

    pub fn meta(&self) -> GridMeta {
        GridMeta {
            num_subcarriers: self.num_subcarriers,
            num_frames: self.num_frames,
            num_antennas: self.num_antennas,
            frame_interval: self.frame_interval,
            subcarrier_spacing: self.subcarrier_spacing,
        }
    }
}

/// Dimensions and sampling of a channel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridMeta {
    pub num_subcarriers: usize,
    pub num_frames: usize,
    pub num_antennas: usize,
    pub frame_interval: f64,
    pub subcarrier_spacing: f64,
}

impl GridMeta {
    pub fn len(&self) -> usize {
        self.num_subcarriers * self.num_frames * self.num_antennas
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values per frame.
    pub fn frame_len(&self) -> usize {
        self.num_subcarriers * self.num_antennas
    }
}

/// Complex channel frequency response indexed by (subcarrier, frame, antenna).
///
/// Storage is subcarrier-fastest, antenna-middle, frame-slowest, so a frame
/// is one contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGrid {
    meta: GridMeta,
    values: Vec<Complex64>,
}

impl ChannelGrid {
    pub fn new(meta: GridMeta, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != meta.len() {
            return Err(Error::ShapeMismatch(format!(
                "grid expects {} values, got {}",
                meta.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFinite(format!("grid value {i}")));
        }
        Ok(Self { meta, values })
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn num_subcarriers(&self) -> usize {
        self.meta.num_subcarriers
    }

    pub fn num_frames(&self) -> usize {
        self.meta.num_frames
    }

    pub fn num_antennas(&self) -> usize {
        self.meta.num_antennas
    }

    #[inline]
    pub fn index(&self, subcarrier: usize, frame: usize, antenna: usize) -> usize {
        (frame * self.meta.num_antennas + antenna) * self.meta.num_subcarriers + subcarrier
    }

    #[inline]
    pub fn get(&self, subcarrier: usize, frame: usize, antenna: usize) -> Complex64 {
        self.values[self.index(subcarrier, frame, antenna)]
    }

    /// All values of one frame, antenna-major.
    pub fn frame(&self, frame: usize) -> &[Complex64] {
        let n = self.meta.frame_len();
        &self.values[frame * n..(frame + 1) * n]
    }

    /// Applies `f` to every value.
    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self {
            meta: self.meta,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sub-grid holding frames `start..end`.
    pub fn frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.num_frames() {
            return Err(Error::OutOfRange(format!(
                "frame range {start}..{end} of {}",
                self.num_frames()
            )));
        }
        let n = self.meta.frame_len();
        let meta = GridMeta {
            num_frames: end - start,
            ..self.meta
        };
        Ok(Self {
            meta,
            values: self.values[start * n..end * n].to_vec(),
        })
    }
}

/// Lower-triangular square root of the exponential correlation matrix
/// `R[i][j] = rho^|i-j|`. Zero pivots (rho = 1) give zero columns.
fn antenna_mixing(num_antennas: usize, rho: f64) -> Vec<Vec<f64>> {
    let r = |i: usize, j: usize| rho.powi((i as i32 - j as i32).abs());
    let mut l = vec![vec![0.0; num_antennas]; num_antennas];
    for i in 0..num_antennas {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][j] = (r(i, i) - s).max(0.0).sqrt();
            } else if l[j][j] > 1e-12 {
                l[i][j] = (r(i, j) - s) / l[j][j];
            }
        }
    }
    l
}

/// One sum-of-sinusoids fading process with unit mean power.
struct JakesProcess {
    doppler: Vec<f64>,
    phase: Vec<f64>,
}

impl JakesProcess {
    fn draw(seed: u64, tap: usize, process: usize, max_doppler: f64) -> Self {
        let mut rng = rng::keyed(seed, Stream::Fading, tap as u64, process as u64);
        let offset: f64 = rng.gen_range(-PI..PI);
        let m = SINUSOIDS_PER_TAP as f64;
        let mut doppler = Vec::with_capacity(SINUSOIDS_PER_TAP);
        let mut phase = Vec::with_capacity(SINUSOIDS_PER_TAP);
        for i in 0..SINUSOIDS_PER_TAP {
            let arrival = (2.0 * PI * i as f64 - PI + offset) / m;
            doppler.push(max_doppler * arrival.cos());
            phase.push(rng.gen_range(-PI..PI));
        }
        Self { doppler, phase }
    }

    fn at(&self, t: f64) -> Complex64 {
        let scale = 1.0 / (SINUSOIDS_PER_TAP as f64).sqrt();
        let sum: Complex64 = self
            .doppler
            .iter()
            .zip(&self.phase)
            .map(|(&fd, &ph)| Complex64::from_polar(1.0, 2.0 * PI * fd * t + ph))
            .sum();
        sum * scale
    }
}

/// Generates the channel grid described by `config`.
///
/// `H(f_k, t_n, a) = sum_l g_{l,a}(t_n) exp(-j 2 pi f_k tau_l)` with
/// `f_k = k * subcarrier_spacing`. The output depends only on `config`.
pub fn generate_channel(config: &SimConfig) -> Result<ChannelGrid> {
    config.validate()?;
    let meta = config.meta();
    let taps = config.normalized_taps();
    let fd = config.max_doppler();
    let mix = antenna_mixing(config.num_antennas, config.antenna_correlation);
    let na = config.num_antennas;
    let ns = config.num_subcarriers;

    // Delay phase ramps per tap.
    let ramps: Vec<Vec<Complex64>> = taps
        .iter()
        .map(|tap| {
            (0..ns)
                .map(|k| {
                    let f = k as f64 * config.subcarrier_spacing;
                    Complex64::from_polar(1.0, -2.0 * PI * f * tap.delay)
                })
                .collect()
        })
        .collect();

    let processes: Vec<Vec<JakesProcess>> = (0..taps.len())
        .map(|l| (0..na).map(|p| JakesProcess::draw(config.seed, l, p, fd)).collect())
        .collect();

    let mut values = vec![Complex64::new(0.0, 0.0); meta.len()];
    let mut independent = vec![Complex64::new(0.0, 0.0); na];
    for n in 0..config.num_frames {
        let t = n as f64 * config.frame_interval;
        let frame = &mut values[n * na * ns..(n + 1) * na * ns];
        for (l, tap) in taps.iter().enumerate() {
            let amp = tap.power.sqrt();
            for (p, u) in independent.iter_mut().enumerate() {
                *u = processes[l][p].at(t);
            }
            for a in 0..na {
                let gain: Complex64 = (0..=a).map(|p| independent[p] * mix[a][p]).sum::<Complex64>() * amp;
                let row = &mut frame[a * ns..(a + 1) * ns];
                for (h, r) in row.iter_mut().zip(&ramps[l]) {
                    *h += gain * r;
                }
            }
        }
    }
    ChannelGrid::new(meta, values)
}

/// Adds interference to one frame so that its signal-to-interference ratio
/// is `sir_db`. The interferer contributes its frame with the same index
/// (modulo its length). `sir_db = +inf` leaves the grid unchanged.
pub fn inject_contamination(
    grid: &ChannelGrid,
    frame_index: usize,
    interferer: &ChannelGrid,
    sir_db: f64,
) -> Result<ChannelGrid> {
    if frame_index >= grid.num_frames() {
        return Err(Error::OutOfRange(format!(
            "frame {frame_index} of {}",
            grid.num_frames()
        )));
    }
    if interferer.num_subcarriers() != grid.num_subcarriers()
        || interferer.num_antennas() != grid.num_antennas()
    {
        return Err(Error::ShapeMismatch(format!(
            "interferer is {}x{} (subcarriers x antennas), grid is {}x{}",
            interferer.num_subcarriers(),
            interferer.num_antennas(),
            grid.num_subcarriers(),
            grid.num_antennas()
        )));
    }
    if sir_db.is_nan() {
        return Err(Error::config("sir_db is NaN"));
    }
    let mut out = grid.clone();
    if sir_db == f64::INFINITY {
        return Ok(out);
    }
    let signal = grid.frame(frame_index);
    let interference = interferer.frame(frame_index % interferer.num_frames());
    let p_sig = signal.iter().map(|v| v.norm_sqr()).sum::<f64>() / signal.len() as f64;
    let p_int = interference.iter().map(|v| v.norm_sqr()).sum::<f64>() / interference.len() as f64;
    if p_int == 0.0 {
        return Err(Error::config("interferer frame has zero power"));
    }
    let alpha = (p_sig / (p_int * 10f64.powf(sir_db / 10.0))).sqrt();
    let n = grid.meta.frame_len();
    for (h, i) in out.values[frame_index * n..(frame_index + 1) * n]
        .iter_mut()
        .zip(interference)
    {
        *h += i * alpha;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SimConfig {
        SimConfig {
            num_subcarriers: 8,
            num_frames: 6,
            seed,
            ..SimConfig::default()
        }
    }

    #[test]
    fn zero_doppler_frames_identical() {
        let cfg = SimConfig {
            user_speed: 0.0,
            ..small(3)
        };
        let g = generate_channel(&cfg).unwrap();
        for n in 1..g.num_frames() {
            assert_eq!(g.frame(0), g.frame(n));
        }
    }

    #[test]
    fn single_tap_is_flat() {
        let cfg = SimConfig {
            taps: vec![TapSpec::new(0.0, 1.0)],
            ..small(4)
        };
        let g = generate_channel(&cfg).unwrap();
        for n in 0..g.num_frames() {
            for a in 0..g.num_antennas() {
                let m0 = g.get(0, n, a).norm();
                for k in 1..g.num_subcarriers() {
                    assert!((g.get(k, n, a).norm() - m0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(generate_channel(&small(9)).unwrap(), generate_channel(&small(9)).unwrap());
        assert_ne!(generate_channel(&small(9)).unwrap(), generate_channel(&small(10)).unwrap());
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_channel(&SimConfig { num_antennas: 9, ..small(0) }).is_err());
        assert!(generate_channel(&SimConfig { num_antennas: 0, ..small(0) }).is_err());
        assert!(generate_channel(&SimConfig { user_speed: f64::NAN, ..small(0) }).is_err());
        assert!(generate_channel(&SimConfig { frame_interval: 0.0, ..small(0) }).is_err());
        assert!(generate_channel(&SimConfig { taps: vec![], ..small(0) }).is_err());
        assert!(generate_channel(&SimConfig { antenna_correlation: 1.5, ..small(0) }).is_err());
    }

    #[test]
    fn mixing_reproduces_correlation() {
        for na in 1..=MAX_ANTENNAS {
            let l = antenna_mixing(na, 0.7);
            for i in 0..na {
                for j in 0..na {
                    let r: f64 = (0..na).map(|k| l[i][k] * l[j][k]).sum();
                    assert!((r - 0.7f64.powi((i as i32 - j as i32).abs())).abs() < 1e-12);
                }
            }
        }
        let full = antenna_mixing(2, 1.0);
        assert_eq!(full[1], vec![1.0, 0.0]);
    }

    #[test]
    fn contamination_identity_and_power() {
        let g = generate_channel(&small(1)).unwrap();
        let int = generate_channel(&small(2)).unwrap();
        assert_eq!(inject_contamination(&g, 3, &int, f64::INFINITY).unwrap(), g);

        let c = inject_contamination(&g, 3, &int, 0.0).unwrap();
        let p = |vs: &[Complex64]| vs.iter().map(|v| v.norm_sqr()).sum::<f64>() / vs.len() as f64;
        let added: Vec<Complex64> = c.frame(3).iter().zip(g.frame(3)).map(|(a, b)| a - b).collect();
        assert!((p(&added) - p(g.frame(3))).abs() / p(g.frame(3)) < 1e-6);
        for n in (0..6).filter(|&n| n != 3) {
            assert_eq!(c.frame(n), g.frame(n));
        }
    }

    #[test]
    fn contamination_untouched_frame_zero() {
        let cfg = SimConfig { num_frames: 2, ..small(5) };
        let g = generate_channel(&cfg).unwrap();
        let int = generate_channel(&SimConfig { seed: 6, ..cfg.clone() }).unwrap();
        let c = inject_contamination(&g, 1, &int, 3.0).unwrap();
        let bits = |vs: &[Complex64]| vs.iter().map(|v| (v.re.to_bits(), v.im.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(c.frame(0)), bits(g.frame(0)));
    }

    #[test]
    fn contamination_errors() {
        let g = generate_channel(&small(1)).unwrap();
        let other = generate_channel(&SimConfig { num_subcarriers: 4, ..small(2) }).unwrap();
        assert!(matches!(inject_contamination(&g, 0, &other, 0.0), Err(Error::ShapeMismatch(_))));
        assert!(matches!(inject_contamination(&g, 6, &g, 0.0), Err(Error::OutOfRange(_))));
    }
}
