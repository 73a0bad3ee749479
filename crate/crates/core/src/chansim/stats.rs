use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use super::{generate_channel, ChannelGrid, SimConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Frequency,
    Time,
    Antenna,
}

/// Mean `|H|^2` over the grid.
pub fn mean_power(grid: &ChannelGrid) -> f64 {
    grid.values().iter().map(|v| v.norm_sqr()).sum::<f64>() / grid.values().len() as f64
}

/// Normalized lag correlation `R(d) / R(0)` along `axis`, where
/// `R(d) = mean x[i] conj(x[i + d])` over every index pair `d` apart on that
/// axis (all other axes averaged). One value per lag `0..extent`.
pub fn empirical_autocorrelation(grid: &ChannelGrid, axis: Axis) -> Vec<Complex64> {
    let (ns, nf, na) = (grid.num_subcarriers(), grid.num_frames(), grid.num_antennas());
    let extent = match axis {
        Axis::Frequency => ns,
        Axis::Time => nf,
        Axis::Antenna => na,
    };
    if extent <= 1 {
        return vec![Complex64::new(1.0, 0.0); extent.max(1)];
    }
    let at = |pos: usize, k: usize, n: usize, a: usize| match axis {
        Axis::Frequency => grid.get(pos, n, a),
        Axis::Time => grid.get(k, pos, a),
        Axis::Antenna => grid.get(k, n, pos),
    };
    // (k, n, a) enumerate the other two axes; the axis slot itself is ignored.
    let (ks, ns_, as_) = match axis {
        Axis::Frequency => (1, nf, na),
        Axis::Time => (ns, 1, na),
        Axis::Antenna => (ns, nf, 1),
    };
    let mut raw = vec![Complex64::new(0.0, 0.0); extent];
    for (lag, slot) in raw.iter_mut().enumerate() {
        let mut sum = Complex64::new(0.0, 0.0);
        let mut count = 0usize;
        for k in 0..ks {
            for n in 0..ns_ {
                for a in 0..as_ {
                    for pos in 0..extent - lag {
                        sum += at(pos, k, n, a) * at(pos + lag, k, n, a).conj();
                        count += 1;
                    }
                }
            }
        }
        *slot = sum / count as f64;
    }
    let r0 = raw[0].re;
    if r0 == 0.0 {
        let mut out = vec![Complex64::new(0.0, 0.0); extent];
        out[0] = Complex64::new(1.0, 0.0);
        return out;
    }
    raw.iter().map(|r| r / r0).collect()
}

/// Subcarrier correlation implied by the power-delay profile:
/// `sum_l P_l exp(j 2 pi d df tau_l) / sum_l P_l` for lags `0..lags`.
pub fn analytic_frequency_correlation(cfg: &SimConfig, lags: usize) -> Vec<Complex64> {
    let taps = cfg.normalized_taps();
    let total: f64 = taps.iter().map(|t| t.power).sum();
    (0..lags)
        .map(|d| {
            taps.iter()
                .map(|t| Complex64::from_polar(t.power, 2.0 * PI * d as f64 * cfg.subcarrier_spacing * t.delay))
                .sum::<Complex64>()
                / total
        })
        .collect()
}

/// Ensemble estimates over `realizations` single-frame grids drawn with
/// seeds `cfg.seed, cfg.seed + 1, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    /// Normalized frequency correlation, one value per subcarrier lag.
    pub frequency_correlation: Vec<Complex64>,
    /// Real part of the normalized correlation between antennas 0 and 1
    /// (`None` for a single antenna).
    pub antenna_correlation: Option<f64>,
    pub mean_power: f64,
}

#[derive(Default, Clone)]
struct Sums {
    freq: Vec<Complex64>,
    counts: Vec<usize>,
    cross: Complex64,
    p0: f64,
    p1: f64,
    power: f64,
    values: usize,
}

impl Sums {
    fn merge(mut self, o: Sums) -> Sums {
        if self.freq.is_empty() {
            return o;
        }
        if !o.freq.is_empty() {
            self.freq.iter_mut().zip(&o.freq).for_each(|(a, b)| *a += b);
            self.counts.iter_mut().zip(&o.counts).for_each(|(a, b)| *a += b);
        }
        self.cross += o.cross;
        self.p0 += o.p0;
        self.p1 += o.p1;
        self.power += o.power;
        self.values += o.values;
        self
    }
}

fn realization_sums(g: &ChannelGrid) -> Sums {
    let ns = g.num_subcarriers();
    let mut s = Sums { freq: vec![Complex64::new(0.0, 0.0); ns], counts: vec![0; ns], ..Sums::default() };
    for a in 0..g.num_antennas() {
        for d in 0..ns {
            for k in 0..ns - d {
                s.freq[d] += g.get(k, 0, a) * g.get(k + d, 0, a).conj();
                s.counts[d] += 1;
            }
        }
    }
    if g.num_antennas() > 1 {
        for k in 0..ns {
            let (x, y) = (g.get(k, 0, 0), g.get(k, 0, 1));
            s.cross += x * y.conj();
            s.p0 += x.norm_sqr();
            s.p1 += y.norm_sqr();
        }
    }
    s.power = g.values().iter().map(|v| v.norm_sqr()).sum();
    s.values = g.values().len();
    s
}

pub fn ensemble_stats(cfg: &SimConfig, realizations: u64) -> Result<EnsembleStats> {
    if realizations == 0 {
        return Err(Error::config("realizations must be at least 1"));
    }
    let one = SimConfig { num_frames: 1, ..cfg.clone() };
    one.validate()?;
    // per-seed sums are combined in seed order, so the result does not
    // depend on the thread count
    let parts: Vec<Sums> = (0..realizations)
        .into_par_iter()
        .map(|i| {
            let g = generate_channel(&SimConfig { seed: one.seed.wrapping_add(i), ..one.clone() })?;
            Ok(realization_sums(&g))
        })
        .collect::<Result<_>>()?;
    let s = parts.into_iter().fold(Sums::default(), Sums::merge);
    let raw: Vec<Complex64> = s.freq.iter().zip(&s.counts).map(|(r, &c)| r / c as f64).collect();
    let r0 = raw[0].re;
    Ok(EnsembleStats {
        frequency_correlation: raw.iter().map(|r| r / r0).collect(),
        antenna_correlation: (cfg.num_antennas > 1).then(|| s.cross.re / (s.p0 * s.p1).sqrt()),
        mean_power: s.power / s.values as f64,
    })
}

/// Root-mean-square distance between two correlation curves.
pub fn rms_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    let n = a.len().min(b.len()).max(1);
    (a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>() / n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chansim::{generate_channel, SimConfig};

    #[test]
    fn lag_zero_is_one() {
        let g = generate_channel(&SimConfig {
            num_subcarriers: 12,
            num_frames: 5,
            seed: 11,
            ..SimConfig::default()
        })
        .unwrap();
        for axis in [Axis::Frequency, Axis::Time, Axis::Antenna] {
            let r = empirical_autocorrelation(&g, axis);
            assert!((r[0] - Complex64::new(1.0, 0.0)).norm() < 1e-9);
        }
    }

    #[test]
    fn unit_extent_axis() {
        let g = generate_channel(&SimConfig {
            num_subcarriers: 4,
            num_frames: 3,
            num_antennas: 1,
            ..SimConfig::default()
        })
        .unwrap();
        assert_eq!(empirical_autocorrelation(&g, Axis::Antenna), vec![Complex64::new(1.0, 0.0)]);
    }

    #[test]
    fn zero_doppler_time_axis_is_flat() {
        let g = generate_channel(&SimConfig {
            num_subcarriers: 6,
            num_frames: 10,
            user_speed: 0.0,
            ..SimConfig::default()
        })
        .unwrap();
        for r in empirical_autocorrelation(&g, Axis::Time) {
            assert!((r - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }
}
