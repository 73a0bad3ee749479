//! Feature-map table recording what each domain feature id means
//! physically. A transferred model is only usable together with it.

use std::io::{BufRead, Write};

use crate::chansim::GridMeta;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// Subcarrier center frequency offset in Hz, indexed by `freq_id - 1`.
    pub freq: Vec<f64>,
    /// Time offset in seconds from the first frame of the pair, by `time_id - 1`.
    pub time: Vec<f64>,
    /// Antenna labels, by `antenna_id - 1`.
    pub antenna: Vec<String>,
}

impl FeatureMap {
    /// Feature map for frame-pair sequences cut from grids shaped like `meta`.
    pub fn for_grid(meta: &GridMeta) -> Self {
        Self {
            freq: (0..meta.num_subcarriers)
                .map(|k| k as f64 * meta.subcarrier_spacing)
                .collect(),
            time: (0..2).map(|t| t as f64 * meta.frame_interval).collect(),
            antenna: (0..meta.num_antennas).map(|a| format!("A{a}")).collect(),
        }
    }

    /// Checks that `other` assigns the same set of ids in every domain.
    pub fn check_compatible(&self, other: &FeatureMap) -> Result<()> {
        let dims = |m: &FeatureMap| (m.freq.len(), m.time.len(), m.antenna.len());
        if dims(self) != dims(other) {
            return Err(Error::FeatureMapMismatch(format!(
                "source (freq, time, antenna) ids {:?} vs target {:?}",
                dims(self),
                dims(other)
            )));
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, f) in self.freq.iter().enumerate() {
            writeln!(w, "freq\t{}\t{f}", i + 1)?;
        }
        for (i, t) in self.time.iter().enumerate() {
            writeln!(w, "time\t{}\t{t}", i + 1)?;
        }
        for (i, a) in self.antenna.iter().enumerate() {
            writeln!(w, "antenna\t{}\t{a}", i + 1)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut map = FeatureMap {
            freq: Vec::new(),
            time: Vec::new(),
            antenna: Vec::new(),
        };
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |why: &str| Error::format("feature map", format!("line {}: {why}", lineno + 1));
            let mut fields = line.splitn(3, '\t');
            let (domain, id, meaning) = match (fields.next(), fields.next(), fields.next()) {
                (Some(d), Some(i), Some(m)) => (d, i, m),
                _ => return Err(bad("expected domain<TAB>id<TAB>meaning")),
            };
            let id: usize = id.parse().map_err(|_| bad("bad id"))?;
            let expected = 1 + match domain {
                "freq" => map.freq.len(),
                "time" => map.time.len(),
                "antenna" => map.antenna.len(),
                _ => return Err(bad("unknown domain")),
            };
            if id != expected {
                return Err(bad("ids must be contiguous from 1"));
            }
            match domain {
                "freq" => map.freq.push(meaning.parse().map_err(|_| bad("bad frequency"))?),
                "time" => map.time.push(meaning.parse().map_err(|_| bad("bad time"))?),
                _ => map.antenna.push(meaning.to_string()),
            }
        }
        Ok(map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chansim::SimConfig;

    #[test]
    fn round_trip_and_compat() {
        let meta = SimConfig { num_subcarriers: 16, ..SimConfig::default() }.meta();
        let m = FeatureMap::for_grid(&meta);
        assert_eq!(m.freq.len(), 16);
        assert_eq!(m.time, vec![0.0, 1e-3]);
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("freq\t1\t0\nfreq\t2\t90000\n"));
        let back = FeatureMap::read(&buf[..]).unwrap();
        assert_eq!(back, m);
        m.check_compatible(&back).unwrap();

        let other = FeatureMap::for_grid(&SimConfig { num_subcarriers: 8, ..SimConfig::default() }.meta());
        assert!(matches!(m.check_compatible(&other), Err(Error::FeatureMapMismatch(_))));
    }

    #[test]
    fn rejects_malformed() {
        assert!(FeatureMap::read(&b"freq\t2\t0\n"[..]).is_err());
        assert!(FeatureMap::read(&b"space\t1\t0\n"[..]).is_err());
        assert!(FeatureMap::read(&b"freq 1 0\n"[..]).is_err());
    }
}
