//! `CFRD` dataset files: little-endian header followed by `(re, im)` f32
//! pairs, subcarrier-fastest, antenna-middle, frame-slowest.

use std::io::{Read, Write};

use num_complex::Complex64;

use super::{ChannelGrid, GridMeta};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"CFRD";
pub const DATASET_VERSION: u32 = 1;

pub fn write_dataset<W: Write>(grid: &ChannelGrid, mut w: W) -> Result<()> {
    let m = grid.meta();
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    for d in [m.num_subcarriers, m.num_frames, m.num_antennas] {
        let d = u32::try_from(d).map_err(|_| Error::config("grid dimension exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&m.frame_interval.to_le_bytes())?;
    w.write_all(&m.subcarrier_spacing.to_le_bytes())?;
    let mut buf = Vec::with_capacity(grid.values().len() * 8);
    for v in grid.values() {
        buf.extend_from_slice(&(v.re as f32).to_le_bytes());
        buf.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("dataset", format!("truncated header: {e}")))?;
    Ok(b)
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<ChannelGrid> {
    let magic: [u8; 4] = read_array(&mut r)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::format("dataset", "bad magic"));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != DATASET_VERSION {
        return Err(Error::format("dataset", format!("unsupported version {version}")));
    }
    let mut dim = || -> Result<usize> { Ok(u32::from_le_bytes(read_array(&mut r)?) as usize) };
    let (ns, nf, na) = (dim()?, dim()?, dim()?);
    let frame_interval = f64::from_le_bytes(read_array(&mut r)?);
    let subcarrier_spacing = f64::from_le_bytes(read_array(&mut r)?);
    let meta = GridMeta {
        num_subcarriers: ns,
        num_frames: nf,
        num_antennas: na,
        frame_interval,
        subcarrier_spacing,
    };
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != meta.len() * 8 {
        return Err(Error::format(
            "dataset",
            format!("expected {} value bytes, found {}", meta.len() * 8, body.len()),
        ));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    ChannelGrid::new(meta, values).map_err(|e| Error::format("dataset", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chansim::{generate_channel, SimConfig};

    #[test]
    fn header_layout() {
        let g = generate_channel(&SimConfig {
            num_subcarriers: 3,
            num_frames: 2,
            num_antennas: 2,
            ..SimConfig::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_dataset(&g, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"CFRD");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(buf[20..28].try_into().unwrap()), 1e-3);
        assert_eq!(buf.len(), 36 + 12 * 8);
        // second value on disk is subcarrier 1, antenna 0, frame 0
        let re = f32::from_le_bytes(buf[44..48].try_into().unwrap());
        assert_eq!(re, g.get(1, 0, 0).re as f32);

        let back = read_dataset(&buf[..]).unwrap();
        assert_eq!(back.meta(), g.meta());
        for (a, b) in back.values().iter().zip(g.values()) {
            assert_eq!(a.re, b.re as f32 as f64);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_dataset(&b"XXXX"[..]), Err(Error::Format { .. })));
        assert!(matches!(read_dataset(&b"CF"[..]), Err(Error::Format { .. })));
        let mut buf = Vec::new();
        buf.extend_from_slice(b"CFRD");
        buf.extend_from_slice(&1u32.to_le_bytes());
        for d in [2u32, 1, 1] {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        buf.extend_from_slice(&1e-3f64.to_le_bytes());
        buf.extend_from_slice(&1.0f64.to_le_bytes());
        buf.extend_from_slice(&[0u8; 8]);
        assert!(matches!(read_dataset(&buf[..]), Err(Error::Format { .. })));
    }
}
