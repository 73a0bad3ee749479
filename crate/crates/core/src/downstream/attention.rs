use std::io::Write;

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tokenizer::SequenceExample;

pub const DEFAULT_FREQ_RADIUS: u32 = 5;

/// Where one head sends the attention of channel positions, averaged over
/// those positions. The four fractions partition the mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadProfile {
    pub layer: usize,
    pub head: usize,
    /// Same frame and antenna, within the subcarrier radius (self included).
    pub freq_local: f64,
    /// Other frame, same antenna.
    pub cross_time: f64,
    /// Same frame, other antenna.
    pub cross_antenna: f64,
    /// Special tokens plus everything not covered above.
    pub special: f64,
}

impl HeadProfile {
    pub fn fractions(&self) -> [f64; 4] {
        [self.freq_local, self.cross_time, self.cross_antenna, self.special]
    }
}

fn bucket(seq: &SequenceExample, q: usize, k: usize, radius: u32) -> usize {
    if seq.is_special[k] {
        return 3;
    }
    let same_t = seq.time_ids[q] == seq.time_ids[k];
    let same_a = seq.antenna_ids[q] == seq.antenna_ids[k];
    match (same_t, same_a) {
        (true, true) if seq.freq_ids[q].abs_diff(seq.freq_ids[k]) <= radius => 0,
        (false, true) => 1,
        (true, false) => 2,
        _ => 3,
    }
}

/// Per-head attention accounting over one sequence.
pub fn attention_domain_profile(model: &Model, seq: &SequenceExample, radius: u32) -> Result<Vec<HeadProfile>> {
    let queries = seq.channel_positions();
    if queries.is_empty() {
        return Err(Error::config("sequence has no channel positions"));
    }
    let n = seq.len();
    let buckets: Vec<Vec<usize>> = queries
        .iter()
        .map(|&q| (0..n).map(|k| bucket(seq, q, k, radius)).collect())
        .collect();
    let trace = model.forward(seq)?;
    let mut out = Vec::new();
    for (l, layer) in trace.layers.iter().enumerate() {
        for (h, att) in layer.attention.iter().enumerate() {
            let mut acc = [0.0; 4];
            for (qi, &q) in queries.iter().enumerate() {
                for (k, &w) in att.row(q).iter().enumerate() {
                    acc[buckets[qi][k]] += w;
                }
            }
            let total: f64 = acc.iter().sum();
            let f = acc.map(|a| a / total);
            out.push(HeadProfile {
                layer: l,
                head: h,
                freq_local: f[0],
                cross_time: f[1],
                cross_antenna: f[2],
                special: f[3],
            });
        }
    }
    Ok(out)
}

/// Profile a head would get if it attended uniformly: each bucket's share
/// of key positions, averaged over channel queries.
pub fn uniform_bucket_shares(seq: &SequenceExample, radius: u32) -> Result<[f64; 4]> {
    let queries = seq.channel_positions();
    if queries.is_empty() {
        return Err(Error::config("sequence has no channel positions"));
    }
    let n = seq.len();
    let mut acc = [0.0; 4];
    for &q in &queries {
        for k in 0..n {
            acc[bucket(seq, q, k, radius)] += 1.0;
        }
    }
    let total = (queries.len() * n) as f64;
    Ok(acc.map(|a| a / total))
}

/// Largest `|sum of row - 1|` over every attention row of every head.
pub fn max_attention_row_error(model: &Model, seq: &SequenceExample) -> Result<f64> {
    let trace = model.forward(seq)?;
    let mut worst = 0.0f64;
    for layer in &trace.layers {
        for att in &layer.attention {
            for r in 0..att.rows() {
                worst = worst.max((att.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    Ok(worst)
}

/// Zeroes every query and key projection so each head attends uniformly.
pub fn make_attention_uniform(model: &mut Model) {
    for l in &mut model.params.layers {
        l.query_w.fill(0.0);
        l.key_w.fill(0.0);
        l.query_b.fill(0.0);
        l.key_b.fill(0.0);
    }
}

pub fn write_attention_profile<W: Write>(w: &mut W, profile: &[HeadProfile]) -> Result<()> {
    writeln!(w, "layer\thead\tfreq_local\tcross_time\tcross_antenna\tspecial")?;
    for p in profile {
        writeln!(w, "{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}", p.layer, p.head, p.freq_local, p.cross_time, p.cross_antenna, p.special)?;
    }
    Ok(())
}
