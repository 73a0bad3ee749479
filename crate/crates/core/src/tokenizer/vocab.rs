use std::collections::HashMap;
use std::io::{BufRead, Write};

use num_complex::Complex64;

use super::{quantize, TokenId, NUM_SPECIAL};
use crate::chansim::ChannelGrid;
use crate::error::{Error, Result};

const HEADER: &str = "RCMV 1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VocabEntry {
    pub centroid: Complex64,
    pub count: u64,
}

fn key(v: Complex64) -> (u64, u64) {
    (v.re.to_bits(), v.im.to_bits())
}

/// Bidirectional map between quantized channel values and token ids.
///
/// Ids `0..5` are the special tokens; channel entry `i` has id `5 + i`.
/// Entries are ordered by descending count, then ascending `(re, im)`.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
    index: HashMap<(u64, u64), TokenId>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                key(a.centroid) == key(b.centroid) && a.count == b.count
            })
    }
}

impl Vocabulary {
    pub fn from_entries(entries: Vec<VocabEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(key(e.centroid), (NUM_SPECIAL + i) as TokenId).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate centroid {}", e.centroid)));
            }
        }
        Ok(Self { entries, index })
    }

    /// Total size including the special tokens.
    pub fn size(&self) -> usize {
        NUM_SPECIAL + self.entries.len()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn num_channel_entries(&self) -> usize {
        self.entries.len()
    }

    /// Ids of all channel entries.
    pub fn channel_ids(&self) -> std::ops::Range<TokenId> {
        NUM_SPECIAL as TokenId..self.size() as TokenId
    }

    /// Exact lookup of an already quantized value.
    pub fn lookup(&self, quantized: Complex64) -> Option<TokenId> {
        self.index.get(&key(quantized)).copied()
    }

    /// Nearest channel entry in the complex plane; ties go to the lower id.
    pub fn nearest(&self, value: Complex64) -> Result<TokenId> {
        let mut best: Option<(f64, usize)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let d = (e.centroid - value).norm_sqr();
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        best.map(|(_, i)| (NUM_SPECIAL + i) as TokenId)
            .ok_or(Error::EmptyVocabulary)
    }

    /// Quantizes and looks up `value`, falling back to the nearest entry.
    /// Never returns a special id.
    pub fn encode(&self, value: Complex64) -> Result<TokenId> {
        if self.entries.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        let q = quantize(value)?;
        match self.lookup(q) {
            Some(id) => Ok(id),
            None => self.nearest(q),
        }
    }

    pub fn decode(&self, id: TokenId) -> Result<Complex64> {
        if (id as usize) < NUM_SPECIAL {
            return Err(Error::SpecialToken(id));
        }
        self.entries
            .get(id as usize - NUM_SPECIAL)
            .map(|e| e.centroid)
            .ok_or_else(|| Error::OutOfRange(format!("token {id} >= vocabulary size {}", self.size())))
    }

    /// Writes the line-oriented vocabulary file.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{HEADER} V={}", self.size())?;
        for (i, e) in self.entries.iter().enumerate() {
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                NUM_SPECIAL + i,
                e.centroid.re,
                e.centroid.im,
                e.count
            )?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("vocabulary", "empty file"))??;
        let size: usize = header
            .strip_prefix(HEADER)
            .and_then(|rest| rest.trim().strip_prefix("V="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format("vocabulary", format!("bad header {header:?}")))?;
        let mut entries = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = || Error::format("vocabulary", format!("line {}: {line:?}", lineno + 2));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad());
            }
            let id: usize = fields[0].parse().map_err(|_| bad())?;
            if id != NUM_SPECIAL + entries.len() {
                return Err(Error::format("vocabulary", format!("non-contiguous id {id}")));
            }
            let re: f64 = fields[1].parse().map_err(|_| bad())?;
            let im: f64 = fields[2].parse().map_err(|_| bad())?;
            let count: u64 = fields[3].parse().map_err(|_| bad())?;
            entries.push(VocabEntry {
                centroid: Complex64::new(re, im),
                count,
            });
        }
        if NUM_SPECIAL + entries.len() != size {
            return Err(Error::format(
                "vocabulary",
                format!("header says V={size}, found {} entries", NUM_SPECIAL + entries.len()),
            ));
        }
        Self::from_entries(entries)
    }
}

/// Counts quantized values over `grids` and keeps the `v - 5` most frequent.
/// A corpus with fewer distinct values yields a smaller vocabulary.
pub fn build_vocabulary(grids: &[ChannelGrid], v: usize) -> Result<Vocabulary> {
    if v <= NUM_SPECIAL {
        return Err(Error::config(format!("vocabulary size must exceed {NUM_SPECIAL}, got {v}")));
    }
    if grids.is_empty() {
        return Err(Error::config("no grids to build a vocabulary from"));
    }
    let mut counts: HashMap<(u64, u64), u64> = HashMap::new();
    for grid in grids {
        for &value in grid.values() {
            *counts.entry(key(quantize(value)?)).or_default() += 1;
        }
    }
    let mut entries: Vec<VocabEntry> = counts
        .into_iter()
        .map(|((re, im), count)| VocabEntry {
            centroid: Complex64::new(f64::from_bits(re), f64::from_bits(im)),
            count,
        })
        .collect();
    entries.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(a.centroid.re.total_cmp(&b.centroid.re))
            .then(a.centroid.im.total_cmp(&b.centroid.im))
    });
    entries.truncate(v - NUM_SPECIAL);
    Vocabulary::from_entries(entries)
}
