use super::{TokenId, Vocabulary, CLS, SEP};
use crate::chansim::ChannelGrid;
use crate::error::{Error, Result};

/// Token ids with per-position domain feature ids.
///
/// Domain ids are 0 on special positions; channel positions carry
/// `freq_id = subcarrier + 1`, `time_id = slot + 1` (slot 0 is the first
/// frame of the pair) and `antenna_id = antenna + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceExample {
    pub token_ids: Vec<TokenId>,
    pub freq_ids: Vec<u32>,
    pub time_ids: Vec<u32>,
    pub antenna_ids: Vec<u32>,
    pub is_special: Vec<bool>,
}

impl SequenceExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Positions holding channel tokens, in order.
    pub fn channel_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_special[i]).collect()
    }

    /// Channel token ids in position order.
    pub fn channel_tokens(&self) -> Vec<TokenId> {
        self.channel_positions().into_iter().map(|i| self.token_ids[i]).collect()
    }
}

/// Position arithmetic for the frame-pair layout
///
/// `[CLS] (T0,A0) [SEP] (T0,A1) [SEP] ... (T1,A0) [SEP] (T1,A1) [SEP]`
///
/// where each `(T,A)` block lists subcarriers in order. Blocks are
/// time-major so the second frame is one contiguous tail span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub num_subcarriers: usize,
    pub num_antennas: usize,
    pub num_slots: usize,
}

impl SequenceLayout {
    pub fn pair(num_subcarriers: usize, num_antennas: usize) -> Self {
        Self {
            num_subcarriers,
            num_antennas,
            num_slots: 2,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.num_slots * self.num_antennas
    }

    pub fn num_channel(&self) -> usize {
        self.num_blocks() * self.num_subcarriers
    }

    pub fn len(&self) -> usize {
        self.num_channel() + self.num_blocks() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Sequence position of `(slot, antenna, subcarrier)`.
    pub fn position(&self, slot: usize, antenna: usize, subcarrier: usize) -> usize {
        1 + (slot * self.num_antennas + antenna) * (self.num_subcarriers + 1) + subcarrier
    }

    /// Channel positions of one time slot, antenna-major then subcarrier,
    /// i.e. the grid order of a frame.
    pub fn slot_positions(&self, slot: usize) -> Vec<usize> {
        (0..self.num_antennas)
            .flat_map(|a| (0..self.num_subcarriers).map(move |k| self.position(slot, a, k)))
            .collect()
    }

    /// Layout with domain ids and `CLS`/`SEP` in place; channel tokens
    /// are filled by `token(slot, antenna, subcarrier)`.
    pub fn build(&self, mut token: impl FnMut(usize, usize, usize) -> TokenId) -> SequenceExample {
        let n = self.len();
        let mut seq = SequenceExample {
            token_ids: Vec::with_capacity(n),
            freq_ids: Vec::with_capacity(n),
            time_ids: Vec::with_capacity(n),
            antenna_ids: Vec::with_capacity(n),
            is_special: Vec::with_capacity(n),
        };
        let mut push = |tok, f, t, a, special| {
            seq.token_ids.push(tok);
            seq.freq_ids.push(f);
            seq.time_ids.push(t);
            seq.antenna_ids.push(a);
            seq.is_special.push(special);
        };
        push(CLS, 0, 0, 0, true);
        for slot in 0..self.num_slots {
            for a in 0..self.num_antennas {
                for k in 0..self.num_subcarriers {
                    push(token(slot, a, k), k as u32 + 1, slot as u32 + 1, a as u32 + 1, false);
                }
                push(SEP, 0, 0, 0, true);
            }
        }
        seq
    }
}

/// A channel grid encoded once against a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    num_subcarriers: usize,
    num_frames: usize,
    num_antennas: usize,
    tokens: Vec<TokenId>,
}

impl TokenGrid {
    pub fn encode(grid: &ChannelGrid, vocab: &Vocabulary) -> Result<Self> {
        let tokens = grid
            .values()
            .iter()
            .map(|&v| vocab.encode(v))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            num_subcarriers: grid.num_subcarriers(),
            num_frames: grid.num_frames(),
            num_antennas: grid.num_antennas(),
            tokens,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_subcarriers(&self) -> usize {
        self.num_subcarriers
    }

    pub fn num_antennas(&self) -> usize {
        self.num_antennas
    }

    pub fn layout(&self) -> SequenceLayout {
        SequenceLayout::pair(self.num_subcarriers, self.num_antennas)
    }

    pub fn get(&self, subcarrier: usize, frame: usize, antenna: usize) -> TokenId {
        self.tokens[(frame * self.num_antennas + antenna) * self.num_subcarriers + subcarrier]
    }

    /// Sequence for the ordered frame pair `(first, second)`.
    pub fn sequence(&self, frames: (usize, usize)) -> Result<SequenceExample> {
        for f in [frames.0, frames.1] {
            if f >= self.num_frames {
                return Err(Error::OutOfRange(format!("frame {f} of {}", self.num_frames)));
            }
        }
        let pair = [frames.0, frames.1];
        Ok(self.layout().build(|slot, a, k| self.get(k, pair[slot], a)))
    }
}

/// Encodes the two frames of `frame_pair` and lays them out as one sequence.
pub fn assemble_sequence(
    grid: &ChannelGrid,
    frame_pair: (usize, usize),
    vocab: &Vocabulary,
) -> Result<SequenceExample> {
    for f in [frame_pair.0, frame_pair.1] {
        if f >= grid.num_frames() {
            return Err(Error::OutOfRange(format!("frame {f} of {}", grid.num_frames())));
        }
    }
    let layout = SequenceLayout::pair(grid.num_subcarriers(), grid.num_antennas());
    let pair = [frame_pair.0, frame_pair.1];
    let mut failure = None;
    let seq = layout.build(|slot, a, k| match vocab.encode(grid.get(k, pair[slot], a)) {
        Ok(id) => id,
        Err(e) => {
            failure.get_or_insert(e);
            0
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(seq),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chansim::{generate_channel, SimConfig};
    use crate::tokenizer::{build_vocabulary, is_special};
    use proptest::prelude::*;

    fn setup(ns: usize, na: usize) -> (ChannelGrid, Vocabulary) {
        let g = generate_channel(&SimConfig {
            num_subcarriers: ns,
            num_frames: 12,
            num_antennas: na,
            user_speed: 30.0,
            seed: 17,
            ..SimConfig::default()
        })
        .unwrap();
        let v = build_vocabulary(std::slice::from_ref(&g), 4000).unwrap();
        (g, v)
    }

    #[test]
    fn full_size_length() {
        assert_eq!(SequenceLayout::pair(200, 2).len(), 805);
        assert_eq!(SequenceLayout::pair(200, 2).num_channel(), 800);
        assert_eq!(SequenceLayout::pair(2, 2).len(), 13);
        assert_eq!(SequenceLayout::pair(16, 2).len(), 69);
    }

    #[test]
    fn layout_invariants() {
        let (g, v) = setup(2, 2);
        let s = assemble_sequence(&g, (0, 1), &v).unwrap();
        assert_eq!(s.len(), 13);
        assert_eq!(s.token_ids[0], CLS);
        for i in 0..s.len() {
            if s.is_special[i] {
                assert!(is_special(s.token_ids[i]));
                assert_eq!((s.freq_ids[i], s.time_ids[i], s.antenna_ids[i]), (0, 0, 0));
            } else {
                assert!(s.freq_ids[i] >= 1 && s.time_ids[i] >= 1 && s.antenna_ids[i] >= 1);
            }
        }
        let specials: Vec<usize> = (0..13).filter(|&i| s.is_special[i]).collect();
        assert_eq!(specials, vec![0, 3, 6, 9, 12]);
        // block order: (T0,A0) (T0,A1) (T1,A0) (T1,A1)
        assert_eq!(&s.time_ids[1..12], &[1, 1, 0, 1, 1, 0, 2, 2, 0, 2, 2]);
        assert_eq!(&s.antenna_ids[1..12], &[1, 1, 0, 2, 2, 0, 1, 1, 0, 2, 2]);
        assert_eq!(s.token_ids[7], v.encode(g.get(0, 1, 0)).unwrap());
        let layout = SequenceLayout::pair(2, 2);
        assert_eq!(layout.slot_positions(1), vec![7, 8, 10, 11]);
    }

    #[test]
    fn token_grid_matches_direct_assembly() {
        let (g, v) = setup(5, 3);
        let tg = TokenGrid::encode(&g, &v).unwrap();
        for pair in [(0, 1), (4, 9), (11, 0)] {
            assert_eq!(tg.sequence(pair).unwrap(), assemble_sequence(&g, pair, &v).unwrap());
        }
        assert!(tg.sequence((0, 12)).is_err());
        assert!(assemble_sequence(&g, (12, 0), &v).is_err());
    }

    #[test]
    fn single_antenna_degrades() {
        let (g, v) = setup(4, 1);
        let s = assemble_sequence(&g, (0, 1), &v).unwrap();
        assert_eq!(s.len(), 4 * 2 + 3);
    }

    proptest! {
        #[test]
        fn distinct_pairs_distinct_sequences(a in 0usize..12, b in 0usize..12, c in 0usize..12, d in 0usize..12) {
            prop_assume!((a, b) != (c, d));
            let (g, v) = shared();
            let s1 = assemble_sequence(g, (a, b), v).unwrap();
            let s2 = assemble_sequence(g, (c, d), v).unwrap();
            prop_assert_ne!(s1.token_ids, s2.token_ids);
        }

        #[test]
        fn reassembly_preserves_multiset(a in 0usize..12, b in 0usize..12) {
            let (g, v) = shared();
            let mut x = assemble_sequence(g, (a, b), v).unwrap().channel_tokens();
            let mut y = TokenGrid::encode(g, v).unwrap().sequence((a, b)).unwrap().channel_tokens();
            x.sort_unstable();
            y.sort_unstable();
            prop_assert_eq!(x, y);
        }
    }

    fn shared() -> &'static (ChannelGrid, Vocabulary) {
        static S: std::sync::OnceLock<(ChannelGrid, Vocabulary)> = std::sync::OnceLock::new();
        S.get_or_init(|| setup(16, 2))
    }
}
