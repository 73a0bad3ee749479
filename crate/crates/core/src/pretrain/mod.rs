//! Self-supervised pretraining: masked channel prediction plus next time
//! frame prediction.

mod loss;
mod optim;
mod trainer;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{SequenceExample, TokenGrid, TokenId, MASK, NUM_SPECIAL};

pub use loss::{batch_loss, evaluate, EvalMetrics, LossReport};
pub use optim::{lr_schedule, Adam, AdamState};
pub use trainer::{pretrain, write_metrics_line, PretrainOutput, StepMetrics, Trainer, METRICS_HEADER};

/// Fractions of selected positions replaced by `[MASK]`, by a random
/// channel token, or kept unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSplit {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for MaskSplit {
    fn default() -> Self {
        Self {
            mask: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub mask_rate: f64,
    pub mask_split: MaskSplit,
    pub nfp_negative_rate: f64,
    /// Minimum frame distance of a negative second frame.
    pub negative_min_gap: usize,
    pub learning_rate_peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub epochs: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            mask_rate: 0.15,
            mask_split: MaskSplit::default(),
            nfp_negative_rate: 0.5,
            negative_min_gap: 10,
            learning_rate_peak: 5e-5,
            warmup_steps: 0,
            total_steps: 0,
            epochs: 3,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.mask_split;
        if [s.mask, s.random, s.keep].iter().any(|&f| !(0.0..=1.0).contains(&f))
            || (s.mask + s.random + s.keep - 1.0).abs() > 1e-9
        {
            return Err(Error::config("mask_split must be three fractions summing to 1"));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return Err(Error::config("mask_rate must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.nfp_negative_rate) {
            return Err(Error::config("nfp_negative_rate must lie in [0, 1]"));
        }
        if self.negative_min_gap < 2 {
            return Err(Error::config("negative_min_gap must be at least 2"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config("warmup_steps exceeds total_steps"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate_peak.is_finite() && self.learning_rate_peak >= 0.0) {
            return Err(Error::config("learning_rate_peak must be finite and non-negative"));
        }
        Ok(())
    }

    /// Sets `total_steps` to `epochs` passes over `num_examples` anchors and
    /// the warm-up to `warmup_fraction` of that.
    pub fn with_schedule_for(mut self, num_examples: usize, warmup_fraction: f64) -> Self {
        let per_epoch = num_examples.div_ceil(self.batch_size);
        self.total_steps = self.epochs * per_epoch;
        self.warmup_steps = ((self.total_steps as f64) * warmup_fraction).round() as usize;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NfpLabel {
    NotConsecutive = 0,
    Consecutive = 1,
}

impl NfpLabel {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub input: SequenceExample,
    /// `(position, original token)` for every selected position.
    pub mlm_labels: Vec<(usize, TokenId)>,
    pub nfp_label: NfpLabel,
}

/// Selects each channel position with probability `mask_rate` and corrupts
/// it per `mask_split`. Specials are never selected.
pub fn make_mlm_example<R: Rng>(
    seq: &SequenceExample,
    vocab_size: usize,
    config: &PretrainConfig,
    rng: &mut R,
) -> (SequenceExample, Vec<(usize, TokenId)>) {
    let mut out = seq.clone();
    let mut labels = Vec::new();
    for i in 0..seq.len() {
        if seq.is_special[i] {
            continue;
        }
        if rng.gen::<f64>() >= config.mask_rate {
            continue;
        }
        labels.push((i, seq.token_ids[i]));
        let r: f64 = rng.gen();
        let split = config.mask_split;
        if r < split.mask {
            out.token_ids[i] = MASK;
        } else if r < split.mask + split.random && vocab_size > NUM_SPECIAL {
            out.token_ids[i] = rng.gen_range(NUM_SPECIAL as TokenId..vocab_size as TokenId);
        }
    }
    (out, labels)
}

/// Pairs frame `t0` with `t0 + 1` (consecutive) or, with probability
/// `nfp_negative_rate`, with a uniformly drawn frame at least
/// `negative_min_gap` frames away.
pub fn make_nfp_pair<R: Rng>(
    grid: &TokenGrid,
    t0: usize,
    config: &PretrainConfig,
    rng: &mut R,
) -> Result<(SequenceExample, NfpLabel)> {
    let frames = grid.num_frames();
    if t0 + 1 >= frames {
        return Err(Error::OutOfRange(format!("frame {t0} has no successor in {frames} frames")));
    }
    let gap = config.negative_min_gap;
    let before = (t0 + 1).saturating_sub(gap);
    let after = frames.saturating_sub(t0 + gap);
    let candidates = before + after;
    let negative = rng.gen::<f64>() < config.nfp_negative_rate;
    if !negative {
        return Ok((grid.sequence((t0, t0 + 1))?, NfpLabel::Consecutive));
    }
    if candidates == 0 {
        return Err(Error::config(format!(
            "grid of {frames} frames has no frame {gap} away from {t0}"
        )));
    }
    let pick = rng.gen_range(0..candidates);
    let second = if pick < before { pick } else { t0 + gap + (pick - before) };
    Ok((grid.sequence((t0, second))?, NfpLabel::NotConsecutive))
}

/// Builds a full pretraining example anchored at frame `t0`.
pub fn make_training_example<R: Rng>(
    grid: &TokenGrid,
    t0: usize,
    vocab_size: usize,
    config: &PretrainConfig,
    rng: &mut R,
) -> Result<TrainingExample> {
    let (seq, nfp_label) = make_nfp_pair(grid, t0, config, rng)?;
    let (input, mlm_labels) = make_mlm_example(&seq, vocab_size, config, rng);
    Ok(TrainingExample {
        input,
        mlm_labels,
        nfp_label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chansim::{generate_channel, SimConfig};
    use crate::rng::{keyed, Stream};
    use crate::tokenizer::{build_vocabulary, SequenceLayout, CLS, SEP};

    fn grid(frames: usize) -> TokenGrid {
        let g = generate_channel(&SimConfig {
            num_subcarriers: 16,
            num_frames: frames,
            user_speed: 20.0,
            seed: 21,
            ..SimConfig::default()
        })
        .unwrap();
        let v = build_vocabulary(std::slice::from_ref(&g), 512).unwrap();
        TokenGrid::encode(&g, &v).unwrap()
    }

    #[test]
    fn config_checks() {
        PretrainConfig::default().validate().unwrap();
        let bad_split = PretrainConfig {
            mask_split: MaskSplit { mask: 0.5, random: 0.1, keep: 0.1 },
            ..Default::default()
        };
        assert!(bad_split.validate().is_err());
        assert!(PretrainConfig { mask_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(PretrainConfig { warmup_steps: 5, total_steps: 4, ..Default::default() }.validate().is_err());
        let c = PretrainConfig::default().with_schedule_for(2000, 0.1);
        assert_eq!(c.total_steps, 3 * 167);
        assert_eq!(c.warmup_steps, 50);
    }

    #[test]
    fn full_masking_hits_every_channel_token() {
        let seq = SequenceLayout::pair(4, 2).build(|_, _, k| 5 + k as u32);
        let cfg = PretrainConfig {
            mask_rate: 1.0,
            mask_split: MaskSplit { mask: 1.0, random: 0.0, keep: 0.0 },
            ..Default::default()
        };
        let (out, labels) = make_mlm_example(&seq, 32, &cfg, &mut keyed(1, Stream::Example, 0, 0));
        assert_eq!(labels.len(), 16);
        for i in 0..out.len() {
            if seq.is_special[i] {
                assert_eq!(out.token_ids[i], seq.token_ids[i]);
                assert!(out.token_ids[i] == CLS || out.token_ids[i] == SEP);
            } else {
                assert_eq!(out.token_ids[i], MASK);
            }
        }
    }

    #[test]
    fn masking_rate_and_determinism() {
        let seq = SequenceLayout::pair(200, 2).build(|_, _, k| 5 + (k % 20) as u32);
        let cfg = PretrainConfig::default();
        let mut total = 0usize;
        let trials = 400;
        for t in 0..trials {
            let (_, labels) = make_mlm_example(&seq, 512, &cfg, &mut keyed(3, Stream::Example, t, 0));
            total += labels.len();
        }
        let mean = total as f64 / trials as f64;
        // binomial(800, 0.15): mean 120, sd of the mean ~ 0.5
        assert!((mean - 120.0).abs() < 2.5, "mean labeled {mean}");

        let a = make_mlm_example(&seq, 512, &cfg, &mut keyed(3, Stream::Example, 9, 0));
        let b = make_mlm_example(&seq, 512, &cfg, &mut keyed(3, Stream::Example, 9, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn labels_only_on_channel_positions() {
        let seq = SequenceLayout::pair(16, 2).build(|_, _, k| 5 + k as u32);
        let cfg = PretrainConfig { mask_rate: 0.5, ..Default::default() };
        for t in 0..50 {
            let (_, labels) = make_mlm_example(&seq, 64, &cfg, &mut keyed(4, Stream::Example, t, 0));
            assert!(labels.iter().all(|&(p, _)| !seq.is_special[p]));
        }
    }

    #[test]
    fn nfp_all_positive_when_rate_zero() {
        let g = grid(40);
        let cfg = PretrainConfig { nfp_negative_rate: 0.0, ..Default::default() };
        for t in 0..39 {
            let (seq, label) = make_nfp_pair(&g, t, &cfg, &mut keyed(5, Stream::Example, t as u64, 0)).unwrap();
            assert_eq!(label, NfpLabel::Consecutive);
            assert_eq!(seq, g.sequence((t, t + 1)).unwrap());
        }
    }

    #[test]
    fn nfp_negative_fraction_and_gap() {
        let g = grid(60);
        let cfg = PretrainConfig::default();
        let mut negatives = 0;
        let draws = 10_000;
        let layout = g.layout();
        for i in 0..draws {
            let t0 = i % 59;
            let (seq, label) = make_nfp_pair(&g, t0, &cfg, &mut keyed(6, Stream::Example, i as u64, 0)).unwrap();
            if label == NfpLabel::NotConsecutive {
                negatives += 1;
                // find which frame the second half came from
                let second: Vec<u32> = layout.slot_positions(1).iter().map(|&p| seq.token_ids[p]).collect();
                let matches: Vec<usize> = (0..60)
                    .filter(|&f| {
                        let s = g.sequence((t0, f)).unwrap();
                        layout.slot_positions(1).iter().map(|&p| s.token_ids[p]).collect::<Vec<_>>() == second
                    })
                    .collect();
                assert!(matches.iter().any(|&f| f.abs_diff(t0) >= 10));
                assert!(!matches.contains(&(t0 + 1)));
            }
        }
        let frac = negatives as f64 / draws as f64;
        assert!((frac - 0.5).abs() < 0.02, "negative fraction {frac}");
    }

    #[test]
    fn nfp_errors_on_short_grid() {
        let g = grid(8);
        let cfg = PretrainConfig { nfp_negative_rate: 1.0, ..Default::default() };
        assert!(make_nfp_pair(&g, 3, &cfg, &mut keyed(1, Stream::Example, 0, 0)).is_err());
        assert!(make_nfp_pair(&g, 7, &cfg, &mut keyed(1, Stream::Example, 0, 0)).is_err());
    }
}
