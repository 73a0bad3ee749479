//! Applications of a pretrained model: contamination detection and
//! repair, [CLS] compression, fingerprints with t-SNE charts, attention
//! accounting, and classifier fine-tuning.

mod attention;
mod finetune;
mod tsne;

use num_complex::Complex64;
use num_rational::Ratio;

use crate::comprehend::masked_reconstruct;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tokenizer::{SequenceExample, Vocabulary};

pub use attention::{
    attention_domain_profile, make_attention_uniform, max_attention_row_error, uniform_bucket_shares, write_attention_profile,
    HeadProfile, DEFAULT_FREQ_RADIUS,
};
pub use finetune::{fine_tune_classifier, FineTuneConfig, FineTuned};
pub use tsne::{chart_points, tsne, write_chart, ChartPoint, TsneConfig, TsneResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Consecutive,
    Anomalous,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub decision: Decision,
    /// `logit[not] - logit[consecutive]`; larger means more surely anomalous.
    pub margin: f64,
}

/// Flags the second frame of a pair as anomalous when the margin exceeds
/// `threshold`.
pub fn detect_contamination_at(model: &Model, seq: &SequenceExample, threshold: f64) -> Result<Detection> {
    let trace = model.forward(seq)?;
    let logits = model.nfp_logits(&trace)?;
    let margin = logits[0] - logits[1];
    let decision = if margin > threshold { Decision::Anomalous } else { Decision::Consecutive };
    Ok(Detection { decision, margin })
}

/// Argmax decision of the next-frame head.
pub fn detect_contamination(model: &Model, seq: &SequenceExample) -> Result<Detection> {
    detect_contamination_at(model, seq, 0.0)
}

/// Channel positions of the second time frame, in grid order
/// (antenna-major, then subcarrier).
pub fn second_frame_positions(seq: &SequenceExample) -> Vec<usize> {
    (0..seq.len()).filter(|&i| !seq.is_special[i] && seq.time_ids[i] == 2).collect()
}

/// Masks every channel token of the second frame and returns the model's
/// reconstruction, `Ns x Na` values in grid order.
pub fn mitigate_contamination(model: &Model, vocab: &Vocabulary, seq: &SequenceExample) -> Result<Vec<Complex64>> {
    let positions = second_frame_positions(seq);
    if positions.is_empty() {
        return Err(Error::config("sequence has no second time frame"));
    }
    Ok(masked_reconstruct(model, vocab, seq, &positions)?
        .into_iter()
        .map(|r| r.value)
        .collect())
}

/// Pooled `[CLS]` vectors of a batch combined by their mean.
pub fn compress(model: &Model, batch: &[SequenceExample]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::config("cannot compress an empty batch"));
    }
    let mut acc = vec![0.0; model.config.hidden_size];
    for seq in batch {
        let t = model.forward(seq)?;
        acc.iter_mut().zip(&t.pooled).for_each(|(a, p)| *a += p);
    }
    let n = batch.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressionDims {
    pub subcarriers: u64,
    pub frames: u64,
    pub antennas: u64,
    /// 2 for complex values.
    pub components: u64,
    pub batch: u64,
    pub hidden: u64,
}

/// Raw real numbers per batch over the representation length, exactly.
pub fn compression_ratio(d: CompressionDims) -> Result<Ratio<u64>> {
    let all = [d.subcarriers, d.frames, d.antennas, d.components, d.batch, d.hidden];
    if all.contains(&0) {
        return Err(Error::config("compression dimensions must be positive"));
    }
    let num = all[..5]
        .iter()
        .try_fold(1u64, |a, &b| a.checked_mul(b))
        .ok_or_else(|| Error::config("compression dimensions overflow"))?;
    Ok(Ratio::new(num, d.hidden))
}

pub const FINGERPRINT_WINDOW: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub vector: Vec<f64>,
    /// `(first sequence index, count)`.
    pub window: (usize, usize),
}

/// Mean pooled `[CLS]` vector of exactly `count` consecutive sequences
/// starting at sequence index `start`.
pub fn fingerprint(model: &Model, seqs: &[SequenceExample], start: usize, count: usize) -> Result<Fingerprint> {
    if seqs.len() != count || count == 0 {
        return Err(Error::config(format!("fingerprint needs exactly {count} sequences, got {}", seqs.len())));
    }
    let vector = compress(model, seqs)?;
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fingerprint".into()));
    }
    Ok(Fingerprint { vector, window: (start, count) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use crate::tokenizer::{SequenceLayout, NUM_SPECIAL};

    fn model() -> Model {
        Model::init(
            ModelConfig {
                num_layers: 1,
                hidden_size: 8,
                num_heads: 2,
                ffn_size: 16,
                vocab_size: 20,
                max_freq_features: 3,
                max_time_features: 2,
                max_antenna_features: 2,
                max_seq_len: 17,
                dropout_rate: 0.0,
                tie_mlm_weights: false,
            },
            4,
        )
        .unwrap()
    }

    fn seq(shift: u32) -> SequenceExample {
        SequenceLayout::pair(3, 2).build(|s, a, k| 5 + (shift + (s * 6 + a * 3 + k) as u32) % 15)
    }

    #[test]
    fn ratio_examples() {
        let r = |s, t, a, c, b, h| compression_ratio(CompressionDims { subcarriers: s, frames: t, antennas: a, components: c, batch: b, hidden: h }).unwrap();
        assert_eq!(r(200, 2, 2, 2, 12, 768), Ratio::from_integer(25));
        assert_eq!(r(8, 2, 2, 2, 1, 64), Ratio::from_integer(1));
        assert_eq!(r(3, 1, 1, 2, 1, 4), Ratio::new(3, 2));
        assert!(compression_ratio(CompressionDims { subcarriers: 0, frames: 1, antennas: 1, components: 2, batch: 1, hidden: 1 }).is_err());
    }

    #[test]
    fn decision_matches_margin_sign() {
        let mut m = model();
        for (b0, b1) in [(1.0, 0.0), (0.0, 1.0), (0.3, 0.3)] {
            m.params.nfp_w.fill(0.0);
            m.params.nfp_b.data_mut().copy_from_slice(&[b0, b1]);
            let d = detect_contamination(&m, &seq(0)).unwrap();
            assert_eq!(d.margin, b0 - b1);
            assert_eq!(d.decision == Decision::Anomalous, d.margin > 0.0);
        }
        m.params.nfp_b.data_mut().copy_from_slice(&[1.0, 0.0]);
        assert_eq!(detect_contamination_at(&m, &seq(0), 2.0).unwrap().decision, Decision::Consecutive);
    }

    #[test]
    fn mitigation_shape_and_positions() {
        let m = model();
        let s = seq(1);
        let pos = second_frame_positions(&s);
        assert_eq!(pos.len(), 6);
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        let entries = (0..15)
            .map(|i| crate::tokenizer::VocabEntry { centroid: Complex64::new(i as f64, 1.0), count: 1 })
            .collect();
        let v = Vocabulary::from_entries(entries).unwrap();
        let out = mitigate_contamination(&m, &v, &s).unwrap();
        assert_eq!(out.len(), 6);
        let direct = masked_reconstruct(&m, &v, &s, &pos).unwrap();
        for (o, r) in out.iter().zip(direct) {
            assert_eq!(*o, r.value);
            assert!(r.token as usize >= NUM_SPECIAL);
        }
    }

    #[test]
    fn compress_mean_and_identity() {
        let m = model();
        let one = compress(&m, &[seq(0)]).unwrap();
        assert_eq!(one.len(), 8);
        let three = compress(&m, &[seq(0), seq(0), seq(0)]).unwrap();
        for (x, y) in three.iter().zip(&one) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(compress(&m, &[]).is_err());
        let a = compress(&m, &[seq(0), seq(5)]).unwrap();
        let b = compress(&m, &[seq(5), seq(0)]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn fingerprint_linearity() {
        let m = model();
        let seqs: Vec<_> = (0..9).map(seq).collect();
        let f0 = fingerprint(&m, &seqs[0..8], 0, 8).unwrap();
        let f1 = fingerprint(&m, &seqs[1..9], 1, 8).unwrap();
        let p_old = m.forward(&seqs[0]).unwrap().pooled;
        let p_new = m.forward(&seqs[8]).unwrap().pooled;
        for i in 0..8 {
            let expect = (p_new[i] - p_old[i]) / 8.0;
            assert!((f1.vector[i] - f0.vector[i] - expect).abs() < 1e-12);
        }
        assert_eq!(f1.window, (1, 8));
        assert!(fingerprint(&m, &seqs[0..7], 0, 8).is_err());
        let same = fingerprint(&m, &vec![seq(2); 8], 0, 8).unwrap();
        let single = m.forward(&seq(2)).unwrap().pooled;
        for (x, y) in same.vector.iter().zip(&single) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
