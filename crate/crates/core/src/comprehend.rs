//! Using a pretrained model as an instrument: pseudo-likelihood scoring,
//! scale search for transfer, adaptation, and masked reconstruction.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::chansim::ChannelGrid;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::pretrain::{PretrainConfig, Trainer};
use crate::tokenizer::{FeatureMap, SequenceExample, TokenGrid, TokenId, Vocabulary, MASK, NUM_SPECIAL};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredChannel {
    /// Scored channel positions, ascending.
    pub positions: Vec<usize>,
    /// `log P(token_i | all other tokens)` for each scored position.
    pub log_probs: Vec<f64>,
    pub total: f64,
    pub perplexity: f64,
}

/// `exp(-mean(log_probs))`; infinite for an empty slice.
pub fn perplexity(log_probs: &[f64]) -> f64 {
    if log_probs.is_empty() {
        return f64::INFINITY;
    }
    (-log_probs.iter().sum::<f64>() / log_probs.len() as f64).exp()
}

fn check_channel_tokens(model: &Model, seq: &SequenceExample) -> Result<Vec<usize>> {
    let positions = seq.channel_positions();
    let v = model.config.vocab_size;
    for &p in &positions {
        let t = seq.token_ids[p] as usize;
        if t < NUM_SPECIAL || t >= v {
            return Err(Error::OutOfRange(format!("position {p} holds token {t}, not a channel id below {v}")));
        }
    }
    Ok(positions)
}

fn masked_log_prob(model: &Model, seq: &SequenceExample, pos: usize) -> Result<f64> {
    let mut masked = seq.clone();
    masked.token_ids[pos] = MASK;
    let trace = model.forward(&masked)?;
    let logits = model.mlm_logits(&trace, &[pos])?;
    let row = logits.row(0);
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    let lp = row[seq.token_ids[pos] as usize] - lse;
    if !lp.is_finite() {
        return Err(Error::NonFinite(format!("log-probability at position {pos}")));
    }
    Ok(lp)
}

fn scored(positions: Vec<usize>, log_probs: Vec<f64>) -> ScoredChannel {
    ScoredChannel {
        total: log_probs.iter().sum(),
        perplexity: perplexity(&log_probs),
        positions,
        log_probs,
    }
}

/// Masks each channel position alone, one forward pass per position, and
/// scores the true token. Positions run in parallel.
pub fn pseudo_log_likelihood(model: &Model, seq: &SequenceExample) -> Result<ScoredChannel> {
    let positions = check_channel_tokens(model, seq)?;
    let log_probs = positions
        .par_iter()
        .map(|&p| masked_log_prob(model, seq, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(scored(positions, log_probs))
}

/// Single-threaded reference for [`pseudo_log_likelihood`].
pub fn pseudo_log_likelihood_serial(model: &Model, seq: &SequenceExample) -> Result<ScoredChannel> {
    let positions = check_channel_tokens(model, seq)?;
    let log_probs = positions
        .iter()
        .map(|&p| masked_log_prob(model, seq, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(scored(positions, log_probs))
}

/// Divides every complex value by `s`.
pub fn scale_channel(grid: &ChannelGrid, s: f64) -> Result<ChannelGrid> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::config(format!("scale must be positive and finite, got {s}")));
    }
    Ok(grid.map(|h| h / s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spacing {
    Log,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSearchConfig {
    pub s_min: f64,
    pub s_max: f64,
    pub num_points: usize,
    pub spacing: Spacing,
    /// Golden-section refinement between the neighbours of the grid minimum.
    pub refine: bool,
    /// Frame pairs scored per candidate scale.
    pub eval_sequences: usize,
}

impl Default for ScaleSearchConfig {
    fn default() -> Self {
        Self {
            s_min: 0.0625,
            s_max: 16.0,
            num_points: 33,
            spacing: Spacing::Log,
            refine: false,
            eval_sequences: 16,
        }
    }
}

impl ScaleSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_min > 0.0 && self.s_min < self.s_max && self.s_max.is_finite()) {
            return Err(Error::config("scale search needs 0 < s_min < s_max"));
        }
        if self.num_points < 3 {
            return Err(Error::config("scale search needs at least 3 points"));
        }
        if self.eval_sequences == 0 {
            return Err(Error::config("eval_sequences must be at least 1"));
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<f64> {
        let n = self.num_points;
        (0..n)
            .map(|i| {
                let f = i as f64 / (n - 1) as f64;
                match self.spacing {
                    Spacing::Log => (self.s_min.log2() + f * (self.s_max.log2() - self.s_min.log2())).exp2(),
                    Spacing::Linear => self.s_min + f * (self.s_max - self.s_min),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalePoint {
    pub scale: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSearch {
    pub best: ScalePoint,
    /// One entry per grid point, in the order given.
    pub trace: Vec<ScalePoint>,
}

/// Frame pairs `(t, t + 1)` spread evenly over the grid.
fn eval_pairs(frames: usize, n: usize) -> Vec<(usize, usize)> {
    let anchors = frames.saturating_sub(1);
    if anchors == 0 {
        return Vec::new();
    }
    let n = n.min(anchors);
    (0..n).map(|i| i * anchors / n).map(|t| (t, t + 1)).collect()
}

/// Mean per-sequence perplexity of `grid / s` under `model`. Sequences
/// whose scoring fails count as infinitely perplexing.
pub fn mean_perplexity(model: &Model, vocab: &Vocabulary, grid: &ChannelGrid, s: f64, sequences: usize) -> Result<f64> {
    let scaled = scale_channel(grid, s)?;
    let tokens = TokenGrid::encode(&scaled, vocab)?;
    let pairs = eval_pairs(tokens.num_frames(), sequences);
    if pairs.is_empty() {
        return Err(Error::config("grid needs at least two frames"));
    }
    let mut sum = 0.0;
    for &pair in &pairs {
        let seq = tokens.sequence(pair)?;
        sum += match pseudo_log_likelihood(model, &seq) {
            Ok(s) => s.perplexity,
            Err(Error::NonFinite(_)) | Err(Error::NonFiniteActivation { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
    }
    Ok(sum / pairs.len() as f64)
}

fn better(a: ScalePoint, b: ScalePoint) -> bool {
    a.perplexity < b.perplexity || (a.perplexity == b.perplexity && a.scale < b.scale)
}

/// Scores every scale in `points` and returns the minimiser. Ties go to
/// the smaller scale, so the answer does not depend on the order given.
pub fn find_scale_over(
    model: &Model,
    vocab: &Vocabulary,
    grid: &ChannelGrid,
    points: &[f64],
    eval_sequences: usize,
) -> Result<ScaleSearch> {
    if points.is_empty() {
        return Err(Error::config("no scale points"));
    }
    let trace = points
        .iter()
        .map(|&s| {
            mean_perplexity(model, vocab, grid, s, eval_sequences).map(|pp| ScalePoint {
                scale: s,
                perplexity: if pp.is_nan() { f64::INFINITY } else { pp },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = trace[0];
    for &p in &trace[1..] {
        if better(p, best) {
            best = p;
        }
    }
    if !best.perplexity.is_finite() {
        return Err(Error::AllPerplexityInfinite);
    }
    Ok(ScaleSearch { best, trace })
}

const GOLDEN_ITERATIONS: usize = 12;

/// Grid search per `search`, optionally refined by golden-section search
/// in the (log-)bracket around the grid minimum.
pub fn find_scale(model: &Model, vocab: &Vocabulary, grid: &ChannelGrid, search: &ScaleSearchConfig) -> Result<ScaleSearch> {
    search.validate()?;
    let points = search.points();
    let mut result = find_scale_over(model, vocab, grid, &points, search.eval_sequences)?;
    if !search.refine {
        return Ok(result);
    }
    let i = points.iter().position(|&s| s == result.best.scale).expect("best is a grid point");
    let lo = points[i.saturating_sub(1)];
    let hi = points[(i + 1).min(points.len() - 1)];
    let (to, from): (fn(f64) -> f64, fn(f64) -> f64) = match search.spacing {
        Spacing::Log => (f64::ln, f64::exp),
        Spacing::Linear => (|x| x, |x| x),
    };
    let eval = |u: f64| -> Result<ScalePoint> {
        let s = from(u);
        Ok(ScalePoint { scale: s, perplexity: mean_perplexity(model, vocab, grid, s, search.eval_sequences)? })
    };
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (to(lo), to(hi));
    let mut c = eval(b - phi * (b - a))?;
    let mut d = eval(a + phi * (b - a))?;
    for _ in 0..GOLDEN_ITERATIONS {
        if better(c, d) {
            b = to(d.scale);
            d = c;
            c = eval(b - phi * (b - a))?;
        } else {
            a = to(c.scale);
            c = d;
            d = eval(a + phi * (b - a))?;
        }
    }
    for p in [c, d] {
        if better(p, result.best) {
            result.best = p;
        }
    }
    Ok(result)
}

/// Writes the trace as `S<TAB>PP` lines.
pub fn write_scale_trace<W: Write>(w: &mut W, trace: &[ScalePoint]) -> Result<()> {
    writeln!(w, "S\tPP")?;
    for p in trace {
        writeln!(w, "{:?}\t{:?}", p.scale, p.perplexity)?;
    }
    Ok(())
}

/// Continues pretraining on target-domain grids already rescaled by the
/// scale found with [`find_scale`]. Runs `config.total_steps` updates with a
/// fresh optimizer.
pub fn transfer_adapt(
    model: &Model,
    target: &[TokenGrid],
    source_map: &FeatureMap,
    target_map: &FeatureMap,
    config: PretrainConfig,
) -> Result<Model> {
    source_map.check_compatible(target_map)?;
    if config.total_steps == 0 {
        return Ok(model.clone());
    }
    let mut trainer = Trainer::new(model.clone(), target, config)?;
    trainer.run(|_, _| Ok(()), |_, _| Ok(()))?;
    Ok(trainer.model)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reconstruction {
    pub position: usize,
    pub token: TokenId,
    pub value: Complex64,
    /// Full-vocabulary softmax probability of `token`.
    pub probability: f64,
}

fn best_channel_token(row: &[f64]) -> (usize, f64) {
    let mut best = NUM_SPECIAL;
    for i in NUM_SPECIAL..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
    (best, (row[best] - m).exp() / z)
}

/// Masks all `positions` at once and predicts each from one forward pass.
/// The prediction is the most likely channel token (lowest id on ties).
pub fn masked_reconstruct(
    model: &Model,
    vocab: &Vocabulary,
    seq: &SequenceExample,
    positions: &[usize],
) -> Result<Vec<Reconstruction>> {
    if positions.is_empty() {
        return Ok(Vec::new());
    }
    let mut masked = seq.clone();
    for &p in positions {
        match seq.is_special.get(p) {
            None => return Err(Error::OutOfRange(format!("position {p} beyond sequence length {}", seq.len()))),
            Some(true) => return Err(Error::SpecialToken(seq.token_ids[p])),
            Some(false) => masked.token_ids[p] = MASK,
        }
    }
    let trace = model.forward(&masked)?;
    let logits = model.mlm_logits(&trace, positions)?;
    positions
        .iter()
        .enumerate()
        .map(|(r, &p)| {
            let (tok, prob) = best_channel_token(logits.row(r));
            Ok(Reconstruction {
                position: p,
                token: tok as TokenId,
                value: vocab.decode(tok as TokenId)?,
                probability: prob,
            })
        })
        .collect()
}

/// Regenerates the sequence one channel position at a time, in ascending
/// position order, feeding each prediction back in. Returns the new
/// sequence and its decoded channel values.
pub fn paraphrase_channel(
    model: &Model,
    vocab: &Vocabulary,
    seq: &SequenceExample,
) -> Result<(SequenceExample, Vec<Complex64>)> {
    let mut cur = seq.clone();
    for p in seq.channel_positions() {
        let r = masked_reconstruct(model, vocab, &cur, &[p])?;
        cur.token_ids[p] = r[0].token;
    }
    let values = cur
        .channel_tokens()
        .into_iter()
        .map(|t| vocab.decode(t))
        .collect::<Result<Vec<_>>>()?;
    Ok((cur, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chansim::{generate_channel, mean_power, SimConfig};
    use crate::nn::ModelConfig;
    use crate::tokenizer::{build_vocabulary, SequenceLayout};

    fn tiny(v: usize) -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 16,
            vocab_size: v,
            max_freq_features: 4,
            max_time_features: 2,
            max_antenna_features: 2,
            max_seq_len: 21,
            dropout_rate: 0.0,
            tie_mlm_weights: false,
        }
    }

    fn uniform(v: usize) -> Model {
        let mut m = Model::init(tiny(v), 1).unwrap();
        m.params.mlm_w.fill(0.0);
        m.params.mlm_b.fill(0.0);
        m
    }

    fn grid(frames: usize) -> ChannelGrid {
        generate_channel(&SimConfig { num_subcarriers: 4, num_frames: frames, seed: 3, ..SimConfig::default() }).unwrap()
    }

    #[test]
    fn uniform_model_perplexity_is_v() {
        let m = uniform(30);
        let seq = SequenceLayout::pair(4, 2).build(|s, a, k| 5 + (s + a + k) as u32);
        let s = pseudo_log_likelihood(&m, &seq).unwrap();
        assert_eq!(s.positions.len(), 16);
        for lp in &s.log_probs {
            assert!((lp + 30f64.ln()).abs() < 1e-12);
        }
        assert!((s.perplexity - 30.0).abs() < 1e-9);
    }

    #[test]
    fn perplexity_closed_form() {
        assert!((perplexity(&[0.5f64.ln(), 0.125f64.ln()]) - 4.0).abs() < 1e-12);
        assert!(perplexity(&[0.0]) >= 1.0);
    }

    #[test]
    fn parallel_and_serial_scores_agree() {
        let m = Model::init(tiny(30), 7).unwrap();
        let seq = SequenceLayout::pair(4, 2).build(|s, a, k| 5 + ((s * 7 + a * 3 + k * 5) % 25) as u32);
        let a = pseudo_log_likelihood(&m, &seq).unwrap();
        let b = pseudo_log_likelihood_serial(&m, &seq).unwrap();
        for (x, y) in a.log_probs.iter().zip(&b.log_probs) {
            assert!((x - y).abs() <= 1e-10);
        }
        assert!(a.perplexity >= 1.0);
    }

    #[test]
    fn scoring_rejects_out_of_vocab_tokens() {
        let m = uniform(30);
        let seq = SequenceLayout::pair(4, 2).build(|_, _, _| 31);
        assert!(pseudo_log_likelihood(&m, &seq).is_err());
    }

    #[test]
    fn scale_channel_properties() {
        let g = grid(5);
        assert_eq!(scale_channel(&g, 1.0).unwrap(), g);
        let twice = scale_channel(&scale_channel(&g, 2.0).unwrap(), 2.0).unwrap();
        assert_eq!(twice, scale_channel(&g, 4.0).unwrap());
        let p0 = mean_power(&g);
        let p3 = mean_power(&scale_channel(&g, 3.0).unwrap());
        assert!((p3 - p0 / 9.0).abs() < 1e-12 * p0);
        assert!(scale_channel(&g, 0.0).is_err());
        assert!(scale_channel(&g, -1.0).is_err());
    }

    #[test]
    fn default_grid_is_log_spaced_powers_of_two() {
        let p = ScaleSearchConfig::default().points();
        assert_eq!(p.len(), 33);
        assert!((p[0] - 0.0625).abs() < 1e-15);
        assert!((p[16] - 1.0).abs() < 1e-12);
        assert!((p[32] - 16.0).abs() < 1e-12);
        assert!((p[1] / p[0] - 2f64.powf(0.25)).abs() < 1e-12);
        assert!(ScaleSearchConfig { num_points: 2, ..Default::default() }.validate().is_err());
        assert!(ScaleSearchConfig { s_min: 2.0, s_max: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn find_scale_trace_bookkeeping_and_order_invariance() {
        let g = grid(6);
        let v = build_vocabulary(std::slice::from_ref(&g), 30).unwrap();
        let m = Model::init(tiny(v.size()), 5).unwrap();
        let cfg = ScaleSearchConfig { num_points: 5, s_min: 0.25, s_max: 4.0, eval_sequences: 2, ..Default::default() };
        let r = find_scale(&m, &v, &g, &cfg).unwrap();
        assert_eq!(r.trace.len(), 5);
        let min = r.trace.iter().map(|p| p.perplexity).fold(f64::INFINITY, f64::min);
        assert_eq!(min, r.best.perplexity);
        let mut rev = cfg.points();
        rev.reverse();
        let r2 = find_scale_over(&m, &v, &g, &rev, 2).unwrap();
        assert_eq!(r2.best, r.best);
        let refined = find_scale(&m, &v, &g, &ScaleSearchConfig { refine: true, ..cfg }).unwrap();
        assert!(refined.best.perplexity <= r.best.perplexity);

        let mut out = Vec::new();
        write_scale_trace(&mut out, &r.trace).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 6);
    }

    /// Constant grid of value 4 and a bias-only model preferring the entry
    /// 1.0, with log-probability falling off in |log2 centroid|: the trace
    /// must bottom out at S = 4 and rise on both sides.
    #[test]
    fn recovers_planted_scale() {
        use crate::chansim::GridMeta;
        use crate::tokenizer::VocabEntry;
        let centroids = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
        let entries = centroids.iter().map(|&c| VocabEntry { centroid: Complex64::new(c, 0.0), count: 1 }).collect();
        let v = Vocabulary::from_entries(entries).unwrap();
        let mut m = uniform(v.size());
        for (i, c) in centroids.iter().enumerate() {
            m.params.mlm_b.data_mut()[NUM_SPECIAL + i] = -2.0 * f64::log2(*c).abs();
        }
        let meta = GridMeta { num_subcarriers: 4, num_frames: 3, num_antennas: 2, frame_interval: 1e-3, subcarrier_spacing: 15e3 };
        let g = ChannelGrid::new(meta, vec![Complex64::new(4.0, 0.0); meta.len()]).unwrap();
        let cfg = ScaleSearchConfig { num_points: 9, eval_sequences: 2, ..Default::default() };
        let r = find_scale(&m, &v, &g, &cfg).unwrap();
        assert_eq!(r.best.scale, 4.0);
        let pp: Vec<f64> = r.trace.iter().map(|p| p.perplexity).collect();
        let best = pp.iter().position(|&p| p == r.best.perplexity).unwrap();
        assert!(pp[..=best].windows(2).all(|w| w[1] <= w[0]), "{pp:?}");
        assert!(pp[best..].windows(2).all(|w| w[1] >= w[0]), "{pp:?}");
        assert!(pp[best - 1] > pp[best] && pp[best + 1] > pp[best]);
    }

    #[test]
    fn ties_prefer_smaller_scale() {
        let g = grid(4);
        let v = build_vocabulary(std::slice::from_ref(&g), 30).unwrap();
        let m = uniform(v.size());
        let r = find_scale_over(&m, &v, &g, &[2.0, 0.5, 1.0], 2).unwrap();
        assert_eq!(r.best.scale, 0.5);
    }

    #[test]
    fn all_infinite_is_reported() {
        let g = grid(4);
        let v = build_vocabulary(std::slice::from_ref(&g), 30).unwrap();
        let mut m = uniform(v.size());
        m.params.mlm_b.data_mut()[5] = f64::NEG_INFINITY;
        m.params.mlm_b.fill(f64::NEG_INFINITY);
        assert!(matches!(find_scale_over(&m, &v, &g, &[1.0, 2.0], 2), Err(Error::AllPerplexityInfinite)));
    }

    #[test]
    fn transfer_checks_feature_maps() {
        let g = grid(30);
        let v = build_vocabulary(std::slice::from_ref(&g), 30).unwrap();
        let m = Model::init(tiny(v.size()), 5).unwrap();
        let tg = vec![TokenGrid::encode(&g, &v).unwrap()];
        let src = FeatureMap::for_grid(g.meta());
        let mut other = src.clone();
        other.freq.pop();
        let cfg = PretrainConfig { batch_size: 4, total_steps: 0, ..Default::default() };
        assert!(matches!(transfer_adapt(&m, &tg, &src, &other, cfg.clone()), Err(Error::FeatureMapMismatch(_))));
        assert_eq!(transfer_adapt(&m, &tg, &src, &src, cfg.clone()).unwrap(), m);
        let moved = transfer_adapt(&m, &tg, &src, &src, PretrainConfig { total_steps: 3, learning_rate_peak: 1e-3, ..cfg }).unwrap();
        assert_ne!(moved, m);
    }

    #[test]
    fn reconstruct_contracts() {
        let g = grid(4);
        let v = build_vocabulary(std::slice::from_ref(&g), 30).unwrap();
        let m = Model::init(tiny(v.size()), 9).unwrap();
        let seq = TokenGrid::encode(&g, &v).unwrap().sequence((0, 1)).unwrap();
        assert!(masked_reconstruct(&m, &v, &seq, &[]).unwrap().is_empty());
        assert!(matches!(masked_reconstruct(&m, &v, &seq, &[0]), Err(Error::SpecialToken(_))));
        let r = masked_reconstruct(&m, &v, &seq, &[1, 2]).unwrap();
        let mut masked = seq.clone();
        masked.token_ids[1] = MASK;
        masked.token_ids[2] = MASK;
        let logits = m.mlm_logits(&m.forward(&masked).unwrap(), &[1, 2]).unwrap();
        for (i, rec) in r.iter().enumerate() {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((rec.probability - row[rec.token as usize].exp() / z).abs() < 1e-12);
            assert!(rec.token as usize >= NUM_SPECIAL);
            assert_eq!(rec.value, v.decode(rec.token).unwrap());
        }
    }

    #[test]
    fn uniform_paraphrase_picks_lowest_channel_id() {
        let m = uniform(30);
        let entries: Vec<_> = (0..25)
            .map(|i| crate::tokenizer::VocabEntry { centroid: Complex64::new(i as f64, 0.0), count: 1 })
            .collect();
        let v = Vocabulary::from_entries(entries).unwrap();
        let seq = SequenceLayout::pair(4, 2).build(|_, _, k| 9 + k as u32);
        let (out, values) = paraphrase_channel(&m, &v, &seq).unwrap();
        assert!(out.channel_tokens().iter().all(|&t| t == NUM_SPECIAL as u32));
        assert!(values.iter().all(|&c| c == Complex64::new(0.0, 0.0)));
    }
}
