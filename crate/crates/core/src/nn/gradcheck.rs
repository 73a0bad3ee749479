//! Finite-difference audit of the analytic backward pass.

use super::{randomize, LossGrads, Model, ModelConfig, ModelParameters};
use crate::error::Result;
use crate::rng::{self, Stream};
use crate::tokenizer::{SequenceExample, SequenceLayout, MASK};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    /// `max|g - fd| / max(max|g|, max|fd|, floor)`.
    pub relative_error: f64,
}

/// Smallest configuration exercising every code path: two layers, two heads,
/// a 13-token frame pair.
pub fn gradcheck_config(dropout_rate: f64, tie_mlm_weights: bool) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_size: 16,
        num_heads: 2,
        ffn_size: 64,
        vocab_size: 32,
        max_freq_features: 2,
        max_time_features: 2,
        max_antenna_features: 2,
        max_seq_len: 13,
        dropout_rate,
        tie_mlm_weights,
    }
}

const TARGETS: [(usize, usize); 3] = [(2, 17), (7, 6), (11, 30)];

fn probe() -> SequenceExample {
    let mut s = SequenceLayout::pair(2, 2).build(|slot, a, k| (5 + slot * 7 + a * 3 + k * 11) as u32 % 27 + 5);
    s.token_ids[2] = MASK;
    s
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|x| x - lse).collect()
}

fn loss_and_grads(model: &Model, seq: &SequenceExample, seed: u64, want: bool) -> Result<(f64, Option<ModelParameters>)> {
    let mut rng = (model.config.dropout_rate > 0.0).then(|| rng::keyed(seed, Stream::Dropout, 0, 0));
    let trace = model.forward_with(seq, rng.as_mut())?;
    let positions: Vec<usize> = TARGETS.iter().map(|t| t.0).collect();
    let logits = model.mlm_logits(&trace, &positions)?;
    let n = TARGETS.len() as f64;
    let mut loss = 0.0;
    let mut grads = LossGrads::default();
    for (r, &(pos, label)) in TARGETS.iter().enumerate() {
        let ls = log_softmax(logits.row(r));
        loss -= ls[label] / n;
        let mut d: Vec<f64> = ls.iter().map(|l| l.exp() / n).collect();
        d[label] -= 1.0 / n;
        grads.mlm.push((pos, d));
    }
    let ls = log_softmax(&model.nfp_logits(&trace)?);
    loss -= ls[1];
    grads.nfp = Some([ls[0].exp(), ls[1].exp() - 1.0]);
    let g = if want { Some(model.backward(&trace, &grads)?) } else { None };
    Ok((loss, g))
}

/// Compares every parameter tensor's analytic gradient with central
/// differences of step `step` on a randomized model of `config`.
pub fn gradient_check(config: ModelConfig, seed: u64, step: f64, floor: f64) -> Result<Vec<TensorCheck>> {
    let mut model = Model::init(config, seed)?;
    randomize(&mut model.params, seed.wrapping_add(1), 0.3);
    for l in &mut model.params.layers {
        l.attn_ln_gamma.data_mut().iter_mut().for_each(|g| *g += 1.0);
        l.ffn_ln_gamma.data_mut().iter_mut().for_each(|g| *g += 1.0);
    }
    let seq = probe();
    let grads = loss_and_grads(&model, &seq, seed, true)?.1.expect("requested");
    let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let len = model.params.tensors()[ti].len();
        let mut fd = vec![0.0; len];
        for (e, slot) in fd.iter_mut().enumerate() {
            let orig = model.params.tensors()[ti].data()[e];
            model.params.tensors_mut()[ti].data_mut()[e] = orig + step;
            let up = loss_and_grads(&model, &seq, seed, false)?.0;
            model.params.tensors_mut()[ti].data_mut()[e] = orig - step;
            let down = loss_and_grads(&model, &seq, seed, false)?.0;
            model.params.tensors_mut()[ti].data_mut()[e] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let g = grads.tensors()[ti].data();
        let scale = g.iter().chain(&fd).fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = g.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        out.push(TensorCheck { name, relative_error: diff / scale.max(floor) });
    }
    Ok(out)
}
