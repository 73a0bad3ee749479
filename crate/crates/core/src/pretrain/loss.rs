use rayon::prelude::*;

use super::{make_training_example, PretrainConfig, TrainingExample};
use crate::error::{Error, Result};
use crate::nn::{LossGrads, Model, ModelParameters};
use crate::rng::{self, Stream};
use crate::tokenizer::TokenGrid;

/// Batch losses and counts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    /// Mean cross-entropy over all masked positions of the batch (0 if none).
    pub mlm: f64,
    /// Mean next-frame cross-entropy over the batch.
    pub nfp: f64,
    /// `mlm + nfp`.
    pub total: f64,
    pub masked: usize,
    pub mlm_correct: usize,
    pub nfp_correct: usize,
    pub examples: usize,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter_mut().for_each(|x| *x /= s);
    e
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct Partial {
    mlm_sum: f64,
    nfp_sum: f64,
    mlm_correct: usize,
    nfp_correct: usize,
    grads: Option<ModelParameters>,
}

fn example_pass(
    model: &Model,
    ex: &TrainingExample,
    mlm_weight: f64,
    nfp_weight: f64,
    dropout_key: Option<(u64, u64, u64)>,
    with_grads: bool,
) -> Result<Partial> {
    let mut rng = dropout_key.map(|(seed, step, i)| rng::keyed(seed, Stream::Dropout, step, i));
    let trace = model.forward_with(&ex.input, rng.as_mut())?;
    let positions: Vec<usize> = ex.mlm_labels.iter().map(|l| l.0).collect();
    let logits = model.mlm_logits(&trace, &positions)?;
    let mut grads = LossGrads::default();
    let mut mlm_sum = 0.0;
    let mut mlm_correct = 0;
    for (r, &(pos, label)) in ex.mlm_labels.iter().enumerate() {
        let row = logits.row(r);
        let mut p = softmax(row);
        mlm_sum -= p[label as usize].ln();
        mlm_correct += (argmax(row) == label as usize) as usize;
        if with_grads {
            p[label as usize] -= 1.0;
            p.iter_mut().for_each(|x| *x *= mlm_weight);
            grads.mlm.push((pos, p));
        }
    }
    let nfp = model.nfp_logits(&trace)?;
    let mut q = softmax(&nfp);
    let label = ex.nfp_label.index();
    let nfp_sum = -q[label].ln();
    let nfp_correct = (argmax(&nfp) == label) as usize;
    let grads = if with_grads {
        q[label] -= 1.0;
        grads.nfp = Some([q[0] * nfp_weight, q[1] * nfp_weight]);
        Some(model.backward(&trace, &grads)?)
    } else {
        None
    };
    Ok(Partial {
        mlm_sum,
        nfp_sum,
        mlm_correct,
        nfp_correct,
        grads,
    })
}

/// Loss over a batch and its gradient: mean masked-token cross-entropy plus
/// mean next-frame cross-entropy, equally weighted.
///
/// Examples are processed in parallel; gradients are summed in batch order
/// so the result does not depend on scheduling. `dropout_key = (seed, step)`
/// enables dropout with per-example masks.
pub fn batch_loss(
    model: &Model,
    batch: &[TrainingExample],
    dropout_key: Option<(u64, u64)>,
) -> Result<(LossReport, ModelParameters)> {
    run_batch(model, batch, dropout_key, true).map(|(r, g)| (r, g.expect("gradients requested")))
}

fn run_batch(
    model: &Model,
    batch: &[TrainingExample],
    dropout_key: Option<(u64, u64)>,
    with_grads: bool,
) -> Result<(LossReport, Option<ModelParameters>)> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let masked: usize = batch.iter().map(|e| e.mlm_labels.len()).sum();
    let mlm_weight = if masked > 0 { 1.0 / masked as f64 } else { 0.0 };
    let nfp_weight = 1.0 / batch.len() as f64;
    let parts: Vec<Partial> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let key = dropout_key.map(|(seed, step)| (seed, step, i as u64));
            example_pass(model, ex, mlm_weight, nfp_weight, key, with_grads)
        })
        .collect::<Result<_>>()?;
    let mut report = LossReport {
        masked,
        examples: batch.len(),
        ..Default::default()
    };
    let mut total_grads: Option<ModelParameters> = None;
    for part in parts {
        report.mlm += part.mlm_sum;
        report.nfp += part.nfp_sum;
        report.mlm_correct += part.mlm_correct;
        report.nfp_correct += part.nfp_correct;
        if let Some(g) = part.grads {
            match &mut total_grads {
                Some(t) => t.add_assign(&g),
                None => total_grads = Some(g),
            }
        }
    }
    report.mlm *= mlm_weight;
    report.nfp *= nfp_weight;
    report.total = report.mlm + report.nfp;
    Ok((report, total_grads))
}

/// Held-out metrics on a fixed set of examples.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalMetrics {
    pub mlm_loss: f64,
    pub mlm_accuracy: f64,
    pub nfp_loss: f64,
    pub nfp_accuracy: f64,
    pub masked: usize,
    pub examples: usize,
}

/// Evaluates `model` on `num_examples` examples drawn deterministically
/// from `data` (anchors spread evenly over each grid).
pub fn evaluate(
    model: &Model,
    data: &[TokenGrid],
    num_examples: usize,
    config: &PretrainConfig,
    seed: u64,
) -> Result<EvalMetrics> {
    let anchors: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(g, grid)| (0..grid.num_frames().saturating_sub(1)).map(move |t| (g, t)))
        .collect();
    if anchors.is_empty() || num_examples == 0 {
        return Err(Error::config("no evaluation anchors"));
    }
    let examples: Vec<TrainingExample> = (0..num_examples)
        .map(|i| {
            let (g, t) = anchors[i * anchors.len() / num_examples];
            let mut rng = rng::keyed(seed, Stream::Eval, i as u64, 0);
            make_training_example(&data[g], t, model.config.vocab_size, config, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut metrics = EvalMetrics::default();
    for chunk in examples.chunks(32) {
        let (r, _) = run_batch(model, chunk, None, false)?;
        metrics.mlm_loss += r.mlm * r.masked as f64;
        metrics.nfp_loss += r.nfp * r.examples as f64;
        metrics.mlm_accuracy += r.mlm_correct as f64;
        metrics.nfp_accuracy += r.nfp_correct as f64;
        metrics.masked += r.masked;
        metrics.examples += r.examples;
    }
    let masked = metrics.masked.max(1) as f64;
    metrics.mlm_loss /= masked;
    metrics.mlm_accuracy /= masked;
    metrics.nfp_loss /= metrics.examples as f64;
    metrics.nfp_accuracy /= metrics.examples as f64;
    Ok(metrics)
}
