use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{LossGrads, Mat, Model, ModelParameters};
use crate::pretrain::Adam;
use crate::rng::{self, Stream};
use crate::tokenizer::SequenceExample;

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 12,
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

/// Encoder plus a classification layer on the pooled `[CLS]` state.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuned {
    pub model: Model,
    /// `H x C`.
    pub head_w: Mat,
    pub head_b: Vec<f64>,
    /// Accuracy on the held-out examples.
    pub accuracy: f64,
}

impl FineTuned {
    pub fn logits(&self, seq: &SequenceExample) -> Result<Vec<f64>> {
        let t = self.model.forward(seq)?;
        Ok(head_logits(&self.head_w, &self.head_b, &t.pooled))
    }

    pub fn predict(&self, seq: &SequenceExample) -> Result<usize> {
        Ok(argmax(&self.logits(seq)?))
    }
}

fn head_logits(w: &Mat, b: &[f64], pooled: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for (h, &p) in pooled.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(h)) {
            *o += p * wv;
        }
    }
    out
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct HeadAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl HeadAdam {
    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let (b1, b2) = (0.9f64, 0.999f64);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grads[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Trains a fresh `H x num_classes` head jointly with every encoder weight
/// by cross-entropy on `train`, then reports accuracy on `eval`.
pub fn fine_tune_classifier(
    model: &Model,
    train: &[(SequenceExample, usize)],
    eval: &[(SequenceExample, usize)],
    num_classes: usize,
    config: &FineTuneConfig,
) -> Result<FineTuned> {
    if num_classes < 2 {
        return Err(Error::config("a classifier needs at least 2 classes"));
    }
    if let Some((_, c)) = train.iter().chain(eval).find(|(_, c)| *c >= num_classes) {
        return Err(Error::OutOfRange(format!("class {c} >= {num_classes}")));
    }
    let first = train.first().map(|e| e.1);
    if train.iter().all(|e| Some(e.1) == first) {
        return Err(Error::config("training data must contain at least 2 classes"));
    }
    if eval.is_empty() || config.batch_size == 0 {
        return Err(Error::config("fine-tuning needs held-out examples and a positive batch size"));
    }
    let h = model.config.hidden_size;
    let mut rng = rng::keyed(config.seed, Stream::FineTune, 0, 0);
    let normal = Normal::new(0.0, 0.02).expect("valid normal");
    let mut head_w = Mat::from_vec(h, num_classes, (0..h * num_classes).map(|_| normal.sample(&mut rng)).collect());
    let mut head_b = vec![0.0; num_classes];
    let mut model = model.clone();
    let mut adam = Adam::new(&model.params);
    let mut head_opt = HeadAdam { m: vec![0.0; h * num_classes + num_classes], v: vec![0.0; h * num_classes + num_classes], t: 0 };

    let per_epoch = train.len().div_ceil(config.batch_size);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..config.steps {
        let (epoch, b) = (step / per_epoch, step % per_epoch);
        if b == 0 {
            order = (0..train.len()).collect();
            order.shuffle(&mut rng::keyed(config.seed, Stream::FineTune, 1, epoch as u64));
        }
        let idx = &order[b * config.batch_size..((b + 1) * config.batch_size).min(train.len())];
        let scale = 1.0 / idx.len() as f64;
        let parts: Vec<(ModelParameters, Vec<f64>)> = idx
            .par_iter()
            .map(|&i| {
                let (seq, label) = &train[i];
                let trace = model.forward(seq)?;
                let logits = head_logits(&head_w, &head_b, &trace.pooled);
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
                let dlog: Vec<f64> = logits
                    .iter()
                    .enumerate()
                    .map(|(c, x)| ((x - m).exp() / z - f64::from(u8::from(c == *label))) * scale)
                    .collect();
                let mut head_grad = vec![0.0; h * num_classes + num_classes];
                let mut dpooled = vec![0.0; h];
                for r in 0..h {
                    for c in 0..num_classes {
                        head_grad[r * num_classes + c] = trace.pooled[r] * dlog[c];
                        dpooled[r] += head_w.get(r, c) * dlog[c];
                    }
                }
                head_grad[h * num_classes..].copy_from_slice(&dlog);
                let g = model.backward(&trace, &LossGrads { pooled: Some(dpooled), ..Default::default() })?;
                Ok((g, head_grad))
            })
            .collect::<Result<_>>()?;
        let mut parts = parts.into_iter();
        let (mut grads, mut head_grad) = parts.next().expect("non-empty batch");
        for (g, hg) in parts {
            grads.add_assign(&g);
            head_grad.iter_mut().zip(hg).for_each(|(a, b)| *a += b);
        }
        if !grads.is_finite() || head_grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step: step + 1 });
        }
        adam.step(&mut model.params, &grads, config.learning_rate)?;
        let mut flat: Vec<f64> = head_w.data().iter().chain(&head_b).copied().collect();
        head_opt.step(&mut flat, &head_grad, config.learning_rate);
        head_w.data_mut().copy_from_slice(&flat[..h * num_classes]);
        head_b.copy_from_slice(&flat[h * num_classes..]);
    }

    let mut tuned = FineTuned { model, head_w, head_b, accuracy: 0.0 };
    let correct = eval
        .par_iter()
        .map(|(seq, label)| tuned.predict(seq).map(|p| (p == *label) as usize))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    tuned.accuracy = correct as f64 / eval.len() as f64;
    Ok(tuned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use crate::tokenizer::SequenceLayout;

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
            6,
        )
        .unwrap()
    }

    fn data(n: usize, offset: usize) -> Vec<(SequenceExample, usize)> {
        (0..n)
            .map(|i| {
                let class = (i + offset) % 2;
                let base = if class == 0 { 5 } else { 12 };
                let seq = SequenceLayout::pair(3, 2).build(|s, a, k| base + ((i + s + a + k) % 6) as u32);
                (seq, class)
            })
            .collect()
    }

    #[test]
    fn learns_a_separable_task() {
        let cfg = FineTuneConfig { steps: 60, batch_size: 8, learning_rate: 5e-3, seed: 1 };
        let r = fine_tune_classifier(&model(), &data(40, 0), &data(20, 1), 2, &cfg).unwrap();
        assert!(r.accuracy >= 0.95, "accuracy {}", r.accuracy);
        assert_eq!(r.head_w.shape(), (8, 2));
    }

    #[test]
    fn zero_steps_keeps_encoder_and_is_near_chance() {
        let m = model();
        let cfg = FineTuneConfig { steps: 0, ..Default::default() };
        let r = fine_tune_classifier(&m, &data(10, 0), &data(40, 0), 2, &cfg).unwrap();
        assert_eq!(r.model, m);
        assert!((r.accuracy - 0.5).abs() <= 0.5);
    }

    #[test]
    fn rejects_single_class_and_bad_labels() {
        let m = model();
        let one: Vec<_> = data(10, 0).into_iter().filter(|e| e.1 == 0).collect();
        assert!(fine_tune_classifier(&m, &one, &data(4, 0), 2, &FineTuneConfig::default()).is_err());
        assert!(fine_tune_classifier(&m, &data(10, 0), &data(4, 0), 1, &FineTuneConfig::default()).is_err());
        let mut bad = data(10, 0);
        bad[0].1 = 5;
        assert!(fine_tune_classifier(&m, &bad, &data(4, 0), 2, &FineTuneConfig::default()).is_err());
    }

    #[test]
    fn deterministic() {
        let cfg = FineTuneConfig { steps: 5, batch_size: 4, learning_rate: 1e-3, seed: 2 };
        let a = fine_tune_classifier(&model(), &data(12, 0), &data(6, 1), 2, &cfg).unwrap();
        let b = fine_tune_classifier(&model(), &data(12, 0), &data(6, 1), 2, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
