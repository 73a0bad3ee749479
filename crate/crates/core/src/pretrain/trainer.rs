use std::io::Write;

use rand::seq::SliceRandom;

use super::loss::{batch_loss, evaluate, EvalMetrics};
use super::optim::{lr_schedule, Adam};
use super::{make_training_example, PretrainConfig, TrainingExample};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, ExtraTensor, Model, ModelConfig};
use crate::rng::{self, Stream};
use crate::tokenizer::{TokenGrid, Vocabulary};

pub const METRICS_HEADER: &str = "step\tlr\tmlm_loss\tnfp_loss\ttotal";

/// Held-out examples scored at the end of each epoch.
pub const EPOCH_EVAL_EXAMPLES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// 1-based index of the update just applied.
    pub step: usize,
    pub lr: f64,
    pub mlm_loss: f64,
    pub nfp_loss: f64,
    pub total: f64,
}

/// Writes one tab-separated metrics row. `{:?}` keeps full precision so
/// logs from identical runs compare byte for byte.
pub fn write_metrics_line<W: Write>(w: &mut W, m: &StepMetrics) -> Result<()> {
    writeln!(w, "{}\t{:?}\t{:?}\t{:?}\t{:?}", m.step, m.lr, m.mlm_loss, m.nfp_loss, m.total)?;
    Ok(())
}

/// Stateful training loop over a fixed set of token grids.
///
/// Batch `s` of the run is a slice of the epoch-`s / steps_per_epoch`
/// permutation of all anchors `(grid, t0)`, so a resumed run sees exactly
/// the batches an uninterrupted one would.
pub struct Trainer<'a> {
    pub model: Model,
    pub optimizer: Adam,
    pub config: PretrainConfig,
    data: &'a [TokenGrid],
    anchors: Vec<(usize, usize)>,
    step: usize,
    order: Option<(usize, Vec<usize>)>,
}

fn anchors_for(data: &[TokenGrid], config: &PretrainConfig) -> Vec<(usize, usize)> {
    let gap = config.negative_min_gap;
    let need_negative = config.nfp_negative_rate > 0.0;
    let mut out = Vec::new();
    for (g, grid) in data.iter().enumerate() {
        let frames = grid.num_frames();
        for t in 0..frames.saturating_sub(1) {
            let has_negative = t + 1 > gap || t + gap < frames;
            if !need_negative || has_negative {
                out.push((g, t));
            }
        }
    }
    out
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, data: &'a [TokenGrid], config: PretrainConfig) -> Result<Self> {
        config.validate()?;
        let anchors = anchors_for(data, &config);
        if anchors.is_empty() {
            return Err(Error::config("dataset has no usable anchor frames"));
        }
        for grid in data {
            let l = grid.layout();
            if l.len() > model.config.max_seq_len
                || grid.num_subcarriers() > model.config.max_freq_features
                || grid.num_antennas() > model.config.max_antenna_features
                || model.config.max_time_features < 2
            {
                return Err(Error::config("dataset dimensions exceed the model's feature tables"));
            }
        }
        let optimizer = Adam::new(&model.params);
        Ok(Self {
            model,
            optimizer,
            config,
            data,
            anchors,
            step: 0,
            order: None,
        })
    }

    /// Continues from a checkpoint written with [`Trainer::checkpoint_extras`].
    pub fn resume(checkpoint: Checkpoint, data: &'a [TokenGrid], config: PretrainConfig) -> Result<Self> {
        let step = checkpoint
            .extra("train.step")
            .and_then(|t| t.values.first().copied())
            .unwrap_or(0.0) as usize;
        let optimizer = Adam::from_extras(&checkpoint.model.params, &checkpoint.extras)?;
        let mut t = Self::new(checkpoint.model, data, config)?;
        t.optimizer = optimizer;
        t.step = step;
        Ok(t)
    }

    pub fn checkpoint_extras(&self) -> Vec<ExtraTensor> {
        let mut out = vec![ExtraTensor {
            name: "train.step".into(),
            dims: vec![1],
            values: vec![self.step as f64],
        }];
        out.extend(self.optimizer.to_extras());
        out
    }

    /// Number of updates applied so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.anchors.len().div_ceil(self.config.batch_size)
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.total_steps
    }

    fn permutation(&mut self, epoch: usize) -> &[usize] {
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.anchors.len()).collect();
            perm.shuffle(&mut rng::keyed(self.config.seed, Stream::Shuffle, epoch as u64, 0));
            self.order = Some((epoch, perm));
        }
        &self.order.as_ref().expect("just set").1
    }

    /// The examples of update `step` (0-based).
    pub fn batch(&mut self, step: usize) -> Result<Vec<TrainingExample>> {
        let per_epoch = self.steps_per_epoch();
        let (epoch, b) = (step / per_epoch, step % per_epoch);
        let bs = self.config.batch_size;
        let n = self.anchors.len();
        let idx: Vec<usize> = self.permutation(epoch)[b * bs..((b + 1) * bs).min(n)].to_vec();
        let v = self.model.config.vocab_size;
        idx.iter()
            .enumerate()
            .map(|(i, &a)| {
                let (g, t) = self.anchors[a];
                let mut r = rng::keyed(self.config.seed, Stream::Example, step as u64, i as u64);
                make_training_example(&self.data[g], t, v, &self.config, &mut r)
            })
            .collect()
    }

    /// Applies one update and reports the batch loss measured before it.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let batch = self.batch(step)?;
        let dropout = (self.model.config.dropout_rate > 0.0).then_some((self.config.seed, step as u64));
        let (report, mut grads) = batch_loss(&self.model, &batch, dropout)?;
        if !report.total.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence { step: step + 1 });
        }
        if let Some(cap) = self.config.clip_norm {
            let norm = grads.global_norm();
            if norm > cap {
                grads.scale(cap / norm);
            }
        }
        let lr = lr_schedule(step, &self.config);
        self.optimizer.step(&mut self.model.params, &grads, lr)?;
        if !self.model.params.is_finite() {
            return Err(Error::Divergence { step: step + 1 });
        }
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            lr,
            mlm_loss: report.mlm,
            nfp_loss: report.nfp,
            total: report.total,
        })
    }

    /// Runs to `total_steps`, calling `on_step` after every update and
    /// `on_epoch` whenever an epoch boundary is crossed.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&Self, &StepMetrics) -> Result<()>,
        mut on_epoch: impl FnMut(&Self, usize) -> Result<()>,
    ) -> Result<()> {
        let per_epoch = self.steps_per_epoch();
        while !self.is_finished() {
            let m = self.step()?;
            on_step(self, &m)?;
            if self.step % per_epoch == 0 || self.is_finished() {
                on_epoch(self, self.step.div_ceil(per_epoch))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutput {
    pub model: Model,
    pub metrics: Vec<StepMetrics>,
    /// `(epoch, metrics)` on the evaluation grids after each epoch.
    pub epoch_eval: Vec<(usize, EvalMetrics)>,
}

/// Initializes a model from `config.seed` and trains it on `train`.
/// Per-epoch metrics are measured on `eval` (or on `train` when empty).
pub fn pretrain(
    train: &[TokenGrid],
    eval: &[TokenGrid],
    vocab: &Vocabulary,
    model_config: ModelConfig,
    config: PretrainConfig,
) -> Result<PretrainOutput> {
    if vocab.size() != model_config.vocab_size {
        return Err(Error::config(format!(
            "vocabulary has {} entries, model expects {}",
            vocab.size(),
            model_config.vocab_size
        )));
    }
    let model = Model::init(model_config, config.seed)?;
    let mut trainer = Trainer::new(model, train, config)?;
    let eval_set = if eval.is_empty() { train } else { eval };
    let mut metrics = Vec::new();
    let mut epoch_eval = Vec::new();
    trainer.run(
        |_, m| {
            metrics.push(*m);
            Ok(())
        },
        |t, epoch| {
            let e = evaluate(&t.model, eval_set, EPOCH_EVAL_EXAMPLES, &t.config, t.config.seed)?;
            epoch_eval.push((epoch, e));
            Ok(())
        },
    )?;
    Ok(PretrainOutput {
        model: trainer.model,
        metrics,
        epoch_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chansim::{generate_channel, SimConfig};
    use crate::nn::{read_checkpoint, write_checkpoint};
    use crate::tokenizer::build_vocabulary;

    fn setup() -> (Vec<TokenGrid>, Vocabulary, ModelConfig) {
        let g = generate_channel(&SimConfig {
            num_subcarriers: 4,
            num_frames: 30,
            seed: 5,
            ..SimConfig::default()
        })
        .unwrap();
        let v = build_vocabulary(std::slice::from_ref(&g), 40).unwrap();
        let cfg = ModelConfig {
            num_layers: 1,
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 16,
            vocab_size: v.size(),
            max_freq_features: 4,
            max_time_features: 2,
            max_antenna_features: 2,
            max_seq_len: 21,
            dropout_rate: 0.0,
            tie_mlm_weights: false,
        };
        (vec![TokenGrid::encode(&g, &v).unwrap()], v, cfg)
    }

    fn pcfg(total: usize) -> PretrainConfig {
        PretrainConfig {
            batch_size: 4,
            learning_rate_peak: 1e-2,
            warmup_steps: 0,
            total_steps: total,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_returns_initial_parameters() {
        let (data, v, cfg) = setup();
        let out = pretrain(&data, &[], &v, cfg.clone(), pcfg(0)).unwrap();
        assert_eq!(out.model, Model::init(cfg, 9).unwrap());
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn first_ten_losses_are_bit_identical() {
        let (data, v, cfg) = setup();
        let a = pretrain(&data, &[], &v, cfg.clone(), pcfg(10)).unwrap();
        let b = pretrain(&data, &[], &v, cfg, pcfg(10)).unwrap();
        let bits = |o: &PretrainOutput| o.metrics.iter().map(|m| m.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.metrics.len(), 10);
    }

    #[test]
    fn overfits_a_fixed_batch() {
        let (data, _, cfg) = setup();
        let model = Model::init(cfg, 3).unwrap();
        let mut t = Trainer::new(model, &data, pcfg(100)).unwrap();
        let batch = t.batch(0).unwrap();
        let mut adam = Adam::new(&t.model.params);
        let mut losses = Vec::new();
        for _ in 0..50 {
            let (r, g) = batch_loss(&t.model, &batch, None).unwrap();
            losses.push(r.total);
            adam.step(&mut t.model.params, &g, 1e-2).unwrap();
        }
        assert!(losses[49] < losses[0], "{} -> {}", losses[0], losses[49]);
        assert!(losses[49] < 0.5 * losses[0]);
    }

    #[test]
    fn batches_are_epoch_permutations() {
        let (data, _, cfg) = setup();
        let mut t = Trainer::new(Model::init(cfg, 1).unwrap(), &data, pcfg(20)).unwrap();
        let per = t.steps_per_epoch();
        let mut seen: Vec<usize> = Vec::new();
        for s in 0..per {
            let b = t.batch(s).unwrap();
            seen.push(b.len());
        }
        assert_eq!(seen.iter().sum::<usize>(), t.num_anchors());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (data, _, cfg) = setup();
        let full_model = {
            let mut t = Trainer::new(Model::init(cfg.clone(), 1).unwrap(), &data, pcfg(12)).unwrap();
            t.run(|_, _| Ok(()), |_, _| Ok(())).unwrap();
            t.model
        };
        let mut t = Trainer::new(Model::init(cfg, 1).unwrap(), &data, pcfg(12)).unwrap();
        for _ in 0..5 {
            t.step().unwrap();
        }
        let mut buf = Vec::new();
        write_checkpoint(&t.model, &t.checkpoint_extras(), &mut buf).unwrap();
        let ck = read_checkpoint(buf.as_slice()).unwrap();
        let mut r = Trainer::resume(ck, &data, pcfg(12)).unwrap();
        assert_eq!(r.steps_done(), 5);
        let m = r.step().unwrap();
        assert_eq!(m.step, 6);
        r.run(|_, _| Ok(()), |_, _| Ok(())).unwrap();
        assert_eq!(r.model, full_model);
    }

    #[test]
    fn divergence_reports_step() {
        let (data, _, cfg) = setup();
        let mut model = Model::init(cfg, 1).unwrap();
        model.params.nfp_b.data_mut()[0] = f64::NAN;
        let mut t = Trainer::new(model, &data, pcfg(5)).unwrap();
        match t.step() {
            Err(Error::Divergence { step }) => assert_eq!(step, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn metrics_line_format() {
        let mut out = Vec::new();
        write_metrics_line(&mut out, &StepMetrics { step: 3, lr: 0.5, mlm_loss: 1.0, nfp_loss: 0.25, total: 1.25 }).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "3\t0.5\t1.0\t0.25\t1.25\n");
        assert_eq!(METRICS_HEADER.split('\t').count(), 5);
    }
}
