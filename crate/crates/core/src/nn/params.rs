use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Mat;
use super::ModelConfig;
use crate::rng::{self, Stream};

/// Weights of one encoder layer. Projections are stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub query_w: Mat,
    pub query_b: Mat,
    pub key_w: Mat,
    pub key_b: Mat,
    pub value_w: Mat,
    pub value_b: Mat,
    pub output_w: Mat,
    pub output_b: Mat,
    pub attn_ln_gamma: Mat,
    pub attn_ln_beta: Mat,
    pub ffn_in_w: Mat,
    pub ffn_in_b: Mat,
    pub ffn_out_w: Mat,
    pub ffn_out_b: Mat,
    pub ffn_ln_gamma: Mat,
    pub ffn_ln_beta: Mat,
}

/// All trainable tensors. The same type doubles as a gradient container.
///
/// Row 0 of each domain table is the "none" feature used by special tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub token_embedding: Mat,
    pub freq_embedding: Mat,
    pub time_embedding: Mat,
    pub antenna_embedding: Mat,
    pub embedding_ln_gamma: Mat,
    pub embedding_ln_beta: Mat,
    pub layers: Vec<LayerParams>,
    pub pooler_w: Mat,
    pub pooler_b: Mat,
    pub mlm_w: Mat,
    pub mlm_b: Mat,
    pub nfp_w: Mat,
    pub nfp_b: Mat,
}

impl LayerParams {
    fn zeros(h: usize, ffn: usize) -> Self {
        let sq = || Mat::zeros(h, h);
        let row = |n| Mat::zeros(1, n);
        Self {
            query_w: sq(),
            query_b: row(h),
            key_w: sq(),
            key_b: row(h),
            value_w: sq(),
            value_b: row(h),
            output_w: sq(),
            output_b: row(h),
            attn_ln_gamma: row(h),
            attn_ln_beta: row(h),
            ffn_in_w: Mat::zeros(h, ffn),
            ffn_in_b: row(ffn),
            ffn_out_w: Mat::zeros(ffn, h),
            ffn_out_b: row(h),
            ffn_ln_gamma: row(h),
            ffn_ln_beta: row(h),
        }
    }

    pub fn named(&self) -> [(&'static str, &Mat); 16] {
        [
            ("attention.query.weight", &self.query_w),
            ("attention.query.bias", &self.query_b),
            ("attention.key.weight", &self.key_w),
            ("attention.key.bias", &self.key_b),
            ("attention.value.weight", &self.value_w),
            ("attention.value.bias", &self.value_b),
            ("attention.output.weight", &self.output_w),
            ("attention.output.bias", &self.output_b),
            ("attention.layer_norm.gamma", &self.attn_ln_gamma),
            ("attention.layer_norm.beta", &self.attn_ln_beta),
            ("ffn.intermediate.weight", &self.ffn_in_w),
            ("ffn.intermediate.bias", &self.ffn_in_b),
            ("ffn.output.weight", &self.ffn_out_w),
            ("ffn.output.bias", &self.ffn_out_b),
            ("ffn.layer_norm.gamma", &self.ffn_ln_gamma),
            ("ffn.layer_norm.beta", &self.ffn_ln_beta),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Mat); 16] {
        [
            ("attention.query.weight", &mut self.query_w),
            ("attention.query.bias", &mut self.query_b),
            ("attention.key.weight", &mut self.key_w),
            ("attention.key.bias", &mut self.key_b),
            ("attention.value.weight", &mut self.value_w),
            ("attention.value.bias", &mut self.value_b),
            ("attention.output.weight", &mut self.output_w),
            ("attention.output.bias", &mut self.output_b),
            ("attention.layer_norm.gamma", &mut self.attn_ln_gamma),
            ("attention.layer_norm.beta", &mut self.attn_ln_beta),
            ("ffn.intermediate.weight", &mut self.ffn_in_w),
            ("ffn.intermediate.bias", &mut self.ffn_in_b),
            ("ffn.output.weight", &mut self.ffn_out_w),
            ("ffn.output.bias", &mut self.ffn_out_b),
            ("ffn.layer_norm.gamma", &mut self.ffn_ln_gamma),
            ("ffn.layer_norm.beta", &mut self.ffn_ln_beta),
        ]
    }
}

impl ModelParameters {
    /// All-zero tensors shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden_size;
        Self {
            token_embedding: Mat::zeros(config.vocab_size, h),
            freq_embedding: Mat::zeros(config.max_freq_features + 1, h),
            time_embedding: Mat::zeros(config.max_time_features + 1, h),
            antenna_embedding: Mat::zeros(config.max_antenna_features + 1, h),
            embedding_ln_gamma: Mat::zeros(1, h),
            embedding_ln_beta: Mat::zeros(1, h),
            layers: (0..config.num_layers)
                .map(|_| LayerParams::zeros(h, config.ffn_size))
                .collect(),
            pooler_w: Mat::zeros(h, h),
            pooler_b: Mat::zeros(1, h),
            mlm_w: Mat::zeros(h, config.vocab_size),
            mlm_b: Mat::zeros(1, config.vocab_size),
            nfp_w: Mat::zeros(h, 2),
            nfp_b: Mat::zeros(1, 2),
        }
    }

    /// Truncated normal (std 0.02, cut at two deviations) weights, zero
    /// biases, unit layer-norm scales.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(config);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        for (index, (name, t)) in p.named_mut().into_iter().enumerate() {
            if name.ends_with("gamma") {
                t.fill(1.0);
            } else if name.ends_with("weight") || name.starts_with("embeddings.") && !name.contains("layer_norm") {
                let mut rng = rng::keyed(seed, Stream::Init, index as u64, 0);
                for x in t.data_mut() {
                    *x = loop {
                        let v: f64 = normal.sample(&mut rng);
                        if v.abs() <= 0.04 {
                            break v;
                        }
                    };
                }
            }
        }
        p
    }

    /// Tensors in checkpoint order with their names.
    pub fn named(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![
            ("embeddings.token".into(), &self.token_embedding),
            ("embeddings.freq".into(), &self.freq_embedding),
            ("embeddings.time".into(), &self.time_embedding),
            ("embeddings.antenna".into(), &self.antenna_embedding),
            ("embeddings.layer_norm.gamma".into(), &self.embedding_ln_gamma),
            ("embeddings.layer_norm.beta".into(), &self.embedding_ln_beta),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named().into_iter().map(|(n, t)| (format!("layer.{i}.{n}"), t)));
        }
        out.extend([
            ("pooler.weight".into(), &self.pooler_w),
            ("pooler.bias".into(), &self.pooler_b),
            ("mlm.weight".into(), &self.mlm_w),
            ("mlm.bias".into(), &self.mlm_b),
            ("nfp.weight".into(), &self.nfp_w),
            ("nfp.bias".into(), &self.nfp_b),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = vec![
            ("embeddings.token".into(), &mut self.token_embedding),
            ("embeddings.freq".into(), &mut self.freq_embedding),
            ("embeddings.time".into(), &mut self.time_embedding),
            ("embeddings.antenna".into(), &mut self.antenna_embedding),
            ("embeddings.layer_norm.gamma".into(), &mut self.embedding_ln_gamma),
            ("embeddings.layer_norm.beta".into(), &mut self.embedding_ln_beta),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.named_mut().into_iter().map(|(n, t)| (format!("layer.{i}.{n}"), t)));
        }
        out.extend([
            ("pooler.weight".into(), &mut self.pooler_w),
            ("pooler.bias".into(), &mut self.pooler_b),
            ("mlm.weight".into(), &mut self.mlm_w),
            ("mlm.bias".into(), &mut self.mlm_b),
            ("nfp.weight".into(), &mut self.nfp_w),
            ("nfp.bias".into(), &mut self.nfp_b),
        ]);
        out
    }

    pub fn tensors(&self) -> Vec<&Mat> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        self.named_mut().into_iter().map(|(_, t)| t).collect()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(s));
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sum_sq()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Shapes agree tensor by tensor.
    pub fn same_shape(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }
}

/// Random gaussian fill used by tests.
pub fn randomize(params: &mut ModelParameters, seed: u64, std: f64) {
    let mut rng = rng::keyed(seed, Stream::Init, u64::MAX, 1);
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x = std * (rng.gen::<f64>() * 2.0 - 1.0) * 3f64.sqrt();
        }
    }
}
