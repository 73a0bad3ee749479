//! Transformer encoder over multi-domain channel embeddings.
//!
//! The input state of each position is the sum of its token embedding and
//! its frequency, time and antenna feature embeddings. There is no separate
//! sequential position embedding: the three domain ids locate every channel
//! token. Layers are post-norm BERT blocks with GELU feed-forward networks.

mod backward;
mod checkpoint;
mod forward;
mod gradcheck;
mod params;
pub mod tensor;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tokenizer::SequenceExample;

pub use backward::LossGrads;
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, ExtraTensor, CHECKPOINT_MAGIC};
pub use forward::{ForwardTrace, LayerTrace};
pub use gradcheck::{gradcheck_config, gradient_check, TensorCheck};
pub use params::{randomize, LayerParams, ModelParameters};
pub use tensor::Mat;

pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_freq_features: usize,
    pub max_time_features: usize,
    pub max_antenna_features: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    /// Share the token embedding as the MLM output projection.
    pub tie_mlm_weights: bool,
}

impl ModelConfig {
    /// 12 layers, 12 heads, hidden size 768 over 200 subcarriers x 2 frames
    /// x 2 antennas.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            ffn_size: 3072,
            vocab_size,
            max_freq_features: 200,
            max_time_features: 2,
            max_antenna_features: 2,
            max_seq_len: 805,
            dropout_rate: 0.1,
            tie_mlm_weights: false,
        }
    }

    /// Small configuration for single-machine runs: 16 subcarriers, 2
    /// frames, 2 antennas (sequence length 69).
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ffn_size: 256,
            vocab_size,
            max_freq_features: 16,
            max_time_features: 2,
            max_antenna_features: 2,
            max_seq_len: 69,
            dropout_rate: 0.0,
            tie_mlm_weights: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("max_freq_features", self.max_freq_features),
            ("max_time_features", self.max_time_features),
            ("max_antenna_features", self.max_antenna_features),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParameters,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParameters) -> Result<Self> {
        config.validate()?;
        if !params.same_shape(&ModelParameters::zeros(&config)) {
            return Err(Error::ShapeMismatch("parameters do not match model config".into()));
        }
        Ok(Self { config, params })
    }

    /// Freshly initialized model.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParameters::init(&config, seed);
        Ok(Self { config, params })
    }

    /// Evaluation-mode forward pass (no dropout).
    pub fn forward(&self, seq: &SequenceExample) -> Result<ForwardTrace> {
        self.forward_with::<rand_chacha::ChaCha8Rng>(seq, None)
    }

    /// Forward pass; dropout masks are drawn from `rng` when it is given
    /// and the configured rate is positive.
    pub fn forward_with<R: Rng>(&self, seq: &SequenceExample, rng: Option<&mut R>) -> Result<ForwardTrace> {
        forward::forward(self, seq, rng)
    }

    /// Post-layer-norm embedding states, one row per position.
    pub fn embed(&self, seq: &SequenceExample) -> Result<Mat> {
        forward::embed(self, seq, None::<&mut rand_chacha::ChaCha8Rng>).map(|(states, _)| states)
    }

    /// Runs the encoder stack on precomputed input states.
    pub fn encode(&self, states: Mat) -> Result<ForwardTrace> {
        forward::encode(self, states, None, None::<&mut rand_chacha::ChaCha8Rng>)
    }

    /// Vocabulary logits for `positions`, one row each.
    pub fn mlm_logits(&self, trace: &ForwardTrace, positions: &[usize]) -> Result<Mat> {
        forward::mlm_logits(self, trace, positions)
    }

    /// Next-frame logits `[not consecutive, consecutive]` from the pooled
    /// `[CLS]` state.
    pub fn nfp_logits(&self, trace: &ForwardTrace) -> Result<[f64; 2]> {
        forward::nfp_logits(self, trace)
    }

    /// Exact gradients of a scalar loss whose partial derivatives with
    /// respect to the head outputs are `grads`.
    pub fn backward(&self, trace: &ForwardTrace, grads: &LossGrads) -> Result<ModelParameters> {
        backward::backward(self, trace, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{SequenceLayout, CLS, SEP};

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_size: 16,
            num_heads: 2,
            ffn_size: 32,
            vocab_size: 32,
            max_freq_features: 4,
            max_time_features: 2,
            max_antenna_features: 2,
            max_seq_len: 32,
            dropout_rate: 0.0,
            tie_mlm_weights: false,
        }
    }

    fn seq() -> SequenceExample {
        SequenceLayout::pair(4, 2).build(|s, a, k| (5 + s * 9 + a * 4 + k) as u32)
    }

    fn model(seed: u64) -> Model {
        let mut m = Model::init(tiny(), seed).unwrap();
        randomize(&mut m.params, seed, 0.2);
        for l in &mut m.params.layers {
            l.attn_ln_gamma.fill(1.0);
            l.ffn_ln_gamma.fill(1.0);
        }
        m.params.embedding_ln_gamma.fill(1.0);
        m
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { num_heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { dropout_rate: 1.0, ..tiny() }.validate().is_err());
        assert!(ModelConfig { vocab_size: 0, ..tiny() }.validate().is_err());
        ModelConfig::base(18000).validate().unwrap();
        ModelConfig::desk(512).validate().unwrap();
    }

    #[test]
    fn base_model_size() {
        // embeddings aside, the encoder stack matches a 12-layer 768-wide BERT
        let p = ModelParameters::zeros(&ModelConfig::base(18000));
        let per_layer = p.layers[0].named().iter().map(|(_, t)| t.len()).sum::<usize>();
        assert_eq!(per_layer, 7_087_872);
    }

    #[test]
    fn zero_tables_embed_to_layer_norm_of_zero() {
        let mut m = model(1);
        m.params.token_embedding.fill(0.0);
        m.params.freq_embedding.fill(0.0);
        m.params.time_embedding.fill(0.0);
        m.params.antenna_embedding.fill(0.0);
        let states = m.embed(&seq()).unwrap();
        for i in 0..states.rows() {
            assert_eq!(states.row(i), m.params.embedding_ln_beta.data());
        }
    }

    #[test]
    fn identical_ids_identical_rows() {
        let m = model(2);
        let mut s = seq();
        s.token_ids[2] = s.token_ids[1];
        s.freq_ids[2] = s.freq_ids[1];
        let states = m.embed(&s).unwrap();
        assert_eq!(states.row(1), states.row(2));
    }

    #[test]
    fn freq_row_perturbation_is_local() {
        let m = model(3);
        let s = seq();
        let base = m.embed(&s).unwrap();
        let mut p = m.clone();
        p.params.freq_embedding.row_mut(2).iter_mut().for_each(|x| *x += 0.5);
        let moved = p.embed(&s).unwrap();
        for i in 0..s.len() {
            let changed = base.row(i) != moved.row(i);
            assert_eq!(changed, s.freq_ids[i] == 2, "position {i}");
        }
    }

    #[test]
    fn rejects_out_of_table_ids() {
        let m = model(1);
        let mut s = seq();
        s.freq_ids[1] = 5;
        assert!(matches!(m.forward(&s), Err(Error::OutOfRange(_))));
        let mut s = seq();
        s.token_ids[1] = 32;
        assert!(m.forward(&s).is_err());
    }

    #[test]
    fn single_position_attention_is_one() {
        let m = model(4);
        let s = SequenceExample {
            token_ids: vec![CLS],
            freq_ids: vec![0],
            time_ids: vec![0],
            antenna_ids: vec![0],
            is_special: vec![true],
        };
        let t = m.forward(&s).unwrap();
        for l in &t.layers {
            for a in &l.attention {
                assert_eq!(a.shape(), (1, 1));
                assert!((a.get(0, 0) - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = model(5);
        let t = m.forward(&seq()).unwrap();
        assert_eq!(t.layers.len(), 2);
        for l in &t.layers {
            assert_eq!(l.attention.len(), 2);
            for a in &l.attention {
                for i in 0..a.rows() {
                    assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
        assert_eq!(t.hidden_states().len(), 3);
    }

    #[test]
    fn zero_blocks_pass_states_through() {
        let mut m = model(6);
        for l in &mut m.params.layers {
            for (name, t) in l.named_mut() {
                if name.ends_with("gamma") {
                    t.fill(1.0);
                } else {
                    t.fill(0.0);
                }
            }
        }
        m.params.embedding_ln_gamma.fill(1.0);
        m.params.embedding_ln_beta.fill(0.0);
        let states = m.embed(&seq()).unwrap();
        let t = m.encode(states.clone()).unwrap();
        for (a, b) in t.hidden.data().iter().zip(states.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn head_contracts() {
        let mut m = model(7);
        m.params.mlm_w.fill(0.0);
        m.params.mlm_b.data_mut().iter_mut().enumerate().for_each(|(i, b)| *b = i as f64 * 0.1);
        m.params.nfp_w.fill(0.0);
        m.params.nfp_b.data_mut().copy_from_slice(&[0.3, -0.3]);
        let t = m.forward(&seq()).unwrap();
        let logits = m.mlm_logits(&t, &[1, 4, 7]).unwrap();
        assert_eq!(logits.shape(), (3, 32));
        for r in 0..3 {
            assert_eq!(logits.row(r), m.params.mlm_b.data());
        }
        assert_eq!(m.nfp_logits(&t).unwrap(), [0.3, -0.3]);
        assert!(m.mlm_logits(&t, &[99]).is_err());
    }

    #[test]
    fn mlm_softmax_sums_to_one() {
        let m = model(8);
        let t = m.forward(&seq()).unwrap();
        let logits = m.mlm_logits(&t, &[1, 2, 3]).unwrap();
        for r in 0..3 {
            let mut row = logits.row(r).to_vec();
            tensor::softmax_in_place(&mut row);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn nfp_requires_cls_and_is_deterministic() {
        let m = model(9);
        let a = m.nfp_logits(&m.forward(&seq()).unwrap()).unwrap();
        let b = m.nfp_logits(&m.forward(&seq()).unwrap()).unwrap();
        assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        let mut s = seq();
        s.token_ids[0] = SEP;
        let t = m.forward(&s).unwrap();
        assert!(m.nfp_logits(&t).is_err());
    }

    #[test]
    fn swapping_positions_permutes_outputs() {
        let m = model(10);
        let s = seq();
        let t = m.forward(&s).unwrap();
        let (i, j) = (2, 12);
        let mut w = s.clone();
        for v in [&mut w.token_ids, &mut w.freq_ids, &mut w.time_ids, &mut w.antenna_ids] {
            v.swap(i, j);
        }
        w.is_special.swap(i, j);
        let u = m.forward(&w).unwrap();
        for r in 0..s.len() {
            let src = if r == i { j } else if r == j { i } else { r };
            for (a, b) in u.hidden.row(r).iter().zip(t.hidden.row(src)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_leaves_params_untouched() {
        let m = model(11);
        let before = m.params.clone();
        let t = m.forward(&seq()).unwrap();
        let _ = m.backward(&t, &LossGrads { nfp: Some([1.0, -1.0]), ..Default::default() }).unwrap();
        assert_eq!(m.params, before);
    }
}
