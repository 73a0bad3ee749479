use rand::Rng;

use super::tensor::{gelu, gemm, matmul, softmax_in_place, Mat, ViewMut};
use super::{Model, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tokenizer::{SequenceExample, CLS};

/// Layer-norm intermediates needed for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub normed: Mat,
    pub inv_std: Vec<f64>,
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` per row.
pub(crate) fn layer_norm(x: &Mat, gamma: &Mat, beta: &Mat) -> (Mat, LnCache) {
    let (n, h) = x.shape();
    let mut normed = Mat::zeros(n, h);
    let mut out = Mat::zeros(n, h);
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(inv);
        let nr = normed.row_mut(i);
        for (o, v) in nr.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        let or = out.row_mut(i);
        for j in 0..h {
            or[j] = gamma.data()[j] * normed.get(i, j) + beta.data()[j];
        }
    }
    (out, LnCache { normed, inv_std })
}

/// Inverted dropout: returns the mask (already scaled by `1 / keep`).
fn dropout<R: Rng>(x: &mut Mat, rate: f64, rng: Option<&mut R>) -> Option<Vec<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    for (v, m) in x.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

#[derive(Debug, Clone)]
pub(crate) struct EmbedCache {
    pub ln: LnCache,
    pub dropout: Option<Vec<f64>>,
}

/// Intermediates of one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// State entering the layer.
    pub input: Mat,
    pub(crate) query: Mat,
    pub(crate) key: Mat,
    pub(crate) value: Mat,
    /// Per head, `N x N`; row `i` is the distribution position `i` attends with.
    pub attention: Vec<Mat>,
    pub(crate) context: Mat,
    pub(crate) attn_dropout: Option<Vec<f64>>,
    pub(crate) attn_ln: LnCache,
    /// State after the attention sub-block.
    pub attn_out: Mat,
    pub(crate) ffn_pre: Mat,
    pub(crate) ffn_act: Mat,
    pub(crate) ffn_dropout: Option<Vec<f64>>,
    pub(crate) ffn_ln: LnCache,
}

#[derive(Debug, Clone)]
pub(crate) struct SequenceIds {
    pub token: Vec<u32>,
    pub freq: Vec<u32>,
    pub time: Vec<u32>,
    pub antenna: Vec<u32>,
}

/// Everything a forward pass computed, kept for inspection and backward.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub(crate) ids: Option<SequenceIds>,
    pub(crate) embedding: Option<EmbedCache>,
    pub layers: Vec<LayerTrace>,
    /// Final hidden states, `N x H`.
    pub hidden: Mat,
    /// `tanh(pooler(hidden[0]))`.
    pub pooled: Vec<f64>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.rows() == 0
    }

    /// Final hidden state of the first (`[CLS]`) position.
    pub fn cls_state(&self) -> &[f64] {
        self.hidden.row(0)
    }

    /// Per-layer hidden states: the input to each layer followed by the final output.
    pub fn hidden_states(&self) -> Vec<&Mat> {
        self.layers.iter().map(|l| &l.input).chain(std::iter::once(&self.hidden)).collect()
    }
}

fn check_ids(name: &str, ids: &[u32], rows: usize) -> Result<()> {
    if let Some((i, &id)) = ids.iter().enumerate().find(|(_, &id)| id as usize >= rows) {
        return Err(Error::OutOfRange(format!("{name} id {id} at position {i} exceeds table size {rows}")));
    }
    Ok(())
}

pub(crate) fn embed<R: Rng>(model: &Model, seq: &SequenceExample, rng: Option<&mut R>) -> Result<(Mat, EmbedCache)> {
    let p = &model.params;
    let n = seq.len();
    if n == 0 {
        return Err(Error::config("empty sequence"));
    }
    if n > model.config.max_seq_len {
        return Err(Error::OutOfRange(format!(
            "sequence length {n} exceeds max_seq_len {}",
            model.config.max_seq_len
        )));
    }
    for v in [&seq.freq_ids, &seq.time_ids, &seq.antenna_ids] {
        if v.len() != n {
            return Err(Error::ShapeMismatch("domain id vectors differ in length".into()));
        }
    }
    check_ids("token", &seq.token_ids, p.token_embedding.rows())?;
    check_ids("freq", &seq.freq_ids, p.freq_embedding.rows())?;
    check_ids("time", &seq.time_ids, p.time_embedding.rows())?;
    check_ids("antenna", &seq.antenna_ids, p.antenna_embedding.rows())?;

    let h = model.config.hidden_size;
    let mut x = Mat::zeros(n, h);
    for i in 0..n {
        let row = x.row_mut(i);
        let sources = [
            p.token_embedding.row(seq.token_ids[i] as usize),
            p.freq_embedding.row(seq.freq_ids[i] as usize),
            p.time_embedding.row(seq.time_ids[i] as usize),
            p.antenna_embedding.row(seq.antenna_ids[i] as usize),
        ];
        for j in 0..h {
            row[j] = sources[0][j] + sources[1][j] + sources[2][j] + sources[3][j];
        }
    }
    let (mut out, ln) = layer_norm(&x, &p.embedding_ln_gamma, &p.embedding_ln_beta);
    let dropout = dropout(&mut out, model.config.dropout_rate, rng);
    Ok((out, EmbedCache { ln, dropout }))
}

fn linear(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut y = matmul(x.view(), w.view());
    y.add_row(b.data());
    y
}

pub(crate) fn encode<R: Rng>(
    model: &Model,
    states: Mat,
    ids: Option<(SequenceIds, EmbedCache)>,
    mut rng: Option<&mut R>,
) -> Result<ForwardTrace> {
    let cfg = &model.config;
    let (n, h) = states.shape();
    if h != cfg.hidden_size {
        return Err(Error::ShapeMismatch(format!("state width {h} != hidden size {}", cfg.hidden_size)));
    }
    if !states.is_finite() {
        return Err(Error::NonFinite("encoder input states".into()));
    }
    let heads = cfg.num_heads;
    let d = cfg.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut x = states;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (li, lp) in model.params.layers.iter().enumerate() {
        let query = linear(&x, &lp.query_w, &lp.query_b);
        let key = linear(&x, &lp.key_w, &lp.key_b);
        let value = linear(&x, &lp.value_w, &lp.value_b);
        let mut context = Mat::zeros(n, h);
        let mut attention = Vec::with_capacity(heads);
        for head in 0..heads {
            let mut scores = Mat::zeros(n, n);
            gemm(
                scale,
                query.cols_view(head * d, d),
                key.cols_view(head * d, d).t(),
                0.0,
                ViewMut::of(&mut scores),
            );
            for i in 0..n {
                softmax_in_place(scores.row_mut(i));
            }
            if !scores.is_finite() {
                return Err(Error::NonFiniteActivation { layer: li, head: Some(head) });
            }
            gemm(
                1.0,
                scores.view(),
                value.cols_view(head * d, d),
                0.0,
                ViewMut::cols_of(&mut context, head * d, d),
            );
            attention.push(scores);
        }
        let mut attn = linear(&context, &lp.output_w, &lp.output_b);
        let attn_dropout = dropout(&mut attn, cfg.dropout_rate, rng.as_deref_mut());
        attn.add_assign(&x);
        let (attn_out, attn_ln) = layer_norm(&attn, &lp.attn_ln_gamma, &lp.attn_ln_beta);

        let ffn_pre = linear(&attn_out, &lp.ffn_in_w, &lp.ffn_in_b);
        let mut ffn_act = ffn_pre.clone();
        ffn_act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let mut ffn = linear(&ffn_act, &lp.ffn_out_w, &lp.ffn_out_b);
        let ffn_dropout = dropout(&mut ffn, cfg.dropout_rate, rng.as_deref_mut());
        ffn.add_assign(&attn_out);
        let (out, ffn_ln) = layer_norm(&ffn, &lp.ffn_ln_gamma, &lp.ffn_ln_beta);
        if !out.is_finite() {
            return Err(Error::NonFiniteActivation { layer: li, head: None });
        }
        layers.push(LayerTrace {
            input: std::mem::replace(&mut x, out),
            query,
            key,
            value,
            attention,
            context,
            attn_dropout,
            attn_ln,
            attn_out,
            ffn_pre,
            ffn_act,
            ffn_dropout,
            ffn_ln,
        });
    }
    let p = &model.params;
    let pooled: Vec<f64> = {
        let first = Mat::row_vector(x.row(0).to_vec());
        linear(&first, &p.pooler_w, &p.pooler_b)
            .into_vec()
            .into_iter()
            .map(f64::tanh)
            .collect()
    };
    let (ids, embedding) = match ids {
        Some((ids, cache)) => (Some(ids), Some(cache)),
        None => (None, None),
    };
    Ok(ForwardTrace {
        ids,
        embedding,
        layers,
        hidden: x,
        pooled,
    })
}

pub(crate) fn forward<R: Rng>(model: &Model, seq: &SequenceExample, mut rng: Option<&mut R>) -> Result<ForwardTrace> {
    let (states, cache) = embed(model, seq, rng.as_deref_mut())?;
    let ids = SequenceIds {
        token: seq.token_ids.clone(),
        freq: seq.freq_ids.clone(),
        time: seq.time_ids.clone(),
        antenna: seq.antenna_ids.clone(),
    };
    encode(model, states, Some((ids, cache)), rng)
}

pub(crate) fn mlm_logits(model: &Model, trace: &ForwardTrace, positions: &[usize]) -> Result<Mat> {
    let n = trace.len();
    if let Some(&bad) = positions.iter().find(|&&p| p >= n) {
        return Err(Error::OutOfRange(format!("position {bad} of {n}")));
    }
    let h = model.config.hidden_size;
    let mut rows = Mat::zeros(positions.len(), h);
    for (r, &pos) in positions.iter().enumerate() {
        rows.row_mut(r).copy_from_slice(trace.hidden.row(pos));
    }
    let p = &model.params;
    let mut logits = if model.config.tie_mlm_weights {
        matmul(rows.view(), p.token_embedding.view().t())
    } else {
        matmul(rows.view(), p.mlm_w.view())
    };
    logits.add_row(p.mlm_b.data());
    Ok(logits)
}

pub(crate) fn nfp_logits(model: &Model, trace: &ForwardTrace) -> Result<[f64; 2]> {
    if let Some(ids) = &trace.ids {
        if ids.token.first() != Some(&CLS) {
            return Err(Error::config("sequence does not start with [CLS]"));
        }
    }
    let p = &model.params;
    let mut out = [p.nfp_b.data()[0], p.nfp_b.data()[1]];
    for (j, &v) in trace.pooled.iter().enumerate() {
        out[0] += v * p.nfp_w.get(j, 0);
        out[1] += v * p.nfp_w.get(j, 1);
    }
    Ok(out)
}
