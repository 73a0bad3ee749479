use super::forward::{ForwardTrace, LnCache};
use super::tensor::{gelu_grad, gemm, matmul, Mat, ViewMut};
use super::{Model, ModelParameters};
use crate::error::{Error, Result};

/// Partial derivatives of a scalar loss with respect to head outputs.
#[derive(Debug, Clone, Default)]
pub struct LossGrads {
    /// `(position, dL/dlogits)` rows for the MLM head.
    pub mlm: Vec<(usize, Vec<f64>)>,
    /// `dL/d nfp_logits`.
    pub nfp: Option<[f64; 2]>,
    /// Extra `dL/d pooled` from heads living outside the model.
    pub pooled: Option<Vec<f64>>,
}

/// Returns `dL/dx` and accumulates `dL/dgamma`, `dL/dbeta`.
fn layer_norm_backward(cache: &LnCache, gamma: &Mat, dy: &Mat, dgamma: &mut Mat, dbeta: &mut Mat) -> Mat {
    let (n, h) = dy.shape();
    let mut dx = Mat::zeros(n, h);
    let g = gamma.data();
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.normed.row(i);
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..h {
            dgamma.data_mut()[j] += dyr[j] * xh[j];
            dbeta.data_mut()[j] += dyr[j];
            let dxh = dyr[j] * g[j];
            mean_d += dxh;
            mean_dx += dxh * xh[j];
        }
        mean_d /= h as f64;
        mean_dx /= h as f64;
        let inv = cache.inv_std[i];
        let out = dx.row_mut(i);
        for j in 0..h {
            out[j] = inv * (dyr[j] * g[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

fn apply_mask(x: &mut Mat, mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, k) in x.data_mut().iter_mut().zip(m) {
            *v *= k;
        }
    }
}

/// `dW += x^T dy`, `db += colsum(dy)`, returns `dy W^T`.
fn linear_backward(x: &Mat, w: &Mat, dy: &Mat, dw: &mut Mat, db: &mut Mat) -> Mat {
    gemm(1.0, x.view().t(), dy.view(), 1.0, ViewMut::of(dw));
    dy.col_sums_into(db.data_mut());
    matmul(dy.view(), w.view().t())
}

pub(crate) fn backward(model: &Model, trace: &ForwardTrace, grads: &LossGrads) -> Result<ModelParameters> {
    let cfg = &model.config;
    let p = &model.params;
    if trace.layers.len() != cfg.num_layers || trace.hidden.cols() != cfg.hidden_size {
        return Err(Error::ShapeMismatch("trace was not produced by this model".into()));
    }
    let (n, h) = trace.hidden.shape();
    let mut g = p.zeros_like();

    // Heads.
    let mut d_hidden = Mat::zeros(n, h);
    for (pos, dlogits) in &grads.mlm {
        if *pos >= n || dlogits.len() != cfg.vocab_size {
            return Err(Error::ShapeMismatch(format!("mlm gradient row for position {pos}")));
        }
        let hrow = trace.hidden.row(*pos).to_vec();
        let dh = d_hidden.row_mut(*pos);
        if cfg.tie_mlm_weights {
            for (v, &dl) in dlogits.iter().enumerate() {
                if dl == 0.0 {
                    continue;
                }
                let erow = p.token_embedding.row(v);
                let grow = g.token_embedding.row_mut(v);
                for j in 0..h {
                    dh[j] += dl * erow[j];
                    grow[j] += dl * hrow[j];
                }
            }
        } else {
            for j in 0..h {
                let wrow = p.mlm_w.row(j);
                dh[j] += wrow.iter().zip(dlogits).map(|(w, d)| w * d).sum::<f64>();
                let grow = g.mlm_w.row_mut(j);
                for (gw, d) in grow.iter_mut().zip(dlogits) {
                    *gw += hrow[j] * d;
                }
            }
        }
        for (gb, d) in g.mlm_b.data_mut().iter_mut().zip(dlogits) {
            *gb += d;
        }
    }

    let mut d_pooled = vec![0.0; h];
    if let Some(extra) = &grads.pooled {
        if extra.len() != h {
            return Err(Error::ShapeMismatch("pooled gradient width".into()));
        }
        for (a, b) in d_pooled.iter_mut().zip(extra) {
            *a += b;
        }
    }
    if let Some(dn) = grads.nfp {
        for j in 0..h {
            d_pooled[j] += p.nfp_w.get(j, 0) * dn[0] + p.nfp_w.get(j, 1) * dn[1];
            let gr = g.nfp_w.row_mut(j);
            gr[0] += trace.pooled[j] * dn[0];
            gr[1] += trace.pooled[j] * dn[1];
        }
        g.nfp_b.data_mut()[0] += dn[0];
        g.nfp_b.data_mut()[1] += dn[1];
    }
    if d_pooled.iter().any(|&v| v != 0.0) {
        let d_pre: Vec<f64> = d_pooled
            .iter()
            .zip(&trace.pooled)
            .map(|(d, y)| d * (1.0 - y * y))
            .collect();
        let cls = Mat::row_vector(trace.hidden.row(0).to_vec());
        let d_pre = Mat::row_vector(d_pre);
        let d_cls = linear_backward(&cls, &p.pooler_w, &d_pre, &mut g.pooler_w, &mut g.pooler_b);
        for (a, b) in d_hidden.row_mut(0).iter_mut().zip(d_cls.data()) {
            *a += b;
        }
    }

    // Encoder stack.
    let heads = cfg.num_heads;
    let d = cfg.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut dx = d_hidden;
    for (li, lt) in trace.layers.iter().enumerate().rev() {
        let lp = &p.layers[li];
        let lg = &mut g.layers[li];

        let d_res2 = layer_norm_backward(&lt.ffn_ln, &lp.ffn_ln_gamma, &dx, &mut lg.ffn_ln_gamma, &mut lg.ffn_ln_beta);
        let mut d_ffn = d_res2.clone();
        apply_mask(&mut d_ffn, &lt.ffn_dropout);
        let mut d_act = linear_backward(&lt.ffn_act, &lp.ffn_out_w, &d_ffn, &mut lg.ffn_out_w, &mut lg.ffn_out_b);
        for (da, &pre) in d_act.data_mut().iter_mut().zip(lt.ffn_pre.data()) {
            *da *= gelu_grad(pre);
        }
        let mut d_attn_out = linear_backward(&lt.attn_out, &lp.ffn_in_w, &d_act, &mut lg.ffn_in_w, &mut lg.ffn_in_b);
        d_attn_out.add_assign(&d_res2);

        let d_res1 = layer_norm_backward(&lt.attn_ln, &lp.attn_ln_gamma, &d_attn_out, &mut lg.attn_ln_gamma, &mut lg.attn_ln_beta);
        let mut d_o = d_res1.clone();
        apply_mask(&mut d_o, &lt.attn_dropout);
        let d_context = linear_backward(&lt.context, &lp.output_w, &d_o, &mut lg.output_w, &mut lg.output_b);

        let mut dq = Mat::zeros(n, h);
        let mut dk = Mat::zeros(n, h);
        let mut dv = Mat::zeros(n, h);
        for head in 0..heads {
            let probs = &lt.attention[head];
            let dctx = d_context.cols_view(head * d, d);
            // dV_h = P^T dC_h
            gemm(1.0, probs.view().t(), dctx, 0.0, ViewMut::cols_of(&mut dv, head * d, d));
            // dP = dC_h V_h^T
            let mut ds = matmul(dctx, lt.value.cols_view(head * d, d).t());
            for i in 0..n {
                let pr = probs.row(i);
                let row = ds.row_mut(i);
                let dot: f64 = row.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (x, &pv) in row.iter_mut().zip(pr) {
                    *x = pv * (*x - dot) * scale;
                }
            }
            gemm(1.0, ds.view(), lt.key.cols_view(head * d, d), 0.0, ViewMut::cols_of(&mut dq, head * d, d));
            gemm(1.0, ds.view().t(), lt.query.cols_view(head * d, d), 0.0, ViewMut::cols_of(&mut dk, head * d, d));
        }
        let mut d_in = d_res1;
        d_in.add_assign(&linear_backward(&lt.input, &lp.query_w, &dq, &mut lg.query_w, &mut lg.query_b));
        d_in.add_assign(&linear_backward(&lt.input, &lp.key_w, &dk, &mut lg.key_w, &mut lg.key_b));
        d_in.add_assign(&linear_backward(&lt.input, &lp.value_w, &dv, &mut lg.value_w, &mut lg.value_b));
        dx = d_in;
    }

    // Embeddings.
    if let (Some(ids), Some(cache)) = (&trace.ids, &trace.embedding) {
        apply_mask(&mut dx, &cache.dropout);
        let d_sum = layer_norm_backward(&cache.ln, &p.embedding_ln_gamma, &dx, &mut g.embedding_ln_gamma, &mut g.embedding_ln_beta);
        for i in 0..n {
            let row = d_sum.row(i);
            for (table, id) in [
                (&mut g.token_embedding, ids.token[i]),
                (&mut g.freq_embedding, ids.freq[i]),
                (&mut g.time_embedding, ids.time[i]),
                (&mut g.antenna_embedding, ids.antenna[i]),
            ] {
                for (a, b) in table.row_mut(id as usize).iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
    }
    Ok(g)
}
