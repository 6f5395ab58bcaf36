//! Exact reverse-mode gradients for the forward pass in `forward.rs`.
//!
//! Gradients accumulate (+=) into a caller-owned `ModelParams`-shaped
//! container, so a batch is just repeated calls with the same accumulator.

use super::forward::{gelu_grad, tri_offset, ForwardTrace};
use super::ModelParams;
use crate::error::{Error, Result};

/// dW[r,c] += dy[r] * x[c]
fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        let row = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            row[c] += g * x[c];
        }
    }
}

/// dx[c] += sum_r dy[r] * w[r,c]
fn matvec_t_acc(w: &[f64], dy: &[f64], dx: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for c in 0..cols {
            dx[c] += g * row[c];
        }
    }
}

/// LayerNorm backward for one row. Adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_bwd_row(
    dy: &[f64],
    hat: &[f64],
    rstd: f64,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dx: &mut [f64],
    d: usize,
) {
    let mut sum_dxhat = 0.0;
    let mut sum_dxhat_hat = 0.0;
    for i in 0..d {
        dgain[i] += dy[i] * hat[i];
        dbias[i] += dy[i];
        let dxhat = dy[i] * gain[i];
        sum_dxhat += dxhat;
        sum_dxhat_hat += dxhat * hat[i];
    }
    let m1 = sum_dxhat / d as f64;
    let m2 = sum_dxhat_hat / d as f64;
    for i in 0..d {
        let dxhat = dy[i] * gain[i];
        dx[i] += rstd * (dxhat - m1 - hat[i] * m2);
    }
}

/// Backpropagate dLoss/dLogits (flattened [T * V]) through the trace,
/// accumulating parameter gradients into `grads`.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    dlogits: &[f64],
    grads: &mut ModelParams,
) -> Result<()> {
    let cfg = &params.config;
    let (d, v, f) = (cfg.d_model, cfg.vocab_size, cfg.d_ff);
    let t_len = trace.seq_len();
    let n_heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    if dlogits.len() != t_len * v {
        return Err(Error::data(format!(
            "backward: dlogits length {} does not match trace ({} x {})",
            dlogits.len(),
            t_len,
            v
        )));
    }
    if grads.config != params.config {
        return Err(Error::config(
            "backward: gradient container config mismatch",
        ));
    }

    // Output head and final norm.
    let mut dx = vec![0.0; t_len * d];
    {
        let mut d_fn_out = vec![0.0; t_len * d];
        for t in 0..t_len {
            let dl = &dlogits[t * v..(t + 1) * v];
            outer_acc(
                &mut grads.head.data,
                dl,
                &trace.fn_out[t * d..(t + 1) * d],
                v,
                d,
            );
            matvec_t_acc(
                &params.head.data,
                dl,
                &mut d_fn_out[t * d..(t + 1) * d],
                v,
                d,
            );
        }
        for t in 0..t_len {
            layer_norm_bwd_row(
                &d_fn_out[t * d..(t + 1) * d],
                &trace.fn_hat[t * d..(t + 1) * d],
                trace.fn_rstd[t],
                &params.final_norm.gain.data,
                &mut grads.final_norm.gain.data,
                &mut grads.final_norm.bias.data,
                &mut dx[t * d..(t + 1) * d],
                d,
            );
        }
    }

    for (layer, (lp, lt)) in params
        .layers
        .iter()
        .zip(trace.layers.iter())
        .enumerate()
        .rev()
    {
        let lg = &mut grads.layers[layer];

        // MLP block: x_out = x_mid + W_down . gelu(W_up . LN2(x_mid))
        let mut d_x_mid = dx.clone(); // residual branch
        {
            let mut d_mn = vec![0.0; t_len * d];
            let mut d_u1 = vec![0.0; f];
            let mut d_h1 = vec![0.0; f];
            for t in 0..t_len {
                let dxo = &dx[t * d..(t + 1) * d];
                outer_acc(&mut lg.w_down.data, dxo, &lt.h1[t * f..(t + 1) * f], d, f);
                d_h1.iter_mut().for_each(|x| *x = 0.0);
                matvec_t_acc(&lp.w_down.data, dxo, &mut d_h1, d, f);
                for j in 0..f {
                    d_u1[j] = d_h1[j] * gelu_grad(lt.u1[t * f + j]);
                }
                outer_acc(&mut lg.w_up.data, &d_u1, &lt.mn[t * d..(t + 1) * d], f, d);
                matvec_t_acc(&lp.w_up.data, &d_u1, &mut d_mn[t * d..(t + 1) * d], f, d);
            }
            for t in 0..t_len {
                layer_norm_bwd_row(
                    &d_mn[t * d..(t + 1) * d],
                    &lt.mn_hat[t * d..(t + 1) * d],
                    lt.mn_rstd[t],
                    &lp.mlp_norm.gain.data,
                    &mut lg.mlp_norm.gain.data,
                    &mut lg.mlp_norm.bias.data,
                    &mut d_x_mid[t * d..(t + 1) * d],
                    d,
                );
            }
        }

        // Attention block: x_mid = x_in + Wo . heads(LN1(x_in))
        let mut d_x_in = d_x_mid.clone(); // residual branch
        {
            let mut d_ho = vec![0.0; t_len * d];
            for t in 0..t_len {
                let dxm = &d_x_mid[t * d..(t + 1) * d];
                outer_acc(&mut lg.wo.data, dxm, &lt.ho[t * d..(t + 1) * d], d, d);
                matvec_t_acc(&lp.wo.data, dxm, &mut d_ho[t * d..(t + 1) * d], d, d);
            }

            let mut d_q = vec![0.0; t_len * d];
            let mut d_k = vec![0.0; t_len * d];
            let mut d_v = vec![0.0; t_len * d];
            for h in 0..n_heads {
                let hoff = h * hd;
                let aw = &lt.attn_w[h];
                for t in 0..t_len {
                    let row = &aw[tri_offset(t)..tri_offset(t) + t + 1];
                    let dh = &d_ho[t * d + hoff..t * d + hoff + hd];
                    // Value gradients and raw weight gradients.
                    let mut d_w = vec![0.0; t + 1];
                    for (u, &w) in row.iter().enumerate() {
                        let vs = &lt.v[u * d + hoff..u * d + hoff + hd];
                        let dv = &mut d_v[u * d + hoff..u * d + hoff + hd];
                        let mut dot = 0.0;
                        for i in 0..hd {
                            dv[i] += w * dh[i];
                            dot += dh[i] * vs[i];
                        }
                        d_w[u] = dot;
                    }
                    // Softmax backward on row t.
                    let pivot: f64 = row.iter().zip(&d_w).map(|(w, g)| w * g).sum();
                    let qs = &lt.q[t * d + hoff..t * d + hoff + hd];
                    for (u, &w) in row.iter().enumerate() {
                        let ds = w * (d_w[u] - pivot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ks = &lt.k[u * d + hoff..u * d + hoff + hd];
                        let dq = &mut d_q[t * d + hoff..t * d + hoff + hd];
                        for i in 0..hd {
                            dq[i] += ds * ks[i];
                        }
                        let dk = &mut d_k[u * d + hoff..u * d + hoff + hd];
                        for i in 0..hd {
                            dk[i] += ds * qs[i];
                        }
                    }
                }
            }

            let mut d_an = vec![0.0; t_len * d];
            for t in 0..t_len {
                let an_row = &lt.an[t * d..(t + 1) * d];
                let dan = &mut d_an[t * d..(t + 1) * d];
                outer_acc(&mut lg.wq.data, &d_q[t * d..(t + 1) * d], an_row, d, d);
                matvec_t_acc(&lp.wq.data, &d_q[t * d..(t + 1) * d], dan, d, d);
                outer_acc(&mut lg.wk.data, &d_k[t * d..(t + 1) * d], an_row, d, d);
                matvec_t_acc(&lp.wk.data, &d_k[t * d..(t + 1) * d], dan, d, d);
                outer_acc(&mut lg.wv.data, &d_v[t * d..(t + 1) * d], an_row, d, d);
                matvec_t_acc(&lp.wv.data, &d_v[t * d..(t + 1) * d], dan, d, d);
            }
            for t in 0..t_len {
                layer_norm_bwd_row(
                    &d_an[t * d..(t + 1) * d],
                    &lt.an_hat[t * d..(t + 1) * d],
                    lt.an_rstd[t],
                    &lp.attn_norm.gain.data,
                    &mut lg.attn_norm.gain.data,
                    &mut lg.attn_norm.bias.data,
                    &mut d_x_in[t * d..(t + 1) * d],
                    d,
                );
            }
        }

        dx = d_x_in;
    }

    // Embedding gradients.
    for t in 0..t_len {
        let tok = trace.ids()[t] as usize;
        let g = &dx[t * d..(t + 1) * d];
        let te = &mut grads.tok_emb.data[tok * d..(tok + 1) * d];
        for i in 0..d {
            te[i] += g[i];
        }
        let pe = &mut grads.pos_emb.data[t * d..(t + 1) * d];
        for i in 0..d {
            pe[i] += g[i];
        }
    }

    Ok(())
}

impl ForwardTrace {
    pub(super) fn ids(&self) -> &[u32] {
        &self.ids
    }
}
