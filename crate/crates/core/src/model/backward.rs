//! Reverse-mode gradients through a recorded [`Trace`].

use super::forward::{gelu_grad, Trace};
use super::ModelState;
use std::ops::Range;

fn ln_backward(dout: &[f64], xhat: &[f64], rstd: f64, gain: &[f64], grad: &mut [f64], g: &Range<usize>, b: &Range<usize>) -> Vec<f64> {
    let n = dout.len() as f64;
    let mut dxhat = Vec::with_capacity(dout.len());
    for (i, (&dy, &xh)) in dout.iter().zip(xhat).enumerate() {
        grad[g.start + i] += dy * xh;
        grad[b.start + i] += dy;
        dxhat.push(dy * gain[i]);
    }
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
    dxhat.iter().zip(xhat).map(|(dh, xh)| rstd * (dh - mean_d - xh * mean_dx)).collect()
}

fn linear_backward(x: &[f64], dy: &[f64], w: &[f64], grad: &mut [f64], wr: &Range<usize>, br: &Range<usize>) -> Vec<f64> {
    let out = dy.len();
    for (j, d) in dy.iter().enumerate() {
        grad[br.start + j] += d;
    }
    let mut dx = vec![0.0; x.len()];
    for (i, xi) in x.iter().enumerate() {
        let row = &w[i * out..(i + 1) * out];
        let grow = &mut grad[wr.start + i * out..wr.start + (i + 1) * out];
        let mut acc = 0.0;
        for ((gw, wij), dj) in grow.iter_mut().zip(row).zip(dy) {
            *gw += xi * dj;
            acc += wij * dj;
        }
        dx[i] = acc;
    }
    dx
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Accumulates parameter gradients into `grad` (same layout as `state.params`).
///
/// `d_hidden` holds upstream gradients on final hidden rows, `d_logits` on
/// logit rows; both are keyed by position.
pub fn backward(
    state: &ModelState,
    trace: &Trace,
    d_hidden: &[(usize, Vec<f64>)],
    d_logits: &[(usize, Vec<f64>)],
    grad: &mut [f64],
) {
    let cfg = &state.config;
    let lay = &state.layout;
    let (d, heads, dh) = (cfg.hidden_dim, cfg.heads, cfg.head_dim());
    let big_t = trace.len();
    let scale = 1.0 / (dh as f64).sqrt();
    let emb = state.p(&lay.tok_emb);

    let mut dy = vec![vec![0.0; d]; big_t];
    for (t, g) in d_hidden {
        add_into(&mut dy[*t], g);
    }
    for (t, dl) in d_logits {
        let y = &trace.hidden[*t];
        for (v, &g) in dl.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &emb[v * d..(v + 1) * d];
            let grow = &mut grad[lay.tok_emb.start + v * d..lay.tok_emb.start + (v + 1) * d];
            for i in 0..d {
                dy[*t][i] += g * row[i];
                grow[i] += g * y[i];
            }
        }
    }

    let mut dres: Vec<Vec<f64>> = (0..big_t)
        .map(|t| {
            let r = &trace.recs[t];
            ln_backward(&dy[t], &r.xhatf, r.rstdf, state.p(&lay.lnf_g), grad, &lay.lnf_g, &lay.lnf_b)
        })
        .collect();

    for (l, ll) in lay.layers.iter().enumerate().rev() {
        for t in 0..big_t {
            let r = &trace.recs[t].layers[l];
            let dgz = linear_backward(&r.gz, &dres[t], state.p(&ll.w2), grad, &ll.w2, &ll.b2);
            let dz: Vec<f64> = dgz.iter().zip(&r.z).map(|(g, z)| g * gelu_grad(*z)).collect();
            let dc = linear_backward(&r.c, &dz, state.p(&ll.w1), grad, &ll.w1, &ll.b1);
            let dx = ln_backward(&dc, &r.xhat2, r.rstd2, state.p(&ll.ln2_g), grad, &ll.ln2_g, &ll.ln2_b);
            add_into(&mut dres[t], &dx);
        }

        let (kc, vc) = (&trace.cache.k[l], &trace.cache.v[l]);
        let mut dq = vec![vec![0.0; d]; big_t];
        let mut dk = vec![vec![0.0; d]; big_t];
        let mut dv = vec![vec![0.0; d]; big_t];
        for t in 0..big_t {
            let r = &trace.recs[t].layers[l];
            let d_o = linear_backward(&r.o, &dres[t], state.p(&ll.wo), grad, &ll.wo, &ll.bo);
            for h in 0..heads {
                let hs = h * dh..(h + 1) * dh;
                let p = &r.probs[h * (t + 1)..(h + 1) * (t + 1)];
                let doh = &d_o[hs.clone()];
                let dp: Vec<f64> = (0..=t)
                    .map(|u| doh.iter().zip(&vc[u * d + hs.start..u * d + hs.end]).map(|(a, b)| a * b).sum())
                    .collect();
                let dot_pdp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qh = &r.q[hs.clone()];
                for u in 0..=t {
                    let ds = p[u] * (dp[u] - dot_pdp) * scale;
                    let ku = &kc[u * d + hs.start..u * d + hs.end];
                    for j in 0..dh {
                        dv[u][hs.start + j] += p[u] * doh[j];
                        dq[t][hs.start + j] += ds * ku[j];
                        dk[u][hs.start + j] += ds * qh[j];
                    }
                }
            }
        }
        for t in 0..big_t {
            let r = &trace.recs[t].layers[l];
            let mut da = linear_backward(&r.a, &dq[t], state.p(&ll.wq), grad, &ll.wq, &ll.bq);
            add_into(&mut da, &linear_backward(&r.a, &dk[t], state.p(&ll.wk), grad, &ll.wk, &ll.bk));
            add_into(&mut da, &linear_backward(&r.a, &dv[t], state.p(&ll.wv), grad, &ll.wv, &ll.bv));
            let dx = ln_backward(&da, &r.xhat1, r.rstd1, state.p(&ll.ln1_g), grad, &ll.ln1_g, &ll.ln1_b);
            add_into(&mut dres[t], &dx);
        }
    }

    for (t, g) in dres.iter().enumerate() {
        let tok = trace.tokens[t] as usize;
        add_into(&mut grad[lay.tok_emb.start + tok * d..lay.tok_emb.start + (tok + 1) * d], g);
        add_into(&mut grad[lay.pos_emb.start + t * d..lay.pos_emb.start + (t + 1) * d], g);
    }
}
