//! ConvE: 2-D convolution over stacked subject and relation embeddings.
//!
//! lookup → reshape to k_w×k_h → stack → [bn] → dropout → conv → [bn] →
//! relu → dropout → flatten → W + b → dropout → [bn] → relu → · Eᵀ

use super::{Inner, ModelParams, Stacking};
use crate::error::Result;
use crate::tensor::ops::*;
use crate::tensor::{dropout, dropout_backward, BatchNorm, BatchNormCache, DropoutMask, Mode, Tensor};
use crate::Rng;

#[derive(Debug)]
pub(super) struct ConvCache {
    pub(super) bn_input: Option<BatchNormCache>,
    pub(super) bn_conv: Option<BatchNormCache>,
    pub(super) bn_hidden: Option<BatchNormCache>,
    masks: [DropoutMask; 3],
    stacked: Tensor,
    normed: Tensor,
    dropped: Tensor,
    conv: Tensor,
    conv_normed: Tensor,
    conv_act: Tensor,
    flat: Tensor,
    proj: Tensor,
    proj_biased: Tensor,
    proj_dropped: Tensor,
    hidden_normed: Tensor,
    hidden: Tensor,
    candidates: Option<Tensor>,
}

/// Source position `(is_relation, index into the k-vector)` of stacked row
/// `i`, column `j`.
fn stack_source(stacking: Stacking, k_w: usize, k_h: usize, i: usize, j: usize) -> (bool, usize) {
    match stacking {
        Stacking::Vertical if i < k_w => (false, i * k_h + j),
        Stacking::Vertical => (true, (i - k_w) * k_h + j),
        Stacking::Alternating => (i % 2 == 1, (i / 2) * k_h + j),
    }
}

fn stack(es: &Tensor, rr: &Tensor, stacking: Stacking, k_w: usize, k_h: usize) -> Tensor {
    let b = es.rows();
    let plane = 2 * k_w * k_h;
    let mut out = vec![0.0; b * plane];
    for n in 0..b {
        for i in 0..2 * k_w {
            for j in 0..k_h {
                let (rel, src) = stack_source(stacking, k_w, k_h, i, j);
                let row = if rel { rr.row(n) } else { es.row(n) };
                out[n * plane + i * k_h + j] = row[src];
            }
        }
    }
    let mut t = Tensor::new([b, 1, 2 * k_w, k_h], out).expect("stack shape");
    t.set_requires_grad(true);
    t
}

fn batch_norm(bn: &Option<BatchNorm>, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<BatchNormCache>)> {
    match bn {
        Some(bn) => {
            let (y, c) = bn.forward(x, mode)?;
            Ok((y, Some(c)))
        }
        None => Ok((x.clone(), None)),
    }
}

pub(super) fn hidden(p: &ModelParams, s: &[usize], r: &[usize], mode: Mode, rng: &mut Rng) -> Result<(Tensor, ConvCache)> {
    let cfg = &p.config;
    let layers = p.conv.as_ref().expect("ConvE layers");
    let b = s.len();
    let es = embedding_lookup(p.entity.re(), s)?;
    let rr = embedding_lookup(p.relation.re(), r)?;
    let stacked = stack(&es, &rr, cfg.stacking, cfg.k_w, cfg.k_h);
    let (normed, bn_input) = batch_norm(&layers.bn_input, &stacked, mode)?;
    let (dropped, m0) = dropout(&normed, cfg.input_dropout, mode, rng)?;
    let conv = conv2d(&dropped, &layers.filters, &layers.filter_bias)?;
    let (conv_normed, bn_conv) = batch_norm(&layers.bn_conv, &conv, mode)?;
    let conv_act = relu(&conv_normed);
    let (feat, m1) = dropout(&conv_act, cfg.feature_dropout, mode, rng)?;
    let flat = feat.reshape([b, cfg.flat_dim()])?;
    let proj = matmul(&flat, &layers.proj)?;
    let proj_biased = add_bias(&proj, &layers.proj_bias)?;
    let (proj_dropped, m2) = dropout(&proj_biased, cfg.hidden_dropout, mode, rng)?;
    let (hidden_normed, bn_hidden) = batch_norm(&layers.bn_hidden, &proj_dropped, mode)?;
    let hidden = relu(&hidden_normed);
    let cache = ConvCache {
        bn_input,
        bn_conv,
        bn_hidden,
        masks: [m0, m1, m2],
        stacked,
        normed,
        dropped,
        conv,
        conv_normed,
        conv_act,
        flat,
        proj,
        proj_biased,
        proj_dropped,
        hidden_normed,
        hidden: hidden.clone(),
        candidates: None,
    };
    Ok((hidden, cache))
}

pub(super) fn forward(
    p: &ModelParams,
    s: &[usize],
    r: &[usize],
    columns: Option<&[usize]>,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor, Inner)> {
    let (h, mut cache) = hidden(p, s, r, mode, rng)?;
    let e = p.entity.re();
    let logits = match columns {
        None => matmul_bt(&h, e)?,
        Some(cols) => {
            let cand = embedding_lookup(e, cols)?;
            let l = matmul_bt(&h, &cand)?;
            cache.candidates = Some(cand);
            l
        }
    };
    Ok((logits, Inner::Conv(Box::new(cache))))
}

fn pass_through(x: &mut Tensor, out: &Tensor) {
    if let Some(g) = out.grad() {
        x.accumulate_grad(g);
    }
}

fn bn_backward(bn: Option<&mut BatchNorm>, cache: &Option<BatchNormCache>, x: &mut Tensor, out: &Tensor) {
    match (bn, cache) {
        (Some(bn), Some(c)) => bn.backward(x, out, c),
        _ => pass_through(x, out),
    }
}

pub(super) fn backward(
    p: &mut ModelParams,
    s: &[usize],
    r: &[usize],
    columns: Option<&[usize]>,
    c: ConvCache,
    grad_logits: Vec<f64>,
) -> Result<()> {
    let cfg = p.config.clone();
    let b = s.len();
    let n_cols = columns.map_or(p.n_entities(), <[usize]>::len);
    let ConvCache {
        bn_input,
        bn_conv,
        bn_hidden,
        masks: [m0, m1, m2],
        mut stacked,
        mut normed,
        mut dropped,
        mut conv,
        mut conv_normed,
        mut conv_act,
        mut flat,
        mut proj,
        mut proj_biased,
        mut proj_dropped,
        mut hidden_normed,
        mut hidden,
        candidates,
    } = c;

    let mut logits = Tensor::zeros([b, n_cols]);
    logits.set_grad(grad_logits)?;
    match (columns, candidates) {
        (Some(cols), Some(mut cand)) => {
            cand.set_requires_grad(true);
            matmul_bt_backward(&mut hidden, &mut cand, &logits);
            embedding_backward(p.entity.re_mut(), cols, &cand);
        }
        _ => matmul_bt_backward(&mut hidden, p.entity.re_mut(), &logits),
    }

    let layers = p.conv.as_mut().expect("ConvE layers");
    relu_backward(&mut hidden_normed, &hidden);
    bn_backward(layers.bn_hidden.as_mut(), &bn_hidden, &mut proj_dropped, &hidden_normed);
    dropout_backward(&mut proj_biased, &proj_dropped, &m2);
    add_bias_backward(&mut proj, &mut layers.proj_bias, &proj_biased);
    matmul_backward(&mut flat, &mut layers.proj, &proj);
    let feat = flat.reshape(conv_act.shape().to_vec())?;
    dropout_backward(&mut conv_act, &feat, &m1);
    relu_backward(&mut conv_normed, &conv_act);
    bn_backward(layers.bn_conv.as_mut(), &bn_conv, &mut conv, &conv_normed);
    conv2d_backward(&mut dropped, &mut layers.filters, &mut layers.filter_bias, &conv);
    dropout_backward(&mut normed, &dropped, &m0);
    bn_backward(layers.bn_input.as_mut(), &bn_input, &mut stacked, &normed);

    // undo the stacking into per-row gradients of the looked-up embeddings
    let Some(g) = stacked.grad() else { return Ok(()) };
    let (k_w, k_h, k) = (cfg.k_w, cfg.k_h, cfg.dim);
    let plane = 2 * k_w * k_h;
    let mut ges = vec![0.0; b * k];
    let mut grr = vec![0.0; b * k];
    for n in 0..b {
        for i in 0..2 * k_w {
            for j in 0..k_h {
                let (rel, src) = stack_source(cfg.stacking, k_w, k_h, i, j);
                let v = g[n * plane + i * k_h + j];
                if rel {
                    grr[n * k + src] += v;
                } else {
                    ges[n * k + src] += v;
                }
            }
        }
    }
    let mut es_out = Tensor::zeros([b, k]);
    es_out.set_grad(ges)?;
    embedding_backward(p.entity.re_mut(), s, &es_out);
    let mut rr_out = Tensor::zeros([b, k]);
    rr_out.set_grad(grr)?;
    embedding_backward(p.relation.re_mut(), r, &rr_out);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vertical_stack_puts_subject_on_top() {
        let es = Tensor::from_fn([1, 6], |i| i as f64);
        let rr = Tensor::from_fn([1, 6], |i| 10.0 + i as f64);
        let x = stack(&es, &rr, Stacking::Vertical, 2, 3);
        assert_eq!(x.shape(), &[1, 1, 4, 3]);
        assert_eq!(x.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0]);
        let x = stack(&es, &rr, Stacking::Alternating, 2, 3);
        assert_eq!(x.data(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0, 3.0, 4.0, 5.0, 13.0, 14.0, 15.0]);
    }
}
