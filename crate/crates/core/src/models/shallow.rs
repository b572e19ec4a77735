//! TransE, DistMult and ComplEx.

use super::{Inner, ModelKind, ModelParams, Table};
use crate::data::Triple;
use crate::error::{Error, Result};
use crate::par::*;
use crate::tensor::gemm::{gemm, Layout};
use crate::tensor::Tensor;

/// `−‖s + r − o‖_p`.
pub fn score_transe(s: &[f64], r: &[f64], o: &[f64], p: u32) -> Result<f64> {
    let d = s.iter().zip(r).zip(o).map(|((s, r), o)| s + r - o);
    match p {
        1 => Ok(-d.map(f64::abs).sum::<f64>()),
        2 => Ok(-d.map(|v| v * v).sum::<f64>().sqrt()),
        _ => Err(Error::config(format!("TransE norm must be 1 or 2, got {p}"))),
    }
}

/// Tri-linear product `Σ s_i r_i o_i`.
pub fn score_distmult(s: &[f64], r: &[f64], o: &[f64]) -> f64 {
    s.iter().zip(r).zip(o).map(|((s, r), o)| s * r * o).sum()
}

/// `Re(Σ s_i r_i conj(o_i))` with complex vectors given as `(re, im)`.
pub fn score_complex(s: (&[f64], &[f64]), r: (&[f64], &[f64]), o: (&[f64], &[f64])) -> f64 {
    let mut acc = 0.0;
    for i in 0..s.0.len() {
        let (sr, si, rr, ri, or, oi) = (s.0[i], s.1[i], r.0[i], r.1[i], o.0[i], o.1[i]);
        acc += sr * rr * or + si * rr * oi + sr * ri * oi - si * ri * or;
    }
    acc
}

#[derive(Debug)]
pub(super) struct ShallowCache {
    /// Per-row query vectors: `s ⊙ r` (DistMult), `s + r` (TransE) or the
    /// real and imaginary parts of `s ⊙ r` (ComplEx).
    h_re: Vec<f64>,
    h_im: Vec<f64>,
}

fn gather(table: &Tensor, columns: Option<&[usize]>) -> Vec<f64> {
    match columns {
        None => table.data().to_vec(),
        Some(c) => c.iter().flat_map(|&i| table.row(i).iter().copied()).collect(),
    }
}

fn candidates<'a>(table: &'a Tensor, columns: Option<&[usize]>, buf: &'a mut Vec<f64>) -> &'a [f64] {
    match columns {
        None => table.data(),
        Some(_) => {
            *buf = gather(table, columns);
            buf
        }
    }
}

pub(super) fn forward(
    p: &ModelParams,
    s: &[usize],
    r: &[usize],
    columns: Option<&[usize]>,
) -> Result<(Tensor, Inner)> {
    let k = p.config.dim;
    let b = s.len();
    let n_cols = columns.map_or(p.n_entities(), <[usize]>::len);
    let (e, rel) = (p.entity.re(), p.relation.re());
    let mut h_re = vec![0.0; b * k];
    let mut h_im = Vec::new();
    for i in 0..b {
        let (es, rr) = (e.row(s[i]), rel.row(r[i]));
        let h = &mut h_re[i * k..(i + 1) * k];
        for j in 0..k {
            h[j] = match p.config.kind {
                ModelKind::TransE => es[j] + rr[j],
                _ => es[j] * rr[j],
            };
        }
    }
    if let (Some(ei), Some(ri)) = (p.entity.im(), p.relation.im()) {
        h_im = vec![0.0; b * k];
        for i in 0..b {
            let (sr, si) = (e.row(s[i]), ei.row(s[i]));
            let (rr, rim) = (rel.row(r[i]), ri.row(r[i]));
            for j in 0..k {
                h_re[i * k + j] = sr[j] * rr[j] - si[j] * rim[j];
                h_im[i * k + j] = sr[j] * rim[j] + si[j] * rr[j];
            }
        }
    }

    let mut logits = vec![0.0; b * n_cols];
    let mut buf = Vec::new();
    let cand = candidates(e, columns, &mut buf);
    if p.config.kind == ModelKind::TransE {
        let norm = p.config.transe_norm;
        logits
            .par_chunks_mut(n_cols.max(1))
            .enumerate()
            .for_each(|(i, row)| {
                let q = &h_re[i * k..(i + 1) * k];
                for (j, v) in row.iter_mut().enumerate() {
                    let o = &cand[j * k..(j + 1) * k];
                    *v = distance(q, o, norm);
                }
            });
    } else {
        gemm(b, k, n_cols, 1.0, &h_re, Layout::Normal, cand, Layout::Transposed, 0.0, &mut logits);
        if let Some(ei) = p.entity.im() {
            let mut buf = Vec::new();
            let cand_im = candidates(ei, columns, &mut buf);
            gemm(b, k, n_cols, 1.0, &h_im, Layout::Normal, cand_im, Layout::Transposed, 1.0, &mut logits);
        }
    }
    let logits = Tensor::new([b, n_cols], logits)?;
    Ok((logits, Inner::Shallow(ShallowCache { h_re, h_im })))
}

/// `−‖q − o‖_p`.
fn distance(q: &[f64], o: &[f64], p: u32) -> f64 {
    let d = q.iter().zip(o).map(|(a, b)| a - b);
    if p == 1 {
        -d.map(f64::abs).sum::<f64>()
    } else {
        -d.map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Gradient of `−‖q − o‖_p` with respect to `q` (the gradient wrt `o` is its
/// negation); zero where the distance is not differentiable.
fn distance_grad(q: &[f64], o: &[f64], p: u32, out: &mut [f64]) {
    if p == 1 {
        for ((g, a), b) in out.iter_mut().zip(q).zip(o) {
            let d = a - b;
            *g = if d > 0.0 {
                -1.0
            } else if d < 0.0 {
                1.0
            } else {
                0.0
            };
        }
    } else {
        let norm = q.iter().zip(o).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        for ((g, a), b) in out.iter_mut().zip(q).zip(o) {
            *g = if norm > 0.0 { -(a - b) / norm } else { 0.0 };
        }
    }
}

fn scatter_rows(table: &mut Tensor, columns: Option<&[usize]>, rows: &[f64]) {
    if !table.requires_grad() {
        return;
    }
    let k = table.cols();
    match columns {
        None => table.accumulate_grad(rows),
        Some(c) => {
            let g = table.grad_mut();
            for (j, &col) in c.iter().enumerate() {
                for (acc, v) in g[col * k..(col + 1) * k].iter_mut().zip(&rows[j * k..(j + 1) * k]) {
                    *acc += v;
                }
            }
        }
    }
}

fn add_row(table: &mut Tensor, id: usize, row: &[f64], scale: f64) {
    if !table.requires_grad() {
        return;
    }
    let k = table.cols();
    for (acc, v) in table.grad_mut()[id * k..(id + 1) * k].iter_mut().zip(row) {
        *acc += scale * v;
    }
}

pub(super) fn backward(
    p: &mut ModelParams,
    s: &[usize],
    r: &[usize],
    columns: Option<&[usize]>,
    cache: ShallowCache,
    g: Vec<f64>,
) -> Result<()> {
    let k = p.config.dim;
    let b = s.len();
    let n_cols = columns.map_or(p.n_entities(), <[usize]>::len);
    let kind = p.config.kind;

    // gradients wrt the query vectors and the candidate rows
    let mut gh_re = vec![0.0; b * k];
    let mut gh_im = vec![0.0; cache.h_im.len()];
    let mut gc_re = vec![0.0; n_cols * k];
    let mut gc_im = vec![0.0; if cache.h_im.is_empty() { 0 } else { n_cols * k }];
    {
        let mut buf = Vec::new();
        let cand = candidates(p.entity.re(), columns, &mut buf);
        if kind == ModelKind::TransE {
            let norm = p.config.transe_norm;
            let mut dq = vec![0.0; k];
            for i in 0..b {
                let q = &cache.h_re[i * k..(i + 1) * k];
                for j in 0..n_cols {
                    let gij = g[i * n_cols + j];
                    if gij == 0.0 {
                        continue;
                    }
                    let o = &cand[j * k..(j + 1) * k];
                    distance_grad(q, o, norm, &mut dq);
                    for t in 0..k {
                        gh_re[i * k + t] += gij * dq[t];
                        gc_re[j * k + t] -= gij * dq[t];
                    }
                }
            }
        } else {
            gemm(b, n_cols, k, 1.0, &g, Layout::Normal, cand, Layout::Normal, 0.0, &mut gh_re);
            gemm(n_cols, b, k, 1.0, &g, Layout::Transposed, &cache.h_re, Layout::Normal, 0.0, &mut gc_re);
            if let Some(ei) = p.entity.im() {
                let mut buf = Vec::new();
                let cand_im = candidates(ei, columns, &mut buf);
                gemm(b, n_cols, k, 1.0, &g, Layout::Normal, cand_im, Layout::Normal, 0.0, &mut gh_im);
                gemm(n_cols, b, k, 1.0, &g, Layout::Transposed, &cache.h_im, Layout::Normal, 0.0, &mut gc_im);
            }
        }
    }

    // chain rule into the subject and relation rows
    let mut gs_re = vec![0.0; b * k];
    let mut gr_re = vec![0.0; b * k];
    let mut gs_im = vec![0.0; gh_im.len()];
    let mut gr_im = vec![0.0; gh_im.len()];
    {
        let (e, rel) = (p.entity.re(), p.relation.re());
        for i in 0..b {
            let (es, rr) = (e.row(s[i]), rel.row(r[i]));
            for j in 0..k {
                let x = i * k + j;
                match kind {
                    ModelKind::TransE => {
                        gs_re[x] = gh_re[x];
                        gr_re[x] = gh_re[x];
                    }
                    ModelKind::ComplEx => {
                        let (si, ri) = (p.entity.im().unwrap().row(s[i])[j], p.relation.im().unwrap().row(r[i])[j]);
                        let (a, c) = (gh_re[x], gh_im[x]);
                        // h_re = s_re r_re − s_im r_im, h_im = s_re r_im + s_im r_re
                        gs_re[x] = a * rr[j] + c * ri;
                        gs_im[x] = -a * ri + c * rr[j];
                        gr_re[x] = a * es[j] + c * si;
                        gr_im[x] = -a * si + c * es[j];
                    }
                    _ => {
                        gs_re[x] = gh_re[x] * rr[j];
                        gr_re[x] = gh_re[x] * es[j];
                    }
                }
            }
        }
    }

    let (ent_re, ent_im) = split_table(&mut p.entity);
    scatter_rows(ent_re, columns, &gc_re);
    for i in 0..b {
        add_row(ent_re, s[i], &gs_re[i * k..(i + 1) * k], 1.0);
    }
    if let Some(ei) = ent_im {
        scatter_rows(ei, columns, &gc_im);
        for i in 0..b {
            add_row(ei, s[i], &gs_im[i * k..(i + 1) * k], 1.0);
        }
    }
    let (rel_re, mut rel_im) = split_table(&mut p.relation);
    for i in 0..b {
        add_row(rel_re, r[i], &gr_re[i * k..(i + 1) * k], 1.0);
        if let Some(ri) = rel_im.as_deref_mut() {
            add_row(ri, r[i], &gr_im[i * k..(i + 1) * k], 1.0);
        }
    }
    Ok(())
}

fn split_table(t: &mut Table) -> (&mut Tensor, Option<&mut Tensor>) {
    match t {
        Table::Real(t) => (t, None),
        Table::Complex(c) => (&mut c.re, Some(&mut c.im)),
    }
}

pub(super) fn score_one(p: &ModelParams, t: &Triple) -> f64 {
    let (e, rel) = (p.entity.re(), p.relation.re());
    let (s, r, o) = (e.row(t.s), rel.row(t.r), e.row(t.o));
    match p.config.kind {
        ModelKind::TransE => score_transe(s, r, o, p.config.transe_norm).expect("validated norm"),
        ModelKind::ComplEx => {
            let (ei, ri) = (p.entity.im().unwrap(), p.relation.im().unwrap());
            score_complex((s, ei.row(t.s)), (r, ri.row(t.r)), (o, ei.row(t.o)))
        }
        _ => score_distmult(s, r, o),
    }
}

pub(super) fn triple_backward(p: &mut ModelParams, triples: &[Triple], grad: &[f64]) {
    let k = p.config.dim;
    let norm = p.config.transe_norm;
    let kind = p.config.kind;
    let mut gs = vec![0.0; k];
    let mut gr = vec![0.0; k];
    let mut go = vec![0.0; k];
    let (mut gsi, mut gri, mut goi) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for (t, &g) in triples.iter().zip(grad) {
        if g == 0.0 {
            continue;
        }
        {
            let (e, rel) = (p.entity.re(), p.relation.re());
            let (s, r, o) = (e.row(t.s), rel.row(t.r), e.row(t.o));
            match kind {
                ModelKind::TransE => {
                    let q: Vec<f64> = s.iter().zip(r).map(|(a, b)| a + b).collect();
                    distance_grad(&q, o, norm, &mut gs);
                    gr.copy_from_slice(&gs);
                    go.iter_mut().zip(&gs).for_each(|(a, b)| *a = -b);
                }
                ModelKind::ComplEx => {
                    let (ei, ri) = (p.entity.im().unwrap(), p.relation.im().unwrap());
                    let (si, rim, oi) = (ei.row(t.s), ri.row(t.r), ei.row(t.o));
                    for j in 0..k {
                        gs[j] = r[j] * o[j] + rim[j] * oi[j];
                        gsi[j] = r[j] * oi[j] - rim[j] * o[j];
                        gr[j] = s[j] * o[j] + si[j] * oi[j];
                        gri[j] = s[j] * oi[j] - si[j] * o[j];
                        go[j] = s[j] * r[j] - si[j] * rim[j];
                        goi[j] = si[j] * r[j] + s[j] * rim[j];
                    }
                }
                _ => {
                    for j in 0..k {
                        gs[j] = r[j] * o[j];
                        gr[j] = s[j] * o[j];
                        go[j] = s[j] * r[j];
                    }
                }
            }
        }
        let (ent_re, ent_im) = split_table(&mut p.entity);
        add_row(ent_re, t.s, &gs, g);
        add_row(ent_re, t.o, &go, g);
        if let Some(ei) = ent_im {
            add_row(ei, t.s, &gsi, g);
            add_row(ei, t.o, &goi, g);
        }
        let (rel_re, rel_im) = split_table(&mut p.relation);
        add_row(rel_re, t.r, &gr, g);
        if let Some(ri) = rel_im {
            add_row(ri, t.r, &gri, g);
        }
    }
}

pub(super) fn score_subjects(p: &ModelParams, r: &[usize], o: &[usize]) -> Result<Tensor> {
    let k = p.config.dim;
    let n = p.n_entities();
    let b = r.len();
    let (e, rel) = (p.entity.re(), p.relation.re());
    let mut out = vec![0.0; b * n];
    match p.config.kind {
        ModelKind::TransE => {
            let norm = p.config.transe_norm;
            out.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
                // ‖e + r − o‖ = ‖e − (o − r)‖
                let q: Vec<f64> = e.row(o[i]).iter().zip(rel.row(r[i])).map(|(a, b)| a - b).collect();
                for (cand, v) in row.iter_mut().enumerate() {
                    *v = distance(e.row(cand), &q, norm);
                }
            });
        }
        ModelKind::DistMult => {
            let q: Vec<f64> = (0..b)
                .flat_map(|i| e.row(o[i]).iter().zip(rel.row(r[i])).map(|(a, b)| a * b).collect::<Vec<_>>())
                .collect();
            gemm(b, k, n, 1.0, &q, Layout::Normal, e.data(), Layout::Transposed, 0.0, &mut out);
        }
        ModelKind::ComplEx => {
            let (ei, ri) = (p.entity.im().unwrap(), p.relation.im().unwrap());
            let mut q_re = vec![0.0; b * k];
            let mut q_im = vec![0.0; b * k];
            for i in 0..b {
                let (or, oi, rr, rim) = (e.row(o[i]), ei.row(o[i]), rel.row(r[i]), ri.row(r[i]));
                for j in 0..k {
                    q_re[i * k + j] = rr[j] * or[j] + rim[j] * oi[j];
                    q_im[i * k + j] = rr[j] * oi[j] - rim[j] * or[j];
                }
            }
            gemm(b, k, n, 1.0, &q_re, Layout::Normal, e.data(), Layout::Transposed, 0.0, &mut out);
            gemm(b, k, n, 1.0, &q_im, Layout::Normal, ei.data(), Layout::Transposed, 1.0, &mut out);
        }
        ModelKind::ConvE => unreachable!("handled by the caller"),
    }
    if let Some(bias) = &p.entity_bias {
        for row in out.chunks_mut(n.max(1)) {
            for (v, bv) in row.iter_mut().zip(bias.data()) {
                *v += bv;
            }
        }
    }
    Tensor::new([b, n], out)
}
