//! Forward kernels and their exact backward passes.
//!
//! Backward functions read `out.grad()` (the upstream gradient) and add into
//! the gradient slots of inputs that have `requires_grad` set. A missing
//! upstream gradient is treated as zero.

use super::gemm::{gemm, Layout};
use super::Tensor;
use crate::error::{Error, Result};
use crate::par::*;

fn output_like(shape: Vec<usize>, data: Vec<f64>, inputs: &[&Tensor]) -> Tensor {
    let mut t = Tensor::new(shape, data).expect("kernel produced consistent shape");
    t.set_requires_grad(inputs.iter().any(|x| x.requires_grad()));
    t
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.expect_ndim(op, 2)?;
    Ok((t.shape()[0], t.shape()[1]))
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2("matmul", a)?;
    let (k2, n) = dims2("matmul", b)?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), Layout::Normal, b.data(), Layout::Normal, 0.0, &mut c);
    Ok(output_like(vec![m, n], c, &[a, b]))
}

pub fn matmul_backward(a: &mut Tensor, b: &mut Tensor, out: &Tensor) {
    let Some(g) = out.grad() else { return };
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    if a.requires_grad() {
        let b_data = b.data();
        // dA = dC · Bᵀ
        gemm(m, n, k, 1.0, g, Layout::Normal, b_data, Layout::Transposed, 1.0, a.grad_mut());
    }
    if b.requires_grad() {
        // dB = Aᵀ · dC
        gemm(k, m, n, 1.0, a.data(), Layout::Transposed, g, Layout::Normal, 1.0, b.grad_mut());
    }
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`; used to score against every row of an
/// embedding table at once.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2("matmul_bt", a)?;
    let (n, k2) = dims2("matmul_bt", b)?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul_bt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), Layout::Normal, b.data(), Layout::Transposed, 0.0, &mut c);
    Ok(output_like(vec![m, n], c, &[a, b]))
}

pub fn matmul_bt_backward(a: &mut Tensor, b: &mut Tensor, out: &Tensor) {
    let Some(g) = out.grad() else { return };
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    if a.requires_grad() {
        let b_data = b.data();
        // dA = dC · B
        gemm(m, n, k, 1.0, g, Layout::Normal, b_data, Layout::Normal, 1.0, a.grad_mut());
    }
    if b.requires_grad() {
        // dB = dCᵀ · A
        gemm(n, m, k, 1.0, g, Layout::Transposed, a.data(), Layout::Normal, 1.0, b.grad_mut());
    }
}

/// Adds `bias[j]` to every row of a 2-D tensor.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, n) = dims2("add_bias", x)?;
    if bias.len() != n {
        return Err(Error::Dimension {
            op: "add_bias",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(n) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(output_like(x.shape().to_vec(), data, &[x, bias]))
}

pub fn add_bias_backward(x: &mut Tensor, bias: &mut Tensor, out: &Tensor) {
    let Some(g) = out.grad() else { return };
    if x.requires_grad() {
        x.accumulate_grad(g);
    }
    if bias.requires_grad() {
        let n = bias.len();
        let gb = bias.grad_mut();
        for row in g.chunks(n) {
            for (acc, v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Elementwise sum.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(output_like(a.shape().to_vec(), data, &[a, b]))
}

pub fn add_backward(a: &mut Tensor, b: &mut Tensor, out: &Tensor) {
    let Some(g) = out.grad() else { return };
    if a.requires_grad() {
        a.accumulate_grad(g);
    }
    if b.requires_grad() {
        b.accumulate_grad(g);
    }
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(output_like(a.shape().to_vec(), data, &[a, b]))
}

pub fn mul_backward(a: &mut Tensor, b: &mut Tensor, out: &Tensor) {
    let Some(g) = out.grad() else { return };
    if a.requires_grad() {
        let ga: Vec<f64> = g.iter().zip(b.data()).map(|(g, y)| g * y).collect();
        a.accumulate_grad(&ga);
    }
    if b.requires_grad() {
        let gb: Vec<f64> = g.iter().zip(a.data()).map(|(g, x)| g * x).collect();
        b.accumulate_grad(&gb);
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    output_like(x.shape().to_vec(), data, &[x])
}

/// Subgradient at exactly zero is taken as zero.
pub fn relu_backward(x: &mut Tensor, out: &Tensor) {
    let Some(g) = out.grad() else { return };
    if !x.requires_grad() {
        return;
    }
    let gx: Vec<f64> = g
        .iter()
        .zip(x.data())
        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
        .collect();
    x.accumulate_grad(&gx);
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    output_like(x.shape().to_vec(), data, &[x])
}

pub fn sigmoid_backward(x: &mut Tensor, out: &Tensor) {
    let Some(g) = out.grad() else { return };
    if !x.requires_grad() {
        return;
    }
    let gx: Vec<f64> = g
        .iter()
        .zip(out.data())
        .map(|(g, y)| g * y * (1.0 - y))
        .collect();
    x.accumulate_grad(&gx);
}

/// Gathers rows of `table` (V×k) into a `len(ids)×k` tensor.
pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, k) = dims2("embedding_lookup", table)?;
    let mut data = Vec::with_capacity(ids.len() * k);
    for &id in ids {
        if id >= v {
            return Err(Error::Index {
                what: "embedding table",
                index: id,
                len: v,
            });
        }
        data.extend_from_slice(table.row(id));
    }
    Ok(output_like(vec![ids.len(), k], data, &[table]))
}

/// Scatter-adds the output gradient into the table; repeated ids accumulate.
pub fn embedding_backward(table: &mut Tensor, ids: &[usize], out: &Tensor) {
    let Some(g) = out.grad() else { return };
    if !table.requires_grad() {
        return;
    }
    let k = table.cols();
    let gt = table.grad_mut();
    for (row, &id) in g.chunks(k).zip(ids) {
        for (acc, v) in gt[id * k..(id + 1) * k].iter_mut().zip(row) {
            *acc += v;
        }
    }
}

/// Valid (unpadded), stride-1 cross-correlation.
///
/// `input: b×in×H×W`, `filters: c×in×fh×fw`, `bias: c`; output
/// `b×c×(H−fh+1)×(W−fw+1)`.
pub fn conv2d(input: &Tensor, filters: &Tensor, bias: &Tensor) -> Result<Tensor> {
    input.expect_ndim("conv2d", 4)?;
    filters.expect_ndim("conv2d", 4)?;
    let [b, cin, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    let [c, fin, fh, fw] = [
        filters.shape()[0],
        filters.shape()[1],
        filters.shape()[2],
        filters.shape()[3],
    ];
    if cin != fin || h < fh || w < fw || bias.len() != c {
        return Err(Error::Dimension {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: filters.shape().to_vec(),
        });
    }
    let (oh, ow) = (h - fh + 1, w - fw + 1);
    let per_example = c * oh * ow;
    let mut out = vec![0.0; b * per_example];
    let x = input.data();
    let wt = filters.data();
    let bs = bias.data();
    out.par_chunks_mut(per_example.max(1))
        .enumerate()
        .for_each(|(bi, o)| {
            let xb = &x[bi * cin * h * w..(bi + 1) * cin * h * w];
            for ci in 0..c {
                let plane = &mut o[ci * oh * ow..(ci + 1) * oh * ow];
                plane.iter_mut().for_each(|v| *v = bs[ci]);
                for ic in 0..cin {
                    let xin = &xb[ic * h * w..(ic + 1) * h * w];
                    let kern = &wt[(ci * cin + ic) * fh * fw..(ci * cin + ic + 1) * fh * fw];
                    for di in 0..fh {
                        for dj in 0..fw {
                            let wv = kern[di * fw + dj];
                            for i in 0..oh {
                                let src = &xin[(i + di) * w + dj..(i + di) * w + dj + ow];
                                let dst = &mut plane[i * ow..(i + 1) * ow];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(output_like(vec![b, c, oh, ow], out, &[input, filters, bias]))
}

pub fn conv2d_backward(input: &mut Tensor, filters: &mut Tensor, bias: &mut Tensor, out: &Tensor) {
    let Some(g) = out.grad() else { return };
    let [b, cin, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    let [c, _, fh, fw] = [
        filters.shape()[0],
        filters.shape()[1],
        filters.shape()[2],
        filters.shape()[3],
    ];
    let (oh, ow) = (h - fh + 1, w - fw + 1);

    if bias.requires_grad() {
        let gb = bias.grad_mut();
        for bi in 0..b {
            for (ci, acc) in gb.iter_mut().enumerate() {
                let start = (bi * c + ci) * oh * ow;
                *acc += g[start..start + oh * ow].iter().sum::<f64>();
            }
        }
    }

    if filters.requires_grad() {
        let x = input.data();
        let gw = filters.grad_mut();
        // one task per output channel; the batch loop stays in order
        gw.par_chunks_mut(cin * fh * fw)
            .enumerate()
            .for_each(|(ci, gk)| {
                for bi in 0..b {
                    let gplane = &g[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
                    for ic in 0..cin {
                        let xin = &x[(bi * cin + ic) * h * w..(bi * cin + ic + 1) * h * w];
                        for di in 0..fh {
                            for dj in 0..fw {
                                let mut acc = 0.0;
                                for i in 0..oh {
                                    let src = &xin[(i + di) * w + dj..(i + di) * w + dj + ow];
                                    let gr = &gplane[i * ow..(i + 1) * ow];
                                    acc += gr.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                                }
                                gk[(ic * fh + di) * fw + dj] += acc;
                            }
                        }
                    }
                }
            });
    }

    if input.requires_grad() {
        let wt = filters.data().to_vec();
        let gx = input.grad_mut();
        gx.par_chunks_mut((cin * h * w).max(1))
            .enumerate()
            .for_each(|(bi, gxb)| {
                for ci in 0..c {
                    let gplane = &g[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
                    for ic in 0..cin {
                        let kern = &wt[(ci * cin + ic) * fh * fw..(ci * cin + ic + 1) * fh * fw];
                        let gxin = &mut gxb[ic * h * w..(ic + 1) * h * w];
                        for di in 0..fh {
                            for dj in 0..fw {
                                let wv = kern[di * fw + dj];
                                for i in 0..oh {
                                    let dst = &mut gxin[(i + di) * w + dj..(i + di) * w + dj + ow];
                                    let gr = &gplane[i * ow..(i + 1) * ow];
                                    for (d, s) in dst.iter_mut().zip(gr) {
                                        *d += wv * s;
                                    }
                                }
                            }
                        }
                    }
                }
            });
    }
}
