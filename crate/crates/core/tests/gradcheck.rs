//! Central finite-difference checks for every differentiable kernel.
//!
//! Each check contracts the op output with a fixed random weight tensor so the
//! scalar objective is `Σ w ⊙ f(x)`, then compares the analytic gradient with
//! `(L(x + h) − L(x − h)) / 2h` element by element.

use kgelab::tensor::ops::*;
use kgelab::tensor::{dropout, dropout_backward, BatchNorm, Mode, Tensor};
use kgelab::{rng_from_seed, Rng};
use rand::Rng as _;

const H: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0)).with_grad()
}

fn objective(out: &Tensor, w: &[f64]) -> f64 {
    out.data().iter().zip(w).map(|(a, b)| a * b).sum()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares the analytic gradient of input `which` against finite differences.
fn check<F, B>(inputs: &[Tensor], which: usize, forward: F, backward: B) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
    B: Fn(&mut [Tensor], &Tensor),
{
    let mut rng = rng_from_seed(99);
    let out = forward(inputs);
    let w: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = out;
    out.set_grad(w.clone()).unwrap();
    let mut grads_in: Vec<Tensor> = inputs.to_vec();
    backward(&mut grads_in, &out);
    let analytic = grads_in[which]
        .grad()
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; inputs[which].len()]);

    let mut worst = 0.0f64;
    for i in 0..inputs[which].len() {
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[i] += H;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[i] -= H;
        let numeric = (objective(&forward(&plus), &w) - objective(&forward(&minus), &w)) / (2.0 * H);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

#[test]
fn matmul_gradients() {
    let mut rng = rng_from_seed(1);
    let inputs = [random(&[5, 4], &mut rng), random(&[4, 3], &mut rng)];
    for which in 0..2 {
        let e = check(
            &inputs,
            which,
            |x| matmul(&x[0], &x[1]).unwrap(),
            |x, out| {
                let (a, b) = x.split_at_mut(1);
                matmul_backward(&mut a[0], &mut b[0], out)
            },
        );
        assert!(e < 1e-6, "input {which}: {e}");
    }
}

#[test]
fn matmul_bt_gradients() {
    let mut rng = rng_from_seed(2);
    let inputs = [random(&[3, 4], &mut rng), random(&[6, 4], &mut rng)];
    for which in 0..2 {
        let e = check(
            &inputs,
            which,
            |x| matmul_bt(&x[0], &x[1]).unwrap(),
            |x, out| {
                let (a, b) = x.split_at_mut(1);
                matmul_bt_backward(&mut a[0], &mut b[0], out)
            },
        );
        assert!(e < 1e-6, "input {which}: {e}");
    }
}

#[test]
fn bias_add_and_mul_gradients() {
    let mut rng = rng_from_seed(3);
    let inputs = [random(&[4, 3], &mut rng), random(&[3], &mut rng)];
    for which in 0..2 {
        let e = check(
            &inputs,
            which,
            |x| add_bias(&x[0], &x[1]).unwrap(),
            |x, out| {
                let (a, b) = x.split_at_mut(1);
                add_bias_backward(&mut a[0], &mut b[0], out)
            },
        );
        assert!(e < 1e-6, "add_bias {which}: {e}");
    }
    let inputs = [random(&[4, 3], &mut rng), random(&[4, 3], &mut rng)];
    for which in 0..2 {
        let e = check(
            &inputs,
            which,
            |x| mul(&x[0], &x[1]).unwrap(),
            |x, out| {
                let (a, b) = x.split_at_mut(1);
                mul_backward(&mut a[0], &mut b[0], out)
            },
        );
        assert!(e < 1e-6, "mul {which}: {e}");
        let e = check(
            &inputs,
            which,
            |x| add(&x[0], &x[1]).unwrap(),
            |x, out| {
                let (a, b) = x.split_at_mut(1);
                add_backward(&mut a[0], &mut b[0], out)
            },
        );
        assert!(e < 1e-6, "add {which}: {e}");
    }
}

#[test]
fn sigmoid_gradient() {
    let mut rng = rng_from_seed(4);
    let inputs = [random(&[20], &mut rng)];
    let e = check(&inputs, 0, |x| sigmoid(&x[0]), |x, out| sigmoid_backward(&mut x[0], out));
    assert!(e < 1e-8, "{e}");
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut rng = rng_from_seed(5);
    let mut x = random(&[30], &mut rng);
    // keep every input further than h from zero
    for v in x.data_mut() {
        if v.abs() < 0.01 {
            *v = 0.5;
        }
    }
    let e = check(&[x], 0, |x| relu(&x[0]), |x, out| relu_backward(&mut x[0], out));
    assert!(e < 1e-8, "{e}");
}

#[test]
fn embedding_gradient() {
    let mut rng = rng_from_seed(6);
    let ids = [3usize, 0, 3, 1];
    let inputs = [random(&[5, 4], &mut rng)];
    let e = check(
        &inputs,
        0,
        |x| embedding_lookup(&x[0], &ids).unwrap(),
        |x, out| embedding_backward(&mut x[0], &ids, out),
    );
    assert!(e < 1e-8, "{e}");
}

fn naive_conv(x: &Tensor, w: &Tensor, bias: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let f = w.shape();
    let (b, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let (c, fh, fw) = (f[0], f[2], f[3]);
    let (oh, ow) = (h - fh + 1, wd - fw + 1);
    let mut out = vec![0.0; b * c * oh * ow];
    for n in 0..b {
        for o in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.data()[o];
                    for ic in 0..cin {
                        for di in 0..fh {
                            for dj in 0..fw {
                                acc += x.data()[((n * cin + ic) * h + i + di) * wd + j + dj]
                                    * w.data()[((o * cin + ic) * fh + di) * fw + dj];
                            }
                        }
                    }
                    out[((n * c + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_quadruple_loop() {
    let mut rng = rng_from_seed(7);
    for shape in [[1, 1, 6, 6], [3, 1, 8, 5], [2, 1, 3, 3], [4, 1, 20, 20]] {
        let x = random(&shape, &mut rng);
        let w = random(&[2, 1, 3, 3], &mut rng);
        let bias = random(&[2], &mut rng);
        let fast = conv2d(&x, &w, &bias).unwrap();
        let slow = naive_conv(&x, &w, &bias);
        let worst = fast
            .data()
            .iter()
            .zip(&slow)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-12, "{shape:?}: {worst}");
    }
}

#[test]
fn conv2d_gradients() {
    let mut rng = rng_from_seed(8);
    let inputs = [
        random(&[2, 1, 6, 6], &mut rng),
        random(&[2, 1, 3, 3], &mut rng),
        random(&[2], &mut rng),
    ];
    for which in 0..3 {
        let e = check(
            &inputs,
            which,
            |x| conv2d(&x[0], &x[1], &x[2]).unwrap(),
            |x, out| {
                let (a, rest) = x.split_at_mut(1);
                let (b, c) = rest.split_at_mut(1);
                conv2d_backward(&mut a[0], &mut b[0], &mut c[0], out)
            },
        );
        assert!(e < 1e-6, "input {which}: {e}");
    }
}

fn bn_check(shape: &[usize], mode: Mode) {
    let mut rng = rng_from_seed(9);
    let channels = shape[1];
    let mut bn = BatchNorm::new(channels);
    for v in bn.gamma.data_mut() {
        *v = rng.gen_range(0.5..1.5);
    }
    for v in bn.beta.data_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    bn.running_mean = (0..channels).map(|_| rng.gen_range(-0.5..0.5)).collect();
    bn.running_var = (0..channels).map(|_| rng.gen_range(0.5..2.0)).collect();
    let x = random(shape, &mut rng);

    // inputs: x, gamma, beta
    let inputs = [x, bn.gamma.clone(), bn.beta.clone()];
    let fwd = |t: &[Tensor]| {
        let mut b = bn.clone();
        b.gamma = t[1].clone();
        b.beta = t[2].clone();
        b.forward(&t[0], mode).unwrap().0
    };
    for which in 0..3 {
        let e = check(&inputs, which, fwd, |t, out| {
            let mut b = bn.clone();
            b.gamma = t[1].clone();
            b.beta = t[2].clone();
            let (_, cache) = b.forward(&t[0], mode).unwrap();
            b.backward(&mut t[0], out, &cache);
            t[1] = b.gamma.clone();
            t[2] = b.beta.clone();
        });
        assert!(e < 1e-5, "{shape:?} {mode:?} input {which}: {e}");
    }
}

#[test]
fn batch_norm_gradients() {
    bn_check(&[4, 3], Mode::Train);
    bn_check(&[4, 3], Mode::Eval);
    bn_check(&[3, 2, 4, 5], Mode::Train);
    bn_check(&[3, 2, 4, 5], Mode::Eval);
}

#[test]
fn dropout_gradient_with_fixed_mask() {
    let mut rng = rng_from_seed(10);
    let x = random(&[50], &mut rng);
    let (_, mask) = dropout(&x, 0.4, Mode::Train, &mut rng_from_seed(11)).unwrap();
    let m = mask.multipliers().unwrap().to_vec();
    let e = check(
        &[x],
        0,
        |t| Tensor::new([50], t[0].data().iter().zip(&m).map(|(a, b)| a * b).collect()).unwrap(),
        |t, out| dropout_backward(&mut t[0], out, &mask),
    );
    assert!(e < 1e-8, "{e}");
}
