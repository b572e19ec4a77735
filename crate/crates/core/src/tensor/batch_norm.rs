use super::{Mode, Tensor};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Batch normalisation over the channel axis (axis 1).
///
/// For a 2-D input `N×C` each column is a channel; for `B×C×H×W` statistics
/// are pooled over batch and spatial positions of each channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    mode: Mode,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    count: usize,
}

struct Layout {
    outer: usize,
    channels: usize,
    inner: usize,
}

impl Layout {
    fn of(x: &Tensor, channels: usize) -> Result<Self> {
        if x.ndim() < 2 || x.shape()[1] != channels {
            return Err(Error::Dimension {
                op: "batch_norm",
                lhs: x.shape().to_vec(),
                rhs: vec![channels],
            });
        }
        Ok(Self {
            outer: x.shape()[0],
            channels,
            inner: x.shape()[2..].iter().product(),
        })
    }

    fn for_each_channel<F: FnMut(usize, std::ops::Range<usize>)>(&self, mut f: F) {
        for o in 0..self.outer {
            for c in 0..self.channels {
                let start = (o * self.channels + c) * self.inner;
                f(c, start..start + self.inner);
            }
        }
    }
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full([channels], 1.0).with_grad(),
            beta: Tensor::zeros([channels]).with_grad(),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Pure in both modes; running statistics change only through
    /// [`BatchNorm::update_running_stats`].
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, BatchNormCache)> {
        let layout = Layout::of(x, self.channels())?;
        let c = self.channels();
        let count = layout.outer * layout.inner;
        let data = x.data();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                layout.for_each_channel(|ch, r| mean[ch] += data[r].iter().sum::<f64>());
                let n = count.max(1) as f64;
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![0.0; c];
                layout.for_each_channel(|ch, r| {
                    var[ch] += data[r].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>()
                });
                var.iter_mut().for_each(|v| *v /= n);
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut normalized = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        let (g, b) = (self.gamma.data(), self.beta.data());
        layout.for_each_channel(|ch, r| {
            for i in r {
                let xh = (data[i] - mean[ch]) * inv_std[ch];
                normalized[i] = xh;
                out[i] = g[ch] * xh + b[ch];
            }
        });
        let mut out = Tensor::new(x.shape().to_vec(), out)?;
        out.set_requires_grad(true);
        Ok((
            out,
            BatchNormCache {
                mode,
                normalized,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                count,
            },
        ))
    }

    /// Exponential moving average with `momentum`; the variance estimate is
    /// unbiased when more than one value was pooled.
    pub fn update_running_stats(&mut self, cache: &BatchNormCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = self.momentum;
        let correction = if cache.count > 1 {
            cache.count as f64 / (cache.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * cache.batch_mean[c];
            self.running_var[c] =
                (1.0 - m) * self.running_var[c] + m * cache.batch_var[c] * correction;
        }
    }

    pub fn backward(&mut self, x: &mut Tensor, out: &Tensor, cache: &BatchNormCache) {
        let Some(g) = out.grad() else { return };
        let layout = Layout {
            outer: x.shape()[0],
            channels: self.channels(),
            inner: x.shape()[2..].iter().product(),
        };
        let c = self.channels();
        let mut sum_g = vec![0.0; c];
        let mut sum_g_xh = vec![0.0; c];
        layout.for_each_channel(|ch, r| {
            for i in r {
                sum_g[ch] += g[i];
                sum_g_xh[ch] += g[i] * cache.normalized[i];
            }
        });
        {
            let gg = self.gamma.grad_mut();
            for ch in 0..c {
                gg[ch] += sum_g_xh[ch];
            }
        }
        {
            let gb = self.beta.grad_mut();
            for ch in 0..c {
                gb[ch] += sum_g[ch];
            }
        }
        if !x.requires_grad() {
            return;
        }
        let gamma = self.gamma.data().to_vec();
        let n = cache.count.max(1) as f64;
        let mut gx = vec![0.0; g.len()];
        match cache.mode {
            Mode::Train => layout.for_each_channel(|ch, r| {
                let scale = gamma[ch] * cache.inv_std[ch];
                for i in r {
                    gx[i] = scale
                        * (g[i] - sum_g[ch] / n - cache.normalized[i] * sum_g_xh[ch] / n);
                }
            }),
            Mode::Eval => layout.for_each_channel(|ch, r| {
                let scale = gamma[ch] * cache.inv_std[ch];
                for i in r {
                    gx[i] = scale * g[i];
                }
            }),
        }
        x.accumulate_grad(&gx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let bn = BatchNorm {
            eps: 0.0,
            ..BatchNorm::new(3)
        };
        let x = Tensor::from_fn([4, 3], |i| i as f64 * 0.3 - 1.0);
        let (y, _) = bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn train_output_is_standardised_per_channel() {
        let bn = BatchNorm::new(2);
        let x = Tensor::from_fn([3, 2, 2, 2], |i| ((i * 7919) % 13) as f64 * 0.7 + 2.0);
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| {
                    let s = (b * 2 + ch) * 4;
                    y.data()[s..s + 4].to_vec()
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            // epsilon shrinks the variance slightly below one
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }

    #[test]
    fn single_example_does_not_fail() {
        let mut bn = BatchNorm::new(3);
        let x = Tensor::from_fn([1, 3], |i| i as f64);
        let (y, cache) = bn.forward(&x, Mode::Train).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        bn.update_running_stats(&cache);
        assert!(bn.running_var.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bn = BatchNorm::new(1);
        let x = Tensor::new([2, 1], vec![1.0, 3.0]).unwrap();
        let (_, cache) = bn.forward(&x, Mode::Train).unwrap();
        bn.update_running_stats(&cache);
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance is 2.0
        assert!((bn.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn wrong_channel_count() {
        let bn = BatchNorm::new(4);
        assert!(bn.forward(&Tensor::zeros([2, 3]), Mode::Train).is_err());
    }
}
