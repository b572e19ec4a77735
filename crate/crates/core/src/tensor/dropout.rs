use rand::Rng as _;

use super::{Mode, Tensor};
use crate::error::{Error, Result};
use crate::Rng;

/// Per-element multipliers applied in the forward pass (`0` or
/// `1 / (1 - rate)`); `None` when the layer acted as the identity.
#[derive(Clone, Debug, Default)]
pub struct DropoutMask(Option<Vec<f64>>);

impl DropoutMask {
    pub fn is_identity(&self) -> bool {
        self.0.is_none()
    }

    pub fn multipliers(&self) -> Option<&[f64]> {
        self.0.as_deref()
    }
}

/// Inverted dropout: survivors are scaled at train time so evaluation is the
/// identity.
pub fn dropout(x: &Tensor, rate: f64, mode: Mode, rng: &mut Rng) -> Result<(Tensor, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    let mut out = x.detach();
    out.set_requires_grad(x.requires_grad());
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((out, DropoutMask(None)));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    for (v, m) in out.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok((out, DropoutMask(Some(mask))))
}

pub fn dropout_backward(x: &mut Tensor, out: &Tensor, mask: &DropoutMask) {
    let Some(g) = out.grad() else { return };
    if !x.requires_grad() {
        return;
    }
    match &mask.0 {
        None => x.accumulate_grad(g),
        Some(m) => {
            let gx: Vec<f64> = g.iter().zip(m).map(|(g, m)| g * m).collect();
            x.accumulate_grad(&gx);
        }
    }
}
