//! Layer-level helpers composed from tape primitives.

use rand::Rng;

use super::ops::concat;
use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `x . w + b` for `x[n x in]`, `w[in x out]`, `b[out]`.
pub fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
    let y = x.matmul(w)?;
    match b {
        Some(b) => y.add_row(b),
        None => Ok(y),
    }
}

fn keep_mask(len: usize, p: f64, rng: &mut impl Rng) -> Vec<f64> {
    let scale = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
        .collect()
}

/// Inverted dropout: identity in eval mode, unbiased in train mode.
pub fn dropout<'t>(x: Var<'t>, p: f64, train: bool, rng: &mut impl Rng) -> Result<Var<'t>> {
    check_rate(p)?;
    if !train || p == 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let mask = Tensor::new(shape.clone(), keep_mask(shape.iter().product(), p, rng))?;
    x.mul(x.tape().constant(mask))
}

/// Dropout whose feature mask is shared by every row of `x[n x d]`, i.e. the
/// same units are dropped at every time step of a sequence.
pub fn dropout_shared_rows<'t>(x: Var<'t>, p: f64, train: bool, rng: &mut impl Rng) -> Result<Var<'t>> {
    check_rate(p)?;
    if !train || p == 0.0 {
        return Ok(x);
    }
    let cols = *x.shape().last().unwrap_or(&0);
    let mask = Tensor::vector(keep_mask(cols, p, rng));
    x.mul_row(x.tape().constant(mask))
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout rate {p} outside [0, 1)")));
    }
    Ok(())
}

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential update: `running = momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

/// Batch mean and variance per channel.
pub type BatchStats = (Vec<f64>, Vec<f64>);

/// Batch normalization over the rows of `x[n x c]`.
///
/// In train mode with at least two rows the batch statistics are used and
/// returned so the caller can fold them into the running statistics. With a
/// single row, or in eval mode, the running statistics are used.
pub fn batch_norm1d<'t>(
    x: Var<'t>,
    gain: Var<'t>,
    bias: Var<'t>,
    running: &RunningStats,
    train: bool,
    eps: f64,
) -> Result<(Var<'t>, Option<BatchStats>)> {
    let shape = x.shape();
    if shape.len() != 2 || running.mean.len() != shape[1] {
        return Err(Error::shape("batch_norm1d", &shape, &[running.mean.len()]));
    }
    if train && shape[0] >= 2 {
        let (y, mean, var) = x.batch_norm_train(gain, bias, eps)?;
        return Ok((y, Some((mean, var))));
    }
    let tape = x.tape();
    let inv: Vec<f64> = running.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let shift: Vec<f64> = running.mean.iter().zip(&inv).map(|(m, i)| -m * i).collect();
    let normalized = x
        .mul_row(tape.constant(Tensor::vector(inv)))?
        .add_row(tape.constant(Tensor::vector(shift)))?;
    Ok((normalized.mul_row(gain)?.add_row(bias)?, None))
}

/// Fixed sinusoidal position table `[len x d]`, row `t` encoding position `t`.
pub fn positional_table(len: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::config(format!(
            "positional encoding width must be even, got {d}"
        )));
    }
    let mut data = Vec::with_capacity(len * d);
    for t in 0..len {
        data.extend(sinusoid_values(t as f64, d));
    }
    Tensor::new(vec![len, d], data)
}

/// Plain-value sinusoidal encoding of one position.
pub fn sinusoid_values(pos: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let a = pos * super::ops::sinusoid_frequency(i, d);
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Concatenate 1-D variables end to end.
pub fn cat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    concat(parts, 0)
}
