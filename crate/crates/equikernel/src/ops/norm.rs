//! Batch and layer normalization.
//!
//! Batch norm computes per-channel statistics over every other axis
//! (`[.., C, H, W]` reduces over lead and grid; `[N, D]` reduces over the
//! batch). Variance is biased (`1/m`), eps sits inside the square root, and
//! running statistics follow `r ← momentum·r + (1−momentum)·batch`.
//!
//! The `pair_shared` flag ties channel `c` and its mirrored twin `c + C`
//! (channel extent `2C`) to one statistics/affine group, so normalization
//! commutes with the pair swap exactly.
//!
//! Layer norm here is per spatial position over the channel axis with a
//! per-channel affine, which keeps it independent of grid size and batch
//! makeup.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::{Axis, Shape, Tensor};

/// Batch statistics captured during a training-mode forward pass.
#[derive(Clone)]
pub struct BnSaved<E: Element> {
    pub mean: Tensor<E>,
    pub var: Tensor<E>,
}

/// Views `shape` as `[pre, ch, post]` around its channel-like axis
/// (`C` anywhere, else a trailing `D`).
fn channel_view(shape: &Shape, op: &'static str) -> Result<(usize, usize, usize)> {
    let axes = shape.axes();
    if let Some(pos) = axes.iter().position(|&(a, _)| a == Axis::C) {
        let pre: usize = axes[..pos].iter().map(|&(_, n)| n).product();
        let post: usize = axes[pos + 1..].iter().map(|&(_, n)| n).product();
        return Ok((pre, axes[pos].1, post));
    }
    if let Some(&(Axis::D, d)) = axes.last() {
        return Ok((shape.lead(1), d, 1));
    }
    Err(Error::BadShape {
        op,
        shape: shape.clone(),
        reason: "expected a C axis or a trailing D axis".into(),
    })
}

fn group_count(ch: usize, pair_shared: bool, op: &'static str, shape: &Shape) -> Result<usize> {
    if pair_shared && ch % 2 != 0 {
        return Err(Error::BadShape {
            op,
            shape: shape.clone(),
            reason: "pair-shared normalization needs an even channel extent".into(),
        });
    }
    Ok(if pair_shared { ch / 2 } else { ch })
}

fn check_affine<E: Element>(
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    groups: usize,
    op: &'static str,
) -> Result<()> {
    for t in [gamma, beta] {
        if t.len() != groups {
            return Err(Error::BadShape {
                op,
                shape: t.shape().clone(),
                reason: format!("affine parameter must have {groups} entries"),
            });
        }
    }
    Ok(())
}

/// Per-group batch statistics of `x` (mean and biased variance).
fn batch_stats<E: Element>(
    x: &Tensor<E>,
    pre: usize,
    ch: usize,
    post: usize,
    groups: usize,
) -> BnSaved<E> {
    let mut mean = vec![E::zero(); groups];
    let mut var = vec![E::zero(); groups];
    let count = E::from_f64((pre * post * (ch / groups)) as f64);
    for f in 0..pre {
        for c in 0..ch {
            let g = c % groups;
            let base = (f * ch + c) * post;
            for i in 0..post {
                mean[g] += x.data()[base + i];
            }
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    for f in 0..pre {
        for c in 0..ch {
            let g = c % groups;
            let base = (f * ch + c) * post;
            for i in 0..post {
                let d = x.data()[base + i] - mean[g];
                var[g] += d * d;
            }
        }
    }
    for v in &mut var {
        *v /= count;
    }
    let shape = Shape::new(&[(Axis::C, groups)]);
    BnSaved {
        mean: Tensor::from_vec(shape.clone(), mean).expect("stat length matches"),
        var: Tensor::from_vec(shape, var).expect("stat length matches"),
    }
}

fn normalize<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    mean: &Tensor<E>,
    var: &Tensor<E>,
    pre: usize,
    ch: usize,
    post: usize,
    groups: usize,
    eps: f64,
) -> Tensor<E> {
    let mut y = Tensor::zeros(x.shape().clone());
    let eps = E::from_f64(eps);
    for f in 0..pre {
        for c in 0..ch {
            let g = c % groups;
            let scale = gamma.data()[g] / (var.data()[g] + eps).sqrt();
            let shift = beta.data()[g] - mean.data()[g] * scale;
            let base = (f * ch + c) * post;
            for i in 0..post {
                y.data_mut()[base + i] = x.data()[base + i] * scale + shift;
            }
        }
    }
    y
}

/// Training-mode batch norm; returns the output and the batch statistics
/// (feed those to [`batch_norm_train_backward`] and [`update_running`]).
pub fn batch_norm_train<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    pair_shared: bool,
    eps: f64,
) -> Result<(Tensor<E>, BnSaved<E>)> {
    let (pre, ch, post) = channel_view(x.shape(), "batch_norm_train")?;
    let groups = group_count(ch, pair_shared, "batch_norm_train", x.shape())?;
    check_affine(gamma, beta, groups, "batch_norm_train")?;
    let saved = batch_stats(x, pre, ch, post, groups);
    let y = normalize(x, gamma, beta, &saved.mean, &saved.var, pre, ch, post, groups, eps);
    y.debug_check_finite("batch_norm_train");
    Ok((y, saved))
}

/// Gradient of training-mode batch norm: `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    saved: &BnSaved<E>,
    pair_shared: bool,
    eps: f64,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (pre, ch, post) = channel_view(x.shape(), "batch_norm_train_backward")?;
    let groups = group_count(ch, pair_shared, "batch_norm_train_backward", x.shape())?;
    let count = E::from_f64((pre * post * (ch / groups)) as f64);
    let eps = E::from_f64(eps);
    let mut sum_dy = vec![E::zero(); groups];
    let mut sum_dy_xhat = vec![E::zero(); groups];
    let inv_std: Vec<E> = saved
        .var
        .data()
        .iter()
        .map(|&v| E::one() / (v + eps).sqrt())
        .collect();
    for f in 0..pre {
        for c in 0..ch {
            let g = c % groups;
            let base = (f * ch + c) * post;
            for i in 0..post {
                let d = dy.data()[base + i];
                sum_dy[g] += d;
                sum_dy_xhat[g] += d * (x.data()[base + i] - saved.mean.data()[g]) * inv_std[g];
            }
        }
    }
    let mut dx = Tensor::zeros(x.shape().clone());
    for f in 0..pre {
        for c in 0..ch {
            let g = c % groups;
            let base = (f * ch + c) * post;
            for i in 0..post {
                let xhat = (x.data()[base + i] - saved.mean.data()[g]) * inv_std[g];
                dx.data_mut()[base + i] = gamma.data()[g]
                    * inv_std[g]
                    * (dy.data()[base + i] - sum_dy[g] / count - xhat * sum_dy_xhat[g] / count);
            }
        }
    }
    let stat_shape = Shape::new(&[(Axis::C, groups)]);
    Ok((
        dx,
        Tensor::from_vec(stat_shape.clone(), sum_dy_xhat)?,
        Tensor::from_vec(stat_shape, sum_dy)?,
    ))
}

/// Inference-mode batch norm using running statistics.
pub fn batch_norm_eval<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    run_mean: &Tensor<E>,
    run_var: &Tensor<E>,
    pair_shared: bool,
    eps: f64,
) -> Result<Tensor<E>> {
    let (pre, ch, post) = channel_view(x.shape(), "batch_norm_eval")?;
    let groups = group_count(ch, pair_shared, "batch_norm_eval", x.shape())?;
    check_affine(gamma, beta, groups, "batch_norm_eval")?;
    if run_mean.len() != groups || run_var.len() != groups {
        return Err(Error::BadShape {
            op: "batch_norm_eval",
            shape: run_mean.shape().clone(),
            reason: format!("running statistics must have {groups} entries"),
        });
    }
    Ok(normalize(x, gamma, beta, run_mean, run_var, pre, ch, post, groups, eps))
}

/// Gradient of inference-mode batch norm (running stats held fixed).
pub fn batch_norm_eval_backward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    run_mean: &Tensor<E>,
    run_var: &Tensor<E>,
    pair_shared: bool,
    eps: f64,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (pre, ch, post) = channel_view(x.shape(), "batch_norm_eval_backward")?;
    let groups = group_count(ch, pair_shared, "batch_norm_eval_backward", x.shape())?;
    let eps = E::from_f64(eps);
    let mut dx = Tensor::zeros(x.shape().clone());
    let mut dgamma = vec![E::zero(); groups];
    let mut dbeta = vec![E::zero(); groups];
    for f in 0..pre {
        for c in 0..ch {
            let g = c % groups;
            let inv_std = E::one() / (run_var.data()[g] + eps).sqrt();
            let base = (f * ch + c) * post;
            for i in 0..post {
                let d = dy.data()[base + i];
                dx.data_mut()[base + i] = d * gamma.data()[g] * inv_std;
                dgamma[g] += d * (x.data()[base + i] - run_mean.data()[g]) * inv_std;
                dbeta[g] += d;
            }
        }
    }
    let stat_shape = Shape::new(&[(Axis::C, groups)]);
    Ok((
        dx,
        Tensor::from_vec(stat_shape.clone(), dgamma)?,
        Tensor::from_vec(stat_shape, dbeta)?,
    ))
}

/// Folds batch statistics into the running estimates:
/// `r ← momentum·r + (1−momentum)·batch`.
pub fn update_running<E: Element>(
    run_mean: &mut Tensor<E>,
    run_var: &mut Tensor<E>,
    batch: &BnSaved<E>,
    momentum: f64,
) {
    let m = E::from_f64(momentum);
    let k = E::one() - m;
    for (r, &b) in run_mean.data_mut().iter_mut().zip(batch.mean.data()) {
        *r = *r * m + b * k;
    }
    for (r, &b) in run_var.data_mut().iter_mut().zip(batch.var.data()) {
        *r = *r * m + b * k;
    }
}

/// Layer norm over the channel axis, applied independently at every spatial
/// position, with a per-channel affine.
pub fn layer_norm<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    let (pre, ch, post) = channel_view(x.shape(), "layer_norm")?;
    check_affine(gamma, beta, ch, "layer_norm")?;
    let inv_c = E::from_f64(1.0 / ch as f64);
    let eps = E::from_f64(eps);
    let mut y = Tensor::zeros(x.shape().clone());
    for f in 0..pre {
        for i in 0..post {
            let at = |c: usize| x.data()[(f * ch + c) * post + i];
            let mut mean = E::zero();
            for c in 0..ch {
                mean += at(c);
            }
            mean *= inv_c;
            let mut var = E::zero();
            for c in 0..ch {
                let d = at(c) - mean;
                var += d * d;
            }
            var *= inv_c;
            let inv_std = E::one() / (var + eps).sqrt();
            for c in 0..ch {
                y.data_mut()[(f * ch + c) * post + i] =
                    (at(c) - mean) * inv_std * gamma.data()[c] + beta.data()[c];
            }
        }
    }
    y.debug_check_finite("layer_norm");
    Ok(y)
}

/// Gradient of [`layer_norm`]: `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    eps: f64,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (pre, ch, post) = channel_view(x.shape(), "layer_norm_backward")?;
    let inv_c = E::from_f64(1.0 / ch as f64);
    let eps = E::from_f64(eps);
    let mut dx = Tensor::zeros(x.shape().clone());
    let mut dgamma = vec![E::zero(); ch];
    let mut dbeta = vec![E::zero(); ch];
    for f in 0..pre {
        for i in 0..post {
            let at = |c: usize| x.data()[(f * ch + c) * post + i];
            let gat = |c: usize| dy.data()[(f * ch + c) * post + i];
            let mut mean = E::zero();
            for c in 0..ch {
                mean += at(c);
            }
            mean *= inv_c;
            let mut var = E::zero();
            for c in 0..ch {
                let d = at(c) - mean;
                var += d * d;
            }
            var *= inv_c;
            let inv_std = E::one() / (var + eps).sqrt();
            let mut mean_dyhat = E::zero();
            let mut mean_dyhat_xhat = E::zero();
            for c in 0..ch {
                let xhat = (at(c) - mean) * inv_std;
                let dyhat = gat(c) * gamma.data()[c];
                mean_dyhat += dyhat;
                mean_dyhat_xhat += dyhat * xhat;
                dgamma[c] += gat(c) * xhat;
                dbeta[c] += gat(c);
            }
            mean_dyhat *= inv_c;
            mean_dyhat_xhat *= inv_c;
            for c in 0..ch {
                let xhat = (at(c) - mean) * inv_std;
                let dyhat = gat(c) * gamma.data()[c];
                dx.data_mut()[(f * ch + c) * post + i] =
                    inv_std * (dyhat - mean_dyhat - xhat * mean_dyhat_xhat);
            }
        }
    }
    let shape = Shape::new(&[(Axis::C, ch)]);
    Ok((
        dx,
        Tensor::from_vec(shape.clone(), dgamma)?,
        Tensor::from_vec(shape, dbeta)?,
    ))
}
