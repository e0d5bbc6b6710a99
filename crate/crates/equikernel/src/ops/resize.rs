//! Bilinear resampling with align-corners coordinate mapping.
//!
//! Align-corners maps output index `j` to source coordinate
//! `j · (S−1)/(D−1)`, so the four grid corners land exactly on the source
//! corners and a same-size resize is the exact identity. A target extent of
//! one samples the source center — the symmetric choice, which keeps the
//! map commuting with a width mirror. Sample coordinates and weights are
//! computed in `f64` regardless of element type to keep left/right
//! resampling numerically symmetric.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::{Axis, Shape, Tensor};

/// Per-output-index sampling plan along one axis.
struct AxisPlan {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn plan(src: usize, dst: usize) -> AxisPlan {
    let mut lo = Vec::with_capacity(dst);
    let mut hi = Vec::with_capacity(dst);
    let mut frac = Vec::with_capacity(dst);
    for j in 0..dst {
        let x = if dst == 1 {
            (src as f64 - 1.0) / 2.0
        } else {
            j as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
        };
        let f = x.floor();
        let i0 = (f as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        lo.push(i0);
        hi.push(i1);
        frac.push(x - f);
    }
    AxisPlan { lo, hi, frac }
}

fn geometry<E: Element>(
    input: &Tensor<E>,
    target: (usize, usize),
) -> Result<(usize, usize, usize)> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Config(format!(
            "resize target must be ≥ 1×1, got {th}×{tw}"
        )));
    }
    let tr = input.shape().trailing(2, "bilinear_resize")?;
    if tr[0].0 != Axis::H || tr[1].0 != Axis::W {
        return Err(Error::BadShape {
            op: "bilinear_resize",
            shape: input.shape().clone(),
            reason: "expected trailing axes [H, W]".into(),
        });
    }
    Ok((input.shape().lead(2), tr[0].1, tr[1].1))
}

/// Resamples the trailing `[H, W]` grid of `input` to `target = (H', W')`.
pub fn bilinear_resize<E: Element>(input: &Tensor<E>, target: (usize, usize)) -> Result<Tensor<E>> {
    let (lead, h, w) = geometry(input, target)?;
    let (th, tw) = target;
    let py = plan(h, th);
    let px = plan(w, tw);
    let mut axes = input.shape().axes()[..input.shape().rank() - 2].to_vec();
    axes.extend_from_slice(&[(Axis::H, th), (Axis::W, tw)]);
    let mut out = Tensor::zeros(Shape::new(&axes));
    for f in 0..lead {
        let src = &input.data()[f * h * w..(f + 1) * h * w];
        let dst = &mut out.data_mut()[f * th * tw..(f + 1) * th * tw];
        for oy in 0..th {
            let (y0, y1, fy) = (py.lo[oy], py.hi[oy], py.frac[oy]);
            let r0 = &src[y0 * w..y0 * w + w];
            let r1 = &src[y1 * w..y1 * w + w];
            for ox in 0..tw {
                let (x0, x1, fx) = (px.lo[ox], px.hi[ox], px.frac[ox]);
                let top = r0[x0].to_f64() * (1.0 - fx) + r0[x1].to_f64() * fx;
                let bot = r1[x0].to_f64() * (1.0 - fx) + r1[x1].to_f64() * fx;
                dst[oy * tw + ox] = E::from_f64(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out.debug_check_finite("bilinear_resize");
    Ok(out)
}

/// Scatter-adjoint of [`bilinear_resize`]: routes `d_out` back onto the
/// source grid with the same sampling weights.
pub fn bilinear_resize_backward<E: Element>(
    input_shape: &Shape,
    target: (usize, usize),
    d_out: &Tensor<E>,
) -> Result<Tensor<E>> {
    let probe = Tensor::<E>::zeros(input_shape.clone());
    let (lead, h, w) = geometry(&probe, target)?;
    let (th, tw) = target;
    let py = plan(h, th);
    let px = plan(w, tw);
    let mut d_in = Tensor::zeros(input_shape.clone());
    for f in 0..lead {
        let src = &d_out.data()[f * th * tw..(f + 1) * th * tw];
        let dst = &mut d_in.data_mut()[f * h * w..(f + 1) * h * w];
        for oy in 0..th {
            let (y0, y1, fy) = (py.lo[oy], py.hi[oy], py.frac[oy]);
            for ox in 0..tw {
                let (x0, x1, fx) = (px.lo[ox], px.hi[ox], px.frac[ox]);
                let g = src[oy * tw + ox].to_f64();
                dst[y0 * w + x0] += E::from_f64(g * (1.0 - fy) * (1.0 - fx));
                dst[y0 * w + x1] += E::from_f64(g * (1.0 - fy) * fx);
                dst[y1 * w + x0] += E::from_f64(g * fy * (1.0 - fx));
                dst[y1 * w + x1] += E::from_f64(g * fy * fx);
            }
        }
    }
    Ok(d_in)
}
