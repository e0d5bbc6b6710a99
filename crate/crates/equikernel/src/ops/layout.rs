//! Data-movement ops: axis concat/narrow, map⇄token reshuffles, the spatial
//! width mirror, the channel-pair swap, and rank-2 matrix products.
//!
//! Mirror and pair swap are involutions acting by permutation, so each is
//! its own adjoint; the reshuffles are exact inverses of each other.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Axis, Shape, Tensor};

/// Splits `shape` at `axis` into `(pre, extent, post)` strides.
fn split_at_axis(shape: &Shape, axis: Axis, op: &'static str) -> Result<(usize, usize, usize)> {
    let axes = shape.axes();
    let pos = axes.iter().position(|&(a, _)| a == axis).ok_or_else(|| Error::BadShape {
        op,
        shape: shape.clone(),
        reason: format!("expected a {axis} axis"),
    })?;
    let pre: usize = axes[..pos].iter().map(|&(_, n)| n).product();
    let post: usize = axes[pos + 1..].iter().map(|&(_, n)| n).product();
    Ok((pre, axes[pos].1, post))
}

/// Concatenates tensors along `axis`; all other axes must agree.
pub fn concat<E: Element>(parts: &[&Tensor<E>], axis: Axis) -> Result<Tensor<E>> {
    let first = *parts.first().ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
    let (pre, _, post) = split_at_axis(first.shape(), axis, "concat")?;
    let mut total = 0usize;
    for p in parts {
        let (ppre, pn, ppost) = split_at_axis(p.shape(), axis, "concat")?;
        if ppre != pre || ppost != post || p.shape().rank() != first.shape().rank() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().clone(),
                rhs: p.shape().clone(),
            });
        }
        total += pn;
    }
    let mut axes = first.shape().axes().to_vec();
    let pos = axes.iter().position(|&(a, _)| a == axis).expect("validated above");
    axes[pos].1 = total;
    let mut out = Tensor::zeros(Shape::new(&axes));
    for f in 0..pre {
        let mut offset = 0usize;
        for p in parts {
            let pn = split_at_axis(p.shape(), axis, "concat")?.1;
            let src = &p.data()[f * pn * post..(f + 1) * pn * post];
            let dst_base = f * total * post + offset * post;
            out.data_mut()[dst_base..dst_base + pn * post].copy_from_slice(src);
            offset += pn;
        }
    }
    Ok(out)
}

/// Splits `d_out` of a [`concat`] back into per-input gradients.
pub fn concat_backward<E: Element>(
    part_shapes: &[&Shape],
    axis: Axis,
    d_out: &Tensor<E>,
) -> Result<Vec<Tensor<E>>> {
    let (pre, total, post) = split_at_axis(d_out.shape(), axis, "concat_backward")?;
    let mut grads: Vec<Tensor<E>> = part_shapes
        .iter()
        .map(|s| Tensor::zeros((*s).clone()))
        .collect();
    for f in 0..pre {
        let mut offset = 0usize;
        for g in grads.iter_mut() {
            let pn = split_at_axis(g.shape(), axis, "concat_backward")?.1;
            let src_base = f * total * post + offset * post;
            let dst = &mut g.data_mut()[f * pn * post..(f + 1) * pn * post];
            dst.copy_from_slice(&d_out.data()[src_base..src_base + pn * post]);
            offset += pn;
        }
        if offset != total {
            return Err(Error::Config(
                "concat_backward: part extents do not sum to the output extent".into(),
            ));
        }
    }
    Ok(grads)
}

/// Extracts `[start, start+len)` along `axis`.
pub fn narrow<E: Element>(x: &Tensor<E>, axis: Axis, start: usize, len: usize) -> Result<Tensor<E>> {
    let (pre, n, post) = split_at_axis(x.shape(), axis, "narrow")?;
    if start + len > n || len == 0 {
        return Err(Error::OutOfRange {
            what: "narrow range",
            value: format!("{start}..{}", start + len),
            allowed: format!("within 0..{n}, non-empty"),
        });
    }
    let mut axes = x.shape().axes().to_vec();
    let pos = axes.iter().position(|&(a, _)| a == axis).expect("validated above");
    axes[pos].1 = len;
    let mut out = Tensor::zeros(Shape::new(&axes));
    for f in 0..pre {
        let src = &x.data()[(f * n + start) * post..(f * n + start + len) * post];
        out.data_mut()[f * len * post..(f + 1) * len * post].copy_from_slice(src);
    }
    Ok(out)
}

/// Scatters a [`narrow`] gradient back into a zero tensor of the input shape.
pub fn narrow_backward<E: Element>(
    input_shape: &Shape,
    axis: Axis,
    start: usize,
    d_out: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (pre, n, post) = split_at_axis(input_shape, axis, "narrow_backward")?;
    let len = split_at_axis(d_out.shape(), axis, "narrow_backward")?.1;
    let mut d_in = Tensor::zeros(input_shape.clone());
    for f in 0..pre {
        let dst = &mut d_in.data_mut()[(f * n + start) * post..(f * n + start + len) * post];
        dst.copy_from_slice(&d_out.data()[f * len * post..(f + 1) * len * post]);
    }
    Ok(d_in)
}

/// `[C, H, W] → [L = H·W, D = C]`: one token per grid position.
pub fn tokens_from_map<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let axes = x.shape().axes();
    if axes.len() != 3 || axes[0].0 != Axis::C || axes[1].0 != Axis::H || axes[2].0 != Axis::W {
        return Err(Error::BadShape {
            op: "tokens_from_map",
            shape: x.shape().clone(),
            reason: "expected exactly [C, H, W]".into(),
        });
    }
    let (c, h, w) = (axes[0].1, axes[1].1, axes[2].1);
    let l = h * w;
    let mut out = Tensor::zeros(Shape::new(&[(Axis::L, l), (Axis::D, c)]));
    for ch in 0..c {
        for p in 0..l {
            out.data_mut()[p * c + ch] = x.data()[ch * l + p];
        }
    }
    Ok(out)
}

/// `[L, D] → [C = D, H, W]` with `L = H·W`: inverse of [`tokens_from_map`].
pub fn map_from_tokens<E: Element>(x: &Tensor<E>, h: usize, w: usize) -> Result<Tensor<E>> {
    let axes = x.shape().axes();
    if axes.len() != 2 || axes[0].0 != Axis::L || axes[1].0 != Axis::D {
        return Err(Error::BadShape {
            op: "map_from_tokens",
            shape: x.shape().clone(),
            reason: "expected exactly [L, D]".into(),
        });
    }
    let (l, c) = (axes[0].1, axes[1].1);
    if l != h * w {
        return Err(Error::BadShape {
            op: "map_from_tokens",
            shape: x.shape().clone(),
            reason: format!("token count {l} does not tile a {h}×{w} grid"),
        });
    }
    let mut out = Tensor::zeros(Shape::new(&[(Axis::C, c), (Axis::H, h), (Axis::W, w)]));
    for p in 0..l {
        for ch in 0..c {
            out.data_mut()[ch * l + p] = x.data()[p * c + ch];
        }
    }
    Ok(out)
}

/// Mirrors the trailing `W` axis: `out[.., x] = in[.., W−1−x]`.
/// Self-adjoint: apply it to the gradient to go backward.
pub fn mirror_w<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let tr = x.shape().trailing(1, "mirror_w")?;
    if tr[0].0 != Axis::W {
        return Err(Error::BadShape {
            op: "mirror_w",
            shape: x.shape().clone(),
            reason: "expected a trailing W axis".into(),
        });
    }
    let w = tr[0].1;
    let rows = x.shape().lead(1);
    let mut out = Tensor::zeros(x.shape().clone());
    for r in 0..rows {
        for i in 0..w {
            out.data_mut()[r * w + i] = x.data()[r * w + (w - 1 - i)];
        }
    }
    Ok(out)
}

/// Swaps the two channel halves of `[.., 2C, H, W]`: channel `c` trades
/// places with its twin `c ± C`. Self-adjoint.
pub fn swap_channel_halves<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (pre, c2, post) = split_at_axis(x.shape(), Axis::C, "swap_channel_halves")?;
    if c2 % 2 != 0 {
        return Err(Error::BadShape {
            op: "swap_channel_halves",
            shape: x.shape().clone(),
            reason: "channel extent must be even".into(),
        });
    }
    let c = c2 / 2;
    let mut out = Tensor::zeros(x.shape().clone());
    for f in 0..pre {
        for ch in 0..c2 {
            let twin = (ch + c) % c2;
            let src = &x.data()[(f * c2 + twin) * post..(f * c2 + twin + 1) * post];
            out.data_mut()[(f * c2 + ch) * post..(f * c2 + ch + 1) * post].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// `a [R, D] · b [S, D]ᵀ → [R, S]`, keeping the row labels of each input.
pub fn matmul_nt<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (ar, ad) = rank2(a, "matmul_nt")?;
    let (br, bd) = rank2(b, "matmul_nt")?;
    if ad != bd {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape().clone(),
            rhs: b.shape().clone(),
        });
    }
    let mut out = Tensor::zeros(Shape::new(&[
        (a.shape().axes()[0].0, ar),
        (b.shape().axes()[0].0, br),
    ]));
    gemm_nt(ar, ad, br, a.data(), b.data(), out.data_mut());
    Ok(out)
}

/// Gradient of [`matmul_nt`]: `(da, db)`.
pub fn matmul_nt_backward<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    d_out: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (ar, ad) = rank2(a, "matmul_nt_backward")?;
    let (br, _) = rank2(b, "matmul_nt_backward")?;
    let mut da = Tensor::zeros(a.shape().clone());
    let mut db = Tensor::zeros(b.shape().clone());
    gemm_nn(ar, br, ad, d_out.data(), b.data(), da.data_mut());
    gemm_tn(br, ar, ad, d_out.data(), a.data(), db.data_mut());
    Ok((da, db))
}

/// `a [R, S] · b [S, D] → [R, D]`.
pub fn matmul_nn<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (ar, ak) = rank2(a, "matmul_nn")?;
    let (bk, bd) = rank2(b, "matmul_nn")?;
    if ak != bk {
        return Err(Error::ShapeMismatch {
            op: "matmul_nn",
            lhs: a.shape().clone(),
            rhs: b.shape().clone(),
        });
    }
    let mut out = Tensor::zeros(Shape::new(&[
        (a.shape().axes()[0].0, ar),
        (b.shape().axes()[1].0, bd),
    ]));
    gemm_nn(ar, ak, bd, a.data(), b.data(), out.data_mut());
    Ok(out)
}

/// Gradient of [`matmul_nn`]: `(da, db)`.
pub fn matmul_nn_backward<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    d_out: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (ar, ak) = rank2(a, "matmul_nn_backward")?;
    let (_, bd) = rank2(b, "matmul_nn_backward")?;
    let mut da = Tensor::zeros(a.shape().clone());
    let mut db = Tensor::zeros(b.shape().clone());
    gemm_nt(ar, bd, ak, d_out.data(), b.data(), da.data_mut());
    gemm_tn(ak, ar, bd, a.data(), d_out.data(), db.data_mut());
    Ok((da, db))
}

fn rank2<E: Element>(t: &Tensor<E>, op: &'static str) -> Result<(usize, usize)> {
    let axes = t.shape().axes();
    if axes.len() != 2 {
        return Err(Error::BadShape {
            op,
            shape: t.shape().clone(),
            reason: "expected a rank-2 tensor".into(),
        });
    }
    Ok((axes[0].1, axes[1].1))
}
