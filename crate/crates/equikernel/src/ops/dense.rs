//! Dense algebra: affine maps over the trailing axis, row softmax,
//! pointwise nonlinearities, and the elementwise glue every block needs.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Axis, Shape, Tensor};

/// `y = x · Wᵀ (+ b)` over the trailing axis: `[.., Din] → [.., D=Dout]`
/// with `w: [Dout, Din]` stored row-major and `b: [Dout]`.
pub fn linear<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let din = x.shape().trailing(1, "linear")?[0].1;
    let (dout, win) = weight_dims(w)?;
    if win != din {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: x.shape().clone(),
            rhs: w.shape().clone(),
        });
    }
    if let Some(bias) = b {
        if bias.len() != dout {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: w.shape().clone(),
                rhs: bias.shape().clone(),
            });
        }
    }
    let rows = x.shape().lead(1);
    let mut axes = x.shape().axes()[..x.shape().rank() - 1].to_vec();
    axes.push((Axis::D, dout));
    let mut y = Tensor::zeros(Shape::new(&axes));
    gemm_nt(rows, din, dout, x.data(), w.data(), y.data_mut());
    if let Some(bias) = b {
        for r in 0..rows {
            for (o, &bb) in y.data_mut()[r * dout..(r + 1) * dout].iter_mut().zip(bias.data()) {
                *o += bb;
            }
        }
    }
    y.debug_check_finite("linear");
    Ok(y)
}

/// Gradient of [`linear`]: `(dx, dw, db)`; `db` is `None` for bias-free maps.
pub fn linear_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    has_bias: bool,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Option<Tensor<E>>)> {
    let din = x.shape().trailing(1, "linear_backward")?[0].1;
    let (dout, _) = weight_dims(w)?;
    let rows = x.shape().lead(1);
    let mut dx = Tensor::zeros(x.shape().clone());
    let mut dw = Tensor::zeros(w.shape().clone());
    // dX [rows, Din] = dY [rows, Dout] · W [Dout, Din]
    gemm_nn(rows, dout, din, dy.data(), w.data(), dx.data_mut());
    // dW [Dout, Din] = dYᵀ · X, with dY stored [rows, Dout].
    gemm_tn(dout, rows, din, dy.data(), x.data(), dw.data_mut());
    let db = if has_bias {
        let mut acc = Tensor::zeros(Shape::new(&[(Axis::D, dout)]));
        for r in 0..rows {
            for (a, &g) in acc.data_mut().iter_mut().zip(&dy.data()[r * dout..(r + 1) * dout]) {
                *a += g;
            }
        }
        Some(acc)
    } else {
        None
    };
    Ok((dx, dw, db))
}

fn weight_dims<E: Element>(w: &Tensor<E>) -> Result<(usize, usize)> {
    let axes = w.shape().axes();
    if axes.len() != 2 {
        return Err(Error::BadShape {
            op: "linear",
            shape: w.shape().clone(),
            reason: "weight must be rank-2 [Dout, Din]".into(),
        });
    }
    Ok((axes[0].1, axes[1].1))
}

/// Row-wise softmax over the trailing axis, max-subtracted for stability.
pub fn softmax_last<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let n = x.shape().trailing(1, "softmax_last")?[0].1;
    let rows = x.shape().lead(1);
    let mut y = Tensor::zeros(x.shape().clone());
    for r in 0..rows {
        let src = &x.data()[r * n..(r + 1) * n];
        let dst = &mut y.data_mut()[r * n..(r + 1) * n];
        let mut mx = src[0];
        for &v in src {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = E::zero();
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - mx).exp();
            sum += *o;
        }
        for o in dst.iter_mut() {
            *o /= sum;
        }
    }
    y.debug_check_finite("softmax_last");
    Ok(y)
}

/// Gradient of [`softmax_last`] given its output `y`:
/// `dx = y ⊙ (dy − ⟨dy, y⟩)` per row.
pub fn softmax_last_backward<E: Element>(y: &Tensor<E>, dy: &Tensor<E>) -> Result<Tensor<E>> {
    let n = y.shape().trailing(1, "softmax_last_backward")?[0].1;
    let rows = y.shape().lead(1);
    let mut dx = Tensor::zeros(y.shape().clone());
    for r in 0..rows {
        let yv = &y.data()[r * n..(r + 1) * n];
        let gv = &dy.data()[r * n..(r + 1) * n];
        let mut dot = E::zero();
        for i in 0..n {
            dot += yv[i] * gv[i];
        }
        for i in 0..n {
            dx.data_mut()[r * n + i] = yv[i] * (gv[i] - dot);
        }
    }
    Ok(dx)
}

/// Pointwise nonlinearities with closed-form derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    /// `1 / (1 + e^{−x})`, computed branch-stably.
    Sigmoid,
    /// `x / (1 + |x|)` — a bounded, saturating squash.
    Softsign,
}

impl Pointwise {
    pub fn apply<E: Element>(self, x: E) -> E {
        match self {
            Pointwise::Relu => {
                if x > E::zero() {
                    x
                } else {
                    E::zero()
                }
            }
            Pointwise::Sigmoid => {
                if x >= E::zero() {
                    E::one() / (E::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (E::one() + e)
                }
            }
            Pointwise::Softsign => x / (E::one() + x.abs()),
        }
    }

    /// Derivative at input `x`.
    pub fn derivative<E: Element>(self, x: E) -> E {
        match self {
            Pointwise::Relu => {
                if x > E::zero() {
                    E::one()
                } else {
                    E::zero()
                }
            }
            Pointwise::Sigmoid => {
                let s = self.apply(x);
                s * (E::one() - s)
            }
            Pointwise::Softsign => {
                let d = E::one() + x.abs();
                E::one() / (d * d)
            }
        }
    }
}

/// Applies `f` elementwise.
pub fn pointwise<E: Element>(x: &Tensor<E>, f: Pointwise) -> Tensor<E> {
    x.map(|v| f.apply(v))
}

/// Gradient of [`pointwise`]: `dy ⊙ f′(x)`.
pub fn pointwise_backward<E: Element>(x: &Tensor<E>, f: Pointwise, dy: &Tensor<E>) -> Tensor<E> {
    let mut dx = Tensor::zeros(x.shape().clone());
    for ((o, &xv), &g) in dx.data_mut().iter_mut().zip(x.data()).zip(dy.data()) {
        *o = f.derivative(xv) * g;
    }
    dx
}

/// Elementwise sum of two same-shape tensors.
pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    a.zip_map(b, "add", |x, y| x + y)
}

/// Elementwise (Hadamard) product of two same-shape tensors.
pub fn mul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    a.zip_map(b, "mul", |x, y| x * y)
}

/// Multiplies every element by a compile-time-known constant.
pub fn scale_const<E: Element>(x: &Tensor<E>, c: f64) -> Tensor<E> {
    let c = E::from_f64(c);
    x.map(|v| v * c)
}

/// Multiplies every element by a learned scalar held in a one-element
/// tensor. Gradient of the scalar is `⟨dy, x⟩`.
pub fn scale_by<E: Element>(x: &Tensor<E>, s: &Tensor<E>) -> Result<Tensor<E>> {
    if s.len() != 1 {
        return Err(Error::BadShape {
            op: "scale_by",
            shape: s.shape().clone(),
            reason: "scale factor must hold exactly one element".into(),
        });
    }
    let c = s.data()[0];
    Ok(x.map(|v| v * c))
}

/// Gradient of [`scale_by`]: `(dx, ds)`.
pub fn scale_by_backward<E: Element>(
    x: &Tensor<E>,
    s: &Tensor<E>,
    dy: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let c = s.data()[0];
    let dx = dy.map(|v| v * c);
    let mut dot = E::zero();
    for (&a, &b) in x.data().iter().zip(dy.data()) {
        dot += a * b;
    }
    let mut ds = Tensor::zeros(s.shape().clone());
    ds.data_mut()[0] = dot;
    (dx, ds)
}
