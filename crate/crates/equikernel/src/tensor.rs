//! Dense tensors with semantically labeled axes.
//!
//! Every tensor axis carries one of seven labels — time `T`, channel `C`,
//! height `H`, width `W`, batch `N`, token `L`, feature `D` — so that
//! operations can state their contracts in terms of what an axis *means*
//! rather than its position, and shape errors name both offending shapes.
//!
//! Data is stored row-major in axis order. `f32` is the working precision;
//! `f64` is used by the gradient checker (see [`crate::element::Element`]).

use crate::element::Element;
use crate::error::{Error, Result};

/// Semantic axis label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    /// Time (frames of a sequence).
    T,
    /// Channels.
    C,
    /// Spatial height.
    H,
    /// Spatial width.
    W,
    /// Batch.
    N,
    /// Token position (flattened spatial grid).
    L,
    /// Feature dimension (vectors, embeddings).
    D,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Axis::T => "T",
            Axis::C => "C",
            Axis::H => "H",
            Axis::W => "W",
            Axis::N => "N",
            Axis::L => "L",
            Axis::D => "D",
        };
        f.write_str(s)
    }
}

/// Ordered list of labeled axis extents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape(Vec<(Axis, usize)>);

impl Shape {
    /// Builds a shape from `(label, extent)` pairs.
    pub fn new(axes: &[(Axis, usize)]) -> Self {
        Shape(axes.to_vec())
    }

    /// Number of axes.
    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// Total element count (product of extents; 1 for rank 0).
    pub fn len(&self) -> usize {
        self.0.iter().map(|&(_, e)| e).product()
    }

    /// True when the element count is zero.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All `(label, extent)` pairs in order.
    pub fn axes(&self) -> &[(Axis, usize)] {
        &self.0
    }

    /// Extents in order, without labels.
    pub fn dims(&self) -> Vec<usize> {
        self.0.iter().map(|&(_, e)| e).collect()
    }

    /// Extent of the first axis labeled `axis`, if present.
    pub fn extent(&self, axis: Axis) -> Option<usize> {
        self.0.iter().find(|&&(a, _)| a == axis).map(|&(_, e)| e)
    }

    /// Position of the first axis labeled `axis`, if present.
    pub fn position(&self, axis: Axis) -> Option<usize> {
        self.0.iter().position(|&(a, _)| a == axis)
    }

    /// Last `k` axes (label and extent), or an error naming the shape.
    pub fn trailing(&self, k: usize, op: &'static str) -> Result<&[(Axis, usize)]> {
        if self.rank() < k {
            return Err(Error::BadShape {
                op,
                shape: self.clone(),
                reason: format!("needs at least {k} axes"),
            });
        }
        Ok(&self.0[self.rank() - k..])
    }

    /// Product of the extents *before* the last `k` axes (1 when rank == k).
    pub fn lead(&self, k: usize) -> usize {
        self.0[..self.rank() - k].iter().map(|&(_, e)| e).product()
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, (a, e)) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{a}={e}")?;
        }
        write!(f, "]")
    }
}

/// Dense row-major tensor over [`Element`] scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    /// Wraps a data vector in a shape; the element count must match.
    pub fn from_vec(shape: Shape, data: Vec<E>) -> Result<Self> {
        if shape.len() != data.len() {
            let reason = format!(
                "shape wants {} elements, data has {}",
                shape.len(),
                data.len()
            );
            return Err(Error::BadShape {
                op: "Tensor::from_vec",
                shape,
                reason,
            });
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor.
    pub fn zeros(shape: Shape) -> Self {
        let n = shape.len();
        Tensor {
            shape,
            data: vec![E::zero(); n],
        }
    }

    /// Constant-filled tensor.
    pub fn full(shape: Shape, value: E) -> Self {
        let n = shape.len();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Tensor built from a function of the flat (row-major) index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> E) -> Self {
        let n = shape.len();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Shape accessor.
    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    /// Flat data slice in row-major axis order.
    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable flat data slice.
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// Consumes the tensor, returning its data vector.
    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Element count.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor holds no elements.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elementwise map into a new tensor with the same shape.
    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += other` (same shape required).
    pub fn add_assign(&mut self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Returns the same data under a new shape with identical element count.
    pub fn reshaped(&self, shape: Shape) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Debug-build guard: panics if a non-finite value appeared (the tensor
    /// invariant that finite inputs never produce NaN/Inf).
    #[inline]
    pub fn debug_check_finite(&self, op: &'static str) {
        debug_assert!(
            self.all_finite(),
            "non-finite value produced by `{op}` with shape {}",
            self.shape
        );
    }

    /// Maximum absolute element (0 for empty tensors).
    pub fn max_abs(&self) -> E {
        self.data
            .iter()
            .fold(E::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    /// Euclidean norm of the flattened data.
    pub fn norm(&self) -> E {
        self.data
            .iter()
            .fold(E::zero(), |s, &x| s + x * x)
            .sqrt()
    }

    /// Converts element precision (used by the f64 gradient oracle).
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| F::from_f64(x.to_f64())).collect(),
        }
    }
}

/// Convenience constructor for shapes: `shape![T=30, C=2, H=64, W=44]`.
#[macro_export]
macro_rules! shape {
    ($($axis:ident = $extent:expr),+ $(,)?) => {
        $crate::tensor::Shape::new(&[$(($crate::tensor::Axis::$axis, $extent)),+])
    };
}
