//! Pooling reductions: temporal max, global average, horizontal strips,
//! and the channel-pair max that collapses a mirrored feature pair into a
//! mirror-invariant map.
//!
//! Max-style backwards route the full gradient to the first element that
//! attains the maximum (deterministic tie-break); average-style backwards
//! spread it uniformly.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::{Axis, Shape, Tensor};

/// Reduces the leading `T` axis with an elementwise max: `[T, ..] → [..]`.
pub fn temporal_max<E: Element>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let axes = input.shape().axes();
    if axes.is_empty() || axes[0].0 != Axis::T {
        return Err(Error::BadShape {
            op: "temporal_max",
            shape: input.shape().clone(),
            reason: "expected a leading T axis".into(),
        });
    }
    let t = axes[0].1;
    if t == 0 {
        return Err(Error::BadShape {
            op: "temporal_max",
            shape: input.shape().clone(),
            reason: "cannot max over an empty time axis".into(),
        });
    }
    let inner = input.len() / t;
    let mut out = Tensor::from_vec(
        Shape::new(&axes[1..]),
        input.data()[..inner].to_vec(),
    )?;
    for f in 1..t {
        let frame = &input.data()[f * inner..(f + 1) * inner];
        for (o, &v) in out.data_mut().iter_mut().zip(frame) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(out)
}

/// Gradient of [`temporal_max`]: routes each position's gradient to the
/// earliest frame attaining the max.
pub fn temporal_max_backward<E: Element>(input: &Tensor<E>, d_out: &Tensor<E>) -> Result<Tensor<E>> {
    let t = input.shape().extent(Axis::T).ok_or(Error::BadShape {
        op: "temporal_max_backward",
        shape: input.shape().clone(),
        reason: "expected a leading T axis".into(),
    })?;
    let inner = input.len() / t;
    let mut d_in = Tensor::zeros(input.shape().clone());
    for i in 0..inner {
        let mut best = 0usize;
        let mut val = input.data()[i];
        for f in 1..t {
            let v = input.data()[f * inner + i];
            if v > val {
                val = v;
                best = f;
            }
        }
        d_in.data_mut()[best * inner + i] = d_out.data()[i];
    }
    Ok(d_in)
}

/// Averages the trailing `[H, W]` grid away: `[.., C, H, W] → [.., C]`.
pub fn global_avg<E: Element>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let tr = input.shape().trailing(2, "global_avg")?;
    if tr[0].0 != Axis::H || tr[1].0 != Axis::W {
        return Err(Error::BadShape {
            op: "global_avg",
            shape: input.shape().clone(),
            reason: "expected trailing axes [H, W]".into(),
        });
    }
    let hw = tr[0].1 * tr[1].1;
    let lead = input.shape().lead(2);
    let inv = E::from_f64(1.0 / hw as f64);
    let mut out = Tensor::zeros(Shape::new(&input.shape().axes()[..input.shape().rank() - 2]));
    for f in 0..lead {
        let mut acc = E::zero();
        for &v in &input.data()[f * hw..(f + 1) * hw] {
            acc += v;
        }
        out.data_mut()[f] = acc * inv;
    }
    Ok(out)
}

/// Gradient of [`global_avg`]: broadcasts `d_out / (H·W)` over the grid.
pub fn global_avg_backward<E: Element>(input_shape: &Shape, d_out: &Tensor<E>) -> Result<Tensor<E>> {
    let rank = input_shape.rank();
    let hw = input_shape.axes()[rank - 2].1 * input_shape.axes()[rank - 1].1;
    let inv = E::from_f64(1.0 / hw as f64);
    let mut d_in = Tensor::zeros(input_shape.clone());
    let lead = input_shape.lead(2);
    for f in 0..lead {
        let g = d_out.data()[f] * inv;
        for v in &mut d_in.data_mut()[f * hw..(f + 1) * hw] {
            *v = g;
        }
    }
    Ok(d_in)
}

/// Row ranges for `parts` horizontal strips over `h` rows: every strip gets
/// `h / parts` rows and the remainder is appended to the last strip.
pub fn strip_ranges(h: usize, parts: usize) -> Result<Vec<(usize, usize)>> {
    if parts == 0 || parts > h {
        return Err(Error::Config(format!(
            "cannot split {h} rows into {parts} horizontal strips"
        )));
    }
    let base = h / parts;
    let mut ranges: Vec<(usize, usize)> = (0..parts).map(|p| (p * base, (p + 1) * base)).collect();
    ranges.last_mut().expect("parts ≥ 1").1 = h;
    Ok(ranges)
}

/// Horizontal strip pooling: `[C, H, W] → [L=parts, D=C]` where each part
/// vector is the per-channel strip max **plus** the strip mean. A constant
/// map of value `c` therefore yields `2c` in every slot. `max_only` drops
/// the mean term.
pub fn strip_pool<E: Element>(input: &Tensor<E>, parts: usize, max_only: bool) -> Result<Tensor<E>> {
    let tr = input.shape().trailing(3, "strip_pool")?;
    if tr[0].0 != Axis::C || tr[1].0 != Axis::H || tr[2].0 != Axis::W || input.shape().rank() != 3 {
        return Err(Error::BadShape {
            op: "strip_pool",
            shape: input.shape().clone(),
            reason: "expected exactly [C, H, W]".into(),
        });
    }
    let (c, h, w) = (tr[0].1, tr[1].1, tr[2].1);
    let ranges = strip_ranges(h, parts)?;
    let mut out = Tensor::zeros(Shape::new(&[(Axis::L, parts), (Axis::D, c)]));
    for (p, &(y0, y1)) in ranges.iter().enumerate() {
        let area = E::from_f64(((y1 - y0) * w) as f64);
        for ch in 0..c {
            let mut mx = input.data()[ch * h * w + y0 * w];
            let mut sum = E::zero();
            for y in y0..y1 {
                for x in 0..w {
                    let v = input.data()[ch * h * w + y * w + x];
                    if v > mx {
                        mx = v;
                    }
                    sum += v;
                }
            }
            out.data_mut()[p * c + ch] = if max_only { mx } else { mx + sum / area };
        }
    }
    Ok(out)
}

/// Gradient of [`strip_pool`].
pub fn strip_pool_backward<E: Element>(
    input: &Tensor<E>,
    parts: usize,
    max_only: bool,
    d_out: &Tensor<E>,
) -> Result<Tensor<E>> {
    let axes = input.shape().axes();
    let (c, h, w) = (axes[0].1, axes[1].1, axes[2].1);
    let ranges = strip_ranges(h, parts)?;
    let mut d_in = Tensor::zeros(input.shape().clone());
    for (p, &(y0, y1)) in ranges.iter().enumerate() {
        let inv_area = E::from_f64(1.0 / ((y1 - y0) * w) as f64);
        for ch in 0..c {
            let g = d_out.data()[p * c + ch];
            let mut mx = input.data()[ch * h * w + y0 * w];
            let mut arg = (y0, 0usize);
            for y in y0..y1 {
                for x in 0..w {
                    let v = input.data()[ch * h * w + y * w + x];
                    if v > mx {
                        mx = v;
                        arg = (y, x);
                    }
                    if !max_only {
                        d_in.data_mut()[ch * h * w + y * w + x] += g * inv_area;
                    }
                }
            }
            d_in.data_mut()[ch * h * w + arg.0 * w + arg.1] += g;
        }
    }
    Ok(d_in)
}

/// Collapses a doubled channel block by pairwise max:
/// `[.., 2C, H, W] → [.., C, H, W]` with `out[c] = max(x[c], x[c+C])`.
/// The pair `(c, c+C)` holds a feature and its mirrored twin, so the max is
/// unchanged when the two are swapped. `mean` averages instead.
pub fn group_pool<E: Element>(input: &Tensor<E>, mean: bool) -> Result<Tensor<E>> {
    let tr = input.shape().trailing(3, "group_pool")?;
    if tr[0].0 != Axis::C || tr[1].0 != Axis::H || tr[2].0 != Axis::W {
        return Err(Error::BadShape {
            op: "group_pool",
            shape: input.shape().clone(),
            reason: "expected trailing axes [C, H, W]".into(),
        });
    }
    let (c2, h, w) = (tr[0].1, tr[1].1, tr[2].1);
    if c2 % 2 != 0 {
        return Err(Error::BadShape {
            op: "group_pool",
            shape: input.shape().clone(),
            reason: "channel extent must be even (feature + mirrored twin)".into(),
        });
    }
    let c = c2 / 2;
    let lead = input.shape().lead(3);
    let mut axes = input.shape().axes().to_vec();
    let cpos = axes.len() - 3;
    axes[cpos].1 = c;
    let mut out = Tensor::zeros(Shape::new(&axes));
    let half = E::from_f64(0.5);
    for f in 0..lead {
        let src = &input.data()[f * c2 * h * w..(f + 1) * c2 * h * w];
        let dst = &mut out.data_mut()[f * c * h * w..(f + 1) * c * h * w];
        for ch in 0..c {
            let a = &src[ch * h * w..(ch + 1) * h * w];
            let b = &src[(ch + c) * h * w..(ch + c + 1) * h * w];
            let d = &mut dst[ch * h * w..(ch + 1) * h * w];
            if mean {
                for i in 0..h * w {
                    d[i] = (a[i] + b[i]) * half;
                }
            } else {
                for i in 0..h * w {
                    d[i] = if b[i] > a[i] { b[i] } else { a[i] };
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`group_pool`]. Max mode routes to the winning twin (ties go
/// to the first half); mean mode splits evenly.
pub fn group_pool_backward<E: Element>(
    input: &Tensor<E>,
    mean: bool,
    d_out: &Tensor<E>,
) -> Result<Tensor<E>> {
    let tr = input.shape().trailing(3, "group_pool_backward")?;
    let (c2, h, w) = (tr[0].1, tr[1].1, tr[2].1);
    let c = c2 / 2;
    let lead = input.shape().lead(3);
    let mut d_in = Tensor::zeros(input.shape().clone());
    let half = E::from_f64(0.5);
    for f in 0..lead {
        let src = &input.data()[f * c2 * h * w..(f + 1) * c2 * h * w];
        let gout = &d_out.data()[f * c * h * w..(f + 1) * c * h * w];
        let gin = &mut d_in.data_mut()[f * c2 * h * w..(f + 1) * c2 * h * w];
        for ch in 0..c {
            for i in 0..h * w {
                let g = gout[ch * h * w + i];
                if mean {
                    gin[ch * h * w + i] = g * half;
                    gin[(ch + c) * h * w + i] = g * half;
                } else if src[(ch + c) * h * w + i] > src[ch * h * w + i] {
                    gin[(ch + c) * h * w + i] = g;
                } else {
                    gin[ch * h * w + i] = g;
                }
            }
        }
    }
    Ok(d_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape;

    #[test]
    fn temporal_max_picks_per_position_maxima() {
        let x = Tensor::from_vec(
            shape![T = 3, C = 1, H = 1, W = 2],
            vec![1.0f32, -2.0, 0.5, 7.0, 0.9, 7.0],
        )
        .unwrap();
        let y = temporal_max(&x).unwrap();
        assert_eq!(y.shape().dims(), &[1, 1, 2]);
        assert_eq!(y.data(), &[1.0, 7.0]);
        // Gradient goes to frame 0 for position 0 and frame 1 (first max) for position 1.
        let g = temporal_max_backward(&x, &Tensor::full(y.shape().clone(), 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn global_avg_hand_oracle() {
        let x = Tensor::from_vec(shape![C = 1, H = 2, W = 2], vec![1.0f32, 3.0, 5.0, 7.0]).unwrap();
        let y = global_avg(&x).unwrap();
        assert_eq!(y.shape().dims(), &[1]);
        assert_eq!(y.data(), &[4.0]);
        let g = global_avg_backward(x.shape(), &Tensor::full(y.shape().clone(), 2.0)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn strip_ranges_send_remainder_rows_to_the_last_strip() {
        assert_eq!(strip_ranges(16, 16).unwrap()[15], (15, 16));
        let r = strip_ranges(11, 4).unwrap();
        assert_eq!(r, vec![(0, 2), (2, 4), (4, 6), (6, 11)]);
        assert!(strip_ranges(3, 5).is_err());
    }

    #[test]
    fn strip_pool_constant_map_gives_twice_the_value() {
        let x = Tensor::full(shape![C = 3, H = 8, W = 4], 0.75f32);
        let y = strip_pool(&x, 4, false).unwrap();
        assert_eq!(y.shape().dims(), &[4, 3]);
        assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-6));
        let ym = strip_pool(&x, 4, true).unwrap();
        assert!(ym.data().iter().all(|&v| (v - 0.75).abs() < 1e-6));
    }

    #[test]
    fn strip_pool_backward_matches_finite_differences() {
        let x = Tensor::from_fn(shape![C = 2, H = 5, W = 3], |i| ((i * 17 + 3) % 23) as f64 * 0.1);
        let seed = Tensor::from_fn(shape![L = 2, D = 2], |i| 0.3 + i as f64);
        let g = strip_pool_backward(&x, 2, false, &seed).unwrap();
        let h = 1e-6;
        for i in (0..x.len()).step_by(4) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let f = |t: &Tensor<f64>| -> f64 {
                strip_pool(t, 2, false)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(seed.data())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((num - g.data()[i]).abs() < 1e-6, "slot {i}: {num} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn group_pool_is_swap_invariant() {
        let x = Tensor::from_fn(shape![T = 2, C = 6, H = 3, W = 3], |i| ((i * 31) % 17) as f32 - 8.0);
        let c = 3;
        let hw = 9;
        // Swap each (c, c+C) channel pair within every frame.
        let swapped = Tensor::from_fn(x.shape().clone(), |i| {
            let f = i / (6 * hw);
            let rest = i % (6 * hw);
            let ch = rest / hw;
            let pos = rest % hw;
            let twin = if ch < c { ch + c } else { ch - c };
            x.data()[f * 6 * hw + twin * hw + pos]
        });
        let a = group_pool(&x, false).unwrap();
        let b = group_pool(&swapped, false).unwrap();
        assert_eq!(a.shape().dims(), &[2, 3, 3, 3]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn group_pool_mean_mode_averages_the_pair() {
        let x = Tensor::from_vec(shape![C = 2, H = 1, W = 2], vec![1.0f32, 5.0, 3.0, -5.0]).unwrap();
        let y = group_pool(&x, true).unwrap();
        assert_eq!(y.data(), &[2.0, 0.0]);
        let g = group_pool_backward(&x, true, &Tensor::full(y.shape().clone(), 1.0)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.5));
    }
}
