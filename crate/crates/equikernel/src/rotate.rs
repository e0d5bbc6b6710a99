//! Kernel-space rotation.
//!
//! Instead of rotating feature maps, the rotation branch rotates its
//! convolution kernels: each `k×k` tap grid is resampled on a grid rotated
//! by `−θ` with bilinear interpolation, and samples that fall outside the
//! tap support contribute zero. The map is linear in the kernel and
//! differentiable in the angle, so one scalar angle — itself predicted
//! from the features — can be learned end to end.
//!
//! Conventions: `θ` is in degrees; positive `θ` rotates the tap pattern
//! from the +x axis toward the +y axis (clockwise as displayed with y
//! down). Quarter-turn multiples land every sample on a tap center, so
//! those rotations are exact permutations up to roundoff in `sin`/`cos`.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::ops::conv::ConvSpec;
use crate::params::{ParamId, ParamKind, ParamStore, Pass, NORM_EPS};
use crate::tape::{register, Var};
use crate::tensor::{Axis, Tensor};
use rand_chacha::ChaCha8Rng;

/// Validates `[Co, Ci, k, k]` kernels and returns `(co·ci, k)`.
fn kernel_view<E: Element>(kernels: &Tensor<E>, op: &'static str) -> Result<(usize, usize)> {
    let axes = kernels.shape().axes();
    if axes.len() != 4
        || axes[2].0 != Axis::H
        || axes[3].0 != Axis::W
        || axes[2].1 != axes[3].1
        || axes[2].1 % 2 != 1
    {
        return Err(Error::BadShape {
            op,
            shape: kernels.shape().clone(),
            reason: "expected [C_out, C_in, k, k] with odd square taps".into(),
        });
    }
    Ok((axes[0].1 * axes[1].1, axes[2].1))
}

/// Per-tap resampling plan for one angle.
struct TapPlan {
    /// For each output tap: up to four `(source_tap, weight)` terms.
    terms: Vec<Vec<(usize, f64)>>,
    /// For each output tap: `(∂sx/∂θ_rad, ∂sy/∂θ_rad)` and the in-support
    /// corner data needed for the angle gradient.
    sx_dot: Vec<f64>,
    sy_dot: Vec<f64>,
    sample: Vec<SamplePoint>,
    k: usize,
}

#[derive(Clone, Copy)]
struct SamplePoint {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

fn plan(k: usize, theta_deg: f64) -> TapPlan {
    let theta = theta_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let c = (k as f64 - 1.0) / 2.0;
    let n = k * k;
    let mut terms = Vec::with_capacity(n);
    let mut sx_dot = Vec::with_capacity(n);
    let mut sy_dot = Vec::with_capacity(n);
    let mut sample = Vec::with_capacity(n);
    for i in 0..k {
        for j in 0..k {
            let u = j as f64 - c; // x offset
            let v = i as f64 - c; // y offset
            // Source position after rotating the grid by −θ.
            let sx = c + (cos * u + sin * v);
            let sy = c + (-sin * u + cos * v);
            sx_dot.push(-sin * u + cos * v);
            sy_dot.push(-cos * u - sin * v);
            let x0 = sx.floor() as isize;
            let y0 = sy.floor() as isize;
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            sample.push(SamplePoint { x0, y0, fx, fy });
            let mut tap_terms = Vec::with_capacity(4);
            for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    let (xx, yy) = (x0 + dx, y0 + dy);
                    let w = wy * wx;
                    if w != 0.0 && xx >= 0 && yy >= 0 && (xx as usize) < k && (yy as usize) < k {
                        tap_terms.push((yy as usize * k + xx as usize, w));
                    }
                }
            }
            terms.push(tap_terms);
        }
    }
    TapPlan {
        terms,
        sx_dot,
        sy_dot,
        sample,
        k,
    }
}

/// Resamples every `k×k` kernel of `kernels` on a grid rotated by `−θ`
/// (degrees). Out-of-support samples are zero; the map is the identity at
/// `θ = 0` and a pure tap permutation at quarter turns.
pub fn rotate_kernel<E: Element>(kernels: &Tensor<E>, theta_deg: f64) -> Result<Tensor<E>> {
    let (planes, k) = kernel_view(kernels, "rotate_kernel")?;
    let p = plan(k, theta_deg);
    let n = k * k;
    let mut out = Tensor::zeros(kernels.shape().clone());
    for pl in 0..planes {
        let src = &kernels.data()[pl * n..(pl + 1) * n];
        let dst = &mut out.data_mut()[pl * n..(pl + 1) * n];
        for (t, tap_terms) in p.terms.iter().enumerate() {
            let mut acc = 0.0f64;
            for &(s, w) in tap_terms {
                acc += src[s].to_f64() * w;
            }
            dst[t] = E::from_f64(acc);
        }
    }
    Ok(out)
}

/// Gradients of [`rotate_kernel`]: the kernel adjoint (scatter through the
/// same weights) and the scalar angle derivative `∂⟨d_out, K_θ⟩/∂θ` in
/// **degrees**.
pub fn rotate_kernel_backward<E: Element>(
    kernels: &Tensor<E>,
    theta_deg: f64,
    d_out: &Tensor<E>,
) -> Result<(Tensor<E>, f64)> {
    let (planes, k) = kernel_view(kernels, "rotate_kernel_backward")?;
    let p = plan(k, theta_deg);
    let n = k * k;
    let mut d_k = Tensor::zeros(kernels.shape().clone());
    let mut d_theta_rad = 0.0f64;
    for pl in 0..planes {
        let src = &kernels.data()[pl * n..(pl + 1) * n];
        let d_dst = &d_out.data()[pl * n..(pl + 1) * n];
        let d_src = &mut d_k.data_mut()[pl * n..(pl + 1) * n];
        for t in 0..n {
            let g = d_dst[t].to_f64();
            if g == 0.0 {
                continue;
            }
            for &(s, w) in &p.terms[t] {
                d_src[s] += E::from_f64(g * w);
            }
            // Angle gradient: d(sample)/dsx · dsx/dθ + d(sample)/dsy · dsy/dθ,
            // with the bilinear surface treated as zero outside support.
            let sp = p.sample[t];
            let at = |xx: isize, yy: isize| -> f64 {
                if xx >= 0 && yy >= 0 && (xx as usize) < k && (yy as usize) < k {
                    src[yy as usize * k + xx as usize].to_f64()
                } else {
                    0.0
                }
            };
            let (x0, y0, fx, fy) = (sp.x0, sp.y0, sp.fx, sp.fy);
            let d_dx = (1.0 - fy) * (at(x0 + 1, y0) - at(x0, y0))
                + fy * (at(x0 + 1, y0 + 1) - at(x0, y0 + 1));
            let d_dy = (1.0 - fx) * (at(x0, y0 + 1) - at(x0, y0))
                + fx * (at(x0 + 1, y0 + 1) - at(x0 + 1, y0));
            d_theta_rad += g * (d_dx * p.sx_dot[t] + d_dy * p.sy_dot[t]);
        }
    }
    Ok((d_k, d_theta_rad.to_radians()))
}

/// Tape wrapper: rotates `kernels` by the one-element angle `theta_deg`,
/// differentiable in both.
pub fn rotate_kernel_var<'t, E: Element>(
    kernels: &Var<'t, E>,
    theta_deg: &Var<'t, E>,
) -> Result<Var<'t, E>> {
    if theta_deg.value().len() != 1 {
        return Err(Error::BadShape {
            op: "rotate_kernel_var",
            shape: theta_deg.value().shape().clone(),
            reason: "angle must hold exactly one element".into(),
        });
    }
    let theta = theta_deg.value().data()[0].to_f64();
    let out = rotate_kernel(kernels.value(), theta)?;
    let (nk, nt) = (kernels.node(), theta_deg.node());
    if nk.is_none() && nt.is_none() {
        return Ok(kernels.tape().constant(out));
    }
    let vk = kernels.value_rc();
    let theta_shape = theta_deg.value().shape().clone();
    Ok(register(kernels.tape(), out, move |g, sink| {
        let (dk, dtheta) =
            rotate_kernel_backward(&vk, theta, g).expect("forward validated the shape");
        if let Some(n) = nk {
            sink.accumulate(n, dk);
        }
        if let Some(n) = nt {
            let mut t = Tensor::zeros(theta_shape);
            t.data_mut()[0] = E::from_f64(dtheta);
            sink.accumulate(n, t);
        }
    }))
}

/// Exact quarter-turn rotation by tap permutation — the oracle the
/// bilinear path is checked against at grid angles.
pub fn rotate_kernel_quarter_turns<E: Element>(
    kernels: &Tensor<E>,
    quarter_turns: i32,
) -> Result<Tensor<E>> {
    let (planes, k) = kernel_view(kernels, "rotate_kernel_quarter_turns")?;
    let q = quarter_turns.rem_euclid(4);
    let n = k * k;
    let c = k - 1;
    let mut out = Tensor::zeros(kernels.shape().clone());
    for pl in 0..planes {
        let src = &kernels.data()[pl * n..(pl + 1) * n];
        let dst = &mut out.data_mut()[pl * n..(pl + 1) * n];
        for i in 0..k {
            for j in 0..k {
                // One quarter turn (+90°) reads tap (i, j) from (c−j, i).
                let (si, sj) = match q {
                    0 => (i, j),
                    1 => (c - j, i),
                    2 => (c - i, c - j),
                    _ => (j, c - i),
                };
                dst[i * k + j] = src[si * k + sj];
            }
        }
    }
    Ok(out)
}

/// Width-symmetric fan-in uniform init: `K := (A + flip_w(A)) / 2`. A
/// symmetric kernel commutes with the width mirror, which keeps a freshly
/// initialized rotation branch exactly mirror-equivariant.
pub fn init_symmetric_kernel<E: Element>(
    rng: &mut ChaCha8Rng,
    co: usize,
    ci: usize,
    k: usize,
) -> Tensor<E> {
    let a = crate::reflect::init_kernel::<E>(rng, co, ci, k);
    let flipped = crate::ops::layout::mirror_w(&a).expect("kernel has a W axis");
    let half = E::from_f64(0.5);
    let mut out = a.clone();
    for (o, &f) in out.data_mut().iter_mut().zip(flipped.data()) {
        *o = (*o + f) * half;
    }
    out
}

/// Parameter handles for the adaptive-rotation branch: a small trunk
/// predicts a bounded angle and a confidence from the deepest feature,
/// the branch kernel is rotated by that angle, and the feature is
/// re-convolved at confidence strength.
pub struct RotateIds {
    /// Open bound on the predicted angle, degrees.
    pub theta_limit_deg: f64,
    trunk_w: ParamId,
    trunk_ln_scale: ParamId,
    trunk_ln_shift: ParamId,
    angle_w: ParamId,
    angle_b: ParamId,
    conf_w: ParamId,
    conf_b: ParamId,
    rot_w: ParamId,
}

impl RotateIds {
    /// Registers the branch under `prefix` for `channels`-wide features.
    /// Both prediction heads start at zero (angle 0°, confidence ½) and
    /// the branch kernel starts width-symmetric, so a fresh branch
    /// commutes exactly with the width mirror.
    pub fn add<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
        theta_limit_deg: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let ch = crate::shape![C = channels];
        RotateIds {
            theta_limit_deg,
            trunk_w: store.add(
                format!("{prefix}.trunk.weight"),
                ParamKind::Weight,
                crate::reflect::init_kernel::<E>(rng, channels, channels, 3),
            ),
            trunk_ln_scale: store.add(
                format!("{prefix}.trunk.ln.scale"),
                ParamKind::NormScale,
                Tensor::from_fn(ch.clone(), |_| E::one()),
            ),
            trunk_ln_shift: store.add(
                format!("{prefix}.trunk.ln.shift"),
                ParamKind::NormShift,
                Tensor::zeros(ch),
            ),
            angle_w: store.add(
                format!("{prefix}.angle.weight"),
                ParamKind::Weight,
                Tensor::zeros(crate::shape![D = 1, D = channels]),
            ),
            angle_b: store.add(
                format!("{prefix}.angle.bias"),
                ParamKind::Bias,
                Tensor::zeros(crate::shape![D = 1]),
            ),
            conf_w: store.add(
                format!("{prefix}.confidence.weight"),
                ParamKind::Weight,
                Tensor::zeros(crate::shape![D = 1, D = channels]),
            ),
            conf_b: store.add(
                format!("{prefix}.confidence.bias"),
                ParamKind::Bias,
                Tensor::zeros(crate::shape![D = 1]),
            ),
            rot_w: store.add(
                format!("{prefix}.kernel"),
                ParamKind::Weight,
                init_symmetric_kernel::<E>(rng, channels, channels, 3),
            ),
        }
    }
}

/// Rotation-branch outputs: the re-convolved feature plus the predicted
/// angle (degrees) and confidence, kept as one-element variables.
pub struct RotateOut<'t, E: Element> {
    pub rotated: Var<'t, E>,
    pub theta_deg: Var<'t, E>,
    pub confidence: Var<'t, E>,
}

/// Runs the branch on a `[C, H, W]` feature map: predict `(θ, λ)`, rotate
/// the branch kernel by `θ`, output `λ · conv(x, K_θ)` at the same shape.
pub fn rotate_branch_forward<'t, E: Element>(
    pass: &mut Pass<'t, '_, E>,
    ids: &RotateIds,
    x: &Var<'t, E>,
) -> Result<RotateOut<'t, E>> {
    let trunk = x
        .conv2d(pass.var(ids.trunk_w), None, ConvSpec::k3())?
        .layer_norm(
            pass.var(ids.trunk_ln_scale),
            pass.var(ids.trunk_ln_shift),
            NORM_EPS,
        )?
        .relu()
        .global_avg()?;
    let theta_deg = trunk
        .linear(pass.var(ids.angle_w), Some(pass.var(ids.angle_b)))?
        .softsign()
        .scale_const(ids.theta_limit_deg);
    let confidence = trunk
        .linear(pass.var(ids.conf_w), Some(pass.var(ids.conf_b)))?
        .sigmoid();
    let k_theta = rotate_kernel_var(pass.var(ids.rot_w), &theta_deg)?;
    let rotated = x.conv2d(&k_theta, None, ConvSpec::k3())?.scale_by(&confidence)?;
    Ok(RotateOut {
        rotated,
        theta_deg,
        confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;
    use crate::rng::{stream, uniform_symmetric, Purpose};
    use crate::shape;
    use crate::tape::{check_fn, grad_check, Tape};

    fn sample_kernels(seed: u64, co: usize, ci: usize, k: usize) -> Tensor<f64> {
        let mut rng = stream(seed, Purpose::Harness, 0);
        Tensor::from_fn(shape![C = co, C = ci, H = k, W = k], |_| {
            uniform_symmetric(&mut rng, 1.0)
        })
    }

    #[test]
    fn zero_angle_is_the_exact_identity() {
        let k = sample_kernels(1, 2, 3, 3);
        let r = rotate_kernel(&k, 0.0).unwrap();
        assert_eq!(r.data(), k.data());
    }

    #[test]
    fn quarter_turns_match_the_permutation_oracle() {
        let k = sample_kernels(2, 3, 2, 5);
        for (deg, q) in [(90.0, 1), (180.0, 2), (270.0, 3), (-90.0, 3)] {
            let bilinear = rotate_kernel(&k, deg).unwrap();
            let exact = rotate_kernel_quarter_turns(&k, q).unwrap();
            for (b, e) in bilinear.data().iter().zip(exact.data()) {
                assert!((b - e).abs() < 1e-12, "θ={deg}: {b} vs {e}");
            }
        }
    }

    #[test]
    fn quarter_turn_oracle_hand_case() {
        let k = Tensor::from_vec(shape![C = 1, C = 1, H = 3, W = 3], (1..=9).map(f64::from).collect())
            .unwrap();
        // +90° maps pattern position (x, y) to (−y, x): the top row [1,2,3]
        // becomes the right column reading down.
        let r = rotate_kernel_quarter_turns(&k, 1).unwrap();
        assert_eq!(r.data(), &[7.0, 4.0, 1.0, 8.0, 5.0, 2.0, 9.0, 6.0, 3.0]);
    }

    #[test]
    fn center_tap_survives_any_angle() {
        let mut k = Tensor::<f64>::zeros(shape![C = 1, C = 1, H = 3, W = 3]);
        k.data_mut()[4] = 2.5;
        for deg in [13.0, 47.0, -71.0, 160.0] {
            let r = rotate_kernel(&k, deg).unwrap();
            assert!((r.data()[4] - 2.5).abs() < 1e-12, "θ={deg}");
        }
    }

    #[test]
    fn linear_tap_field_rotates_exactly_inside_the_support() {
        // Bilinear interpolation reproduces a linear field K(u, v) = a·u + b·v
        // exactly, so every in-support tap of the rotated kernel must equal
        // the field evaluated at the rotated coordinates.
        let (a, b) = (0.7, -1.3);
        let k = Tensor::from_fn(shape![C = 1, C = 1, H = 5, W = 5], |idx| {
            let (i, j) = (idx / 5, idx % 5);
            a * (j as f64 - 2.0) + b * (i as f64 - 2.0)
        });
        for deg in [20.0f64, -33.0, 75.0] {
            let r = rotate_kernel(&k, deg).unwrap();
            let (sin, cos) = deg.to_radians().sin_cos();
            let mut checked = 0;
            for i in 0..5 {
                for j in 0..5 {
                    let (u, v) = (j as f64 - 2.0, i as f64 - 2.0);
                    let (sx, sy) = (cos * u + sin * v, -sin * u + cos * v);
                    if sx.abs() <= 2.0 && sy.abs() <= 2.0 {
                        let want = a * sx + b * sy;
                        let got = r.data()[i * 5 + j];
                        assert!((got - want).abs() < 1e-12, "θ={deg} tap ({i},{j})");
                        checked += 1;
                    }
                }
            }
            assert!(checked >= 13, "θ={deg}: only {checked} taps in support");
        }
    }

    #[test]
    fn gradients_match_finite_differences_in_kernel_and_angle() {
        let k = sample_kernels(3, 2, 2, 3);
        let theta = Tensor::from_vec(shape![D = 1], vec![23.7f64]).unwrap();
        let report = grad_check(
            check_fn(|tape, vars| {
                let r = rotate_kernel_var(&vars[0], &vars[1])?;
                // Weighted sum so every tap contributes distinctly.
                let w = tape.constant(Tensor::from_fn(r.value().shape().clone(), |i| {
                    0.1 + (i as f64) * 0.03
                }));
                Ok(r.mul(&w)?.sum_all())
            }),
            &[k, theta],
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "worst {:?}", report.worst);
    }

    #[test]
    fn symmetric_init_commutes_with_width_mirror() {
        let mut rng = stream(9, Purpose::Init, 0);
        let k = init_symmetric_kernel::<f64>(&mut rng, 4, 3, 3);
        let flipped = crate::ops::layout::mirror_w(&k).unwrap();
        assert_eq!(k.data(), flipped.data());
        // Not degenerate: rows are genuinely random.
        assert!(k.max_abs() > 1e-3);
    }

    fn branch_fixture(seed: u64) -> (ParamStore<f64>, RotateIds) {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, Purpose::Init, 0);
        let ids = RotateIds::add(&mut store, "roel", 3, 40.0, &mut rng);
        (store, ids)
    }

    fn random_map(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = stream(seed, Purpose::Harness, 1);
        Tensor::from_fn(shape![C = c, H = h, W = w], |_| {
            uniform_symmetric(&mut rng, 1.0)
        })
    }

    #[test]
    fn zero_heads_predict_zero_angle_and_half_confidence() {
        let (store, ids) = branch_fixture(5);
        let tape = Tape::new();
        let mut pass = Pass::new(&tape, &store, Mode::Eval);
        let x = pass.input(random_map(1, 3, 5, 4));
        let out = rotate_branch_forward(&mut pass, &ids, &x).unwrap();
        assert_eq!(out.theta_deg.value().data()[0], 0.0);
        assert_eq!(out.confidence.value().data()[0], 0.5);
        // At θ=0 the branch is exactly half a plain convolution.
        let plain = x
            .conv2d(pass.var(ids.rot_w), None, ConvSpec::k3())
            .unwrap();
        for (r, p) in out.rotated.value().data().iter().zip(plain.value().data()) {
            assert!((r - 0.5 * p).abs() < 1e-15);
        }
    }

    #[test]
    fn predictions_respect_open_bounds_for_any_head_weights() {
        let (mut store, ids) = branch_fixture(6);
        let mut rng = stream(99, Purpose::Harness, 2);
        for trial in 0..20 {
            // Random head draws well beyond fan-in scale (but short of f64
            // sigmoid saturation, which needs |pre-activation| > 36).
            for id in [ids.angle_w, ids.conf_w, ids.angle_b, ids.conf_b] {
                for v in store.get_mut(id).data_mut() {
                    *v = uniform_symmetric(&mut rng, 2.0);
                }
            }
            let tape = Tape::new();
            let mut pass = Pass::new(&tape, &store, Mode::Eval);
            let x = pass.input(random_map(trial, 3, 5, 4));
            let out = rotate_branch_forward(&mut pass, &ids, &x).unwrap();
            let theta = out.theta_deg.value().data()[0];
            let lambda = out.confidence.value().data()[0];
            assert!(theta.abs() < 40.0, "trial {trial}: θ={theta}");
            assert!(lambda > 0.0 && lambda < 1.0, "trial {trial}: λ={lambda}");
        }
    }

    #[test]
    fn fresh_branch_commutes_with_the_width_mirror() {
        let (store, ids) = branch_fixture(7);
        let tape = Tape::new();
        let mut pass = Pass::new(&tape, &store, Mode::Eval);
        let x = random_map(3, 3, 6, 5);
        let mirrored = crate::ops::layout::mirror_w(&x).unwrap();
        let xv = pass.input(x);
        let mv = pass.input(mirrored);
        let out = rotate_branch_forward(&mut pass, &ids, &xv).unwrap();
        let out_m = rotate_branch_forward(&mut pass, &ids, &mv).unwrap();
        let mirror_of_out = crate::ops::layout::mirror_w(out.rotated.value()).unwrap();
        for (a, b) in out_m.rotated.value().data().iter().zip(mirror_of_out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn branch_gradients_reach_the_heads_and_trunk() {
        // Give the heads non-zero weights so θ moves, then check the
        // angle head's gradient against finite differences end to end.
        let (mut store, ids) = branch_fixture(8);
        let mut rng = stream(4, Purpose::Harness, 3);
        for id in [ids.angle_w, ids.conf_w] {
            for v in store.get_mut(id).data_mut() {
                *v = uniform_symmetric(&mut rng, 0.8);
            }
        }
        let x = random_map(9, 3, 5, 4);

        let run = |s: &ParamStore<f64>| -> (f64, Option<(Tensor<f64>, Tensor<f64>)>) {
            let tape = Tape::new();
            let mut pass = Pass::new(&tape, s, Mode::Train);
            let xv = pass.input(x.clone());
            let out = rotate_branch_forward(&mut pass, &ids, &xv).unwrap();
            let root = out.rotated.sum_all();
            let loss = root.value().data()[0];
            let grads = tape.backward_scalar(&root).unwrap();
            let ga = grads.get(pass.var(ids.angle_w)).cloned();
            let gt = grads.get(pass.var(ids.trunk_w)).cloned();
            (loss, ga.zip(gt))
        };
        let (_, grads) = run(&store);
        let (d_angle, d_trunk) = grads.expect("both gradients present");
        assert!(d_trunk.max_abs() > 0.0, "trunk must receive gradient via θ/λ");

        let step = 1e-5;
        for e in 0..d_angle.len() {
            let mut s_plus = ParamStore::new();
            let mut rng_i = stream(8, Purpose::Init, 0);
            let ids_p = RotateIds::add(&mut s_plus, "roel", 3, 40.0, &mut rng_i);
            let all: Vec<_> = s_plus.ids().collect();
            for pid in all {
                *s_plus.get_mut(pid) = store.get(pid).clone();
            }
            s_plus.get_mut(ids_p.angle_w).data_mut()[e] += step;
            let (lp, _) = run(&s_plus);
            s_plus.get_mut(ids_p.angle_w).data_mut()[e] -= 2.0 * step;
            let (lm, _) = run(&s_plus);
            let num = (lp - lm) / (2.0 * step);
            let ana = d_angle.data()[e];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-6, "element {e}: analytic {ana} vs numeric {num}");
        }
    }
}
