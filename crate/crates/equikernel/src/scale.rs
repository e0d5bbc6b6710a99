//! Multi-scale fusion with cross-scale attention and gated residuals.
//!
//! The scale branch taps the (group-pooled, temporally pooled) feature of
//! every stage, brings them to the coarsest resolution, and lets three
//! receptive-field branches exchange information through single-head
//! attention before re-injecting a gated correction into each tap:
//!
//! 1. resize all taps to `H/4×W/4` and concatenate channels (`C` total);
//! 2. reduce channels `C → C/r` with a 1×1 conv + BN + ReLU;
//! 3. three views: identity, 3×3 conv, 5×5 conv (or dilated 3×3s);
//! 4. tokens from the three views feed q/k/v of scaled dot-product
//!    attention (scale `1/√(C/r)`), then a position-wise 4× FFN;
//! 5. expand back `C/r → C` (zero-initialized 1×1 conv + BN + ReLU),
//!    split per stage, and add `sigmoid(gate) ⊙ split` onto each tap.
//!
//! Because the expansion conv starts at zero, the whole block is exactly
//! the identity on its taps at initialization — training can only grow
//! away from a stable start.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::ops::conv::ConvSpec;
use crate::params::{BnIds, ParamId, ParamKind, ParamStore, Pass};
use crate::reflect::init_kernel;
use crate::tape::{concat_vars, Var};
use crate::tensor::{Axis, Tensor};
use rand_chacha::ChaCha8Rng;

/// Receptive-field plan for the second and third attention views.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchMode {
    /// Plain 3×3 and 5×5 kernels.
    Plain,
    /// 3×3 kernels at dilation 1 and 2 (same receptive fields, fewer taps).
    Dilated,
}

/// Parameter handles for one multi-scale fusion block.
pub struct ScaleFusionIds {
    /// Tap channel extents per stage, shallow to deep.
    pub channels: [usize; 4],
    /// Reduced width `C/r`.
    pub reduced: usize,
    pub branch_mode: BranchMode,
    reduce_w: ParamId,
    reduce_bn: BnIds,
    s2_w: ParamId,
    s3_w: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    ffn1_w: ParamId,
    ffn1_b: ParamId,
    ffn2_w: ParamId,
    ffn2_b: ParamId,
    expand_w: ParamId,
    expand_bn: BnIds,
    gates: [(ParamId, BnIds); 4],
}

impl ScaleFusionIds {
    /// Registers all parameters under `prefix`. `reduction_r` must divide
    /// the concatenated channel count.
    pub fn add<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: [usize; 4],
        reduction_r: usize,
        branch_mode: BranchMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c: usize = channels.iter().sum();
        if reduction_r == 0 || c % reduction_r != 0 {
            return Err(Error::Config(format!(
                "channel reduction {reduction_r} must divide the concatenated width {c}"
            )));
        }
        let d = c / reduction_r;
        let s3_k = match branch_mode {
            BranchMode::Plain => 5,
            BranchMode::Dilated => 3,
        };
        let mut conv = |store: &mut ParamStore<E>, name: String, co, ci, k| {
            store.add(name, ParamKind::Weight, init_kernel::<E>(rng, co, ci, k))
        };
        let reduce_w = conv(store, format!("{prefix}.reduce.weight"), d, c, 1);
        let reduce_bn = BnIds::add(store, &format!("{prefix}.reduce.bn"), d, false);
        let s2_w = conv(store, format!("{prefix}.branch2.weight"), d, d, 3);
        let s3_w = conv(store, format!("{prefix}.branch3.weight"), d, d, s3_k);
        let wq = store.add(
            format!("{prefix}.attn.q.weight"),
            ParamKind::Weight,
            crate::params::init_linear::<E>(rng, d, d),
        );
        let wk = store.add(
            format!("{prefix}.attn.k.weight"),
            ParamKind::Weight,
            crate::params::init_linear::<E>(rng, d, d),
        );
        let wv = store.add(
            format!("{prefix}.attn.v.weight"),
            ParamKind::Weight,
            crate::params::init_linear::<E>(rng, d, d),
        );
        let ffn1_w = store.add(
            format!("{prefix}.ffn.fc1.weight"),
            ParamKind::Weight,
            crate::params::init_linear::<E>(rng, 4 * d, d),
        );
        let ffn1_b = store.add(
            format!("{prefix}.ffn.fc1.bias"),
            ParamKind::Bias,
            Tensor::zeros(crate::shape![D = 4 * d]),
        );
        let ffn2_w = store.add(
            format!("{prefix}.ffn.fc2.weight"),
            ParamKind::Weight,
            crate::params::init_linear::<E>(rng, d, 4 * d),
        );
        let ffn2_b = store.add(
            format!("{prefix}.ffn.fc2.bias"),
            ParamKind::Bias,
            Tensor::zeros(crate::shape![D = d]),
        );
        // Zero expansion makes the whole block the identity at startup.
        let expand_w = store.add(
            format!("{prefix}.expand.weight"),
            ParamKind::Weight,
            Tensor::zeros(crate::shape![C = c, C = d, H = 1, W = 1]),
        );
        let expand_bn = BnIds::add(store, &format!("{prefix}.expand.bn"), c, false);
        let gates = [0, 1, 2, 3].map(|i| {
            let ci = channels[i];
            let w = store.add(
                format!("{prefix}.gate{}.weight", i + 1),
                ParamKind::Weight,
                init_kernel::<E>(rng, ci, ci, 1),
            );
            let bn = BnIds::add(store, &format!("{prefix}.gate{}.bn", i + 1), ci, false);
            (w, bn)
        });
        Ok(ScaleFusionIds {
            channels,
            reduced: d,
            branch_mode,
            reduce_w,
            reduce_bn,
            s2_w,
            s3_w,
            wq,
            wk,
            wv,
            ffn1_w,
            ffn1_b,
            ffn2_w,
            ffn2_b,
            expand_w,
            expand_bn,
            gates,
        })
    }
}

/// The block's outputs: per-stage gated taps plus their concatenation —
/// the scale-branch feature handed to horizontal pooling.
pub struct ScaleFusionOut<'t, E: Element> {
    pub per_stage: [Var<'t, E>; 4],
    pub fused: Var<'t, E>,
}

/// Runs the fusion block on the four stage taps (shallow to deep). Taps
/// must be `[C_i, H_i, W_i]`; everything is aligned to the last tap's
/// spatial grid.
pub fn scale_fusion_forward<'t, E: Element>(
    pass: &mut Pass<'t, '_, E>,
    ids: &ScaleFusionIds,
    taps: &[Var<'t, E>; 4],
) -> Result<ScaleFusionOut<'t, E>> {
    for (tap, &want) in taps.iter().zip(&ids.channels) {
        let axes = tap.value().shape().axes();
        if axes.len() != 3 || axes[0].1 != want {
            return Err(Error::BadShape {
                op: "scale_fusion_forward",
                shape: tap.value().shape().clone(),
                reason: format!("expected [C={want}, H, W] tap"),
            });
        }
    }
    let (h, w) = {
        let axes = taps[3].value().shape().axes();
        (axes[1].1, axes[2].1)
    };

    // 1. Common resolution + channel concatenation.
    let aligned = [
        taps[0].bilinear_resize((h, w))?,
        taps[1].bilinear_resize((h, w))?,
        taps[2].clone(),
        taps[3].clone(),
    ];
    let f_init = concat_vars(&[&aligned[0], &aligned[1], &aligned[2], &aligned[3]], Axis::C)?;

    // 2. Cross-channel reduction.
    let reduced = f_init.conv2d(pass.var(ids.reduce_w), None, ConvSpec::same(1)?)?;
    let f_c = pass.bn(&reduced, &ids.reduce_bn)?.relu();

    // 3. Three receptive-field views.
    let (s2_spec, s3_spec) = match ids.branch_mode {
        BranchMode::Plain => (ConvSpec::same(3)?, ConvSpec::same(5)?),
        BranchMode::Dilated => (ConvSpec::same(3)?, ConvSpec::new(3, 1, 2, 2)?),
    };
    let s1 = &f_c;
    let s2 = f_c.conv2d(pass.var(ids.s2_w), None, s2_spec)?;
    let s3 = f_c.conv2d(pass.var(ids.s3_w), None, s3_spec)?;

    // 4. Single-head attention across the three views, then the FFN.
    let q = s1.tokens_from_map()?.linear(pass.var(ids.wq), None)?;
    let k = s2.tokens_from_map()?.linear(pass.var(ids.wk), None)?;
    let v = s3.tokens_from_map()?.linear(pass.var(ids.wv), None)?;
    let scores = q
        .matmul_nt(&k)?
        .scale_const(1.0 / (ids.reduced as f64).sqrt());
    let attn = scores.softmax_last()?.matmul_nn(&v)?;
    let hidden = attn
        .linear(pass.var(ids.ffn1_w), Some(pass.var(ids.ffn1_b)))?
        .relu();
    let tokens = hidden.linear(pass.var(ids.ffn2_w), Some(pass.var(ids.ffn2_b)))?;
    let f_s = tokens.map_from_tokens(h, w)?;

    // 5. Expand, split per stage, gate, and re-inject onto the taps.
    let expanded = f_s.conv2d(pass.var(ids.expand_w), None, ConvSpec::same(1)?)?;
    let expanded = pass.bn(&expanded, &ids.expand_bn)?.relu();
    let mut start = 0;
    let mut per_stage = Vec::with_capacity(4);
    for (i, &ci) in ids.channels.iter().enumerate() {
        let split = expanded.narrow(Axis::C, start, ci)?;
        start += ci;
        let (gate_w, gate_bn) = &ids.gates[i];
        let pre = split.conv2d(pass.var(*gate_w), None, ConvSpec::same(1)?)?;
        let gate = pass.bn(&pre, gate_bn)?.sigmoid();
        per_stage.push(gate.mul(&split)?.add(&aligned[i])?);
    }
    let fused = concat_vars(
        &[&per_stage[0], &per_stage[1], &per_stage[2], &per_stage[3]],
        Axis::C,
    )?;
    let per_stage: [Var<'t, E>; 4] = per_stage.try_into().map_err(|_| ()).expect("four stages");
    Ok(ScaleFusionOut { per_stage, fused })
}
