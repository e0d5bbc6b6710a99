//! Retrieval head: horizontal strip pooling, per-part embeddings, a
//! batch-norm neck, and bias-free classifiers.
//!
//! Each branch feature map is partitioned into `P` horizontal strips;
//! every strip is pooled to one vector (max + mean summed, or max only),
//! mapped by its own linear layer to the embedding dimension, then
//! normalized by a per-part batch-norm "neck". Retrieval distances use
//! the pre-neck embeddings; classification logits come from bias-free,
//! zero-initialized per-part classifiers on the necked features, so a
//! fresh model scores every class equally.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::params::{init_linear, BnIds, ParamId, ParamKind, ParamStore, Pass};
use crate::tape::Var;
use crate::tensor::{Axis, Tensor};
use rand_chacha::ChaCha8Rng;

/// Which pipeline a branch feature came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Mirror-paired trunk feature.
    Reflect,
    /// Rotation-branch feature.
    Rotate,
    /// Multi-scale fusion feature.
    Scale,
    /// Plain single-branch trunk (ablated baseline).
    Trunk,
}

impl Branch {
    pub fn label(self) -> &'static str {
        match self {
            Branch::Reflect => "reflect",
            Branch::Rotate => "rotate",
            Branch::Scale => "scale",
            Branch::Trunk => "trunk",
        }
    }
}

struct PartIds {
    fc_w: ParamId,
    fc_b: ParamId,
    neck: BnIds,
    cls_w: ParamId,
}

/// Parameter handles for the whole head: `branches.len() × parts`
/// independent part pipelines, in branch-major order.
pub struct HeadIds {
    /// `(branch, strip vector dimension)` per branch, shallow order.
    pub branches: Vec<(Branch, usize)>,
    pub parts: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    /// Max-only strip pooling instead of max + mean.
    pub max_only: bool,
    part_ids: Vec<PartIds>,
}

impl HeadIds {
    pub fn add<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        branches: Vec<(Branch, usize)>,
        parts: usize,
        embed_dim: usize,
        num_classes: usize,
        max_only: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut part_ids = Vec::with_capacity(branches.len() * parts);
        for &(branch, in_dim) in &branches {
            for p in 0..parts {
                let base = format!("{prefix}.{}.part{p:02}", branch.label());
                part_ids.push(PartIds {
                    fc_w: store.add(
                        format!("{base}.fc.weight"),
                        ParamKind::Weight,
                        init_linear::<E>(rng, embed_dim, in_dim),
                    ),
                    fc_b: store.add(
                        format!("{base}.fc.bias"),
                        ParamKind::Bias,
                        Tensor::zeros(crate::shape![D = embed_dim]),
                    ),
                    neck: BnIds::add(store, &format!("{base}.neck"), embed_dim, false),
                    // Zero classifier → uniform logits on a fresh model.
                    cls_w: store.add(
                        format!("{base}.classifier.weight"),
                        ParamKind::Weight,
                        Tensor::zeros(crate::shape![D = num_classes, D = embed_dim]),
                    ),
                });
            }
        }
        HeadIds {
            branches,
            parts,
            embed_dim,
            num_classes,
            max_only,
            part_ids,
        }
    }

    /// Total part count (`branches × parts`).
    pub fn total_parts(&self) -> usize {
        self.part_ids.len()
    }
}

/// Strip-pools one sequence's branch features into `branches × parts`
/// vectors, each `[L=1, D=C_branch]`, branch-major. Features must be
/// `[C, H, W]` and match the head's branch plan.
pub fn part_vectors<'t, E: Element>(
    head: &HeadIds,
    features: &[(Branch, Var<'t, E>)],
) -> Result<Vec<Var<'t, E>>> {
    if features.len() != head.branches.len() {
        return Err(Error::Config(format!(
            "head expects {} branch features, got {}",
            head.branches.len(),
            features.len()
        )));
    }
    let mut out = Vec::with_capacity(head.total_parts());
    for ((branch, feat), &(want_branch, want_dim)) in features.iter().zip(&head.branches) {
        if *branch != want_branch {
            return Err(Error::Config(format!(
                "branch order mismatch: got {}, expected {}",
                branch.label(),
                want_branch.label()
            )));
        }
        let axes = feat.value().shape().axes();
        if axes.len() != 3 || axes[0].1 != want_dim {
            return Err(Error::BadShape {
                op: "part_vectors",
                shape: feat.value().shape().clone(),
                reason: format!("expected [C={want_dim}, H, W] for {}", branch.label()),
            });
        }
        let strips = feat.strip_pool(head.parts, head.max_only)?;
        for p in 0..head.parts {
            out.push(strips.narrow(Axis::L, p, 1)?);
        }
    }
    Ok(out)
}

/// Embeds one part's stacked strip vectors `[N, in_dim] → [N, embed_dim]`.
pub fn embed_part<'t, E: Element>(
    pass: &Pass<'t, '_, E>,
    head: &HeadIds,
    part: usize,
    x: &Var<'t, E>,
) -> Result<Var<'t, E>> {
    let ids = &head.part_ids[part];
    x.linear(pass.var(ids.fc_w), Some(pass.var(ids.fc_b)))
}

/// Applies the BN neck of one part.
pub fn neck_part<'t, E: Element>(
    pass: &mut Pass<'t, '_, E>,
    head: &HeadIds,
    part: usize,
    embedding: &Var<'t, E>,
) -> Result<Var<'t, E>> {
    pass.bn(embedding, &head.part_ids[part].neck)
}

/// Classification logits of one part (from the necked feature).
pub fn logits_part<'t, E: Element>(
    pass: &Pass<'t, '_, E>,
    head: &HeadIds,
    part: usize,
    necked: &Var<'t, E>,
) -> Result<Var<'t, E>> {
    necked.linear(pass.var(head.part_ids[part].cls_w), None)
}

/// Eval-path convenience: embeds every part of one sequence and returns
/// the concatenated pre-neck retrieval vector (length `total_parts ×
/// embed_dim`, branch-major, part order within branch).
pub fn retrieval_vector<E: Element>(
    pass: &mut Pass<'_, '_, E>,
    head: &HeadIds,
    features: &[(Branch, Var<'_, E>)],
) -> Result<Vec<E>> {
    let parts = part_vectors(head, features)?;
    let mut out = Vec::with_capacity(head.total_parts() * head.embed_dim);
    for (p, vec) in parts.iter().enumerate() {
        let e = embed_part(pass, head, p, vec)?;
        out.extend_from_slice(e.value().data());
    }
    Ok(out)
}
