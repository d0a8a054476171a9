"""Identity, batch-hard triplet and center-guided nuances mining losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .modules import IR, VIS, ModelOutput
from .numerics import ops
from .numerics.tensor import ShapeError, Tensor

BRANCHES = ("v1", "v2", "i1", "i2")
# anchor -> (cross-modality same branch, same modality other branch)
PARTNERS = {"v1": ("i1", "v2"), "v2": ("i2", "v1"), "i1": ("v1", "i2"), "i2": ("v2", "i1")}


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.5
    margin_cnm: float = 0.2
    margin_tri: float = 0.3

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "margin_cnm", "margin_tri"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class CenterSet:
    branch: str
    class_ids: list[int]
    centers: Tensor  # P x D, row j is the center of class_ids[j]


@dataclass
class LossBreakdown:
    total: Tensor
    id: Tensor
    tri: Tensor
    cnm: Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("total", "id", "tri", "cnm")}


def _zero(like: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=like.dtype), dtype=like.dtype)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return ops.cross_entropy(logits, labels)


def triplet_batch_hard(embeddings: Tensor, labels, margin: float = 0.3) -> Tensor:
    """Mean over anchors of ``[max_pos d - min_neg d + margin]_+``."""
    labels = np.asarray(labels)
    n = embeddings.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"triplet: {n} embeddings vs labels {labels.shape}")
    uniq, counts = np.unique(labels, return_counts=True)
    if uniq.size < 2:
        raise ValueError(f"triplet loss needs at least 2 labels, batch only has {uniq.tolist()}")
    if (counts < 2).any():
        raise ValueError(f"label {uniq[counts < 2][0]} has fewer than 2 samples in the batch")
    dist = ops.pairwise_distance(embeddings, embeddings)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(n, dtype=bool)
    rows = np.arange(n)
    hardest_pos = np.where(pos, dist.data, -np.inf).argmax(axis=1)
    hardest_neg = np.where(~same, dist.data, np.inf).argmin(axis=1)
    d_ap = dist[rows, hardest_pos]
    d_an = dist[rows, hardest_neg]
    return ops.relu(d_ap - d_an + margin).mean()


def compute_centers(embeddings: Tensor, labels, modality, branch: str,
                    select: int | None = None, class_ids=None) -> CenterSet:
    """Per-class means of ``embeddings`` restricted to one modality.

    ``select`` is the modality code to keep; it defaults to the one implied
    by the branch name (``v*`` -> VIS, ``i*`` -> IR). Gradients flow back
    through the means.
    """
    labels = np.asarray(labels)
    modality = np.asarray(modality)
    if select is None:
        select = VIS if branch.startswith("v") else IR
    if class_ids is None:
        class_ids = sorted(np.unique(labels).tolist())
    mask = modality == select
    avg = np.zeros((len(class_ids), labels.size), dtype=embeddings.dtype)
    for j, cid in enumerate(class_ids):
        members = mask & (labels == cid)
        if not members.any():
            raise ValueError(f"class {cid} has no samples for branch {branch}")
        avg[j, members] = 1.0 / members.sum()
    centers = ops.matmul(Tensor(avg, dtype=embeddings.dtype), embeddings)
    return CenterSet(branch, [int(c) for c in class_ids], centers)


def cnm_branch(anchor: CenterSet, cross: CenterSet, other: CenterSet, m: float,
               ordered_pairs: bool = True) -> Tensor:
    """Center-guided nuances mining hinge for one anchor branch.

    Sums ``[2 D(a_j, x_j) - D(a_j, o_j) - D(a_j, a_k) + m]_+`` over class
    pairs ``j != k``; with ``ordered_pairs=False`` only ``j < k`` is kept.
    """
    if not (anchor.class_ids == cross.class_ids == other.class_ids):
        raise ValueError(
            f"center sets cover different classes: {anchor.class_ids}, {cross.class_ids}, "
            f"{other.class_ids}"
        )
    a = anchor.centers
    p = a.shape[0]
    if p < 2:
        return _zero(a)
    d_ax = ops.row_distance(a, cross.centers)
    d_ao = ops.row_distance(a, other.centers)
    d_aa = ops.pairwise_distance(a, a)
    pull = (d_ax * 2.0 - d_ao).reshape(p, 1)
    terms = ops.relu(pull - d_aa + m)
    keep = ~np.eye(p, dtype=bool) if ordered_pairs else np.triu(np.ones((p, p), dtype=bool), 1)
    return (terms * keep.astype(a.dtype)).sum()


def cnm_total(centers: dict[str, CenterSet], m: float, ordered_pairs: bool = True) -> Tensor:
    """Mean of the four branch losses, each with its symmetric partners."""
    parts = [
        cnm_branch(centers[b], centers[PARTNERS[b][0]], centers[PARTNERS[b][1]], m, ordered_pairs)
        for b in BRANCHES
    ]
    return (parts[0] + parts[1] + parts[2] + parts[3]) * 0.25


def branch_centers(e1: Tensor, e2: Tensor, labels, modality) -> dict[str, CenterSet]:
    return {
        "v1": compute_centers(e1, labels, modality, "v1"),
        "v2": compute_centers(e2, labels, modality, "v2"),
        "i1": compute_centers(e1, labels, modality, "i1"),
        "i2": compute_centers(e2, labels, modality, "i2"),
    }


def total_loss(out: ModelOutput, labels, modality, w: LossWeights,
               use_cnm: bool = True, ordered_pairs: bool = True) -> LossBreakdown:
    """``L_id + lambda1 * L_tri + lambda2 * L_cnm``.

    Identity and triplet terms are averaged over the global and part heads;
    triplet uses pre-BN pooled features, identity the post-BN logits.
    """
    head = out.head
    n_heads = len(head.logits)
    l_id = cross_entropy(head.logits[0], labels)
    l_tri = triplet_batch_hard(head.pooled[0], labels, w.margin_tri)
    for i in range(1, n_heads):
        l_id = l_id + cross_entropy(head.logits[i], labels)
        l_tri = l_tri + triplet_batch_hard(head.pooled[i], labels, w.margin_tri)
    l_id = l_id * (1.0 / n_heads)
    l_tri = l_tri * (1.0 / n_heads)
    if use_cnm and out.anm is not None:
        l_cnm = cnm_total(branch_centers(*out.anm, labels, modality), w.margin_cnm, ordered_pairs)
    else:
        l_cnm = _zero(l_id)
    total = l_id + l_tri * w.lambda1 + l_cnm * w.lambda2
    return LossBreakdown(total, l_id, l_tri, l_cnm)
