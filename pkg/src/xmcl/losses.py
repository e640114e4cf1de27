"""Circle loss, Tuple-Circle loss and the pair construction they share.

Features are rows ``x_f = [x_sh, x_pr]``: the first ``d_sh`` columns are the
span shared between modalities, the remaining ``d_pr`` are private. Within a
modality (inter pairs) cosine similarity uses the whole row; across
modalities (cross pairs) it uses only the shared span.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

IMAGE = "image"
POINT = "point"


@dataclass(frozen=True)
class TupleLayout:
    d_sh: int
    d_pr: int

    def __post_init__(self):
        if self.d_sh < 1 or self.d_pr < 1:
            raise ValueError(f"TupleLayout needs d_sh >= 1 and d_pr >= 1, got {self.d_sh}, {self.d_pr}")

    @property
    def dim(self) -> int:
        return self.d_sh + self.d_pr


@dataclass(frozen=True)
class CircleParams:
    gamma: float = 32.0
    m: float = 0.25

    def __post_init__(self):
        if self.gamma <= 0 or not 0 < self.m < 1:
            raise ValueError(f"CircleParams: need gamma > 0 and 0 < m < 1, got {self.gamma}, {self.m}")

    @property
    def delta_neg(self) -> float:
        return self.m

    @property
    def delta_pos(self) -> float:
        return 1.0 - self.m


@dataclass
class CorrespondenceBatch:
    """Four aligned ``[N, D]`` feature matrices; row i is one physical location."""

    img: Tensor
    img_aug: Tensor
    pc: Tensor
    pc_aug: Tensor

    def __post_init__(self):
        shapes = {t.shape for t in (self.img, self.img_aug, self.pc, self.pc_aug)}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise T.ShapeError("CorrespondenceBatch", *(t.shape for t in (self.img, self.img_aug, self.pc, self.pc_aug)))

    @property
    def n(self) -> int:
        return self.img.shape[0]

    @property
    def dim(self) -> int:
        return self.img.shape[1]

    def views(self, modality: str) -> tuple[Tensor, Tensor]:
        if modality == IMAGE:
            return self.img, self.img_aug
        if modality == POINT:
            return self.pc, self.pc_aug
        raise ValueError(f"unknown modality {modality!r}")


@dataclass
class PairSimilarities:
    s_pos: Tensor
    s_neg: Tensor
    pos_kind: list[str] = field(default_factory=list)
    neg_kind: list[str] = field(default_factory=list)

    def __add__(self, other: "PairSimilarities") -> "PairSimilarities":
        return PairSimilarities(
            T.concat([self.s_pos, other.s_pos]),
            T.concat([self.s_neg, other.s_neg]),
            self.pos_kind + other.pos_kind,
            self.neg_kind + other.neg_kind,
        )


class DegenerateBatchError(ValueError):
    pass


# --------------------------------------------------------------------------
# similarities
# --------------------------------------------------------------------------

def cosine_sim(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity of two vectors, as a 1-element tensor."""
    if a.shape != b.shape or a.ndim != 1:
        raise T.ShapeError("cosine_sim", a.shape, b.shape)
    for name, v in (("a", a), ("b", b)):
        if np.linalg.norm(v.data) <= eps:
            raise ValueError(f"cosine_sim: near-zero norm for {name} (dead feature)")
    na = T.l2_normalize_rows(T.reshape(a, (1, -1)))
    nb = T.l2_normalize_rows(T.reshape(b, (1, -1)))
    return T.reshape(T.sum_(T.mul(na, nb)), (1,))


def _shared(x: Tensor, layout: TupleLayout | None) -> Tensor:
    return x if layout is None else T.slice_last(x, 0, layout.d_sh)


def _check_norms(*mats: Tensor, eps: float = 1e-12) -> None:
    for m in mats:
        norms = np.sqrt((m.data * m.data).sum(axis=-1))
        if np.any(norms <= eps):
            raise ValueError("zero-norm feature row (dead feature)")


# --------------------------------------------------------------------------
# circle loss
# --------------------------------------------------------------------------

def _neg_logits(s: Tensor, p: CircleParams) -> Tensor:
    # alpha_n * (s - delta_n), alpha_n = gamma * max(s + m, 0)
    alpha = T.scale(T.relu(T.add(s, p.m)), p.gamma)
    return T.mul(alpha, T.sub(s, p.delta_neg))


def _pos_logits(s: Tensor, p: CircleParams) -> Tensor:
    # -alpha_p * (s - delta_p), alpha_p = gamma * max(1 + m - s, 0)
    alpha = T.scale(T.relu(T.sub(1.0 + p.m, s)), p.gamma)
    return T.scale(T.mul(alpha, T.sub(s, p.delta_pos)), -1.0)


def circle_loss(s_pos: Tensor, s_neg: Tensor, p: CircleParams) -> Tensor:
    """``log(1 + sum_j exp(a_j^- (s_j^- - m)) * sum_i exp(-a_i^+ (s_i^+ - 1 + m)))``.

    The self-paced weights are part of the graph (not detached), so the
    returned value is an ordinary differentiable function of the similarities.
    """
    if s_pos.size == 0 or s_neg.size == 0:
        raise DegenerateBatchError("circle_loss needs at least one positive and one negative pair")
    e_neg = T.sum_(T.exp(_neg_logits(s_neg, p)))
    e_pos = T.sum_(T.exp(_pos_logits(s_pos, p)))
    return T.log(T.add(T.mul(e_neg, e_pos), 1.0))


# --------------------------------------------------------------------------
# explicit pair construction (one anchor at a time)
# --------------------------------------------------------------------------

def _check_n(batch: CorrespondenceBatch, anchor_row: int) -> None:
    if batch.n < 2:
        raise DegenerateBatchError(f"need N >= 2 correspondences, got {batch.n}")
    if not 0 <= anchor_row < batch.n:
        raise IndexError(f"anchor_row {anchor_row} out of range for N={batch.n}")


def build_inter_pairs(batch: CorrespondenceBatch, anchor_row: int, modality: str) -> PairSimilarities:
    """One positive (same row, augmented view) and N-1 negatives, full vectors."""
    _check_n(batch, anchor_row)
    plain, aug = batch.views(modality)
    anchor = plain[anchor_row]
    pos = cosine_sim(anchor, aug[anchor_row])
    negs = [cosine_sim(anchor, aug[j]) for j in range(batch.n) if j != anchor_row]
    return PairSimilarities(pos, T.concat(negs), ["inter"], ["inter"] * len(negs))


def build_cross_pairs(
    batch: CorrespondenceBatch,
    anchor_row: int,
    anchor_modality: str,
    layout: TupleLayout | None,
) -> PairSimilarities:
    """Four positives {img, img_aug} x {pc, pc_aug} and 2N-2 negatives, shared span.

    Negatives pair the plain view of the anchor modality with every
    non-corresponding row of both views of the other modality. ``layout=None``
    uses the full vector (the plain Circle-loss baseline).
    """
    _check_n(batch, anchor_row)
    other = POINT if anchor_modality == IMAGE else IMAGE
    i = anchor_row
    sh = lambda x: _shared(x, layout)
    pos = [
        cosine_sim(sh(a[i]), sh(b[i]))
        for a in (batch.img, batch.img_aug)
        for b in (batch.pc, batch.pc_aug)
    ]
    anchor = sh(batch.views(anchor_modality)[0][i])
    negs = [
        cosine_sim(anchor, sh(view[j]))
        for view in batch.views(other)
        for j in range(batch.n)
        if j != i
    ]
    return PairSimilarities(T.concat(pos), T.concat(negs), ["cross"] * 4, ["cross"] * len(negs))


def anchor_loss(batch: CorrespondenceBatch, anchor_row: int, modality: str,
                layout: TupleLayout | None, p: CircleParams) -> Tensor:
    """Loss for one anchor from the explicit pair lists (reference path)."""
    pairs = build_inter_pairs(batch, anchor_row, modality) + build_cross_pairs(
        batch, anchor_row, modality, layout
    )
    return circle_loss(pairs.s_pos, pairs.s_neg, p)


# --------------------------------------------------------------------------
# vectorized batch losses
# --------------------------------------------------------------------------

def _pair_loss(batch: CorrespondenceBatch, layout: TupleLayout | None, p: CircleParams) -> Tensor:
    n = batch.n
    if n < 2:
        raise DegenerateBatchError(f"need N >= 2 correspondences, got {n}")
    _check_norms(batch.img, batch.img_aug, batch.pc, batch.pc_aug)
    if layout is not None and layout.dim != batch.dim:
        raise T.ShapeError("tuple_circle_loss", (batch.dim,), (layout.dim,), detail="layout width")

    full = [T.l2_normalize_rows(x) for x in (batch.img, batch.img_aug, batch.pc, batch.pc_aug)]
    if layout is None:
        shared = full
    else:
        shared = [T.l2_normalize_rows(_shared(x, layout))
                  for x in (batch.img, batch.img_aug, batch.pc, batch.pc_aug)]
    fi, fia, fp, fpa = full
    si, sia, sp, spa = shared

    inter_img = T.matmul(fi, T.transpose(fia))  # [anchor img i, img_aug j]
    inter_pc = T.matmul(fp, T.transpose(fpa))
    i_p = T.matmul(si, T.transpose(sp))  # [img i, pc j]
    i_pa = T.matmul(si, T.transpose(spa))
    ia_p = T.matmul(sia, T.transpose(sp))  # [img_aug i, pc j]
    ia_pa = T.matmul(sia, T.transpose(spa))

    eye = np.eye(n)
    off = Tensor(1.0 - eye)
    diag = Tensor(eye)

    def neg_exp(s):
        return T.exp(_neg_logits(s, p))

    def pos_exp(s):
        return T.exp(_pos_logits(s, p))

    # image anchors: rows; point anchors: columns of the img-vs-pc matrices
    neg_img = T.sum_(T.mul(off, T.add(T.add(neg_exp(inter_img), neg_exp(i_p)), neg_exp(i_pa))), axis=1)
    neg_pc = T.add(
        T.sum_(T.mul(off, neg_exp(inter_pc)), axis=1),
        T.sum_(T.mul(off, T.add(neg_exp(i_p), neg_exp(ia_p))), axis=0),
    )
    cross_pos = T.sum_(
        T.mul(diag, T.add(T.add(pos_exp(i_p), pos_exp(i_pa)), T.add(pos_exp(ia_p), pos_exp(ia_pa)))),
        axis=1,
    )
    pos_img = T.add(T.sum_(T.mul(diag, pos_exp(inter_img)), axis=1), cross_pos)
    pos_pc = T.add(T.sum_(T.mul(diag, pos_exp(inter_pc)), axis=1), cross_pos)

    per_img = T.log(T.add(T.mul(neg_img, pos_img), 1.0))
    per_pc = T.log(T.add(T.mul(neg_pc, pos_pc), 1.0))
    return T.scale(T.add(T.sum_(per_img), T.sum_(per_pc)), 1.0 / (2 * n))


def tuple_circle_loss(batch: CorrespondenceBatch, layout: TupleLayout, p: CircleParams) -> Tensor:
    """Mean over all 2N anchors of the circle loss on inter (full) + cross (shared) pairs."""
    return _pair_loss(batch, layout, p)


def circle_loss_batch(batch: CorrespondenceBatch, p: CircleParams) -> Tensor:
    """Baseline: same anchors and pairs, every similarity on the full vector."""
    return _pair_loss(batch, None, p)


def batch_loss(batch: CorrespondenceBatch, variant: str, layout: TupleLayout, p: CircleParams) -> Tensor:
    if variant == "tuple_circle":
        return tuple_circle_loss(batch, layout, p)
    if variant == "circle":
        return circle_loss_batch(batch, p)
    raise ValueError(f"unknown loss variant {variant!r}")
