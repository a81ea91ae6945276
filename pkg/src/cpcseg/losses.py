"""CPC objective terms.

All functions take torch tensors and stay differentiable w.r.t. their
feature/probability inputs, except :func:`uncertainty_weight`, whose value is
used as a constant weight.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import InvalidInputError, MissingClassError
from .prototype import IGNORE_INDEX, PrototypeSet

log = logging.getLogger(__name__)

LOG_EPS = 1e-8
SQRT_EPS = 1e-8


def set_distance(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """``1 - mean_g max_h cos(p_h, q_g)`` for ``(c, D)`` prototype sets; in ``[0, 2]``."""
    if p.shape[-1] != q.shape[-1]:
        raise InvalidInputError(f"dimension mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    if (p.detach().norm(dim=-1) == 0).any() or (q.detach().norm(dim=-1) == 0).any():
        raise InvalidInputError("zero-norm prototype in set distance")
    cos = F.normalize(q, dim=-1) @ F.normalize(p, dim=-1).T   # (g, h)
    return 1.0 - cos.amax(dim=1).mean()


def intra_inter(p: PrototypeSet, q: PrototypeSet, j: int):
    """``(d_intra, d_inter)`` for class ``j``; raises MissingClassError if q lacks ``j``."""
    if j not in q:
        raise MissingClassError(j)
    others = [i for i in p.classes if i != j]
    if not others:
        raise InvalidInputError("need at least two classes")
    d_intra = set_distance(p[j], q[j])
    d_inter = sum(set_distance(p[i], q[j]) for i in others) / len(others)
    return d_intra, d_inter


@dataclass
class ContrastDetails:
    d_intra: dict[int, float] = field(default_factory=dict)
    d_inter: dict[int, float] = field(default_factory=dict)
    skipped: list[int] = field(default_factory=list)


def prototype_contrastive_loss(p: PrototypeSet, q: PrototypeSet, margin: float = 0.2,
                               details: ContrastDetails | None = None) -> torch.Tensor:
    """Sum over classes of ``max(d_intra - d_inter + margin, 0)``; classes absent from q skipped."""
    if margin < 0:
        raise InvalidInputError(f"margin must be >= 0, got {margin}")
    terms = []
    for j in p.classes:
        try:
            d_intra, d_inter = intra_inter(p, q, j)
        except MissingClassError:
            log.debug("class %d missing from query prototypes; contrast term skipped", j)
            if details is not None:
                details.skipped.append(j)
            continue
        if details is not None:
            details.d_intra[j] = float(d_intra.detach())
            details.d_inter[j] = float(d_inter.detach())
        terms.append(torch.clamp(d_intra - d_inter + margin, min=0))
    if not terms:
        return p[p.classes[0]].new_zeros(())
    return torch.stack(terms).sum()


def uncertainty_weight(probs: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of second-largest / largest class probability (detached)."""
    probs = probs.detach()
    if probs.shape[-1] < 2:
        raise InvalidInputError("need at least two classes")
    top2 = probs.reshape(-1, probs.shape[-1]).topk(2, dim=-1).values
    return (top2[:, 1] / top2[:, 0]).mean()


def support_ce_loss(probs: torch.Tensor, mask, n: int,
                    ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """Cross-entropy over valid pixels, normalized by ``(n+1) * |valid|``."""
    mask = torch.as_tensor(mask).to(probs.device).long()
    if tuple(mask.shape) != tuple(probs.shape[:-1]):
        raise InvalidInputError(f"mask shape {tuple(mask.shape)} != prob map {tuple(probs.shape[:-1])}")
    if probs.shape[-1] != n + 1:
        raise InvalidInputError(f"prob map has {probs.shape[-1]} classes, expected {n + 1}")
    valid = mask != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise InvalidInputError("support mask has no valid pixels")
    labels = mask[valid]
    if (labels < 0).any() or (labels > n).any():
        raise InvalidInputError(f"support mask labels outside [0, {n}]")
    picked = probs[valid].gather(1, labels[:, None])[:, 0]
    return -torch.log(picked.clamp(min=LOG_EPS)).sum() / ((n + 1) * n_valid)


def _one_sided_diffs(s):
    fx = torch.zeros_like(s)
    fy = torch.zeros_like(s)
    fx[:, :-1] = s[:, 1:] - s[:, :-1]
    fy[:-1, :] = s[1:, :] - s[:-1, :]
    bx = torch.zeros_like(s)
    by = torch.zeros_like(s)
    bx[:, 1:] = fx[:, :-1]
    by[1:, :] = fy[:-1, :]
    return fx, bx, fy, by


def boundary_loss(soft_fg: torch.Tensor, reduction: str = "mean",
                  symmetric: bool = True) -> torch.Tensor:
    """Length of the soft foreground boundary, ``sqrt(dx^2 + dy^2 + eps)`` per pixel.

    Differences are one-sided with a replicated border (zero difference past
    the last row/column).  With ``symmetric`` the per-pixel term is averaged
    over the four forward/backward pairings, which makes the loss invariant
    to horizontal and vertical flips; ``symmetric=False`` uses forward
    differences only.
    """
    if soft_fg.ndim != 2:
        raise InvalidInputError("boundary_loss expects an (h, w) map")
    fx, bx, fy, by = _one_sided_diffs(soft_fg)
    if symmetric:
        per_pixel = sum(torch.sqrt(dx * dx + dy * dy + SQRT_EPS)
                        for dx in (fx, bx) for dy in (fy, by)) / 4
    else:
        per_pixel = torch.sqrt(fx * fx + fy * fy + SQRT_EPS)
    if reduction == "mean":
        return per_pixel.mean()
    if reduction == "sum":
        return per_pixel.sum()
    raise InvalidInputError(f"unknown reduction {reduction!r}")


def total_loss(ce, pc, bd, w_un):
    """``ce + (1 - w_un) * pc + bd`` with ``w_un`` held constant."""
    if torch.is_tensor(w_un):
        w_un = w_un.detach()
    return ce + (1 - w_un) * pc + bd


def mean_entropy(probs: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel Shannon entropy (nats) of a probability map."""
    p = probs.reshape(-1, probs.shape[-1])
    return -(p * torch.log(p.clamp(min=LOG_EPS))).sum(-1).mean()


@dataclass
class LossBreakdown:
    ce: float
    pc: float
    bd: float
    w_un: float
    total: float
    d_intra: dict[int, float] = field(default_factory=dict)
    d_inter: dict[int, float] = field(default_factory=dict)
