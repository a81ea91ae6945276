"""Class-wise feature sets, fine-grained prototypes and cosine prediction.

Clustering runs on detached features; the resulting assignments are then
used to average the *live* feature tensors, so gradients reach the encoder
through every cluster center and holistic mean but never through the
assignment itself.

Before clustering, a class set is reduced to its distinct vectors with
multiplicities divided by their gcd.  Pooling ``k`` identical support shots
therefore produces exactly the same clustering problem (and bitwise the same
prototypes) as a single shot.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import EmptyClassError, InvalidInputError

log = logging.getLogger(__name__)

IGNORE_INDEX = 255


# -- class-wise feature sets ---------------------------------------------------

def split_class_features(fmap: torch.Tensor, mask, n: int,
                         ignore_index: int = IGNORE_INDEX) -> list[torch.Tensor]:
    """Per-class ``(N_i, D)`` feature sets for classes ``0..n``; ignore pixels dropped."""
    mask = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask)
    if tuple(mask.shape) != tuple(fmap.shape[:2]):
        raise InvalidInputError(f"mask shape {tuple(mask.shape)} does not match "
                                f"feature grid {tuple(fmap.shape[:2])}")
    flat = fmap.reshape(-1, fmap.shape[-1])
    labels = mask.reshape(-1).long()
    bad = (labels != ignore_index) & ((labels < 0) | (labels > n))
    if bad.any():
        raise InvalidInputError(f"mask has labels outside [0, {n}] other than {ignore_index}")
    return [flat[labels == i] for i in range(n + 1)]


def pool_class_features(per_shot: list[list[torch.Tensor]]) -> list[torch.Tensor]:
    """Concatenate class sets of several shots class by class."""
    return [torch.cat(parts, dim=0) for parts in zip(*per_shot)]


# -- k-means -------------------------------------------------------------------

@dataclass
class KMeansResult:
    centers: np.ndarray       # (c, D)
    labels: np.ndarray        # (N,) indices into the first n_effective centers
    n_effective: int
    n_iter: int
    inertia: list[float] = field(default_factory=list)


def _sq_dists(x, centers):
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("ncd,ncd->nc", diff, diff)


def _weighted_means(x, w, labels, c):
    centers = np.empty((c, x.shape[1]))
    for j in range(c):
        sel = labels == j
        centers[j] = (w[sel, None] * x[sel]).sum(0) / w[sel].sum()
    return centers


def _kmeans_pp(x, w, c, rng):
    idx = [int(rng.choice(len(x), p=w / w.sum()))]
    d2 = _sq_dists(x, x[idx])[:, 0]
    for _ in range(1, c):
        prob = w * d2
        idx.append(int(rng.choice(len(x), p=prob / prob.sum())))
        d2 = np.minimum(d2, _sq_dists(x, x[idx[-1:]])[:, 0])
    return x[idx].copy()


def kmeans(features, c: int, seed: int = 0, max_iters: int = 100,
           weights=None) -> KMeansResult:
    """Weighted Lloyd iterations from a seeded k-means++ start.

    With fewer distinct points than ``c`` the problem is solved for the
    distinct count and the last center is replicated up to ``c``.  A cluster
    left empty by an assignment step is reseeded at the point farthest from
    its own center.
    """
    x = np.asarray(features.detach().cpu() if torch.is_tensor(features) else features,
                   dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise InvalidInputError("kmeans needs a non-empty (N, D) array")
    if c < 1:
        raise InvalidInputError(f"c must be >= 1, got {c}")
    if not np.isfinite(x).all():
        raise InvalidInputError("kmeans input has non-finite values")
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=np.float64)
    rng = np.random.default_rng(seed)

    n_distinct = len(np.unique(x, axis=0))
    c_eff = min(c, n_distinct)
    if c_eff < c:
        log.warning("only %d distinct features for %d clusters; replicating last center",
                    n_distinct, c)

    centers = _kmeans_pp(x, w, c_eff, rng)
    labels = None
    inertia = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        d2 = _sq_dists(x, centers)
        new_labels = d2.argmin(1)
        for j in range(c_eff):
            if (new_labels == j).any():
                continue
            own = d2[np.arange(len(x)), new_labels]
            counts = np.bincount(new_labels, minlength=c_eff)
            own = np.where(counts[new_labels] > 1, own, -1.0)
            far = int(own.argmax())
            new_labels[far] = j
        centers = _weighted_means(x, w, new_labels, c_eff)
        inertia.append(float((w * _sq_dists(x, centers)[np.arange(len(x)), new_labels]).sum()))
        if labels is not None and np.array_equal(labels, new_labels):
            labels = new_labels
            break
        labels = new_labels

    if c_eff < c:
        centers = np.concatenate([centers, np.repeat(centers[-1:], c - c_eff, axis=0)])
    return KMeansResult(centers=centers, labels=labels, n_effective=c_eff,
                        n_iter=n_iter, inertia=inertia)


def within_cluster_ss(features, centers, labels) -> float:
    x = np.asarray(features, dtype=np.float64)
    d = x - np.asarray(centers)[labels]
    return float((d * d).sum())


# -- prototypes ----------------------------------------------------------------

@dataclass
class PrototypeSet:
    """Fine-grained prototypes: ``vectors[i]`` is a ``(c, D)`` tensor for class ``i``.

    Query pseudo-prototype sets may lack classes that were not predicted.
    """
    vectors: dict[int, torch.Tensor]
    c: int
    lam: float

    @property
    def classes(self) -> list[int]:
        return sorted(self.vectors)

    def __contains__(self, class_id):
        return class_id in self.vectors

    def __getitem__(self, class_id) -> torch.Tensor:
        return self.vectors[class_id]

    def stacked(self) -> torch.Tensor:
        """``(n+1, c, D)`` tensor; requires every class ``0..n``."""
        classes = self.classes
        if classes != list(range(len(classes))):
            raise InvalidInputError(f"prototype set is missing classes: has {classes}")
        return torch.stack([self.vectors[i] for i in classes])


def _class_seed(seed: int, class_id: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(class_id)]).generate_state(1)[0])


def class_prototypes(feats: torch.Tensor, c: int, lam: float, seed: int,
                     max_iters: int = 100) -> torch.Tensor:
    """``c`` prototypes ``center_j + lam * mean`` for one class set."""
    x = feats.detach().cpu().double().numpy()
    uniq, first, counts = np.unique(x, axis=0, return_index=True, return_counts=True)
    weights = counts // np.gcd.reduce(counts)
    res = kmeans(uniq, c, seed=seed, max_iters=max_iters, weights=weights)

    live = feats[torch.as_tensor(first, device=feats.device)]
    w = torch.as_tensor(weights, dtype=feats.dtype, device=feats.device)
    holistic = (w[:, None] * live).sum(0) / w.sum()
    labels = torch.as_tensor(res.labels, device=feats.device)
    centers = []
    for j in range(res.n_effective):
        sel = labels == j
        centers.append((w[sel, None] * live[sel]).sum(0) / w[sel].sum())
    centers += [centers[-1]] * (c - res.n_effective)
    protos = torch.stack(centers) + lam * holistic
    if (protos.detach().norm(dim=-1) == 0).any():
        raise InvalidInputError("zero-norm prototype")
    return protos


def generate_prototypes(sets: list[torch.Tensor], c: int, lam: float = 0.5, seed: int = 0,
                        allow_missing: bool = False, max_iters: int = 100) -> PrototypeSet:
    if c < 1:
        raise InvalidInputError(f"c must be >= 1, got {c}")
    if lam < 0:
        raise InvalidInputError(f"lambda must be >= 0, got {lam}")
    vectors = {}
    for i, feats in enumerate(sets):
        if feats.shape[0] == 0:
            if allow_missing:
                log.debug("class %d absent; no prototypes", i)
                continue
            raise EmptyClassError(i)
        vectors[i] = class_prototypes(feats, c, lam, _class_seed(seed, i), max_iters)
    return PrototypeSet(vectors=vectors, c=c, lam=lam)


# -- prediction ----------------------------------------------------------------

def class_scores(fmap: torch.Tensor, protos: PrototypeSet) -> torch.Tensor:
    """Per-pixel best cosine similarity to each class, shape ``(h, w, n+1)``."""
    P = protos.stacked()
    if P.shape[-1] != fmap.shape[-1]:
        raise InvalidInputError(f"prototype dim {P.shape[-1]} != feature dim {fmap.shape[-1]}")
    if (P.detach().norm(dim=-1) == 0).any():
        raise InvalidInputError("zero-norm prototype")
    if log.isEnabledFor(logging.DEBUG):
        n_zero = int((fmap.detach().norm(dim=-1) == 0).sum())
        if n_zero:
            log.debug("%d zero-norm feature vectors; their cosines are 0", n_zero)
    # zero feature vectors normalize to zero, giving cosine 0
    f = F.normalize(fmap, dim=-1, eps=1e-12)
    p = F.normalize(P, dim=-1, eps=1e-12)
    cos = torch.einsum("hwd,kcd->hwkc", f, p)
    return cos.amax(dim=-1)


def predict_query(fmap: torch.Tensor, protos: PrototypeSet, scale: float = 20.0):
    """Softmax over classes of ``scale * max_j cos``; returns ``(probs, labels)``.

    ``labels`` is the first argmax of ``probs``, i.e. ties go to the lowest class.
    """
    probs = torch.softmax(scale * class_scores(fmap, protos), dim=-1)
    return probs, probs.detach().argmax(dim=-1)


def query_prototypes(fmap: torch.Tensor, predicted, c: int, lam: float = 0.5,
                     seed: int = 0, n: int | None = None) -> PrototypeSet:
    """Pseudo-prototypes from the query's own predicted mask (mask treated as constant)."""
    predicted = torch.as_tensor(predicted).detach()
    if n is None:
        n = int(predicted.max())
    sets = split_class_features(fmap, predicted, n)
    return generate_prototypes(sets, c, lam, seed, allow_missing=True)
