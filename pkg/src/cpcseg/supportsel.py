"""Representative support selection: k-means on pooled image embeddings, nearest image per center."""

from __future__ import annotations

import numpy as np
import torch

from .encoder import encode
from .errors import InvalidInputError
from .prototype import kmeans


def image_embedding(fmap: torch.Tensor) -> np.ndarray:
    """Spatial mean of an ``(h, w, D)`` feature map."""
    return fmap.detach().double().mean(dim=(0, 1)).cpu().numpy()


def embedding_table(encoder, samples) -> dict[str, np.ndarray]:
    with torch.no_grad():
        return {s.id: image_embedding(encode(encoder, s.image)) for s in samples}


def select_support(table: dict[str, np.ndarray], k: int, seed: int = 0) -> list[str]:
    """``k`` distinct ids, one per k-means center (nearest image, greedily de-duplicated).

    Ids are processed in sorted order, so the result does not depend on the
    order of ``table``.
    """
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    if len(table) < k:
        raise InvalidInputError(f"pool of {len(table)} images is smaller than k={k}")
    ids = sorted(table)
    x = np.stack([np.asarray(table[i], dtype=np.float64) for i in ids])
    centers = kmeans(x, k, seed=seed).centers
    chosen: list[int] = []
    for center in centers:
        d = ((x - center) ** 2).sum(1)
        d[chosen] = np.inf
        chosen.append(int(d.argmin()))
    return [ids[i] for i in chosen]


def write_manifest(ids, path):
    with open(path, "w") as fh:
        fh.writelines(f"{i}\n" for i in ids)


def read_manifest(path) -> list[str]:
    with open(path) as fh:
        return [ln.strip() for ln in fh if ln.strip()]
