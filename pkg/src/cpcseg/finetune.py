"""Episodic transductive fine-tuning (CPC) and the Sup-FT / Trans-FT baselines.

Gradient stop points: the predicted query mask, k-means assignments and the
uncertainty weight are constants; everything else (features, prototype
averages, probabilities) carries gradients to the encoder.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import Sample, downsample_mask
from .encoder import encode, feature_shape, init_optimizer, save_checkpoint, sgd_step, ToyEncoder
from .errors import ConfigError, InvalidInputError, NumericsError
from .losses import (ContrastDetails, LossBreakdown, boundary_loss, mean_entropy,
                     prototype_contrastive_loss, support_ce_loss, total_loss,
                     uncertainty_weight)
from .prototype import (IGNORE_INDEX, class_scores, generate_prototypes, pool_class_features,
                        predict_query, query_prototypes, split_class_features)

log = logging.getLogger(__name__)

STRATEGIES = ("cpc", "sup_ft", "trans_ft", "none")


@dataclass
class FineTuneConfig:
    lr: float = 1e-5
    momentum: float = 0.9
    iterations: int = 1000
    margin: float = 0.2
    lam: float = 0.5
    clusters: int = 5
    scale: float = 20.0
    bd_reduction: str = "mean"
    strategy: str = "cpc"
    seed: int = 0
    use_ce: bool = True
    use_pc: bool = True
    use_bd: bool = True
    entropy_weight: float = 1.0
    kmeans_iters: int = 30
    checkpoint_every: int = 100

    def __post_init__(self):
        self.strategy = self.strategy.replace("-", "_")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.margin < 0 or self.lam < 0:
            raise ConfigError("margin and lam must be >= 0")
        if self.clusters < 1 or self.kmeans_iters < 1 or self.checkpoint_every < 1:
            raise ConfigError("clusters, kmeans_iters and checkpoint_every must be >= 1")
        if not self.scale > 0:
            raise ConfigError("scale must be positive")
        if self.bd_reduction not in ("mean", "sum"):
            raise ConfigError(f"bd_reduction must be mean or sum, got {self.bd_reduction!r}")

    def replace(self, **changes) -> "FineTuneConfig":
        return FineTuneConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, values: dict) -> "FineTuneConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, types[key], key)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "FineTuneConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
        return cls.from_mapping(values)


def _coerce(raw, typ, key):
    if not isinstance(raw, str):
        return raw
    try:
        if typ in ("bool", bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
    return raw


# -- run log -------------------------------------------------------------------

@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, record: dict):
        self.records.append(record)

    def column(self, key) -> np.ndarray:
        return np.array([r[key] for r in self.records], dtype=float)

    def without_timing(self) -> list[dict]:
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "RunLog":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


# -- shared pieces -------------------------------------------------------------

def infer_num_classes(support: list[Sample], ignore_index: int = IGNORE_INDEX) -> int:
    top = 0
    for s in support:
        m = np.asarray(s.mask)
        valid = m[m != ignore_index]
        if valid.size:
            top = max(top, int(valid.max()))
    return max(top, 1)


def _image_of(q):
    return q.image if isinstance(q, Sample) else q


def _id_of(q, index):
    return q.id if isinstance(q, Sample) else str(index)


def _iteration_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(iteration)]).generate_state(1)[0])


def support_prototypes(support_fmaps, support_masks, n, config: FineTuneConfig, seed: int):
    per_shot = [split_class_features(f, m, n) for f, m in zip(support_fmaps, support_masks)]
    return generate_prototypes(pool_class_features(per_shot), config.clusters, config.lam,
                               seed, max_iters=config.kmeans_iters)


def support_ce(support_fmaps, support_masks, protos, n, config):
    """Cross-entropy over the valid pixels of all shots pooled."""
    probs = torch.cat([predict_query(f, protos, config.scale)[0].reshape(-1, n + 1)
                       for f in support_fmaps])
    masks = torch.cat([torch.as_tensor(np.asarray(m)).reshape(-1) for m in support_masks])
    return support_ce_loss(probs, masks, n)


def upsample_probs(fmap, protos, scale, size):
    """Class probabilities at ``size``: bilinear upsampling of the scaled scores, then softmax."""
    scores = class_scores(fmap, protos).permute(2, 0, 1)[None]
    up = F.interpolate(scores, size=tuple(size), mode="bilinear", align_corners=False)
    return torch.softmax(scale * up[0].permute(1, 2, 0), dim=-1)


def cpc_objective(support_fmaps, support_masks, query_fmap, n: int, config: FineTuneConfig,
                  seed: int = 0, w_un=None, query_size=None):
    """Composite CPC loss for one episode.

    Prototypes, support cross-entropy, uncertainty and contrast work at
    feature resolution (``support_masks`` must already be aligned with the
    feature grid).  The boundary term is measured on the query prediction at
    ``query_size`` (image resolution) when given, else on the feature grid.
    Passing ``w_un`` overrides the uncertainty weight (a constant either way).
    Returns ``(loss, breakdown, query_probs)``.
    """
    p = support_prototypes(support_fmaps, support_masks, n, config, seed)
    zero = query_fmap.new_zeros(())
    ce = support_ce(support_fmaps, support_masks, p, n, config) if config.use_ce else zero

    probs_q, pred_q = predict_query(query_fmap, p, config.scale)
    if w_un is None:
        w_un = uncertainty_weight(probs_q)
    details = ContrastDetails()
    if config.use_pc:
        q = query_prototypes(query_fmap, pred_q, config.clusters, config.lam,
                             seed=seed + 1, n=n)
        pc = prototype_contrastive_loss(p, q, config.margin, details)
    else:
        pc = zero
    if config.use_bd:
        probs_bd = probs_q if query_size is None else upsample_probs(query_fmap, p, config.scale,
                                                                      query_size)
        bd = boundary_loss(probs_bd[..., 1:].sum(-1), reduction=config.bd_reduction)
    else:
        bd = zero
    loss = total_loss(ce, pc, bd, w_un)
    breakdown = LossBreakdown(ce=float(ce.detach()), pc=float(pc.detach()), bd=float(bd.detach()),
                              w_un=float(w_un), total=float(loss.detach()), d_intra=details.d_intra, d_inter=details.d_inter)
    return loss, breakdown, probs_q


class _Loop:
    """Bookkeeping shared by all strategies: optimizer, logging, checkpoints."""

    def __init__(self, encoder, config: FineTuneConfig, checkpoint_dir=None, callback=None):
        self.callback = callback
        self.encoder = copy.deepcopy(encoder)
        self.config = config
        self.state = init_optimizer(self.encoder, config.lr, config.momentum)
        self.params = [p for _, p in self.encoder.named_parameters()]
        self.names = [n for n, _ in self.encoder.named_parameters()]
        self.log = RunLog()
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.last_good = copy.deepcopy(self.encoder.state_dict())
        self.t0 = time.perf_counter()

    def check_features(self, iteration: int, fmaps):
        """Abort on a non-finite forward pass before it reaches clustering."""
        if not all(torch.isfinite(f.detach()).all() for f in fmaps):
            self._abort(iteration, {"iteration": iteration, "strategy": self.config.strategy,
                                    "error": "non-finite features"})

    def step(self, iteration: int, loss: torch.Tensor, record: dict):
        record = {"iteration": iteration, "strategy": self.config.strategy, **record}
        values = [v for k, v in record.items() if isinstance(v, float)]
        if not math.isfinite(float(loss.detach())) or not all(math.isfinite(v) for v in values):
            self._abort(iteration, record)
        grads = torch.autograd.grad(loss, self.params, allow_unused=True)
        grads = {n: g for n, g in zip(self.names, grads) if g is not None}
        sgd_step(self.encoder, grads, self.state)
        record["wall_time"] = time.perf_counter() - self.t0
        self.log.append(record)
        self.last_good = copy.deepcopy(self.encoder.state_dict())
        if self.checkpoint_dir and (iteration + 1) % self.config.checkpoint_every == 0:
            self._save(f"iter_{iteration + 1:06d}.npz")
        if self.callback is not None:
            self.callback(iteration, self.encoder, record)

    def finish(self):
        if self.checkpoint_dir:
            self._save("final.npz")
        return self.encoder, self.log

    def _save(self, name):
        if isinstance(self.encoder, ToyEncoder):
            save_checkpoint(self.encoder, self.checkpoint_dir / name,
                            extra={"fine_tune": self.config.to_dict()})

    def _abort(self, iteration, record):
        self.encoder.load_state_dict(self.last_good)
        if self.checkpoint_dir:
            self._save("last_good.npz")
        raise NumericsError(f"non-finite values at iteration {iteration}: {record}",
                            last_good=self.last_good, record=record)


def _prepare_support(encoder, support: list[Sample]):
    if not support:
        raise InvalidInputError("support set is empty")
    images, masks = [], []
    for s in support:
        if s.mask is None:
            raise InvalidInputError(f"support sample {s.id!r} has no mask")
        h, w = feature_shape(encoder, *s.image.shape[:2])
        images.append(s.image)
        masks.append(downsample_mask(s.mask, (h, w)))
    return images, masks


def _mean(d: dict):
    return float(np.mean(list(d.values()))) if d else None


# -- strategies ----------------------------------------------------------------

def finetune_cpc(encoder, support: list[Sample], query_images, config: FineTuneConfig,
                 checkpoint_dir=None, callback=None):
    """CPC fine-tuning; returns ``(fine_tuned_copy, RunLog)``, the input encoder untouched.

    ``query_images`` may hold arrays or samples; only ``.image`` is read.
    """
    queries = list(query_images)
    if not queries:
        raise InvalidInputError("no query images")
    loop = _Loop(encoder, config, checkpoint_dir, callback)
    if config.iterations == 0:
        return loop.encoder, loop.log
    sup_images, sup_masks = _prepare_support(encoder, support)
    n = infer_num_classes(support)
    rng = np.random.default_rng(config.seed)
    for it in range(config.iterations):
        qi = int(rng.integers(len(queries)))
        f_s = [encode(loop.encoder, im) for im in sup_images]
        q_image = _image_of(queries[qi])
        f_q = encode(loop.encoder, q_image)
        loop.check_features(it, f_s + [f_q])
        loss, br, _ = cpc_objective(f_s, sup_masks, f_q, n, config,
                                    seed=_iteration_seed(config.seed, it),
                                    query_size=np.asarray(q_image).shape[:2])
        loop.step(it, loss, {
            "ce": br.ce, "pc": br.pc, "bd": br.bd, "w_un": br.w_un, "total": br.total,
            "d_intra": _mean(br.d_intra), "d_inter": _mean(br.d_inter),
            "query_id": _id_of(queries[qi], qi),
        })
    return loop.finish()


def support_pairs(k: int) -> list[tuple[int, int]]:
    """All ordered (pseudo-support, pseudo-query) index pairs, self-pairs included."""
    return [(i, j) for i in range(k) for j in range(k)]


def finetune_sup(encoder, support: list[Sample], config: FineTuneConfig, checkpoint_dir=None, callback=None):
    """Supervised episodic fine-tuning on the k^2 support pairs."""
    loop = _Loop(encoder, config, checkpoint_dir, callback)
    if config.iterations == 0:
        return loop.encoder, loop.log
    sup_images, sup_masks = _prepare_support(encoder, support)
    n = infer_num_classes(support)
    pairs = support_pairs(len(support))
    rng = np.random.default_rng(config.seed)
    for it in range(config.iterations):
        i, j = pairs[int(rng.integers(len(pairs)))]
        seed = _iteration_seed(config.seed, it)
        f_i = encode(loop.encoder, sup_images[i])
        f_j = f_i if i == j else encode(loop.encoder, sup_images[j])
        loop.check_features(it, [f_i, f_j])
        p = support_prototypes([f_i], [sup_masks[i]], n, config, seed)
        probs, _ = predict_query(f_j, p, config.scale)
        ce = support_ce_loss(probs, sup_masks[j], n)
        loop.step(it, ce, {
            "ce": float(ce.detach()), "pc": 0.0, "bd": 0.0, "w_un": float(uncertainty_weight(probs)),
            "total": float(ce.detach()), "d_intra": None, "d_inter": None,
            "query_id": support[j].id, "pair": [i, j],
        })
    return loop.finish()


def finetune_trans(encoder, support: list[Sample], query_images, config: FineTuneConfig,
                   checkpoint_dir=None, callback=None):
    """Support cross-entropy plus mean query prediction entropy."""
    queries = list(query_images)
    if not queries:
        raise InvalidInputError("no query images")
    loop = _Loop(encoder, config, checkpoint_dir, callback)
    if config.iterations == 0:
        return loop.encoder, loop.log
    sup_images, sup_masks = _prepare_support(encoder, support)
    n = infer_num_classes(support)
    rng = np.random.default_rng(config.seed)
    for it in range(config.iterations):
        qi = int(rng.integers(len(queries)))
        seed = _iteration_seed(config.seed, it)
        f_s = [encode(loop.encoder, im) for im in sup_images]
        f_q = encode(loop.encoder, _image_of(queries[qi]))
        loop.check_features(it, f_s + [f_q])
        p = support_prototypes(f_s, sup_masks, n, config, seed)
        ce = support_ce(f_s, sup_masks, p, n, config)
        probs_q, _ = predict_query(f_q, p, config.scale)
        ent = mean_entropy(probs_q)
        loss = ce + config.entropy_weight * ent
        loop.step(it, loss, {
            "ce": float(ce.detach()), "pc": 0.0, "bd": 0.0, "w_un": float(uncertainty_weight(probs_q)),
            "total": float(loss.detach()), "entropy": float(ent.detach()), "d_intra": None, "d_inter": None,
            "query_id": _id_of(queries[qi], qi),
        })
    return loop.finish()


def run_strategy(encoder, support: list[Sample], query_images, config: FineTuneConfig,
                 checkpoint_dir=None, callback=None):
    """Dispatch on ``config.strategy``; ``none`` returns an unchanged copy and an empty log."""
    if config.strategy == "cpc":
        return finetune_cpc(encoder, support, query_images, config, checkpoint_dir, callback)
    if config.strategy == "sup_ft":
        return finetune_sup(encoder, support, config, checkpoint_dir, callback)
    if config.strategy == "trans_ft":
        return finetune_trans(encoder, support, query_images, config, checkpoint_dir, callback)
    return copy.deepcopy(encoder), RunLog()
