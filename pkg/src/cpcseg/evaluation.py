"""IoU metrics and the evaluation protocols (plain, two-fold seen/unseen,
support sweep, random-support study) plus per-pixel feature dumps."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, Sample, downsample_mask, make_episodes, released_masks, two_fold_split
from .encoder import encode, feature_shape
from .errors import InvalidInputError
from .finetune import FineTuneConfig, infer_num_classes, run_strategy, support_prototypes
from .prototype import IGNORE_INDEX, class_scores
from .supportsel import embedding_table, select_support


def iou(pred, gt, class_id: int, ignore_index: int = IGNORE_INDEX) -> float:
    """IoU of one class; 1.0 if absent from both, 0.0 if absent from exactly one."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    valid = gt != ignore_index
    p = (pred == class_id) & valid
    g = (gt == class_id) & valid
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


@dataclass
class EvalReport:
    per_image: dict[str, dict[int, float]]
    mean_iou: float
    strategy: str
    seed: int
    config: dict = field(default_factory=dict)
    timing: float = 0.0
    support_ids: list[str] = field(default_factory=list)
    predictions: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def image_iou(self, sample_id) -> float:
        return float(np.mean(list(self.per_image[sample_id].values())))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("predictions")
        d["per_image"] = {k: {str(c): v for c, v in row.items()} for k, row in self.per_image.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _mean_of_images(per_image) -> float:
    return float(np.mean([np.mean(list(row.values())) for row in per_image.values()]))


def predict_mask(encoder, protos, image, scale: float = 20.0) -> np.ndarray:
    """Full-resolution label map: class scores upsampled bilinearly, then argmax."""
    with torch.no_grad():
        scores = class_scores(encode(encoder, image), protos)
        H, W = np.asarray(image).shape[:2]
        up = F.interpolate(scores.permute(2, 0, 1)[None], size=(H, W), mode="bilinear",
                           align_corners=False)[0]
        return torch.softmax(scale * up, dim=0).argmax(dim=0).numpy().astype(np.uint8)


def evaluate(encoder, support: list[Sample], queries: list[Sample], config: FineTuneConfig,
             strategy: str | None = None, keep_predictions: bool = False) -> EvalReport:
    """Segment every query with prototypes built once from ``support``; encoder is not modified."""
    if not queries:
        raise InvalidInputError("empty query set")
    t0 = time.perf_counter()
    n = infer_num_classes(support)
    with torch.no_grad():
        fmaps = [encode(encoder, s.image) for s in support]
        masks = [downsample_mask(s.mask, feature_shape(encoder, *s.image.shape[:2])) for s in support]
        protos = support_prototypes(fmaps, masks, n, config, config.seed)
    per_image, preds = {}, {}
    with released_masks():
        for q in queries:
            pred = predict_mask(encoder, protos, q.image, config.scale)
            per_image[q.id] = {c: iou(pred, q.mask, c) for c in range(1, n + 1)}
            if keep_predictions:
                preds[q.id] = pred
    return EvalReport(per_image=per_image, mean_iou=_mean_of_images(per_image),
                      strategy=strategy or config.strategy, seed=config.seed,
                      config=config.to_dict(), timing=time.perf_counter() - t0,
                      support_ids=[s.id for s in support], predictions=preds)


def _merge(reports: list[EvalReport], strategy, config) -> EvalReport:
    per_image = {}
    for r in reports:
        per_image.update(r.per_image)
    return EvalReport(per_image=per_image, mean_iou=_mean_of_images(per_image), strategy=strategy,
                      seed=config.seed, config=config.to_dict(), timing=sum(r.timing for r in reports),
                      support_ids=[i for r in reports for i in r.support_ids])


@dataclass
class UnseenReport:
    seen: EvalReport
    unseen: EvalReport
    folds: list[dict]

    def to_dict(self):
        return {"seen": self.seen.to_dict(), "unseen": self.unseen.to_dict(), "folds": self.folds}


def eval_unseen(encoder0, dataset: DatasetManifest, config: FineTuneConfig, k: int = 1,
                select_encoder=None) -> UnseenReport:
    """Two-fold protocol: fine-tune on one half (seen), test on the other (unseen), swap."""
    fold1, fold2 = two_fold_split(dataset, config.seed)
    assert not set(fold1.ids) & set(fold2.ids)
    seen, unseen, folds = [], [], []
    for tune, held in ((fold1, fold2), (fold2, fold1)):
        table = embedding_table(select_encoder or encoder0, tune.samples)
        support_ids = select_support(table, k, config.seed)
        support, queries = make_episodes(tune, support_ids)
        tuned, _ = run_strategy(encoder0, support, queries, config)
        held_queries = [s.withhold() for s in held.samples]
        r_seen = evaluate(tuned, support, queries, config)
        r_unseen = evaluate(tuned, support, held_queries, config)
        seen.append(r_seen)
        unseen.append(r_unseen)
        folds.append({"support": support_ids, "tune_ids": tune.ids, "held_ids": held.ids,
                      "seen": r_seen.mean_iou, "unseen": r_unseen.mean_iou})
    return UnseenReport(_merge(seen, config.strategy, config),
                        _merge(unseen, config.strategy, config), folds)


@dataclass
class SweepReport:
    per_candidate: dict[str, float]
    min: float
    max: float
    avg: float
    rep_id: str
    rep: float

    def to_dict(self):
        return asdict(self)


def sweep_support(encoder, dataset: DatasetManifest, config: FineTuneConfig,
                  select_encoder=None) -> SweepReport:
    """Every image in turn as the 1-shot support, scored on all others without fine-tuning."""
    if len(dataset) < 3:
        raise InvalidInputError("support sweep needs >= 3 images")
    per_candidate = {}
    for sid in dataset.ids:
        support, queries = make_episodes(dataset, [sid])
        per_candidate[sid] = evaluate(encoder, support, queries, config, strategy="none").mean_iou
    table = embedding_table(select_encoder or encoder, dataset.samples)
    rep_id = select_support(table, 1, config.seed)[0]
    vals = list(per_candidate.values())
    return SweepReport(per_candidate=per_candidate, min=float(min(vals)), max=float(max(vals)),
                       avg=float(np.mean(vals)), rep_id=rep_id, rep=per_candidate[rep_id])


def random_support_study(encoder, dataset: DatasetManifest, k: int, seeds, config: FineTuneConfig,
                         select_encoder=None) -> list[dict]:
    """One row per seed with ``k`` random supports, then a cluster-center row."""
    if len(dataset) <= k:
        raise InvalidInputError(f"pool of {len(dataset)} images too small for k={k}")
    ids = sorted(dataset.ids)
    rows = []
    plans = [(int(s), [ids[i] for i in np.random.default_rng(int(s)).choice(len(ids), k, replace=False)])
             for s in seeds]
    table = embedding_table(select_encoder or encoder, dataset.samples)
    plans.append(("cluster centers", select_support(table, k, config.seed)))
    for label, support_ids in plans:
        support, queries = make_episodes(dataset, support_ids)
        tuned, _ = run_strategy(encoder, support, queries, config)
        rep = evaluate(tuned, support, queries, config)
        rows.append({"seed": label, "support": support_ids, "mean_iou": rep.mean_iou})
    return rows


def dump_features(encoder, images, masks, path, ids=None, ignore_index: int = IGNORE_INDEX):
    """Write every feature-map pixel with an fg/bg label to ``path`` (``.npz``).

    Labels come from the mask sampled at feature resolution; any label in
    ``1..255`` except ``ignore_index`` is ``fg``, everything else ``bg``.
    """
    feats, labels, owners, pos = [], [], [], []
    ids = ids or [str(i) for i in range(len(images))]
    with torch.no_grad():
        for sid, image, mask in zip(ids, images, masks):
            f = encode(encoder, image)
            h, w, d = f.shape
            m = downsample_mask(mask, (h, w)).reshape(-1)
            feats.append(f.reshape(-1, d).cpu().numpy().astype(np.float32))
            labels.append(np.where((m != 0) & (m != ignore_index), "fg", "bg"))
            owners.append(np.full(h * w, sid))
            yy, xx = np.mgrid[0:h, 0:w]
            pos.append(np.stack([yy.ravel(), xx.ravel()], 1))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, features=np.concatenate(feats), labels=np.concatenate(labels),
                 image_ids=np.concatenate(owners), positions=np.concatenate(pos))
    return path


def load_features(path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        return {k: data[k] for k in data.files}
