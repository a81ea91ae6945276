"""Datasets, episodes and the seeded synthetic two-domain generator.

On-disk layout::

    root/images/<id>.png    RGB or grayscale image
    root/masks/<id>.png     8-bit label image, 0 = background, 255 = ignore
    root/manifest           optional, one id per line
    root/synth_config.json  written by the synthetic generator

Query masks handed out by :func:`make_episodes` are *withheld*: reading
``sample.mask`` raises :class:`MaskWithheldError` unless the read happens
inside :func:`released_masks`, which only evaluation code enters.
"""

from __future__ import annotations

import contextlib
import json
import math
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, DatasetError, InvalidInputError, MaskWithheldError
from .prototype import IGNORE_INDEX

# -- query-mask guard ----------------------------------------------------------

_guard = threading.local()
_trips = [0]


def guard_trips() -> int:
    """Number of attempted reads of withheld masks since import (or last reset)."""
    return _trips[0]


def reset_guard_trips():
    _trips[0] = 0


@contextlib.contextmanager
def released_masks():
    """Allow reading withheld masks (evaluation only)."""
    depth = getattr(_guard, "depth", 0)
    _guard.depth = depth + 1
    try:
        yield
    finally:
        _guard.depth = depth


@dataclass
class Sample:
    id: str
    image: np.ndarray                 # H x W x C float32 in [0, 1]
    _mask: np.ndarray | None = field(default=None, repr=False)
    image_path: Path | None = None
    mask_path: Path | None = None
    withheld: bool = False

    @property
    def mask(self) -> np.ndarray:
        if self.withheld and getattr(_guard, "depth", 0) == 0:
            _trips[0] += 1
            raise MaskWithheldError(f"mask of query sample {self.id!r} is withheld")
        return self._mask

    def withhold(self) -> "Sample":
        return replace(self, withheld=True)


@dataclass
class DatasetManifest:
    samples: list[Sample]
    n: int
    ignore_index: int = IGNORE_INDEX
    root: Path | None = None

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DatasetError("sample ids are not unique")

    def __len__(self):
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def by_id(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise DatasetError(f"unknown sample id {sample_id!r}")

    def subset(self, ids) -> "DatasetManifest":
        return replace(self, samples=[self.by_id(i) for i in ids])


@dataclass
class Episode:
    query: Sample
    support: list[Sample]

    def __post_init__(self):
        if not self.support:
            raise InvalidInputError("an episode needs at least one support sample")


# -- image I/O -----------------------------------------------------------------

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        a = np.asarray(im, dtype=np.float32) / 255.0
    return a[..., None] if a.ndim == 2 else a


def write_image(path, image: np.ndarray):
    a = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    Image.fromarray(a).save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise DatasetError(f"{path}: mask must be a single-channel 8-bit image, got {im.mode}")
        return np.array(im, dtype=np.uint8)


def write_mask(path, mask: np.ndarray):
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path)


def load_dataset(root, n: int | None = None, ignore_index: int = IGNORE_INDEX) -> DatasetManifest:
    """Load and validate ``root/images`` + ``root/masks`` pairs.

    ``n`` is inferred from the largest non-ignore label unless given.
    """
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DatasetError(f"{root}: expected images/ and masks/ subdirectories")
    manifest_file = root / "manifest"
    if manifest_file.exists():
        ids = [ln.strip() for ln in manifest_file.read_text().splitlines() if ln.strip()]
    else:
        ids = sorted(p.stem for p in img_dir.glob("*.png"))
    samples = []
    max_label = 0
    for sid in ids:
        ip, mp = img_dir / f"{sid}.png", mask_dir / f"{sid}.png"
        if not ip.exists():
            raise DatasetError(f"missing image for {sid!r}: {ip}")
        if not mp.exists():
            raise DatasetError(f"missing mask for {sid!r}: {mp}")
        image, mask = read_image(ip), read_mask(mp)
        if image.shape[:2] != mask.shape:
            raise DatasetError(f"{sid!r}: image {image.shape[:2]} and mask {mask.shape} differ in size")
        labels = mask[mask != ignore_index]
        top = int(labels.max()) if labels.size else 0
        if n is not None and top > n:
            raise DatasetError(f"{mp}: label {top} exceeds declared class count {n}")
        max_label = max(max_label, top)
        samples.append(Sample(sid, image, mask, ip, mp))
    if not samples:
        raise DatasetError(f"{root}: no samples found")
    return DatasetManifest(samples, n if n is not None else max(max_label, 1), ignore_index, root)


def write_dataset(manifest: DatasetManifest, root, extra_meta: dict | None = None):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with released_masks():
        for s in manifest.samples:
            write_image(root / "images" / f"{s.id}.png", s.image)
            write_mask(root / "masks" / f"{s.id}.png", s.mask)
    (root / "manifest").write_text("".join(f"{i}\n" for i in manifest.ids))
    if extra_meta is not None:
        (root / "synth_config.json").write_text(json.dumps(extra_meta, indent=2, sort_keys=True))


# -- geometry alignment ----------------------------------------------------------

def _as_hw(target) -> tuple[int, int]:
    if isinstance(target, int):
        return target, target
    return int(target[0]), int(target[1])


def resize_pair(image: np.ndarray, mask: np.ndarray, target=417):
    """Bilinear image / nearest-neighbour mask resize to ``target`` (int or (H, W))."""
    th, tw = _as_hw(target)
    if min(th, tw) < 16:
        raise InvalidInputError(f"target size must be >= 16, got {(th, tw)}")
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask)
    if image.shape[:2] == (th, tw):
        return image.copy(), mask.copy()
    x = torch.from_numpy(image if image.ndim == 3 else image[..., None]).permute(2, 0, 1)[None]
    x = F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=False)
    img2 = x[0].permute(1, 2, 0).numpy()
    rows = _nearest_index(mask.shape[0], th)
    cols = _nearest_index(mask.shape[1], tw)
    return img2, mask[np.ix_(rows, cols)]


def _nearest_index(src: int, dst: int) -> np.ndarray:
    """Source index whose cell contains each destination cell center."""
    idx = np.floor((np.arange(dst) + 0.5) * src / dst).astype(np.int64)
    return np.minimum(idx, src - 1)


def downsample_mask(mask: np.ndarray, feature_hw) -> np.ndarray:
    """Nearest-neighbour sample of ``mask`` at the centers of a ``feature_hw`` grid."""
    mask = np.asarray(mask)
    h, w = feature_hw
    return mask[np.ix_(_nearest_index(mask.shape[0], h), _nearest_index(mask.shape[1], w))]


# -- episodes --------------------------------------------------------------------

def make_episodes(manifest: DatasetManifest, support_ids) -> tuple[list[Sample], list[Sample]]:
    """Split into named supports and the remaining queries (masks withheld)."""
    support_ids = list(support_ids)
    known = set(manifest.ids)
    for sid in support_ids:
        if sid not in known:
            raise DatasetError(f"unknown support id {sid!r}")
    chosen = set(support_ids)
    support = [manifest.by_id(i) for i in support_ids]
    query = [s.withhold() for s in manifest.samples if s.id not in chosen]
    if not query:
        raise DatasetError("no query samples left after removing the support set")
    return support, query


def two_fold_split(manifest: DatasetManifest, seed: int = 0):
    if len(manifest) < 4:
        raise DatasetError(f"two-fold split needs >= 4 samples, got {len(manifest)}")
    order = np.random.default_rng(seed).permutation(len(manifest))
    half = (len(manifest) + 1) // 2
    ids = manifest.ids
    return (manifest.subset([ids[i] for i in order[:half]]),
            manifest.subset([ids[i] for i in order[half:]]))


# -- synthetic two-domain generator ------------------------------------------------

@dataclass
class DomainStyle:
    """Appearance of one synthetic domain (intensities in [0, 1])."""
    fg_mean: float = 0.75
    bg_mean: float = 0.25
    fg_std: float = 0.08
    bg_std: float = 0.08
    fg_texture_freq: float = 0.0      # stripe cycles per image width; 0 = none
    bg_texture_freq: float = 0.0
    texture_amp: float = 0.0
    texture_angle: float | None = None  # degrees; None draws a random angle per image
    shading_amp: float = 0.0          # smooth low-frequency illumination field
    brightness_jitter: float = 0.0    # per-image offset ~ U(-j, j)
    contrast_jitter: float = 0.0      # per-image gain ~ U(1 - j, 1 + j) around 0.5
    blur_sigma: float = 0.0
    invert: bool = False
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass
class SynthConfig:
    size: int = 64
    shapes_per_image: tuple[int, int] = (1, 3)
    shape_kinds: tuple[str, ...] = ("ellipse", "rectangle")
    radius_range: tuple[float, float] = (0.12, 0.3)    # fraction of image size
    fg_fraction_range: tuple[float, float] = (0.05, 0.6)
    n_a: int = 24
    n_b: int = 24
    channels: int = 3
    # A: intensity separates the classes, stripes are a nuisance on both.
    # B: equal mean intensity, smooth shading, only fixed-angle stripes mark the foreground.
    domain_a: DomainStyle = field(default_factory=lambda: DomainStyle(
        fg_texture_freq=12.0, bg_texture_freq=12.0, texture_amp=0.2))
    domain_b: DomainStyle = field(default_factory=lambda: DomainStyle(
        fg_mean=0.5, bg_mean=0.5, fg_std=0.1, bg_std=0.1, fg_texture_freq=12.0,
        texture_amp=0.25, texture_angle=30.0, shading_amp=0.3, blur_sigma=0.6))
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.domain_a, dict):
            self.domain_a = DomainStyle(**self.domain_a)
        if isinstance(self.domain_b, dict):
            self.domain_b = DomainStyle(**self.domain_b)
        if self.size < 32:
            raise ConfigError(f"size must be >= 32, got {self.size}")
        if min(self.n_a, self.n_b) < 2:
            raise ConfigError("need at least 2 samples per domain")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad shapes_per_image {self.shapes_per_image}")
        for kind in self.shape_kinds:
            if kind not in ("ellipse", "rectangle"):
                raise ConfigError(f"unknown shape kind {kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _draw_mask(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    s = cfg.size
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    lo, hi = cfg.fg_fraction_range
    while True:
        mask = np.zeros((s, s), dtype=bool)
        for _ in range(rng.integers(cfg.shapes_per_image[0], cfg.shapes_per_image[1] + 1)):
            kind = cfg.shape_kinds[rng.integers(len(cfg.shape_kinds))]
            ry, rx = rng.uniform(*cfg.radius_range, size=2) * s
            cy, cx = rng.uniform(0.15, 0.85, size=2) * s
            theta = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = dx * np.cos(theta) + dy * np.sin(theta)
            v = -dx * np.sin(theta) + dy * np.cos(theta)
            if kind == "ellipse":
                mask |= (u / rx) ** 2 + (v / ry) ** 2 <= 1
            else:
                mask |= (np.abs(u) <= rx) & (np.abs(v) <= ry)
        frac = mask.mean()
        if lo <= frac <= hi:
            return mask


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    radius = max(1, int(math.ceil(3 * sigma)))
    t = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()
    pad = np.pad(img, radius, mode="reflect")
    out = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, pad)
    return np.apply_along_axis(lambda c: np.convolve(c, k, mode="valid"), 0, out)


def _stripes(size, freq, angle, rng):
    if freq <= 0:
        return np.zeros((size, size))
    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = rng.uniform(0, np.pi) if angle is None else np.deg2rad(angle)
    phase = rng.uniform(0, 2 * np.pi)
    return np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)


def render(mask: np.ndarray, style: DomainStyle, channels: int, rng: np.random.Generator) -> np.ndarray:
    """Paint a binary mask in a domain's appearance; output quantized to 8-bit levels."""
    s = mask.shape[0]
    fg = mask.astype(bool)
    img = np.where(fg, style.fg_mean, style.bg_mean).astype(np.float64)
    img += style.texture_amp * np.where(
        fg, _stripes(s, style.fg_texture_freq, style.texture_angle, rng),
        _stripes(s, style.bg_texture_freq, style.texture_angle, rng))
    img += np.where(fg, style.fg_std, style.bg_std) * rng.standard_normal((s, s))
    if style.shading_amp > 0:
        field_ = _gaussian_blur(rng.standard_normal((s, s)), s / 6)
        img += style.shading_amp * field_ / np.abs(field_).max()
    img = _gaussian_blur(img, style.blur_sigma)
    if style.contrast_jitter > 0:
        img = 0.5 + (img - 0.5) * rng.uniform(1 - style.contrast_jitter, 1 + style.contrast_jitter)
    if style.brightness_jitter > 0:
        img += rng.uniform(-style.brightness_jitter, style.brightness_jitter)
    if style.invert:
        img = 1.0 - img
    img = img[..., None] * (np.asarray(style.tint)[:channels] if channels == 3 else 1.0)
    img = np.clip(img, 0.0, 1.0)
    return (np.rint(img * 255.0) / 255.0).astype(np.float32)


def generate_synthetic(cfg: SynthConfig) -> tuple[DatasetManifest, DatasetManifest]:
    """Two binary-segmentation domains sharing one shape-geometry distribution.

    Every sample draws from its own child seed, so results do not depend on
    generation order.
    """
    root = np.random.SeedSequence(cfg.seed)
    seq_a, seq_b = root.spawn(2)
    out = []
    for name, seq, count, style in (("a", seq_a, cfg.n_a, cfg.domain_a),
                                    ("b", seq_b, cfg.n_b, cfg.domain_b)):
        samples = []
        for i, child in enumerate(seq.spawn(count)):
            rng = np.random.default_rng(child)
            mask = _draw_mask(cfg, rng)
            image = render(mask, style, cfg.channels, rng)
            samples.append(Sample(f"{name}{i:03d}", image, mask.astype(np.uint8)))
        out.append(DatasetManifest(samples, n=1))
    return out[0], out[1]
