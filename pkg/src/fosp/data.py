"""Dataset layout ``<root>/<split>/{images,masks}/<id>.png``, paired augmentation and batching."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import metrics, pngio

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Entry:
    id: str
    image: Path
    mask: Path
    delta: float
    bucket: str
    background: Path | None = None


@dataclass
class DatasetIndex:
    root: Path
    split: str
    entries: list[Entry]

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> Entry:
        return self.entries[i]

    @property
    def deltas(self) -> np.ndarray:
        return np.array([e.delta for e in self.entries])

    def to_records(self) -> list[dict]:
        return [
            {"id": e.id, "image": str(e.image.relative_to(self.root)), "mask": str(e.mask.relative_to(self.root)),
             "delta": e.delta, "bucket": e.bucket}
            for e in self.entries
        ]


def index_dataset(root: str | Path, split: str = "train") -> DatasetIndex:
    """Validate image/mask pairs and compute each smoke ratio; entries sorted by id."""
    root = Path(root)
    base = root / split
    img_dir, mask_dir, bg_dir = base / "images", base / "masks", base / "backgrounds"
    images = {p.stem: p for p in img_dir.glob("*.png")} if img_dir.is_dir() else {}
    masks = {p.stem: p for p in mask_dir.glob("*.png")} if mask_dir.is_dir() else {}
    if not images and not masks:
        warnings.warn(f"no samples found under {base}", stacklevel=2)
        return DatasetIndex(root, split, [])
    for sid in sorted(set(images) ^ set(masks)):
        kind = "image" if sid in images else "mask"
        raise DatasetError(f"orphan {kind} for id {sid!r}")
    entries = []
    for sid in sorted(images):
        try:
            with Image.open(images[sid]) as im:
                isize = im.size
            mask = pngio.read_mask(masks[sid])
        except OSError as exc:
            raise DatasetError(f"unreadable file for id {sid!r}: {exc}") from exc
        if (mask.shape[1], mask.shape[0]) != isize:
            raise DatasetError(f"id {sid!r}: image {isize[::-1]} and mask {mask.shape} differ in size")
        delta = metrics.smoke_ratio(mask)
        bg = bg_dir / f"{sid}.png"
        entries.append(Entry(sid, images[sid], masks[sid], delta, metrics.split_bucket(delta), bg if bg.exists() else None))
    return DatasetIndex(root, split, entries)


def write_index_cache(index: DatasetIndex) -> Path:
    path = index.root / index.split / "index.cache.jsonl"
    pngio.write_jsonl(path, index.to_records())
    return path


@dataclass(frozen=True)
class AugmentationConfig:
    target_size: int = 512
    crop: bool = True
    crop_min_scale: float = 0.75
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.target_size % 32:
            raise ValueError(f"target_size must be divisible by 32, got {self.target_size}")


@dataclass(frozen=True)
class Transform:
    top: int
    left: int
    height: int
    width: int
    flip: bool


def sample_transform(rng: np.random.Generator, h: int, w: int, aug: AugmentationConfig) -> Transform:
    """Crop box then flip; always four uniform draws, so ``rng`` consumption is fixed per sample."""
    u_scale, u_pos = rng.random(), rng.random(2)
    flip = bool(rng.random() < aug.flip_prob)
    if not aug.crop:
        return Transform(0, 0, h, w, flip)
    scale = aug.crop_min_scale + (1 - aug.crop_min_scale) * u_scale
    ch, cw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    top = int(u_pos[0] * (h - ch + 1))
    left = int(u_pos[1] * (w - cw + 1))
    return Transform(top, left, ch, cw, flip)


def apply_transform(array: np.ndarray, t: Transform, size: int, nearest: bool) -> np.ndarray:
    out = array[t.top : t.top + t.height, t.left : t.left + t.width]
    if out.shape[:2] != (size, size):
        out = _resize(out, size, nearest)
    if t.flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def _resize(array: np.ndarray, size: int, nearest: bool) -> np.ndarray:
    if nearest:
        h, w = array.shape[:2]
        rows = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(int)
        cols = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(int)
        return array[rows][:, cols]
    chans = [array[..., c] for c in range(array.shape[2])] if array.ndim == 3 else [array]
    resized = [
        np.asarray(Image.fromarray(c.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR))
        for c in chans
    ]
    return np.stack(resized, axis=-1) if array.ndim == 3 else resized[0]


def load_sample(entry: Entry) -> tuple[np.ndarray, np.ndarray]:
    return pngio.read_rgb(entry.image), pngio.read_mask(entry.mask)


def load_batch(
    index: DatasetIndex,
    ids: list[int],
    aug: AugmentationConfig | None,
    rng: np.random.Generator | int | None = None,
    cache: dict | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Images N x 3 x S x S in [0, 1] and masks N x 1 x S x S in {0, 1}.

    ``aug=None`` passes samples through untouched (they must already share one size).
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    images, masks = [], []
    for i in ids:
        if not 0 <= i < len(index):
            raise IndexError(f"sample {i} outside index of {len(index)}")
        if cache is not None and i in cache:
            img, mask = cache[i]
        else:
            img, mask = load_sample(index[i])
            if cache is not None:
                cache[i] = (img, mask)
        if aug is not None:
            t = sample_transform(rng, *mask.shape, aug)
            if aug.crop or mask.shape != (aug.target_size, aug.target_size) or t.flip:
                img = apply_transform(img, t, aug.target_size, nearest=False)
                mask = apply_transform(mask, t, aug.target_size, nearest=True)
        images.append(img)
        masks.append(mask)
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous().float()
    y = torch.from_numpy(np.stack(masks)[:, None].astype(np.float32))
    return x, y


def load_all(index: DatasetIndex, with_backgrounds: bool = False):
    """Every sample of a split at native size, plus backgrounds when requested."""
    x, y = load_batch(index, list(range(len(index))), None)
    if not with_backgrounds:
        return x, y
    missing = [e.id for e in index.entries if e.background is None]
    if missing:
        raise DatasetError(f"no background image for id {missing[0]!r}; inpainter training needs composited data")
    b = np.stack([pngio.read_rgb(e.background) for e in index.entries])
    return x, y, torch.from_numpy(b).permute(0, 3, 1, 2).contiguous().float()


def histogram_edges(bins: int = 20, max_delta: float = 0.2) -> np.ndarray:
    """Uniform bins over [0, max_delta] with the bucket thresholds spliced in, plus a tail bin to 1."""
    edges = np.linspace(0.0, max_delta, bins + 1)
    edges = np.union1d(edges, [metrics.SMALL_MAX, metrics.MEDIUM_MAX, 1.0])
    return edges


def delta_histogram(index: DatasetIndex | np.ndarray, bins: int = 20, max_delta: float = 0.2):
    deltas = index.deltas if isinstance(index, DatasetIndex) else np.asarray(index, dtype=np.float64)
    if deltas.size == 0:
        raise DatasetError("cannot histogram an empty index")
    edges = histogram_edges(bins, max_delta)
    counts, _ = np.histogram(deltas, bins=edges)
    return counts, edges
