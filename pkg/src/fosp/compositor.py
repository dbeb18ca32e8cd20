"""Synthetic smoke: ``I = (1 - alpha) * B + alpha * S`` with procedural plumes and backgrounds."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import metrics, pngio
from .noise import fbm

log = logging.getLogger(__name__)

SPLIT_CODES = {"train": 1, "test": 2}


class SingularAlphaError(ValueError):
    pass


class QuotaError(RuntimeError):
    pass


@dataclass
class PlumeConfig:
    height: int = 128
    width: int = 128
    plumes: int = 1
    opacity: tuple[float, float] = (0.35, 0.8)
    size_range: tuple[float, float] = (1.0, 30.0)  # envelope sigma along the major axis, pixels
    aspect_range: tuple[float, float] = (1.3, 2.5)
    noise_cells: int = 2
    gradient_cap: float = 0.35


@dataclass
class DatasetConfig:
    height: int = 128
    width: int = 128
    quotas: tuple[float, float, float] = (0.6, 0.3, 0.1)
    opacity: tuple[float, float] = (0.35, 0.8)
    # per-bucket plume sigma ranges (pixels at 128 x 128) used to aim at the requested smoke ratio
    bucket_sizes: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {
            metrics.SMALL: (1.0, 2.6),
            metrics.MEDIUM: (2.6, 6.0),
            metrics.LARGE: (6.0, 22.0),
        }
    )
    mask_threshold: float = 0.02
    background_dir: str | None = None
    retries: int = 60


@dataclass
class AlphaMap:
    values: np.ndarray  # HxWx3 in [0, 1]
    seed: int
    sigma: float
    opacity: float

    def max_gradient(self) -> float:
        gy, gx = np.gradient(self.values, axis=(0, 1))
        return float(np.sqrt(gy**2 + gx**2).max())


@dataclass
class SyntheticSample:
    image: np.ndarray
    background: np.ndarray
    smoke: np.ndarray
    alpha: np.ndarray
    mask: np.ndarray
    delta: float

    @property
    def bucket(self) -> str:
        return metrics.split_bucket(self.delta)


def compose(b: np.ndarray, s: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    b, s, alpha = (np.asarray(x, dtype=np.float64) for x in (b, s, alpha))
    if not (b.shape == s.shape == alpha.shape):
        raise ValueError(f"shape mismatch: B {b.shape}, S {s.shape}, alpha {alpha.shape}")
    return (1.0 - alpha) * b + alpha * s


def decompose_background(i: np.ndarray, s: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    i, s, alpha = (np.asarray(x, dtype=np.float64) for x in (i, s, alpha))
    if not (i.shape == s.shape == alpha.shape):
        raise ValueError(f"shape mismatch: I {i.shape}, S {s.shape}, alpha {alpha.shape}")
    opaque = np.count_nonzero(alpha >= 1.0)
    if opaque:
        raise SingularAlphaError(f"alpha reaches 1 at {opaque} element(s); background is unrecoverable there")
    return (i - alpha * s) / (1.0 - alpha)


def mask_from_alpha(alpha: np.ndarray, threshold: float = 0.02) -> np.ndarray:
    return (np.asarray(alpha).mean(axis=-1) > threshold).astype(np.uint8)


def generate_plume(seed: int, config: PlumeConfig | None = None) -> AlphaMap:
    """Fractal noise under an anisotropic Gaussian envelope, one or more plumes, capped opacity."""
    config = config or PlumeConfig()
    lo, hi = config.opacity
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError(f"opacity must lie in (0, 1], got {config.opacity}")
    rng = np.random.default_rng(seed)
    h, w = config.height, config.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    density = np.zeros((h, w))
    sigma = float(rng.uniform(*config.size_range))
    for _ in range(config.plumes):
        major = sigma
        minor = major / rng.uniform(*config.aspect_range)
        theta = rng.uniform(0, np.pi)
        margin = min(2 * major, min(h, w) / 2 - 1)
        cy = rng.uniform(margin, h - margin)
        cx = rng.uniform(margin, w - margin)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        envelope = np.exp(-0.5 * ((u / major) ** 2 + (v / minor) ** 2))
        density = np.maximum(density, envelope)
    texture = 0.55 + 0.45 * fbm((h, w), rng, base_cells=config.noise_cells, octaves=4)
    opacity = float(rng.uniform(lo, hi))
    base = density * texture
    base = opacity * base / max(base.max(), 1e-12)
    tint = rng.uniform(0.9, 1.0, size=3)
    values = np.clip(base[..., None] * tint[None, None, :], 0.0, hi)
    values = ndimage.gaussian_filter(values, sigma=(0.7, 0.7, 0))
    alpha = AlphaMap(values=values, seed=seed, sigma=sigma, opacity=opacity)
    while alpha.max_gradient() > config.gradient_cap:
        alpha.values = ndimage.gaussian_filter(alpha.values, sigma=(0.7, 0.7, 0))
    return alpha


def smoke_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    grey = 0.85 + 0.15 * fbm((h, w), rng, base_cells=2, octaves=2)
    tint = rng.uniform(0.97, 1.0, size=3)
    return np.clip(grey[..., None] * tint, 0.0, 1.0)


def procedural_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Sky gradient above a textured terrain band, random palette."""
    horizon = rng.uniform(0.25, 0.7) * h
    ridge = horizon + (fbm((1, w), rng, base_cells=3, octaves=3)[0] - 0.5) * 0.3 * h
    sky_top = rng.uniform([0.25, 0.35, 0.5], [0.65, 0.75, 0.95])
    sky_bottom = np.clip(sky_top + rng.uniform(0.0, 0.25, 3), 0, 0.95)
    ground = rng.uniform([0.1, 0.12, 0.05], [0.5, 0.5, 0.4])
    t = (np.arange(h) / max(h - 1, 1))[:, None, None]
    sky = sky_top * (1 - t) + sky_bottom * t
    sky = np.broadcast_to(sky, (h, w, 3))
    tex = fbm((h, w), rng, base_cells=4, octaves=5)[..., None]
    terrain = np.clip(ground * (0.6 + 0.8 * tex), 0, 1)
    below = (np.arange(h)[:, None] >= ridge[None, :])[..., None]
    return np.where(below, terrain, sky)


def _folder_background(paths: list[Path], rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    from PIL import Image

    path = paths[int(rng.integers(len(paths)))]
    with Image.open(path) as img:
        img = img.convert("RGB").resize((w, h), Image.BILINEAR)
        return np.asarray(img, dtype=np.float64) / 255.0


def sample_seed(seed: int, split: str, index: int) -> int:
    # index -1 names the split-level shuffle stream
    ss = np.random.SeedSequence([seed, SPLIT_CODES.get(split, 0), index + 1])
    return int(ss.generate_state(1)[0])


def make_sample(
    seed: int,
    config: DatasetConfig | None = None,
    bucket: str | None = None,
    backgrounds: list[Path] | None = None,
) -> tuple[SyntheticSample, dict]:
    """One composited sample; when ``bucket`` is given, resample plumes until the smoke ratio lands in it."""
    config = config or DatasetConfig()
    h, w = config.height, config.width
    rng = np.random.default_rng(seed)
    if backgrounds:
        b = _folder_background(backgrounds, rng, h, w)
    else:
        b = procedural_background(rng, h, w)
    s = smoke_texture(rng, h, w)
    sizes = config.bucket_sizes[bucket] if bucket else (1.0, 22.0)
    # ranges are tuned at 128 x 128; smoke ratio is scale-free when sigma tracks the side length
    scale = float(np.sqrt(h * w)) / 128.0
    sizes = (sizes[0] * scale, sizes[1] * scale)
    for attempt in range(config.retries):
        plume_seed = int(rng.integers(2**31))
        alpha = generate_plume(
            plume_seed,
            PlumeConfig(height=h, width=w, opacity=config.opacity, size_range=sizes),
        )
        mask = mask_from_alpha(alpha.values, config.mask_threshold)
        delta = metrics.smoke_ratio(mask)
        if delta > 0 and (bucket is None or metrics.split_bucket(delta) == bucket):
            image = compose(b, s, alpha.values)
            sample = SyntheticSample(image, b, s, alpha.values, mask, delta)
            meta = {
                "seed": seed,
                "plume_seed": plume_seed,
                "delta": delta,
                "bucket": metrics.split_bucket(delta),
                "opacity_cap": config.opacity[1],
                "opacity": alpha.opacity,
                "attempts": attempt + 1,
            }
            return sample, meta
    raise QuotaError(f"could not hit bucket {bucket!r} for seed {seed} within {config.retries} attempts")


def quota_counts(n: int, quotas: tuple[float, float, float]) -> dict[str, int]:
    q = np.asarray(quotas, dtype=np.float64)
    if len(q) != 3 or (q < 0).any() or q.sum() <= 0:
        raise ValueError(f"quotas must be three non-negative fractions, got {quotas}")
    q = q / q.sum()
    raw = q * n
    counts = np.floor(raw).astype(int)
    # hand leftovers to the largest remainders, ties to the earlier bucket
    order = sorted(range(3), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[: n - counts.sum()]:
        counts[k] += 1
    return dict(zip(metrics.BUCKETS, (int(c) for c in counts)))


def build_dataset(
    root: str | Path,
    n: int,
    seed: int = 0,
    split: str = "train",
    config: DatasetConfig | None = None,
) -> Path:
    """Write ``n`` samples under ``<root>/<split>/{images,masks,backgrounds}`` plus ``index.jsonl``."""
    if n <= 0:
        raise ValueError(f"sample count must be positive, got {n}")
    config = config or DatasetConfig()
    out = Path(root) / split
    counts = quota_counts(n, config.quotas)
    plan = [b for b in metrics.BUCKETS for _ in range(counts[b])]
    np.random.default_rng(sample_seed(seed, split, -1)).shuffle(plan)
    backgrounds = None
    if config.background_dir:
        backgrounds = sorted(Path(config.background_dir).glob("*.png")) + sorted(
            Path(config.background_dir).glob("*.jpg")
        )
        if not backgrounds:
            raise FileNotFoundError(f"no .png/.jpg backgrounds in {config.background_dir}")
    records = []
    width = max(5, len(str(n)))
    for i, bucket in enumerate(plan):
        sid = f"{i:0{width}d}"
        sample, meta = make_sample(sample_seed(seed, split, i), config, bucket, backgrounds)
        pngio.write_png(out / "images" / f"{sid}.png", sample.image)
        pngio.write_mask(out / "masks" / f"{sid}.png", sample.mask)
        pngio.write_png(out / "backgrounds" / f"{sid}.png", sample.background)
        records.append({"id": sid, "split": split, **meta})
    pngio.write_jsonl(out / "index.jsonl", records)
    log.info("wrote %d samples to %s (%s)", n, out, counts)
    return out
