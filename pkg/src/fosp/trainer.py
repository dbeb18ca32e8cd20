"""Training loop, checkpoints, evaluation and the ablation runner.

Randomness comes from one seed split by ``numpy.random.SeedSequence(seed).spawn(3)``:
stream 0 seeds torch for parameter init, stream 1 drives inpainter pretraining,
stream 2 draws batches (sample ids first, then each sample's crop and flip, in batch order).
"""

from __future__ import annotations

import copy
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .config import TrainConfig, from_dict
from .data import AugmentationConfig, DatasetIndex, index_dataset, load_all, load_batch
from .losses import LossWeights, focus_terms, bce
from .model import ABLATION_ROWS, FoSp
from .runtime import tune_allocator
from .separation import train_inpainter

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


def loss_weights(cfg: TrainConfig) -> LossWeights:
    return LossWeights(cfg.loss.lambda_fm, tuple(cfg.loss.lambda_logits), cfg.loss.lambda_base)


def seed_streams(seed: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(3)]


def build_model(cfg: TrainConfig) -> FoSp:
    init_seed = seed_streams(cfg.seed)[0]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        model = FoSp(cfg.model, cfg.ablation)
    model.set_inpainter_trainable(cfg.inpainter.mode == "finetune")
    return model


def compute_loss(model: FoSp, out, gt, cfg: TrainConfig) -> tuple[torch.Tensor, dict[str, float]]:
    w = loss_weights(cfg)
    terms = {"base": w.base * bce(out.prob, gt)}
    if cfg.ablation.focus_loss and out.fm is not None:
        terms.update(focus_terms(out.fm, out.side_logits, gt, w))
    total = sum(terms.values())
    return total, {k: float(v.detach()) for k, v in terms.items()}


@dataclass
class Checkpoint:
    config: TrainConfig
    model_state: dict
    optimizer_state: dict | None = None
    iteration: int = 0
    metrics: dict = field(default_factory=dict)
    inpainter_losses: list[float] = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return self.config.hash()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "config_hash": self.config_hash,
            "iteration": self.iteration,
            "model": self.model_state,
            "optimizer": self.optimizer_state,
            "metrics": self.metrics,
            "inpainter_losses": self.inpainter_losses,
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        version = payload.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {version!r}")
        return cls(
            config=from_dict(payload["config"]),
            model_state=payload["model"],
            optimizer_state=payload.get("optimizer"),
            iteration=payload.get("iteration", 0),
            metrics=payload.get("metrics", {}),
            inpainter_losses=payload.get("inpainter_losses", []),
        )

    def build(self) -> FoSp:
        model = build_model(self.config)
        model.load_state_dict(self.model_state)
        model.eval()
        return model


def _state(model: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def pretrain_inpainter(model: FoSp, cfg: TrainConfig, seed: int) -> list[float]:
    if cfg.inpainter.checkpoint:
        state = torch.load(cfg.inpainter.checkpoint, map_location="cpu", weights_only=True)
        model.inpainter.load_state_dict(state)
        return []
    index = index_dataset(cfg.data.root, "train")
    if len(index) == 0:
        raise ValueError(f"no training data under {cfg.data.root} for inpainter pretraining")
    sub = DatasetIndex(index.root, index.split, index.entries[: cfg.inpainter.train_images])
    images, masks, backgrounds = load_all(sub, with_backgrounds=True)
    model.set_inpainter_trainable(True)
    result = train_inpainter(
        model.inpainter,
        images,
        backgrounds,
        masks,
        steps=cfg.inpainter.steps,
        batch_size=cfg.inpainter.batch_size,
        learning_rate=cfg.inpainter.learning_rate,
        seed=seed,
    )
    model.set_inpainter_trainable(cfg.inpainter.mode == "finetune")
    return result.losses


def train(
    cfg: TrainConfig,
    index: DatasetIndex | None = None,
    out_dir: str | Path | None = None,
    model: FoSp | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Optimise the total loss with AdamW for ``cfg.iterations`` steps.

    Returns the final checkpoint and the per-step log records. With ``out_dir`` the log is
    written to ``train_log.jsonl`` and checkpoints to ``checkpoint.pt`` every
    ``checkpoint_every`` steps; a non-finite loss raises and leaves the last good file.
    """
    cfg.validate()
    tune_allocator()
    index = index if index is not None else index_dataset(cfg.data.root, "train")
    if len(index) == 0:
        raise ValueError("training set is empty")
    _, inpaint_seed, batch_seed = seed_streams(cfg.seed)
    model = model or build_model(cfg)
    inpainter_losses: list[float] = []
    if model.inpainter is not None and cfg.iterations > 0:
        inpainter_losses = pretrain_inpainter(model, cfg, inpaint_seed)
    out_dir = Path(out_dir) if out_dir else None
    log_fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w")

    params = model.trainable_parameters()
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    aug = AugmentationConfig(cfg.data.image_size, cfg.data.crop, cfg.data.crop_min_scale, cfg.data.flip_prob)
    rng = np.random.default_rng(batch_seed)
    synth = _synthetic_index(cfg)
    cache: dict = {}
    synth_cache: dict = {}
    records: list[dict] = []
    ckpt = Checkpoint(cfg, _state(model), opt.state_dict(), 0, inpainter_losses=inpainter_losses)
    model.train()
    t0 = time.time()
    try:
        for step in range(1, cfg.iterations + 1):
            x, y = _next_batch(index, synth, cfg, aug, rng, cache, synth_cache)
            out = model(x)
            loss, terms = compute_loss(model, out, y, cfg)
            if not torch.isfinite(loss):
                if out_dir:
                    ckpt.save(out_dir / "checkpoint.pt")
                raise TrainingDiverged(f"non-finite loss at step {step}; last good checkpoint at iteration {ckpt.iteration}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            rec = {"step": step, "total": float(loss.detach()), **terms}
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d loss %.5f (%.1fs)", step, rec["total"], time.time() - t0)
            if out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                ckpt = Checkpoint(cfg, _state(model), copy.deepcopy(opt.state_dict()), step, inpainter_losses=inpainter_losses)
                ckpt.save(out_dir / "checkpoint.pt")
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    ckpt = Checkpoint(cfg, _state(model), opt.state_dict(), cfg.iterations, inpainter_losses=inpainter_losses)
    if records:
        ckpt.metrics = {"final_loss": records[-1]["total"], "initial_loss": records[0]["total"]}
    if out_dir:
        ckpt.save(out_dir / "checkpoint.pt")
    return ckpt, records


def _synthetic_index(cfg: TrainConfig) -> DatasetIndex | None:
    if cfg.data.synthetic_fraction <= 0 or not cfg.data.synthetic_root:
        return None
    return index_dataset(cfg.data.synthetic_root, "train")


def _next_batch(index, synth, cfg, aug, rng, cache, synth_cache):
    n_synth = 0
    if synth is not None and len(synth):
        n_synth = int(rng.binomial(cfg.batch_size, cfg.data.synthetic_fraction))
    n_real = cfg.batch_size - n_synth
    ids = rng.choice(len(index), size=n_real, replace=len(index) < n_real).tolist()
    x, y = load_batch(index, ids, aug, rng, cache)
    if n_synth:
        sids = rng.choice(len(synth), size=n_synth, replace=len(synth) < n_synth).tolist()
        xs, ys = load_batch(synth, sids, aug, rng, synth_cache)
        x, y = torch.cat([x, xs]), torch.cat([y, ys])
    return x, y


@torch.no_grad()
def predict(model: FoSp, images: torch.Tensor, batch_size: int = 8):
    """Probabilities and Focus Maps (None when the model has no cascade) for a stack of images."""
    model.eval()
    probs, fms = [], []
    for i in range(0, images.shape[0], batch_size):
        out = model(images[i : i + batch_size])
        probs.append(out.prob)
        if out.fm is not None:
            fms.append(out.fm)
    return torch.cat(probs), (torch.cat(fms) if fms else None)


def evaluate_model(model: FoSp, index: DatasetIndex, cfg: TrainConfig) -> metrics.MetricsReport:
    images, masks = load_all(index)
    probs, _ = predict(model, images)
    return evaluate_predictions(index, probs.numpy()[:, 0], masks.numpy()[:, 0], cfg)


def evaluate_predictions(index: DatasetIndex, probs, masks, cfg: TrainConfig) -> metrics.MetricsReport:
    if len(probs) != len(index):
        raise ValueError(f"{len(probs)} predictions for {len(index)} samples")
    triples = ((p, m, e.delta) for p, m, e in zip(probs, masks, index.entries))
    return metrics.evaluate(triples, cfg.eval.beta_sq, cfg.eval.m_definition, cfg.eval.threshold)


def evaluate_checkpoint(
    ckpt: Checkpoint | str | Path,
    index: DatasetIndex,
    cfg: TrainConfig | None = None,
) -> metrics.MetricsReport:
    if not isinstance(ckpt, Checkpoint):
        ckpt = Checkpoint.load(ckpt)
    if cfg is not None and cfg.hash() != ckpt.config_hash:
        warnings.warn(f"config hash {cfg.hash()} differs from checkpoint's {ckpt.config_hash}", stacklevel=2)
    eval_cfg = copy.deepcopy(ckpt.config)
    if cfg is not None:
        eval_cfg.eval = cfg.eval
    return evaluate_model(ckpt.build(), index, eval_cfg)


@torch.no_grad()
def focus_map_recall(model: FoSp, index: DatasetIndex, thresholds=(0.15, 0.6, 0.7, 0.8, 0.9)) -> dict[float, float]:
    """Mean per-image recall of the Focus Map, upsampled to image size and binarised at each threshold."""
    images, masks = load_all(index)
    _, fms = predict(model, images)
    if fms is None:
        raise ValueError("model has no Focus Map")
    up = torch.nn.functional.interpolate(fms, size=images.shape[-2:], mode="bilinear", align_corners=False)
    out = {}
    for t in thresholds:
        scores = [metrics.recall(metrics.confusion((u[0] > t).numpy(), m[0].numpy().astype(bool))) for u, m in zip(up, masks)]
        out[t] = float(sum(scores) / len(scores))
    return out


ABLATION_COLUMNS = ("recall", "precision", "fbeta")


def run_ablation(
    rows: list[str],
    cfg: TrainConfig,
    train_index: DatasetIndex,
    test_index: DatasetIndex,
    out_dir: str | Path | None = None,
) -> dict[str, metrics.MetricsReport]:
    """Train and evaluate each requested row with the same seed and base config."""
    reports = {}
    for row in rows:
        if row not in ABLATION_ROWS:
            raise ValueError(f"unknown ablation row {row!r}; choose from {', '.join(ABLATION_ROWS)}")
        row_cfg = copy.deepcopy(cfg)
        row_cfg.ablation = copy.deepcopy(ABLATION_ROWS[row])
        row_dir = Path(out_dir) / f"row_{row}" if out_dir else None
        ckpt, _ = train(row_cfg, train_index, row_dir)
        reports[row] = evaluate_checkpoint(ckpt, test_index)
        log.info("row %s done: %s", row, reports[row].rows["Total"])
    return reports


def ablation_table(reports: dict[str, metrics.MetricsReport]) -> str:
    """Recall / Precision / F-beta on the whole test set and on the Small bucket, in percent."""
    switches = ("focus_loss", "focus_module", "separation", "domain_fusion")
    head = f"{'row':<4}" + "".join(f"{s:>14}" for s in switches)
    head += "".join(f"{c:>11}" for c in ABLATION_COLUMNS) + "".join(f"{'small ' + c:>17}" for c in ABLATION_COLUMNS)
    lines = [head]
    for row, rep in reports.items():
        ab = ABLATION_ROWS[row]
        line = f"({row}) " + "".join(f"{('x' if getattr(ab, s) else '-'):>14}" for s in switches)
        for name, width in (("Total", 11), ("Small", 17)):
            r = rep.rows[name]
            line += "".join(f"{(100 * r[c] if r else float('nan')):>{width}.2f}" for c in ABLATION_COLUMNS)
        lines.append(line)
    return "\n".join(lines)
