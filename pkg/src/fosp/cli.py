"""Command line entry point: ``fosp {generate,train,eval,separate,ablate,report}``.

Exit codes: 0 on success, 2 for invalid input or configuration, 3 for runtime failures.
Failures print a single JSON line on stderr: ``{"error": <type>, "exit": <code>, "message": ...}``.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import compositor, metrics, pngio
from .config import ConfigError, dump_config, load_config, set_key
from .data import DatasetError, delta_histogram, index_dataset, load_all
from .separation import full_res_mask
from .trainer import Checkpoint, ablation_table, evaluate_checkpoint, evaluate_predictions, run_ablation, train

log = logging.getLogger("fosp")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3
VALIDATION_ERRORS = (ConfigError, DatasetError, ValueError, FileNotFoundError, KeyError)


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args):
    cfg = load_config(args.config, args.set)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "data", None):
        cfg.data.root = str(args.data)
    if getattr(args, "iterations", None) is not None:
        set_key(cfg, "iterations", args.iterations)
    return cfg.validate()


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def cmd_generate(args) -> None:
    config = compositor.DatasetConfig(
        height=args.size,
        width=args.size,
        quotas=_float_list(args.quota),
        background_dir=args.backgrounds,
    )
    if len(config.quotas) != 3:
        raise UsageError("--quota needs three fractions for Small,Medium,Large")
    compositor.build_dataset(args.out, args.n, seed=args.seed, split="train", config=config)
    if args.n_test:
        compositor.build_dataset(args.out, args.n_test, seed=args.seed, split="test", config=config)


def cmd_train(args) -> None:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    ckpt, records = train(cfg, out_dir=out)
    summary = {"iterations": ckpt.iteration, "config_hash": ckpt.config_hash, **ckpt.metrics}
    print(json.dumps(summary, sort_keys=True))


def _write_report(report: metrics.MetricsReport, out: Path) -> None:
    pngio.write_text(out / "report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    pngio.write_text(out / "report.txt", report.table() + "\n")


def _load_predictions(directory: Path, index) -> np.ndarray:
    probs = []
    for e in index.entries:
        npy, png = directory / f"{e.id}.npy", directory / f"{e.id}.png"
        if npy.exists():
            probs.append(np.load(npy).astype(np.float64).squeeze())
        elif png.exists():
            from PIL import Image

            with Image.open(png) as img:
                probs.append(np.asarray(img.convert("L"), dtype=np.float64) / 255.0)
        else:
            raise DatasetError(f"no prediction for id {e.id!r} in {directory}")
    return probs


def cmd_eval(args) -> None:
    if bool(args.checkpoint) == bool(args.predictions):
        raise UsageError("give exactly one of --checkpoint or --predictions")
    cfg = _config(args)
    index = index_dataset(cfg.data.root, args.split)
    if len(index) == 0:
        raise DatasetError(f"no samples in {cfg.data.root}/{args.split}")
    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        report = evaluate_checkpoint(args.checkpoint, index, cfg)
    else:
        _, masks = load_all(index)
        probs = _load_predictions(Path(args.predictions), index)
        report = evaluate_predictions(index, probs, masks.numpy()[:, 0], cfg)
    _write_report(report, Path(args.out))
    print(report.table())


def _heatmap(values: np.ndarray) -> np.ndarray:
    from matplotlib import colormaps

    peak = float(values.max())
    scaled = values / peak if peak > 0 else values
    return colormaps["inferno"](scaled)[..., :3]


def _overlay(image: np.ndarray, fm: np.ndarray, gt: np.ndarray | None) -> np.ndarray:
    out = image * 0.6
    out[..., 2] += 0.4 * fm
    if gt is not None:
        out[..., 0] = np.where(gt > 0, 1.0, out[..., 0])
    return np.clip(out, 0.0, 1.0)


def _nearest_up(a: np.ndarray, size) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(a))[None, None].float()
    return torch.nn.functional.interpolate(t, size=size, mode="nearest")[0, 0].numpy()


@torch.no_grad()
def cmd_separate(args) -> None:
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    model = Checkpoint.load(args.checkpoint).build()
    if model.inpainter is None:
        raise ConfigError("checkpoint was trained without separation; no foreground features to show")
    masks = args.masks or []
    if masks and len(masks) != len(args.images):
        raise UsageError(f"{len(masks)} masks for {len(args.images)} images")
    if args.oracle and not masks:
        raise UsageError("--oracle needs --masks")
    out = Path(args.out)
    for i, path in enumerate(args.images):
        image = pngio.read_rgb(path)
        gt = pngio.read_mask(masks[i]) if masks else None
        x = torch.from_numpy(image).permute(2, 0, 1)[None].contiguous()
        result = model(x)
        size = image.shape[:2]
        dest = out / Path(path).stem
        fm = result.fm if result.fm is not None else torch.ones(1, 1, size[0] // 16, size[1] // 16)
        fm_full = full_res_mask(fm, size)[0, 0].numpy()
        pngio.write_png(dest / "fm_overlay.png", _overlay(image, fm_full, gt))
        for level, f in enumerate(result.foreground, start=1):
            energy = _nearest_up(f[0].mean(0).numpy(), size)
            pngio.write_png(dest / f"ff_level{level}.png", _heatmap(energy))
        pngio.write_mask(dest / "prediction.png", result.prob[0, 0].numpy() > args.threshold)
        if args.oracle:
            gt_t = torch.from_numpy(gt.astype(np.float32))[None, None]
            feats = model.inpainter.decode(model.inpainter.encode(x, gt_t))
            recon = model.inpainter.reconstruct(feats, size)[0].permute(1, 2, 0).numpy()
            pngio.write_png(dest / "background_oracle.png", recon)


def cmd_ablate(args) -> None:
    cfg = _config(args)
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    train_index = index_dataset(cfg.data.root, "train")
    test_index = index_dataset(cfg.data.root, "test")
    if len(train_index) == 0 or len(test_index) == 0:
        raise DatasetError(f"{cfg.data.root} needs both train and test splits")
    out = Path(args.out)
    reports = run_ablation(rows, cfg, train_index, test_index, out)
    table = ablation_table(reports)
    pngio.write_text(out / "ablation.txt", table + "\n")
    pngio.write_text(
        out / "ablation.json",
        json.dumps({r: rep.to_dict() for r, rep in reports.items()}, indent=2, sort_keys=True) + "\n",
    )
    print(table)


def _histogram_png(counts, edges, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=100)
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="black", linewidth=0.5)
    for edge in (metrics.SMALL_MAX, metrics.MEDIUM_MAX):
        ax.axvline(edge, color="red", linestyle="--", linewidth=0.8)
    ax.set_xlim(0, min(edges[-2] * 1.05, 1.0))
    ax.set_xlabel("smoke pixel ratio")
    ax.set_ylabel("images")
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    pngio.write_bytes(path, buf.getvalue())


def cmd_report(args) -> None:
    cfg = _config(args)
    index = index_dataset(cfg.data.root, args.split)
    counts, edges = delta_histogram(index, bins=args.bins)
    out = Path(args.out)
    _histogram_png(counts, edges, out / "delta_histogram.png")
    buckets = {b: int(sum(e.bucket == b for e in index.entries)) for b in metrics.BUCKETS}
    payload = {"split": args.split, "samples": len(index), "edges": edges.tolist(), "counts": counts.tolist(), "buckets": buckets}
    pngio.write_text(out / "delta_histogram.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    if args.report:
        data = json.loads(Path(args.report).read_text())
        report = metrics.MetricsReport(
            data["rows"], data["counts"], data["beta_sq"], data["m_definition"], data["threshold"]
        )
        pngio.write_text(out / "metrics_table.txt", report.table() + "\n")
        print(report.table())
    print(json.dumps({"samples": len(index), "buckets": buckets}, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fosp", description="Early smoke segmentation: data, training and evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True, data=True):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", required=True, help="output directory")
        if seed:
            p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", help="dataset root (overrides data.root)")

    p = sub.add_parser("generate", help="write a synthetic composited dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="training samples")
    p.add_argument("--n-test", type=int, default=0, help="test samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--quota", default="0.6,0.3,0.1", help="Small,Medium,Large fractions")
    p.add_argument("--backgrounds", help="folder of background images (procedural when omitted)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a folder of predictions")
    common(p, seed=False)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="folder of <id>.npy or <id>.png probability maps")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("separate", help="visualise Focus Map, foreground features and prediction")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--masks", nargs="+", help="ground-truth masks, same order as --images")
    p.add_argument("--oracle", action="store_true", help="also inpaint the background under the ground-truth mask")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("ablate", help="train and compare ablation rows a-e")
    common(p)
    p.add_argument("--rows", default="a,b,c,d,e")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="smoke-ratio histogram and metrics table")
    common(p, seed=False)
    p.add_argument("--split", default="train")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--report", help="report.json from eval, rendered as a per-bucket table")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(exc: BaseException, code: int) -> int:
    message = str(exc).splitlines()[0] if str(exc) else exc.__class__.__name__
    print(json.dumps({"error": exc.__class__.__name__, "exit": code, "message": message}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(exc, EXIT_INVALID)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except VALIDATION_ERRORS as exc:
        return _fail(exc, EXIT_INVALID)
    except Exception as exc:  # noqa: BLE001 - every other failure maps to the runtime exit code
        return _fail(exc, EXIT_RUNTIME)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
