"""Command-line entry point.

Subcommands: simulate, train, eval, sparsify, augment, feat-rmsd. Run
``accar <command> --help`` for the flags of each.

Exit codes: 0 ok, 1 usage or invalid configuration, 2 data error (missing or
corrupt files, incompatible checkpoint/dataset), 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from .augment import apply_rc_stack, sample_rc_stack
from .data import SynthDataSpec, read_dataset, write_dataset
from .evaluation import METRIC_COLUMNS, aggregate, contrast_feature_rmsd, evaluate_pair, has_variance_decoder, \
    pair_sparsification
from .fileio import FormatError, load_array, save_array, write_pgm
from .losses import LossWeights
from .network import NetworkConfig
from .trainer import DivergenceError, TrainConfig, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("accar")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

CONDITION_FLAGS = {"haar_ll": "haar_ll", "haar_h": "haar_h", "haar_all": "haar_all", "fft": "fft",
                   "db": "daubechies_ll", "bior": "bior_ll"}

SPARSIFY_COLUMNS = ("pair", "fraction_removed", "remaining_mse", "oracle_mse")

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_BOOL = {"type": "boolean"}


def _obj(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


CONFIG_SCHEMA = _obj({
    "train": _obj({"lr": {"type": "number", "exclusiveMinimum": 0}, "steps": {"type": "integer", "minimum": 1},
                   "alternate_every": {"type": "integer", "minimum": 1}, "seed": _INT,
                   "batch": {"type": "integer", "minimum": 1}, "variance_warmup": {"type": "integer", "minimum": 0},
                   "rc_layers": {"type": "integer", "minimum": 1}, "rc_hidden": {"type": "integer", "minimum": 1},
                   "rc_bias": _BOOL, "checkpoint_every": {"type": "integer", "minimum": 0}}),
    "weights": _obj({k: {"type": "number", "minimum": 0} for k in ("lambda1", "lambda2", "lambda3", "beta")}),
    "network": _obj({"image_size": _INT, "levels": {"type": "integer", "minimum": 1},
                     "enc_channels": {"type": "integer", "minimum": 1},
                     "dec_channels": {"type": "integer", "minimum": 1},
                     "proj_channels": {"type": "integer", "minimum": 1}, "acfm": _BOOL,
                     "acfm_condition": {"enum": sorted(set(CONDITION_FLAGS.values()))},
                     "pyramid_mode": {"type": "string", "pattern": r"^(progressive|fixed:\d+)$"},
                     "slope": _NUM, "eps": {"type": "number", "exclusiveMinimum": 0}}),
    "data": _obj({"size": _INT, "n_structures": {"type": "integer", "minimum": 1},
                  "mesh_spacings": {"type": "array", "items": {"type": "integer", "minimum": 4}, "minItems": 1},
                  "amplitude": {"type": ["number", "null"], "minimum": 0}, "use_mask": _BOOL,
                  "noise_std": {"type": "number", "minimum": 0},
                  "noise_radius": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
                  "pool_size": {"type": ["integer", "null"], "minimum": 1}, "seed": _INT}),
    "simulate": _obj({"n_pairs": {"type": "integer", "minimum": 1}}),
    "eval": _obj({"n_variants": {"type": "integer", "minimum": 2}, "sparsify_steps": {"type": "integer", "minimum": 2},
                  "max_pairs": {"type": ["integer", "null"], "minimum": 1}}),
})


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_config(path: str | None) -> dict:
    """Read and validate a JSON run configuration (empty when ``path`` is None)."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"invalid config at {where}: {exc.message}") from exc
    return doc


def _data_spec(doc: dict) -> SynthDataSpec:
    return SynthDataSpec.from_dict(doc.get("data", {}))


def apply_ablation(cfg: TrainConfig, items: list[str]) -> TrainConfig:
    """``acfm=off|on``, ``clr=<λ2>`` and ``lambda1|lambda2|lambda3|beta=<value>``."""
    network, weights = cfg.network, cfg.weights
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--ablate expects KEY=VAL, got {item!r}")
        key = key.strip().lower()
        if key == "acfm":
            if value not in ("on", "off"):
                raise UsageError("acfm must be 'on' or 'off'")
            network = replace(network, acfm=value == "on")
        elif key in ("clr", "lambda1", "lambda2", "lambda3", "beta"):
            try:
                number = float(value)
            except ValueError as exc:
                raise UsageError(f"{key} needs a number, got {value!r}") from exc
            weights = replace(weights, **{"lambda2" if key == "clr" else key: number})
        else:
            raise UsageError(f"unknown ablation key {key!r}")
    return replace(cfg, network=network, weights=weights)


def build_train_config(doc: dict, args) -> TrainConfig:
    network = NetworkConfig(**doc.get("network", {}))
    if args.condition:
        network = replace(network, acfm_condition=CONDITION_FLAGS[args.condition])
    if args.pyramid:
        network = replace(network, pyramid_mode=args.pyramid)
    data = args.data if args.data else _data_spec(doc)
    cfg = TrainConfig(weights=LossWeights(**doc.get("weights", {})), network=network, data=data,
                      **doc.get("train", {}))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    return apply_ablation(cfg, args.ablate or [])


def _pyramid(value: str) -> str:
    if value == "progressive" or (value.startswith("fixed:") and value[6:].isdigit()):
        return value
    raise argparse.ArgumentTypeError("expected 'progressive' or 'fixed:K'")


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    doc = load_config(args.config)
    spec = _data_spec(doc)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    n = args.n if args.n is not None else doc.get("simulate", {}).get("n_pairs", 10)
    out = write_dataset(_out_dir(args), spec, n)
    print(f"wrote {n} pairs to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = load_config(args.config)
    try:
        cfg = build_train_config(doc, args)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and resume.config.network != cfg.network:
        raise DataError("resume checkpoint was trained with a different network configuration")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    log_path = out / "train_log.csv"
    if resume is None and log_path.exists():
        log_path.unlink()
    ckpt = train(cfg, resume=resume, checkpoint_dir=out, log_path=log_path)
    save_checkpoint(ckpt, out / "checkpoint.acct")
    reg = [loss for _, kind, loss in ckpt.history if kind == "R"]
    if reg:
        print(f"trained {ckpt.step} steps; registration loss {reg[0]:.5f} -> {reg[-1]:.5f}")
    print(f"checkpoint: {out / 'checkpoint.acct'}")
    return EXIT_OK


def _load_pairs(args, doc):
    pairs = read_dataset(args.data)
    limit = args.max_pairs or doc.get("eval", {}).get("max_pairs")
    return pairs[:limit] if limit else pairs


def _check_compatible(ckpt, pairs):
    size = ckpt.config.network.image_size
    for i, p in enumerate(pairs):
        if p.moving.shape != (size, size):
            raise DataError(f"pair {i} has shape {p.moving.shape}; checkpoint expects {size}x{size}")


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def _fmt(v) -> str:
    return v if isinstance(v, str) else f"{v:.6g}"


def cmd_eval(args) -> int:
    doc = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    pairs = _load_pairs(args, doc)
    _check_compatible(ckpt, pairs)
    n_variants = args.variants or doc.get("eval", {}).get("n_variants", 8)
    seed = args.seed if args.seed is not None else 0
    rows = []
    for i, pair in enumerate(pairs):
        row = evaluate_pair(ckpt.params, ckpt.config.network, pair, n_variants, seed + i)
        rows.append({"pair": f"{i:04d}", **row})
    mean, std = aggregate(rows)
    table = [[_fmt(r[c]) for c in METRIC_COLUMNS] for r in rows]
    table.append(["mean"] + [_fmt(mean[c]) for c in METRIC_COLUMNS[1:]])
    table.append(["std"] + [_fmt(std[c]) for c in METRIC_COLUMNS[1:]])
    out = _out_dir(args)
    _write_csv(out / "metrics.csv", METRIC_COLUMNS, table)
    print(f"dice {mean['dice_pre']:.4f} -> {mean['dice_post']:.4f}; epe {mean['epe_zero']:.4f} -> {mean['epe']:.4f}; "
          f"folding {mean['folding_pct']:.3f}%")
    return EXIT_OK


def sparsification_svg(fractions, model, oracle, width: int = 480, height: int = 320) -> str:
    """Two-curve line plot (model solid, oracle dashed) as a standalone SVG document."""
    pad = 40
    top = max(float(np.max(model)), float(np.max(oracle)), 1e-12)

    def pts(values):
        return " ".join(f"{pad + f * (width - 2 * pad):.1f},{height - pad - v / top * (height - 2 * pad):.1f}"
                        for f, v in zip(fractions, values))

    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">fraction removed</text>',
        f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})" '
        f'text-anchor="middle">remaining MSE</text>',
        f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end" font-size="10">{top:.3g}</text>',
        f'<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{pts(model)}"/>',
        f'<polyline fill="none" stroke="#555" stroke-width="2" stroke-dasharray="6 4" points="{pts(oracle)}"/>',
        f'<text x="{width - pad}" y="{pad}" text-anchor="end" font-size="11" fill="#1f77b4">model</text>',
        f'<text x="{width - pad}" y="{pad + 14}" text-anchor="end" font-size="11" fill="#555">oracle</text>',
        "</svg>",
    ])


def cmd_sparsify(args) -> int:
    doc = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    if not has_variance_decoder(ckpt.params):
        raise DataError("checkpoint has no variance decoder")
    pairs = _load_pairs(args, doc)
    _check_compatible(ckpt, pairs)
    steps = args.steps or doc.get("eval", {}).get("sparsify_steps", 20)
    rows, summary, curves = [], [], []
    for i, pair in enumerate(pairs):
        curve = pair_sparsification(ckpt.params, ckpt.config.network, pair, steps)
        curves.append(curve)
        for f, m, o in zip(curve.fractions_removed, curve.remaining_mse, curve.oracle_mse):
            rows.append([f"{i:04d}", _fmt(f), _fmt(m), _fmt(o)])
        summary.append([f"{i:04d}", _fmt(curve.area_between), _fmt(curve.fraction_non_increasing())])
    out = _out_dir(args)
    _write_csv(out / "sparsification.csv", SPARSIFY_COLUMNS, rows)
    _write_csv(out / "sparsification_summary.csv", ("pair", "area_between", "fraction_non_increasing"), summary)
    fractions = curves[0].fractions_removed
    model = np.mean([c.remaining_mse for c in curves], axis=0)
    oracle = np.mean([c.oracle_mse for c in curves], axis=0)
    (out / "sparsification.svg").write_text(sparsification_svg(fractions, model, oracle))
    print(f"mean area between curves {np.mean([c.area_between for c in curves]):.6g} over {len(curves)} pairs")
    return EXIT_OK


def _read_image(path: str) -> np.ndarray:
    p = Path(path)
    if p.suffix.lower() == ".pgm":
        raw = p.read_bytes()
        parts = raw.split(maxsplit=4)
        if len(parts) < 5 or parts[0] != b"P5":
            raise FormatError(f"{path}: only binary 8-bit PGM is supported")
        w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
        data = np.frombuffer(parts[4][:w * h], dtype=np.uint8)
        if data.size != w * h:
            raise FormatError(f"{path}: truncated PGM")
        return data.reshape(h, w) / float(maxval)
    return load_array(p)


def cmd_augment(args) -> int:
    image = _read_image(args.image)
    if image.ndim != 2 or not np.all(np.isfinite(image)):
        raise DataError("augment expects a finite 2-D image")
    seed = args.seed if args.seed is not None else 0
    out_img = apply_rc_stack(image, sample_rc_stack(seed))
    out = Path(args.out or "augmented.acct")
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix.lower() == ".pgm":
        write_pgm(out, out_img)
    else:
        save_array(out, out_img)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_feat_rmsd(args) -> int:
    doc = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    pairs = _load_pairs(args, doc)
    _check_compatible(ckpt, pairs)
    n_variants = args.variants or doc.get("eval", {}).get("n_variants", 8)
    seed = args.seed if args.seed is not None else 0
    rows = [[f"{i:04d}", _fmt(contrast_feature_rmsd(ckpt.params, ckpt.config.network, p, n_variants, seed + i))]
            for i, p in enumerate(pairs)]
    vals = [float(r[1]) for r in rows]
    rows.append(["mean", _fmt(float(np.mean(vals)))])
    _write_csv(_out_dir(args) / "feat_rmsd.csv", ("pair", "mean_rmsd"), rows)
    print(f"mean feature RMSD {np.mean(vals):.6g} over {len(vals)} pairs")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="accar", description="Contrast-agnostic deformable registration toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, config=True, out=True, seed=True):
        if config:
            p.add_argument("--config", metavar="PATH", help="JSON run configuration")
        if out:
            p.add_argument("--out", metavar="DIR", help="output directory")
        if seed:
            p.add_argument("--seed", type=int, metavar="INT")

    p = sub.add_parser("simulate", help="write a synthetic phantom dataset")
    common(p)
    p.add_argument("--n", type=int, help="number of pairs (default: simulate.n_pairs or 10)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="alternating training")
    common(p)
    p.add_argument("--data", metavar="DIR", help="dataset directory (default: synthesise from the config)")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", metavar="CKPT")
    p.add_argument("--ablate", action="append", metavar="KEY=VAL", help="acfm=off, clr=0, lambda1=..., beta=...")
    p.add_argument("--condition", choices=sorted(CONDITION_FLAGS))
    p.add_argument("--pyramid", type=_pyramid, metavar="{progressive|fixed:K}")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "registration metrics per pair"),
                                 ("sparsify", cmd_sparsify, "uncertainty sparsification curves"),
                                 ("feat-rmsd", cmd_feat_rmsd, "cross-contrast feature RMSD")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--checkpoint", required=True, metavar="CKPT")
        p.add_argument("--data", required=True, metavar="DIR")
        p.add_argument("--max-pairs", type=int, dest="max_pairs")
        if name == "sparsify":
            p.add_argument("--steps", type=int, help="number of curve points")
        else:
            p.add_argument("--variants", type=int, help="contrast variants per pair")
        p.set_defaults(func=func)

    p = sub.add_parser("augment", help="apply one random contrast stack to an image")
    p.add_argument("image", help=".acct tensor file or binary PGM")
    common(p, config=False)
    p.set_defaults(func=cmd_augment)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"accar: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"accar: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FormatError, FileNotFoundError, IsADirectoryError, KeyError) as exc:
        print(f"accar: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # malformed dataset manifests and incompatible tensors surface as ValueError
        print(f"accar: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
