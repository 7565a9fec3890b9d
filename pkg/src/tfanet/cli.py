"""Command-line entry point: ``tfanet {synth,train,eval,infer,ablate,attn}``."""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunSettings, apply_overrides, known_keys, parse_kv_text, preset, to_text
from .datakit import DatasetError, FormatError, SynthSpec, load_dataset, load_image, synth_dataset
from .datakit.formats import write_pnm, write_tensor
from .evaluation import run_ablation, run_benchmark, table_csv
from .numerics import ContractError, DimensionError, NonFiniteError
from .scorer import MODES, AnomalyResult, Scorer
from .tfam import attention_maps
from .trainer import TrainingDiverged, fit, load_checkpoint

logger = logging.getLogger("tfanet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# flag -> dotted config key
FLAG_KEYS = {
    "seed": "train.seed",
    "variant": "train.variant",
    "mode": "score.mode",
    "mask_ratio": "train.mask_ratio",
    "sigma": "score.sigma",
    "template_index": "train.template_index",
    "epochs": "train.epochs",
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tfanet", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *, data=True, ckpt=False, out_required=False):
        if data:
            sp.add_argument("--data", required=True, help="dataset root or image directory")
        if ckpt:
            sp.add_argument("--ckpt", required=True, help="checkpoint file")
        sp.add_argument("--out", required=out_required, help="output path")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--config", help="key=value file; command-line flags win")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="extra config override, repeatable")

    def model_flags(sp):
        sp.add_argument("--preset", choices=("desk", "full"), default=None)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--variant", choices=("vanilla", "a", "b", "c"))
        sp.add_argument("--mask-ratio", type=float)
        sp.add_argument("--template-index", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--sigma", type=float)
        sp.add_argument("--mode", choices=MODES)

    s = sub.add_parser("synth", help="generate a synthetic defect dataset")
    common(s, data=False, out_required=True)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--texture", default="stripes", choices=("stripes", "checker", "blobs"))
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--n-train", type=int, default=200)
    s.add_argument("--n-test-normal", type=int, default=40)
    s.add_argument("--n-test-defect", type=int, default=40)

    s = sub.add_parser("train", help="train a reconstruction model")
    common(s, out_required=True)
    model_flags(s)

    s = sub.add_parser("eval", help="benchmark a checkpoint on a dataset's test split")
    common(s, ckpt=True)
    s.add_argument("--mode", default="dual", help="dual, euc, cos, a comma list, or all")
    s.add_argument("--sigma", type=float)

    s = sub.add_parser("infer", help="score a directory of images and write heatmaps")
    common(s, ckpt=True, out_required=True)
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--sigma", type=float)

    s = sub.add_parser("ablate", help="train/evaluate sweeps along one ablation axis")
    common(s, out_required=True)
    model_flags(s)
    s.add_argument("--axis", required=True, choices=("variant", "k", "template", "mode"))
    s.add_argument("--seeds", default=None, help="comma-separated training seeds")
    s.add_argument("--values", default=None, help="comma-separated axis values")

    s = sub.add_parser("attn", help="write template-attention maps as PGM")
    common(s, ckpt=True, out_required=True)
    return p


def resolve_settings(args) -> RunSettings:
    """Preset, then config file, then ``--set`` items, then dedicated flags."""
    overrides: dict[str, str] = {}
    if args.config:
        overrides.update(parse_kv_text(Path(args.config).read_text()))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for attr, key in FLAG_KEYS.items():
        val = getattr(args, attr, None)
        if val is not None:
            overrides[key] = str(val)
    unknown = sorted(set(overrides) - known_keys())
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    name = getattr(args, "preset", None) or overrides.get("train.preset", "desk")
    overrides["train.preset"] = name
    return apply_overrides(preset(name), overrides)


def write_run_json(path: Path, args, settings: RunSettings | None = None, extra=None) -> None:
    text = to_text(settings) if settings is not None else ""
    record = {
        "command": args.command,
        "argv": sys.argv[1:] if extra is None else extra,
        "config_sha256": hashlib.sha256(text.encode()).hexdigest(),
        "config": text.splitlines(),
        "seed": getattr(args, "seed", None),
        "versions": {"tfanet": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    path.write_text(json.dumps(record, indent=2) + "\n")


def _normalise(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.clip(np.rint((m - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def emit_heatmap(result: AnomalyResult, out, name: str, force: bool = False,
                 jsonl: str = "scores.jsonl") -> list[Path]:
    """Write min-max normalised PGMs, a raw ``.ten`` map and one JSONL score record."""
    out = Path(out)
    paths = [out / f"{name}.pgm", out / f"{name}.euc.pgm", out / f"{name}.cos.pgm", out / f"{name}.ten"]
    existing = [p for p in paths if p.exists()]
    if existing and not force:
        raise FileExistsError(f"{existing[0]} exists; pass --force to overwrite")
    write_pnm(paths[0], _normalise(result.final.data))
    write_pnm(paths[1], _normalise(result.euc_map.data))
    write_pnm(paths[2], _normalise(result.cos_map.data))
    write_tensor(paths[3], result.final.data)
    with open(out / jsonl, "a") as fh:
        fh.write(json.dumps({"sample": name, "score": result.image_score}) + "\n")
    return paths


def _image_files(root: Path) -> list[Path]:
    if root.is_file():
        return [root]
    return sorted(p for p in root.rglob("*") if p.suffix == ".ppm")


def _sample_name(path: Path, root: Path) -> str:
    rel = path.relative_to(root) if root.is_dir() else Path(path.name)
    return "_".join(rel.with_suffix("").parts)


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and out.is_dir() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def cmd_synth(args) -> None:
    spec = SynthSpec(image_size=args.image_size, texture=args.texture, n_train=args.n_train,
                     n_test_normal=args.n_test_normal, n_test_defect=args.n_test_defect,
                     seed=args.seed)
    out = synth_dataset(spec, args.out, force=args.force)
    write_run_json(out / "run.json", args)
    logger.info("wrote dataset to %s", out)


def cmd_train(args) -> None:
    settings = resolve_settings(args)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    ds = load_dataset(args.data, settings.preprocess)
    out.parent.mkdir(parents=True, exist_ok=True)
    fit(settings, ds, out, log=lambda e, loss: logger.info("epoch %d l_rec %.5f", e, loss))
    write_run_json(out.with_name(out.name + ".run.json"), args, settings)


def _modes(arg: str | None) -> tuple:
    if arg in (None, ""):
        return ("dual",)
    if arg == "all":
        return MODES
    modes = tuple(m.strip() for m in arg.split(","))
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise UsageError(f"unknown mode {bad[0]!r}")
    return modes


def cmd_eval(args) -> None:
    ck = load_checkpoint(args.ckpt)
    modes = _modes(args.mode)
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix("").with_name(
        Path(args.ckpt).stem + "_eval")
    _prepare_out(out, args.force)
    ds = load_dataset(args.data, ck.settings.preprocess, load_train=False)
    reports = run_benchmark(ck, ds, modes, out, sigma=args.sigma)
    (out / "table.csv").write_text(table_csv(reports))
    write_run_json(out / "run.json", args, ck.settings)
    for mode, rep in reports.items():
        logger.info("%s: image AUROC %s pixel AUROC %s sPRO %s", mode, rep.image_auroc,
                    rep.pixel_auroc, rep.spro_005)


def cmd_infer(args) -> None:
    ck = load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scorer = Scorer.from_checkpoint(ck)
    root = Path(args.data)
    files = _image_files(root)
    if not files:
        raise DatasetError(f"no .ppm images under {root}")
    for path in files:
        img = load_image(path, ck.settings.preprocess)
        res = scorer.score(img, mode=args.mode, sigma=args.sigma)[0]
        emit_heatmap(res, out, _sample_name(path, root), force=args.force)
    write_run_json(out / "run.json", args, ck.settings)


def cmd_ablate(args) -> None:
    settings = resolve_settings(args)
    out = Path(args.out)
    _prepare_out(out, args.force)
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else (settings.train.seed,)
    values = tuple(v.strip() for v in args.values.split(",")) if args.values else None
    ds = load_dataset(args.data, settings.preprocess)
    result = run_ablation(args.axis, ds, settings, seeds=seeds, values=values, out=out)
    write_run_json(out / "run.json", args, settings)
    logger.info("%s", json.dumps(result.summary()))


def cmd_attn(args) -> None:
    ck = load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scorer = Scorer.from_checkpoint(ck, variant="c")
    root = Path(args.data)
    files = _image_files(root)
    if not files:
        raise DatasetError(f"no .ppm images under {root}")
    for path in files:
        feats = scorer.features(load_image(path, ck.settings.preprocess))
        amap = attention_maps(feats, scorer.template, ck.weights)[0]
        name = _sample_name(path, root)
        target = out / f"{name}.attn.pgm"
        if target.exists() and not args.force:
            raise FileExistsError(f"{target} exists; pass --force to overwrite")
        write_pnm(target, _normalise(amap))
        write_tensor(out / f"{name}.attn.ten", amap)
    write_run_json(out / "run.json", args, ck.settings)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "ablate": cmd_ablate, "attn": cmd_attn}


def _thread_limit():
    n = os.environ.get("TFA_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"tfanet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        with _thread_limit():
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"tfanet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"tfanet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, DatasetError, FileExistsError, ContractError, DimensionError,
            KeyError, ValueError, OSError) as exc:
        print(f"tfanet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
