"""Benchmark scoring and the ablation sweeps."""

from __future__ import annotations

import hashlib
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..backbone import FrozenBackbone
from ..config import RunSettings, to_text
from ..datakit import LOGICAL
from ..scorer import MODES, Scorer, upsample
from ..trainer import Checkpoint, encode_checkpoint, fit
from .metrics import RegionGroundTruth, UndefinedMetricError, auroc, pixel_auroc, spro

logger = logging.getLogger(__name__)

AXES = ("variant", "k", "template", "mode")


@dataclass
class EvalReport:
    image_auroc: float | None
    pixel_auroc: float | None
    spro_005: float | None
    mode: str = "dual"
    variant: str = "c"
    per_category: dict = field(default_factory=dict)
    logical_image_auroc: float | None = None  # normal vs missing/duplicated part only
    defect_recon_error: float | None = None
    normal_recon_error: float | None = None
    n_samples: int = 0
    fingerprint: str = ""
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def without_clock(self) -> dict:
        d = self.to_dict()
        d.pop("wall_clock")
        return d


def fingerprint(ck: Checkpoint) -> str:
    return hashlib.sha256(encode_checkpoint(ck)).hexdigest()[:16]


def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


def evaluate_maps(samples, results, recon_errors=None, mode="dual", variant="c", fp="") -> EvalReport:
    """Metrics for scored test samples (``results`` aligned with ``samples``)."""
    labels = np.array([s.label for s in samples])
    scores = np.array([r.image_score for r in results])
    with_gt = [i for i, s in enumerate(samples) if s.mask is not None]
    if len(with_gt) < len(samples):
        warnings.warn(f"{len(samples) - len(with_gt)} samples lack ground truth; pixel metrics use the rest",
                      stacklevel=2)
    maps = [results[i].final.data for i in with_gt]
    masks = [samples[i].mask for i in with_gt]
    img = _safe(auroc, scores, labels)
    pix = _safe(pixel_auroc, maps, masks) if maps else None
    sp = None
    if maps:
        gt = RegionGroundTruth.from_masks(masks)
        sp = _safe(spro, maps, gt, 0.05) if gt.regions else None
    per_cat = {}
    for kind in sorted({s.kind for s in samples} - {"good"}):
        idx = [i for i, s in enumerate(samples) if s.kind in ("good", kind)]
        sel = [i for i in idx if samples[i].mask is not None]
        per_cat[kind] = {
            "image_auroc": _safe(auroc, scores[idx], labels[idx]),
            "pixel_auroc": _safe(pixel_auroc, [results[i].final.data for i in sel],
                                 [samples[i].mask for i in sel]) if sel else None,
            "n": int(sum(samples[i].kind == kind for i in idx)),
        }
    logical = [i for i, s in enumerate(samples) if s.kind == "good" or s.kind in LOGICAL]
    logical_auroc = _safe(auroc, scores[logical], labels[logical]) if logical else None
    d_err = n_err = None
    if recon_errors is not None:
        inside = [recon_errors[i][samples[i].mask].mean() for i in with_gt
                  if samples[i].label == 1 and samples[i].mask.any()]
        outside = [recon_errors[i][~samples[i].mask].mean() for i in with_gt]
        d_err = float(np.mean(inside)) if inside else None
        n_err = float(np.mean(outside)) if outside else None
    return EvalReport(img, pix, sp, mode, variant, per_cat, logical_auroc, d_err, n_err, len(samples), fp)


def run_benchmark(checkpoint: Checkpoint, dataset, modes=("dual",), out=None,
                  sigma: float | None = None) -> dict:
    """Score every test sample under each mode; returns ``{mode: EvalReport}``.

    With ``out`` set, writes ``report_<mode>.json`` and appends one JSON line
    per sample and mode to ``samples.jsonl``.
    """
    t0 = time.perf_counter()
    scorer = Scorer.from_checkpoint(checkpoint)
    samples = dataset.test
    feats = scorer.features(np.stack([s.image for s in samples]))
    recon = scorer.reconstruct(feats)
    euc = np.sqrt(((feats - recon) ** 2).sum(axis=-1))
    size = scorer.image_size
    recon_err = [upsample(e, (size, size)) for e in euc]
    fp = fingerprint(checkpoint)
    reports = {}
    lines = []
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        results = scorer.score_features(feats, recon, mode=mode, sigma=sigma)
        rep = evaluate_maps(samples, results, recon_err, mode, scorer.variant, fp)
        rep.wall_clock = time.perf_counter() - t0
        reports[mode] = rep
        lines += [json.dumps({"sample": s.name, "score": r.image_score, "mode": mode,
                              "label": s.label, "kind": s.kind}) for s, r in zip(samples, results)]
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for mode, rep in reports.items():
            (out / f"report_{mode}.json").write_text(rep.to_json() + "\n")
        with open(out / "samples.jsonl", "a") as fh:
            fh.write("".join(line + "\n" for line in lines))
    return reports


def table_csv(reports: dict) -> str:
    """Rows of ``category,image_auroc,pixel_auroc`` for one report per key."""
    rows = ["category,image_auroc,pixel_auroc"]
    for key, rep in reports.items():
        for kind, m in rep.per_category.items():
            rows.append(f"{key}/{kind},{m['image_auroc']},{m['pixel_auroc']}")
        rows.append(f"{key}/mean,{rep.image_auroc},{rep.pixel_auroc}")
    return "\n".join(rows) + "\n"


# ablation harness ----------------------------------------------------------------------

@dataclass
class AblationResult:
    axis: str
    reports: dict  # key -> list of EvalReport (one per seed)

    def summary(self) -> dict:
        out = {}
        for key, reps in self.reports.items():
            out[key] = {
                "image_auroc": float(np.mean([r.image_auroc for r in reps])),
                "pixel_auroc": float(np.mean([r.pixel_auroc for r in reps])),
                "spro_005": float(np.mean([r.spro_005 for r in reps])),
                "seeds": len(reps),
            }
        vals = [v["image_auroc"] for v in out.values()]
        return {"axis": self.axis, "keys": out, "image_auroc_spread": float(max(vals) - min(vals))}

    def to_json(self) -> str:
        body = {"summary": self.summary(),
                "reports": {k: [r.to_dict() for r in reps] for k, reps in self.reports.items()}}
        return json.dumps(body, indent=2, sort_keys=True)


def _with_train(settings: RunSettings, **kw) -> RunSettings:
    return replace(settings, train=replace(settings.train, **kw))


def run_ablation(axis: str, dataset, settings: RunSettings, seeds=(0,), values=None,
                 out=None) -> AblationResult:
    """Train and evaluate one model per ``(value, seed)`` along ``axis``.

    ``variant`` sweeps vanilla/a/b/c, ``k`` sweeps patch sizes, ``template``
    sweeps template indices and ``mode`` scores one model per seed under
    the three scoring modes.
    """
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
    backbone = FrozenBackbone(settings.backbone)
    feats = np.stack([backbone.fused(s.image).data for s in dataset.train])
    reports: dict = {}

    def train_eval(st: RunSettings, modes=("dual",)):
        ck = fit(st, dataset, features=feats)
        return run_benchmark(ck, dataset, modes)

    for seed in seeds:
        base = _with_train(settings, seed=seed)
        if axis == "mode":
            for mode, rep in train_eval(base, MODES).items():
                reports.setdefault(mode, []).append(rep)
            continue
        if axis == "variant":
            pairs = [(v, _with_train(base, variant=v)) for v in (values or ("vanilla", "a", "b", "c"))]
        elif axis == "k":
            pairs = [(f"K={k}", replace(base, embed=replace(base.embed, patch_size=int(k))))
                     for k in (values or (1, 2, 4))]
        else:
            pairs = [(f"template={t}", _with_train(base, template_index=int(t)))
                     for t in (values or range(5))]
        for key, st in pairs:
            reports.setdefault(key, []).append(train_eval(st)["dual"])
            logger.info("ablation %s %s seed %d: image AUROC %.4f", axis, key, seed,
                        reports[key][-1].image_auroc)
    result = AblationResult(axis, reports)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ablation_{axis}.json").write_text(result.to_json() + "\n")
        (out / f"ablation_{axis}.csv").write_text(
            table_csv({k: v[0] for k, v in reports.items()}))
        (out / "settings.txt").write_text(to_text(settings))
    return result
