"""Report emission: metrics.json, roc.csv, saliency PGMs and matching figures."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from masdt.evaluation.metrics import RocCurve, accuracy, auc, roc_curve
from masdt.evaluation.saliency import SaliencyMap, write_pgm

logger = logging.getLogger(__name__)


@dataclass
class EvalResult:
    dataset: str
    mode: str
    scores: Sequence[float]
    labels: Sequence[int]
    saliency: Dict[str, SaliencyMap] = field(default_factory=dict)
    threshold: float = 0.5


def write_roc_csv(curve: RocCurve, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fpr", "tpr", "threshold"])
        for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds):
            writer.writerow([repr(float(f)), repr(float(t)), repr(float(th))])
    return path


def _summary(result: EvalResult) -> dict:
    y = np.asarray(result.labels, dtype=int)
    out = {"n": int(y.size), "acc": accuracy(result.scores, y, result.threshold)}
    out["auc"] = auc(roc_curve(result.scores, y)) if 0 < y.sum() < y.size else None
    return out


def emit_report(results: List[EvalResult], out_dir, figures: bool = True) -> Dict[str, Path]:
    """Write the report files; returns the paths written keyed by role.

    ``roc.csv`` holds the first result's curve; further results get
    ``roc_<dataset>_<mode>.csv``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    metrics: Dict[str, Dict[str, dict]] = {}
    written: Dict[str, Path] = {}
    curves = {}
    for i, res in enumerate(results):
        summary = _summary(res)
        metrics.setdefault(res.dataset, {})[res.mode] = summary
        if summary["auc"] is not None:
            curve = roc_curve(res.scores, res.labels)
            name = "roc.csv" if i == 0 else f"roc_{res.dataset}_{res.mode}.csv"
            written[name] = write_roc_csv(curve, out / name)
            curves[f"{res.dataset}/{res.mode}"] = (curve.fpr, curve.tpr, summary["auc"])
        for clip_id, smap in sorted(res.saliency.items()):
            written[f"saliency/{clip_id}"] = write_pgm(smap, out / "saliency" / f"{clip_id}.pgm")
    path = out / "metrics.json"
    try:
        path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    written["metrics.json"] = path
    if figures and curves:
        from masdt.evaluation.plotting import plot_roc

        written["roc.png"] = plot_roc(curves, out / "roc.png")
    return written
