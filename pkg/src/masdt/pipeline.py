"""Pipeline stages over an output root, plus in-memory helpers they share.

Layout under the output root::

    data/manifest.json, data/clips/<clip_id>/frame_###.png
    flow/<clip_id>/pair_###.flo
    checkpoints/{mae_spatial,mae_temporal,spatial,temporal}.ckpt
    logs/{pretrain,finetune}_<branch>.csv (+ .png)
    reports/<stage>/...
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from masdt.checkpoint import Checkpoint, CheckpointError, fingerprint, load_checkpoint, save_checkpoint
from masdt.config import RunConfig
from masdt.data import (Clip, degrade_clip, generate_dataset, load_frames, read_manifest, save_frames,
                        split_dataset, write_manifest)
from masdt.detect import (BranchModel, FeatureFusionModel, FusionConfig, VideoPrediction, alpha_sweep,
                          finetune, finetune_feature_fusion, predict_video)
from masdt.evaluation import plotting
from masdt.evaluation.metrics import accuracy, roc_auc
from masdt.evaluation.report import EvalResult, emit_report
from masdt.evaluation.saliency import grad_cam, pooled_ratio, region_means, region_to_grid, write_pgm
from masdt.flow import (FlowField, FlowParams, atomic_write, clip_flow_fields, flow_images, load_flow,
                         quantize_field, save_flow)
from masdt.mae import MaskedAutoencoder, pretrain
from masdt.vit import ViTConfig

logger = logging.getLogger(__name__)

BRANCHES = ("spatial", "temporal")


class StageError(RuntimeError):
    """A stage cannot run: missing inputs or outputs that would be overwritten."""


# ---------------------------------------------------------------------------
# in-memory helpers
# ---------------------------------------------------------------------------

def clip_flows(frames: np.ndarray, params: FlowParams) -> List[FlowField]:
    # at cache precision, so recomputed and cached flows agree bitwise
    return [quantize_field(f) for f in clip_flow_fields(frames, params)]


def _flow_job(args):
    frames, params = args
    return clip_flows(frames, params)


def compute_flows(clips: Sequence[Clip], params: FlowParams, jobs: int = 1) -> List[List[FlowField]]:
    """Flow fields per clip; results do not depend on ``jobs``."""
    work = [(c.frames, params) for c in clips]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_flow_job, work))
    return [_flow_job(w) for w in work]


def to_flow_images(fields: Sequence[FlowField], params: FlowParams) -> np.ndarray:
    return flow_images(list(fields), params.max_displacement)


def branch_dataset(clips: Sequence[Clip], flow_imgs: Optional[Sequence[np.ndarray]], kind: str):
    """Stack per-frame (spatial) or per-pair (temporal) samples with clip labels."""
    if kind == "spatial":
        x = np.concatenate([c.frames for c in clips])
        y = np.concatenate([np.full(len(c), c.y, dtype=np.float64) for c in clips])
    else:
        x = np.concatenate(list(flow_imgs))
        y = np.concatenate([np.full(len(f), c.y, dtype=np.float64) for c, f in zip(clips, flow_imgs)])
    return x, y


def pretrain_branch(kind: str, images: np.ndarray, config: RunConfig):
    m = config.tree["mae"]
    return pretrain(images, config.mae(kind), m["epochs"], config.seed + BRANCHES.index(kind),
                    batch_size=m["batch_size"], lr=m["lr"], weight_decay=m["weight_decay"])


def finetune_branch(kind: str, images: np.ndarray, labels: np.ndarray, config: RunConfig,
                    pretrained: Optional[dict] = None):
    branch = BranchModel.create(kind, config.vit(kind), config.seed + BRANCHES.index(kind), pretrained)
    return finetune(branch, images, labels, config.train)


def score_clips(clips: Sequence[Clip], spatial: BranchModel, temporal: Optional[BranchModel],
                fusion: FusionConfig, flow_imgs: Optional[Sequence[np.ndarray]] = None,
                flow_params: FlowParams = FlowParams(),
                feature_model: Optional[FeatureFusionModel] = None) -> List[VideoPrediction]:
    out = []
    for i, clip in enumerate(clips):
        fi = None if flow_imgs is None or fusion.mode == "spatial_only" else flow_imgs[i]
        out.append(predict_video(clip, spatial, temporal, fusion, fi, flow_params, feature_model))
    return out


# ---------------------------------------------------------------------------
# workspace
# ---------------------------------------------------------------------------

@dataclass
class Workspace:
    root: Path
    force: bool = False

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def manifest(self) -> Path:
        return self.data / "manifest.json"

    def flow_dir(self, clip_id: str) -> Path:
        return self.root / "flow" / clip_id

    def checkpoint(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.ckpt"

    def logs(self) -> Path:
        return self.root / "logs"

    def report(self, name: str) -> Path:
        return self.root / "reports" / name

    def claim(self, *paths: Path) -> None:
        """Refuse to overwrite existing outputs unless forced."""
        existing = [str(p) for p in paths if Path(p).exists()]
        if existing and not self.force:
            raise StageError(f"output already exists (use --force to overwrite): {', '.join(existing)}")

    def require(self, path: Path, hint: str) -> Path:
        if not Path(path).exists():
            raise StageError(f"missing input {path}: {hint}")
        return Path(path)

    # -- clips ---------------------------------------------------------------

    def entries(self, split: Optional[str] = None) -> List[dict]:
        self.require(self.manifest, "run `synth` first")
        entries = read_manifest(self.manifest)
        return [e for e in entries if split is None or e["split"] == split]

    def clips(self, split: Optional[str] = None) -> List[Clip]:
        return [load_frames(self.data / e["path"]) for e in self.entries(split)]

    def flows(self, clips: Sequence[Clip]) -> List[List[FlowField]]:
        out = []
        for clip in clips:
            d = self.flow_dir(clip.clip_id)
            paths = [d / f"pair_{t:03d}.flo" for t in range(len(clip) - 1)]
            for p in paths:
                self.require(p, "run `flow` first")
            out.append([load_flow(p) for p in paths])
        return out


def _write_text(path: Path, text: str) -> Path:
    atomic_write(path, text.encode("utf-8"))
    return path


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return _write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _synth_job(args):
    clip, directory = args
    save_frames(clip, directory)
    return str(directory)


def stage_synth(ws: Workspace, config: RunConfig, jobs: int = 1) -> Path:
    ws.claim(ws.manifest)
    s = config.tree["synth"]
    clips = generate_dataset(s["n_pairs"], config.seed, kinds=s["kinds"], frames=s["frames"],
                             height=s["height"], width=s["width"], motion_step=s["motion_step"])
    train, val, test = split_dataset(clips, config.split)
    split_of = {c.clip_id: name for name, part in (("train", train), ("val", val), ("test", test))
                for c in part}
    work = [(c, ws.data / "clips" / c.clip_id) for c in clips]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_synth_job, work))
    else:
        for w in work:
            _synth_job(w)
    entries = [{"id": c.clip_id, "path": f"clips/{c.clip_id}", "label": c.label, "split": split_of[c.clip_id]}
               for c in clips]
    write_manifest(entries, ws.manifest)
    logger.info("wrote %d clips (%d/%d/%d)", len(clips), len(train), len(val), len(test))
    return ws.manifest


def stage_flow(ws: Workspace, config: RunConfig, jobs: int = 1) -> int:
    clips = ws.clips()
    targets = [ws.flow_dir(c.clip_id) for c in clips]
    ws.claim(*targets)
    fields = compute_flows(clips, config.flow, jobs)
    for d, per_clip in zip(targets, fields):
        for t, f in enumerate(per_clip):
            save_flow(f, d / f"pair_{t:03d}.flo")
    return sum(len(f) for f in fields)


def _branch_inputs(ws: Workspace, config: RunConfig, kind: str, split: str):
    clips = ws.clips(split)
    flows = None
    if kind == "temporal":
        flows = [to_flow_images(f, config.flow) for f in ws.flows(clips)]
    return clips, flows


def _log_curve(ws: Workspace, name: str, losses, ylabel: str) -> None:
    _write_rows(ws.logs() / f"{name}.csv", ["epoch", "loss"], [(e, float(v)) for e, v in losses])
    plotting.plot_losses({name: losses}, ws.logs() / f"{name}.png", ylabel=ylabel)


def mae_checkpoint_config(config: RunConfig, kind: str) -> dict:
    return {"stage": "pretrain", "branch": kind, "mae": config.mae(kind).to_dict()}


def branch_checkpoint_config(config: RunConfig, kind: str) -> dict:
    return {"stage": "finetune", "branch": kind, "vit": config.vit(kind).to_dict()}


def stage_pretrain(ws: Workspace, config: RunConfig, kind: str) -> Path:
    target = ws.checkpoint(f"mae_{kind}")
    ws.claim(target)
    clips, flows = _branch_inputs(ws, config, kind, "train")
    x, _ = branch_dataset(clips, flows, kind)
    result = pretrain_branch(kind, x, config)
    _log_curve(ws, f"pretrain_{kind}", result.losses, "masked MSE")
    ckpt = Checkpoint(mae_checkpoint_config(config, kind), result.model.state_dict(),
                      result.optimizer.state_dict(),
                      {"run": config.fingerprint, "seed": config.seed, "samples": int(len(x))})
    return save_checkpoint(ckpt, target)


def stage_finetune(ws: Workspace, config: RunConfig, branches: Sequence[str] = BRANCHES,
                   from_scratch: bool = False) -> List[Path]:
    targets = [ws.checkpoint(k) for k in branches]
    ws.claim(*targets)
    pretrained = {}
    for kind in branches:
        if from_scratch:
            pretrained[kind] = None
            continue
        path = ws.require(ws.checkpoint(f"mae_{kind}"), f"run `pretrain --branch {kind}` or pass --from-scratch")
        ckpt = load_checkpoint(path, fingerprint(mae_checkpoint_config(config, kind)), strict=True)
        pretrained[kind] = ckpt.params
    written = []
    for kind, target in zip(branches, targets):
        clips, flows = _branch_inputs(ws, config, kind, "train")
        x, y = branch_dataset(clips, flows, kind)
        result = finetune_branch(kind, x, y, config, pretrained[kind])
        _log_curve(ws, f"finetune_{kind}", result.losses, "BCE")
        ckpt = Checkpoint(branch_checkpoint_config(config, kind), result.branch.model.state_dict(),
                          result.optimizer.state_dict(),
                          {"run": config.fingerprint, "seed": config.seed, "pretrained": not from_scratch})
        written.append(save_checkpoint(ckpt, target))
    return written


def load_branch(ws: Workspace, config: RunConfig, kind: str) -> BranchModel:
    path = ws.require(ws.checkpoint(kind), "run `finetune` first")
    ckpt = load_checkpoint(path, fingerprint(branch_checkpoint_config(config, kind)), strict=True)
    branch = BranchModel.create(kind, config.vit(kind), config.seed)
    branch.model.load_state_dict(ckpt.params)
    branch.model.eval()
    return branch


def _eval_clips(ws: Workspace, config: RunConfig, split: str, need_flow: bool):
    """Clips for ``split`` (compressed when configured) and their flow images."""
    clips = ws.clips(split)
    if not clips:
        raise StageError(f"the {split} split is empty")
    q = config.tree["eval"]["compression_q"]
    if q > 0:
        clips = [degrade_clip(c, q) for c in clips]
    if not need_flow:
        return clips, None
    if q > 0:
        fields = compute_flows(clips, config.flow)
    else:
        fields = ws.flows(clips)
    return clips, [to_flow_images(f, config.flow) for f in fields]


def stage_evaluate(ws: Workspace, config: RunConfig, mode: Optional[str] = None,
                   trace: bool = False, split: str = "test") -> Dict[str, Path]:
    fusion = FusionConfig(config.fusion.alpha, mode or config.fusion.mode)
    out = ws.report(f"evaluate_{fusion.mode}")
    ws.claim(out)
    spatial = load_branch(ws, config, "spatial")
    temporal = feature = None
    if fusion.mode == "score":
        temporal = load_branch(ws, config, "temporal")
    elif fusion.mode == "feature":
        feature = load_feature_model(ws, config)
    clips, flows = _eval_clips(ws, config, split, fusion.mode != "spatial_only")
    preds = score_clips(clips, spatial, temporal, fusion, flows, config.flow, feature)
    return write_predictions(out, clips, preds, fusion.mode, split, trace,
                             config.tree["eval"]["threshold"])


def write_predictions(out: Path, clips: Sequence[Clip], preds: Sequence[VideoPrediction], mode: str,
                      dataset: str, trace: bool = False, threshold: float = 0.5) -> Dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    rows = [(c.clip_id, p.spatial_score if len(p.spatial_scores) else float("nan"),
             p.temporal_score, p.score, c.y) for c, p in zip(clips, preds)]
    written = {"predictions.csv": _write_rows(
        out / "predictions.csv", ["clip_id", "spatial_score", "temporal_score", "fused_score", "label"], rows)}
    if trace:
        trace_rows = []
        for c, p in zip(clips, preds):
            for t in range(max(len(p.spatial_scores), len(p.fused_scores))):
                s = float(p.spatial_scores[t]) if t < len(p.spatial_scores) else float("nan")
                tt = float(p.temporal_scores[t]) if t < len(p.temporal_scores) else float("nan")
                f = float(p.fused_scores[t]) if t < len(p.fused_scores) else float("nan")
                trace_rows.append((c.clip_id, t, s, tt, f, c.y))
        written["trace.csv"] = _write_rows(
            out / "trace.csv", ["clip_id", "index", "spatial_score", "temporal_score", "fused_score", "label"],
            trace_rows)
    result = EvalResult(dataset, mode, [p.score for p in preds], [c.y for c in clips], threshold=threshold)
    written.update(emit_report([result], out))
    return written


def stage_gradcam(ws: Workspace, config: RunConfig, split: str = "test") -> Dict[str, Path]:
    out = ws.report("gradcam")
    ws.claim(out)
    spatial = load_branch(ws, config, "spatial")
    fakes = [c for c in ws.clips(split) if c.artifact_meta is not None and c.artifact_meta.kind != "temporal"]
    fakes = fakes[:config.tree["eval"]["saliency_clips"]]
    if not fakes:
        raise StageError(f"no spatial-artifact fakes in the {split} split")
    patch = config.vit("spatial").patch_size
    rows, means = [], []
    for clip in fakes:
        smap = grad_cam(spatial, clip.frames[0])
        grid_mask = region_to_grid(clip.artifact_meta.region[0], patch)
        if 0 < grid_mask.sum() < grid_mask.size:
            inside, outside = region_means(smap, grid_mask)
            means.append((inside, outside))
        else:
            inside = outside = float("nan")
        rows.append((clip.clip_id, inside, outside))
        write_pgm(smap, out / "saliency" / f"{clip.clip_id}.pgm")
        plotting.plot_saliency(clip.frames[0], smap.upsample(patch), out / "saliency" / f"{clip.clip_id}.png",
                               region=clip.artifact_meta.region[0])
    ratio = pooled_ratio(means) if means else None
    summary = {"clips": len(rows), "inside_outside_ratio": ratio if ratio is None or np.isfinite(ratio) else None}
    _write_rows(out / "localization.csv", ["clip_id", "inside_mean", "outside_mean"], rows)
    _write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"localization.csv": out / "localization.csv", "summary.json": out / "summary.json"}


def branch_traces(clips: Sequence[Clip], flows: Sequence[np.ndarray], spatial: BranchModel,
                  temporal: BranchModel) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    preds = score_clips(clips, spatial, temporal, FusionConfig(0.5, "score"), flows)
    return [p.spatial_scores for p in preds], [p.temporal_scores for p in preds]


def stage_alpha_sweep(ws: Workspace, config: RunConfig, split: str = "val") -> Dict[str, Path]:
    out = ws.report("alpha_sweep")
    ws.claim(out)
    spatial = load_branch(ws, config, "spatial")
    temporal = load_branch(ws, config, "temporal")
    clips, flows = _eval_clips(ws, config, split, True)
    s_tr, t_tr = branch_traces(clips, flows, spatial, temporal)
    rows, best = alpha_sweep(s_tr, t_tr, [c.y for c in clips], config.tree["eval"]["alpha_grid"])
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "alpha_sweep.csv", ["alpha", "auc"], [(float(a), float(v)) for a, v in rows])
    _write_text(out / "best.json", json.dumps({"alpha": best, "split": split}, indent=2) + "\n")
    plotting.plot_alpha_sweep(rows, out / "alpha_sweep.png", best=best)
    return {"alpha_sweep.csv": out / "alpha_sweep.csv", "best.json": out / "best.json"}


def feature_model_from_branches(spatial: BranchModel, temporal: BranchModel, seed: int) -> FeatureFusionModel:
    model = FeatureFusionModel(spatial.config, temporal.config, np.random.default_rng([seed, 4]))
    model.spatial.load_state_dict({k[len("encoder."):]: v for k, v in spatial.model.state_dict().items()
                                   if k.startswith("encoder.")})
    model.temporal.load_state_dict({k[len("encoder."):]: v for k, v in temporal.model.state_dict().items()
                                    if k.startswith("encoder.")})
    return model


def train_feature_model(ws: Workspace, config: RunConfig) -> FeatureFusionModel:
    spatial = load_branch(ws, config, "spatial")
    temporal = load_branch(ws, config, "temporal")
    clips = ws.clips("train")
    flows = [to_flow_images(f, config.flow) for f in ws.flows(clips)]
    frames = np.concatenate([c.frames[:-1] for c in clips])
    labels = np.concatenate([np.full(len(c) - 1, c.y, dtype=np.float64) for c in clips])
    model = feature_model_from_branches(spatial, temporal, config.seed)
    result = finetune_feature_fusion(model, frames, np.concatenate(flows), labels, config.train)
    _log_curve(ws, "finetune_feature", result.losses, "BCE")
    ckpt = Checkpoint({"stage": "feature_fusion", "spatial": config.vit("spatial").to_dict(),
                       "temporal": config.vit("temporal").to_dict()},
                      model.state_dict(), None, {"run": config.fingerprint, "seed": config.seed})
    save_checkpoint(ckpt, ws.checkpoint("feature_fusion"))
    return model


def load_feature_model(ws: Workspace, config: RunConfig) -> FeatureFusionModel:
    path = ws.require(ws.checkpoint("feature_fusion"), "run `ablate` to train the feature-fusion model")
    expected = fingerprint({"stage": "feature_fusion", "spatial": config.vit("spatial").to_dict(),
                            "temporal": config.vit("temporal").to_dict()})
    ckpt = load_checkpoint(path, expected, strict=True)
    model = FeatureFusionModel(config.vit("spatial"), config.vit("temporal"), np.random.default_rng(0))
    model.load_state_dict(ckpt.params)
    model.eval()
    return model


def stage_ablate(ws: Workspace, config: RunConfig, split: str = "test") -> Dict[str, Path]:
    """spatial_only vs score fusion vs feature fusion on one split."""
    out = ws.report("ablate")
    ws.claim(out, ws.checkpoint("feature_fusion"))
    spatial = load_branch(ws, config, "spatial")
    temporal = load_branch(ws, config, "temporal")
    feature = train_feature_model(ws, config)
    clips, flows = _eval_clips(ws, config, split, True)
    labels = [c.y for c in clips]
    threshold = config.tree["eval"]["threshold"]
    rows = []
    for mode in ("spatial_only", "score", "feature"):
        fusion = FusionConfig(config.fusion.alpha, mode)
        preds = score_clips(clips, spatial, temporal, fusion, flows, config.flow, feature)
        scores = [p.score for p in preds]
        rows.append((mode, accuracy(scores, labels, threshold), roc_auc(scores, labels)))
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "ablation.csv", ["mode", "acc", "auc"], rows)
    plotting.plot_bars([(m, a) for m, _, a in rows], out / "ablation.png")
    return {"ablation.csv": out / "ablation.csv"}


__all__ = [
    "BRANCHES", "StageError", "Workspace", "branch_dataset", "branch_traces", "compute_flows",
    "finetune_branch", "load_branch", "pretrain_branch", "score_clips", "stage_ablate",
    "stage_alpha_sweep", "stage_evaluate", "stage_finetune", "stage_flow", "stage_gradcam",
    "stage_pretrain", "stage_synth", "to_flow_images", "write_predictions", "CheckpointError",
]
