"""The desk-scale detection experiment: pre-train, fine-tune, fuse and probe.

Everything stays in memory. Train and test clips come from disjoint seed
ranges of the synthetic generator, with three test sets: mixed artifacts,
temporal flicker only, and spatial blending only.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from masdt.data import ARTIFACT_KINDS, Clip, degrade_clip, generate_dataset
from masdt.detect import BranchModel, TrainConfig, finetune, predict_proba, video_score
from masdt.evaluation.metrics import roc_auc
from masdt.evaluation.saliency import grad_cam, pooled_ratio, region_means, region_to_grid
from masdt.flow import FlowParams, clip_flow_fields, flow_images
from masdt.mae import default_config, pretrain
from masdt.vit import ViTConfig

logger = logging.getLogger(__name__)

TEST_SETS = {"mixed": ARTIFACT_KINDS, "temporal": ("temporal",), "spatial": ("spatial",)}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    train_pairs: int = 100
    test_pairs: int = 25
    vit: ViTConfig = ViTConfig()
    flow: FlowParams = FlowParams(max_displacement=3.0)
    mae_epochs: int = 30
    mae_batch_size: int = 16
    mae_lr: float = 1e-3
    train: TrainConfig = TrainConfig(epochs=30, batch_size=32, lr=1e-3,
                                     mixup_enabled=False, cutmix_enabled=False)
    alpha: float = 0.5
    compression: Tuple[int, ...] = (2, 8, 32)
    saliency_clips: int = 20


@dataclass
class BranchScores:
    """Per-clip traces for one test set."""
    labels: List[int]
    spatial: List[np.ndarray]
    temporal: List[np.ndarray]

    def auc(self, which: str, alpha: float = 0.5) -> float:
        if which == "spatial":
            scores = [s.mean() for s in self.spatial]
        elif which == "temporal":
            scores = [t.mean() for t in self.temporal]
        else:
            scores = [video_score(s, t, alpha) for s, t in zip(self.spatial, self.temporal)]
        return roc_auc(scores, self.labels)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    spatial: BranchModel
    temporal: BranchModel
    pretrain_losses: Dict[str, List[Tuple[int, float]]]
    finetune_losses: Dict[str, List[Tuple[int, float]]]
    train_accuracy: Dict[str, float]
    scores: Dict[str, BranchScores]
    compressed_auc: Dict[int, float]
    saliency_means: List[Tuple[float, float]]  # (inside, outside) per fake clip
    timings: Dict[str, float] = field(default_factory=dict)

    def auc(self, test_set: str, which: str) -> float:
        return self.scores[test_set].auc(which, self.config.alpha)

    @property
    def saliency_ratio(self) -> float:
        return pooled_ratio(self.saliency_means)

    def summary(self) -> dict:
        out = {f"{name}/{which}": self.auc(name, which)
               for name in self.scores for which in ("spatial", "temporal", "fused")}
        out.update({f"q{q}/fused": v for q, v in self.compressed_auc.items()})
        out.update({f"train_acc/{k}": v for k, v in self.train_accuracy.items()})
        out["gradcam/ratio"] = self.saliency_ratio
        return out


def _flows(clips: Sequence[Clip], params: FlowParams) -> List[np.ndarray]:
    return [flow_images(clip_flow_fields(c.frames, params), params.max_displacement) for c in clips]


def score_set(clips: Sequence[Clip], flows: Sequence[np.ndarray], spatial: BranchModel,
              temporal: BranchModel) -> BranchScores:
    return BranchScores([c.y for c in clips], [predict_proba(spatial, c.frames) for c in clips],
                        [predict_proba(temporal, f) for f in flows])


def spatially_visible(clip: Clip) -> bool:
    """Reals and fakes carrying a blending artifact: the clips a frame-only model can separate."""
    return clip.artifact_meta is None or clip.artifact_meta.kind != "temporal"


def run_detection_experiment(cfg: ExperimentConfig = ExperimentConfig()) -> ExperimentResult:
    timings: Dict[str, float] = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = now - clock
        clock = now
        logger.info("%s done in %.1fs", name, timings[name])

    train = generate_dataset(cfg.train_pairs, cfg.seed + 1000, frames=4,
                             height=cfg.vit.image_size, width=cfg.vit.image_size)
    tests = {name: generate_dataset(cfg.test_pairs, cfg.seed + 5000 + 1000 * i, kinds=kinds, frames=4,
                                    height=cfg.vit.image_size, width=cfg.vit.image_size)
             for i, (name, kinds) in enumerate(TEST_SETS.items())}
    train_flows = _flows(train, cfg.flow)
    test_flows = {name: _flows(clips, cfg.flow) for name, clips in tests.items()}
    lap("data")

    inputs = {
        "spatial": (np.concatenate([c.frames for c in train]),
                    np.concatenate([np.full(len(c), c.y, np.float64) for c in train])),
        "temporal": (np.concatenate(train_flows),
                     np.concatenate([np.full(len(f), c.y, np.float64) for c, f in zip(train, train_flows)])),
    }
    branches, pre_losses, ft_losses = {}, {}, {}
    for i, kind in enumerate(("spatial", "temporal")):
        x, y = inputs[kind]
        pre = pretrain(x, default_config(cfg.vit), cfg.mae_epochs, cfg.seed + i,
                       batch_size=cfg.mae_batch_size, lr=cfg.mae_lr)
        pre_losses[kind] = pre.losses
        lap(f"pretrain_{kind}")
        branch = BranchModel.create(kind, cfg.vit, cfg.seed + i, pre.model.state_dict())
        train_cfg = TrainConfig(**{**cfg.train.to_dict(), "seed": cfg.seed + i})
        ft_losses[kind] = finetune(branch, x, y, train_cfg).losses
        branches[kind] = branch
        lap(f"finetune_{kind}")

    spatial, temporal = branches["spatial"], branches["temporal"]
    x, y = inputs["spatial"]
    pred = predict_proba(spatial, x) >= 0.5
    visible = np.concatenate([np.full(len(c), spatially_visible(c)) for c in train])
    xt, yt = inputs["temporal"]
    train_acc = {
        "spatial": float(np.mean(pred == y)),
        "spatial_visible": float(np.mean(pred[visible] == y[visible])),
        "temporal": float(np.mean((predict_proba(temporal, xt) >= 0.5) == yt)),
    }

    scores = {name: score_set(clips, test_flows[name], spatial, temporal) for name, clips in tests.items()}
    lap("score")

    compressed = {}
    for q in cfg.compression:
        clips = [degrade_clip(c, q) for c in tests["mixed"]]
        compressed[q] = score_set(clips, _flows(clips, cfg.flow), spatial, temporal).auc("fused", cfg.alpha)
    lap("compression")

    patch = cfg.vit.patch_size
    fakes = [c for c in tests["spatial"] if c.y == 1][:cfg.saliency_clips]
    means = [region_means(grad_cam(spatial, c.frames[0]), region_to_grid(c.artifact_meta.region[0], patch))
             for c in fakes]
    lap("gradcam")

    return ExperimentResult(cfg, spatial, temporal, pre_losses, ft_losses, train_acc, scores, compressed,
                            means, timings)
