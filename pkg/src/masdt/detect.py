"""Supervised fine-tuning of both branches, augmentation, and score/feature fusion."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from masdt import tensor as T
from masdt.flow import FlowParams, clip_flow_fields, flow_images
from masdt.nn import Module
from masdt.optim import AdamW
from masdt.tensor import ShapeError, Tensor
from masdt.vit import ClassifierHead, ViTClassifier, ViTConfig, ViTEncoder, layer_id, readout

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
BRANCH_KINDS = ("spatial", "temporal")
FUSION_MODES = ("score", "feature", "spatial_only")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 5e-4
    weight_decay: float = 0.05
    layer_decay: float = 0.8
    label_smoothing: float = 0.1
    mixup_enabled: bool = True
    mixup_alpha: float = 0.8
    cutmix_enabled: bool = True
    cutmix_alpha: float = 1.0
    cutmix_prob: float = 1.0
    switch_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("cutmix_prob", "switch_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise ValueError("label_smoothing must lie in [0, 0.5)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.5
    mode: str = "score"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"fusion alpha must lie in [0, 1], got {self.alpha}")
        if self.mode not in FUSION_MODES:
            raise ValueError(f"fusion mode must be one of {FUSION_MODES}, got {self.mode!r}")


# ---------------------------------------------------------------------------
# loss and augmentation
# ---------------------------------------------------------------------------

def bce_loss(prob: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; probabilities clamped to [1e-7, 1 - 1e-7]."""
    prob = T.as_tensor(prob)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if prob.size == 0:
        raise ValueError("bce_loss on an empty batch")
    if target.shape != prob.shape:
        raise ShapeError(f"target shape {target.shape} != prediction shape {prob.shape}")
    p = T.clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    o = Tensor(target)
    ll = o * T.log(p) + (1.0 - o) * T.log(1.0 - p)
    return -T.mean(ll)


def smooth_labels(labels, factor: float) -> np.ndarray:
    """Binary symmetric smoothing: 1 -> 1 - factor/2, 0 -> factor/2 (soft labels stay affine)."""
    if not 0.0 <= factor < 0.5:
        raise ValueError(f"smoothing factor must lie in [0, 0.5), got {factor}")
    labels = np.asarray(labels, dtype=np.float64)
    return labels * (1.0 - factor) + 0.5 * factor


def mixup(x_a: np.ndarray, x_b: np.ndarray, y_a, y_b, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup lambda must lie in [0, 1], got {lam}")
    x_a, x_b = np.asarray(x_a), np.asarray(x_b)
    if x_a.shape != x_b.shape:
        raise ShapeError(f"mixup shapes differ: {x_a.shape} vs {x_b.shape}")
    y = lam * np.asarray(y_a, dtype=np.float64) + (1.0 - lam) * np.asarray(y_b, dtype=np.float64)
    return lam * x_a + (1.0 - lam) * x_b, y


def cutmix_box(height: int, width: int, lam: float, rng: np.random.Generator) -> Tuple[int, int, int, int]:
    """Box (y0, y1, x0, x1) with target area fraction ``1 - lam``, clipped to the image."""
    cut = np.sqrt(1.0 - lam)
    ch, cw = int(height * cut), int(width * cut)
    cy, cx = int(rng.integers(height)), int(rng.integers(width))
    y0, y1 = np.clip([cy - ch // 2, cy + ch - ch // 2], 0, height)
    x0, x1 = np.clip([cx - cw // 2, cx + cw - cw // 2], 0, width)
    return int(y0), int(y1), int(x0), int(x1)


def cutmix(x_a: np.ndarray, x_b: np.ndarray, y_a, y_b, lam: float,
           rng: Optional[np.random.Generator] = None, box=None):
    """Paste a box of ``x_b`` into ``x_a``; labels weighted by the area actually pasted.

    Returns (mixed images, mixed labels, adjusted lambda, box).
    """
    x_a, x_b = np.asarray(x_a), np.asarray(x_b)
    if x_a.shape != x_b.shape:
        raise ShapeError(f"cutmix shapes differ: {x_a.shape} vs {x_b.shape}")
    h, w = x_a.shape[-2:]
    if box is None:
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"cutmix lambda must lie in [0, 1], got {lam}")
        box = cutmix_box(h, w, lam, rng if rng is not None else np.random.default_rng())
    y0, y1, x0, x1 = box
    out = x_a.copy()
    out[..., y0:y1, x0:x1] = x_b[..., y0:y1, x0:x1]
    lam_adj = 1.0 - (y1 - y0) * (x1 - x0) / float(h * w)
    y = lam_adj * np.asarray(y_a, dtype=np.float64) + (1.0 - lam_adj) * np.asarray(y_b, dtype=np.float64)
    return out, y, lam_adj, box


def mix_batch(x: np.ndarray, y: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    """Pair each sample with the reversed batch and apply MixUp or CutMix."""
    use_mix = cfg.mixup_enabled and cfg.mixup_alpha > 0
    use_cut = cfg.cutmix_enabled and cfg.cutmix_alpha > 0
    if not (use_mix or use_cut) or rng.random() >= cfg.cutmix_prob:
        return x, y
    xb, yb = x[::-1], y[::-1]
    if use_cut and (not use_mix or rng.random() < cfg.switch_prob):
        lam = float(rng.beta(cfg.cutmix_alpha, cfg.cutmix_alpha))
        mixed, ym, _, _ = cutmix(x, xb, y, yb, lam, rng)
        return mixed, ym
    lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
    return mixup(x, xb, y, yb, lam)


# ---------------------------------------------------------------------------
# branches
# ---------------------------------------------------------------------------

@dataclass
class BranchModel:
    kind: str
    model: ViTClassifier

    def __post_init__(self):
        if self.kind not in BRANCH_KINDS:
            raise ValueError(f"branch kind must be spatial or temporal, got {self.kind!r}")

    @property
    def config(self) -> ViTConfig:
        return self.model.config

    @classmethod
    def create(cls, kind: str, config: ViTConfig, seed: int,
               pretrained: Optional[dict] = None) -> "BranchModel":
        """Fresh classifier; encoder weights copied from an MAE state when given."""
        model = ViTClassifier(config, np.random.default_rng([seed, 2]))
        if pretrained is not None:
            try:
                model.encoder.load_encoder_state(pretrained)
            except (ShapeError, KeyError) as exc:
                raise ValueError(f"config/checkpoint geometry mismatch: {exc}") from exc
        return cls(kind, model)


@dataclass
class FinetuneResult:
    branch: object
    optimizer: AdamW
    losses: List[Tuple[int, float]] = field(default_factory=list)

    def log_csv(self) -> str:
        return "epoch,loss\n" + "".join(f"{e},{v!r}\n" for e, v in self.losses)


def _make_optimizer(model: Module, depths: Callable[[str], int], num_layers: int,
                    cfg: TrainConfig) -> AdamW:
    return AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                 layer_decay=cfg.layer_decay, layer_of=depths, num_layers=num_layers)


def _train_loop(model: Module, forward: Callable, inputs: Sequence[np.ndarray], labels: np.ndarray,
                cfg: TrainConfig, opt: AdamW, on_epoch=None) -> List[Tuple[int, float]]:
    rng = np.random.default_rng([cfg.seed, 3])
    n = len(labels)
    losses = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xs = [x[idx] for x in inputs]
            y = labels[idx]
            if len(xs) == 1:
                x, y = mix_batch(xs[0], y, cfg, rng)
                xs = [x]
            target = smooth_labels(y, cfg.label_smoothing)
            opt.zero_grad()
            logits = forward(xs, rng)
            loss = bce_loss(T.sigmoid(logits), target)
            T.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        losses.append((epoch, total / n))
        logger.info("finetune epoch %d loss %.5f", epoch, total / n)
        if on_epoch:
            on_epoch(epoch, total / n)
    model.eval()
    return losses


def finetune(branch: BranchModel, images: np.ndarray, labels, cfg: TrainConfig,
             on_epoch=None) -> FinetuneResult:
    """Fine-tune encoder and head with BCE, MixUp/CutMix, smoothing and layer-decayed AdamW."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    c = branch.config
    expected = (c.in_channels, c.image_size, c.image_size)
    if images.shape[1:] != expected:
        raise ValueError(f"inputs {images.shape[1:]} do not match branch geometry {expected}")
    model = branch.model
    opt = _make_optimizer(model, lambda n: layer_id(n, c.depth), c.depth + 1, cfg)
    losses = _train_loop(model, lambda xs, rng: model(xs[0], rng), [images], labels, cfg, opt, on_epoch)
    return FinetuneResult(branch, opt, losses)


def predict_logits(model: Module, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model(images[start:start + batch_size]).data.copy())
    return np.concatenate(out) if out else np.zeros(0)


def predict_proba(branch: BranchModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    logits = predict_logits(branch.model, np.asarray(images, dtype=np.float64), batch_size)
    return 1.0 / (1.0 + np.exp(-logits))


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

def fuse_scores(spatial, temporal, alpha: float):
    """Convex combination ``alpha * spatial + (1 - alpha) * temporal`` of probabilities."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"fusion alpha must lie in [0, 1], got {alpha}")
    s = np.asarray(spatial, dtype=np.float64)
    t = np.asarray(temporal, dtype=np.float64)
    if s.min(initial=0.0) < 0 or s.max(initial=0.0) > 1 or t.min(initial=0.0) < 0 or t.max(initial=0.0) > 1:
        raise ValueError("branch probabilities must lie in [0, 1]")
    out = alpha * s + (1.0 - alpha) * t
    return float(out) if out.ndim == 0 else out


def fuse_features(e_spatial: Tensor, e_temporal: Tensor, head: ClassifierHead) -> Tensor:
    """Concatenate branch embeddings and score them with a joint MLP head."""
    if e_spatial.shape[0] != e_temporal.shape[0]:
        raise ShapeError(f"batch sizes differ: {e_spatial.shape} vs {e_temporal.shape}")
    joint = T.concat([e_spatial, e_temporal], axis=-1)
    if joint.shape[-1] != head.fc1.weight.shape[0]:
        raise ShapeError(f"joint embedding dim {joint.shape[-1]} != head input {head.fc1.weight.shape[0]}")
    return head(joint)


class FeatureFusionModel(Module):
    """Both encoders feeding one head, for the feature-level fusion ablation."""

    def __init__(self, spatial: ViTConfig, temporal: ViTConfig, rng: np.random.Generator):
        super().__init__()
        self.spatial_config = spatial
        self.temporal_config = temporal
        self.spatial = ViTEncoder(spatial, rng)
        self.temporal = ViTEncoder(temporal, rng)
        dim = spatial.embed_dim + temporal.embed_dim
        self.head = ClassifierHead(dim, dim, rng)

    def embeddings(self, frames, flows, rng=None) -> Tuple[Tensor, Tensor]:
        es = readout(self.spatial(frames, rng), self.spatial_config.readout)
        et = readout(self.temporal(flows, rng), self.temporal_config.readout)
        return es, et

    def forward(self, frames, flows, rng=None) -> Tensor:
        es, et = self.embeddings(frames, flows, rng)
        return fuse_features(es, et, self.head)


def _fusion_layer_id(name: str, depth: int) -> int:
    return layer_id(name.split(".", 1)[1] if name.startswith(("spatial.", "temporal.")) else name, depth)


def finetune_feature_fusion(model: FeatureFusionModel, frames: np.ndarray, flows: np.ndarray,
                            labels, cfg: TrainConfig, on_epoch=None) -> FinetuneResult:
    """Train the joint model on (frame t, flow t) pairs; MixUp/CutMix are not applied."""
    depth = max(model.spatial_config.depth, model.temporal_config.depth)
    opt = _make_optimizer(model, lambda n: _fusion_layer_id(n, depth), depth + 1, cfg)
    labels = np.asarray(labels, dtype=np.float64)
    losses = _train_loop(model, lambda xs, rng: model(xs[0], xs[1], rng),
                         [np.asarray(frames, dtype=np.float64), np.asarray(flows, dtype=np.float64)],
                         labels, cfg, opt, on_epoch)
    return FinetuneResult(model, opt, losses)


def predict_feature_fusion(model: FeatureFusionModel, frames: np.ndarray, flows: np.ndarray,
                           batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    with T.no_grad():
        for start in range(0, len(frames), batch_size):
            sl = slice(start, start + batch_size)
            out.append(model(frames[sl], flows[sl]).data.copy())
    logits = np.concatenate(out)
    return 1.0 / (1.0 + np.exp(-logits))


# ---------------------------------------------------------------------------
# video-level prediction
# ---------------------------------------------------------------------------

@dataclass
class VideoPrediction:
    score: float
    spatial_scores: np.ndarray        # per frame, length T
    temporal_scores: np.ndarray       # per flow pair, length T-1 (empty in spatial_only)
    fused_scores: np.ndarray          # per pair (or per frame in spatial_only)

    @property
    def spatial_score(self) -> float:
        return float(self.spatial_scores.mean())

    @property
    def temporal_score(self) -> float:
        return float(self.temporal_scores.mean()) if len(self.temporal_scores) else float("nan")


def predict_video(clip, spatial: BranchModel, temporal: Optional[BranchModel],
                  fusion: FusionConfig = FusionConfig(), flow_imgs: Optional[np.ndarray] = None,
                  flow_params: FlowParams = FlowParams(),
                  feature_model: Optional[FeatureFusionModel] = None) -> VideoPrediction:
    """Score a clip (a :class:`~masdt.data.Clip` or a (T,3,H,W) array).

    Pair ``t`` fuses the spatial score of frame ``t`` with the temporal score
    of flow ``t``; the video score is the mean over pairs. ``spatial_only``
    never touches the temporal branch or any flow.
    """
    frames = np.asarray(getattr(clip, "frames", clip), dtype=np.float64)
    n = len(frames)
    if fusion.mode == "spatial_only":
        if n < 1:
            raise ValueError("clip has no frames")
        s = predict_proba(spatial, frames)
        return VideoPrediction(float(s.mean()), s, np.zeros(0), s.copy())
    if n < 2:
        raise ValueError(f"fused prediction needs at least 2 frames, got {n}")
    if flow_imgs is None:
        flow_imgs = flow_images(clip_flow_fields(frames, flow_params), flow_params.max_displacement)
    if len(flow_imgs) != n - 1:
        raise ValueError(f"{len(flow_imgs)} flow images for {n} frames")
    if fusion.mode == "feature":
        if feature_model is None:
            raise ValueError("feature fusion needs a trained FeatureFusionModel")
        fused = predict_feature_fusion(feature_model, frames[:-1], flow_imgs)
        return VideoPrediction(float(fused.mean()), np.zeros(0), np.zeros(0), fused)
    if temporal is None:
        raise ValueError("score fusion needs a temporal branch")
    s = predict_proba(spatial, frames)
    t = predict_proba(temporal, flow_imgs)
    fused = fuse_scores(s[:-1], t, fusion.alpha)
    return VideoPrediction(float(np.mean(fused)), s, t, np.atleast_1d(fused))


def video_score(spatial_frames: np.ndarray, temporal_pairs: np.ndarray, alpha: float) -> float:
    """Video score from cached branch traces (same rule as :func:`predict_video`)."""
    return float(np.mean(fuse_scores(np.asarray(spatial_frames)[:len(temporal_pairs)],
                                     temporal_pairs, alpha)))


def alpha_sweep(spatial_traces: Sequence[np.ndarray], temporal_traces: Sequence[np.ndarray],
                labels: Sequence[int], grid: Optional[Sequence[float]] = None):
    """AUC of the fused video score for each alpha on a validation set.

    Returns (list of (alpha, auc), best alpha); ties resolve to the smallest alpha.
    """
    from masdt.evaluation.metrics import auc, roc_curve

    grid = [round(a, 10) for a in (np.linspace(0, 1, 11) if grid is None else grid)]
    rows = []
    for a in grid:
        scores = [video_score(s, t, a) for s, t in zip(spatial_traces, temporal_traces)]
        rows.append((float(a), auc(roc_curve(scores, labels))))
    best = max(rows, key=lambda r: (r[1], -r[0]))[0]
    return rows, best
