"""Grad-CAM for the ViT branches.

The "feature map" is the token activation entering the last encoder block
(output of its first layer norm), CLS excluded. A token-level activation is
used because the CLS readout only sees patch tokens through that block's
attention; activations after it would carry no gradient to patch tokens.

Each token is weighted by its own channel-mean gradient, so the map is
``ReLU(mean_c(dL/dA_tc) * sum_c A_tc)``. Pooling the gradient over tokens
instead (the CNN recipe) mostly measures the activation offset that all
tokens share, and localizes poorly on a ViT.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np

from masdt import tensor as T
from masdt.tensor import Tensor
from masdt.vit import TokenSequence


@dataclass
class SaliencyMap:
    values: np.ndarray  # (rows, cols) in [0, 1]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.min(initial=0.0) < 0 or v.max(initial=0.0) > 1:
            raise ValueError("saliency values must be a 2-D grid in [0, 1]")
        self.values = v

    @property
    def shape(self):
        return self.values.shape

    def upsample(self, factor: int) -> np.ndarray:
        return np.kron(self.values, np.ones((factor, factor)))


def grad_cam(branch, image: np.ndarray, target: str = "fake") -> SaliencyMap:
    """Saliency of the fake logit (or its negation for ``target='real'``) over the patch grid."""
    model = getattr(branch, "model", branch)
    for name, p in model.named_parameters():
        if not np.isfinite(p.data).all():
            raise ValueError(f"parameter {name} is not finite")
    model.eval()
    enc = model.encoder
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    with T.no_grad():
        seq = enc.embed(image)
        x = enc.run_blocks(seq.tokens, upto=len(enc.blocks) - 1)
        last = enc.blocks[-1]
        acts = last.norm1(x).data
    a = Tensor(acts.copy(), requires_grad=True)
    h = x + last.attn(a)
    h = h + last.mlp(last.norm2(h))
    latent = TokenSequence(enc.norm(h), seq.grid, True)
    logit = model.classify(latent)
    score = T.tsum(logit) if target == "fake" else -T.tsum(logit)
    T.backward(score)
    grads = a.grad[0, 1:]
    model.zero_grad()
    weights = grads.mean(axis=1)
    cam = np.maximum(weights * acts[0, 1:].sum(axis=1), 0.0)
    peak = cam.max()
    cam = cam / peak if peak > 0 else np.zeros_like(cam)
    return SaliencyMap(cam.reshape(seq.grid))


def region_to_grid(region: np.ndarray, patch_size: int, min_cover: float = 0.5) -> np.ndarray:
    """Patch-grid mask of patches whose pixel coverage by ``region`` is at least ``min_cover``."""
    h, w = region.shape
    p = patch_size
    cover = region.reshape(h // p, p, w // p, p).mean(axis=(1, 3))
    return cover >= min_cover


def region_means(saliency: SaliencyMap, grid_mask: np.ndarray) -> Tuple[float, float]:
    """Mean saliency inside and outside the mask."""
    inside = saliency.values[grid_mask]
    outside = saliency.values[~grid_mask]
    if inside.size == 0 or outside.size == 0:
        raise ValueError("mask must split the grid into two non-empty parts")
    return float(inside.mean()), float(outside.mean())


def _ratio(inside: float, outside: float) -> float:
    return inside / outside if outside > 0 else float("inf")


def localization_ratio(saliency: SaliencyMap, grid_mask: np.ndarray) -> float:
    """Mean saliency inside the mask over mean saliency outside."""
    return _ratio(*region_means(saliency, grid_mask))


def pooled_ratio(means: Sequence[Tuple[float, float]]) -> float:
    """Inside/outside ratio of the per-map means averaged over many maps.

    Per-map ratios are unstable (a map that is zero outside gives inf), so
    the averages are taken before dividing.
    """
    if not means:
        raise ValueError("no saliency maps to pool")
    inside, outside = np.mean(np.asarray(means, dtype=np.float64), axis=0)
    return _ratio(float(inside), float(outside))


def write_pgm(saliency: SaliencyMap, path, scale: int = 1) -> Path:
    """Binary P5 grayscale, maxval 255."""
    values = saliency.upsample(scale) if scale > 1 else saliency.values
    pixels = np.round(values * 255).astype(np.uint8)
    h, w = pixels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    data = np.frombuffer(blob[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / maxval
