"""Masked-autoencoder pre-training for either branch (RGB frames or flow images)."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from masdt import tensor as T
from masdt.nn import LayerNorm, Linear, Module, trunc_normal
from masdt.optim import AdamW
from masdt.tensor import ShapeError, Tensor
from masdt.vit import Block, ViTConfig, ViTEncoder, patchify, pos_embed_2d

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatchMask:
    total: int
    ratio: float
    visible_idx: Tuple[int, ...]
    masked_idx: Tuple[int, ...]
    seed: int


@dataclass(frozen=True)
class MAEConfig:
    encoder: ViTConfig = field(default_factory=lambda: ViTConfig(drop_path_rate=0.0))
    decoder_dim: int = 32
    decoder_depth: int = 2
    decoder_heads: int = 4
    mask_ratio: float = 0.9
    norm_per_patch: bool = False
    loss_on: str = "masked"

    def __post_init__(self):
        if self.decoder_dim <= 0 or self.decoder_depth <= 0:
            raise ValueError("decoder geometry must be positive")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.loss_on not in ("masked", "all"):
            raise ValueError("loss_on must be 'masked' or 'all'")

    def to_dict(self) -> dict:
        return asdict(self)


def num_visible(total: int, ratio: float) -> int:
    return max(1, int(math.floor((1.0 - ratio) * total + 1e-9)))


def random_mask(total: int, ratio: float, seed: int) -> PatchMask:
    """Uniformly random visible subset of ``total`` patches, fixed by ``seed``."""
    if total < 1:
        raise ValueError("need at least one patch")
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(total)
    k = num_visible(total, ratio)
    return PatchMask(total, ratio, tuple(sorted(int(i) for i in order[:k])),
                     tuple(sorted(int(i) for i in order[k:])), seed)


def masked_patch_loss(pred: Tensor, target: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean over selected patches of the per-patch pixel MSE.

    ``pred`` is (B, N, D), ``target`` the same shape, ``loss_mask`` (B, N)
    with 1 where a patch counts.
    """
    diff = pred - Tensor(target)
    per_patch = T.mean(diff * diff, axis=-1)
    weights = np.asarray(loss_mask, dtype=np.float64)
    total = weights.sum()
    if total == 0:
        raise ValueError("loss mask selects no patches")
    return T.tsum(per_patch * Tensor(weights)) * (1.0 / total)


def normalize_patches(patches: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mu) / np.sqrt(var + eps)


class MaskedAutoencoder(Module):
    """Asymmetric encoder/decoder: the encoder only ever sees visible patches."""

    def __init__(self, config: MAEConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        enc = config.encoder
        self.encoder = ViTEncoder(enc, rng)
        dd = config.decoder_dim
        self.decoder_embed = Linear(enc.embed_dim, dd, rng)
        self.mask_token = T.parameter(trunc_normal(rng, (1, 1, dd)))
        pos = pos_embed_2d(*enc.grid, dd)
        self.register_buffer("decoder_pos_embed", np.concatenate([np.zeros((1, dd)), pos]))
        self.decoder_blocks = [Block(dd, config.decoder_heads, 4.0, 0.0, rng)
                               for _ in range(config.decoder_depth)]
        self.decoder_norm = LayerNorm(dd)
        self.decoder_pred = Linear(dd, enc.patch_dim, rng)

    def encode_visible(self, images, visible: np.ndarray) -> Tensor:
        """Encoded tokens (B, 1 + n_vis, dim): CLS first, then visible patches in index order."""
        patches = patchify(T.as_tensor(images), self.config.encoder.patch_size)
        b = patches.shape[0]
        tokens = self.encoder.embed_patches(patches)
        rows = np.arange(b)[:, None]
        kept = tokens[rows, visible]
        x = self.encoder.prepend_cls(kept)
        return self.encoder.norm(self.encoder.run_blocks(x))

    def decode(self, latent: Tensor, visible: np.ndarray, masked: np.ndarray) -> Tensor:
        """Scatter visible latents back to their slots, fill the rest with mask tokens."""
        b = latent.shape[0]
        x = self.decoder_embed(latent)
        n_masked = masked.shape[1]
        fill = T.broadcast_to(self.mask_token, (b, n_masked, self.config.decoder_dim))
        body = T.concat([x[:, 1:], fill], axis=1)
        order = np.concatenate([visible, masked], axis=1)
        restore = np.argsort(order, axis=1, kind="stable")
        body = body[np.arange(b)[:, None], restore]
        x = T.concat([x[:, :1], body], axis=1) + Tensor(self.buffer("decoder_pos_embed"))
        for blk in self.decoder_blocks:
            x = blk(x)
        x = self.decoder_pred(self.decoder_norm(x))
        return x[:, 1:]

    def forward(self, images, masks: Sequence[PatchMask], target=None) -> Tuple[Tensor, Tensor]:
        """Returns (predicted patches (B, N, patch_dim), scalar loss).

        ``target`` defaults to ``images``; passing it separately lets callers
        corrupt the encoder input without touching the reconstruction target.
        """
        images = T.as_tensor(images)
        if images.ndim == 3:
            images = images.reshape((1,) + images.shape)
        n = self.config.encoder.num_patches
        if len(masks) != images.shape[0]:
            raise ShapeError(f"{len(masks)} masks for batch of {images.shape[0]}")
        for m in masks:
            if m.total != n:
                raise ShapeError(f"mask over {m.total} patches, image has {n}")
        visible = np.array([m.visible_idx for m in masks], dtype=np.int64)
        masked = np.array([m.masked_idx for m in masks], dtype=np.int64).reshape(len(masks), -1)
        latent = self.encode_visible(images, visible)
        pred = self.decode(latent, visible, masked)

        tgt = images.data if target is None else np.asarray(
            target.data if isinstance(target, Tensor) else target, dtype=np.float64)
        if tgt.ndim == 3:
            tgt = tgt[None]
        tgt = patchify(tgt, self.config.encoder.patch_size)
        if self.config.norm_per_patch:
            tgt = normalize_patches(tgt)
        if self.config.loss_on == "masked" and masked.shape[1] > 0:
            loss_mask = np.zeros((len(masks), n))
            np.put_along_axis(loss_mask, masked, 1.0, axis=1)
        else:
            loss_mask = np.ones((len(masks), n))
        return pred, masked_patch_loss(pred, tgt, loss_mask)


@dataclass
class PretrainResult:
    model: MaskedAutoencoder
    optimizer: AdamW
    losses: List[Tuple[int, float]]

    def log_csv(self) -> str:
        return "epoch,loss\n" + "".join(f"{e},{v!r}\n" for e, v in self.losses)


def evaluate_masked_mse(model: MaskedAutoencoder, images: np.ndarray, seed: int,
                        batch_size: int = 64) -> float:
    """Masked MSE over a dataset with masks fixed by ``seed`` (one per image)."""
    n_patch = model.config.encoder.num_patches
    ratio = model.config.mask_ratio
    total, count = 0.0, 0
    model.eval()
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            batch = images[start:start + batch_size]
            masks = [random_mask(n_patch, ratio, seed * 1_000_003 + start + i)
                     for i in range(len(batch))]
            _, loss = model(batch, masks)
            total += loss.item() * len(batch)
            count += len(batch)
    return total / count


def pretrain(images: np.ndarray, config: MAEConfig, epochs: int, seed: int,
             batch_size: int = 16, lr: float = 1e-3, weight_decay: float = 0.05,
             on_epoch: Optional[Callable[[int, float], None]] = None) -> PretrainResult:
    """Self-supervised reconstruction training.

    Logged loss per epoch is the masked MSE on ``images`` under a fixed
    evaluation mask set, so epoch 0 (before any update) and later epochs are
    directly comparable.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("pre-training dataset is empty")
    rng = np.random.default_rng(seed)
    model = MaskedAutoencoder(config, np.random.default_rng([seed, 1]))
    opt = AdamW(model.named_parameters(), lr=lr, weight_decay=weight_decay)
    eval_seed = seed + 7
    losses = [(0, evaluate_masked_mse(model, images, eval_seed))]
    n_patch = config.encoder.num_patches
    for epoch in range(1, epochs + 1):
        model.train()
        order = rng.permutation(len(images))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            masks = [random_mask(n_patch, config.mask_ratio, int(s))
                     for s in rng.integers(0, 2**62, size=len(idx))]
            opt.zero_grad()
            _, loss = model(images[idx], masks)
            T.backward(loss)
            opt.step()
        value = evaluate_masked_mse(model, images, eval_seed)
        losses.append((epoch, value))
        logger.info("pretrain epoch %d masked mse %.5f", epoch, value)
        if on_epoch:
            on_epoch(epoch, value)
    return PretrainResult(model, opt, losses)


def default_config(encoder: ViTConfig, **overrides) -> MAEConfig:
    # pre-training never uses stochastic depth on the encoder
    return MAEConfig(encoder=replace(encoder, drop_path_rate=0.0), **overrides)
