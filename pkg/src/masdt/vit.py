"""Vision transformer backbone shared by the spatial and temporal branches."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from masdt import tensor as T
from masdt.nn import LayerNorm, Linear, Module, trunc_normal
from masdt.tensor import Tensor, ShapeError


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    in_channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.1
    readout: str = "cls"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.readout not in ("cls", "mean"):
            raise ValueError(f"readout must be 'cls' or 'mean', got {self.readout!r}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError("drop_path_rate must lie in [0, 1)")

    @classmethod
    def vit_base(cls) -> "ViTConfig":
        return cls(image_size=224, patch_size=16, embed_dim=768, depth=12, num_heads=12)

    @property
    def grid(self) -> Tuple[int, int]:
        n = self.image_size // self.patch_size
        return (n, n)

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenSequence:
    tokens: Tensor  # (B, num_tokens, dim)
    grid: Tuple[int, int]
    has_cls: bool

    def __post_init__(self):
        expected = self.grid[0] * self.grid[1] + (1 if self.has_cls else 0)
        if self.tokens.shape[-2] != expected:
            raise ShapeError(f"{self.tokens.shape[-2]} tokens for grid {self.grid} (cls={self.has_cls})")


# ---------------------------------------------------------------------------
# patch geometry
# ---------------------------------------------------------------------------

def patchify(images: Union[Tensor, np.ndarray], patch_size: int):
    """(C,H,W) or (B,C,H,W) -> (N, P*P*C) or (B, N, P*P*C), row-major patches.

    Each patch row is flattened in (row, col, channel) order. Accepts a
    Tensor (differentiable) or a plain array.
    """
    is_tensor = isinstance(images, Tensor)
    shape = images.shape
    single = len(shape) == 3
    if single:
        images = images.reshape((1,) + tuple(shape))
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = images.reshape((b, c, gh, p, gw, p))
    axes = (0, 2, 4, 3, 5, 1)
    x = T.transpose(x, axes) if is_tensor else x.transpose(axes)
    x = x.reshape((b, gh * gw, p * p * c))
    return x.reshape((gh * gw, p * p * c)) if single else x


def unpatchify(patches: Union[Tensor, np.ndarray], grid: Tuple[int, int], patch_size: int):
    """Exact inverse of :func:`patchify`."""
    is_tensor = isinstance(patches, Tensor)
    single = patches.ndim == 2
    if single:
        patches = patches.reshape((1,) + tuple(patches.shape))
    b, n, d = patches.shape
    gh, gw = grid
    p = patch_size
    if n != gh * gw:
        raise ShapeError(f"{n} patches do not fill a {gh}x{gw} grid")
    if d % (p * p):
        raise ShapeError(f"patch length {d} incompatible with patch size {p}")
    c = d // (p * p)
    x = patches.reshape((b, gh, gw, p, p, c))
    axes = (0, 5, 1, 3, 2, 4)
    x = T.transpose(x, axes) if is_tensor else x.transpose(axes)
    x = x.reshape((b, c, gh * p, gw * p))
    return x.reshape((c, gh * p, gw * p)) if single else x


def pos_embed_2d(rows: int, cols: int, dim: int) -> np.ndarray:
    """Fixed 2-D sine-cosine embedding, shape (rows*cols, dim).

    The first half of the channels encodes the row index, the second half
    the column index, each as ``[sin(pos*w), cos(pos*w)]`` over ``dim/4``
    geometric frequencies.
    """
    if dim % 4:
        raise ValueError(f"embedding dim {dim} must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    rr, cc = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64),
                         indexing="ij")

    def encode(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([encode(rr), encode(cc)], axis=1)


def interpolate_pos_embed(embed: np.ndarray, old_grid: Tuple[int, int],
                          new_grid: Tuple[int, int]) -> np.ndarray:
    """Bilinear resampling of a (rows*cols, dim) grid embedding (corner-aligned)."""
    old_grid, new_grid = tuple(old_grid), tuple(new_grid)
    if min(old_grid + new_grid) < 1:
        raise ValueError("grids must be positive")
    if old_grid == new_grid:
        return embed.copy()
    (r0, c0), (r1, c1) = old_grid, new_grid
    grid = embed.reshape(r0, c0, -1)

    def coords(n_old, n_new):
        if n_new == 1 or n_old == 1:
            x = np.zeros(n_new)
        else:
            x = np.arange(n_new) * (n_old - 1) / (n_new - 1)
        lo = np.clip(np.floor(x).astype(int), 0, max(n_old - 2, 0))
        hi = np.minimum(lo + 1, n_old - 1)
        return lo, hi, x - lo

    rl, rh, rf = coords(r0, r1)
    cl, ch, cf = coords(c0, c1)
    rf = rf[:, None, None]
    cf = cf[None, :, None]
    top = grid[rl][:, cl] * (1 - cf) + grid[rl][:, ch] * cf
    bot = grid[rh][:, cl] * (1 - cf) + grid[rh][:, ch] * cf
    return (top * (1 - rf) + bot * rf).reshape(r1 * c1, -1)


# ---------------------------------------------------------------------------
# transformer blocks
# ---------------------------------------------------------------------------

class Attention(Module):
    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.num_heads
        qkv = self.qkv(x).reshape((b, n, 3, h, d // h))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = T.softmax(T.matmul(q, T.swapaxes(k, -1, -2)) * self.scale, axis=-1)
        out = T.transpose(T.matmul(attn, v), (0, 2, 1, 3)).reshape((b, n, d))
        return self.proj(out)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block with per-sample stochastic depth."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, drop_path: float,
                 rng: np.random.Generator):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, num_heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)
        self.drop_path = drop_path

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        x = x + T.drop_path(self.attn(self.norm1(x)), self.drop_path, rng, self.training)
        return x + T.drop_path(self.mlp(self.norm2(x)), self.drop_path, rng, self.training)


def drop_path_schedule(rate: float, depth: int) -> List[float]:
    # linearly increasing stochastic depth, as in the ViT/MAE fine-tuning recipe
    return [float(r) for r in np.linspace(0.0, rate, depth)]


class ViTEncoder(Module):
    """Patch embedding + CLS token + fixed positional embedding + blocks + final norm."""

    def __init__(self, config: ViTConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = Linear(config.patch_dim, d, rng)
        self.cls_token = T.parameter(trunc_normal(rng, (1, 1, d)))
        self.register_buffer("pos_embed", pos_embed_2d(*config.grid, d))
        rates = drop_path_schedule(config.drop_path_rate, config.depth)
        self.blocks = [Block(d, config.num_heads, config.mlp_ratio, r, rng) for r in rates]
        self.norm = LayerNorm(d)

    def embed_patches(self, patches: Tensor) -> Tensor:
        """(B, N, patch_dim) -> (B, N, dim) with positional embedding added."""
        if patches.shape[-1] != self.config.patch_dim:
            raise ShapeError(f"patch length {patches.shape[-1]} != {self.config.patch_dim}")
        return self.patch_embed(patches) + Tensor(self.buffer("pos_embed"))

    def prepend_cls(self, x: Tensor) -> Tensor:
        cls = T.broadcast_to(self.cls_token, (x.shape[0], 1, x.shape[-1]))
        return T.concat([cls, x], axis=1)

    def embed(self, images) -> TokenSequence:
        patches = patchify(T.as_tensor(images), self.config.patch_size)
        x = self.prepend_cls(self.embed_patches(patches))
        return TokenSequence(x, self.config.grid, True)

    def run_blocks(self, x: Tensor, rng: Optional[np.random.Generator] = None,
                   upto: Optional[int] = None) -> Tensor:
        blocks = self.blocks if upto is None else self.blocks[:upto]
        for blk in blocks:
            x = blk(x, rng)
        return x

    def encode(self, seq: TokenSequence, rng: Optional[np.random.Generator] = None) -> TokenSequence:
        if seq.tokens.shape[-1] != self.config.embed_dim:
            raise ShapeError(f"token dim {seq.tokens.shape[-1]} != embed_dim {self.config.embed_dim}")
        x = self.norm(self.run_blocks(seq.tokens, rng))
        return TokenSequence(x, seq.grid, seq.has_cls)

    def forward(self, images, rng: Optional[np.random.Generator] = None) -> TokenSequence:
        return self.encode(self.embed(images), rng)

    def load_encoder_state(self, state: dict, prefix: str = "encoder.") -> None:
        """Load encoder weights, interpolating the positional embedding on grid change."""
        own = dict(self.named_parameters())
        for name, p in own.items():
            key = prefix + name
            if key not in state:
                raise KeyError(f"checkpoint lacks {key}")
            value = np.asarray(state[key])
            if value.shape != p.shape:
                raise ShapeError(f"geometry mismatch for {key}: {value.shape} vs {p.shape}")
            p.data = value.copy()
        key = prefix + "pos_embed"
        if key in state:
            old = np.asarray(state[key])
            n_old = int(round(np.sqrt(old.shape[0])))
            self._buffers["pos_embed"] = interpolate_pos_embed(old, (n_old, n_old), self.config.grid)


def readout(latent: TokenSequence, mode: str = "cls") -> Tensor:
    """(B, dim) embedding from an encoded sequence."""
    if mode == "cls":
        if not latent.has_cls:
            raise ShapeError("cls readout needs a CLS token")
        return latent.tokens[:, 0]
    body = latent.tokens[:, 1:] if latent.has_cls else latent.tokens
    return T.mean(body, axis=1)


class ClassifierHead(Module):
    """Two-layer GELU MLP producing one logit per sample."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)
        self.fc2.weight.data = trunc_normal(rng, (hidden, 1))

    def forward(self, features: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(features))).reshape((features.shape[0],))


class ViTClassifier(Module):
    def __init__(self, config: ViTConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.encoder = ViTEncoder(config, rng)
        self.head = ClassifierHead(config.embed_dim, config.embed_dim, rng)

    def features(self, images, rng: Optional[np.random.Generator] = None) -> Tensor:
        return readout(self.encoder(images, rng), self.config.readout)

    def classify(self, latent: TokenSequence) -> Tensor:
        return self.head(readout(latent, self.config.readout))

    def forward(self, images, rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.head(self.features(images, rng))


_BLOCK_RE = re.compile(r"(?:^|\.)blocks\.(\d+)\.")


def layer_id(name: str, depth: int) -> int:
    """Depth index for layer decay: embeddings 0, block i -> i+1, norm/head -> depth+1."""
    m = _BLOCK_RE.search(name)
    if m:
        return int(m.group(1)) + 1
    if "patch_embed" in name or name.endswith("cls_token"):
        return 0
    return depth + 1
