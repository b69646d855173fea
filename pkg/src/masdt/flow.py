"""Coarse-to-fine Horn-Schunck optical flow and its 3-channel image encoding.

Convention: ``f_t(x) ~= f_t1(x + flow(x))``, so content moving right by two
pixels produces ``u = +2``, and :func:`warp` of ``f_t1`` by the flow
reconstructs ``f_t``.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np
from scipy import ndimage

FLOW_MAGIC = b"MFLW"
FLOW_VERSION = 1

# Horn & Schunck's neighbourhood average (centre excluded)
_HS_KERNEL = np.array([[1, 2, 1], [2, 0, 2], [1, 2, 1]], dtype=np.float64) / 12.0


@dataclass(frozen=True)
class FlowParams:
    smoothness: float = 0.1
    iterations: int = 100
    levels: int = 3
    downscale: float = 0.5
    max_displacement: float = 4.0

    def __post_init__(self):
        if self.smoothness <= 0 or self.iterations <= 0 or self.levels < 1:
            raise ValueError("flow parameters must be positive")
        if not 0.0 < self.downscale < 1.0:
            raise ValueError("downscale must lie in (0, 1)")
        if self.max_displacement <= 0:
            raise ValueError("max_displacement must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError(f"flow components must be matching 2-D arrays, got {self.u.shape}/{self.v.shape}")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise ValueError("flow field contains non-finite values")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.u.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)

    def __neg__(self) -> "FlowField":
        return FlowField(-self.u, -self.v)


def to_grayscale(frame: np.ndarray) -> np.ndarray:
    """(3,H,W) RGB -> (H,W) luminance; 2-D input passes through."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    if frame.ndim == 3 and frame.shape[0] == 3:
        return 0.299 * frame[0] + 0.587 * frame[1] + 0.114 * frame[2]
    raise ValueError(f"expected (H,W) or (3,H,W) frame, got {frame.shape}")


def warp(frame: np.ndarray, field: FlowField) -> np.ndarray:
    """Bilinear backward warp: ``out(x) = frame(x + flow(x))``, border-clamped."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != field.shape:
        raise ValueError(f"frame {frame.shape} and flow {field.shape} differ")
    h, w = frame.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([yy + field.v, xx + field.u])
    return ndimage.map_coordinates(frame, coords, order=1, mode="nearest")


def _pyramid(img: np.ndarray, levels: int, downscale: float) -> List[np.ndarray]:
    pyr = [img]
    sigma = 1.0 / (2.0 * downscale)
    for _ in range(levels - 1):
        smooth = ndimage.gaussian_filter(pyr[-1], sigma, mode="nearest")
        h, w = smooth.shape
        shape = (max(1, int(round(h * downscale))), max(1, int(round(w * downscale))))
        pyr.append(_resize(smooth, shape))
    return pyr


def _resize(img: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Pixel-centre-aligned bilinear resize."""
    h, w = img.shape
    nh, nw = shape
    ys = (np.arange(nh) + 0.5) * h / nh - 0.5
    xs = (np.arange(nw) + 0.5) * w / nw - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


def _upsample_flow(field: FlowField, shape: Tuple[int, int]) -> FlowField:
    sy = shape[0] / field.shape[0]
    sx = shape[1] / field.shape[1]
    return FlowField(_resize(field.u, shape) * sx, _resize(field.v, shape) * sy)


def _hs_refine(f0: np.ndarray, f1: np.ndarray, init: FlowField, params: FlowParams) -> FlowField:
    warped = warp(f1, init)
    avg = 0.5 * (f0 + warped)
    iy, ix = np.gradient(avg)
    it = warped - f0
    u0, v0 = init.u, init.v
    u, v = u0.copy(), v0.copy()
    denom = params.smoothness + ix * ix + iy * iy
    for _ in range(params.iterations):
        ub = ndimage.correlate(u, _HS_KERNEL, mode="nearest")
        vb = ndimage.correlate(v, _HS_KERNEL, mode="nearest")
        r = (ix * (ub - u0) + iy * (vb - v0) + it) / denom
        u = ub - ix * r
        v = vb - iy * r
    return FlowField(u, v)


def _check_frames(f_t, f_t1) -> Tuple[np.ndarray, np.ndarray]:
    a, b = to_grayscale(f_t), to_grayscale(f_t1)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("frames contain non-finite pixels")
    return a, b


def estimate_flow_levels(f_t: np.ndarray, f_t1: np.ndarray,
                         params: FlowParams = FlowParams()) -> List[FlowField]:
    """Flow after each pyramid level (coarsest first), each at full resolution."""
    a, b = _check_frames(f_t, f_t1)
    coarsest = min(a.shape) * params.downscale ** (params.levels - 1)
    if coarsest < 8 - 1e-9:
        raise ValueError(f"{params.levels} levels shrink a {a.shape} frame below 8 px")
    pa = _pyramid(a, params.levels, params.downscale)
    pb = _pyramid(b, params.levels, params.downscale)
    field = FlowField(np.zeros(pa[-1].shape), np.zeros(pa[-1].shape))
    history = []
    for level in range(params.levels - 1, -1, -1):
        if field.shape != pa[level].shape:
            field = _upsample_flow(field, pa[level].shape)
        field = _hs_refine(pa[level], pb[level], field, params)
        history.append(field if level == 0 else _upsample_flow(field, a.shape))
    return history


def estimate_flow(f_t: np.ndarray, f_t1: np.ndarray, params: FlowParams = FlowParams()) -> FlowField:
    """Dense flow from ``f_t`` to ``f_t1`` (RGB or grayscale frames in [0, 1])."""
    return estimate_flow_levels(f_t, f_t1, params)[-1]


def flow_to_image(field: FlowField, max_displacement: float) -> np.ndarray:
    """(3,H,W) image in [0,1]: clamped u, clamped v, clamped magnitude."""
    d = float(max_displacement)
    if d <= 0:
        raise ValueError("max_displacement must be positive")
    u = np.clip(field.u, -d, d) / d
    v = np.clip(field.v, -d, d) / d
    mag = np.minimum(field.magnitude(), d) / d
    return np.stack([0.5 * (u + 1.0), 0.5 * (v + 1.0), mag])


def clip_flow_fields(frames: np.ndarray, params: FlowParams = FlowParams()) -> List[FlowField]:
    """One field per consecutive frame pair (T frames -> T-1 fields)."""
    return [estimate_flow(frames[t], frames[t + 1], params) for t in range(len(frames) - 1)]


def flow_images(fields: List[FlowField], max_displacement: float) -> np.ndarray:
    return np.stack([flow_to_image(f, max_displacement) for f in fields])


# ---------------------------------------------------------------------------
# cache files
# ---------------------------------------------------------------------------

def encode_flow(field: FlowField) -> bytes:
    h, w = field.shape
    header = FLOW_MAGIC + struct.pack("<HII", FLOW_VERSION, h, w)
    return (header + field.u.astype("<f4").tobytes()
            + field.v.astype("<f4").tobytes())


def decode_flow(blob: bytes) -> FlowField:
    if len(blob) < 14 or blob[:4] != FLOW_MAGIC:
        raise ValueError("not a flow cache record (bad magic)")
    version, h, w = struct.unpack("<HII", blob[4:14])
    if version != FLOW_VERSION:
        raise ValueError(f"unsupported flow cache version {version}")
    n = h * w
    if len(blob) != 14 + 8 * n:
        raise ValueError(f"flow record truncated: expected {14 + 8 * n} bytes, got {len(blob)}")
    u = np.frombuffer(blob, dtype="<f4", count=n, offset=14).reshape(h, w)
    v = np.frombuffer(blob, dtype="<f4", count=n, offset=14 + 4 * n).reshape(h, w)
    return FlowField(u.astype(np.float64), v.astype(np.float64))


def quantize_field(field: FlowField) -> FlowField:
    """Round-trip through the float32 cache precision."""
    return FlowField(field.u.astype(np.float32).astype(np.float64),
                     field.v.astype(np.float32).astype(np.float64))


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_flow(field: FlowField, path) -> None:
    atomic_write(path, encode_flow(field))


def load_flow(path) -> FlowField:
    return decode_flow(Path(path).read_bytes())
