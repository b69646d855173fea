"""Synthetic forged clips, PNG frame directories, compression stressor and splits."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy.fft import dctn, idctn

logger = logging.getLogger(__name__)

LABELS = ("real", "fake")
ARTIFACT_KINDS = ("spatial", "temporal", "both")


@dataclass
class ArtifactMeta:
    kind: str
    region: np.ndarray  # (T, H, W) bool, where the fake may differ from its pair
    magnitude: float

    def to_json(self) -> dict:
        bits = np.packbits(self.region.astype(np.uint8).reshape(-1))
        return {"kind": self.kind, "magnitude": self.magnitude,
                "shape": list(self.region.shape), "region_bits": bits.tobytes().hex()}

    @classmethod
    def from_json(cls, obj: dict) -> "ArtifactMeta":
        shape = tuple(obj["shape"])
        n = int(np.prod(shape))
        bits = np.frombuffer(bytes.fromhex(obj["region_bits"]), dtype=np.uint8)
        region = np.unpackbits(bits)[:n].reshape(shape).astype(bool)
        return cls(obj["kind"], region, float(obj["magnitude"]))


@dataclass
class Clip:
    clip_id: str
    frames: np.ndarray  # (T, 3, H, W) in [0, 1]
    label: str
    artifact_meta: Optional[ArtifactMeta] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"clip {self.clip_id}: frames must be (T,3,H,W), got {self.frames.shape}")
        if len(self.frames) < 2:
            raise ValueError(f"clip {self.clip_id} needs at least 2 frames, got {len(self.frames)}")
        if self.label not in LABELS:
            raise ValueError(f"clip {self.clip_id}: label must be real or fake, got {self.label!r}")
        if self.label == "real" and self.artifact_meta is not None:
            raise ValueError(f"real clip {self.clip_id} cannot carry artifact metadata")

    @property
    def y(self) -> int:
        return int(self.label == "fake")

    def __len__(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------------------
# procedural face-blob scenes
# ---------------------------------------------------------------------------

def _sinusoids(rng, n, freq_lo, freq_hi, amp):
    theta = rng.uniform(0, 2 * np.pi, n)
    freq = rng.uniform(freq_lo, freq_hi, n)
    return {"kx": freq * np.cos(theta), "ky": freq * np.sin(theta),
            "phase": rng.uniform(0, 2 * np.pi, n), "amp": amp * rng.uniform(0.5, 1.0, n)}


def _eval_sinusoids(s, x, y):
    out = np.zeros_like(x)
    for kx, ky, ph, a in zip(s["kx"], s["ky"], s["phase"], s["amp"]):
        out += a * np.sin(kx * x + ky * y + ph)
    return out


def _sample_scene(rng: np.random.Generator, h: int, w: int, motion_step: float) -> dict:
    px = w / 32.0
    speed = rng.uniform(0.3, 0.7) * motion_step
    heading = rng.uniform(0, 2 * np.pi)
    a = rng.uniform(0.27, 0.32) * w
    b = rng.uniform(0.35, 0.40) * h
    # scale breathing: per-frame displacement at the face rim stays below 0.3 * motion_step
    scale_amp = 0.3 * motion_step / (1.6 * max(a, b) * 0.5)
    return {
        "bg_base": rng.uniform(0.2, 0.6, 3),
        "bg_tex": [_sinusoids(rng, 4, 0.15 / px, 0.6 / px, 0.08) for _ in range(3)],
        "center": np.array([h / 2 + rng.uniform(-2, 2) * px, w / 2 + rng.uniform(-2, 2) * px]),
        "velocity": speed * np.array([np.sin(heading), np.cos(heading)]),
        "radii": (a, b),
        "scale_amp": min(scale_amp, 0.04),
        "scale_freq": rng.uniform(0.4, 0.9),
        "scale_phase": rng.uniform(0, 2 * np.pi),
        "skin": np.array([0.78, 0.58, 0.46]) + rng.uniform(-0.12, 0.12, 3),
        "skin_tex": _sinusoids(rng, 3, 0.2 / px, 0.5 / px, 0.03),
        "shade": rng.uniform(-0.12, 0.12, 2) / max(a, b),
        "eye_y": rng.uniform(-0.35, -0.2) * b,
        "eye_x": rng.uniform(0.33, 0.45) * a,
        "eye_sigma": rng.uniform(0.07, 0.1) * w,
        "eye_dark": rng.uniform(0.45, 0.65),
        "mouth_y": rng.uniform(0.35, 0.5) * b,
        "mouth_w": rng.uniform(0.3, 0.45) * a,
        "mouth_dark": rng.uniform(0.3, 0.5),
    }


def _face_pose(scene: dict, t: float):
    center = scene["center"] + scene["velocity"] * t
    scale = 1.0 + scene["scale_amp"] * math.sin(scene["scale_freq"] * t + scene["scale_phase"])
    return center, scale


def _face_coords(scene, t, yy, xx):
    center, scale = _face_pose(scene, t)
    return (yy - center[0]) / scale, (xx - center[1]) / scale


def _render(scene: dict, t: float, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Render at arbitrary sample coordinates (so warped renders stay analytic)."""
    bg = np.stack([scene["bg_base"][c] + _eval_sinusoids(scene["bg_tex"][c], xx, yy)
                   for c in range(3)])
    ly, lx = _face_coords(scene, t, yy, xx)
    a, b = scene["radii"]
    r = np.sqrt((lx / a) ** 2 + (ly / b) ** 2)
    alpha = 1.0 / (1.0 + np.exp(np.clip((r - 1.0) * min(a, b) / 0.6, -50, 50)))
    tex = _eval_sinusoids(scene["skin_tex"], lx, ly)
    shade = 1.0 + scene["shade"][0] * lx + scene["shade"][1] * ly
    es = scene["eye_sigma"]
    eyes = sum(np.exp(-((lx - sx * scene["eye_x"]) ** 2 + (ly - scene["eye_y"]) ** 2) / (2 * es ** 2))
               for sx in (-1.0, 1.0))
    mouth = np.exp(-(lx / scene["mouth_w"]) ** 2 * 2 - ((ly - scene["mouth_y"]) / (0.07 * b)) ** 2)
    darken = 1.0 - scene["eye_dark"] * eyes - scene["mouth_dark"] * mouth
    face = (scene["skin"][:, None, None] * shade + tex) * darken
    out = alpha * face + (1.0 - alpha) * bg
    return np.clip(out, 0.0, 1.0)


def _sample_spatial_artifact(rng, scene, h, w):
    a, b = scene["radii"]
    px = w / 32.0
    return {
        "pos": np.array([rng.uniform(-0.35, 0.35) * b, rng.uniform(-0.4, 0.4) * a]),
        "half": rng.uniform(3.5, 5.0) * px,
        "tex": [_sinusoids(rng, 3, 0.9 / px, 1.8 / px, 0.25) for _ in range(3)],
        "color": rng.uniform(0.1, 0.9, 3),
        "blend": rng.uniform(0.55, 0.85),
        "grid": rng.uniform(0.12, 0.2),
    }


def _sample_temporal_artifact(rng, scene, h, w, frames):
    a, b = scene["radii"]
    px = w / 32.0
    jitter = rng.uniform(1.5, 2.5) * px
    return {
        "pos": np.array([rng.uniform(-0.3, 0.4) * b, rng.uniform(-0.35, 0.35) * a]),
        "radius": rng.uniform(6.0, 8.0) * px,
        "shift": rng.uniform(-1.0, 1.0, (frames, 2)) * jitter,
        "flicker": rng.uniform(-0.18, 0.18, frames),
        "jitter": jitter,
    }


def _spatial_layer(art, scene, t, yy, xx):
    """(coverage (H,W), foreign content (3,H,W)) of the pasted patch at time t."""
    ly, lx = _face_coords(scene, t, yy, xx)
    dy = np.abs(ly - art["pos"][0])
    dx = np.abs(lx - art["pos"][1])
    cov = np.clip(art["half"] - dy + 0.5, 0, 1) * np.clip(art["half"] - dx + 0.5, 0, 1)
    # pixel-grid checker: the upsampling fingerprint of a synthesized patch
    grid = art["grid"] * np.cos(np.pi * yy) * np.cos(np.pi * xx)
    foreign = np.stack([art["color"][c] + _eval_sinusoids(art["tex"][c], lx, ly) + grid for c in range(3)])
    return cov * art["blend"], np.clip(foreign, 0, 1)


def _temporal_window(art, scene, t, yy, xx):
    ly, lx = _face_coords(scene, t, yy, xx)
    d2 = (ly - art["pos"][0]) ** 2 + (lx - art["pos"][1]) ** 2
    return np.maximum(0.0, 1.0 - d2 / art["radius"] ** 2) ** 2


def generate_synthetic_clip(seed: int, label: str = "real", artifact: str = "spatial",
                            frames: int = 4, height: int = 32, width: int = 32,
                            motion_step: float = 1.0) -> Clip:
    """Procedural face-blob clip; a fake is its same-seed real twin plus artifacts.

    ``motion_step`` bounds the per-frame displacement (pixels at 32 px scale)
    of any point of the real scene.
    """
    if frames < 2:
        raise ValueError(f"a clip needs at least 2 frames, got {frames}")
    if label not in LABELS:
        raise ValueError(f"label must be real or fake, got {label!r}")
    if label == "fake" and artifact not in ARTIFACT_KINDS:
        raise ValueError(f"artifact kind must be one of {ARTIFACT_KINDS}, got {artifact!r}")
    scene_rng = np.random.default_rng([seed, 0])
    scene = _sample_scene(scene_rng, height, width, motion_step * width / 32.0)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)

    if label == "real":
        clip_frames = np.stack([_render(scene, t, yy, xx) for t in range(frames)])
        return Clip(f"real_{seed:06d}", clip_frames, "real")

    art_rng = np.random.default_rng([seed, 1])
    spatial = _sample_spatial_artifact(art_rng, scene, height, width) if artifact in ("spatial", "both") else None
    temporal = _sample_temporal_artifact(art_rng, scene, height, width, frames) if artifact in ("temporal", "both") else None
    out, region = [], []
    for t in range(frames):
        mask = np.zeros((height, width), dtype=bool)
        if temporal is not None:
            wdw = _temporal_window(temporal, scene, t, yy, xx)
            sy, sx = temporal["shift"][t]
            img = _render(scene, t, yy - wdw * sy, xx - wdw * sx)
            img = np.clip(img * (1.0 + wdw * temporal["flicker"][t]), 0, 1)
            mask |= wdw > 0
        else:
            img = _render(scene, t, yy, xx)
        if spatial is not None:
            cov, foreign = _spatial_layer(spatial, scene, t, yy, xx)
            img = img * (1 - cov) + foreign * cov
            mask |= cov > 0
        out.append(img)
        region.append(mask)
    magnitude = spatial["blend"] if temporal is None else temporal["jitter"]
    meta = ArtifactMeta(artifact, np.stack(region), float(magnitude))
    return Clip(f"fake_{artifact}_{seed:06d}", np.stack(out), "fake", meta)


def generate_dataset(n_pairs: int, seed: int, kinds: Sequence[str] = ARTIFACT_KINDS,
                     frames: int = 4, height: int = 32, width: int = 32,
                     motion_step: float = 1.0) -> List[Clip]:
    """``n_pairs`` real clips and their fake twins, artifact kinds cycled."""
    clips = []
    for i in range(n_pairs):
        s = seed + i
        clips.append(generate_synthetic_clip(s, "real", frames=frames, height=height, width=width,
                                             motion_step=motion_step))
        clips.append(generate_synthetic_clip(s, "fake", kinds[i % len(kinds)], frames, height, width,
                                             motion_step))
    return clips


# ---------------------------------------------------------------------------
# frame directories
# ---------------------------------------------------------------------------

def _to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def save_frames(clip: Clip, directory) -> Path:
    """Write ``frame_###.png`` files, ``label.txt`` and (fakes) ``artifact.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(clip.frames):
        Image.fromarray(_to_uint8(frame), mode="RGB").save(directory / f"frame_{t:03d}.png")
    (directory / "label.txt").write_text(clip.label + "\n")
    if clip.artifact_meta is not None:
        (directory / "artifact.json").write_text(
            json.dumps(clip.artifact_meta.to_json(), sort_keys=True) + "\n")
    return directory


def load_frames(directory) -> Clip:
    directory = Path(directory)
    label_path = directory / "label.txt"
    if not label_path.is_file():
        raise FileNotFoundError(f"missing label file: {label_path}")
    label = label_path.read_text().strip()
    if label not in LABELS:
        raise ValueError(f"{label_path}: label must be 'real' or 'fake', got {label!r}")
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG frames in {directory}")
    frames = []
    for p in paths:
        try:
            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except OSError as exc:
            raise OSError(f"cannot read frame {p}: {exc}") from exc
        if frames and arr.shape != frames[0].shape:
            raise ValueError(f"frame {p} has size {arr.shape[:2]}, expected {frames[0].shape[:2]}")
        frames.append(arr)
    meta = None
    meta_path = directory / "artifact.json"
    if label == "fake" and meta_path.is_file():
        meta = ArtifactMeta.from_json(json.loads(meta_path.read_text()))
    return Clip(directory.name, np.stack(frames).transpose(0, 3, 1, 2), label, meta)


# ---------------------------------------------------------------------------
# compression stressor
# ---------------------------------------------------------------------------

# the standard JPEG luminance table (quality 50)
JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def _quant_table(block: int) -> np.ndarray:
    """JPEG table relative to its DC entry, resampled for non-8 block sizes."""
    if block == 8:
        return JPEG_LUMA / 16.0
    idx = np.minimum((np.arange(block) * 8) // block, 7)
    return JPEG_LUMA[np.ix_(idx, idx)] / 16.0


def degrade_compression(frame: np.ndarray, q: int, block: int = 8) -> np.ndarray:
    """Block-DCT quantization of the AC coefficients, JPEG-style.

    Coefficients are orthonormal DCTs of 0..255-scaled pixels. Coefficient
    (i, j) is quantized with step ``(q - 1) * JPEG_LUMA[i, j] / 16``, so
    ``q == 1`` is lossless and fine detail goes first as ``q`` grows. The DC
    term is kept, so a very large ``q`` leaves every block at its mean.

    A block whose quantized reconstruction leaves [0, 1] has its AC multiples
    shrunk toward zero one step at a time until it fits, instead of being
    clipped. Outputs therefore stay on the quantization lattice and a second
    application at the same ``q`` changes nothing.
    """
    if int(q) != q or q < 1:
        raise ValueError(f"quantization strength must be an integer >= 1, got {q}")
    frame = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    squeeze = frame.ndim == 2
    img = frame[None] if squeeze else frame
    c, h, w = img.shape
    ph, pw = -h % block, -w % block
    padded = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge") * 255.0
    H, W = padded.shape[1:]
    blocks = padded.reshape(c, H // block, block, W // block, block).transpose(0, 1, 3, 2, 4)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    if q > 1:
        step = (q - 1) * _quant_table(block)
        dc = coef[..., 0, 0].copy()
        mult = np.round(coef / step)
        mult[..., 0, 0] = 0.0

        def rebuild(m):
            k = m * step
            k[..., 0, 0] = dc
            return idctn(k, axes=(-2, -1), norm="ortho")

        rec = rebuild(mult)
        tol = 255.0 * 1e-9
        bad = (rec.min(axis=(-2, -1)) < -tol) | (rec.max(axis=(-2, -1)) > 255.0 + tol)
        while bad.any():
            mult[bad] -= np.sign(mult[bad])
            rec = rebuild(mult)
            bad = (rec.min(axis=(-2, -1)) < -tol) | (rec.max(axis=(-2, -1)) > 255.0 + tol)
    else:
        rec = blocks
    rec = rec.transpose(0, 1, 3, 2, 4).reshape(c, H, W)[:, :h, :w] / 255.0
    rec = np.clip(rec, 0.0, 1.0)  # only float round-off remains to remove
    return rec[0] if squeeze else rec


def degrade_clip(clip: Clip, q: int) -> Clip:
    frames = np.stack([degrade_compression(f, q) for f in clip.frames])
    return Clip(clip.clip_id, frames, clip.label, clip.artifact_meta)


# ---------------------------------------------------------------------------
# splits and manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 0
    stratify: bool = True

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be positive and sum to 1, got {fr}")


def _allocate(n: int, spec: SplitSpec) -> Tuple[int, int, int]:
    n_train = int(round(spec.train * n))
    n_val = int(round(spec.val * n))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def split_dataset(clips: Sequence[Clip], spec: SplitSpec) -> Tuple[List[Clip], List[Clip], List[Clip]]:
    rng = np.random.default_rng(spec.seed)
    groups = [[c for c in clips if c.label == lab] for lab in LABELS] if spec.stratify else [list(clips)]
    train, val, test = [], [], []
    for group in groups:
        if not group:
            continue
        order = rng.permutation(len(group))
        a, b, _ = _allocate(len(group), spec)
        train += [group[i] for i in order[:a]]
        val += [group[i] for i in order[a:a + b]]
        test += [group[i] for i in order[a + b:]]
    return train, val, test


def write_manifest(entries: List[Dict[str, str]], path) -> None:
    Path(path).write_text(json.dumps({"clips": entries}, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> List[Dict[str, str]]:
    obj = json.loads(Path(path).read_text())
    clips = obj.get("clips")
    if not isinstance(clips, list):
        raise ValueError(f"{path}: manifest must hold a 'clips' list")
    for entry in clips:
        missing = {"id", "path", "label", "split"} - set(entry)
        if missing:
            raise ValueError(f"{path}: manifest entry lacks {sorted(missing)}")
    return clips
