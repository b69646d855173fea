"""Run configuration: nested JSON sections with defaults, typed overrides and validation.

Every key has a default, so an empty file is a complete configuration.
Overrides use dotted keys (``fusion.alpha``); errors always name the key.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

from masdt.checkpoint import canonical_json, fingerprint
from masdt.data import ARTIFACT_KINDS, SplitSpec
from masdt.detect import FUSION_MODES, FusionConfig, TrainConfig
from masdt.flow import FlowParams
from masdt.mae import MAEConfig
from masdt.vit import ViTConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _vit_defaults() -> dict:
    return ViTConfig().to_dict()


DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "spatial_vit": _vit_defaults(),
    "temporal_vit": _vit_defaults(),
    "mae": {
        "decoder_dim": 32,
        "decoder_depth": 2,
        "decoder_heads": 4,
        "mask_ratio": 0.9,
        "norm_per_patch": False,
        "loss_on": "masked",
        "epochs": 30,
        "batch_size": 16,
        "lr": 1e-3,
        "weight_decay": 0.05,
    },
    "flow": FlowParams(max_displacement=3.0).to_dict(),
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
    "fusion": {"alpha": 0.5, "mode": "score"},
    "split": {"train": 0.8, "val": 0.1, "test": 0.1, "stratify": True},
    "synth": {
        "n_pairs": 125,
        "frames": 4,
        "height": 32,
        "width": 32,
        "motion_step": 1.0,
        "kinds": list(ARTIFACT_KINDS),
    },
    "eval": {
        "compression_q": 0,
        "alpha_grid": [round(0.1 * i, 1) for i in range(11)],
        "saliency_clips": 20,
        "threshold": 0.5,
    },
}

# per-key constraints beyond type: (predicate, description)
_RANGES = {
    "fusion.alpha": (lambda v: 0.0 <= v <= 1.0, "must lie in [0, 1]"),
    "fusion.mode": (lambda v: v in FUSION_MODES, f"must be one of {list(FUSION_MODES)}"),
    "mae.mask_ratio": (lambda v: 0.0 <= v < 1.0, "must lie in [0, 1)"),
    "mae.loss_on": (lambda v: v in ("masked", "all"), "must be 'masked' or 'all'"),
    "train.label_smoothing": (lambda v: 0.0 <= v < 0.5, "must lie in [0, 0.5)"),
    "train.cutmix_prob": (lambda v: 0.0 <= v <= 1.0, "must lie in [0, 1]"),
    "train.switch_prob": (lambda v: 0.0 <= v <= 1.0, "must lie in [0, 1]"),
    "synth.kinds": (lambda v: len(v) > 0 and all(k in ARTIFACT_KINDS for k in v),
                    f"must be a non-empty subset of {list(ARTIFACT_KINDS)}"),
    "synth.frames": (lambda v: v >= 2, "must be >= 2"),
    "eval.compression_q": (lambda v: v >= 0, "must be >= 0 (0 disables degradation)"),
    "eval.alpha_grid": (lambda v: len(v) > 0 and all(0.0 <= a <= 1.0 for a in v),
                        "must be a non-empty list of values in [0, 1]"),
}
_POSITIVE = {
    "mae.epochs", "mae.batch_size", "mae.lr", "mae.decoder_dim", "mae.decoder_depth",
    "mae.decoder_heads", "train.batch_size", "train.lr", "synth.n_pairs", "synth.height",
    "synth.width", "synth.motion_step", "eval.saliency_clips",
}
_NONNEGATIVE = {"train.epochs", "train.weight_decay", "mae.weight_decay", "seed"}


def _coerce(key: str, value, default):
    """Check ``value`` against the type of ``default``, converting ints to floats."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(key, f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(key, f"expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(key, f"expected a number, got {value!r}")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(key, f"expected a string, got {value!r}")
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        if default:
            return [_coerce(f"{key}[{i}]", v, default[0]) for i, v in enumerate(value)]
        return list(value)
    raise ConfigError(key, "unsupported setting")


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    if not isinstance(update, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a JSON object")
    for key, value in update.items():
        full = prefix + key
        if key not in base:
            raise ConfigError(full, "unknown key")
        if isinstance(base[key], dict):
            _merge(base[key], value, full + ".")
        else:
            base[key] = _coerce(full, value, base[key])


def parse_value(text: str):
    """Command-line override text -> JSON value; bare words stay strings."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(tree: dict, key: str, value) -> None:
    parts = key.split(".")
    node = tree
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node.get(part), dict):
            raise ConfigError(key, "unknown key")
        node = node[part]
    last = parts[-1]
    if last not in node or isinstance(node[last], dict):
        raise ConfigError(key, "unknown key")
    node[last] = _coerce(key, value, node[last])


def _validate(tree: dict) -> None:
    for key, (ok, why) in _RANGES.items():
        section, name = key.split(".")
        if not ok(tree[section][name]):
            raise ConfigError(key, f"{why}, got {tree[section][name]!r}")
    for key in _POSITIVE | _NONNEGATIVE:
        section, _, name = key.partition(".")
        value = tree[section][name] if name else tree[section]
        if key in _POSITIVE and value <= 0:
            raise ConfigError(key, f"must be positive, got {value!r}")
        if key in _NONNEGATIVE and value < 0:
            raise ConfigError(key, f"must be >= 0, got {value!r}")
    # let the module types enforce the rest, reporting the section
    builders = {
        "spatial_vit": lambda s: ViTConfig(**s),
        "temporal_vit": lambda s: ViTConfig(**s),
        "flow": lambda s: FlowParams(**s),
        "train": lambda s: TrainConfig(**s),
        "fusion": lambda s: FusionConfig(**s),
        "split": lambda s: SplitSpec(seed=0, **s),
    }
    for section, build in builders.items():
        try:
            build(tree[section])
        except (ValueError, TypeError) as exc:
            raise ConfigError(section, str(exc)) from exc
    try:
        mae_config(tree)
    except (ValueError, TypeError) as exc:
        raise ConfigError("mae", str(exc)) from exc
    vit = tree["spatial_vit"]
    if tree["synth"]["height"] != vit["image_size"] or tree["synth"]["width"] != vit["image_size"]:
        raise ConfigError("synth.height", "synthetic frames must match spatial_vit.image_size")
    if tree["temporal_vit"]["image_size"] != vit["image_size"]:
        raise ConfigError("temporal_vit.image_size", "flow images share the frame size of spatial_vit")


def mae_config(tree: dict, branch: str = "spatial") -> MAEConfig:
    m = tree["mae"]
    encoder = ViTConfig(**{**tree[f"{branch}_vit"], "drop_path_rate": 0.0})
    return MAEConfig(encoder=encoder, decoder_dim=m["decoder_dim"], decoder_depth=m["decoder_depth"],
                     decoder_heads=m["decoder_heads"], mask_ratio=m["mask_ratio"],
                     norm_per_patch=m["norm_per_patch"], loss_on=m["loss_on"])


@dataclass(frozen=True)
class RunConfig:
    tree: dict

    @property
    def seed(self) -> int:
        return self.tree["seed"]

    def vit(self, branch: str) -> ViTConfig:
        return ViTConfig(**self.tree[f"{branch}_vit"])

    def mae(self, branch: str) -> MAEConfig:
        return mae_config(self.tree, branch)

    @property
    def flow(self) -> FlowParams:
        return FlowParams(**self.tree["flow"])

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.tree["train"])

    @property
    def fusion(self) -> FusionConfig:
        return FusionConfig(**self.tree["fusion"])

    @property
    def split(self) -> SplitSpec:
        return SplitSpec(seed=self.seed, **self.tree["split"])

    def section(self, name: str) -> dict:
        return copy.deepcopy(self.tree[name])

    def to_json(self) -> str:
        return canonical_json(self.tree)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.tree)


def default_tree() -> dict:
    return copy.deepcopy(DEFAULTS)


def build_config(data: Optional[dict] = None,
                 overrides: Iterable[Tuple[str, Any]] = ()) -> RunConfig:
    tree = default_tree()
    if data:
        _merge(tree, data)
    for key, value in overrides:
        _set_dotted(tree, key, value)
    _validate(tree)
    return RunConfig(tree)


def load_config(path=None, overrides: Iterable[Tuple[str, Any]] = ()) -> RunConfig:
    """JSON file (optional) then overrides, on top of the defaults."""
    data = None
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc}") from exc
        if text.strip():
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError("--config", f"{path} is not valid JSON: {exc}") from exc
    return build_config(data, overrides)
