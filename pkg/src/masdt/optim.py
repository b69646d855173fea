"""AdamW with decoupled weight decay and layer-wise learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from masdt.tensor import ShapeError, Tensor


@dataclass
class AdamWState:
    lr: float = 5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    layer_decay: float = 0.8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]],
               state: AdamWState, lr_scales: Optional[Sequence[float]] = None,
               decay: Optional[Sequence[bool]] = None) -> None:
    """One in-place AdamW update over parallel lists of arrays.

    ``lr_scales[i]`` multiplies the base learning rate for parameter ``i``
    (layer decay); ``decay[i]`` switches weight decay for it. A ``None``
    gradient counts as zero.
    """
    n = len(params)
    if len(grads) != n:
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    lr_scales = lr_scales if lr_scales is not None else [1.0] * n
    decay = decay if decay is not None else [True] * n
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, p in enumerate(params):
        g = grads[i]
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"parameter {i}: shape {p.shape} vs grad {g.shape}")
        lr = state.lr * lr_scales[i]
        if decay[i] and state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        m, v = state.m[i], state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def layer_scales(names: Sequence[str], layer_of: Callable[[str], int], num_layers: int,
                 layer_decay: float) -> List[float]:
    """``layer_decay ** (num_layers - depth)`` for each parameter name."""
    return [layer_decay ** (num_layers - layer_of(n)) for n in names]


def default_no_decay(name: str, p: Tensor) -> bool:
    # biases, norm affines and learned tokens are exempt, as in the MAE recipe
    return p.ndim <= 1 or name.endswith("token")


class AdamW:
    """Stateful wrapper binding :func:`adamw_step` to named parameters."""

    def __init__(self, named_params, lr: float = 5e-4, weight_decay: float = 0.05,
                 betas=(0.9, 0.999), eps: float = 1e-8, layer_decay: float = 1.0,
                 layer_of: Optional[Callable[[str], int]] = None, num_layers: int = 0,
                 no_decay: Callable[[str, Tensor], bool] = default_no_decay):
        named = list(named_params)
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.state = AdamWState(lr=lr, weight_decay=weight_decay, beta1=betas[0],
                                beta2=betas[1], eps=eps, layer_decay=layer_decay)
        if layer_of is not None and layer_decay != 1.0:
            self.lr_scales = layer_scales(self.names, layer_of, num_layers, layer_decay)
        else:
            self.lr_scales = [1.0] * len(self.params)
        self.decay = [not no_decay(n, p) for n, p in named]

    def step(self) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params],
                   self.state, self.lr_scales, self.decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> Dict[str, object]:
        arrays = {}
        for name, m, v in zip(self.names, self.state.m, self.state.v):
            arrays[f"m/{name}"] = m.copy()
            arrays[f"v/{name}"] = v.copy()
        s = self.state
        hyper = {"lr": s.lr, "weight_decay": s.weight_decay, "beta1": s.beta1,
                 "beta2": s.beta2, "eps": s.eps, "layer_decay": s.layer_decay, "step": s.step}
        return {"hyper": hyper, "arrays": arrays}

    def load_state_dict(self, state: Dict[str, object]) -> None:
        hyper = state["hyper"]
        for key in ("lr", "weight_decay", "beta1", "beta2", "eps", "layer_decay"):
            setattr(self.state, key, float(hyper[key]))
        self.state.step = int(hyper["step"])
        arrays = state["arrays"]
        if arrays:
            self.state.m = [np.array(arrays[f"m/{n}"]) for n in self.names]
            self.state.v = [np.array(arrays[f"v/{n}"]) for n in self.names]
        else:
            self.state.m, self.state.v = [], []
