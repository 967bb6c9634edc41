"""Named parameter storage with freeze flags, plus bias-corrected Adam."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, OptimizerError


class ParamStore:
    """Map of dotted names to tensors, each with a frozen flag.

    Frozen entries have requires_grad == False and are never touched by the
    optimizer, so their bytes stay identical across any number of steps.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}

    def add(self, name: str, tensor: Tensor, frozen: bool = False) -> Tensor:
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name '{name}'")
        tensor.requires_grad = not frozen
        self._entries[name] = tensor
        self._frozen[name] = bool(frozen)
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def names(self):
        return list(self._entries)

    def items(self):
        return list(self._entries.items())

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def set_frozen(self, name: str, frozen: bool) -> None:
        self._frozen[name] = bool(frozen)
        self._entries[name].requires_grad = not frozen
        if frozen:
            self._entries[name].grad = None

    def freeze_all(self) -> None:
        for name in self._entries:
            self.set_frozen(name, True)

    def unfreeze_all(self) -> None:
        for name in self._entries:
            self.set_frozen(name, False)

    def trainable_items(self):
        return [(n, t) for n, t in self._entries.items() if not self._frozen[n]]

    def zero_grads(self) -> None:
        for _, t in self.trainable_items():
            t.zero_grad()

    def clear_grads(self) -> None:
        for _, t in self.trainable_items():
            t.grad = None

    def num_params(self, trainable: bool | None = None) -> int:
        total = 0
        for n, t in self._entries.items():
            if trainable is None or (not self._frozen[n]) == trainable:
                total += t.data.size
        return total

    def snapshot(self) -> dict:
        return {n: t.data.copy() for n, t in self._entries.items()}

    def restore(self, snap: dict) -> None:
        for n, arr in snap.items():
            self._entries[n].data[...] = arr

    def fingerprint(self, prefix: str = "") -> str:
        """Hex digest over (name, shape, bytes) of matching entries, name-sorted."""
        h = hashlib.sha256()
        for name in sorted(self._entries):
            if not name.startswith(prefix):
                continue
            t = self._entries[name]
            h.update(name.encode())
            h.update(str(t.data.shape).encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class AdamState:
    """Adam hyperparameters plus per-parameter moment buffers.

    Moment buffers are created lazily, so they only ever exist for the
    (unfrozen) parameters that actually get stepped.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState) -> None:
    """One bias-corrected Adam update; grads are consumed (set to None)."""
    if isinstance(params, ParamStore):
        items = params.trainable_items()
    else:
        items = list(params.items())
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in items:
        if p.grad is None:
            raise OptimizerError(f"missing gradient for parameter '{name}'")
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            v = state.v[name] = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None
