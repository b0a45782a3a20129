"""Adam with bias correction, keyed by parameter name for checkpointing."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .losses import TrainingAbort


class Adam:
    """Standard first/second-moment update over a named parameter dict.

    Moments live in float32 and are exposed as arrays, so a checkpoint
    round-trip reproduces the next step bit for bit.
    """

    def __init__(
        self,
        params: dict[str, T.Tensor],
        lr: float = 2e-4,
        beta1: float = 0.5,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros(p.shape, np.float32) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape, np.float32) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        """Apply one update to every parameter that received a gradient."""
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise TrainingAbort(f"non-finite gradient for parameter {name!r}")
            g = g.astype(np.float32, copy=False)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment buffers keyed m.<param> / v.<param>; step count travels separately."""
        out: dict[str, np.ndarray] = {}
        for name in self.params:
            out[f"m.{name}"] = self.m[name].copy()
            out[f"v.{name}"] = self.v[name].copy()
        return out

    def load_state(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.params:
            for prefix, store in (("m", self.m), ("v", self.v)):
                key = f"{prefix}.{name}"
                if key not in arrays:
                    raise KeyError(f"optimizer state missing {key!r}")
                if arrays[key].shape != store[name].shape:
                    raise ValueError(f"optimizer state {key!r} has shape {arrays[key].shape}, expected {store[name].shape}")
                store[name][:] = arrays[key]
        self.step_count = int(step_count)
