"""ADAM with bias correction, and polynomial learning-rate annealing."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .diff import Tensor


def lr_schedule(step: int, total: int, lr0: float, power: float = 1.0) -> float:
    """``lr0 * (1 - step/total) ** power``."""
    if total < 1 or not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 * (1.0 - step / total) ** power


class Adam:
    """Per-parameter first/second moment accumulators and a shared step count."""

    def __init__(self, params: Mapping[str, Tensor], beta1: float = 0.5, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([self.t], dtype=np.int64)}
        for k in self.m:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load_arrays(self, records: Mapping[str, np.ndarray], prefix: str) -> None:
        self.t = int(records[f"{prefix}.t"][0])
        for k in self.m:
            self.m[k] = records[f"{prefix}.m.{k}"].copy()
            self.v[k] = records[f"{prefix}.v.{k}"].copy()
