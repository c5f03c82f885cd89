"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import GradTape, Tensor, backward


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    shrunk: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def failures(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v < self.tolerance]


KINK_OPS = ("relu", "leaky_relu", "abs", "clamp")


def activation_pattern(tape: GradTape) -> bytes:
    """Digest of which side of its kink every piecewise primitive sat on."""
    h = hashlib.blake2b(digest_size=16)
    for rec in tape.records:
        if rec.op not in KINK_OPS:
            continue
        x = rec.inputs[0].data
        if rec.op == "clamp":
            side = rec.output.data != x
        else:
            side = x > 0
        h.update(np.packbits(side).tobytes())
    return h.digest()


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    denom = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / denom


def grad_check(fn: Callable[[], Tensor], params: Mapping[str, Tensor],
               step: float = 1e-4, tolerance: float = 1e-4,
               max_entries: int | None = None, seed: int = 0,
               floor: float = 1e-6, max_shrink: int = 4) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` with central differences.

    ``fn`` must rebuild its graph from the current contents of ``params``
    on every call. Each parameter is checked at ``max_entries`` randomly
    chosen coordinates (all coordinates when ``None``). The relative error
    denominator is floored at ``floor`` so that gradients that vanish
    analytically are compared on an absolute scale.

    Central differences only estimate the derivative when the stencil stays
    inside one smooth piece. The sides taken by every ReLU, leaky ReLU, abs
    and clamp are compared between the base point and both stencil points;
    on any change the step is divided by 10, up to ``max_shrink`` times.
    ``report.shrunk`` counts the coordinates that needed a smaller step.

    Raises :class:`~mde.diff.tensor.NonFiniteError` naming the primitive if
    any intermediate turns non-finite.
    """
    for name, p in params.items():
        if not np.isfinite(p.data).all():
            raise ValueError(f"parameter {name!r} is not finite")
    with GradTape(check_finite=True) as tape:
        loss = fn()
    analytic = backward(loss, tape, params)
    base_pattern = activation_pattern(tape)
    del tape

    def evaluate() -> tuple[float, bytes]:
        with GradTape(check_finite=True) as t:
            value = fn().item()
        return value, activation_pattern(t)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        shrunk = 0
        g = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            h = step
            for attempt in range(max_shrink + 1):
                if attempt:
                    h /= 10
                flat[i] = orig + h
                up, p_up = evaluate()
                flat[i] = orig - h
                down, p_down = evaluate()
                flat[i] = orig
                if p_up == base_pattern and p_down == base_pattern:
                    break
            shrunk += attempt > 0
            numeric = (up - down) / (2 * h)
            worst = max(worst, relative_error(float(g[i]), numeric, floor))
        report.errors[name] = worst
        report.checked[name] = len(idx)
        report.shrunk[name] = shrunk
    return report
