"""Adversarial, completion, reconstruction, perceptual and hide-and-seek losses.

Every loss is a scalar :class:`~mde.diff.Tensor` built from substrate
primitives, so all of them differentiate through the tape. Batch means are
taken over images only: squared-error sums run over every value of an
image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .diff import Tensor, ops

PROB_CLAMP = 1e-7
PERCEPTUAL_WEIGHTS = (1.0, 0.5, 0.25, 0.125, 0.0625)


class LossConfigError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_compl: float = 2e-5
    lambda_adv: float = 1e-2
    lambda_hns: float = 1e-2
    perceptual: tuple[float, ...] = PERCEPTUAL_WEIGHTS
    # pixel-space completion term; zero keeps the four-term objective
    lambda_compl_pix: float = 0.0

    def __post_init__(self):
        self.perceptual = tuple(float(v) for v in self.perceptual)
        values = [self.lambda_compl, self.lambda_adv, self.lambda_hns, self.lambda_compl_pix,
                  *self.perceptual]
        if any(v < 0 for v in values):
            raise LossConfigError("loss weights must be non-negative")
        if not self.perceptual or sum(self.perceptual) <= 0:
            raise LossConfigError("perceptual layer weights must have a positive sum")


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _safe_log(p: Tensor) -> Tensor:
    return ops.log(ops.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP))


def loss_disc_adv(d_real, d_fake) -> Tensor:
    """``-(1/N) sum[log D(real) + log(1 - D(fake))]``."""
    d_real, d_fake = _t(d_real), _t(d_fake)
    n = d_real.shape[0]
    total = _safe_log(d_real).sum() + _safe_log(1.0 - d_fake).sum()
    return total * (-1.0 / n)


def loss_gen_adv(d_fake) -> Tensor:
    """Non-saturating generator loss ``-(1/N) sum log D(fake)``."""
    d_fake = _t(d_fake)
    return _safe_log(d_fake).sum() * (-1.0 / d_fake.shape[0])


def _masked_sq(gen: Tensor, orig, weight) -> Tensor:
    gen = _t(gen)
    diff = gen - _t(orig, gen)
    return (ops.square(diff) * _t(weight, gen)).sum() * (1.0 / gen.shape[0])


def loss_completion(gen, orig, mask) -> Tensor:
    """Squared error on hidden values, ``(1/N) sum ||(1-M)(G-Z)||^2``.

    The mask is binary, so weighting squared errors by ``1-M`` equals
    squaring the masked difference.
    """
    return _masked_sq(gen, orig, 1.0 - np.asarray(mask))


def loss_reconstruction(gen, orig, mask) -> Tensor:
    """Squared error on visible values, ``(1/N) sum ||M(G-Z)||^2``."""
    return _masked_sq(gen, orig, np.asarray(mask))


class FeatureExtractor:
    """Fixed random conv stack used as a perceptual feature proxy.

    Level 0 is a stride-1 3x3 conv; each further level halves the
    resolution (while it exceeds one pixel) and doubles the width up to 64.
    Features are post-leaky-ReLU maps. Weights are He-initialized from
    ``seed`` and never trained; :meth:`load` swaps in archived weights.
    """

    def __init__(self, levels: int = 5, base_width: int = 8, seed: int = 1234,
                 dtype=np.float32, slope: float = 0.2):
        rng = np.random.default_rng(seed)
        self.slope = slope
        self.layers: list[tuple[Tensor, Tensor, int]] = []
        cin, width = 3, base_width
        for level in range(levels):
            k = 3
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), size=(width, cin, k, k))
            self.layers.append((Tensor(w.astype(dtype)), Tensor(np.zeros(width, dtype)),
                                1 if level == 0 else 2))
            cin, width = width, min(64, width * 2)

    @property
    def levels(self) -> int:
        return len(self.layers)

    def astype(self, dtype) -> "FeatureExtractor":
        self.layers = [(Tensor(w.data.astype(dtype)), Tensor(b.data.astype(dtype)), s)
                       for w, b, s in self.layers]
        return self

    def __call__(self, image) -> list[Tensor]:
        h = image if isinstance(image, Tensor) else Tensor(image)
        feats = []
        for w, b, stride in self.layers:
            if h.shape[2] <= 1 or h.shape[3] <= 1:
                stride = 1
            h = ops.leaky_relu(ops.conv2d(h, w, b, stride, 1), self.slope)
            feats.append(h)
        return feats

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b, s) in enumerate(self.layers):
            out[f"features.{i}.weight"] = w.data
            out[f"features.{i}.bias"] = b.data
        return out

    @classmethod
    def load(cls, path, slope: float = 0.2) -> "FeatureExtractor":
        """Read ``features.<i>.weight/bias`` records from a tensor archive."""
        from .checkpoint import read_archive

        records, _, _ = read_archive(path)
        self = cls.__new__(cls)
        self.slope = slope
        self.layers = []
        i = 0
        while f"features.{i}.weight" in records:
            self.layers.append((Tensor(records[f"features.{i}.weight"]),
                                Tensor(records[f"features.{i}.bias"]), 1 if i == 0 else 2))
            i += 1
        if not self.layers:
            raise LossConfigError(f"{path} holds no features.<i>.weight records")
        return self


def loss_perceptual(gen, orig, extractor, weights: Sequence[float] = PERCEPTUAL_WEIGHTS) -> Tensor:
    """Layer-weighted squared feature distance normalized by ``N * sum(weights)``.

    ``extractor`` is any callable returning a list of feature tensors.
    """
    gen = _t(gen)
    weights = [float(w) for w in weights]
    fg = extractor(gen)
    fz = extractor(Tensor(np.asarray(_t(orig, gen).data)))
    if len(fg) != len(weights):
        raise LossConfigError(f"extractor yields {len(fg)} levels, {len(weights)} weights given")
    n = gen.shape[0]
    total = None
    for w, a, b in zip(weights, fg, fz):
        if w == 0:
            continue
        term = ops.square(a - b.data).sum() * w
        total = term if total is None else total + term
    if total is None:
        return gen.sum() * 0.0
    return total * (1.0 / (n * sum(weights)))


def _box_distance(predicted: Tensor, target, norm: str) -> Tensor:
    predicted = _t(predicted)
    target = np.asarray(target, dtype=predicted.dtype)
    if predicted.shape != target.shape or predicted.shape[1:] != (3, 4):
        raise LossConfigError(f"box tensors must be (N, 3, 4); got {predicted.shape} and {target.shape}")
    diff = predicted - target
    n = predicted.shape[0]
    if norm == "l1":
        return ops.abs(diff).sum() * (1.0 / n)
    if norm == "l2":
        return ops.sqrt(ops.square(diff).sum(axis=2) + 1e-12).sum() * (1.0 / n)
    raise LossConfigError(f"unknown box norm {norm!r}")


def loss_hns_disc(predicted, true_boxes, norm: str = "l1") -> Tensor:
    """Seek: box-head predictions on generated images against the true mask boxes."""
    return _box_distance(predicted, true_boxes, norm)


def loss_hns_gen(predicted, decoy_boxes, norm: str = "l1") -> Tensor:
    """Hide: the same distance against per-image decoy boxes."""
    return _box_distance(predicted, decoy_boxes, norm)


GEN_TERMS = ("rec", "compl_vgg", "adv_g", "hns_g", "compl_pix")


@dataclass
class Ablation:
    """Switches that zero individual weighted terms of the generator objective."""

    perceptual: bool = True
    adversarial: bool = True
    hns: bool = True
    pixel_completion: bool = True

    def enabled(self, term: str) -> bool:
        return {"compl_vgg": self.perceptual, "adv_g": self.adversarial,
                "hns_g": self.hns, "compl_pix": self.pixel_completion}.get(term, True)


def total_weights(weights: LossWeights, ablation: Ablation | None = None) -> dict[str, float]:
    ablation = ablation or Ablation()
    w = {"rec": 1.0, "compl_vgg": weights.lambda_compl, "adv_g": weights.lambda_adv,
         "hns_g": weights.lambda_hns, "compl_pix": weights.lambda_compl_pix}
    return {k: (v if ablation.enabled(k) else 0.0) for k, v in w.items()}


def loss_total_gen(components: Mapping[str, Tensor], weights: LossWeights,
                   ablation: Ablation | None = None) -> Tensor:
    """``rec + l_compl*perceptual + l_adv*adv_g + l_hns*hns_g (+ l_pix*compl_pix)``.

    Components that are absent or weighted zero are skipped.
    """
    if "rec" not in components:
        raise LossConfigError("the reconstruction term is always required")
    total = None
    for term, w in total_weights(weights, ablation).items():
        if w == 0.0 or term not in components:
            continue
        part = components[term] if w == 1.0 else components[term] * w
        total = part if total is None else total + part
    return total
