"""Finite-difference verification suite behind ``mde grad-check``.

Each case builds fresh 64-bit parameters from its own seed and returns a
scalar-valued closure over them. Tensor-valued primitives are reduced to a
scalar through a fixed random projection, so every output coordinate
contributes to the checked gradient.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diff import GradCheckReport, Tensor, grad_check, ops
from .losses import (FeatureExtractor, loss_completion, loss_disc_adv, loss_gen_adv,
                     loss_hns_disc, loss_hns_gen, loss_perceptual, loss_reconstruction)
from .maskgen import make_mask
from .models import Discriminator, Generator, ModelConfig
from .trainer import refresh_decoys

Case = tuple[Callable[[], Tensor], dict[str, Tensor]]


def _p(value, name: str) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)


def _projected(build: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    proj = rng.normal(size=build().shape)
    return lambda: (build() * proj).sum()


def _primitive(name: str, rng: np.random.Generator) -> Case:
    x = _p(rng.normal(size=(2, 3, 6, 6)), "x")
    pos = _p(rng.uniform(0.5, 2.0, size=(2, 3, 6, 6)), "pos")
    w = _p(rng.normal(size=(4, 3, 3, 3)) * 0.3, "w")
    wt = _p(rng.normal(size=(4, 3, 3, 3)) * 0.3, "wt")
    b = _p(rng.normal(size=4), "b")
    gamma = _p(rng.uniform(0.5, 1.5, size=3), "gamma")
    beta = _p(rng.normal(size=3), "beta")
    m = _p(rng.normal(size=(5, 7)), "m")
    fw = _p(rng.normal(size=(7, 4)) * 0.3, "fw")
    fb = _p(rng.normal(size=4), "fb")
    run_mean, run_var = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    builders: dict[str, tuple[Callable[[], Tensor], dict]] = {
        "add": (lambda: ops.add(x, pos), {"x": x, "pos": pos}),
        "sub": (lambda: ops.sub(x, pos), {"x": x, "pos": pos}),
        "mul": (lambda: ops.mul(x, pos), {"x": x, "pos": pos}),
        "reciprocal": (lambda: ops.reciprocal(pos), {"pos": pos}),
        "square": (lambda: ops.square(x), {"x": x}),
        "sqrt": (lambda: ops.sqrt(pos), {"pos": pos}),
        "abs": (lambda: ops.abs(x), {"x": x}),
        "log": (lambda: ops.log(pos), {"pos": pos}),
        "clamp": (lambda: ops.clamp(x, -0.5, 0.5), {"x": x}),
        "relu": (lambda: ops.relu(x), {"x": x}),
        "leaky_relu": (lambda: ops.leaky_relu(x, 0.2), {"x": x}),
        "sigmoid": (lambda: ops.sigmoid(x), {"x": x}),
        "sum": (lambda: ops.sum(x, axis=1), {"x": x}),
        "mean": (lambda: ops.mean(x), {"x": x}),
        "reshape": (lambda: ops.reshape(x, (6, -1)), {"x": x}),
        "concat": (lambda: ops.concat([x, pos], axis=1), {"x": x, "pos": pos}),
        "matmul": (lambda: ops.matmul(m, fw), {"m": m, "fw": fw}),
        "fully_connected": (lambda: ops.fully_connected(m, fw, fb), {"m": m, "fw": fw, "fb": fb}),
        "global_avg_pool": (lambda: ops.global_avg_pool(x), {"x": x}),
        "conv2d": (lambda: ops.conv2d(x, w, b, 2, 1), {"x": x, "w": w, "b": b}),
        "conv2d_transpose": (lambda: ops.conv2d_transpose(ops.conv2d(x, w, None, 2, 1), wt,
                                                          None, 2, 1, 1),
                             {"x": x, "w": w, "wt": wt}),
        "batchnorm2d": (lambda: ops.batchnorm2d(x, gamma, beta),
                        {"x": x, "gamma": gamma, "beta": beta}),
        "batchnorm2d_eval": (lambda: ops.batchnorm2d(x, gamma, beta, run_mean, run_var,
                                                     training=False),
                             {"x": x, "gamma": gamma, "beta": beta}),
    }
    build, params = builders[name]
    return _projected(build, rng), params


PRIMITIVES = ("add", "sub", "mul", "reciprocal", "square", "sqrt", "abs", "log", "clamp",
              "relu", "leaky_relu", "sigmoid", "sum", "mean", "reshape", "concat", "matmul",
              "fully_connected", "global_avg_pool", "conv2d", "conv2d_transpose",
              "batchnorm2d", "batchnorm2d_eval")

SMALL = ModelConfig(width=16, height=16, base_width=4, depth=2, bottleneck=16)


def _loss(name: str, rng: np.random.Generator) -> Case:
    n = 4
    probs = _p(rng.uniform(0.05, 0.95, size=n), "d_real")
    probs_fake = _p(rng.uniform(0.05, 0.95, size=n), "d_fake")
    gen = _p(rng.uniform(0.05, 0.95, size=(n, 3, 16, 16)), "gen")
    orig = rng.uniform(0, 1, size=(n, 3, 16, 16))
    mask = make_mask("rec", rng, 0.25, 16, 16, n).mask.astype(np.float64)
    boxes = _p(rng.uniform(0.05, 0.95, size=(n, 3, 4)), "boxes")
    target = rng.uniform(0, 1, size=(n, 3, 4))
    extractor = FeatureExtractor(seed=7, dtype=np.float64)
    builders = {
        "loss_disc_adv": (lambda: loss_disc_adv(probs, probs_fake),
                          {"d_real": probs, "d_fake": probs_fake}),
        "loss_gen_adv": (lambda: loss_gen_adv(probs_fake), {"d_fake": probs_fake}),
        "loss_completion": (lambda: loss_completion(gen, orig, mask), {"gen": gen}),
        "loss_reconstruction": (lambda: loss_reconstruction(gen, orig, mask), {"gen": gen}),
        "loss_perceptual": (lambda: loss_perceptual(gen, orig, extractor), {"gen": gen}),
        "loss_hns_disc_l1": (lambda: loss_hns_disc(boxes, target, "l1"), {"boxes": boxes}),
        "loss_hns_disc_l2": (lambda: loss_hns_disc(boxes, target, "l2"), {"boxes": boxes}),
        "loss_hns_gen_l1": (lambda: loss_hns_gen(boxes, target, "l1"), {"boxes": boxes}),
        "loss_hns_gen_l2": (lambda: loss_hns_gen(boxes, target, "l2"), {"boxes": boxes}),
    }
    return builders[name]


LOSSES = ("loss_disc_adv", "loss_gen_adv", "loss_completion", "loss_reconstruction",
          "loss_perceptual", "loss_hns_disc_l1", "loss_hns_disc_l2", "loss_hns_gen_l1",
          "loss_hns_gen_l2")


def full_objective(rng: np.random.Generator, lambda_compl: float = 2e-5, lambda_adv: float = 1e-2,
                   lambda_hns: float = 1e-2) -> Case:
    """The composed four-term objective through both networks on a 4x3x16x16 batch.

    The adversarial term is the discriminator plus generator cross-entropies
    and the hide-and-seek term the seek plus hide box distances, so
    every generator and discriminator parameter receives gradient.
    """
    n = 4
    gen = Generator(SMALL, rng, dtype=np.float64)
    disc = Discriminator(SMALL, rng, dtype=np.float64)
    extractor = FeatureExtractor(seed=11, dtype=np.float64)
    z = rng.uniform(0, 1, size=(n, 3, 16, 16))
    batch = make_mask("rec", rng, 0.25, 16, 16, n)
    x = batch.mask * z
    true_boxes = batch.normalized_boxes()
    decoys = refresh_decoys(rng, n, 0.25, 16, 16)
    params = {f"gen.{k}": v for k, v in gen.params.items()}
    params.update({f"disc.{k}": v for k, v in disc.params.items()})
    # batch statistics make the loss a function of the whole batch; running
    # buffers are reset on each call so repeated evaluations see identical state
    buffers = {k: v.copy() for k, v in gen.buffers.items()}

    def fn() -> Tensor:
        for k, v in buffers.items():
            gen.buffers[k] = v.copy()
        fake = gen.forward(x, training=True)
        real_p, _ = disc.forward(z)
        fake_p, fake_boxes = disc.forward(fake)
        rec = loss_reconstruction(fake, z, batch.mask)
        compl = loss_perceptual(fake, z, extractor)
        adv = loss_disc_adv(real_p, fake_p) + loss_gen_adv(fake_p)
        hns = loss_hns_disc(fake_boxes, true_boxes) + loss_hns_gen(fake_boxes, decoys)
        return rec + compl * lambda_compl + adv * lambda_adv + hns * lambda_hns

    return fn, params


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def case_names() -> list[str]:
    return [*PRIMITIVES, *LOSSES, "loss_total"]


def build_case(name: str) -> Case:
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    if name in PRIMITIVES:
        return _primitive(name, rng)
    if name in LOSSES:
        return _loss(name, rng)
    if name == "loss_total":
        return full_objective(rng)
    raise KeyError(f"unknown grad-check case {name!r}")


def run_suite(names=None, tolerance: float = 1e-4, step: float = 1e-4,
              max_entries: int | None = 12, tamper: Callable[[str, Case], Case] | None = None
              ) -> list[CheckResult]:
    """Check each named case; ``tamper`` lets harness self-tests swap in a broken case."""
    results = []
    for name in names or case_names():
        case = build_case(name)
        if tamper is not None:
            case = tamper(name, case)
        fn, params = case
        t0 = time.perf_counter()
        report = grad_check(fn, params, step=step, tolerance=tolerance, max_entries=max_entries,
                            seed=zlib.crc32(name.encode()))
        results.append(CheckResult(name, report, time.perf_counter() - t0))
    return results
