"""Alternating discriminator/generator optimization.

One call to :meth:`Trainer.step` draws the next batch of the epoch order,
samples fresh masks, updates the discriminator once on real images and
detached completions, then updates the generator once through the
refreshed discriminator. Decoy boxes for the hide term are drawn per
image at every epoch boundary and read from that table until the next.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import checkpoint as ckpt
from .dataio import (SYNTHETIC_KINDS, load_idx, load_manifest, resize_dataset,
                     synthetic_dataset)
from .diff import GradTape, Tensor, backward
from .losses import (Ablation, FeatureExtractor, LossWeights, loss_completion, loss_disc_adv,
                     loss_gen_adv, loss_hns_disc, loss_hns_gen, loss_perceptual,
                     loss_reconstruction, loss_total_gen)
from .maskgen import CHANNELS, HNS_TASKS, make_mask, parse_task, sample_box_arrays
from .models import ConfigError, Discriminator, Generator, ModelConfig
from .optim import Adam, lr_schedule

CSV_COLUMNS = ("step", "loss_rec", "loss_compl_vgg", "loss_adv_g", "loss_adv_d",
               "loss_hns_g", "loss_hns_d", "lr_g", "lr_d")


DATASETS = (*SYNTHETIC_KINDS, "mnist", "manifest")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    task: str = "rec"
    s: float = 0.1
    batch_size: int = 8
    steps: int = 2000
    lr_gen: float = 2e-4
    lr_disc: float = 2e-5
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    anneal_power: float = 1.0
    seed: int = 0
    lambda_compl: float = 2e-5
    lambda_adv: float = 1e-2
    lambda_hns: float = 1e-2
    lambda_compl_pix: float = 0.0
    perceptual_weights: str = "1,0.5,0.25,0.125,0.0625"
    use_perceptual: bool = True
    use_adversarial: bool = True
    use_hns: bool = True
    hns_norm: str = "l1"
    image_size: int = 32
    depth: int = 3
    base_width: int = 32
    bottleneck: int = 256
    coord_channels: bool = True
    leaky_slope: float = 0.2
    feature_seed: int = 1234
    feature_width: int = 8
    checkpoint_interval: int = 0
    sample_interval: int = 0
    dataset: str = "blobs"
    data_path: str = ""
    n_images: int = 1000

    def validate(self) -> None:
        base, _ = parse_task(self.task)
        if not 0.0 < self.s < 1.0:
            raise ConfigError(f"s: masking ratio must lie in (0, 1), got {self.s}")
        if self.steps < 1:
            raise ConfigError("steps: need at least one update")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be at least 1")
        if self.lr_gen <= 0 or self.lr_disc <= 0:
            raise ConfigError("lr_gen/lr_disc: learning rates must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.anneal_power <= 0:
            raise ConfigError("anneal_power: must be positive")
        if self.hns_norm not in ("l1", "l2"):
            raise ConfigError(f"hns_norm: expected l1 or l2, got {self.hns_norm!r}")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval: must be non-negative")
        if self.sample_interval < 0:
            raise ConfigError("sample_interval: must be non-negative")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset: expected one of {', '.join(DATASETS)}, got {self.dataset!r}")
        if self.dataset in ("mnist", "manifest") and not self.data_path:
            raise ConfigError(f"data_path: required for the {self.dataset} dataset")
        if self.n_images < 1:
            raise ConfigError("n_images: must be at least 1")
        if self.use_hns and base not in HNS_TASKS:
            raise ConfigError(
                f"use_hns: hide-and-seek applies only to the re and rec tasks, not {self.task!r}")
        if self.dataset == "mnist" and base != "re":
            raise ConfigError("dataset: the mnist recipe supports only the re task")
        self.loss_weights()
        self.model_config().validate()

    def loss_weights(self) -> LossWeights:
        try:
            perceptual = tuple(float(v) for v in self.perceptual_weights.split(","))
        except ValueError as e:
            raise ConfigError(f"perceptual_weights: {e}") from e
        return LossWeights(self.lambda_compl, self.lambda_adv, self.lambda_hns, perceptual,
                           self.lambda_compl_pix)

    def ablation(self) -> Ablation:
        return Ablation(self.use_perceptual, self.use_adversarial, self.use_hns)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.image_size, self.image_size, self.base_width, self.depth,
                           self.bottleneck, self.coord_channels, self.leaky_slope)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**values)


def training_images(config: TrainConfig) -> np.ndarray:
    """The configured image source at the configured size, first ``n_images`` entries."""
    size = config.image_size
    if config.dataset in SYNTHETIC_KINDS:
        return synthetic_dataset(config.dataset, config.n_images, size, config.seed).images
    if config.dataset == "mnist":
        ds = load_idx(config.data_path)
    else:
        ds = load_manifest(config.data_path, (size, size))
    if ds.size != (size, size):
        ds = resize_dataset(ds, size, size)
    return ds.images[:config.n_images]


def refresh_decoys(rng: np.random.Generator, n: int, S: float, W: int, H: int,
                   task: str = "rec") -> np.ndarray:
    """Per-image decoy boxes ``(n, 3, 4)`` drawn with the training box sampler.

    For ``re`` one box is shared by the three channels, matching the
    structure of real RE boxes.
    """
    shape = (n,) if parse_task(task)[0] == "re" else (n, CHANNELS)
    x, y, w, h = sample_box_arrays(rng, S, W, H, shape)
    boxes = np.stack([x / W, y / H, (x + w) / W, (y + h) / H], axis=-1)
    if boxes.ndim == 2:
        boxes = np.repeat(boxes[:, None, :], CHANNELS, axis=1)
    return boxes


def _scalar(t: Tensor | None) -> float:
    return 0.0 if t is None else float(t.data)


class Trainer:
    """Holds every piece of mutable state belonging to one training run."""

    def __init__(self, config: TrainConfig, images: np.ndarray):
        config.validate()
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1:] != (3, config.image_size, config.image_size):
            raise ConfigError(
                f"images must be (N, 3, {config.image_size}, {config.image_size}), got {images.shape}")
        if len(images) < config.batch_size:
            raise ConfigError(f"batch_size {config.batch_size} exceeds the {len(images)} training images")
        self.config = config
        self.images = images
        self.weights = config.loss_weights()
        self.ablation = config.ablation()
        self.rng = np.random.default_rng(config.seed)
        mc = config.model_config()
        self.gen = Generator(mc, self.rng)
        self.disc = Discriminator(mc, self.rng)
        self.extractor = FeatureExtractor(len(self.weights.perceptual), config.feature_width,
                                          config.feature_seed)
        betas = dict(beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
        self.opt_g = Adam(self.gen.params, **betas)
        self.opt_d = Adam(self.disc.params, **betas)
        self.step_count = 0
        self.epoch = -1
        self.cursor = 0
        self.order = np.arange(0)
        self.decoys = np.zeros((len(images), CHANNELS, 4))
        self.verify_alternation = False

    # -- schedule ---------------------------------------------------------
    @property
    def hns_active(self) -> bool:
        return self.ablation.hns and self.weights.lambda_hns > 0

    @property
    def adv_active(self) -> bool:
        return self.ablation.adversarial and self.weights.lambda_adv > 0

    @property
    def perceptual_active(self) -> bool:
        return self.ablation.perceptual and self.weights.lambda_compl > 0

    def _next_batch(self) -> np.ndarray:
        b = self.config.batch_size
        if self.cursor + b > len(self.order):
            self.epoch += 1
            self.order = self.rng.permutation(len(self.images))
            self.cursor = 0
            c = self.config
            self.decoys = refresh_decoys(self.rng, len(self.images), c.s, c.image_size,
                                         c.image_size, c.task)
        idx = self.order[self.cursor:self.cursor + b]
        self.cursor += b
        return idx

    def _check(self, name: str, value: Tensor | None) -> None:
        if value is not None and not math.isfinite(float(value.data)):
            raise TrainingError(f"non-finite {name} at step {self.step_count}")

    # -- one update of each network ---------------------------------------
    def step(self) -> dict[str, float]:
        c = self.config
        total = c.steps
        lr_g = lr_schedule(min(self.step_count, total), total, c.lr_gen, c.anneal_power)
        lr_d = lr_schedule(min(self.step_count, total), total, c.lr_disc, c.anneal_power)
        idx = self._next_batch()
        z = self.images[idx]
        masks = make_mask(c.task, self.rng, c.s, c.image_size, c.image_size, len(idx))
        m = masks.mask
        x = Tensor(m * z)

        g_params = self.gen.params
        tape_g = GradTape()
        with tape_g:
            fake = self.gen.forward(x, training=True)

        adv_d = hns_d = None
        if self.adv_active or self.hns_active:
            before = self.gen.checksum() if self.verify_alternation else None
            tape_d = GradTape()
            with tape_d:
                real_p, _ = self.disc.forward(Tensor(z))
                fake_p, fake_boxes = self.disc.forward(Tensor(fake.data))
                d_terms = []
                if self.adv_active:
                    adv_d = loss_disc_adv(real_p, fake_p)
                    d_terms.append(adv_d * self.weights.lambda_adv)
                if self.hns_active:
                    hns_d = loss_hns_disc(fake_boxes, masks.normalized_boxes(), c.hns_norm)
                    d_terms.append(hns_d * self.weights.lambda_hns)
                loss_d = d_terms[0] if len(d_terms) == 1 else d_terms[0] + d_terms[1]
            self._check("loss_adv_d", adv_d)
            self._check("loss_hns_d", hns_d)
            grads = backward(loss_d, tape_d, self.disc.params)
            self.opt_d.step(self.disc.params, grads, lr_d)
            if before is not None and before != self.gen.checksum():
                raise TrainingError("generator parameters changed during the discriminator update")

        comps: dict[str, Tensor] = {}
        before = self.disc.checksum() if self.verify_alternation else None
        for p in self.disc.params.values():
            p.requires_grad = False
        try:
            with tape_g:
                comps["rec"] = loss_reconstruction(fake, z, m)
                if self.weights.lambda_compl_pix > 0:
                    comps["compl_pix"] = loss_completion(fake, z, m)
                if self.perceptual_active:
                    comps["compl_vgg"] = loss_perceptual(fake, z, self.extractor,
                                                         self.weights.perceptual)
                if self.adv_active or self.hns_active:
                    p_fake, boxes_fake = self.disc.forward(fake)
                    if self.adv_active:
                        comps["adv_g"] = loss_gen_adv(p_fake)
                    if self.hns_active:
                        comps["hns_g"] = loss_hns_gen(boxes_fake, self.decoys[idx], c.hns_norm)
                loss_g = loss_total_gen(comps, self.weights, self.ablation)
        finally:
            for p in self.disc.params.values():
                p.requires_grad = True
        for name, key in (("loss_rec", "rec"), ("loss_compl_vgg", "compl_vgg"),
                          ("loss_compl_pix", "compl_pix"), ("loss_adv_g", "adv_g"),
                          ("loss_hns_g", "hns_g")):
            self._check(name, comps.get(key))
        grads = backward(loss_g, tape_g, g_params)
        self.opt_g.step(g_params, grads, lr_g)
        if before is not None and before != self.disc.checksum():
            raise TrainingError("discriminator parameters changed during the generator update")

        row = {"step": self.step_count,
               "loss_rec": _scalar(comps.get("rec")),
               "loss_compl_vgg": _scalar(comps.get("compl_vgg")),
               "loss_adv_g": _scalar(comps.get("adv_g")),
               "loss_adv_d": _scalar(adv_d),
               "loss_hns_g": _scalar(comps.get("hns_g")),
               "loss_hns_d": _scalar(hns_d),
               "lr_g": lr_g, "lr_d": lr_d}
        self.step_count += 1
        return row

    def run(self, steps: int | None = None, log=None, on_step=None) -> list[dict[str, float]]:
        """Run until ``steps`` updates have been made in total (default: the configured count)."""
        target = self.config.steps if steps is None else steps
        rows = []
        while self.step_count < target:
            row = self.step()
            rows.append(row)
            if log is not None:
                log.write(row)
            if on_step is not None:
                on_step(self, row)
        return rows

    # -- inference ----------------------------------------------------------
    def complete(self, masked: np.ndarray, batch: int = 64) -> np.ndarray:
        return complete(self.gen, masked, batch)

    # -- persistence --------------------------------------------------------
    def state_records(self) -> dict[str, np.ndarray]:
        rec: dict[str, np.ndarray] = {"__config__": ckpt.encode_json(self.config.as_dict())}
        for prefix, net in (("gen", self.gen), ("disc", self.disc)):
            for k, p in net.params.items():
                rec[f"{prefix}.{k}"] = p.data
            for k, b in net.buffers.items():
                rec[f"{prefix}.buffer.{k}"] = b
        rec.update(self.opt_g.arrays("opt_g"))
        rec.update(self.opt_d.arrays("opt_d"))
        rec["epoch.decoys"] = self.decoys.astype(np.float64)
        rec["epoch.order"] = self.order.astype(np.int64)
        rec["epoch.progress"] = np.array([self.epoch, self.cursor], dtype=np.int64)
        return rec

    def save(self, path) -> Path:
        return ckpt.write_archive(path, self.state_records(), self.rng.bit_generator.state,
                                  self.step_count)

    @classmethod
    def load(cls, path, images: np.ndarray) -> "Trainer":
        records, rng_state, step = ckpt.read_archive(path)
        if "__config__" not in records:
            raise ckpt.CheckpointError(f"{path}: no config snapshot")
        trainer = cls(TrainConfig.from_dict(ckpt.decode_json(records["__config__"])), images)
        try:
            for prefix, net in (("gen", trainer.gen), ("disc", trainer.disc)):
                for k, p in net.params.items():
                    p.data = _matching(records[f"{prefix}.{k}"], p.data, k)
                for k, b in net.buffers.items():
                    net.buffers[k] = _matching(records[f"{prefix}.buffer.{k}"], b, k)
            trainer.opt_g.load_arrays(records, "opt_g")
            trainer.opt_d.load_arrays(records, "opt_d")
            trainer.decoys = records["epoch.decoys"].copy()
            trainer.order = records["epoch.order"].copy()
            trainer.epoch, trainer.cursor = (int(v) for v in records["epoch.progress"])
        except KeyError as e:
            raise ckpt.CheckpointError(f"{path}: missing record {e}") from e
        if rng_state is None:
            raise ckpt.CheckpointError(f"{path}: no rng state")
        trainer.rng.bit_generator.state = rng_state
        trainer.step_count = step
        return trainer


def _matching(stored: np.ndarray, current: np.ndarray, name: str) -> np.ndarray:
    if stored.shape != current.shape or stored.dtype != current.dtype:
        raise ckpt.CheckpointError(
            f"record {name!r}: stored {stored.dtype}{stored.shape} != expected {current.dtype}{current.shape}")
    return stored.copy()


def load_generator(path) -> tuple[Generator, TrainConfig]:
    """Generator weights and config from a checkpoint, without the training state."""
    records, _, _ = ckpt.read_archive(path)
    if "__config__" not in records:
        raise ckpt.CheckpointError(f"{path}: no config snapshot")
    config = TrainConfig.from_dict(ckpt.decode_json(records["__config__"]))
    gen = Generator(config.model_config(), np.random.default_rng(0))
    try:
        for k, p in gen.params.items():
            p.data = _matching(records[f"gen.{k}"], p.data, k)
        for k, b in gen.buffers.items():
            gen.buffers[k] = _matching(records[f"gen.buffer.{k}"], b, k)
    except KeyError as e:
        raise ckpt.CheckpointError(f"{path}: missing record {e}") from e
    return gen, config


def complete(gen: Generator, masked: np.ndarray, batch: int = 64) -> np.ndarray:
    """Run the generator in inference mode over ``masked`` in chunks."""
    out = [gen.forward(Tensor(masked[i:i + batch].astype(gen.dtype)), training=False).data
           for i in range(0, len(masked), batch)]
    return np.concatenate(out, axis=0)


class CsvLog:
    """Metrics log writer; ``repr`` of floats keeps rows bit-exact."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        new = not (append and self.path.exists())
        self._fh = open(self.path, "a" if not new else "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        if new:
            self._writer.writerow(CSV_COLUMNS)

    def write(self, row: Mapping[str, float]) -> None:
        self._writer.writerow([format_cell(row[k]) for k in CSV_COLUMNS])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def format_cell(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([format_cell(r[k]) for k in CSV_COLUMNS])
    return buf.getvalue()
