"""Generator (encoder/decoder with skip connections) and discriminator.

Both networks keep their weights in an ordered ``params`` dict of named
:class:`~mde.diff.Tensor` objects; batch-norm running statistics live in
``buffers``. Parameter names are stable and double as checkpoint keys.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diff import DimensionError, Tensor, ops


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    width: int = 32
    height: int = 32
    base_width: int = 32
    depth: int = 3
    bottleneck: int = 256
    coord_channels: bool = True
    leaky_slope: float = 0.2

    def validate(self) -> None:
        step = 2 ** self.depth
        if self.depth < 1:
            raise ConfigError("depth must be at least 1")
        if self.width % step or self.height % step:
            raise ConfigError(
                f"image size {self.width}x{self.height} is not divisible by 2^depth = {step}")
        if self.base_width < 1 or self.bottleneck < 1:
            raise ConfigError("base_width and bottleneck must be positive")
        if not 0 < self.leaky_slope < 1:
            raise ConfigError("leaky_slope must lie in (0, 1)")

    def as_dict(self) -> dict:
        return asdict(self)


# 96x96 configuration; slow on the numpy substrate, intended for long runs.
FULL_SCALE = ModelConfig(width=96, height=96, base_width=64, depth=4, bottleneck=4000)


def add_coord_channels(image) -> Tensor:
    """Append x and y ramps in [0, 1] as channels 3 and 4."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    n, _, h, w = x.shape
    xs = np.arange(w) / max(w - 1, 1)
    ys = np.arange(h) / max(h - 1, 1)
    planes = np.empty((n, 2, h, w), dtype=x.dtype)
    planes[:, 0] = xs[None, None, :]
    planes[:, 1] = ys[None, :, None]
    return ops.concat([x, Tensor(planes)], axis=1)


class Network:
    """Named parameter/buffer container with the initialization scheme."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._rng = rng

    def _param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value.astype(self.dtype), requires_grad=True, name=name)

    def _conv(self, name: str, cin: int, cout: int, k: int = 3, bias: bool = True,
              transposed: bool = False) -> None:
        std = np.sqrt(2.0 / (cin * k * k))
        shape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
        self._param(f"{name}.weight", self._rng.normal(0.0, std, size=shape))
        if bias:
            self._param(f"{name}.bias", np.zeros(cout))

    def _bn(self, name: str, c: int) -> None:
        self._param(f"{name}.gamma", np.ones(c))
        self._param(f"{name}.beta", np.zeros(c))
        self.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{name}.running_var"] = np.ones(c, dtype=self.dtype)

    def _fc(self, name: str, din: int, dout: int) -> None:
        self._param(f"{name}.weight", self._rng.normal(0.0, np.sqrt(2.0 / din), size=(din, dout)))
        self._param(f"{name}.bias", np.zeros(dout))

    def parameter_inventory(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self.params.items()]

    def num_parameters(self) -> int:
        return int(sum(v.data.size for v in self.params.values()))

    def astype(self, dtype) -> "Network":
        self.dtype = np.dtype(dtype)
        for p in self.params.values():
            p.data = p.data.astype(self.dtype)
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(self.dtype)
        return self

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(v.data.tobytes())
        return h.hexdigest()

    def _bn_apply(self, name: str, x: Tensor, training: bool) -> Tensor:
        return ops.batchnorm2d(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                               self.buffers[f"{name}.running_mean"],
                               self.buffers[f"{name}.running_var"], training=training)

    def _as_input(self, image, channels: int) -> Tensor:
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.dtype))
        c = self.config
        if x.ndim != 4 or x.shape[1:] != (channels, c.height, c.width):
            raise DimensionError(
                f"expected input (N, {channels}, {c.height}, {c.width}), got {x.shape}")
        return x


class Generator(Network):
    """U-net-like encoder/decoder ending in a sigmoid.

    Encoder level ``l`` runs a stride-1 conv block at resolution ``H/2^l``
    (its output is the skip feature) then a stride-2 conv block. A
    fully-connected bottleneck joins the two halves. Decoder level ``l``
    upsamples with a transposed conv, concatenates the level-``l`` skip
    feature and fuses it with a stride-1 conv block. The masked input image
    itself is concatenated before the final 3x3 conv and sigmoid.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__(config, rng, dtype)
        c = config
        widths = [c.base_width * 2 ** level for level in range(c.depth)]
        self.widths = widths
        self.skip_wiring = {level: level for level in range(c.depth)}
        cin = 3
        for level, w in enumerate(widths):
            self._conv(f"enc{level}.conv", cin, w, bias=False)
            self._bn(f"enc{level}.bn", w)
            self._conv(f"enc{level}.down", w, w, bias=False)
            self._bn(f"enc{level}.down_bn", w)
            cin = w
        self.inner_shape = (widths[-1], c.height // 2 ** c.depth, c.width // 2 ** c.depth)
        flat = int(np.prod(self.inner_shape))
        self._fc("bottleneck.encode", flat, c.bottleneck)
        self._fc("bottleneck.decode", c.bottleneck, flat)
        for level in reversed(range(c.depth)):
            w = widths[level]
            self._conv(f"dec{level}.up", cin, w, bias=False, transposed=True)
            self._bn(f"dec{level}.up_bn", w)
            self._conv(f"dec{level}.conv", 2 * w, w, bias=False)
            self._bn(f"dec{level}.bn", w)
            cin = w
        self._conv("out.conv", widths[0] + 3, 3)

    def spatial_sizes(self) -> list[int]:
        """Feature-map heights from the input down to the bottleneck and back up."""
        h = self.config.height
        down = [h // 2 ** level for level in range(self.config.depth + 1)]
        return down + down[-2::-1]

    def forward(self, masked_image, training: bool = True) -> Tensor:
        x = self._as_input(masked_image, 3)
        n = x.shape[0]
        h = x
        skips = []
        for level in range(self.config.depth):
            h = ops.relu(self._bn_apply(f"enc{level}.bn",
                                        ops.conv2d(h, self.params[f"enc{level}.conv.weight"], None, 1, 1),
                                        training))
            skips.append(h)
            h = ops.relu(self._bn_apply(f"enc{level}.down_bn",
                                        ops.conv2d(h, self.params[f"enc{level}.down.weight"], None, 2, 1),
                                        training))
        p = self.params
        z = ops.relu(ops.fully_connected(ops.reshape(h, (n, -1)), p["bottleneck.encode.weight"],
                                         p["bottleneck.encode.bias"]))
        h = ops.relu(ops.fully_connected(z, p["bottleneck.decode.weight"], p["bottleneck.decode.bias"]))
        h = ops.reshape(h, (n,) + self.inner_shape)
        for level in reversed(range(self.config.depth)):
            up = ops.conv2d_transpose(h, p[f"dec{level}.up.weight"], None, 2, 1, 1)
            h = ops.relu(self._bn_apply(f"dec{level}.up_bn", up, training))
            h = ops.concat([h, skips[self.skip_wiring[level]]], axis=1)
            h = ops.relu(self._bn_apply(f"dec{level}.bn",
                                        ops.conv2d(h, p[f"dec{level}.conv.weight"], None, 1, 1),
                                        training))
        h = ops.concat([h, x], axis=1)
        return ops.sigmoid(ops.conv2d(h, p["out.conv.weight"], p["out.conv.bias"], 1, 1))

    __call__ = forward


class Discriminator(Network):
    """Strided leaky-ReLU conv stack pooled into two heads.

    The realness head is one sigmoid unit; the box head regresses four
    normalized corner coordinates per color channel through sigmoids.
    Widths follow the generator encoder at half the base width.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__(config, rng, dtype)
        c = config
        base = max(1, c.base_width // 2)
        self.widths = [base * 2 ** level for level in range(c.depth)]
        self.in_channels = 5 if c.coord_channels else 3
        cin = self.in_channels
        for level, w in enumerate(self.widths):
            self._conv(f"d{level}.conv", cin, w)
            self._conv(f"d{level}.down", w, w)
            cin = w
        self._fc("head.real", cin, 1)
        self._fc("head.box", cin, 12)

    def forward(self, image, training: bool = True) -> tuple[Tensor, Tensor]:
        x = self._as_input(image, 3)
        if self.config.coord_channels:
            x = add_coord_channels(x)
        n = x.shape[0]
        p = self.params
        slope = self.config.leaky_slope
        h = x
        for level in range(self.config.depth):
            h = ops.leaky_relu(ops.conv2d(h, p[f"d{level}.conv.weight"], p[f"d{level}.conv.bias"], 1, 1), slope)
            h = ops.leaky_relu(ops.conv2d(h, p[f"d{level}.down.weight"], p[f"d{level}.down.bias"], 2, 1), slope)
        f = ops.global_avg_pool(h)
        real = ops.sigmoid(ops.fully_connected(f, p["head.real.weight"], p["head.real.bias"]))
        boxes = ops.sigmoid(ops.fully_connected(f, p["head.box.weight"], p["head.box.bias"]))
        return ops.reshape(real, (n,)), ops.reshape(boxes, (n, 3, 4))

    __call__ = forward


def build_generator(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Generator:
    return Generator(config, rng, dtype)


def build_discriminator(config: ModelConfig, rng: np.random.Generator,
                        dtype=np.float32) -> Discriminator:
    return Discriminator(config, rng, dtype)


def generator_forward(gen: Generator, masked_image, training: bool = True) -> Tensor:
    return gen.forward(masked_image, training)


def discriminator_forward(disc: Discriminator, image) -> tuple[Tensor, Tensor]:
    return disc.forward(image)
