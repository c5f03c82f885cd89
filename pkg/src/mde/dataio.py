"""Image ingestion and export.

All images are float arrays shaped ``(3, H, W)`` with values in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SYNTHETIC_KINDS = ("stripes", "blobs", "gradients")


class ParseError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, 3, H, W) float32
    source: str
    labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) images, got {self.images.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("image values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        """``(W, H)``."""
        return self.images.shape[3], self.images.shape[2]

    def split(self, n_first: int) -> tuple["ImageDataset", "ImageDataset"]:
        a = ImageDataset(self.images[:n_first], self.source + "[train]",
                         None if self.labels is None else self.labels[:n_first])
        b = ImageDataset(self.images[n_first:], self.source + "[heldout]",
                         None if self.labels is None else self.labels[n_first:])
        return a, b


# --------------------------------------------------------------------- IDX

def _read_idx_header(buf: bytes, expected_magic: int, ndim: int, what: str):
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise ParseError(f"{what}: file shorter than its {header}-byte header", len(buf))
    magic = struct.unpack_from(">I", buf, 0)[0]
    if magic != expected_magic:
        raise ParseError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    dims = struct.unpack_from(">" + "I" * ndim, buf, 4)
    payload = int(np.prod(dims))
    if len(buf) - header != payload:
        raise ParseError(
            f"{what}: header declares {payload} payload bytes, file holds {len(buf) - header}",
            header + min(payload, len(buf) - header))
    return dims, header


def load_idx(images_path, labels_path=None) -> ImageDataset:
    """Read MNIST-style IDX files; grayscale is replicated to three channels."""
    buf = Path(images_path).read_bytes()
    (n, rows, cols), off = _read_idx_header(buf, IDX_IMAGES_MAGIC, 3, "images")
    gray = np.frombuffer(buf, dtype=np.uint8, offset=off).reshape(n, rows, cols)
    images = np.repeat((gray.astype(np.float32) / 255.0)[:, None], 3, axis=1)
    labels = None
    if labels_path is not None:
        lbuf = Path(labels_path).read_bytes()
        (m,), loff = _read_idx_header(lbuf, IDX_LABELS_MAGIC, 1, "labels")
        if m != n:
            raise ParseError(f"labels: {m} labels for {n} images", 4)
        labels = np.frombuffer(lbuf, dtype=np.uint8, offset=loff).astype(np.int64)
    return ImageDataset(images, f"idx:{images_path}", labels)


def write_idx(images_gray: np.ndarray, path, labels: np.ndarray | None = None,
              labels_path=None) -> None:
    """Write uint8 ``(N, rows, cols)`` images (and optional labels) as IDX."""
    images_gray = np.asarray(images_gray, dtype=np.uint8)
    n, rows, cols = images_gray.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols)
                           + images_gray.tobytes())
    if labels is not None:
        Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels))
                                      + np.asarray(labels, dtype=np.uint8).tobytes())


# ------------------------------------------------------------------ resize

def resize(image: np.ndarray, W: int, H: int, mode: str = "bilinear") -> np.ndarray:
    """Resize a ``(C, h, w)`` image; sample positions use pixel centers."""
    if W < 1 or H < 1:
        raise ValueError("target size must be positive")
    c, h, w = image.shape
    if (h, w) == (H, W):
        return image.copy()
    if mode == "nearest":
        rows = np.minimum((np.arange(H) * h) // H, h - 1)
        cols = np.minimum((np.arange(W) * w) // W, w - 1)
        return image[:, rows][:, :, cols]
    if mode != "bilinear":
        raise ValueError(f"unknown resize mode {mode!r}")
    ys = np.clip((np.arange(H) + 0.5) * h / H - 0.5, 0, h - 1)
    xs = np.clip((np.arange(W) + 0.5) * w / W - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bot = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(image.dtype)


def resize_dataset(ds: ImageDataset, W: int, H: int, mode: str = "bilinear") -> ImageDataset:
    images = np.stack([resize(im, W, H, mode) for im in ds.images])
    return ImageDataset(np.clip(images, 0, 1), ds.source + f"@{W}x{H}", ds.labels)


def center_crop_scale(image: np.ndarray, scale: float, W: int, H: int) -> np.ndarray:
    """Keep the central ``scale`` fraction of each side, then resize.

    Face crops use ``scale=0.75`` and a 96x96 target.
    """
    c, h, w = image.shape
    ch, cw = max(1, round(h * scale)), max(1, round(w * scale))
    top, left = (h - ch) // 2, (w - cw) // 2
    return resize(image[:, top:top + ch, left:left + cw], W, H)


# --------------------------------------------------------------- synthetic

def _blobs(rng, n, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    out = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        bg = rng.uniform(0.15, 0.85, size=3).astype(np.float32)
        img = np.broadcast_to(bg[:, None, None], (3, size, size)).copy()
        color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
        cx, cy = rng.uniform(0.25 * size, 0.75 * size, size=2)
        r = rng.uniform(0.15 * size, 0.3 * size)
        inside = ((xx - cx) ** 2 + (yy - cy) ** 2) <= r * r
        img[:, inside] = color[:, None]
        out[i] = img
    return out


def _stripes(rng, n, size):
    out = np.empty((n, 3, size, size), dtype=np.float32)
    idx = np.arange(size)
    for i in range(n):
        a, b = rng.uniform(0, 1, size=(2, 3)).astype(np.float32)
        period = int(rng.integers(2, max(3, size // 4) + 1))
        phase = int(rng.integers(0, period))
        band = ((idx + phase) // max(1, period // 2)) % 2 == 0
        if rng.random() < 0.5:
            sel = np.broadcast_to(band[None, :], (size, size))
        else:
            sel = np.broadcast_to(band[:, None], (size, size))
        out[i] = np.where(sel[None], a[:, None, None], b[:, None, None])
    return out


def _gradients(rng, n, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / max(1, size - 1)
    out = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        start, end = rng.uniform(0, 1, size=(2, 3)).astype(np.float32)
        theta = rng.uniform(0, 2 * np.pi)
        t = np.cos(theta) * xx + np.sin(theta) * yy
        t = (t - t.min()) / max(float(t.max() - t.min()), 1e-6)
        out[i] = start[:, None, None] + (end - start)[:, None, None] * t[None]
    return np.clip(out, 0, 1)


def synthetic_dataset(kind: str, n: int, size: int = 32, seed: int = 0) -> ImageDataset:
    """Structured toy corpora whose missing parts are inferable from fragments.

    ``blobs``: flat background with one colored disc. ``stripes``: two-color
    bands. ``gradients``: linear color ramps at a random angle.
    """
    if n < 1:
        raise ValueError("synthetic dataset needs n >= 1")
    makers = {"blobs": _blobs, "stripes": _stripes, "gradients": _gradients}
    if kind not in makers:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    rng = np.random.default_rng(seed)
    return ImageDataset(makers[kind](rng, n, size), f"synthetic:{kind}:seed={seed}")


def mean_fill(images: np.ndarray, mask: np.ndarray, channel_means: np.ndarray) -> np.ndarray:
    """Baseline completion: hidden values replaced by per-channel dataset means."""
    fill = np.broadcast_to(np.asarray(channel_means)[None, :, None, None], images.shape)
    return np.where(mask > 0.5, images, fill).astype(images.dtype)


# --------------------------------------------------------------------- PNG

def to_uint8(image: np.ndarray) -> np.ndarray:
    """``(3, H, W)`` float image to ``(H, W, 3)`` bytes."""
    return np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def write_png(image: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")
    return path


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, SyntaxError) as e:
        raise ParseError(f"cannot decode PNG {path}: {e}") from e
    return arr.transpose(2, 0, 1).copy()


def image_grid(images, cols: int, pad: int = 0) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim != 4:
        raise ValueError("grid needs a stack of (3, H, W) images")
    n, c, h, w = images.shape
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    grid = np.ones((c, rows * h + (rows - 1) * pad, cols * w + (cols - 1) * pad), images.dtype)
    for i in range(n):
        r, q = divmod(i, cols)
        grid[:, r * (h + pad):r * (h + pad) + h, q * (w + pad):q * (w + pad) + w] = images[i]
    return grid


def write_png_grid(images, cols: int, path, pad: int = 0) -> Path:
    return write_png(image_grid(images, cols, pad), path)


def load_manifest(path, size: tuple[int, int] | None = None) -> ImageDataset:
    """Load PNGs listed one per line (relative paths resolve against the manifest)."""
    path = Path(path)
    images = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        p = Path(line)
        if not p.is_absolute():
            p = path.parent / p
        im = read_png(p)
        if size is not None:
            im = resize(im, *size)
        images.append(im)
    if not images:
        raise ParseError(f"manifest {path} lists no images")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"manifest images differ in size: {sorted(shapes)}")
    return ImageDataset(np.clip(np.stack(images), 0, 1).astype(np.float32), f"manifest:{path}")
