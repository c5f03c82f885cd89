"""Channel-wise binary masks for the five completion tasks.

Tasks: ``i`` (inpainting), ``ri`` (reverse inpainting), ``col`` / ``col1`` /
``col2`` (colorization with 1 or 2 visible channels; plain ``col`` draws the
count per image), ``re`` (random extrapolation) and ``rec`` (random
extrapolation and colorization).

Masks are float arrays shaped ``(N, 3, H, W)`` holding exactly 0 or 1; a 1
marks a value the generator gets to see. Boxes use pixel units with ``x``
along the width axis and ``y`` along the height axis; a box covers columns
``x .. x+w-1`` and rows ``y .. y+h-1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

CHANNELS = 3
TASKS = ("i", "ri", "col", "col1", "col2", "re", "rec")
HNS_TASKS = ("re", "rec")
OCCLUSIONS = ("right_half", "left_half", "both_eyes", "right_eye", "left_eye", "mouth")


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelBox:
    x: int
    y: int
    w: int
    h: int
    channel: int

    @property
    def area(self) -> int:
        return self.w * self.h

    def validate(self, W: int, H: int) -> None:
        if not (0 <= self.x and self.x + self.w <= W and 0 <= self.y and self.y + self.h <= H
                and self.w >= 1 and self.h >= 1 and 0 <= self.channel < CHANNELS):
            raise ParameterError(f"{self} does not fit a {W}x{H} image")


class NormalizedBox(NamedTuple):
    x0: float
    y0: float
    x1: float
    y1: float


def normalize_box(box: ChannelBox, W: int, H: int) -> NormalizedBox:
    return NormalizedBox(box.x / W, box.y / H, (box.x + box.w) / W, (box.y + box.h) / H)


def denormalize_box(nb: NormalizedBox, W: int, H: int, channel: int = 0) -> ChannelBox:
    x, y = round(nb.x0 * W), round(nb.y0 * H)
    return ChannelBox(x, y, round(nb.x1 * W) - x, round(nb.y1 * H) - y, channel)


@dataclass
class MaskBatch:
    """Realized masks plus the rectangles that generated them.

    ``boxes[i][c]`` is the rectangle defining channel ``c`` of image ``i``,
    or ``None`` for a colorization channel that is entirely hidden. When
    ``box_kind`` is ``"hole"`` (inpainting, occlusion templates) the
    rectangle is the hidden region rather than the visible one.
    """

    task: str
    ratio: float
    boxes: list[list[ChannelBox | None]]
    mask: np.ndarray
    box_kind: str = "visible"
    width: int = field(init=False)
    height: int = field(init=False)

    def __post_init__(self):
        self.height, self.width = self.mask.shape[2:]

    def __len__(self) -> int:
        return self.mask.shape[0]

    def normalized_boxes(self) -> np.ndarray:
        """``(N, 3, 4)`` array of normalized corners; NaN for missing boxes."""
        out = np.full((len(self), CHANNELS, 4), np.nan)
        for i, row in enumerate(self.boxes):
            for c, b in enumerate(row):
                if b is not None:
                    out[i, c] = normalize_box(b, self.width, self.height)
        return out


def parse_task(task: str) -> tuple[str, int | None]:
    task = task.lower()
    if task not in TASKS:
        raise ParameterError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")
    if task.startswith("col"):
        return "col", int(task[3:]) if len(task) > 3 else None
    return task, None


def _check_ratio(S: float, W: int, H: int) -> None:
    if not 0.0 < S < 1.0:
        raise ParameterError(f"masking ratio must lie in (0, 1), got {S}")
    if S * W * H < 1 or S * H < 1:
        raise ParameterError(f"ratio {S} leaves less than one pixel on a {W}x{H} image")


def sample_box_arrays(rng: np.random.Generator, S: float, W: int, H: int,
                      size) -> tuple[np.ndarray, ...]:
    """Vectorized box draw: returns integer arrays ``(x, y, w, h)``.

    Height is uniform on ``[S*H, H]`` and rounded, width is chosen so the
    area stays ``S*W*H``, and the corner is uniform over valid positions.
    """
    _check_ratio(S, W, H)
    h = np.clip(np.rint(rng.uniform(S * H, H, size=size)), 1, H).astype(np.int64)
    w = np.clip(np.rint(S * W * H / h), 1, W).astype(np.int64)
    x = rng.integers(0, W - w + 1)
    y = rng.integers(0, H - h + 1)
    return x, y, w, h


def sample_rec_mask(rng: np.random.Generator, S: float, W: int, H: int) -> list[ChannelBox]:
    """One independent box per channel."""
    x, y, w, h = sample_box_arrays(rng, S, W, H, CHANNELS)
    return [ChannelBox(int(x[c]), int(y[c]), int(w[c]), int(h[c]), c) for c in range(CHANNELS)]


def centered_box(S: float, W: int, H: int, channel: int = 0) -> ChannelBox:
    _check_ratio(S, W, H)
    w = min(W, max(1, round(W * math.sqrt(S))))
    h = min(H, max(1, round(H * math.sqrt(S))))
    return ChannelBox((W - w) // 2, (H - h) // 2, w, h, channel)


def _box_mask(x, y, w, h, W: int, H: int) -> np.ndarray:
    """Indicator of boxes given arrays of identical shape ``s``: shape ``s + (H, W)``."""
    cols = np.arange(W)
    rows = np.arange(H)
    x, y, w, h = (np.asarray(a)[..., None] for a in (x, y, w, h))
    inx = (cols >= x) & (cols < x + w)
    iny = (rows >= y) & (rows < y + h)
    return (iny[..., :, None] & inx[..., None, :]).astype(np.float32)


def _rows_of_boxes(x, y, w, h) -> list[list[ChannelBox]]:
    return [[ChannelBox(int(x[i, c]), int(y[i, c]), int(w[i, c]), int(h[i, c]), c)
             for c in range(CHANNELS)] for i in range(x.shape[0])]


def make_mask(task: str, rng: np.random.Generator, S: float, W: int, H: int,
              N: int = 1) -> MaskBatch:
    base, k = parse_task(task)
    if N < 1:
        raise ParameterError("need at least one mask")
    if base == "col":
        if k is not None and k not in (1, 2):
            raise ParameterError(f"colorization keeps 1 or 2 channels visible, got {k}")
        ks = np.full(N, k) if k is not None else rng.integers(1, 3, size=N)
        mask = np.zeros((N, CHANNELS, H, W), dtype=np.float32)
        boxes: list[list[ChannelBox | None]] = []
        for i in range(N):
            visible = set(rng.permutation(CHANNELS)[: ks[i]].tolist())
            row: list[ChannelBox | None] = []
            for c in range(CHANNELS):
                if c in visible:
                    mask[i, c] = 1.0
                    row.append(ChannelBox(0, 0, W, H, c))
                else:
                    row.append(None)
            boxes.append(row)
        return MaskBatch(task, S, boxes, mask)

    if base in ("ri", "i"):
        b = centered_box(S, W, H)
        xs, ys, ws, hs = (np.full((N, CHANNELS), v) for v in (b.x, b.y, b.w, b.h))
        mask = _box_mask(xs, ys, ws, hs, W, H)
        if base == "i":
            return MaskBatch(task, S, _rows_of_boxes(xs, ys, ws, hs), 1.0 - mask, box_kind="hole")
        return MaskBatch(task, S, _rows_of_boxes(xs, ys, ws, hs), mask)

    if base == "re":
        x, y, w, h = (np.repeat(a[:, None], CHANNELS, axis=1)
                      for a in sample_box_arrays(rng, S, W, H, N))
    else:
        x, y, w, h = sample_box_arrays(rng, S, W, H, (N, CHANNELS))
    return MaskBatch(task, S, _rows_of_boxes(x, y, w, h), _box_mask(x, y, w, h, W, H))


def corruption_stats(mask) -> tuple[float, float]:
    """``(dropped, corrupted)`` pixel fractions.

    A pixel is dropped when every channel is hidden and corrupted when at
    least one is.
    """
    m = mask.mask if isinstance(mask, MaskBatch) else np.asarray(mask)
    visible = m > 0.5
    dropped = float((~visible.any(axis=1)).mean())
    corrupted = float((~visible.all(axis=1)).mean())
    return dropped, corrupted


@dataclass
class MaskStats:
    dropped: float
    corrupted: float
    masked_entries: float
    n: int


def _corners(x, y, w, h) -> np.ndarray:
    return np.stack([x, y, x + w, y + h], axis=-1)


def _overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    lo = np.maximum(a[..., :2], b[..., :2])
    hi = np.maximum(np.minimum(a[..., 2:], b[..., 2:]), lo)
    return np.concatenate([lo, hi], axis=-1)


def _area(c: np.ndarray) -> np.ndarray:
    return (c[..., 2] - c[..., 0]) * (c[..., 3] - c[..., 1])


def _box_counts(task: str, rng: np.random.Generator, S: float, W: int, H: int,
                m: int) -> tuple[int, int, int]:
    """Hidden-pixel counts for ``m`` re/rec masks straight from their boxes.

    Draws exactly what :func:`make_mask` would, so the counts equal those
    of the realized masks. Intersections of rectangles are rectangles, and
    the union of three follows by inclusion-exclusion.
    """
    shape = (m,) if task == "re" else (m, CHANNELS)
    c = _corners(*sample_box_arrays(rng, S, W, H, shape))
    if task == "re":
        c = np.repeat(c[:, None], CHANNELS, axis=1)
    a, b, d = c[:, 0], c[:, 1], c[:, 2]
    areas = _area(a) + _area(b) + _area(d)
    ab, ad, bd = _overlap(a, b), _overlap(a, d), _overlap(b, d)
    triple = _area(_overlap(ab, d))
    union = areas - _area(ab) - _area(ad) - _area(bd) + triple
    pixels = m * W * H
    return int(pixels - union.sum()), int(pixels - triple.sum()), int(CHANNELS * pixels - areas.sum())


def mask_statistics(task: str, rng: np.random.Generator, S: float, W: int, H: int, n: int,
                    chunk: int = 1000) -> MaskStats:
    """Empirical fractions over ``n`` masks, generated ``chunk`` at a time.

    ``masked_entries`` is the share of hidden (pixel, channel) values.
    Box tasks are counted from their rectangles; the rest are realized.
    """
    if n < 1:
        raise ParameterError("need at least one mask")
    base, _ = parse_task(task)
    dropped = corrupted = hidden = 0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        if base in HNS_TASKS:
            d, c, h = _box_counts(base, rng, S, W, H, m)
        else:
            visible = make_mask(task, rng, S, W, H, m).mask > 0.5
            d = int((~visible.any(axis=1)).sum())
            c = int((~visible.all(axis=1)).sum())
            h = int((~visible).sum())
        dropped, corrupted, hidden = dropped + d, corrupted + c, hidden + h
        done += m
    pixels = n * W * H
    return MaskStats(dropped / pixels, corrupted / pixels, hidden / (pixels * CHANNELS), n)


def analytic_stats(task: str, S: float) -> tuple[float, float]:
    """Expected ``(dropped, corrupted)`` fractions under an idealized uniform coverage."""
    base, k = parse_task(task)
    if base == "rec":
        return (1 - S) ** 3, 1 - S ** 3
    if base in ("re", "ri"):
        return 1 - S, 1 - S
    if base == "i":
        return S, S
    return 0.0, 1.0


def _region(cx: float, cy: float, w: float, h: float, W: int, H: int) -> ChannelBox:
    x0 = max(0, round(cx - w / 2))
    y0 = max(0, round(cy - h / 2))
    x1 = min(W, round(cx + w / 2))
    y1 = min(H, round(cy + h / 2))
    return ChannelBox(x0, y0, x1 - x0, y1 - y0, 0)


def occlusion_region(name: str, W: int, H: int) -> ChannelBox:
    """Hidden rectangle of a targeted-occlusion template.

    Left and right are image sides as displayed. Eye and mouth rectangles
    are fixed fractions of the frame, an approximation suited to aligned
    face crops rather than a landmark-anchored placement.
    """
    if W < 8 or H < 8:
        raise ParameterError("occlusion templates need images of at least 8x8")
    if name == "right_half":
        return ChannelBox(W // 2, 0, W - W // 2, H, 0)
    if name == "left_half":
        return ChannelBox(0, 0, W // 2, H, 0)
    if name == "left_eye":
        return _region(W / 3, H / 3, W / 3, H / 6, W, H)
    if name == "right_eye":
        return _region(2 * W / 3, H / 3, W / 3, H / 6, W, H)
    if name == "both_eyes":
        a, b = occlusion_region("left_eye", W, H), occlusion_region("right_eye", W, H)
        x0, y0 = min(a.x, b.x), min(a.y, b.y)
        x1, y1 = max(a.x + a.w, b.x + b.w), max(a.y + a.h, b.y + b.h)
        return ChannelBox(x0, y0, x1 - x0, y1 - y0, 0)
    if name == "mouth":
        return _region(W / 2, 3 * H / 4, W / 2, H / 6, W, H)
    raise ParameterError(f"unknown occlusion {name!r}; expected one of {', '.join(OCCLUSIONS)}")


def occlusion_template(name: str, W: int, H: int, N: int = 1) -> MaskBatch:
    r = occlusion_region(name, W, H)
    hole = _box_mask(r.x, r.y, r.w, r.h, W, H)
    mask = np.broadcast_to(1.0 - hole, (N, CHANNELS, H, W)).astype(np.float32)
    boxes = [[ChannelBox(r.x, r.y, r.w, r.h, c) for c in range(CHANNELS)] for _ in range(N)]
    return MaskBatch(f"occlusion:{name}", 0.0, boxes, mask, box_kind="hole")


def box_sidecar(boxes: list[ChannelBox | None]) -> str:
    """Text form of one image's boxes, one ``c x y w h`` line per channel."""
    return "".join(f"{b.channel} {b.x} {b.y} {b.w} {b.h}\n" for b in boxes if b is not None)


def parse_sidecar(text: str) -> list[ChannelBox]:
    out = []
    for line in text.splitlines():
        if line.strip():
            c, x, y, w, h = (int(v) for v in line.split())
            out.append(ChannelBox(x, y, w, h, c))
    return out


def export_mask(batch: MaskBatch, index: int, png_path) -> Path:
    """Write mask ``index`` as an RGB PNG (0/255 per channel) plus a ``.txt`` sidecar."""
    from .dataio import write_png

    png_path = Path(png_path)
    write_png(batch.mask[index], png_path)
    sidecar = png_path.with_suffix(".txt")
    sidecar.write_text(box_sidecar(batch.boxes[index]))
    return sidecar
