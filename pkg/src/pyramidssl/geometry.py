"""Integer box geometry and crop sampling.

Boxes live on the voxel grid: origin and size are integers and a box covers
the half-open region [origin, origin + size). All overlap arithmetic is done
in exact integer voxel counts; only the final IoU ratio is a float.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import SamplingExhausted, ShapeError

Vec3 = tuple[int, int, int]


@dataclass(frozen=True)
class Box3:
    """Axis-aligned integer box, half-open along each axis."""

    origin: Vec3
    size: Vec3

    def __post_init__(self):
        origin = tuple(int(v) for v in self.origin)
        size = tuple(int(v) for v in self.size)
        if len(origin) != 3 or len(size) != 3:
            raise ShapeError(f"Box3 needs 3 components, got {origin} / {size}")
        if any(s < 1 for s in size):
            raise ShapeError(f"Box3 extents must be >= 1, got {size}")
        if any(o < 0 for o in origin):
            raise ShapeError(f"Box3 origin must be non-negative, got {origin}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "size", size)

    @property
    def far(self) -> Vec3:
        return tuple(o + s for o, s in zip(self.origin, self.size))

    @property
    def volume(self) -> int:
        w, h, d = self.size
        return w * h * d

    def contains_box(self, other: "Box3") -> bool:
        return all(
            so >= o and sf <= f
            for so, o, sf, f in zip(other.origin, self.origin, other.far, self.far)
        )

    def as_lists(self) -> list[list[int]]:
        return [list(self.origin), list(self.size)]


def intersection_volume(a: Box3, b: Box3) -> int:
    vol = 1
    for ao, af, bo, bf in zip(a.origin, a.far, b.origin, b.far):
        overlap = min(af, bf) - max(ao, bo)
        if overlap <= 0:
            return 0
        vol *= overlap
    return vol


def iou(a: Box3, b: Box3) -> float:
    """Intersection-over-union on voxel counts; exact until the final division."""
    inter = intersection_volume(a, b)
    union = a.volume + b.volume - inter
    return inter / union


def min_bounding_box(a: Box3, b: Box3) -> Box3:
    origin = tuple(min(ao, bo) for ao, bo in zip(a.origin, b.origin))
    far = tuple(max(af, bf) for af, bf in zip(a.far, b.far))
    return Box3(origin, tuple(f - o for f, o in zip(far, origin)))


def _clip_size(size: Sequence[int], bound: Sequence[int]) -> Vec3:
    return tuple(min(int(s), int(b)) for s, b in zip(size, bound))


def _place_uniform(size: Vec3, bound: Vec3, base: Vec3, rng: np.random.Generator) -> Box3:
    origin = tuple(
        int(base[k] + rng.integers(0, bound[k] - size[k] + 1)) for k in range(3)
    )
    return Box3(origin, size)


def sample_global_pair(
    volume_shape: Sequence[int],
    size_set: Sequence[Sequence[int]],
    rng: np.random.Generator,
    iou_min: float = 0.3,
    max_attempts: int = 1000,
    reject: Callable[[Box3], bool] | None = None,
) -> tuple[Box3, Box3]:
    """Draw two overlapping boxes with IoU >= iou_min by rejection sampling.

    Each box's size is drawn independently and uniformly from size_set and
    clipped per-axis to the volume; positions are uniform over valid origins.
    `reject` may veto individual boxes (e.g. background-dominated crops).
    """
    shape = tuple(int(v) for v in volume_shape)
    if any(v < 1 for v in shape):
        raise ShapeError(f"volume shape must be positive, got {shape}")
    sizes = [tuple(int(v) for v in s) for s in size_set]
    if not sizes:
        raise ShapeError("size_set must be non-empty")
    zero = (0, 0, 0)
    for _ in range(max_attempts):
        sa = _clip_size(sizes[rng.integers(0, len(sizes))], shape)
        sb = _clip_size(sizes[rng.integers(0, len(sizes))], shape)
        a = _place_uniform(sa, shape, zero, rng)
        b = _place_uniform(sb, shape, zero, rng)
        if iou(a, b) < iou_min:
            continue
        if reject is not None and (reject(a) or reject(b)):
            continue
        return a, b
    raise SamplingExhausted(
        f"no admissible crop pair with IoU >= {iou_min} in {max_attempts} attempts"
    )


def sample_local_views(
    bbox: Box3,
    rng: np.random.Generator,
    count: int = 6,
    size_set: Sequence[Sequence[int]] = ((8, 8, 8), (16, 16, 16), (32, 32, 16), (32, 32, 32)),
) -> tuple[Box3, ...]:
    """Draw `count` small boxes uniformly inside bbox, sizes clipped to fit."""
    sizes = [tuple(int(v) for v in s) for s in size_set]
    out = []
    for _ in range(count):
        size = _clip_size(sizes[rng.integers(0, len(sizes))], bbox.size)
        out.append(_place_uniform(size, bbox.size, bbox.origin, rng))
    return tuple(out)


@dataclass(frozen=True)
class SubCropResult:
    """Two overlapping global crops, their joint bounding box, and local views."""

    global_a: Box3
    global_b: Box3
    bounding_box: Box3
    locals: tuple[Box3, ...]


def sample_subcrop(
    volume_shape: Sequence[int],
    rng: np.random.Generator,
    global_size_set: Sequence[Sequence[int]] = (
        (64, 64, 32),
        (96, 96, 64),
        (96, 96, 96),
        (112, 112, 64),
    ),
    local_size_set: Sequence[Sequence[int]] = ((8, 8, 8), (16, 16, 16), (32, 32, 16), (32, 32, 32)),
    iou_min: float = 0.3,
    num_local_views: int = 6,
    max_attempts: int = 1000,
    reject: Callable[[Box3], bool] | None = None,
) -> SubCropResult:
    a, b = sample_global_pair(
        volume_shape,
        global_size_set,
        rng,
        iou_min=iou_min,
        max_attempts=max_attempts,
        reject=reject,
    )
    bbox = min_bounding_box(a, b)
    local_boxes = sample_local_views(bbox, rng, count=num_local_views, size_set=local_size_set)
    return SubCropResult(a, b, bbox, local_boxes)


@dataclass(frozen=True)
class CropSpec2D:
    """A 2D crop window plus the output size it will be resized to."""

    origin: tuple[int, int]  # (row, col)
    size: tuple[int, int]  # (height, width)
    scale_fraction: float  # realized area fraction of the source image
    output_size: int = 224

    def __post_init__(self):
        if any(s < 1 for s in self.size) or any(o < 0 for o in self.origin):
            raise ShapeError(f"invalid 2D crop {self.origin} / {self.size}")


def _sample_crop_2d(
    image_hw: tuple[int, int],
    scale_range: tuple[float, float],
    ratio_range: tuple[float, float],
    output_size: int,
    rng: np.random.Generator,
    attempts: int = 100,
) -> CropSpec2D:
    h_img, w_img = image_hw
    area = h_img * w_img
    lo, hi = scale_range
    for _ in range(attempts):
        frac = rng.uniform(lo, hi)
        log_ratio = rng.uniform(math.log(ratio_range[0]), math.log(ratio_range[1]))
        ratio = math.exp(log_ratio)  # width / height
        w = int(round(math.sqrt(frac * area * ratio)))
        h = int(round(math.sqrt(frac * area / ratio)))
        if w < 1 or h < 1 or w > w_img or h > h_img:
            continue
        realized = (w * h) / area
        if not (lo <= realized <= hi):
            continue
        r = int(rng.integers(0, h_img - h + 1))
        c = int(rng.integers(0, w_img - w + 1))
        return CropSpec2D((r, c), (h, w), realized, output_size)
    # Fallback: keep the image's own aspect ratio at the top of the scale range;
    # this always realizes a fraction inside [lo, hi] for non-tiny images.
    side = math.sqrt(hi)
    h = min(h_img, int(round(side * h_img)))
    w = min(w_img, int(round(side * w_img)))
    h, w = max(h, 1), max(w, 1)
    realized = (w * h) / area
    r = int(rng.integers(0, h_img - h + 1))
    c = int(rng.integers(0, w_img - w + 1))
    return CropSpec2D((r, c), (h, w), realized, output_size)


def multicrop_2d(
    image_shape: Sequence[int],
    rng: np.random.Generator,
    num_global: int = 2,
    num_local: int = 6,
    global_scale_range: tuple[float, float] = (0.3, 1.0),
    local_scale_range: tuple[float, float] = (0.05, 0.3),
    ratio_range: tuple[float, float] = (0.75, 4.0 / 3.0),
    output_size: int = 224,
) -> tuple[tuple[CropSpec2D, ...], tuple[CropSpec2D, ...]]:
    """Sample large and small crop windows for the 2D multi-crop recipe."""
    h, w = int(image_shape[0]), int(image_shape[1])
    if h < 1 or w < 1:
        raise ShapeError(f"image shape must be positive, got {image_shape}")
    globals_ = tuple(
        _sample_crop_2d((h, w), global_scale_range, ratio_range, output_size, rng)
        for _ in range(num_global)
    )
    locals_ = tuple(
        _sample_crop_2d((h, w), local_scale_range, ratio_range, output_size, rng)
        for _ in range(num_local)
    )
    return globals_, locals_
