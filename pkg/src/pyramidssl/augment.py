"""Two-stage view augmentation with exact parameter replay.

Stage one ("global") perturbs geometry: flips, small rotations, affine
warps. Stage two ("local") perturbs appearance: grayscale, blur, noise,
gamma, cutout, block swap. Every random draw is recorded in AugmentParams so
the same output can be rebuilt bit-exactly without the original rng.

Arrays are channel-last float32 in [0, 1]: (H, W, C) or (X, Y, Z, C).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .config import AugmentSection, CropSection
from .data import Sample, crop_payload, is_rejected_background, normalized_air_threshold
from .errors import ShapeError
from .geometry import CropSpec2D, SubCropResult


@dataclass(frozen=True)
class AugmentParams:
    """Record of one stage's sampled transform parameters (None means skipped)."""

    flip_axes: tuple = ()
    rotation_deg: float | None = None
    rotation_plane: tuple = (0, 1)
    affine_scale: float | None = None
    grayscale: bool = False
    blur_sigma: float | None = None
    noise_std: float | None = None
    noise_seed: int | None = None
    gamma: float | None = None
    cutout_box: tuple | None = None  # ((origin...), (size...))
    swap_blocks: tuple | None = None  # ((src...), (dst...), (size...))
    seed: int | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(payload: dict) -> "AugmentParams":
        def tup(v):
            return tuple(tuple(x) if isinstance(x, list) else x for x in v) if v is not None else None

        clean = dict(payload)
        for key in ("flip_axes", "rotation_plane"):
            if clean.get(key) is not None:
                clean[key] = tuple(clean[key])
        for key in ("cutout_box", "swap_blocks"):
            clean[key] = tup(clean.get(key))
        return AugmentParams(**clean)


def _as_float32(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image, dtype=np.float32)


def resize_spatial(image: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Bilinear/trilinear resize of a channel-last array to an exact shape."""
    spatial = image.shape[:-1]
    target = tuple(int(t) for t in target)
    if len(target) != len(spatial):
        raise ShapeError(f"resize target rank {len(target)} != spatial rank {len(spatial)}")
    if tuple(spatial) == target:
        return _as_float32(image).copy()
    t = torch.from_numpy(_as_float32(image))
    t = t.permute(-1, *range(len(spatial))).unsqueeze(0)  # (1, C, *spatial)
    mode = "bilinear" if len(spatial) == 2 else "trilinear"
    out = F.interpolate(t, size=target, mode=mode, align_corners=False)
    out = out.squeeze(0).permute(*range(1, len(spatial) + 1), 0)
    return out.contiguous().numpy()


def _maybe(rng: np.random.Generator, prob: float) -> bool:
    return bool(rng.random() < prob)


# ---------------------------------------------------------------------------
# 2D stages


def _sample_global_2d(shape, cfg: AugmentSection, rng) -> AugmentParams:
    flip_axes = (1,) if _maybe(rng, cfg.apply_prob) else ()
    rotation = float(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg)) if _maybe(rng, cfg.apply_prob) else None
    return AugmentParams(flip_axes=flip_axes, rotation_deg=rotation, rotation_plane=(0, 1))


def apply_global_2d(
    image: np.ndarray,
    cfg: AugmentSection,
    rng: np.random.Generator | None = None,
    params: AugmentParams | None = None,
) -> tuple[np.ndarray, AugmentParams]:
    """Horizontal flip and small rotation; returns (image, params) for replay."""
    if params is None:
        if rng is None:
            raise ShapeError("apply_global_2d needs either rng or params")
        params = _sample_global_2d(image.shape, cfg, rng)
    out = _as_float32(image).copy()
    for axis in params.flip_axes:
        out = np.flip(out, axis=axis)
    if params.rotation_deg is not None:
        out = ndimage.rotate(
            out,
            params.rotation_deg,
            axes=params.rotation_plane,
            reshape=False,
            order=1,
            mode="nearest",
        )
    return np.clip(out, 0.0, 1.0).astype(np.float32), params


def _sample_local_2d(shape, cfg: AugmentSection, rng) -> AugmentParams:
    grayscale = _maybe(rng, cfg.apply_prob)
    blur = float(rng.uniform(*cfg.blur_sigma_range)) if _maybe(rng, cfg.apply_prob) else None
    cutout = None
    if _maybe(rng, cfg.apply_prob):
        h, w = shape[0], shape[1]
        # independent side fractions in [0.1, 0.5] keep the area at or below 25%
        max_side = math.sqrt(cfg.cutout_max_area_fraction)
        fh = rng.uniform(0.1, max_side)
        fw = rng.uniform(0.1, max_side)
        ch = max(1, int(fh * h))
        cw = max(1, int(fw * w))
        r = int(rng.integers(0, h - ch + 1))
        c = int(rng.integers(0, w - cw + 1))
        cutout = ((r, c), (ch, cw))
    return AugmentParams(grayscale=grayscale, blur_sigma=blur, cutout_box=cutout)


def apply_local_2d(
    image: np.ndarray,
    cfg: AugmentSection,
    rng: np.random.Generator | None = None,
    params: AugmentParams | None = None,
) -> tuple[np.ndarray, AugmentParams]:
    """Grayscale, gaussian blur, cutout (filled with 0)."""
    if params is None:
        if rng is None:
            raise ShapeError("apply_local_2d needs either rng or params")
        params = _sample_local_2d(image.shape, cfg, rng)
    out = _as_float32(image).copy()
    if params.grayscale:
        out[:] = out.mean(axis=-1, keepdims=True)
    if params.blur_sigma is not None:
        out = ndimage.gaussian_filter(out, sigma=(params.blur_sigma, params.blur_sigma, 0.0))
    if params.cutout_box is not None:
        (r, c), (ch, cw) = params.cutout_box
        out[r : r + ch, c : c + cw, :] = 0.0
    return np.clip(out, 0.0, 1.0).astype(np.float32), params


# ---------------------------------------------------------------------------
# 3D stages

_PLANES_3D = ((0, 1), (0, 2), (1, 2))


def _sample_global_3d(shape, cfg: AugmentSection, rng) -> AugmentParams:
    flip_axes = tuple(axis for axis in range(3) if _maybe(rng, cfg.apply_prob))
    rotation = None
    plane = (0, 1)
    scale = None
    if _maybe(rng, cfg.apply_prob):
        rotation = float(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg))
        plane = _PLANES_3D[rng.integers(0, len(_PLANES_3D))]
        scale = float(rng.uniform(*cfg.affine_scale_range))
    return AugmentParams(
        flip_axes=flip_axes, rotation_deg=rotation, rotation_plane=plane, affine_scale=scale
    )


def _affine_matrix_3d(rotation_deg: float, plane: tuple, scale: float) -> np.ndarray:
    theta = math.radians(rotation_deg)
    rot = np.eye(3)
    i, j = plane
    rot[i, i] = math.cos(theta)
    rot[i, j] = -math.sin(theta)
    rot[j, i] = math.sin(theta)
    rot[j, j] = math.cos(theta)
    return rot * scale


def apply_global_3d(
    volume: np.ndarray,
    cfg: AugmentSection,
    rng: np.random.Generator | None = None,
    params: AugmentParams | None = None,
) -> tuple[np.ndarray, AugmentParams]:
    """Random axis flips plus a small rotation/scale affine (trilinear)."""
    if params is None:
        if rng is None:
            raise ShapeError("apply_global_3d needs either rng or params")
        params = _sample_global_3d(volume.shape, cfg, rng)
    out = _as_float32(volume).copy()
    for axis in params.flip_axes:
        out = np.flip(out, axis=axis)
    if params.rotation_deg is not None:
        forward = _affine_matrix_3d(params.rotation_deg, params.rotation_plane, params.affine_scale)
        inverse = np.linalg.inv(forward)
        matrix = np.eye(4)
        matrix[:3, :3] = inverse
        center = np.array([(s - 1) / 2.0 for s in out.shape[:3]] + [0.0])
        offset = center - matrix @ center
        out = ndimage.affine_transform(out, matrix, offset=offset, order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(np.float32), params


def _sample_local_3d(shape, cfg: AugmentSection, rng) -> AugmentParams:
    blur = float(rng.uniform(*cfg.blur_sigma_range)) if _maybe(rng, cfg.apply_prob) else None
    noise_std = None
    noise_seed = None
    if _maybe(rng, cfg.apply_prob):
        noise_std = float(rng.uniform(0.0, cfg.noise_std_max))
        noise_seed = int(rng.integers(0, 2**63 - 1))
    gamma = None
    if _maybe(rng, cfg.apply_prob):
        lo, hi = cfg.gamma_range
        gamma = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
    swap = None
    if _maybe(rng, cfg.apply_prob):
        spatial = shape[:3]
        size = tuple(max(1, int(rng.integers(1, max(2, s // 4 + 1)))) for s in spatial)
        for _ in range(20):
            src = tuple(int(rng.integers(0, s - z + 1)) for s, z in zip(spatial, size))
            dst = tuple(int(rng.integers(0, s - z + 1)) for s, z in zip(spatial, size))
            disjoint = any(
                src[k] + size[k] <= dst[k] or dst[k] + size[k] <= src[k] for k in range(3)
            )
            if disjoint:
                swap = (src, dst, size)
                break
    return AugmentParams(
        blur_sigma=blur, noise_std=noise_std, noise_seed=noise_seed, gamma=gamma, swap_blocks=swap
    )


def apply_local_3d(
    volume: np.ndarray,
    cfg: AugmentSection,
    rng: np.random.Generator | None = None,
    params: AugmentParams | None = None,
) -> tuple[np.ndarray, AugmentParams]:
    """Gaussian blur, additive noise, gamma shift, and block swap."""
    if params is None:
        if rng is None:
            raise ShapeError("apply_local_3d needs either rng or params")
        params = _sample_local_3d(volume.shape, cfg, rng)
    out = _as_float32(volume).copy()
    if params.blur_sigma is not None:
        sigma = (params.blur_sigma,) * 3 + (0.0,)
        out = ndimage.gaussian_filter(out, sigma=sigma)
    if params.noise_std is not None:
        noise_rng = np.random.default_rng(params.noise_seed)
        out = out + noise_rng.normal(0.0, params.noise_std, size=out.shape).astype(np.float32)
    if params.gamma is not None:
        out = np.clip(out, 0.0, 1.0) ** params.gamma
    if params.swap_blocks is not None:
        src, dst, size = params.swap_blocks
        s_idx = tuple(slice(o, o + z) for o, z in zip(src, size)) + (slice(None),)
        d_idx = tuple(slice(o, o + z) for o, z in zip(dst, size)) + (slice(None),)
        a = out[s_idx].copy()
        out[s_idx] = out[d_idx]
        out[d_idx] = a
    return np.clip(out, 0.0, 1.0).astype(np.float32), params


# ---------------------------------------------------------------------------
# View assembly


@dataclass
class ViewSet:
    """Two restoration targets, their corrupted inputs, and small local views."""

    x1: np.ndarray
    x2: np.ndarray
    x1c: np.ndarray
    x2c: np.ndarray
    locals: list
    meta: dict = field(default_factory=dict)


def _global_branch_3d(payload, box, cfg_crop: CropSection, cfg_aug, rng):
    crop = crop_payload(payload, box.origin, box.size)
    warped, gparams = apply_global_3d(crop, cfg_aug, rng=rng)
    target = resize_spatial(warped, cfg_crop.global_view_size_3d)
    corrupted, lparams = apply_local_3d(target, cfg_aug, rng=rng)
    return target, corrupted, gparams, lparams


def make_view_set_3d(
    sample: Sample,
    crops: SubCropResult,
    cfg_crop: CropSection,
    cfg_aug: AugmentSection,
    rng: np.random.Generator,
) -> ViewSet:
    """Build the 3D view set from a sampled crop family.

    Each global branch: crop -> global stage -> resize -> target x_i, then the
    local stage corrupts a copy into the network input x_ic. Local views are
    cropped straight from the sample, resized, and locally corrupted.
    """
    payload = sample.payload
    x1, x1c, g1, l1 = _global_branch_3d(payload, crops.global_a, cfg_crop, cfg_aug, rng)
    x2, x2c, g2, l2 = _global_branch_3d(payload, crops.global_b, cfg_crop, cfg_aug, rng)
    locals_ = []
    local_params = []
    for box in crops.locals:
        small = crop_payload(payload, box.origin, box.size)
        small = resize_spatial(small, cfg_crop.local_view_size_3d)
        corrupted, lp = apply_local_3d(small, cfg_aug, rng=rng)
        locals_.append(corrupted)
        local_params.append(lp)
    meta = {
        "crops": crops,
        "global_params": (g1, g2),
        "input_params": (l1, l2),
        "local_params": tuple(local_params),
    }
    return ViewSet(x1, x2, x1c, x2c, locals_, meta)


def _global_branch_2d(payload, spec: CropSpec2D, cfg_aug, rng):
    crop = crop_payload(payload, spec.origin, spec.size)
    warped, gparams = apply_global_2d(crop, cfg_aug, rng=rng)
    target = resize_spatial(warped, (spec.output_size, spec.output_size))
    corrupted, lparams = apply_local_2d(target, cfg_aug, rng=rng)
    return target, corrupted, gparams, lparams


def make_view_set_2d(
    sample: Sample,
    crops: tuple,
    cfg_crop: CropSection,
    cfg_aug: AugmentSection,
    rng: np.random.Generator,
) -> ViewSet:
    """Build the 2D view set from multi-crop specs (two large, several small)."""
    global_specs, local_specs = crops
    if len(global_specs) != 2:
        raise ShapeError(f"need exactly 2 global crops, got {len(global_specs)}")
    payload = sample.payload
    x1, x1c, g1, l1 = _global_branch_2d(payload, global_specs[0], cfg_aug, rng)
    x2, x2c, g2, l2 = _global_branch_2d(payload, global_specs[1], cfg_aug, rng)
    locals_ = []
    local_params = []
    for spec in local_specs:
        small = crop_payload(payload, spec.origin, spec.size)
        small = resize_spatial(small, (spec.output_size, spec.output_size))
        corrupted, lp = apply_local_2d(small, cfg_aug, rng=rng)
        locals_.append(corrupted)
        local_params.append(lp)
    meta = {
        "crops": crops,
        "global_params": (g1, g2),
        "input_params": (l1, l2),
        "local_params": tuple(local_params),
    }
    return ViewSet(x1, x2, x1c, x2c, locals_, meta)


def background_reject_predicate(sample: Sample, data_cfg) -> "callable | None":
    """Crop veto for CT pre-training: too much air means the crop is skipped."""
    if sample.modality != "ct3d":
        return None
    if sample.hu_flag:
        threshold = data_cfg.air_threshold_hu
    else:
        window = sample.meta.get("hu_window", tuple(data_cfg.hu_window))
        threshold = normalized_air_threshold(window[0], window[1], data_cfg.air_threshold_hu)
    payload = sample.payload

    def reject(box) -> bool:
        crop = crop_payload(payload, box.origin, box.size)
        return is_rejected_background(crop, threshold, data_cfg.background_fraction)

    return reject
