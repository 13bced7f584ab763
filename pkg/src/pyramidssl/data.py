"""Datasets: synthetic generators, preprocessing, splits, raw-file container.

A sample's payload is channel-last float32 (H, W, C) for 2D, (X, Y, Z, C) for
3D. CT payloads carry raw Hounsfield-style values until `preprocess` windows
them to [0, 1]; `hu_flag` tracks which state a sample is in, which makes the
preprocessing idempotent at the sample level.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, ShapeError

MODALITIES = ("xray2d", "ct3d", "mri3d")
SYNTH_KINDS = ("xray2d", "ct3d-seg", "mri3d-seg", "ct3d-cls")

FORMAT_VERSION = 1


@dataclass
class Sample:
    id: str
    payload: np.ndarray  # channel-last float32
    modality: str  # "xray2d" | "ct3d" | "mri3d"
    labels: np.ndarray | None = None  # class vector (multi-hot float32)
    mask: np.ndarray | None = None  # segmentation mask, spatial shape of payload
    spacing: tuple = (1.0, 1.0, 1.0)
    hu_flag: bool = False  # True while payload still holds raw HU values
    meta: dict = field(default_factory=dict)

    @property
    def spatial_shape(self) -> tuple:
        return self.payload.shape[:-1]


def truncate_hu(volume: np.ndarray, low: float = -1000.0, high: float = 1000.0) -> np.ndarray:
    """Clamp to [low, high] then min-max normalize that window to [0, 1]."""
    if not high > low:
        raise ConfigError(f"HU window must satisfy high > low, got [{low}, {high}]")
    v = np.clip(np.asarray(volume, dtype=np.float32), low, high)
    return ((v - low) / (high - low)).astype(np.float32)


def normalized_air_threshold(low: float, high: float, air_hu: float = -150.0) -> float:
    """Where the air/background HU threshold lands after windowing to [0, 1]."""
    return (min(max(air_hu, low), high) - low) / (high - low)


def is_rejected_background(
    crop: np.ndarray, air_threshold: float = -150.0, fraction: float = 0.85
) -> bool:
    """True when strictly more than `fraction` of voxels lie below the threshold.

    `crop` and `air_threshold` just need to be in the same units: raw HU with
    the default threshold, or windowed [0, 1] values with
    `normalized_air_threshold(...)`.
    """
    values = np.asarray(crop)
    background = float(np.count_nonzero(values < air_threshold)) / values.size
    return background > fraction


def preprocess(sample: Sample, low: float = -1000.0, high: float = 1000.0) -> Sample:
    """Window a raw-HU sample to [0, 1]; already-windowed samples pass through."""
    if not sample.hu_flag:
        return sample
    out = dataclasses.replace(sample, payload=truncate_hu(sample.payload, low, high))
    out.hu_flag = False
    out.meta = dict(sample.meta)
    out.meta["hu_window"] = (float(low), float(high))
    return out


@dataclass(frozen=True)
class SplitPlan:
    train_ids: tuple
    val_ids: tuple
    test_ids: tuple
    pretrain_ids: tuple
    finetune_ids: tuple
    labeling_ratio: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
            "test_ids": list(self.test_ids),
            "pretrain_ids": list(self.pretrain_ids),
            "finetune_ids": list(self.finetune_ids),
            "labeling_ratio": self.labeling_ratio,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(payload: dict) -> "SplitPlan":
        try:
            return SplitPlan(
                tuple(payload["train_ids"]),
                tuple(payload["val_ids"]),
                tuple(payload["test_ids"]),
                tuple(payload["pretrain_ids"]),
                tuple(payload["finetune_ids"]),
                float(payload["labeling_ratio"]),
                int(payload["seed"]),
            )
        except KeyError as e:
            raise FormatError(f"split plan missing key: {e}") from e

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @staticmethod
    def load(path: str | Path) -> "SplitPlan":
        p = Path(path)
        if not p.is_file():
            raise FormatError(f"split file not found: {p}")
        return SplitPlan.from_dict(json.loads(p.read_text()))


def make_splits(
    ids: Sequence[str],
    labeling_ratio: float,
    seed: int,
    fractions: tuple = (0.7, 0.1, 0.2),
) -> SplitPlan:
    """Shuffle ids and carve train/val/test, then partition train by ratio.

    |train| = floor(f_train * n), |val| = floor(f_val * n), test takes the
    rest. The fine-tune subset is the first floor(r * |train|) train ids and
    the pre-train set is the remainder, so the two partition train exactly
    (ratio 1 labels everything and leaves nothing to pre-train on).
    """
    if not (0.0 < labeling_ratio <= 1.0):
        raise ConfigError(f"labeling_ratio must be in (0, 1], got {labeling_ratio}")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    ids = [str(i) for i in ids]
    if len(set(ids)) != len(ids):
        raise ConfigError("dataset ids must be unique")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n = len(order)
    n_train = math.floor(fractions[0] * n)
    n_val = math.floor(fractions[1] * n)
    train = tuple(order[:n_train])
    val = tuple(order[n_train : n_train + n_val])
    test = tuple(order[n_train + n_val :])
    n_fine = math.floor(labeling_ratio * n_train)
    finetune = tuple(train[:n_fine])
    pretrain = tuple(train[n_fine:])
    return SplitPlan(train, val, test, pretrain, finetune, float(labeling_ratio), int(seed))


# ---------------------------------------------------------------------------
# Synthetic data


def _smooth_noise(rng: np.random.Generator, shape, sigma: float, lo: float, hi: float):
    noise = rng.normal(0.0, 1.0, size=shape)
    noise = ndimage.gaussian_filter(noise, sigma=sigma)
    nmin, nmax = noise.min(), noise.max()
    if nmax - nmin < 1e-12:
        return np.full(shape, (lo + hi) / 2.0, dtype=np.float32)
    return (lo + (noise - nmin) / (nmax - nmin) * (hi - lo)).astype(np.float32)


def _ellipsoid_mask(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def _gaussian_blob_2d(shape, center, sigma, amplitude) -> np.ndarray:
    yy, xx = np.ogrid[0 : shape[0], 0 : shape[1]]
    d2 = (yy - center[0]) ** 2 + (xx - center[1]) ** 2
    return amplitude * np.exp(-0.5 * d2 / sigma**2)


def _balance_labels(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # Guarantee each class has at least one positive and one negative so
    # ranking metrics stay defined on any reasonably sized subset.
    n, k = labels.shape
    if n < 2:
        return labels
    for c in range(k):
        col = labels[:, c]
        if col.min() == col.max():
            flip = int(rng.integers(0, n))
            labels[flip, c] = 1.0 - col[flip]
    return labels


def _synth_xray2d(n, rng, shape=(256, 256), num_classes=3):
    samples = []
    class_sigma = [24.0, 12.0, 5.0]
    class_amp = [0.25, 0.35, 0.5]
    labels = (rng.random((n, num_classes)) < 0.5).astype(np.float32)
    labels = _balance_labels(labels, rng)
    for i in range(n):
        img = _smooth_noise(rng, shape, sigma=12.0, lo=0.15, hi=0.55)
        blobs = []
        for c in range(num_classes):
            if labels[i, c] > 0.5:
                count = int(rng.integers(1, 4))
                for _ in range(count):
                    center = (rng.uniform(0.2, 0.8) * shape[0], rng.uniform(0.2, 0.8) * shape[1])
                    sigma = class_sigma[c % len(class_sigma)] * rng.uniform(0.8, 1.2)
                    amp = class_amp[c % len(class_amp)] * rng.uniform(0.8, 1.2)
                    img = img + _gaussian_blob_2d(shape, center, sigma, amp).astype(np.float32)
                    blobs.append({"class": c, "center": list(center), "sigma": sigma, "amp": amp})
        payload = np.clip(img, 0.0, 1.0).astype(np.float32)[..., None]
        samples.append(
            Sample(
                id=f"xray2d-{i:04d}",
                payload=payload,
                modality="xray2d",
                labels=labels[i].copy(),
                spacing=(1.0, 1.0),
                hu_flag=False,
                meta={"blobs": blobs},
            )
        )
    return samples


def _body_and_organ(rng, shape, organ_hu, body_hu=40.0, air_hu=-1000.0):
    center = tuple(s / 2.0 + rng.uniform(-0.03, 0.03) * s for s in shape)
    body_radii = tuple(rng.uniform(0.42, 0.48) * s for s in shape)
    body = _ellipsoid_mask(shape, center, body_radii)
    vol = np.full(shape, air_hu, dtype=np.float32)
    tissue = _smooth_noise(rng, shape, sigma=6.0, lo=body_hu - 60.0, hi=body_hu + 60.0)
    vol[body] = tissue[body]
    organ_center = tuple(
        c + rng.uniform(-0.15, 0.15) * s for c, s in zip(center, shape)
    )
    organ_radii = tuple(rng.uniform(0.12, 0.22) * s for s in shape)
    organ = _ellipsoid_mask(shape, organ_center, organ_radii)
    organ &= body
    vol[organ] = organ_hu + rng.normal(0.0, 10.0, size=int(organ.sum())).astype(np.float32)
    params = {
        "body_center": list(center),
        "body_radii": list(body_radii),
        "organ_center": list(organ_center),
        "organ_radii": list(organ_radii),
    }
    return vol, body, organ, params


def _synth_ct3d_seg(n, rng, shape=(96, 96, 64)):
    samples = []
    for i in range(n):
        vol, _, organ, params = _body_and_organ(rng, shape, organ_hu=180.0)
        mask = organ.astype(np.float32)[..., None]
        samples.append(
            Sample(
                id=f"ct3d-seg-{i:04d}",
                payload=vol[..., None],
                modality="ct3d",
                mask=mask,
                spacing=(1.0, 1.0, 2.5),
                hu_flag=True,
                meta={"ellipsoid": params},
            )
        )
    return samples


def _synth_ct3d_cls(n, rng, shape=(96, 96, 64)):
    samples = []
    labels = (rng.random((n, 1)) < 0.5).astype(np.float32)
    labels = _balance_labels(labels, rng)
    for i in range(n):
        vol, body, _, params = _body_and_organ(rng, shape, organ_hu=60.0)
        if labels[i, 0] > 0.5:
            center = tuple(
                c + rng.uniform(-0.12, 0.12) * s
                for c, s in zip([s / 2 for s in shape], shape)
            )
            radii = tuple(rng.uniform(0.08, 0.14) * s for s in shape)
            nodule = _ellipsoid_mask(shape, center, radii) & body
            vol[nodule] = 400.0
            params["nodule_center"] = list(center)
            params["nodule_radii"] = list(radii)
        samples.append(
            Sample(
                id=f"ct3d-cls-{i:04d}",
                payload=vol[..., None],
                modality="ct3d",
                labels=labels[i].copy(),
                spacing=(1.0, 1.0, 2.5),
                hu_flag=True,
                meta={"ellipsoid": params},
            )
        )
    return samples


def _synth_mri3d_seg(n, rng, shape=(96, 96, 64)):
    samples = []
    for i in range(n):
        center = tuple(s / 2.0 for s in shape)
        brain_radii = tuple(rng.uniform(0.4, 0.46) * s for s in shape)
        brain = _ellipsoid_mask(shape, center, brain_radii)
        vol = _smooth_noise(rng, shape, sigma=4.0, lo=0.02, hi=0.1)
        tissue = _smooth_noise(rng, shape, sigma=5.0, lo=0.3, hi=0.55)
        vol[brain] = tissue[brain]
        tumor_center = tuple(c + rng.uniform(-0.12, 0.12) * s for c, s in zip(center, shape))
        tumor_radii = tuple(rng.uniform(0.1, 0.18) * s for s in shape)
        tumor = _ellipsoid_mask(shape, tumor_center, tumor_radii) & brain
        vol[tumor] = np.clip(0.8 + rng.normal(0.0, 0.03, size=int(tumor.sum())), 0.0, 1.0)
        params = {"tumor_center": list(tumor_center), "tumor_radii": list(tumor_radii)}
        samples.append(
            Sample(
                id=f"mri3d-seg-{i:04d}",
                payload=np.clip(vol, 0.0, 1.0).astype(np.float32)[..., None],
                modality="mri3d",
                mask=tumor.astype(np.float32)[..., None],
                spacing=(1.0, 1.0, 1.0),
                hu_flag=False,
                meta={"ellipsoid": params},
            )
        )
    return samples


def synth_dataset(kind: str, n: int, seed: int, shape: tuple | None = None) -> list[Sample]:
    """Generate n synthetic samples of the given kind, fully seed-determined."""
    if kind not in SYNTH_KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    if n < 0:
        raise ConfigError("n must be >= 0")
    rng = np.random.default_rng(seed)
    if kind == "xray2d":
        return _synth_xray2d(n, rng, shape=shape or (256, 256))
    if kind == "ct3d-seg":
        return _synth_ct3d_seg(n, rng, shape=shape or (96, 96, 64))
    if kind == "ct3d-cls":
        return _synth_ct3d_cls(n, rng, shape=shape or (96, 96, 64))
    return _synth_mri3d_seg(n, rng, shape=shape or (96, 96, 64))


# ---------------------------------------------------------------------------
# Raw on-disk container: <root>/<id>.json sidecar + <root>/<id>.bin blob.


def save_sample(sample: Sample, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(sample.payload, dtype="<f4")
    sidecar = {
        "format_version": FORMAT_VERSION,
        "id": sample.id,
        "shape": list(payload.shape),
        "dtype": "float32",
        "modality": sample.modality,
        "spacing": list(sample.spacing),
        "hu_flag": bool(sample.hu_flag),
        "labels": None if sample.labels is None else [float(v) for v in sample.labels],
        "mask_shape": None if sample.mask is None else list(sample.mask.shape),
        "meta": sample.meta,
    }
    blob = payload.tobytes(order="C")
    if sample.mask is not None:
        blob += np.ascontiguousarray(sample.mask, dtype="<f4").tobytes(order="C")
    (root / f"{sample.id}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    (root / f"{sample.id}.bin").write_bytes(blob)


def load_sample(root: str | Path, sample_id: str) -> Sample:
    root = Path(root)
    sidecar_path = root / f"{sample_id}.json"
    bin_path = root / f"{sample_id}.bin"
    if not sidecar_path.is_file() or not bin_path.is_file():
        raise FormatError(f"sample {sample_id!r} not found under {root}")
    sidecar = json.loads(sidecar_path.read_text())
    if sidecar.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"unsupported sample format version {sidecar.get('format_version')!r}"
        )
    if sidecar.get("dtype") != "float32":
        raise FormatError(f"unsupported dtype {sidecar.get('dtype')!r}")
    shape = tuple(sidecar["shape"])
    mask_shape = sidecar.get("mask_shape")
    raw = bin_path.read_bytes()
    n_payload = int(np.prod(shape))
    n_mask = int(np.prod(mask_shape)) if mask_shape else 0
    expected = 4 * (n_payload + n_mask)
    if len(raw) != expected:
        raise FormatError(
            f"blob for {sample_id!r} has {len(raw)} bytes, expected {expected}"
        )
    payload = np.frombuffer(raw, dtype="<f4", count=n_payload).reshape(shape).copy()
    mask = None
    if mask_shape:
        mask = (
            np.frombuffer(raw, dtype="<f4", count=n_mask, offset=4 * n_payload)
            .reshape(tuple(mask_shape))
            .copy()
        )
    labels = sidecar.get("labels")
    return Sample(
        id=sidecar["id"],
        payload=payload,
        modality=sidecar["modality"],
        labels=None if labels is None else np.asarray(labels, dtype=np.float32),
        mask=mask,
        spacing=tuple(sidecar["spacing"]),
        hu_flag=bool(sidecar["hu_flag"]),
        meta=sidecar.get("meta", {}),
    )


def save_dataset(samples: Sequence[Sample], root: str | Path, manifest_extra: dict | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_sample(s, root)
    manifest = {"format_version": FORMAT_VERSION, "ids": [s.id for s in samples]}
    if manifest_extra:
        manifest.update(manifest_extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def list_ids(root: str | Path) -> list[str]:
    root = Path(root)
    manifest = root / "manifest.json"
    if manifest.is_file():
        payload = json.loads(manifest.read_text())
        return list(payload["ids"])
    return sorted(p.stem for p in root.glob("*.json") if p.name != "manifest.json")


def load_dataset(root: str | Path, ids: Sequence[str] | None = None) -> list[Sample]:
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"dataset directory not found: {root}")
    wanted = list(ids) if ids is not None else list_ids(root)
    return [load_sample(root, i) for i in wanted]


def crop_payload(payload: np.ndarray, origin: Sequence[int], size: Sequence[int]) -> np.ndarray:
    """Slice a channel-last array with an integer window; bounds are checked."""
    spatial = payload.shape[:-1]
    if len(origin) != len(spatial) or len(size) != len(spatial):
        raise ShapeError(
            f"crop rank {len(origin)} does not match payload rank {len(spatial)}"
        )
    for o, s, dim in zip(origin, size, spatial):
        if o < 0 or s < 1 or o + s > dim:
            raise ShapeError(f"crop [{origin}, {size}) exceeds payload {spatial}")
    index = tuple(slice(o, o + s) for o, s in zip(origin, size)) + (slice(None),)
    return payload[index]
