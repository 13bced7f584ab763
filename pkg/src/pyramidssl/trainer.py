"""Training harnesses: self-supervised pre-training and supervised fine-tuning.

All randomness is derived statelessly from (seed, purpose, step, ...) seed
sequences, so an interrupted run resumed from a checkpoint replays exactly
the iterations an uninterrupted run would have produced.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import checkpoint as container
from . import geometry, metrics
from .augment import background_reject_predicate, make_view_set_2d, make_view_set_3d
from .config import RunConfig, from_dict as config_from_dict
from .data import Sample, preprocess
from .errors import ConfigError, FormatError, NonFiniteLossError, ShapeError
from .heads import SslHeads, build_heads
from .nsunet import PyramidUNet, build as build_model
from .objective import BatchViews, sample_scale, total_loss

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "scale", "l_restore", "l_compare_global", "l_compare_local", "total")

# purpose tags for stateless rng streams
_SHUFFLE, _VIEWS, _SCALE, _FINETUNE = 1, 2, 3, 4


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key)))


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from lr0 to 0 over total_steps (per iteration)."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    step = min(max(step, 0), total_steps)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def num_workers() -> int:
    try:
        return max(0, int(os.environ.get("PCRL_NUM_WORKERS", "0")))
    except ValueError:
        return 0


@dataclass
class OptimState:
    """Snapshot of the SGD internals that persist across a restart."""

    momentum: dict  # param name -> float32 ndarray
    step: int
    lr: float


@dataclass
class TrainReport:
    task: str
    epochs: list = field(default_factory=list)
    wall_clock_sec: float = 0.0
    checkpoint_path: str | None = None
    final_metrics: dict | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# tensor conversion helpers


def _views_to_tensor(arrays) -> torch.Tensor:
    stacked = np.stack([np.moveaxis(a, -1, 0) for a in arrays])
    return torch.from_numpy(np.ascontiguousarray(stacked, dtype=np.float32))


def _batch_views(view_sets) -> BatchViews:
    locals_tensor = None
    n_locals = len(view_sets[0].locals)
    if n_locals:
        per_local = [
            _views_to_tensor([vs.locals[k] for vs in view_sets]) for k in range(n_locals)
        ]
        locals_tensor = torch.stack(per_local)
    return BatchViews(
        x1=_views_to_tensor([vs.x1 for vs in view_sets]),
        x2=_views_to_tensor([vs.x2 for vs in view_sets]),
        x1c=_views_to_tensor([vs.x1c for vs in view_sets]),
        x2c=_views_to_tensor([vs.x2c for vs in view_sets]),
        locals=locals_tensor,
    )


def _resize_payload(payload: np.ndarray, target) -> np.ndarray:
    from .augment import resize_spatial

    return resize_spatial(payload, target)


def _resize_mask(mask: np.ndarray, target) -> np.ndarray:
    # nearest-neighbor keeps masks binary
    spatial = mask.shape[:-1]
    target = tuple(int(t) for t in target)
    if spatial == target:
        return mask.astype(np.float32)
    t = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))
    t = t.permute(-1, *range(len(spatial))).unsqueeze(0)
    out = torch.nn.functional.interpolate(t, size=target, mode="nearest")
    out = out.squeeze(0).permute(*range(1, len(spatial) + 1), 0)
    return out.contiguous().numpy()


# ---------------------------------------------------------------------------
# checkpoint plumbing


def _module_tensors(module: nn.Module, prefix: str) -> dict:
    return {
        prefix + key: value.detach().cpu().numpy()
        for key, value in module.state_dict().items()
    }


def _load_module(module: nn.Module, tensors: dict, prefix: str) -> None:
    state = module.state_dict()
    new_state = {}
    for key, template in state.items():
        full = prefix + key
        if full not in tensors:
            raise FormatError(f"checkpoint is missing tensor {full!r}")
        arr = np.asarray(tensors[full])
        if tuple(arr.shape) != tuple(template.shape):
            raise FormatError(
                f"checkpoint tensor {full!r} has shape {arr.shape}, expected {tuple(template.shape)}"
            )
        new_state[key] = torch.from_numpy(arr.copy()).to(template.dtype)
    module.load_state_dict(new_state)


def _named_params(model: nn.Module, heads: nn.Module | None):
    named = [("model." + k, p) for k, p in model.named_parameters()]
    if heads is not None:
        named += [("heads." + k, p) for k, p in heads.named_parameters()]
    return named


def _optimizer_momentum(optimizer, named) -> dict:
    out = {}
    for name, param in named:
        state = optimizer.state.get(param)
        if state and "momentum_buffer" in state and state["momentum_buffer"] is not None:
            out["optim.momentum." + name] = state["momentum_buffer"].detach().cpu().numpy()
    return out


def _restore_momentum(optimizer, named, tensors) -> None:
    for name, param in named:
        key = "optim.momentum." + name
        if key in tensors:
            buf = torch.from_numpy(np.asarray(tensors[key]).copy()).to(param.dtype)
            optimizer.state[param] = {"momentum_buffer": buf}


def save_checkpoint(
    path: str | Path,
    model: PyramidUNet,
    heads: SslHeads | None,
    config: RunConfig,
    optim_state: OptimState | None = None,
    epoch: int = 0,
) -> None:
    tensors = _module_tensors(model, "model.")
    if heads is not None:
        tensors.update(_module_tensors(heads, "heads."))
    if optim_state is not None:
        tensors.update(optim_state.momentum)
    extra = {
        "kind": "pretrain",
        "epoch": int(epoch),
        "step": 0 if optim_state is None else int(optim_state.step),
        "lr": 0.0 if optim_state is None else float(optim_state.lr),
    }
    container.save_container(path, tensors, config=config.to_dict(), extra=extra)


def load_checkpoint(path: str | Path):
    """Rebuild (model, heads, config, extra, tensors) from a pre-train container."""
    config_dict, extra, tensors = container.load_container(path)
    cfg = config_from_dict(config_dict)
    model = build_model(cfg.model, seed=cfg.seed)
    heads = build_heads(cfg.model, seed=cfg.seed + 1)
    _load_module(model, tensors, "model.")
    _load_module(heads, tensors, "heads.")
    return model, heads, cfg, extra, tensors


# ---------------------------------------------------------------------------
# view pipeline


def _build_views_for_sample(sample: Sample, cfg: RunConfig, rng: np.random.Generator):
    """One sample -> (ViewSet, crop record) using the modality's crop recipe."""
    if cfg.model.dimensionality == "3d":
        reject = background_reject_predicate(sample, cfg.data)
        crops = geometry.sample_subcrop(
            sample.spatial_shape,
            rng,
            global_size_set=cfg.crop.global_size_set,
            local_size_set=cfg.crop.local_size_set,
            iou_min=cfg.crop.iou_min,
            num_local_views=cfg.crop.num_local_views,
            max_attempts=cfg.crop.max_attempts,
            reject=reject,
        )
        views = make_view_set_3d(sample, crops, cfg.crop, cfg.augment, rng)
        record = {
            "global_a": crops.global_a.as_lists(),
            "global_b": crops.global_b.as_lists(),
            "bounding_box": crops.bounding_box.as_lists(),
            "locals": [b.as_lists() for b in crops.locals],
        }
    else:
        global_specs, local_specs = geometry.multicrop_2d(
            sample.spatial_shape,
            rng,
            num_local=cfg.crop.num_local_views,
            global_scale_range=cfg.crop.global_scale_range_2d,
            local_scale_range=cfg.crop.local_scale_range_2d,
            ratio_range=cfg.crop.aspect_ratio_range_2d,
            output_size=cfg.crop.output_size_2d,
        )
        views = make_view_set_2d(
            sample, (global_specs, local_specs), cfg.crop, cfg.augment, rng
        )
        record = {
            "globals": [[list(s.origin), list(s.size)] for s in global_specs],
            "locals": [[list(s.origin), list(s.size)] for s in local_specs],
        }
    return views, record


def _augment_record(views) -> dict:
    meta = views.meta
    return {
        "global": [p.to_dict() for p in meta["global_params"]],
        "input": [p.to_dict() for p in meta["input_params"]],
        "locals": [p.to_dict() for p in meta["local_params"]],
    }


def _dump_nonfinite(out_dir: Path, payload: dict) -> Path:
    path = out_dir / "nonfinite_dump.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
    return path


# ---------------------------------------------------------------------------
# pre-training


def pretrain(
    cfg: RunConfig,
    samples: list,
    out_dir: str | Path,
    resume: str | Path | None = None,
    dump_crops: str | Path | None = None,
    dump_augment_params: str | Path | None = None,
) -> tuple[Path, TrainReport]:
    """Self-supervised pre-training loop; writes losses.csv, checkpoints, report."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not samples:
        raise ConfigError("pre-training needs at least one sample")
    samples = [preprocess(s, *cfg.data.hu_window) for s in samples]

    batch_size = cfg.trainer.batch_size
    iters_per_epoch = len(samples) // batch_size
    if iters_per_epoch == 0:
        raise ConfigError(
            f"batch_size {batch_size} exceeds dataset size {len(samples)}; no full batch"
        )
    total_steps = max(1, cfg.trainer.epochs * iters_per_epoch)

    start_epoch = 0
    step = 0
    if resume is not None:
        model, heads, saved_cfg, extra, tensors = load_checkpoint(resume)
        if saved_cfg.model != cfg.model:
            raise ConfigError("resume checkpoint was trained with a different model config")
        start_epoch = int(extra.get("epoch", 0))
        step = int(extra.get("step", 0))
    else:
        model = build_model(cfg.model, seed=cfg.seed)
        heads = build_heads(cfg.model, seed=cfg.seed + 1)
        tensors = {}

    model.train()
    heads.train()
    params = list(model.parameters()) + list(heads.parameters())
    optimizer = torch.optim.SGD(
        params,
        lr=cfg.trainer.lr0,
        momentum=cfg.trainer.momentum,
        weight_decay=cfg.trainer.weight_decay,
    )
    if resume is not None:
        _restore_momentum(optimizer, _named_params(model, heads), tensors)

    workers = num_workers()
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 0 else None
    crop_log: list = []
    augment_log: list = []
    losses_path = out_dir / "losses.csv"
    csv_mode = "a" if resume is not None and losses_path.exists() else "w"
    report = TrainReport(task="pretrain")
    started = time.monotonic()
    lr = cfg.trainer.lr0

    try:
        with open(losses_path, csv_mode) as csv_file:
            if csv_mode == "w":
                csv_file.write(",".join(LOSS_COLUMNS) + "\n")
            for epoch in range(start_epoch, cfg.trainer.epochs):
                order = _stream(cfg.seed, _SHUFFLE, epoch).permutation(len(samples))
                epoch_sums = np.zeros(4)
                epoch_iters = 0
                for it in range(iters_per_epoch):
                    indices = order[it * batch_size : (it + 1) * batch_size]

                    def build_one(idx: int):
                        rng = _stream(cfg.seed, _VIEWS, step, int(idx))
                        return _build_views_for_sample(samples[int(idx)], cfg, rng)

                    if pool is not None:
                        built = list(pool.map(build_one, indices))
                    else:
                        built = [build_one(i) for i in indices]
                    view_sets = [b[0] for b in built]
                    if dump_crops is not None:
                        for idx, (_, record) in zip(indices, built):
                            crop_log.append(
                                {"step": step, "sample": samples[int(idx)].id, **record}
                            )
                    if dump_augment_params is not None:
                        for idx, (views, _) in zip(indices, built):
                            augment_log.append(
                                {
                                    "step": step,
                                    "sample": samples[int(idx)].id,
                                    **_augment_record(views),
                                }
                            )
                    batch = _batch_views(view_sets)
                    scale = sample_scale(_stream(cfg.seed, _SCALE, step))
                    lr = cosine_lr(step, total_steps, cfg.trainer.lr0)
                    for group in optimizer.param_groups:
                        group["lr"] = lr
                    optimizer.zero_grad()
                    loss, breakdown = total_loss(
                        batch,
                        model,
                        heads,
                        scale,
                        crossed_comparison=cfg.objective.crossed_comparison,
                        eps=cfg.objective.degenerate_norm_eps,
                    )
                    if not math.isfinite(breakdown.total):
                        dump = _dump_nonfinite(
                            out_dir,
                            {
                                "step": step,
                                "epoch": epoch,
                                "lr": lr,
                                "breakdown": dataclasses.asdict(breakdown),
                            },
                        )
                        raise NonFiniteLossError(
                            f"non-finite loss at step {step}; diagnostics in {dump}"
                        )
                    loss.backward()
                    optimizer.step()
                    csv_file.write(
                        f"{step},{scale},{breakdown.l_restore!r},"
                        f"{breakdown.l_compare_global!r},{breakdown.l_compare_local!r},"
                        f"{breakdown.total!r}\n"
                    )
                    csv_file.flush()
                    epoch_sums += (
                        breakdown.l_restore,
                        breakdown.l_compare_global,
                        breakdown.l_compare_local,
                        breakdown.total,
                    )
                    epoch_iters += 1
                    step += 1
                means = epoch_sums / max(1, epoch_iters)
                report.epochs.append(
                    {
                        "epoch": epoch,
                        "mean_restore": means[0],
                        "mean_compare_global": means[1],
                        "mean_compare_local": means[2],
                        "mean_total": means[3],
                        "lr": lr,
                    }
                )
                log.info(
                    "epoch %d: total %.4f (restore %.4f, compare %.4f/%.4f)",
                    epoch,
                    means[3],
                    means[0],
                    means[1],
                    means[2],
                )
                done = epoch + 1
                if done % cfg.trainer.checkpoint_every == 0 and done < cfg.trainer.epochs:
                    snap = OptimState(
                        _optimizer_momentum(optimizer, _named_params(model, heads)), step, lr
                    )
                    save_checkpoint(
                        out_dir / f"checkpoint_ep{done}.ckpt", model, heads, cfg, snap, done
                    )
    finally:
        if pool is not None:
            pool.shutdown()

    final = out_dir / "checkpoint.ckpt"
    snap = OptimState(_optimizer_momentum(optimizer, _named_params(model, heads)), step, lr)
    save_checkpoint(final, model, heads, cfg, snap, cfg.trainer.epochs)
    if dump_crops is not None:
        Path(dump_crops).write_text(json.dumps(crop_log, indent=2))
    if dump_augment_params is not None:
        Path(dump_augment_params).write_text(json.dumps(augment_log, indent=2))
    report.wall_clock_sec = time.monotonic() - started
    report.checkpoint_path = str(final)
    report.save(out_dir / "report.json")
    return final, report


# ---------------------------------------------------------------------------
# fine-tuning


class ClassificationModel(nn.Module):
    """Transferred encoder + global average pooling + one affine map."""

    def __init__(self, encoder, bottleneck_channels: int, num_classes: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(bottleneck_channels, num_classes)

    def forward(self, x):
        f0 = self.encoder(x).bottleneck
        pooled = f0.mean(dim=tuple(range(2, f0.ndim)))
        return self.head(pooled)


class SegmentationModel(nn.Module):
    """Transferred encoder + freshly initialized decoder + 1x1 mask head."""

    def __init__(self, unet: PyramidUNet, num_classes: int):
        super().__init__()
        self.unet = unet
        conv = nn.Conv2d if unet.dim == 2 else nn.Conv3d
        self.head = conv(unet.config.decoder_channels, num_classes, kernel_size=1)

    def forward(self, x):
        pyramid = self.unet.forward_pyramid(x)
        return self.head(pyramid.levels[-1])


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """1 - smoothed soft-Dice, averaged over batch and classes."""
    if logits.shape != target.shape:
        raise ShapeError(f"logits/target shape mismatch: {logits.shape} vs {target.shape}")
    probs = torch.sigmoid(logits)
    dims = tuple(range(2, logits.ndim))
    inter = (probs * target).sum(dim=dims)
    denom = probs.sum(dim=dims) + target.sum(dim=dims)
    dice = (2.0 * inter + eps) / (denom + eps)
    return 1.0 - dice.mean()


def _resolve_input_size(cfg: RunConfig):
    if cfg.trainer.finetune_input_size is not None:
        return tuple(cfg.trainer.finetune_input_size)
    if cfg.model.dimensionality == "2d":
        return (cfg.crop.output_size_2d, cfg.crop.output_size_2d)
    return (48, 48, 24)


def _encoder_from_checkpoint(checkpoint_path, cfg: RunConfig):
    model, _, saved_cfg, _, _ = load_checkpoint(checkpoint_path)
    return model, saved_cfg


def _stack_inputs(samples, size):
    arrays = [_resize_payload(s.payload, size) for s in samples]
    return _views_to_tensor(arrays)


def _finetune_epoch_batches(n, batch_size, epoch, seed):
    order = _stream(seed, _FINETUNE, epoch).permutation(n)
    bs = min(batch_size, n)
    return [order[i : i + bs] for i in range(0, n - bs + 1, bs)]


def _classification_scores(net, inputs, batch_size=8):
    net.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, inputs.shape[0], batch_size):
            outs.append(torch.sigmoid(net(inputs[i : i + batch_size])))
    net.train()
    return torch.cat(outs).numpy()


def _classify_metrics(net, inputs, labels) -> dict:
    scores = _classification_scores(net, inputs)
    mean, per_class = metrics.mean_auroc(scores, labels)
    return {"mean_auroc": mean, "per_class_auroc": per_class}


def _segment_metrics(net, inputs, masks) -> dict:
    net.eval()
    with torch.no_grad():
        preds = []
        for i in range(inputs.shape[0]):
            preds.append(torch.sigmoid(net(inputs[i : i + 1])) > 0.5)
        preds = torch.cat(preds).numpy()
    net.train()
    n_classes = preds.shape[1]
    per_class = []
    for c in range(n_classes):
        values = [
            metrics.dice(preds[i, c], masks[i, c] > 0.5) for i in range(preds.shape[0])
        ]
        per_class.append(float(np.mean(values)))
    return {"mean_dice": float(np.mean(per_class)), "per_class_dice": per_class}


def _finetune_common(
    cfg: RunConfig,
    net: nn.Module,
    trainable,
    loss_fn,
    inputs: torch.Tensor,
    targets: torch.Tensor,
    out_dir: Path,
):
    epochs = cfg.trainer.finetune_epochs
    n = inputs.shape[0]
    batches_per_epoch = max(1, len(_finetune_epoch_batches(n, cfg.trainer.finetune_batch_size, 0, cfg.seed)))
    total_steps = max(1, epochs * batches_per_epoch)
    optimizer = torch.optim.SGD(
        trainable,
        lr=cfg.trainer.finetune_lr,
        momentum=cfg.trainer.momentum,
        weight_decay=cfg.trainer.weight_decay,
    )
    report = TrainReport(task="finetune")
    step = 0
    for epoch in range(epochs):
        epoch_loss = 0.0
        count = 0
        for batch_idx in _finetune_epoch_batches(n, cfg.trainer.finetune_batch_size, epoch, cfg.seed):
            idx = torch.as_tensor(batch_idx.copy(), dtype=torch.long)
            lr = cosine_lr(step, total_steps, cfg.trainer.finetune_lr)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            loss = loss_fn(net(inputs[idx]), targets[idx])
            if not torch.isfinite(loss):
                dump = _dump_nonfinite(out_dir, {"step": step, "epoch": epoch, "lr": lr})
                raise NonFiniteLossError(
                    f"non-finite fine-tune loss at step {step}; diagnostics in {dump}"
                )
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            count += 1
            step += 1
        report.epochs.append({"epoch": epoch, "mean_loss": epoch_loss / max(1, count)})
    return report


def _save_finetuned(path, net, task, cfg: RunConfig, model_cfg, input_size, num_classes):
    config = {
        "task": task,
        "run_config": cfg.to_dict(),
        "model": dataclasses.asdict(model_cfg),
        "input_size": list(input_size),
        "num_classes": int(num_classes),
    }
    container.save_container(
        path, _module_tensors(net, "net."), config=config, extra={"kind": "finetune"}
    )


def finetune_classify(
    cfg: RunConfig,
    train_samples: list,
    out_dir: str | Path,
    checkpoint_path: str | Path | None = None,
    val_samples: list | None = None,
) -> tuple[Path, TrainReport]:
    """Train a classifier on the transferred encoder; writes model + metrics.json."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not train_samples:
        raise ConfigError("fine-tuning needs at least one labeled sample")
    train_samples = [preprocess(s, *cfg.data.hu_window) for s in train_samples]
    val_samples = [preprocess(s, *cfg.data.hu_window) for s in (val_samples or [])]
    if any(s.labels is None for s in train_samples + val_samples):
        raise ConfigError("classification fine-tuning needs label vectors")

    if checkpoint_path is not None:
        source_model, model_cfg_holder = _encoder_from_checkpoint(checkpoint_path, cfg)
        model_cfg = model_cfg_holder.model
    else:
        source_model = build_model(cfg.model, seed=cfg.seed)
        model_cfg = cfg.model
    num_classes = len(train_samples[0].labels)
    net = ClassificationModel(source_model.encoder, source_model.bottleneck_channels, num_classes)
    net.train()
    if cfg.trainer.freeze_encoder:
        for p in net.encoder.parameters():
            p.requires_grad_(False)
        net.encoder.eval()
        trainable = list(net.head.parameters())
    else:
        trainable = list(net.parameters())

    size = _resolve_input_size(cfg)
    inputs = _stack_inputs(train_samples, size)
    labels = torch.from_numpy(np.stack([s.labels for s in train_samples]))
    started = time.monotonic()
    report = _finetune_common(
        cfg, net, trainable, nn.BCEWithLogitsLoss(), inputs, labels, out_dir
    )
    report.task = "finetune-classify"
    result = {"task": "classify", "train": _classify_metrics(net, inputs, labels.numpy())}
    if val_samples:
        v_inputs = _stack_inputs(val_samples, size)
        v_labels = np.stack([s.labels for s in val_samples])
        result["val"] = _classify_metrics(net, v_inputs, v_labels)
    (out_dir / "metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    model_path = out_dir / "model.ckpt"
    _save_finetuned(model_path, net, "classify", cfg, model_cfg, size, num_classes)
    report.wall_clock_sec = time.monotonic() - started
    report.checkpoint_path = str(model_path)
    report.final_metrics = result
    report.save(out_dir / "report.json")
    return model_path, report


def finetune_segment(
    cfg: RunConfig,
    train_samples: list,
    out_dir: str | Path,
    checkpoint_path: str | Path | None = None,
    val_samples: list | None = None,
) -> tuple[Path, TrainReport]:
    """Train a segmenter: transferred encoder, fresh decoder, 1x1 mask head."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not train_samples:
        raise ConfigError("fine-tuning needs at least one labeled sample")
    train_samples = [preprocess(s, *cfg.data.hu_window) for s in train_samples]
    val_samples = [preprocess(s, *cfg.data.hu_window) for s in (val_samples or [])]
    if any(s.mask is None for s in train_samples + val_samples):
        raise ConfigError("segmentation fine-tuning needs masks")

    if checkpoint_path is not None:
        pretrained, saved_cfg = _encoder_from_checkpoint(checkpoint_path, cfg)
        model_cfg = dataclasses.replace(saved_cfg.model, use_skip_connections=cfg.model.use_skip_connections)
        unet = build_model(model_cfg, seed=cfg.seed + 2)  # fresh decoder init
        unet.encoder.load_state_dict(pretrained.encoder.state_dict())
    else:
        model_cfg = cfg.model
        unet = build_model(model_cfg, seed=cfg.seed + 2)
    num_classes = train_samples[0].mask.shape[-1]
    net = SegmentationModel(unet, num_classes)
    net.train()
    if cfg.trainer.freeze_encoder:
        for p in net.unet.encoder.parameters():
            p.requires_grad_(False)
        net.unet.encoder.eval()
        trainable = [p for p in net.parameters() if p.requires_grad]
    else:
        trainable = list(net.parameters())

    size = _resolve_input_size(cfg)
    inputs = _stack_inputs(train_samples, size)
    masks = torch.from_numpy(
        np.stack([np.moveaxis(_resize_mask(s.mask, size), -1, 0) for s in train_samples])
    )
    started = time.monotonic()
    loss_fn = lambda logits, target: soft_dice_loss(logits, target, cfg.trainer.dice_smooth)
    report = _finetune_common(cfg, net, trainable, loss_fn, inputs, masks, out_dir)
    report.task = "finetune-segment"
    result = {"task": "segment", "train": _segment_metrics(net, inputs, masks.numpy())}
    if val_samples:
        v_inputs = _stack_inputs(val_samples, size)
        v_masks = np.stack([np.moveaxis(_resize_mask(s.mask, size), -1, 0) for s in val_samples])
        result["val"] = _segment_metrics(net, v_inputs, v_masks)
    (out_dir / "metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    model_path = out_dir / "model.ckpt"
    _save_finetuned(model_path, net, "segment", cfg, model_cfg, size, num_classes)
    report.wall_clock_sec = time.monotonic() - started
    report.checkpoint_path = str(model_path)
    report.final_metrics = result
    report.save(out_dir / "report.json")
    return model_path, report


# ---------------------------------------------------------------------------
# evaluation


def load_finetuned(path: str | Path):
    """Rebuild a fine-tuned model from its container."""
    config, extra, tensors = container.load_container(path)
    if extra.get("kind") != "finetune" or "task" not in config:
        raise FormatError(f"{path} is not a fine-tuned model container")
    from .config import ModelSection

    model_cfg = ModelSection(**config["model"])
    num_classes = int(config["num_classes"])
    if config["task"] == "classify":
        skeleton = PyramidUNet(model_cfg)
        net = ClassificationModel(skeleton.encoder, skeleton.bottleneck_channels, num_classes)
    else:
        net = SegmentationModel(PyramidUNet(model_cfg), num_classes)
    _load_module(net, tensors, "net.")
    return net, config


def evaluate_model(model_path: str | Path, samples: list, hu_window=None) -> dict:
    """Recompute a fine-tuned model's metrics on the given samples."""
    net, config = load_finetuned(model_path)
    window = hu_window or tuple(config["run_config"]["data"]["hu_window"])
    samples = [preprocess(s, *window) for s in samples]
    if not samples:
        raise ConfigError("evaluation needs at least one sample")
    size = tuple(config["input_size"])
    inputs = _stack_inputs(samples, size)
    if config["task"] == "classify":
        if any(s.labels is None for s in samples):
            raise ConfigError("classification evaluation needs label vectors")
        labels = np.stack([s.labels for s in samples])
        result = _classify_metrics(net, inputs, labels)
    else:
        if any(s.mask is None for s in samples):
            raise ConfigError("segmentation evaluation needs masks")
        masks = np.stack([np.moveaxis(_resize_mask(s.mask, size), -1, 0) for s in samples])
        result = _segment_metrics(net, inputs, masks)
    return {"task": config["task"], **result}
