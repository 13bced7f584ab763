import json
import math

import numpy as np
import pytest
import torch

from pyramidssl import data, trainer
from pyramidssl.checkpoint import load_container
from pyramidssl.config import CropSection, ModelSection, RunConfig, TrainerSection
from pyramidssl.errors import ConfigError, NonFiniteLossError
from pyramidssl.objective import LossBreakdown


def tiny_3d_config(**trainer_kwargs) -> RunConfig:
    defaults = dict(epochs=2, batch_size=2, checkpoint_every=1, lr0=1e-2)
    defaults.update(trainer_kwargs)
    return RunConfig(
        seed=7,
        model=ModelSection(dimensionality="3d", decoder_channels=8, encoder_width_multiplier=0.25),
        crop=CropSection(
            global_size_set=((24, 24, 12),),
            local_size_set=((6, 6, 6),),
            num_local_views=2,
            global_view_size_3d=(16, 16, 8),
            local_view_size_3d=(8, 8, 8),
        ),
        trainer=TrainerSection(**defaults),
    )


@pytest.fixture(scope="module")
def volumes():
    return data.synth_dataset("ct3d-seg", 4, seed=3, shape=(48, 48, 24))


@pytest.fixture(scope="module")
def images():
    return data.synth_dataset("xray2d", 8, seed=11, shape=(96, 96))


# ---------------------------------------------------------------------------
# schedule


def test_cosine_lr_endpoints():
    assert trainer.cosine_lr(0, 100, 0.01) == pytest.approx(0.01)
    assert trainer.cosine_lr(100, 100, 0.01) == pytest.approx(0.0, abs=1e-18)
    assert trainer.cosine_lr(50, 100, 0.01) == pytest.approx(0.005)


def test_cosine_lr_monotone_decreasing():
    values = [trainer.cosine_lr(s, 200, 0.1) for s in range(201)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_cosine_lr_rejects_empty_schedule():
    with pytest.raises(ConfigError):
        trainer.cosine_lr(0, 0, 0.1)


def test_sgd_step_matches_update_rule():
    # first step with fresh momentum: p' = p - lr * (grad + wd * p)
    p = torch.nn.Parameter(torch.tensor([2.0], dtype=torch.float64))
    opt = torch.optim.SGD([p], lr=0.1, momentum=0.9, weight_decay=1e-2)
    loss = (p * 3.0).sum()
    loss.backward()
    before = p.detach().clone()
    opt.step()
    expected = before - 0.1 * (3.0 + 1e-2 * before)
    assert torch.allclose(p.detach(), expected, atol=1e-14)


# ---------------------------------------------------------------------------
# pre-training loop


def test_pretrain_writes_expected_artifacts(tmp_path, volumes):
    path, report = trainer.pretrain(tiny_3d_config(), volumes, tmp_path / "run")
    assert path.is_file()
    lines = (tmp_path / "run" / "losses.csv").read_text().splitlines()
    assert lines[0] == "step,scale,l_restore,l_compare_global,l_compare_local,total"
    # 4 samples, batch 2, 2 epochs -> 4 iterations
    assert len(lines) == 1 + 4
    scales = [int(row.split(",")[1]) for row in lines[1:]]
    assert all(1 <= s <= 5 for s in scales)
    assert len(report.epochs) == 2
    assert json.loads((tmp_path / "run" / "report.json").read_text())["task"] == "pretrain"


def test_pretrain_is_deterministic(tmp_path, volumes):
    trainer.pretrain(tiny_3d_config(), volumes, tmp_path / "a")
    trainer.pretrain(tiny_3d_config(), volumes, tmp_path / "b")
    assert (tmp_path / "a" / "losses.csv").read_bytes() == (
        tmp_path / "b" / "losses.csv"
    ).read_bytes()


def test_pretrain_resume_matches_uninterrupted(tmp_path, volumes):
    trainer.pretrain(tiny_3d_config(), volumes, tmp_path / "full")
    trainer.pretrain(
        tiny_3d_config(),
        volumes,
        tmp_path / "resumed",
        resume=tmp_path / "full" / "checkpoint_ep1.ckpt",
    )
    full = (tmp_path / "full" / "losses.csv").read_text().splitlines()
    resumed = (tmp_path / "resumed" / "losses.csv").read_text().splitlines()
    # epoch 1 = rows 2..3 of the full run; the resumed run re-creates exactly those
    assert resumed[1:] == full[3:]


def test_pretrain_thread_workers_match_inline(tmp_path, volumes, monkeypatch):
    monkeypatch.setenv("PCRL_NUM_WORKERS", "0")
    trainer.pretrain(tiny_3d_config(epochs=1), volumes, tmp_path / "inline")
    monkeypatch.setenv("PCRL_NUM_WORKERS", "2")
    trainer.pretrain(tiny_3d_config(epochs=1), volumes, tmp_path / "threaded")
    assert (tmp_path / "inline" / "losses.csv").read_bytes() == (
        tmp_path / "threaded" / "losses.csv"
    ).read_bytes()


def test_pretrain_rejects_oversized_batch(tmp_path, volumes):
    with pytest.raises(ConfigError):
        trainer.pretrain(tiny_3d_config(batch_size=64), volumes, tmp_path / "run")


def test_pretrain_nonfinite_loss_aborts_with_dump(tmp_path, volumes, monkeypatch):
    def bad_total_loss(views, model, heads, scale, crossed_comparison=False, eps=1e-12):
        loss = (views.x1c.sum() * 0.0) + float("nan")
        breakdown = LossBreakdown(
            l_restore=float("nan"),
            l_compare_global=0.0,
            l_compare_local=0.0,
            total=float("nan"),
            scale_used=scale,
        )
        return loss, breakdown

    monkeypatch.setattr(trainer, "total_loss", bad_total_loss)
    with pytest.raises(NonFiniteLossError):
        trainer.pretrain(tiny_3d_config(epochs=1), volumes, tmp_path / "run")
    dump = json.loads((tmp_path / "run" / "nonfinite_dump.json").read_text())
    assert dump["step"] == 0


def test_pretrain_dumps_crops_and_augment_params(tmp_path, volumes):
    trainer.pretrain(
        tiny_3d_config(epochs=1),
        volumes,
        tmp_path / "run",
        dump_crops=tmp_path / "crops.json",
        dump_augment_params=tmp_path / "aug.json",
    )
    crops = json.loads((tmp_path / "crops.json").read_text())
    assert len(crops) == 4  # 2 iterations x batch 2
    first = crops[0]
    assert set(first) >= {"step", "sample", "global_a", "global_b", "bounding_box", "locals"}
    origin, size = first["global_a"]
    assert len(origin) == 3 and len(size) == 3
    aug = json.loads((tmp_path / "aug.json").read_text())
    assert len(aug) == 4
    assert {"global", "input", "locals"} <= set(aug[0])


def test_pretrain_2d_multicrop_path(tmp_path, images):
    cfg = RunConfig(
        seed=3,
        model=ModelSection(dimensionality="2d", decoder_channels=8, encoder_width_multiplier=0.25),
        crop=CropSection(output_size_2d=32, num_local_views=2),
        trainer=TrainerSection(epochs=1, batch_size=4, checkpoint_every=5, lr0=1e-2),
    )
    path, report = trainer.pretrain(cfg, images, tmp_path / "run2d")
    lines = (tmp_path / "run2d" / "losses.csv").read_text().splitlines()
    assert len(lines) == 1 + 2  # 8 samples, batch 4, 1 epoch
    assert path.is_file()


# ---------------------------------------------------------------------------
# checkpoint wrappers


def test_checkpoint_roundtrip_is_byte_exact(tmp_path, volumes):
    final, _ = trainer.pretrain(tiny_3d_config(), volumes, tmp_path / "run")
    model, heads, cfg, extra, tensors = trainer.load_checkpoint(final)
    assert extra["epoch"] == 2
    snap = trainer.OptimState(
        {k: v for k, v in tensors.items() if k.startswith("optim.momentum.")},
        extra["step"],
        extra["lr"],
    )
    resaved = tmp_path / "resaved.ckpt"
    trainer.save_checkpoint(resaved, model, heads, cfg, snap, extra["epoch"])
    assert resaved.read_bytes() == final.read_bytes()


def test_checkpoint_preserves_bn_running_stats(tmp_path, volumes):
    final, _ = trainer.pretrain(tiny_3d_config(epochs=1), volumes, tmp_path / "run")
    model, _, _, _, _ = trainer.load_checkpoint(final)
    _, _, tensors = load_container(final)
    bn_keys = [k for k in tensors if k.endswith("running_mean") and k.startswith("model.")]
    assert bn_keys, "expected running stats in the checkpoint"
    state = model.state_dict()
    for key in bn_keys:
        assert np.allclose(tensors[key], state[key.removeprefix("model.")].numpy())
    tracked = [k for k in tensors if k.endswith("num_batches_tracked")]
    assert tracked and all(tensors[k].shape == () for k in tracked)


# ---------------------------------------------------------------------------
# fine-tuning


def classify_config(**kwargs) -> RunConfig:
    defaults = dict(
        finetune_epochs=3, finetune_batch_size=4, finetune_lr=1e-2, finetune_input_size=(64, 64)
    )
    defaults.update(kwargs)
    return RunConfig(
        seed=5,
        model=ModelSection(dimensionality="2d", decoder_channels=8, encoder_width_multiplier=0.25),
        trainer=TrainerSection(**defaults),
    )


def segment_config(**kwargs) -> RunConfig:
    defaults = dict(
        finetune_epochs=3,
        finetune_batch_size=2,
        finetune_lr=1e-2,
        finetune_input_size=(32, 32, 16),
    )
    defaults.update(kwargs)
    return RunConfig(
        seed=5,
        model=ModelSection(dimensionality="3d", decoder_channels=8, encoder_width_multiplier=0.25),
        trainer=TrainerSection(**defaults),
    )


def test_finetune_classify_reports_auroc(tmp_path, images):
    path, report = trainer.finetune_classify(classify_config(), images, tmp_path / "cls")
    metrics = json.loads((tmp_path / "cls" / "metrics.json").read_text())
    assert metrics["task"] == "classify"
    assert len(metrics["train"]["per_class_auroc"]) == 3
    assert 0.0 <= metrics["train"]["mean_auroc"] <= 1.0
    assert len(report.epochs) == 3
    evaluated = trainer.evaluate_model(path, images)
    assert evaluated["mean_auroc"] == pytest.approx(metrics["train"]["mean_auroc"])


def test_finetune_segment_reports_dice(tmp_path, volumes):
    path, report = trainer.finetune_segment(segment_config(), volumes, tmp_path / "seg")
    metrics = json.loads((tmp_path / "seg" / "metrics.json").read_text())
    assert metrics["task"] == "segment"
    assert 0.0 <= metrics["train"]["mean_dice"] <= 1.0
    evaluated = trainer.evaluate_model(path, volumes)
    assert evaluated["mean_dice"] == pytest.approx(metrics["train"]["mean_dice"])


def test_finetune_from_pretrained_checkpoint(tmp_path, volumes):
    final, _ = trainer.pretrain(tiny_3d_config(epochs=1), volumes, tmp_path / "pre")
    path, _ = trainer.finetune_segment(
        segment_config(), volumes, tmp_path / "seg", checkpoint_path=final
    )
    assert path.is_file()

    # the transferred encoder starts from the pre-trained weights
    pre_model, _, _, _, _ = trainer.load_checkpoint(final)
    cfg = segment_config(finetune_epochs=0)
    path0, _ = trainer.finetune_segment(
        cfg, volumes, tmp_path / "seg0", checkpoint_path=final
    )
    net, _ = trainer.load_finetuned(path0)
    for (k1, v1), (k2, v2) in zip(
        pre_model.encoder.state_dict().items(), net.unet.encoder.state_dict().items()
    ):
        assert k1 == k2
        assert torch.equal(v1, v2)


def test_frozen_encoder_stays_bit_identical(tmp_path, images):
    cfg = classify_config(freeze_encoder=True)
    before_model, _, _, _, _ = None, None, None, None, None
    final, _ = trainer.pretrain(
        RunConfig(
            seed=3,
            model=ModelSection(
                dimensionality="2d", decoder_channels=8, encoder_width_multiplier=0.25
            ),
            crop=CropSection(output_size_2d=32, num_local_views=2),
            trainer=TrainerSection(epochs=1, batch_size=4, checkpoint_every=5),
        ),
        images,
        tmp_path / "pre2d",
    )
    pre_model, _, _, _, _ = trainer.load_checkpoint(final)
    encoder_before = {k: v.clone() for k, v in pre_model.encoder.state_dict().items()}
    path, _ = trainer.finetune_classify(cfg, images, tmp_path / "cls", checkpoint_path=final)
    net, _ = trainer.load_finetuned(path)
    after = net.encoder.state_dict()
    for key, value in encoder_before.items():
        if key.endswith("num_batches_tracked") or "running_" in key:
            continue  # buffers are not parameters; eval mode freezes them too
        assert torch.equal(value, after[key]), key


def test_frozen_encoder_buffers_also_frozen(tmp_path, images):
    # eval() on the frozen encoder must stop running-stat updates as well
    final, _ = trainer.pretrain(
        RunConfig(
            seed=3,
            model=ModelSection(
                dimensionality="2d", decoder_channels=8, encoder_width_multiplier=0.25
            ),
            crop=CropSection(output_size_2d=32, num_local_views=2),
            trainer=TrainerSection(epochs=1, batch_size=4, checkpoint_every=5),
        ),
        images,
        tmp_path / "pre2d",
    )
    pre_model, _, _, _, _ = trainer.load_checkpoint(final)
    encoder_before = {k: v.clone() for k, v in pre_model.encoder.state_dict().items()}
    path, _ = trainer.finetune_classify(
        classify_config(freeze_encoder=True), images, tmp_path / "cls", checkpoint_path=final
    )
    net, _ = trainer.load_finetuned(path)
    after = net.encoder.state_dict()
    for key, value in encoder_before.items():
        assert torch.equal(value, after[key]), key


def test_finetune_requires_labels(tmp_path, volumes):
    with pytest.raises(ConfigError):
        trainer.finetune_classify(classify_config(), volumes, tmp_path / "cls")


def test_finetune_requires_masks(tmp_path, images):
    with pytest.raises(ConfigError):
        trainer.finetune_segment(segment_config(), images, tmp_path / "seg")


# ---------------------------------------------------------------------------
# dice loss


def test_soft_dice_loss_perfect_prediction_near_zero():
    target = torch.zeros(1, 1, 4, 4)
    target[0, 0, :2] = 1.0
    logits = torch.where(target > 0.5, torch.tensor(40.0), torch.tensor(-40.0))
    assert float(trainer.soft_dice_loss(logits, target)) == pytest.approx(0.0, abs=1e-6)


def test_soft_dice_loss_worst_prediction_near_one():
    target = torch.zeros(1, 1, 4, 4)
    logits = torch.full((1, 1, 4, 4), 40.0)
    assert float(trainer.soft_dice_loss(logits, target)) == pytest.approx(1.0, abs=1e-5)


def test_soft_dice_loss_both_empty_is_zero():
    target = torch.zeros(1, 1, 4, 4)
    logits = torch.full((1, 1, 4, 4), -40.0)
    assert float(trainer.soft_dice_loss(logits, target)) == pytest.approx(0.0, abs=1e-6)


def test_soft_dice_loss_shape_mismatch():
    from pyramidssl.errors import ShapeError

    with pytest.raises(ShapeError):
        trainer.soft_dice_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


def test_evaluate_model_rejects_unlabeled(tmp_path, images):
    import dataclasses

    path, _ = trainer.finetune_classify(classify_config(), images, tmp_path / "cls")
    unlabeled = [dataclasses.replace(s, labels=None) for s in images]
    with pytest.raises(ConfigError):
        trainer.evaluate_model(path, unlabeled)
