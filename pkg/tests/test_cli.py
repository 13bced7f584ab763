import json
import re

import pytest

from pyramidssl import cli, data
from pyramidssl.errors import FormatError


def run_cli(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset_3d(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds3d")
    assert run_cli("synth", "--kind", "ct3d-seg", "--n", "6", "--seed", "3", "--out", root) == 0
    return root


@pytest.fixture(scope="module")
def dataset_2d(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds2d")
    assert run_cli("synth", "--kind", "xray2d", "--n", "10", "--seed", "4", "--out", root) == 0
    return root


TINY_3D_OVERRIDES = (
    "--set", "model.decoder_channels=8",
    "--set", "model.encoder_width_multiplier=0.25",
    "--set", 'crop.global_size_set=[[24,24,12]]',
    "--set", 'crop.local_size_set=[[6,6,6]]',
    "--set", "crop.num_local_views=2",
    "--set", 'crop.global_view_size_3d=[16,16,8]',
    "--set", 'crop.local_view_size_3d=[8,8,8]',
    "--set", "trainer.epochs=1",
    "--set", "trainer.batch_size=2",
)


# ---------------------------------------------------------------------------
# synth / split


def test_synth_writes_container(dataset_3d):
    manifest = json.loads((dataset_3d / "manifest.json").read_text())
    assert len(manifest["ids"]) == 6
    assert manifest["kind"] == "ct3d-seg"
    assert (dataset_3d / f"{manifest['ids'][0]}.bin").is_file()


def test_synth_zero_samples(tmp_path):
    assert run_cli("synth", "--kind", "xray2d", "--n", "0", "--out", tmp_path / "empty") == 0
    manifest = json.loads((tmp_path / "empty" / "manifest.json").read_text())
    assert manifest["ids"] == []


def test_synth_rerun_identical_bytes(tmp_path):
    for d in ("a", "b"):
        assert run_cli("synth", "--kind", "xray2d", "--n", "3", "--seed", "9",
                       "--out", tmp_path / d) == 0
    ids = json.loads((tmp_path / "a" / "manifest.json").read_text())["ids"]
    for sid in ids:
        assert (tmp_path / "a" / f"{sid}.bin").read_bytes() == (
            tmp_path / "b" / f"{sid}.bin"
        ).read_bytes()


def test_split_writes_plan(dataset_3d, tmp_path):
    out = tmp_path / "split.json"
    assert run_cli("split", "--data", dataset_3d, "--ratio", "0.5", "--seed", "0",
                   "--out", out) == 0
    plan = data.SplitPlan.load(out)
    assert set(plan.pretrain_ids) | set(plan.finetune_ids) == set(plan.train_ids)
    assert not set(plan.pretrain_ids) & set(plan.finetune_ids)


def test_split_bad_ratio_exits_2(dataset_3d, tmp_path):
    assert run_cli("split", "--data", dataset_3d, "--ratio", "0", "--out",
                   tmp_path / "s.json") == 2


def test_split_missing_data_exits_2(tmp_path):
    assert run_cli("split", "--data", tmp_path / "nope", "--ratio", "0.5", "--out",
                   tmp_path / "s.json") == 2


# ---------------------------------------------------------------------------
# pretrain


def test_pretrain_dry_run_validates_and_skips_training(dataset_3d, tmp_path, capsys):
    out = tmp_path / "run"
    code = run_cli("pretrain", "--data", dataset_3d, "--out", out, "--dry-run",
                   *TINY_3D_OVERRIDES)
    assert code == 0
    assert "dry run" in capsys.readouterr().out
    assert not (out / "losses.csv").exists()


def test_pretrain_missing_data_exits_2(tmp_path):
    assert run_cli("pretrain", "--data", tmp_path / "absent", "--out", tmp_path / "o") == 2


def test_pretrain_bad_override_exits_2(dataset_3d, tmp_path):
    assert run_cli("pretrain", "--data", dataset_3d, "--out", tmp_path / "o",
                   "--set", "trainer.nonsense=1") == 2


def test_pretrain_writes_artifacts_and_resolved_config(dataset_3d, tmp_path):
    out = tmp_path / "run"
    code = run_cli("pretrain", "--data", dataset_3d, "--out", out, "--seed", "11",
                   "--dump-crops", "--dump-augment-params", *TINY_3D_OVERRIDES)
    assert code == 0
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["seed"] == 11
    assert resolved["trainer"]["epochs"] == 1
    assert (out / "checkpoint.ckpt").is_file()
    assert (out / "losses.csv").is_file()
    assert json.loads((out / "crops.json").read_text())
    assert json.loads((out / "augment_params.json").read_text())


def test_pretrain_respects_split_subset(dataset_3d, tmp_path):
    split = tmp_path / "split.json"
    run_cli("split", "--data", dataset_3d, "--ratio", "0.5", "--seed", "0", "--out", split)
    plan = data.SplitPlan.load(split)
    out = tmp_path / "run"
    code = run_cli("pretrain", "--data", dataset_3d, "--split", split, "--out", out,
                   *TINY_3D_OVERRIDES)
    assert code == 0
    lines = (out / "losses.csv").read_text().splitlines()
    # 6 ids -> train 4 -> pretrain 2 at ratio 0.5 -> one batch of 2 per epoch
    assert len(plan.pretrain_ids) == 2
    assert len(lines) == 1 + 1


# ---------------------------------------------------------------------------
# finetune / eval


def test_finetune_scratch_classify_and_eval(dataset_2d, tmp_path):
    out = tmp_path / "cls"
    code = run_cli(
        "finetune", "--task", "classify", "--scratch", "--data", dataset_2d, "--out", out,
        "--set", "model.dimensionality=2d",
        "--set", "model.decoder_channels=8",
        "--set", "model.encoder_width_multiplier=0.25",
        "--set", "trainer.finetune_epochs=2",
        "--set", "trainer.finetune_batch_size=4",
        "--set", 'trainer.finetune_input_size=[64,64]',
    )
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["task"] == "classify"
    assert "mean_auroc" in metrics["train"]
    assert len(metrics["train"]["per_class_auroc"]) == 3

    eval_out = tmp_path / "eval"
    code = run_cli("eval", "--model", out / "model.ckpt", "--data", dataset_2d,
                   "--out", eval_out)
    assert code == 0
    evaluated = json.loads((eval_out / "metrics.json").read_text())
    assert evaluated["mean_auroc"] == pytest.approx(metrics["train"]["mean_auroc"])


def test_finetune_segment_from_checkpoint(dataset_3d, tmp_path):
    pre = tmp_path / "pre"
    assert run_cli("pretrain", "--data", dataset_3d, "--out", pre, *TINY_3D_OVERRIDES) == 0
    out = tmp_path / "seg"
    code = run_cli(
        "finetune", "--task", "segment", "--checkpoint", pre / "checkpoint.ckpt",
        "--data", dataset_3d, "--out", out,
        "--set", "model.decoder_channels=8",
        "--set", "model.encoder_width_multiplier=0.25",
        "--set", "trainer.finetune_epochs=1",
        "--set", "trainer.finetune_batch_size=2",
        "--set", 'trainer.finetune_input_size=[32,32,16]',
    )
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["task"] == "segment"
    assert "per_class_dice" in metrics["train"]


def test_finetune_without_checkpoint_or_scratch_exits_2(dataset_2d, tmp_path):
    assert run_cli("finetune", "--task", "classify", "--data", dataset_2d,
                   "--out", tmp_path / "o") == 2


def test_eval_missing_model_exits_2(dataset_2d, tmp_path):
    assert run_cli("eval", "--model", tmp_path / "no.ckpt", "--data", dataset_2d,
                   "--out", tmp_path / "o") == 2


# ---------------------------------------------------------------------------
# curves


def _losses_csv(tmp_path, rows):
    path = tmp_path / "losses.csv"
    header = "step,scale,l_restore,l_compare_global,l_compare_local,total"
    path.write_text("\n".join([header] + rows) + "\n")
    return path


def test_curves_two_rows_two_points_per_series(tmp_path):
    csv = _losses_csv(tmp_path, ["0,1,1.0,-0.2,-0.1,0.7", "1,2,0.8,-0.4,-0.2,0.2"])
    svg = tmp_path / "curves.svg"
    assert run_cli("curves", "--in", csv, "--out", svg) == 0
    text = svg.read_text()
    assert text.startswith("<svg")
    for name, _ in cli.CURVE_SERIES:
        match = re.search(rf'class="series-{name}"[^>]*points="([^"]+)"', text)
        assert match, name
        assert len(match.group(1).split()) == 2


def test_curves_empty_csv_is_format_error(tmp_path):
    csv = _losses_csv(tmp_path, [])
    assert run_cli("curves", "--in", csv, "--out", tmp_path / "c.svg") == 1
    with pytest.raises(FormatError):
        cli.render_curves(csv, tmp_path / "c.svg")


def test_curves_malformed_row_is_format_error(tmp_path):
    csv = _losses_csv(tmp_path, ["0,1,bogus,-0.2,-0.1,0.7"])
    assert run_cli("curves", "--in", csv, "--out", tmp_path / "c.svg") == 1


def test_curves_comparison_series_sums_both_terms(tmp_path):
    csv = _losses_csv(tmp_path, ["0,1,1.0,-0.25,-0.5,0.25"])
    parsed = cli._read_losses(csv)
    assert parsed["comparison"] == [pytest.approx(-0.75)]


def test_missing_subcommand_exits_2():
    with pytest.raises(SystemExit) as excinfo:
        cli.main([])
    assert excinfo.value.code == 2
