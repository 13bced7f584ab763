#!/usr/bin/env python3
"""End-to-end desk-scale experiment: synth data -> split -> pretrain -> finetune -> eval.

Runs in a few minutes on a laptop CPU and leaves every artifact (datasets,
split plan, checkpoints, losses.csv, curves.svg, metrics) under --workdir.
"""

import argparse
import json
import sys
from pathlib import Path

from pyramidssl import cli


def sh(*argv) -> None:
    printable = " ".join(str(a) for a in argv)
    print(f"\n$ pyramidssl {printable}", flush=True)
    code = cli.main([str(a) for a in argv])
    if code != 0:
        sys.exit(code)


TINY_3D = (
    "--set", "model.decoder_channels=16",
    "--set", "model.encoder_width_multiplier=0.5",
    "--set", 'crop.global_size_set=[[48,48,24],[32,32,16]]',
    "--set", 'crop.local_size_set=[[8,8,8],[12,12,8]]',
    "--set", "crop.num_local_views=6",
    "--set", 'crop.global_view_size_3d=[32,32,16]',
    "--set", 'crop.local_view_size_3d=[8,8,8]',
)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="desk_run")
    parser.add_argument("--n", type=int, default=12, help="synthetic volumes to generate")
    parser.add_argument("--epochs", type=int, default=8, help="pre-training epochs")
    parser.add_argument("--finetune-epochs", type=int, default=30)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    work = Path(args.workdir)
    dataset = work / "data"
    split = work / "split.json"
    pre = work / "pretrain"
    fine = work / "finetune"

    sh("synth", "--kind", "mri3d-seg", "--n", args.n, "--seed", args.seed, "--out", dataset)
    sh("split", "--data", dataset, "--ratio", "0.5", "--seed", args.seed, "--out", split)
    sh(
        "pretrain", "--data", dataset, "--split", split, "--out", pre,
        "--seed", args.seed, *TINY_3D,
        "--set", f"trainer.epochs={args.epochs}",
        "--set", "trainer.batch_size=2",
        "--set", "trainer.checkpoint_every=4",
    )
    sh("curves", "--in", pre / "losses.csv", "--out", pre / "curves.svg")
    sh(
        "finetune", "--task", "segment", "--checkpoint", pre / "checkpoint.ckpt",
        "--data", dataset, "--split", split, "--out", fine,
        "--seed", args.seed, *TINY_3D,
        "--set", f"trainer.finetune_epochs={args.finetune_epochs}",
        "--set", "trainer.finetune_batch_size=2",
        "--set", 'trainer.finetune_input_size=[32,32,16]',
    )
    sh(
        "eval", "--model", fine / "model.ckpt", "--data", dataset,
        "--split", split, "--subset", "test", "--out", work / "eval",
    )

    metrics = json.loads((work / "eval" / "metrics.json").read_text())
    print("\npipeline complete; test-split metrics:")
    print(json.dumps(metrics, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
