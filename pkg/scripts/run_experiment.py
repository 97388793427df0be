#!/usr/bin/env python3
"""End-to-end experiment: generate the benchmark set, train, evaluate.

    python3 scripts/run_experiment.py configs/sawtooth.cfg runs/sawtooth

Each stage lands in its own subdirectory of the output root; the eval stage
reuses the generated meta-dataset and the trained best checkpoint. The oracle
model skips training and evaluates directly.
"""

import argparse
import os
import sys

from danp.cli import run
from danp.config import load_config


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("config")
    parser.add_argument("out_root")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()

    cfg = load_config(args.config)
    common = ["--config", args.config]
    if args.seed is not None:
        common += ["--seed", str(args.seed)]
    threads = ["--threads", str(args.threads)]

    gen_dir = os.path.join(args.out_root, "data")
    code = run(threads + ["gen"] + common + ["--out", gen_dir])
    if code != 0:
        return code

    eval_args = ["--metadataset", os.path.join(gen_dir, "metadataset.txt")]
    if cfg.model != "oracle_danp":
        train_dir = os.path.join(args.out_root, "train")
        code = run(threads + ["train"] + common + ["--out", train_dir])
        if code != 0:
            return code
        eval_args += ["--checkpoint", os.path.join(train_dir, "best.ckpt")]

    return run(threads + ["eval"] + common + eval_args
               + ["--out", os.path.join(args.out_root, "eval")])


if __name__ == "__main__":
    sys.exit(main())
