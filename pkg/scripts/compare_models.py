#!/usr/bin/env python3
"""Merge per-model evaluation CSVs from several runs into one comparison plot.

    python3 scripts/compare_models.py runs/sawtooth/eval runs/convgnp/eval -o cmp

Reads `{model}_tasks.csv` from each directory, rebuilds the aggregate tables
and writes a combined `results.svg` plus the per-model CSVs into the output
directory.
"""

import argparse
import glob
import os
import sys

from danp.evaluation import ResultTable, TaskRecord, export_results


def load_tables(eval_dir):
    tables = []
    for path in sorted(glob.glob(os.path.join(eval_dir, "*_tasks.csv"))):
        name = os.path.basename(path)[: -len("_tasks.csv")]
        records = []
        with open(path) as fh:
            next(fh)  # header
            for line in fh:
                index, size, ll, passes = line.strip().split(",")
                records.append(TaskRecord(
                    index=int(index), context_size=int(size),
                    loglik=float(ll), forward_passes=int(passes)))
        tables.append(ResultTable(model_name=name, records=records))
    return tables


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("eval_dirs", nargs="+")
    parser.add_argument("-o", "--out", required=True)
    args = parser.parse_args()

    tables = []
    for eval_dir in args.eval_dirs:
        found = load_tables(eval_dir)
        if not found:
            print(f"warning: no *_tasks.csv in {eval_dir}", file=sys.stderr)
        tables.extend(found)
    if not tables:
        print("error: nothing to plot", file=sys.stderr)
        return 1
    for path in export_results(tables, args.out):
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
