"""Benchmark harness: per-context-size joint log-likelihoods, sample-count
policies, exact forward-pass accounting, and CSV/SVG export."""

import os
from dataclasses import dataclass, field

import numpy as np

from danp.models import (
    ForwardPassCounter,
    ar_convcnp_loglik,
    danp_joint_loglik,
    gaussian_loglik,
)

RESULTS_HEADER = "context_size,mean_ll,stderr,n_tasks,forward_passes"
TASKS_HEADER = "task_index,context_size,loglik,forward_passes"


@dataclass(frozen=True)
class SPolicy:
    """Context-size-dependent Monte-Carlo sample counts.

    thresholds: list of ((lo, hi), S) whose ranges partition 0..max size.
    """

    thresholds: tuple

    def __post_init__(self):
        covered = []
        for (lo, hi), s in self.thresholds:
            if s < 1:
                raise ValueError("S must be >= 1")
            covered.extend(range(lo, hi + 1))
        if sorted(covered) != list(range(min(covered), max(covered) + 1)) or \
                len(covered) != len(set(covered)):
            raise ValueError("thresholds must partition the context-size range")

    def s_for(self, context_size):
        for (lo, hi), s in self.thresholds:
            if lo <= context_size <= hi:
                return s
        raise ValueError(f"context size {context_size} outside policy range")

    @classmethod
    def desk_scale(cls, gp=False):
        cut = 9 if gp else 5
        return cls(thresholds=(((0, cut), 256), ((cut + 1, 30), 32)))

    @classmethod
    def full_scale(cls, gp=False):
        cut = 9 if gp else 5
        return cls(thresholds=(((0, cut), 50_000), ((cut + 1, 30), 5_000)))

    @classmethod
    def constant(cls, s, max_size=30):
        return cls(thresholds=(((0, max_size), s),))


@dataclass
class TaskRecord:
    index: int
    context_size: int
    loglik: float
    forward_passes: int


@dataclass
class ResultTable:
    model_name: str
    records: list  # TaskRecord, ordered by task index
    metadata: dict = field(default_factory=dict)

    def context_sizes(self):
        return sorted({r.context_size for r in self.records})

    def rows(self):
        """(size, mean_ll, stderr, n_tasks, forward_passes) per context size."""
        out = []
        for size in self.context_sizes():
            lls = np.array([r.loglik for r in self.records
                            if r.context_size == size])
            passes = sum(r.forward_passes for r in self.records
                         if r.context_size == size)
            stderr = float(lls.std(ddof=1) / np.sqrt(lls.size)) if lls.size > 1 else 0.0
            out.append((size, float(lls.mean()), stderr, int(lls.size), passes))
        return out

    @property
    def total_forward_passes(self):
        return sum(r.forward_passes for r in self.records)


def count_forward_passes(run_record):
    """Exact number of base-model applications in a run record."""
    if isinstance(run_record, TaskRecord):
        return run_record.forward_passes
    if isinstance(run_record, ResultTable):
        return run_record.total_forward_passes
    if isinstance(run_record, ForwardPassCounter):
        return run_record.count
    raise TypeError(f"unsupported run record {type(run_record)!r}")


class DanpEvaluator:
    """Joint log-likelihood via the S-sample auxiliary-mixture deployment."""

    name = "danp"
    uses_s = True

    def __init__(self, model, aux_points_per_level=50, mean_field=False):
        self.model = model
        self.aux_points_per_level = aux_points_per_level
        self.mean_field = mean_field

    def task_loglik(self, task, s, rng, counter):
        return danp_joint_loglik(
            self.model, task, s, rng, counter=counter,
            aux_points_per_level=self.aux_points_per_level,
            mean_field=self.mean_field,
        )


class ConvCnpEvaluator:
    """Mean-field joint likelihood in one forward pass."""

    name = "convcnp"
    uses_s = False

    def __init__(self, model):
        self.model = model

    def task_loglik(self, task, s, rng, counter):
        pred = self.model.layer_predict(
            (task.context_x, task.context_y), [], 0, task.target_x,
            counter=counter)
        return gaussian_loglik(pred.as_mean_field(), task.target_y)


class ConvGnpEvaluator:
    """Low-rank joint likelihood in one forward pass."""

    name = "convgnp"
    uses_s = False

    def __init__(self, model):
        self.model = model

    def task_loglik(self, task, s, rng, counter):
        pred = self.model.layer_predict(
            (task.context_x, task.context_y), [], 0, task.target_x,
            counter=counter)
        return gaussian_loglik(pred, task.target_y)


class ArConvCnpEvaluator:
    """Chain-rule deployment: N_t forward passes per visiting order."""

    name = "ar_convcnp"
    uses_s = False

    def __init__(self, model, n_orders=1):
        self.model = model
        self.n_orders = n_orders

    def task_loglik(self, task, s, rng, counter):
        return ar_convcnp_loglik(self.model, task, n_orders=self.n_orders,
                                 rng=rng, counter=counter)


def evaluate(evaluator, metadataset, s_policy, rng):
    """Per-task joint log-likelihoods aggregated per context size."""
    records = []
    for index, task in enumerate(metadataset):
        counter = ForwardPassCounter()
        s = s_policy.s_for(task.n_context) if s_policy is not None else 1
        ll = evaluator.task_loglik(task, s, rng, counter)
        records.append(TaskRecord(
            index=index, context_size=task.n_context,
            loglik=float(ll), forward_passes=counter.count,
        ))
    return ResultTable(model_name=evaluator.name, records=records)


def _fmt(x):
    return "%.17g" % x


def export_results(tables, out_dir):
    """Write per-model aggregate and per-task CSVs plus one SVG line plot.

    Returns the list of written paths. Data files are byte-deterministic for
    a given table.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for table in tables:
        if not table.records:
            raise ValueError("empty result table")
        agg_path = os.path.join(out_dir, f"{table.model_name}_results.csv")
        with open(agg_path, "w") as fh:
            fh.write(RESULTS_HEADER + "\n")
            for size, mean_ll, stderr, n_tasks, passes in table.rows():
                fh.write(f"{size},{_fmt(mean_ll)},{_fmt(stderr)},{n_tasks},{passes}\n")
        paths.append(agg_path)
        task_path = os.path.join(out_dir, f"{table.model_name}_tasks.csv")
        with open(task_path, "w") as fh:
            fh.write(TASKS_HEADER + "\n")
            for r in table.records:
                fh.write(f"{r.index},{r.context_size},{_fmt(r.loglik)},"
                         f"{r.forward_passes}\n")
        paths.append(task_path)
    svg_path = os.path.join(out_dir, "results.svg")
    _write_svg(tables, svg_path)
    paths.append(svg_path)
    return paths


_SVG_COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]


def _write_svg(tables, path, width=640, height=420, pad=50):
    all_rows = [row for t in tables for row in t.rows()]
    xs = [row[0] for row in all_rows]
    los = [row[1] - row[2] for row in all_rows]
    his = [row[1] + row[2] for row in all_rows]
    x_min, x_max = min(xs), max(xs)
    y_min, y_max = min(los), max(his)
    if x_max == x_min:
        x_max = x_min + 1
    if y_max == y_min:
        y_max = y_min + 1.0

    def sx(x):
        return pad + (x - x_min) / (x_max - x_min) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y_min) / (y_max - y_min) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
        f'y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 10}" text-anchor="middle" '
        f'font-size="13">context size</text>',
        f'<text x="14" y="{height / 2:.1f}" font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 14 {height / 2:.1f})">mean joint log-likelihood</text>',
    ]
    for i, table in enumerate(tables):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        pts = " ".join(f"{sx(row[0]):.2f},{sy(row[1]):.2f}" for row in table.rows())
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        for size, mean_ll, stderr, _, _ in table.rows():
            parts.append(
                f'<line x1="{sx(size):.2f}" y1="{sy(mean_ll - stderr):.2f}" '
                f'x2="{sx(size):.2f}" y2="{sy(mean_ll + stderr):.2f}" '
                f'stroke="{color}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 16 * i}" '
                     f'font-size="12" fill="{color}">{table.model_name}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
