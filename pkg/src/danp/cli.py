"""Command-line entry point binding the pipeline into reproducible experiments.

Exit codes: 0 success, 2 usage error, 3 invalid config/input, 4 numerical
failure. Every output directory gets a manifest recording the resolved config,
seeds and file-format versions.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np
import torch

from danp import checkpoint as ckpt
from danp import datagen
from danp.config import ConfigError, ExperimentConfig, load_config
from danp.evaluation import (
    ArConvCnpEvaluator,
    ConvCnpEvaluator,
    ConvGnpEvaluator,
    DanpEvaluator,
    evaluate,
    export_results,
)
from danp.linalg import NumericalError
from danp.models import NeuralProcess, danp_joint_loglik, danp_predictive
from danp.noising import NoiseSchedule, solve_beta
from danp.oracle import NoisedGpModel, OracleDenoiser, oracle_joint_loglik
from danp.training import train_run

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_NUMERICAL = 4


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="danp",
        description="Diffusion-augmented neural processes: desk-scale 1D "
                    "regression experiments.",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="torch CPU threads (default 1, for determinism)")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--out", required=True, help="output directory")

    sub.add_parser("gen", parents=[common],
                   help="write the 310-task benchmark meta-dataset")
    sub.add_parser("train", parents=[common],
                   help="train the configured model, write checkpoints")

    p_eval = sub.add_parser("eval", parents=[common],
                            help="evaluate a model on a meta-dataset")
    p_eval.add_argument("--checkpoint", help="trained model checkpoint")
    p_eval.add_argument("--metadataset", help="meta-dataset file "
                                              "(generated from config if absent)")

    p_sample = sub.add_parser("sample", parents=[common],
                              help="write per-layer predictive marginals for "
                                   "one sampled task")
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--s", type=int, default=32,
                          help="Monte-Carlo mixture components")
    p_sample.add_argument("--n-query", type=int, default=200)

    p_beta = sub.add_parser("solve-beta",
                            help="print the per-step beta for (levels, sigma2)")
    p_beta.add_argument("--levels", type=int, required=True)
    p_beta.add_argument("--sigma2", type=float, required=True)

    p_oracle = sub.add_parser("oracle-check",
                              help="verify the deployment pipeline against "
                                   "exact GP conditionals")
    p_oracle.add_argument("--seed", type=int, default=0)
    p_oracle.add_argument("--n-tasks", type=int, default=10)
    p_oracle.add_argument("--s-low", type=int, default=4)
    p_oracle.add_argument("--s-high", type=int, default=256)
    return parser


def _load_cfg(args):
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.schedule()
    return cfg


def _write_manifest(out_dir, cfg, extra=()):
    os.makedirs(out_dir, exist_ok=True)
    lines = ["# run manifest"]
    lines += cfg.resolved_lines()
    lines.append(f"metadataset_format_version = {datagen.METADATASET_FORMAT_VERSION}")
    lines.append(f"checkpoint_format_version = {ckpt.FORMAT_VERSION}")
    lines += list(extra)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _cmd_gen(args):
    cfg = _load_cfg(args)
    spec = cfg.generator_spec()
    rng = np.random.default_rng(cfg.seed)
    tasks = datagen.build_test_metadataset(spec, rng, nt=cfg.nt)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "metadataset.txt")
    datagen.save_metadataset(tasks, spec, cfg.seed, path)
    _write_manifest(args.out, cfg, [f"n_tasks = {len(tasks)}"])
    print(f"wrote {len(tasks)} tasks to {path}")
    return EXIT_OK


def _cmd_train(args):
    cfg = _load_cfg(args)
    if cfg.model == "oracle_danp":
        raise ConfigError("the oracle model has no parameters to train")
    result = train_run(cfg.generator_spec(), cfg.model_spec(),
                       cfg.train_config(), args.out)
    _write_manifest(args.out, cfg, [
        f"final_val_nll = {result['final_val_nll']:.10g}",
        f"best_val_nll = {result['best_val_nll']:.10g}",
    ])
    print(f"final checkpoint: {result['final']}")
    print(f"validation NLL {result['init_val_nll']:.4f} -> "
          f"{result['final_val_nll']:.4f}")
    return EXIT_OK


def _make_evaluator(cfg, args):
    if cfg.model == "oracle_danp":
        if cfg.kind != "gp":
            raise ConfigError("oracle_danp requires the gp generator")
        oracle = OracleDenoiser(
            NoisedGpModel(cfg.gp_lengthscale, cfg.schedule()),
            input_range=cfg.input_range)
        return DanpEvaluator(oracle, aux_points_per_level=cfg.aux_points_per_level,
                             mean_field=cfg.mean_field_layer0)
    if not getattr(args, "checkpoint", None):
        raise ConfigError(f"model {cfg.model!r} needs --checkpoint")
    spec, params, _, _ = ckpt.load_checkpoint(args.checkpoint)
    model = NeuralProcess(spec, params)
    if cfg.model == "danp":
        return DanpEvaluator(model, aux_points_per_level=cfg.aux_points_per_level,
                             mean_field=cfg.mean_field_layer0)
    if cfg.model == "convcnp":
        return ConvCnpEvaluator(model)
    if cfg.model == "convgnp":
        return ConvGnpEvaluator(model)
    return ArConvCnpEvaluator(model, n_orders=cfg.n_orders)


def _cmd_eval(args):
    cfg = _load_cfg(args)
    evaluator = _make_evaluator(cfg, args)
    if args.metadataset:
        tasks, _, _ = datagen.load_metadataset(args.metadataset)
    else:
        tasks = datagen.build_test_metadataset(
            cfg.generator_spec(), np.random.default_rng(cfg.seed), nt=cfg.nt)
    policy = cfg.s_policy_obj() if evaluator.uses_s else None
    rng = np.random.default_rng([cfg.seed, 1])
    table = evaluate(evaluator, tasks, policy, rng)
    paths = export_results([table], args.out)
    _write_manifest(args.out, cfg, [
        f"evaluated_model = {evaluator.name}",
        f"layer0_head = {'mean-field' if cfg.mean_field_layer0 else 'joint'}",
        f"total_forward_passes = {table.total_forward_passes}",
    ])
    print("\n".join(paths))
    return EXIT_OK


def _cmd_sample(args):
    cfg = _load_cfg(args)
    spec, params, _, _ = ckpt.load_checkpoint(args.checkpoint)
    model = NeuralProcess(spec, params)
    rng = np.random.default_rng([cfg.seed, 2])
    task = datagen.sample_task(cfg.generator_spec(), rng, nt=cfg.nt)
    lo, hi = cfg.input_range
    query_xs = np.linspace(lo, hi, args.n_query)
    os.makedirs(args.out, exist_ok=True)
    written = []
    for f in range(spec.levels + 1):
        mixture = danp_predictive(
            model, (task.context_x, task.context_y), query_xs, args.s,
            np.random.default_rng([cfg.seed, 3, f]),
            aux_points_per_level=cfg.aux_points_per_level, layer=f)
        mean, var = mixture.marginal_moments()
        path = os.path.join(args.out, f"layer{f}_marginals.txt")
        with open(path, "w") as fh:
            fh.write("# query_x mean variance\n")
            for x, m, v in zip(query_xs, mean, var):
                fh.write("%.17g %.17g %.17g\n" % (x, m, v))
        written.append(path)
    _write_manifest(args.out, cfg, [f"s = {args.s}"])
    print("\n".join(written))
    return EXIT_OK


def _cmd_solve_beta(args):
    try:
        beta = solve_beta(args.levels, args.sigma2)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print("%.10g" % beta)
    return EXIT_OK


def oracle_consistency_check(seed=0, n_tasks=10, s_low=4, s_high=256,
                             n_context=10, report=print):
    """Check that more mixture samples move the oracle-backed pipeline's joint
    log-likelihood toward the exact GP value. Returns per-task improvement flags.
    """
    gen = datagen.GeneratorSpec(kind="gp")
    schedule = NoiseSchedule.from_beta(2, 0.2115)
    oracle = OracleDenoiser(NoisedGpModel(gen.gp_lengthscale, schedule),
                            input_range=gen.input_range)
    improved = []
    for i in range(n_tasks):
        rng = np.random.default_rng([seed, i])
        task = datagen.sample_task(gen, rng, nc_range=(n_context, n_context))
        exact = oracle_joint_loglik(
            NoisedGpModel(gen.gp_lengthscale, schedule), task)
        ll_low = danp_joint_loglik(oracle, task, s_low,
                                   np.random.default_rng([seed, i, 1]))
        ll_high = danp_joint_loglik(oracle, task, s_high,
                                    np.random.default_rng([seed, i, 2]))
        err_low, err_high = abs(ll_low - exact), abs(ll_high - exact)
        improved.append(err_high < err_low)
        report(f"task {i}: exact {exact:+.4f}  "
               f"err S={s_low}: {err_low:.4f}  err S={s_high}: {err_high:.4f}  "
               f"{'improved' if improved[-1] else 'NOT improved'}")
    report(f"{sum(improved)}/{n_tasks} tasks improved with S={s_high}")
    return improved


def _cmd_oracle_check(args):
    improved = oracle_consistency_check(
        seed=args.seed, n_tasks=args.n_tasks,
        s_low=args.s_low, s_high=args.s_high)
    return EXIT_OK if sum(improved) >= args.n_tasks - 1 else EXIT_NUMERICAL


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sample": _cmd_sample,
    "solve-beta": _cmd_solve_beta,
    "oracle-check": _cmd_oracle_check,
}


def run(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_OK
    torch.set_num_threads(max(1, args.threads))
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ckpt.CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
