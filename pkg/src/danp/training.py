"""Maximum-likelihood training with per-batch layer selection and task masking.

Every batch draws fresh tasks, augments them with the model's noise schedule,
samples one layer index f uniformly over {0..F} for the whole batch, masks each
task accordingly and applies one Adam update on the mean joint NLL.
"""

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from danp.checkpoint import save_checkpoint
from danp.datagen import sample_task
from danp.linalg import NumericalError
from danp.models import NeuralProcess
from danp.noising import augment_task, mask_task
from danp import nn


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    tasks_per_epoch: int = 512
    batch_size: int = 16
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 10.0
    nc_range: tuple = (0, 30)
    nt: int = 50
    n_val_tasks: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TrainState:
    params: "nn.ParamStore"
    m: dict
    v: dict
    step: int
    rng: np.random.Generator


def init_state(spec, cfg):
    ss = np.random.SeedSequence(cfg.seed)
    rng_init, rng_train = [np.random.default_rng(c) for c in ss.spawn(2)]
    model = NeuralProcess.init(spec, rng_init)
    model.params.requires_grad_(True)
    state = TrainState(
        params=model.params,
        m={n: torch.zeros_like(t) for n, t in model.params.items()},
        v={n: torch.zeros_like(t) for n, t in model.params.items()},
        step=0,
        rng=rng_train,
    )
    return model, state


def train_step(model, state, batch, cfg, layer_f=None):
    """One masked-batch gradient step; mutates and returns the state.

    batch: list of AugmentedTask sharing the model's schedule. One layer index
    is drawn for the whole batch (not per task).
    """
    if not batch:
        raise ValueError("empty batch")
    n_levels = model.schedule.levels
    if layer_f is None:
        layer_f = int(state.rng.integers(0, n_levels + 1))
    masked = [mask_task(aug, layer_f) for aug in batch]
    loss = model.batch_nll(state.params, masked)
    if not torch.isfinite(loss):
        raise NumericalError(
            f"non-finite training loss at step {state.step}, layer {layer_f}")
    tensors = [state.params[n] for n in state.params.names()]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g
             for t, g in zip(tensors, grads)]

    total_sq = sum(float(torch.sum(g * g)) for g in grads)
    norm = np.sqrt(total_sq)
    scale = 1.0 if norm <= cfg.grad_clip else cfg.grad_clip / norm

    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    with torch.no_grad():
        for name, tensor, grad in zip(state.params.names(), tensors, grads):
            g = grad * scale
            state.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
            state.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = state.m[name] / (1.0 - b1**t)
            v_hat = state.v[name] / (1.0 - b2**t)
            tensor.add_(-cfg.learning_rate * m_hat / (torch.sqrt(v_hat) + cfg.adam_eps))
    return float(loss.detach()), layer_f


def validation_nll(model, params, val_augmented, batch_size=16):
    """Layer-averaged mean joint NLL over a fixed validation task set."""
    n_levels = model.schedule.levels
    totals = []
    with torch.no_grad():
        for f in range(n_levels + 1):
            per_layer = []
            for i in range(0, len(val_augmented), batch_size):
                chunk = [mask_task(aug, f) for aug in val_augmented[i : i + batch_size]]
                per_layer.append(float(model.batch_nll(params, chunk)) * len(chunk))
            totals.append(sum(per_layer) / len(val_augmented))
    return float(np.mean(totals))


def _sample_batch(gen_spec, schedule, cfg, rng, n):
    batch = []
    for _ in range(n):
        task = sample_task(gen_spec, rng, nc_range=cfg.nc_range, nt=cfg.nt)
        batch.append(augment_task(task, schedule, rng))
    return batch


def _save(path, spec, state, extra):
    arrays_extra = {}
    for name in state.params.names():
        arrays_extra[f"opt.m.{name}"] = state.m[name].numpy()
        arrays_extra[f"opt.v.{name}"] = state.v[name].numpy()
    extra = dict(extra)
    extra["step"] = state.step
    extra["rng_state"] = state.rng.bit_generator.state
    save_checkpoint(path, spec, state.params, extra=extra,
                    arrays_extra=arrays_extra)


def train_run(gen_spec, model_spec, cfg, out_dir, log_name="train_log.txt"):
    """Full training run; writes final + best-validation checkpoints and a log.

    Returns a dict with checkpoint/log paths and the validation trace.
    """
    os.makedirs(out_dir, exist_ok=True)
    model, state = init_state(model_spec, cfg)
    schedule = model_spec.schedule

    rng_val = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    val_augmented = _sample_batch(gen_spec, schedule, cfg, rng_val, cfg.n_val_tasks)

    log_path = os.path.join(out_dir, log_name)
    final_path = os.path.join(out_dir, "final.ckpt")
    best_path = os.path.join(out_dir, "best.ckpt")
    steps_per_epoch = max(1, cfg.tasks_per_epoch // cfg.batch_size)

    init_val = validation_nll(model, state.params, val_augmented)
    log_lines = [f"0 {init_val:.10g}"]
    best_val = init_val
    trace = [init_val]
    try:
        for _epoch in range(cfg.epochs):
            for _ in range(steps_per_epoch):
                batch = _sample_batch(gen_spec, schedule, cfg, state.rng,
                                      cfg.batch_size)
                train_step(model, state, batch, cfg)
            val = validation_nll(model, state.params, val_augmented)
            trace.append(val)
            log_lines.append(f"{state.step} {val:.10g}")
            if val <= best_val:
                best_val = val
                _save(best_path, model_spec, state, {"val_nll": val})
    except BaseException:
        _save(os.path.join(out_dir, "interrupted.ckpt"), model_spec, state,
              {"partial": True})
        with open(log_path, "w") as fh:
            fh.write("\n".join(log_lines) + "\n")
        raise
    _save(final_path, model_spec, state, {"val_nll": trace[-1]})
    if not os.path.exists(best_path):
        _save(best_path, model_spec, state, {"val_nll": trace[-1]})
    with open(log_path, "w") as fh:
        fh.write("\n".join(log_lines) + "\n")
    return {
        "final": final_path,
        "best": best_path,
        "log": log_path,
        "val_trace": trace,
        "init_val_nll": init_val,
        "final_val_nll": trace[-1],
        "best_val_nll": best_val,
    }
