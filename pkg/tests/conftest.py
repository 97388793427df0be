import numpy as np
import pytest
import torch

from danp.datagen import GeneratorSpec, sample_task
from danp.models import ModelSpec, NeuralProcess
from danp.training import TrainConfig, train_run

torch.set_num_threads(4)


def small_spec(levels=2, head="gnp", **overrides):
    """A small but structurally complete model, fast enough for every test."""
    kwargs = dict(
        levels=levels,
        beta=0.2114949014794547 if levels == 2 else 0.08525707587250508,
        head=head,
        points_per_unit=16,
        unet_levels=3,
        channels=16,
        rank=8,
    )
    if levels == 0:
        kwargs["beta"] = 0.0
    kwargs.update(overrides)
    return ModelSpec(**kwargs)


def small_model(levels=2, head="gnp", seed=0, **overrides):
    return NeuralProcess.init(small_spec(levels=levels, head=head, **overrides),
                              np.random.default_rng(seed))


@pytest.fixture(scope="session")
def trained_sawtooth(tmp_path_factory):
    """Desk-scale DANP training on sawtooth; shared by the acceptance suite."""
    import time

    out = tmp_path_factory.mktemp("trained_sawtooth")
    gen = GeneratorSpec(kind="sawtooth")
    spec = ModelSpec(levels=3, beta=0.08525707587250508, head="gnp")
    cfg = TrainConfig(epochs=20, tasks_per_epoch=512, batch_size=16, seed=0)
    start = time.monotonic()
    result = train_run(gen, spec, cfg, str(out))
    result["runtime_s"] = time.monotonic() - start
    result["spec"] = spec
    result["gen"] = gen
    return result
