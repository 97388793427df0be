"""Synthetic 1D meta-learning task generators: sawtooth, square wave and GP draws.

Functions are pure in an explicit numpy Generator, so independent streams can
run concurrently. GP ground-truth functions are realised lazily as one joint
multivariate-normal draw over all input locations a task needs.
"""

from dataclasses import dataclass, field

import numpy as np

from danp.linalg import chol_with_jitter

DEFAULT_INPUT_RANGE = (-2.0, 2.0)
DEFAULT_NT = 50
DEFAULT_NC_RANGE = (0, 30)
TEST_TASKS_PER_SIZE = 10
TEST_MAX_CONTEXT = 30

METADATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class GeneratorSpec:
    """Which function family tasks are drawn from, and over what input range."""

    kind: str  # "sawtooth" | "square" | "gp"
    input_range: tuple = DEFAULT_INPUT_RANGE
    gp_lengthscale: float = 0.25
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sawtooth", "square", "gp"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        lo, hi = self.input_range
        if not hi > lo:
            raise ValueError("input_range must be non-degenerate")
        if not self.gp_lengthscale > 0:
            raise ValueError("gp_lengthscale must be positive")


@dataclass(frozen=True)
class SawtoothParams:
    omega: float  # frequency, U(2, 4)
    d: int  # direction, -1 or +1
    phi: float  # phase, U(1/omega, 1)

    def __post_init__(self):
        if not 2.0 <= self.omega <= 4.0:
            raise ValueError("omega out of [2, 4]")
        if self.d not in (-1, 1):
            raise ValueError("d must be -1 or +1")
        if not 1.0 / self.omega <= self.phi <= 1.0:
            raise ValueError("phi out of [1/omega, 1]")


@dataclass(frozen=True)
class SquareParams:
    omega: float  # frequency, U(1, 3)
    phi: float  # phase, U(1/omega, 1)

    def __post_init__(self):
        if not 1.0 <= self.omega <= 3.0:
            raise ValueError("omega out of [1, 3]")
        # sampling draws phi from U(1/omega, 1), but evaluation is total in phi
        if not 0.0 < self.phi <= 1.0:
            raise ValueError("phi out of (0, 1]")


@dataclass
class Task:
    """A context set and a target set of scalar input/output pairs."""

    context_x: np.ndarray
    context_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray

    def __post_init__(self):
        for name in ("context_x", "context_y", "target_x", "target_y"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.context_x.shape != self.context_y.shape:
            raise ValueError("context x/y length mismatch")
        if self.target_x.shape != self.target_y.shape:
            raise ValueError("target x/y length mismatch")

    @property
    def n_context(self):
        return self.context_x.size

    @property
    def n_target(self):
        return self.target_x.size


def sample_function_params(spec, rng):
    """Draw per-task function parameters for the wave generators."""
    if spec.kind == "sawtooth":
        omega = rng.uniform(2.0, 4.0)
        d = int(rng.choice([-1, 1]))
        phi = rng.uniform(1.0 / omega, 1.0)
        return SawtoothParams(omega=omega, d=d, phi=phi)
    if spec.kind == "square":
        omega = rng.uniform(1.0, 3.0)
        phi = rng.uniform(1.0 / omega, 1.0)
        return SquareParams(omega=omega, phi=phi)
    raise ValueError(
        "GP functions have no finite parameterisation; sample them jointly "
        "at evaluation points via sample_gp_values"
    )


def eval_sawtooth(params, x):
    """f(x) = (omega * (d*x - phi)) mod 1, mapped into [0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    return np.mod(params.omega * (params.d * x - params.phi), 1.0)


def eval_square(params, x):
    """f(x) = 1 if floor(omega*x - phi) is even else 0 (nonnegative mod)."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.mod(np.floor(params.omega * x - params.phi), 2.0) == 0.0, 1.0, 0.0)


def eq_cov_matrix(xs, xs2, lengthscale):
    """EQ covariance k(x, x') = exp(-(x - x')^2 / (2 l^2)) as a matrix."""
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 1)
    xs2 = np.asarray(xs2, dtype=np.float64).reshape(1, -1)
    return np.exp(-((xs - xs2) ** 2) / (2.0 * lengthscale**2))


def sample_gp_values(xs, lengthscale, rng):
    """One joint zero-mean GP draw with EQ kernel at the given inputs."""
    xs = np.asarray(xs, dtype=np.float64)
    if not lengthscale > 0:
        raise ValueError("lengthscale must be positive")
    if xs.size == 0:
        return np.zeros(0)
    cov = eq_cov_matrix(xs, xs, lengthscale)
    chol = chol_with_jitter(cov)
    return chol @ rng.standard_normal(xs.size)


def sample_task(spec, rng, nc_range=DEFAULT_NC_RANGE, nt=DEFAULT_NT):
    """Draw one task: context size uniform over nc_range, all inputs iid uniform."""
    if nt < 1:
        raise ValueError("nt must be >= 1")
    if nc_range[0] < 0:
        raise ValueError("context sizes must be nonnegative")
    nc = int(rng.integers(nc_range[0], nc_range[1] + 1))
    lo, hi = spec.input_range
    cx = rng.uniform(lo, hi, size=nc)
    tx = rng.uniform(lo, hi, size=nt)
    if spec.kind == "gp":
        ys = sample_gp_values(np.concatenate([cx, tx]), spec.gp_lengthscale, rng)
        cy, ty = ys[:nc], ys[nc:]
    else:
        params = sample_function_params(spec, rng)
        f = eval_sawtooth if spec.kind == "sawtooth" else eval_square
        cy, ty = f(params, cx), f(params, tx)
    return Task(context_x=cx, context_y=cy, target_x=tx, target_y=ty)


def build_test_metadataset(spec, rng, tasks_per_size=TEST_TASKS_PER_SIZE,
                           max_context=TEST_MAX_CONTEXT, nt=DEFAULT_NT):
    """Benchmark set: tasks_per_size tasks for every context size 0..max_context."""
    tasks = []
    for nc in range(max_context + 1):
        for _ in range(tasks_per_size):
            tasks.append(sample_task(spec, rng, nc_range=(nc, nc), nt=nt))
    return tasks


def _fmt(x):
    return "%.17g" % x


def save_metadataset(tasks, spec, seed, path):
    """Line-based numeric text export: per task, context pairs then target pairs."""
    lines = []
    lines.append(f"# metadataset v{METADATASET_FORMAT_VERSION}")
    lines.append(f"# kind {spec.kind}")
    lines.append(f"# input_range {_fmt(spec.input_range[0])} {_fmt(spec.input_range[1])}")
    lines.append(f"# gp_lengthscale {_fmt(spec.gp_lengthscale)}")
    lines.append(f"# seed {seed}")
    lines.append(f"# n_tasks {len(tasks)}")
    for task in tasks:
        lines.append(f"task {task.n_context} {task.n_target}")
        for x, y in zip(task.context_x, task.context_y):
            lines.append(f"{_fmt(x)} {_fmt(y)}")
        for x, y in zip(task.target_x, task.target_y):
            lines.append(f"{_fmt(x)} {_fmt(y)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_metadataset(path):
    """Inverse of save_metadataset; returns (tasks, spec, seed)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# metadataset v"):
        raise ValueError(f"{path}: not a metadataset file")
    version = int(lines[0].rsplit("v", 1)[1])
    if version != METADATASET_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported metadataset version {version}")
    header = {}
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        parts = lines[i][1:].split()
        header[parts[0]] = parts[1:]
        i += 1
    spec = GeneratorSpec(
        kind=header["kind"][0],
        input_range=(float(header["input_range"][0]), float(header["input_range"][1])),
        gp_lengthscale=float(header["gp_lengthscale"][0]),
        rng_seed=int(header["seed"][0]),
    )
    tasks = []
    while i < len(lines):
        tag, nc, nt = lines[i].split()
        if tag != "task":
            raise ValueError(f"{path}:{i + 1}: expected task header")
        nc, nt = int(nc), int(nt)
        block = lines[i + 1 : i + 1 + nc + nt]
        pairs = np.array([[float(v) for v in ln.split()] for ln in block])
        pairs = pairs.reshape(nc + nt, 2)
        tasks.append(Task(
            context_x=pairs[:nc, 0], context_y=pairs[:nc, 1],
            target_x=pairs[nc:, 0], target_y=pairs[nc:, 1],
        ))
        i += 1 + nc + nt
    if "n_tasks" in header and len(tasks) != int(header["n_tasks"][0]):
        raise ValueError(f"{path}: task count mismatch")
    return tasks, spec, int(header["seed"][0])
