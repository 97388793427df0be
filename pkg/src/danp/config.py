"""Experiment configuration: a flat `key = value` text format.

Unknown keys are rejected; exactly one of `beta` / `sigma2` pins the noise
schedule (the other is derived through the schedule algebra), with `sigma2`
defaulting when neither is given. Parse errors carry line numbers.
"""

from dataclasses import dataclass, field, fields, replace

from danp.datagen import GeneratorSpec
from danp.models import ModelSpec
from danp.noising import NoiseSchedule
from danp.training import TrainConfig
from danp.evaluation import SPolicy

CONFIG_FORMAT_VERSION = 1

MODEL_KINDS = ("danp", "oracle_danp", "convcnp", "convgnp", "ar_convcnp")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    kind: str = "sawtooth"
    input_range: tuple = (-2.0, 2.0)
    gp_lengthscale: float = 0.25
    # schedule (danp only)
    levels: int = 3
    beta: float | None = None
    sigma2: float | None = None
    # model
    model: str = "danp"
    head: str = "gnp"
    points_per_unit: int = 64
    margin: float = 0.5
    unet_levels: int = 6
    channels: int = 64
    kernel_size: int = 5
    rank: int = 64
    # training
    epochs: int = 20
    tasks_per_epoch: int = 512
    batch_size: int = 16
    learning_rate: float = 3e-4
    nc_range: tuple = (0, 30)
    nt: int = 50
    n_val_tasks: int = 64
    # evaluation
    s_policy: str = "desk"
    aux_points_per_level: int = 50
    n_orders: int = 1
    mean_field_layer0: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"unknown model {self.model!r}")
        if self.beta is not None and self.sigma2 is not None:
            raise ConfigError("give exactly one of beta and sigma2")

    def schedule(self):
        """Resolved noise schedule; beta <-> sigma2 closure applied."""
        if self.model in ("convcnp", "convgnp", "ar_convcnp"):
            return NoiseSchedule.from_beta(0, 0.0)
        try:
            if self.beta is not None:
                return NoiseSchedule.from_beta(self.levels, self.beta)
            sigma2 = 0.02 if self.sigma2 is None else self.sigma2
            return NoiseSchedule.from_sigma2(self.levels, sigma2)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def generator_spec(self):
        return GeneratorSpec(
            kind=self.kind, input_range=self.input_range,
            gp_lengthscale=self.gp_lengthscale, rng_seed=self.seed,
        )

    def model_spec(self):
        schedule = self.schedule()
        head = "cnp" if self.model in ("convcnp", "ar_convcnp") else self.head
        return ModelSpec(
            levels=schedule.levels, beta=schedule.beta, head=head,
            input_range=self.input_range, points_per_unit=self.points_per_unit,
            margin=self.margin, unet_levels=self.unet_levels,
            channels=self.channels, kernel_size=self.kernel_size,
            rank=self.rank,
        )

    def train_config(self):
        nc_range = self.nc_range
        if self.model == "ar_convcnp" and nc_range == (0, 30):
            # AR deployment feeds targets back as context
            nc_range = (0, 80)
        return TrainConfig(
            epochs=self.epochs, tasks_per_epoch=self.tasks_per_epoch,
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            nc_range=nc_range, nt=self.nt, n_val_tasks=self.n_val_tasks,
            seed=self.seed,
        )

    def s_policy_obj(self):
        gp = self.kind == "gp"
        if self.s_policy == "desk":
            return SPolicy.desk_scale(gp=gp)
        if self.s_policy == "full":
            return SPolicy.full_scale(gp=gp)
        if self.s_policy.startswith("constant:"):
            return SPolicy.constant(int(self.s_policy.split(":", 1)[1]))
        raise ConfigError(f"unknown s_policy {self.s_policy!r}")

    def resolved_lines(self):
        """Deterministic `key = value` dump of the fully resolved config."""
        schedule = self.schedule()
        lines = [f"config_format_version = {CONFIG_FORMAT_VERSION}"]
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("beta", "sigma2"):
                continue
            if isinstance(value, tuple):
                value = " ".join("%.17g" % v for v in value)
            elif isinstance(value, float):
                value = "%.17g" % value
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        if schedule.levels > 0:
            lines.append(f"beta = {'%.17g' % schedule.beta}")
            lines.append(f"# resolved sigma2 = {'%.17g' % schedule.sigma2_final}")
        return lines


def _parse_bool(text, lineno):
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"line {lineno}: invalid boolean {text!r}")


_PAIR_KEYS = {"input_range": float, "nc_range": int}
_INT_KEYS = {"levels", "points_per_unit", "unet_levels", "channels",
             "kernel_size", "rank", "epochs", "tasks_per_epoch", "batch_size",
             "nt", "n_val_tasks", "aux_points_per_level", "n_orders", "seed"}
_FLOAT_KEYS = {"gp_lengthscale", "beta", "sigma2", "margin", "learning_rate"}
_STR_KEYS = {"kind", "model", "head", "s_policy"}
_BOOL_KEYS = {"mean_field_layer0"}


def parse_config(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "config_format_version":
            if int(value) != CONFIG_FORMAT_VERSION:
                raise ConfigError(f"{source}: line {lineno}: "
                                  f"unsupported config version {value}")
            continue
        if key in values:
            raise ConfigError(f"{source}: line {lineno}: duplicate key {key!r}")
        try:
            if key in _PAIR_KEYS:
                parts = value.split()
                if len(parts) != 2:
                    raise ValueError("expected two values")
                conv = _PAIR_KEYS[key]
                values[key] = (conv(parts[0]), conv(parts[1]))
            elif key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            elif key in _STR_KEYS:
                values[key] = value
            elif key in _BOOL_KEYS:
                values[key] = _parse_bool(value, lineno)
            else:
                raise ConfigError(f"{source}: line {lineno}: unknown key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{source}: line {lineno}: bad value for "
                              f"{key!r}: {exc}") from exc
    try:
        return ExperimentConfig(**values)
    except (ConfigError, ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path):
    """Parse and fully resolve a config file; rejects unknown keys."""
    with open(path) as fh:
        cfg = parse_config(fh.read(), source=str(path))
    cfg.schedule()  # force beta/sigma2 closure errors now
    return cfg
