"""Neural-process predictives and deployment machinery.

One trunk serves every model here: a ConvCNP-style set-convolution encoder, a
1D U-Net, and per-layer Gaussian heads. Baselines are the single-channel
special case (ConvCNP: diagonal head, ConvGNP: low-rank head). The DANP is the
multi-channel case: F+1 context channels (channel 0 is the context set,
channels 1..F the noised fidelity levels), trained with task masking and
deployed by sampling the fidelity levels noisiest-first and mixing S such
conditionals into an equally weighted mixture evaluated by log-mean-exp.
"""

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from danp import nn
from danp.linalg import LOG_2PI, NumericalError, chol_with_jitter, logmeanexp, mvn_loglik
from danp.noising import FidelityLevel, NoiseSchedule, sample_aux_inputs


class ForwardPassCounter:
    """Explicit per-run accumulator of base-model applications."""

    def __init__(self):
        self.count = 0

    def add(self, n=1):
        self.count += n


def _as_1d(x):
    return np.asarray(x, dtype=np.float64).reshape(-1)


@dataclass
class GaussianPredictive:
    """Gaussian over query outputs: diagonal, diagonal-plus-low-rank, or dense.

    Covariance is diag(diag_var) + low_rank @ low_rank.T when `low_rank` is
    set, `cov` when a dense matrix is set (oracle path), else just diagonal.
    """

    mean: np.ndarray
    diag_var: np.ndarray
    low_rank: np.ndarray | None = None
    cov: np.ndarray | None = None

    def __post_init__(self):
        self.mean = _as_1d(self.mean)
        self.diag_var = _as_1d(self.diag_var)
        if self.mean.shape != self.diag_var.shape:
            raise ValueError("mean/diag_var shape mismatch")
        if np.any(self.diag_var <= 0):
            raise ValueError("diag_var must be positive")
        if self.low_rank is not None and self.cov is not None:
            raise ValueError("give at most one of low_rank and cov")

    @property
    def n(self):
        return self.mean.size

    def covariance(self):
        if self.cov is not None:
            return self.cov
        full = np.diag(self.diag_var)
        if self.low_rank is not None:
            full = full + self.low_rank @ self.low_rank.T
        return full

    def marginal_var(self):
        if self.cov is not None:
            return np.diag(self.cov).copy()
        var = self.diag_var.copy()
        if self.low_rank is not None:
            var += np.sum(self.low_rank**2, axis=1)
        return var

    def as_mean_field(self):
        return GaussianPredictive(mean=self.mean, diag_var=self.marginal_var())

    def loglik(self, ys):
        return gaussian_loglik(self, ys)

    def sample(self, rng):
        if self.cov is not None:
            chol = chol_with_jitter(self.cov)
            return self.mean + chol @ rng.standard_normal(self.n)
        draw = self.mean + np.sqrt(self.diag_var) * rng.standard_normal(self.n)
        if self.low_rank is not None:
            draw = draw + self.low_rank @ rng.standard_normal(self.low_rank.shape[1])
        return draw


def _lowrank_loglik(y, mean, diag, low_rank):
    # matrix-determinant lemma + Woodbury on D + L L^T
    resid = y - mean
    d_inv = 1.0 / diag
    lt_dinv = low_rank.T * d_inv  # (R, N)
    cap = np.eye(low_rank.shape[1]) + lt_dinv @ low_rank
    cap_chol = np.linalg.cholesky(cap)  # I + L^T D^-1 L is always PD
    logdet = np.sum(np.log(diag)) + 2.0 * np.sum(np.log(np.diag(cap_chol)))
    u = lt_dinv @ resid
    w = np.linalg.solve(cap_chol, u)
    quad = resid @ (d_inv * resid) - w @ w
    return float(-0.5 * (y.size * LOG_2PI + logdet + quad))


def gaussian_loglik(pred, ys):
    """Exact joint log density of ys under the predictive."""
    ys = _as_1d(ys)
    if ys.shape != pred.mean.shape:
        raise ValueError("ys length does not match predictive")
    if ys.size == 0:
        return 0.0
    if pred.cov is not None:
        return mvn_loglik(ys, pred.mean, pred.cov)
    if pred.low_rank is not None:
        return _lowrank_loglik(ys, pred.mean, pred.diag_var, pred.low_rank)
    resid = ys - pred.mean
    return float(-0.5 * np.sum(LOG_2PI + np.log(pred.diag_var)
                               + resid**2 / pred.diag_var))


@dataclass
class MixturePredictive:
    """S equally weighted Gaussian components over identical query inputs."""

    components: list

    def __post_init__(self):
        if not self.components:
            raise ValueError("need at least one component")
        n = self.components[0].n
        if any(c.n != n for c in self.components):
            raise ValueError("components must share query inputs")

    def joint_loglik(self, ys):
        return logmeanexp([c.loglik(ys) for c in self.components])

    def marginal_moments(self):
        means = np.stack([c.mean for c in self.components])
        variances = np.stack([c.marginal_var() for c in self.components])
        mean = means.mean(axis=0)
        var = (variances + means**2).mean(axis=0) - mean**2
        return mean, np.maximum(var, 0.0)

    def marginal_logpdf(self, index, y):
        """Mixture marginal log density of output y at query `index`."""
        lls = []
        for c in self.components:
            var = c.marginal_var()[index]
            lls.append(-0.5 * (LOG_2PI + np.log(var) + (y - c.mean[index]) ** 2 / var))
        return logmeanexp(lls)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and schedule of one neural-process model.

    levels == 0 with a single head gives the plain ConvCNP / ConvGNP
    baselines; levels F >= 1 gives a DANP with F + 1 channels and heads.
    """

    levels: int = 0
    beta: float = 0.0
    head: str = "gnp"  # "cnp" | "gnp"
    input_range: tuple = (-2.0, 2.0)
    points_per_unit: int = 64
    margin: float = 0.5
    unet_levels: int = 6
    channels: int = 64
    kernel_size: int = 5
    rank: int = 64
    var_floor: float = 1e-6

    def __post_init__(self):
        if self.head not in ("cnp", "gnp"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.levels < 0:
            raise ValueError("levels must be >= 0")

    @property
    def schedule(self):
        return NoiseSchedule.from_beta(self.levels, self.beta)

    @property
    def n_channels(self):
        return self.levels + 1

    def unet_config(self):
        return nn.UNetConfig(
            levels=self.unet_levels,
            channels=self.channels,
            kernel_size=self.kernel_size,
            in_channels=2 * self.n_channels,
            out_channels=self.channels,
        )

    def to_dict(self):
        d = asdict(self)
        d["input_range"] = list(self.input_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["input_range"] = tuple(d["input_range"])
        return cls(**d)


def _softplus_inv(y):
    return math.log(math.expm1(y))


def init_params(spec, rng):
    """Fresh ParamStore for a ModelSpec; deterministic in the generator."""
    cfg = spec.unet_config()
    arrays = nn.init_unet_params(cfg, rng)
    ls0 = _softplus_inv(2.0 / spec.points_per_unit)
    arrays["enc.raw_ls"] = np.array(ls0)
    arrays["dec.raw_ls"] = np.array(ls0)
    c = spec.channels
    scale = 1.0 / math.sqrt(c)
    for f in range(spec.n_channels):
        arrays[f"head{f}.mean.w"] = rng.standard_normal(c) * scale
        arrays[f"head{f}.mean.b"] = np.zeros(())
        arrays[f"head{f}.var.w"] = rng.standard_normal(c) * scale
        arrays[f"head{f}.var.b"] = np.zeros(())
        if spec.head == "gnp":
            arrays[f"head{f}.cov.w"] = rng.standard_normal((c, spec.rank)) * scale
            arrays[f"head{f}.cov.b"] = np.zeros(spec.rank)
    return nn.ParamStore(arrays)


def _softplus(x):
    return torch.nn.functional.softplus(x)


class NeuralProcess:
    """Trunk + heads bound to a ParamStore; all prediction paths live here."""

    def __init__(self, spec, params):
        self.spec = spec
        self.params = params
        self.grid = nn.make_grid(
            spec.input_range,
            points_per_unit=spec.points_per_unit,
            margin=spec.margin,
            multiple=spec.unet_config().divisor,
        )
        self._grid_t = torch.as_tensor(self.grid, dtype=nn.DTYPE)

    @classmethod
    def init(cls, spec, rng):
        return cls(spec, init_params(spec, rng))

    @property
    def schedule(self):
        return self.spec.schedule

    @property
    def input_range(self):
        return self.spec.input_range

    def _check_coverage(self, xs):
        xs = _as_1d(xs)
        if xs.size and (xs.min() < self.grid[0] or xs.max() > self.grid[-1]):
            raise ValueError("query inputs outside grid coverage")
        return xs

    def _encode_item(self, params, context, aux_levels, enc_ls):
        """Stack 2 * (F + 1) grid channels for one task view."""
        by_channel = {0: context}
        for level in aux_levels:
            if not 1 <= level.f <= self.spec.levels:
                raise ValueError(f"aux level {level.f} out of range")
            by_channel[level.f] = (level.x, level.y)
        chans = []
        for ch in range(self.spec.n_channels):
            if ch in by_channel:
                xs, ys = by_channel[ch]
                chans.append(nn.setconv_encode(xs, ys, self._grid_t, enc_ls))
            else:
                # absent fidelity: zero density signals the empty tensor
                chans.append(torch.zeros(2, len(self.grid)))
        return torch.cat(chans, dim=0)

    def _forward(self, items, f, params=None):
        """Batched trunk application.

        items: list of (context, aux_levels, query_xs) with context = (xs, ys).
        Returns a list of per-item (mean, var, low_rank|None) torch tensors.
        """
        params = self.params if params is None else params
        if not 0 <= f <= self.spec.levels:
            raise ValueError(f"layer {f} out of range 0..{self.spec.levels}")
        enc_ls = _softplus(params["enc.raw_ls"]) + self.spec.var_floor
        dec_ls = _softplus(params["dec.raw_ls"]) + self.spec.var_floor
        encoded = torch.stack([
            self._encode_item(params, ctx, aux, enc_ls) for ctx, aux, _ in items
        ])
        grid_out = nn.unet_apply(params, self.spec.unet_config(), encoded)
        outputs = []
        for b, (_, _, query_xs) in enumerate(items):
            xs = self._check_coverage(query_xs)
            feats = nn.setconv_decode(grid_out[b], xs, self._grid_t, dec_ls)
            mean = feats @ params[f"head{f}.mean.w"] + params[f"head{f}.mean.b"]
            raw_var = feats @ params[f"head{f}.var.w"] + params[f"head{f}.var.b"]
            var = _softplus(raw_var) + self.spec.var_floor
            low_rank = None
            if self.spec.head == "gnp":
                low_rank = (feats @ params[f"head{f}.cov.w"]
                            + params[f"head{f}.cov.b"]) / math.sqrt(self.spec.rank)
            outputs.append((mean, var, low_rank))
        return outputs

    def layer_predict_batch(self, items, f, counter=None):
        if counter is not None:
            counter.add(len(items))
        with torch.no_grad():
            raw = self._forward(items, f)
        preds = []
        for mean, var, low_rank in raw:
            preds.append(GaussianPredictive(
                mean=mean.numpy(),
                diag_var=var.numpy(),
                low_rank=None if low_rank is None else low_rank.numpy(),
            ))
        return preds

    def layer_predict(self, context, aux_levels, f, query_xs, counter=None):
        """Predict the layer-f targets given context and the noisier levels."""
        return self.layer_predict_batch([(context, aux_levels, query_xs)], f,
                                        counter=counter)[0]

    def batch_nll(self, params, masked_tasks):
        """Mean joint NLL of a batch of task views masked at a common layer.

        Torch path used for training; differentiable in `params`.
        """
        f = masked_tasks[0].layer
        if any(mt.layer != f for mt in masked_tasks):
            raise ValueError("all tasks in a batch must share the layer index")
        items = [((mt.context_x, mt.context_y), mt.aux, mt.target_x)
                 for mt in masked_tasks]
        raw = self._forward(items, f, params=params)
        total = 0.0
        for mt, (mean, var, low_rank) in zip(masked_tasks, raw):
            y = torch.as_tensor(mt.target_y, dtype=nn.DTYPE)
            if low_rank is None:
                ll = -0.5 * torch.sum(LOG_2PI + torch.log(var)
                                      + (y - mean) ** 2 / var)
            else:
                ll = _lowrank_loglik_t(y, mean, var, low_rank)
            total = total - ll
        return total / len(masked_tasks)


def _lowrank_loglik_t(y, mean, diag, low_rank):
    resid = y - mean
    d_inv = 1.0 / diag
    lt_dinv = low_rank.T * d_inv
    cap = torch.eye(low_rank.shape[1], dtype=nn.DTYPE) + lt_dinv @ low_rank
    cap_chol = torch.linalg.cholesky(cap)
    logdet = torch.sum(torch.log(diag)) + 2.0 * torch.sum(
        torch.log(torch.diagonal(cap_chol)))
    u = lt_dinv @ resid
    w = torch.linalg.solve_triangular(cap_chol, u.unsqueeze(1), upper=False).squeeze(1)
    quad = resid @ (d_inv * resid) - w @ w
    return -0.5 * (y.numel() * LOG_2PI + logdet + quad)


def convcnp_predict(model, context, query_xs, counter=None):
    """Mean-field baseline predictive (single-channel model, diagonal head)."""
    if model.spec.head != "cnp" or model.spec.levels != 0:
        raise ValueError("convcnp_predict expects a single-channel cnp-head model")
    return model.layer_predict(context, [], 0, query_xs, counter=counter)


def convgnp_predict(model, context, query_xs, counter=None):
    """Low-rank joint baseline predictive (single-channel model, gnp head)."""
    if model.spec.head != "gnp" or model.spec.levels != 0:
        raise ValueError("convgnp_predict expects a single-channel gnp-head model")
    return model.layer_predict(context, [], 0, query_xs, counter=counter)


def _supports_batch(model):
    return hasattr(model, "layer_predict_batch")


def danp_sample_aux(model, context, aux_inputs, rng, counter=None):
    """Sample one auxiliary dataset: level F from the context alone, then each
    level f from the context plus the already-sampled levels f+1..F.

    Exactly F base-model applications. Returns FidelityLevels ascending in f.
    """
    return _sample_aux_batch(model, context, [aux_inputs], rng, counter=counter)[0]


def _sample_aux_batch(model, context, aux_inputs_list, rng, counter=None):
    """Run S denoising chains in parallel (batched trunk when available)."""
    n_levels = model.schedule.levels
    chains = [[] for _ in aux_inputs_list]
    for f in range(n_levels, 0, -1):
        items = [(context, chains[s], aux_inputs_list[s][f - 1])
                 for s in range(len(aux_inputs_list))]
        if _supports_batch(model):
            preds = model.layer_predict_batch(items, f, counter=counter)
        else:
            preds = [model.layer_predict(ctx, aux, f, xs, counter=counter)
                     for ctx, aux, xs in items]
        for s, pred in enumerate(preds):
            ys = pred.sample(rng)
            chains[s] = [FidelityLevel(f=f, x=aux_inputs_list[s][f - 1], y=ys)] + chains[s]
    return chains


def _draw_aux_inputs(model, S, n_per_level, rng):
    schedule = model.schedule
    if schedule.levels == 0:
        return [[] for _ in range(S)]
    return [sample_aux_inputs(schedule, n_per_level, model.input_range, rng)
            for _ in range(S)]


def danp_predictive(model, context, query_xs, S, rng, counter=None,
                    aux_points_per_level=50, mean_field=False, layer=0):
    """S-component mixture over query_xs obtained by conditioning on S
    independently sampled auxiliary datasets.

    All auxiliary randomness is consumed before the queries are touched, so
    two calls with the same seed share their aux samples regardless of the
    query set.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    aux_inputs_list = _draw_aux_inputs(model, S, aux_points_per_level, rng)
    aux_samples = _sample_aux_batch(model, context, aux_inputs_list, rng,
                                    counter=counter)
    items = [(context, [lv for lv in aux if lv.f > layer], query_xs)
             for aux in aux_samples]
    if _supports_batch(model):
        preds = model.layer_predict_batch(items, layer, counter=counter)
    else:
        preds = [model.layer_predict(ctx, aux, layer, xs, counter=counter)
                 for ctx, aux, xs in items]
    if mean_field:
        preds = [p.as_mean_field() for p in preds]
    return MixturePredictive(components=preds)


def danp_joint_loglik(model, task, S, rng, counter=None,
                      aux_points_per_level=50, mean_field=False):
    """Monte-Carlo mixture joint log-likelihood of the task's targets.

    Total base-model applications: S * (F + 1).
    """
    mixture = danp_predictive(
        model, (task.context_x, task.context_y), task.target_x, S, rng,
        counter=counter, aux_points_per_level=aux_points_per_level,
        mean_field=mean_field,
    )
    return mixture.joint_loglik(task.target_y)


def danp_marginals(model, task, S, query_xs, rng, counter=None,
                   aux_points_per_level=50, mean_field=False):
    """Per-query mixture mean and variance of the layer-0 predictive."""
    mixture = danp_predictive(
        model, (task.context_x, task.context_y), query_xs, S, rng,
        counter=counter, aux_points_per_level=aux_points_per_level,
        mean_field=mean_field,
    )
    return mixture.marginal_moments()


def ar_convcnp_loglik(model, task, n_orders=1, rng=None, counter=None, orders=None):
    """Chain-rule joint log-likelihood of an AR-deployed ConvCNP.

    Targets are visited in a random order; each one-step conditional conditions
    on the context plus the previously visited true target pairs (teacher
    forcing). N_t forward passes per order; orders combine by log-mean-exp.
    """
    nt = task.n_target
    if orders is None:
        if rng is None:
            raise ValueError("need rng or explicit orders")
        orders = [rng.permutation(nt) for _ in range(n_orders)]
    lls = []
    for order in orders:
        cx = task.context_x
        cy = task.context_y
        total = 0.0
        for idx in order:
            pred = model.layer_predict((cx, cy), [], 0, [task.target_x[idx]],
                                       counter=counter)
            total += pred.loglik([task.target_y[idx]])
            cx = np.append(cx, task.target_x[idx])
            cy = np.append(cy, task.target_y[idx])
        lls.append(total)
    return logmeanexp(lls)
