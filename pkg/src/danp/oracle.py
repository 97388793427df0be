"""Exact Gaussian-process ground truth under the noising model.

The generative construction: a latent function f ~ GP(0, k_EQ), the level-f
value at x is (1-beta)^(f/2) f(x) plus independent noise of variance
beta - beta (1-beta)^f. Closed-form conditionals under this joint act as a
Bayes-optimal denoiser with the same call contract as the neural model, which
lets the full deployment pipeline be verified without any training.
"""

from dataclasses import dataclass

import numpy as np

from danp.linalg import chol_with_jitter, mvn_loglik
from danp.models import GaussianPredictive
from danp.noising import compound_params


def eq_kernel(x, x2, lengthscale):
    """EQ covariance exp(-(x - x')^2 / (2 l^2)); broadcasts over arrays."""
    if not lengthscale > 0:
        raise ValueError("lengthscale must be positive")
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    return np.exp(-((x - x2) ** 2) / (2.0 * lengthscale**2))


@dataclass(frozen=True)
class NoisedGpModel:
    lengthscale: float
    schedule: "NoiseSchedule"

    def __post_init__(self):
        if not self.lengthscale > 0:
            raise ValueError("lengthscale must be positive")


def _joint_cov(model, xs, fs, correlated_noise=False, coincide_tol=1e-12):
    """Covariance of level-f_i values at x_i under the noised-GP joint.

    Signal part: (1-beta)^((f_i+f_j)/2) k(x_i, x_j). Noise part: per-point
    level noise on the diagonal; in correlated mode, noises of the same point
    observed at two levels co-vary as (1-beta)^((g-f)/2) * var_noise(f), g >= f
    (the chain recursion carries the lower level's noise upward).
    """
    xs = np.asarray(xs, dtype=np.float64)
    fs = np.asarray(fs, dtype=np.int64)
    beta = model.schedule.beta
    scale = (1.0 - beta) ** (fs / 2.0)
    k = eq_kernel(xs.reshape(-1, 1), xs.reshape(1, -1), model.lengthscale)
    cov = np.outer(scale, scale) * k
    noise_var = np.array([compound_params(model.schedule, int(f))[1] for f in fs])
    cov[np.diag_indices_from(cov)] += noise_var
    if correlated_noise:
        same_x = np.abs(xs.reshape(-1, 1) - xs.reshape(1, -1)) <= coincide_tol
        for i in range(len(xs)):
            for j in range(len(xs)):
                if i != j and same_x[i, j]:
                    lo, hi = sorted((int(fs[i]), int(fs[j])))
                    cov[i, j] += (1.0 - beta) ** ((hi - lo) / 2.0) * noise_var_at(
                        model.schedule, lo)
    return cov


def noise_var_at(schedule, f):
    return compound_params(schedule, f)[1]


def noised_gp_conditional(model, context, observed_levels, query_level_f,
                          query_xs, correlated_noise=False):
    """Exact Gaussian conditional of level-f values at query_xs given the
    context (noiseless level-0 observations) and noisier observed levels.
    """
    cx, cy = context
    cx = np.asarray(cx, dtype=np.float64).reshape(-1)
    cy = np.asarray(cy, dtype=np.float64).reshape(-1)
    query_xs = np.asarray(query_xs, dtype=np.float64).reshape(-1)
    for level in observed_levels:
        if level.f <= query_level_f:
            raise ValueError("observed levels must be noisier than the query level")
    obs_x = [cx] + [lv.x for lv in observed_levels]
    obs_y = [cy] + [lv.y for lv in observed_levels]
    obs_f = [np.zeros(cx.size, dtype=np.int64)] + [
        np.full(lv.x.size, lv.f, dtype=np.int64) for lv in observed_levels
    ]
    xs = np.concatenate([query_xs] + obs_x)
    fs = np.concatenate([np.full(query_xs.size, query_level_f, dtype=np.int64)] + obs_f)
    cov = _joint_cov(model, xs, fs, correlated_noise=correlated_noise)
    m = query_xs.size
    k_qq = cov[:m, :m]
    k_qo = cov[:m, m:]
    k_oo = cov[m:, m:]
    y_obs = np.concatenate(obs_y)
    if y_obs.size == 0:
        mean = np.zeros(m)
        post = k_qq
    else:
        chol = chol_with_jitter(k_oo)
        alpha = np.linalg.solve(chol, y_obs)
        v = np.linalg.solve(chol, k_qo.T)
        mean = v.T @ alpha
        post = k_qq - v.T @ v
    post = 0.5 * (post + post.T)
    diag = np.maximum(np.diag(post).copy(), 1e-12)
    return GaussianPredictive(mean=mean, diag_var=diag, cov=post)


def oracle_joint_loglik(model, task):
    """Exact joint log density of the targets under the noiseless GP posterior."""
    pred = noised_gp_conditional(
        model, (task.context_x, task.context_y), [], 0, task.target_x)
    return mvn_loglik(task.target_y, pred.mean, pred.cov)


class OracleDenoiser:
    """Drop-in replacement for the neural model in the deployment pipeline.

    Exposes the layer_predict contract backed by noised_gp_conditional, so
    danp_sample_aux / danp_joint_loglik run unchanged against exact
    conditionals.
    """

    def __init__(self, model, input_range=(-2.0, 2.0), correlated_noise=False):
        self.model = model
        self.input_range = input_range
        self.correlated_noise = correlated_noise

    @property
    def schedule(self):
        return self.model.schedule

    def layer_predict(self, context, aux_levels, f, query_xs, counter=None):
        if counter is not None:
            counter.add(1)
        return noised_gp_conditional(
            self.model, context, aux_levels, f, query_xs,
            correlated_noise=self.correlated_noise,
        )
