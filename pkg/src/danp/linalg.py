"""Small dense-Gaussian helpers shared by the data generators and the oracle."""

import numpy as np
from scipy.special import logsumexp

JITTER_START = 1e-10
JITTER_MAX = 1e-6

LOG_2PI = float(np.log(2.0 * np.pi))


class NumericalError(RuntimeError):
    """A linear-algebra or objective evaluation failed numerically."""


def chol_with_jitter(cov, start=JITTER_START, maximum=JITTER_MAX):
    """Lower Cholesky factor of `cov`, escalating diagonal jitter x10 on failure."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.size == 0:
        return np.zeros_like(cov)
    jitter = start
    eye = np.eye(cov.shape[0])
    while True:
        try:
            return np.linalg.cholesky(cov + jitter * eye)
        except np.linalg.LinAlgError:
            if jitter >= maximum:
                raise NumericalError(
                    f"Cholesky failed at maximum jitter {maximum:g}"
                ) from None
            jitter *= 10.0


def mvn_loglik(y, mean, cov):
    """Dense multivariate normal log density (with jitter-protected Cholesky)."""
    y = np.asarray(y, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    n = y.size
    if n == 0:
        return 0.0
    chol = chol_with_jitter(cov)
    alpha = np.linalg.solve(chol, y - mean)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * (n * LOG_2PI + logdet + alpha @ alpha))


def logmeanexp(values):
    """log(mean(exp(values))), stable."""
    values = np.asarray(values, dtype=np.float64)
    return float(logsumexp(values) - np.log(values.size))
