"""Kraskov-Stoegbauer-Grassberger mutual information estimate (algorithm 1).

For each point the distance ``eps`` to its k-th neighbour in the joint space
(max-norm) is found; the marginal counts are the numbers of other points
strictly closer than ``eps`` in each marginal space. Then

    I = psi(k) + psi(N) - < psi(n_x + 1) + psi(n_y + 1) >

in nats. Neighbour search uses ``scipy.spatial.cKDTree``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma

from .errors import EstimationError

MIN_SAMPLES = 50


@dataclass(frozen=True)
class MIEstimate:
    value: float
    raw: float
    estimator: str
    k: int
    n: int


def _as_matrix(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise EstimationError(f"{name} must be [N, dims], got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise EstimationError(f"{name} contains non-finite values")
    return a


def _strict_counts(points, radii):
    tree = cKDTree(points)
    below = np.nextafter(radii, 0)
    counts = tree.query_ball_point(points, below, p=np.inf, return_length=True) - 1
    return np.where(radii > 0, counts, 0)


def local_terms(x, y, k=3):
    """Per-sample KSG contributions; their mean is the estimate."""
    x = _as_matrix(x, "x")
    y = _as_matrix(y, "y")
    n = x.shape[0]
    if y.shape[0] != n:
        raise EstimationError(f"x has {n} samples but y has {y.shape[0]}")
    if n < MIN_SAMPLES:
        raise EstimationError(f"need at least {MIN_SAMPLES} samples, got {n}")
    if not 1 <= k < n:
        raise EstimationError(f"k must lie in [1, {n}), got {k}")
    for name, a in (("x", x), ("y", y)):
        if np.all(a == a[0]):
            raise EstimationError(f"{name} is constant across samples")
    joint = np.hstack([x, y])
    dist, _ = cKDTree(joint).query(joint, k=k + 1, p=np.inf)
    eps = dist[:, k]
    nx = _strict_counts(x, eps)
    ny = _strict_counts(y, eps)
    return digamma(k) + digamma(n) - digamma(nx + 1) - digamma(ny + 1)


def estimate_mi(x, y, k=3):
    """KSG estimate in nats, clamped at zero (``raw`` keeps the signed value)."""
    terms = local_terms(x, y, k)
    raw = float(np.mean(terms))
    return MIEstimate(max(raw, 0.0), raw, "ksg1", k, len(terms))


def gaussian_mi(rho):
    """Closed form for a bivariate Gaussian with correlation ``rho``."""
    return -0.5 * np.log(1 - rho**2)
