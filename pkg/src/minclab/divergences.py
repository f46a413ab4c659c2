"""The alpha-divergence family: generator, convex conjugate and the
similarity-to-critic map that turns the conjugate term into a squared
inner product.

All evaluators broadcast over numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

# |u| is clamped below by this inside the derivative of t_alpha; for alpha < 2
# the derivative blows up at u = 0.
DERIV_CLAMP = 1e-8


@dataclass(frozen=True)
class AlphaDivergence:
    alpha: float = 2.0

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha <= 1.0:
            raise ValueError(f"alpha must be > 1, got {self.alpha}")

    def f(self, y):
        return f_alpha(self, y)

    def fstar(self, t):
        return fstar_alpha(self, t)

    def t(self, u):
        return t_alpha(self, u)

    def dt(self, u):
        return t_alpha_deriv(self, u)


def f_alpha(div: AlphaDivergence, y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0):
        raise ValueError("f_alpha is defined for y >= 0 only")
    a = div.alpha
    return ((y**a - 1.0) - a * (y - 1.0)) / (a * (a - 1.0))


def f_alpha_deriv(div: AlphaDivergence, y):
    """f'(y) = (y^(a-1) - 1) / (a - 1); the optimal critic value at ratio y."""
    y = np.asarray(y, dtype=np.float64)
    a = div.alpha
    return (y ** (a - 1.0) - 1.0) / (a - 1.0)


def fstar_alpha(div: AlphaDivergence, t):
    t = np.asarray(t, dtype=np.float64)
    a = div.alpha
    return np.abs(1.0 + (a - 1.0) * t) ** (a / (a - 1.0)) / a - 1.0 / a


def t_alpha(div: AlphaDivergence, u):
    """Critic as a function of similarity ``u``.

    Implemented literally, including ``sign(u)``, so negative similarities keep
    their sign under the fractional power when alpha != 2.
    """
    u = np.asarray(u, dtype=np.float64)
    a = div.alpha
    k = np.sqrt(a / 2.0)
    e = 2.0 * (a - 1.0) / a
    return np.sign(u) * np.abs(k * u) ** e / (a - 1.0) - 1.0 / (a - 1.0)


def t_alpha_deriv(div: AlphaDivergence, u):
    u = np.asarray(u, dtype=np.float64)
    a = div.alpha
    if a == 2.0:
        return np.ones_like(u)
    k = np.sqrt(a / 2.0)
    e = 2.0 * (a - 1.0) / a
    mag = np.maximum(np.abs(u), DERIV_CLAMP)
    return (2.0 * k / a) * (k * mag) ** (e - 1.0)


def exact_f_mi(div: AlphaDivergence, joint) -> float:
    """f-mutual information of a finite joint; cells with p(x)p(x') = 0 are skipped."""
    p = joint.joint
    prod = np.outer(joint.marginal_x, joint.marginal_xp)
    mask = prod > 0
    ratio = p[mask] / prod[mask]
    return float(np.sum(f_alpha(div, ratio) * prod[mask]))


def variational_mi_bound(
    div: AlphaDivergence,
    joint_samples,
    marginal_samples,
    critic: Callable,
    joint_weights=None,
    marginal_weights=None,
) -> float:
    """E_joint[critic] - E_marginals[fstar(critic)] over sample lists.

    Samples are sequences of (x, x') pairs. Optional weights turn the means into
    weighted sums, so exhaustive enumeration can stand in for sampling.
    """
    if len(joint_samples) == 0 or len(marginal_samples) == 0:
        raise ValueError("sample lists must be non-empty")
    tj = np.array([critic(x, xp) for x, xp in joint_samples], dtype=np.float64)
    tm = np.array([critic(x, xp) for x, xp in marginal_samples], dtype=np.float64)
    wj = _weights(joint_weights, len(tj))
    wm = _weights(marginal_weights, len(tm))
    return float(wj @ tj - wm @ fstar_alpha(div, tm))


def _weights(w, n):
    if w is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError("weights must match the number of samples")
    return w
