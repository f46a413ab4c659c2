"""Loss values and parameter-gradient rules.

Sign convention: every loss here is *minimized*. The objectives are usually
written as maximizations; the sign is flipped once, in this module, and
nowhere else.

Batches carry raw features and per-row weights. Uniform weights give
minibatch means; weights equal to joint / marginal probabilities give exact
expectations over a finite support (see :func:`exhaustive_batches`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import FeatureTable, JointDistribution, build_m_matrix
from .divergences import AlphaDivergence
from .encoder import EmbeddingModel, GradientBuffer, backward, forward
from .linalg import lower_triangular

SCALE_LR = 0.1
SCALE_MOMENTUM = 0.9


def _uniform_or(w, n: int) -> np.ndarray:
    if n == 0:
        raise ValueError("empty batch")
    if w is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError("weights must have one entry per row")
    return w


@dataclass
class PairBatch:
    """Positive pairs: row ``k`` of ``x`` and ``xp`` are two views of one sample."""

    x: np.ndarray
    xp: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.xp = np.atleast_2d(np.asarray(self.xp, dtype=np.float64))
        if self.x.shape[0] != self.xp.shape[0]:
            raise ValueError("pair batch views have different lengths")
        self.weights = _uniform_or(self.weights, self.x.shape[0])


@dataclass
class MarginalBatch:
    """Independent draws from each marginal; every cross pair is a negative."""

    x: np.ndarray
    xp: np.ndarray
    wx: np.ndarray | None = None
    wxp: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.xp = np.atleast_2d(np.asarray(self.xp, dtype=np.float64))
        self.wx = _uniform_or(self.wx, self.x.shape[0])
        self.wxp = _uniform_or(self.wxp, self.xp.shape[0])


def exhaustive_batches(joint: JointDistribution, features: FeatureTable) -> tuple[PairBatch, MarginalBatch]:
    """Every support cell weighted by its probability: batch means become exact expectations."""
    f = features.features
    i, j = np.nonzero(joint.joint > 0)
    pairs = PairBatch(f[i], f[j], joint.joint[i, j])
    marg = MarginalBatch(f, f, joint.marginal_x, joint.marginal_xp)
    return pairs, marg


@dataclass
class AuxiliaryState:
    lam: np.ndarray
    beta: float = 0.8

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        if self.lam.ndim != 2 or self.lam.shape[0] != self.lam.shape[1]:
            raise ValueError("auxiliary matrix must be square")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")

    @classmethod
    def zeros(cls, dim: int, beta: float = 0.8) -> "AuxiliaryState":
        return cls(np.zeros((dim, dim)), beta)

    @property
    def dim(self) -> int:
        return self.lam.shape[0]


@dataclass
class MincConfig:
    divergence: AlphaDivergence = field(default_factory=AlphaDivergence)
    inner_scale: float = 1.0
    use_lt: bool = True
    use_target: bool = True
    beta: float = 0.8
    gamma: float = 0.996
    learn_scale: bool = False

    def __post_init__(self):
        if isinstance(self.divergence, (int, float)):
            self.divergence = AlphaDivergence(float(self.divergence))
        if self.inner_scale <= 0:
            raise ValueError("inner_scale must be > 0")
        if not (0.0 <= self.beta < 1.0 and 0.0 <= self.gamma < 1.0):
            raise ValueError("beta and gamma must lie in [0, 1)")


def update_lambda(state: AuxiliaryState, embeddings, weights=None) -> AuxiliaryState:
    """lam <- beta * lam + (1 - beta) * E_batch[phi phi^T]."""
    z = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if z.shape[1] != state.dim:
        raise ValueError(f"embedding dim {z.shape[1]} does not match auxiliary dim {state.dim}")
    w = _uniform_or(weights, z.shape[0])
    moment = (z * w[:, None]).T @ z
    moment = 0.5 * (moment + moment.T)
    return AuxiliaryState(state.beta * state.lam + (1.0 - state.beta) * moment, state.beta)


def second_moment(z, weights=None) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    w = _uniform_or(weights, z.shape[0])
    m = (z * w[:, None]).T @ z
    return 0.5 * (m + m.T)


# --- spectral contrastive -------------------------------------------------


def spectral_contrastive_loss(za, zb, w, ma, mb, wa=None, wb=None) -> float:
    """-2 E_joint[za . zb] + E_{marginals}[(ma . mb)^2] on embedding arrays."""
    za, zb, ma, mb = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (za, zb, ma, mb))
    if za.shape[1] != ma.shape[1]:
        raise ValueError("inconsistent embedding dimension")
    w = _uniform_or(w, za.shape[0])
    wa = _uniform_or(wa, ma.shape[0])
    wb = _uniform_or(wb, mb.shape[0])
    sim = ma @ mb.T
    return float(-2.0 * w @ np.sum(za * zb, axis=1) + wa @ (sim**2) @ wb)


def _spectral_cotangents(za, zb, w, ma, mb, wa, wb):
    sim = ma @ mb.T
    pw = wa[:, None] * wb[None, :] * sim
    return (
        -2.0 * w[:, None] * zb,
        -2.0 * w[:, None] * za,
        2.0 * pw @ mb,
        2.0 * pw.T @ ma,
    )


def spectral_loss_and_grad(
    model: EmbeddingModel, batch: PairBatch, marginals: MarginalBatch, branch: str = "both"
) -> tuple[float, GradientBuffer]:
    """Spectral contrastive loss with its exact parameter gradient.

    ``branch`` restricts the gradient to the contributions flowing through the
    first view (``"x"``), the second view (``"xp"``) or both.
    """
    if branch not in ("both", "x", "xp"):
        raise ValueError("branch must be 'both', 'x' or 'xp'")
    za, ta = forward(model, batch.x)
    zb, tb = forward(model, batch.xp)
    ma, tma = forward(model, marginals.x)
    mb, tmb = forward(model, marginals.xp)
    loss = spectral_contrastive_loss(za, zb, batch.weights, ma, mb, marginals.wx, marginals.wxp)
    ga, gb, gma, gmb = _spectral_cotangents(za, zb, batch.weights, ma, mb, marginals.wx, marginals.wxp)
    grads = GradientBuffer.zeros_like(model)
    if branch in ("both", "x"):
        grads = grads + backward(model, ta, ga) + backward(model, tma, gma)
    if branch in ("both", "xp"):
        grads = grads + backward(model, tb, gb) + backward(model, tmb, gmb)
    return loss, grads


def spectral_gradient(model, batch, marginals, branch: str = "both") -> GradientBuffer:
    return spectral_loss_and_grad(model, batch, marginals, branch)[1]


def matrix_factorization_residual(joint: JointDistribution, phi, phi_p=None) -> float:
    """||M - F F'^T||_F^2 with F rows sqrt(p(x_i)) phi(x_i).

    ``phi`` is the embedding table over the first support; ``phi_p`` over the
    second (defaults to ``phi``).
    """
    phi = np.asarray(phi, dtype=np.float64)
    phi_p = phi if phi_p is None else np.asarray(phi_p, dtype=np.float64)
    f = np.sqrt(joint.marginal_x)[:, None] * phi
    fp = np.sqrt(joint.marginal_xp)[:, None] * phi_p
    r = build_m_matrix(joint) - f @ fp.T
    return float(np.sum(r * r))


# --- MINC -----------------------------------------------------------------


def _quadratic_matrix(cfg: MincConfig, state: AuxiliaryState) -> np.ndarray:
    return lower_triangular(state.lam) if cfg.use_lt else state.lam


def _branch_embeddings(cfg: MincConfig, online: EmbeddingModel, target: EmbeddingModel | None, x):
    src = target if (cfg.use_target and target is not None) else online
    return forward(src, x)[0]


def minc_terms(cfg: MincConfig, zt, zp, lam_q, w, scale: float | None = None):
    """MINC loss and its cotangent on the second-view embeddings.

    The quadratic term's cotangent follows the Hebbian rule
    ``phi(x')^T LT[lam] d phi(x')``, i.e. the row ``zp @ lam_q``. That is the
    exact gradient of the reported value only when ``lam_q`` is symmetric.
    Returns ``(loss, cotangent, d_loss/d_scale)``.
    """
    s = cfg.inner_scale if scale is None else scale
    div = cfg.divergence
    dots = np.sum(zt * zp, axis=1)
    u = s * dots
    quad = np.einsum("ni,ij,nj->n", zp, lam_q, zp)
    loss = float(-w @ div.t(u) + 0.5 * s * s * (w @ quad))
    dt = div.dt(u)
    cot = -(w * dt * s)[:, None] * zt + (s * s) * w[:, None] * (zp @ lam_q)
    d_scale = float(-w @ (dt * dots) + s * (w @ quad))
    return loss, cot, d_scale


def minc_loss_and_grad(
    cfg: MincConfig,
    online: EmbeddingModel,
    target: EmbeddingModel | None,
    state: AuxiliaryState,
    batch: PairBatch,
    scale: float | None = None,
) -> tuple[float, GradientBuffer]:
    """MINC loss with stop-gradient on the target branch and on the auxiliary matrix.

    Gradients flow only through the second view ``phi(x')``. Without a target
    network the first view is embedded by ``online`` but still treated as a
    constant.
    """
    if state.dim != online.embedding_dim:
        raise ValueError("auxiliary matrix does not match the embedding dimension")
    zt = _branch_embeddings(cfg, online, target, batch.x)
    zp, tape = forward(online, batch.xp)
    loss, cot, _ = minc_terms(cfg, zt, zp, _quadratic_matrix(cfg, state), batch.weights, scale)
    return loss, backward(online, tape, cot)


def minc_surrogate(cfg, online, state, batch, frozen_zt, frozen_zp, scale=None) -> float:
    """Scalar whose exact gradient at ``frozen_zp = phi(x')`` is the MINC update.

    ``frozen_zt`` are the first-view embeddings (stop-gradient branch). The
    left factor of the quadratic form is held fixed at ``frozen_zp``. Used as
    the finite-difference reference for the Hebbian rule, which is not the
    gradient of any scalar when ``LT[lam]`` is non-symmetric.
    """
    s = cfg.inner_scale if scale is None else scale
    zp = forward(online, batch.xp)[0]
    lam_q = _quadratic_matrix(cfg, state)
    w = batch.weights
    u = s * np.sum(frozen_zt * zp, axis=1)
    cross = np.einsum("ni,ij,nj->n", frozen_zp, lam_q, zp)
    return float(-w @ cfg.divergence.t(u) + s * s * (w @ cross))


# --- L2 matching metric ------------------------------------------------------


def l2_metric_terms(zt, zp, lam, w):
    lam = np.asarray(lam, dtype=np.float64)
    proj = zp @ lam.T  # rows lam @ zp
    loss = float(-2.0 * w @ np.sum(zt * proj, axis=1) + w @ np.sum(proj * proj, axis=1))
    cot = w[:, None] * (-2.0 * zt @ lam + 2.0 * proj @ lam)
    return loss, cot


def l2_metric_loss_and_grad(online, target, state: AuxiliaryState, batch: PairBatch, use_target: bool = True):
    """-2 E[phi_t(x)^T lam phi(x')] + E[phi(x')^T lam^T lam phi(x')] and its gradient."""
    zt = forward(target if (use_target and target is not None) else online, batch.x)[0]
    zp, tape = forward(online, batch.xp)
    loss, cot = l2_metric_terms(zt, zp, state.lam, batch.weights)
    return loss, backward(online, tape, cot)


def l2_metric_loss(online, target, state, batch, use_target: bool = True) -> float:
    return l2_metric_loss_and_grad(online, target, state, batch, use_target)[0]


# --- linear BYOL predictor ----------------------------------------------------


def linear_byol_terms(a, zt, zp, w):
    a = np.asarray(a, dtype=np.float64)
    resid = zp @ a.T - zt
    loss = float(w @ np.sum(resid * resid, axis=1))
    grad_a = 2.0 * (resid * w[:, None]).T @ zp
    cot = 2.0 * w[:, None] * (resid @ a)
    return loss, grad_a, cot


def linear_byol_loss_and_grad(a, online, target, batch: PairBatch, use_target: bool = True):
    """E||A phi(x') - sg(phi_t(x))||^2. Returns ``(loss, grad wrt A, grads wrt online)``."""
    a = np.asarray(a, dtype=np.float64)
    d = online.embedding_dim
    if a.shape != (d, d):
        raise ValueError(f"predictor must be {d}x{d}")
    zt = forward(target if (use_target and target is not None) else online, batch.x)[0]
    zp, tape = forward(online, batch.xp)
    loss, grad_a, cot = linear_byol_terms(a, zt, zp, batch.weights)
    return loss, grad_a, backward(online, tape, cot)


def linear_byol_predictor_step(a, online, target, batch: PairBatch, step: float) -> np.ndarray:
    """One gradient step on the linear predictor."""
    _, grad_a, _ = linear_byol_loss_and_grad(a, online, target, batch)
    return np.asarray(a, dtype=np.float64) - step * grad_a
