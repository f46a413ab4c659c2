"""Exact functional power iteration on a finite symmetric joint.

Each step works on the full embedding table, so every expectation is an exact
finite sum. This is the convergence reference for the stochastic MINC updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import JointDistribution, build_m_matrix
from .linalg import gram_schmidt, orthonormal_basis, principal_angles, sym_eigen

PINV_CUTOFF = 1e-10


@dataclass
class PowerIterState:
    phi_table: np.ndarray  # (N, d), phi_t(x) per support point
    lam: np.ndarray  # (d, d)
    iteration: int = 0
    orth_residual: float = float("nan")
    reseeded: tuple[int, ...] = ()

    @classmethod
    def random(cls, joint: JointDistribution, dim: int, seed: int) -> "PowerIterState":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(size=(joint.support_size_x, dim)), np.zeros((dim, dim)))


def weighted_factor(joint: JointDistribution, phi) -> np.ndarray:
    """F = diag(sqrt(p)) Phi."""
    return np.sqrt(joint.marginal)[:, None] * np.asarray(phi, dtype=np.float64)


def _eigen_pinv(lam: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (lam + lam.T))
    top = np.max(np.abs(w), initial=0.0)
    inv = np.zeros_like(w)
    keep = np.abs(w) > PINV_CUTOFF * top if top > 0 else np.zeros_like(w, dtype=bool)
    inv[keep] = 1.0 / w[keep]
    return (v * inv) @ v.T


def exact_power_iteration_step(
    joint: JointDistribution, state: PowerIterState, rng: np.random.Generator | None = None
) -> PowerIterState:
    """One exact iteration: moment matrix, fixed-point solve, Gram-Schmidt.

    Dead columns after orthogonalization are re-seeded from ``rng`` (default:
    seeded by the iteration count) and orthogonalized again.
    """
    if not joint.is_symmetric:
        raise ValueError("exact power iteration needs a symmetric joint")
    p = joint.marginal
    phi = np.asarray(state.phi_table, dtype=np.float64)
    lam_next = (phi * p[:, None]).T @ phi
    f = weighted_factor(joint, phi)
    rhs = build_m_matrix(joint).T @ f  # rows: sum_x p(x, x') phi(x) / sqrt(p(x'))
    g = rhs @ _eigen_pinv(lam_next)  # rows: sqrt(p(x')) psi(x')
    q, dropped = gram_schmidt(g)
    reseeded = tuple(dropped)
    if dropped:
        rng = rng if rng is not None else np.random.default_rng(state.iteration)
        g = q.copy()
        g[:, dropped] = rng.normal(size=(g.shape[0], len(dropped)))
        q, _ = gram_schmidt(g)
    phi_next = q / np.sqrt(p)[:, None]
    gram = q.T @ q
    orth = float(np.linalg.norm(gram - np.eye(gram.shape[0])))
    return PowerIterState(phi_next, lam_next, state.iteration + 1, orth, reseeded)


def rayleigh_values(joint: JointDistribution, phi) -> np.ndarray:
    f = weighted_factor(joint, phi)
    return np.einsum("ni,nm,mi->i", f, build_m_matrix(joint), f) / np.maximum(np.sum(f * f, axis=0), 1e-300)


def ritz_pairs(joint: JointDistribution, phi) -> tuple[np.ndarray, np.ndarray]:
    """Rayleigh-Ritz on span(diag(sqrt p) phi).

    Returns descending Ritz values and the matching embedding table (columns
    p-orthonormal). Subspace iteration only fixes the span; inside an invariant
    subspace this rotation recovers individual eigenvectors.
    """
    sp = np.sqrt(joint.marginal)[:, None]
    q, _ = gram_schmidt(weighted_factor(joint, phi))
    m = build_m_matrix(joint)
    h = q.T @ m @ q
    vals, vecs = sym_eigen(0.5 * (h + h.T))
    return vals, (q @ vecs) / sp


def eigen_scaled_table(joint: JointDistribution, phi) -> np.ndarray:
    """Embedding table with F = eigenvectors * sqrt(eigenvalues) on the span of ``phi``."""
    vals, table = ritz_pairs(joint, phi)
    return table * np.sqrt(np.clip(vals, 0.0, None))[None, :]


def fixed_point_residuals(joint: JointDistribution, phi) -> tuple[float, float]:
    """(orthogonality residual, eigen fixed-point residual) of an embedding table.

    With ``L = sum_x p(x) phi phi^T`` and ``D`` its diagonal part, returns
    ``||L - D||_F`` and ``||M F - F D||_F`` where ``F = diag(sqrt p) phi``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    p = joint.marginal
    moment = (phi * p[:, None]).T @ phi
    diag = np.diag(np.diag(moment))
    f = weighted_factor(joint, phi)
    orth = float(np.linalg.norm(moment - diag))
    eig = float(np.linalg.norm(build_m_matrix(joint) @ f - f @ diag))
    return orth, eig


def top_eigenspace(joint: JointDistribution, d: int) -> tuple[np.ndarray, np.ndarray]:
    m = build_m_matrix(joint)
    dec = sym_eigen(0.5 * (m + m.T))
    return dec.top(d)


def alignment_angles(joint: JointDistribution, phi, reference: np.ndarray) -> np.ndarray:
    """Principal angles of each reference direction to span(diag(sqrt p) phi).

    If the embedding span has fewer dimensions than the reference, the missing
    angles are reported as pi/2.
    """
    basis = orthonormal_basis(weighted_factor(joint, phi))
    k = reference.shape[1]
    if basis.shape[1] == 0:
        return np.full(k, np.pi / 2)
    ang = principal_angles(reference, basis)
    if ang.size < k:
        ang = np.concatenate([ang, np.full(k - ang.size, np.pi / 2)])
    return ang


@dataclass
class OracleResult:
    state: PowerIterState
    converged: bool
    iterations: int
    max_angle: float
    history: list[float]


def run_power_iteration(
    joint: JointDistribution,
    dim: int,
    seed: int = 0,
    max_iter: int = 500,
    tol: float = 1e-9,
    reference_dim: int | None = None,
) -> OracleResult:
    """Iterate to convergence, tracking the max principal angle to the exact top subspace.

    Converged means the subspace stopped moving: the largest principal angle
    between successive iterates is at most ``tol``.
    """
    k = dim if reference_dim is None else reference_dim
    _, ref = top_eigenspace(joint, k)
    rng = np.random.default_rng(seed)
    state = PowerIterState.random(joint, dim, seed)
    history = []
    prev = None
    converged = False
    for _ in range(max_iter):
        state = exact_power_iteration_step(joint, state, rng)
        f = orthonormal_basis(weighted_factor(joint, state.phi_table))
        history.append(float(np.max(alignment_angles(joint, state.phi_table, ref))))
        if prev is not None and prev.shape == f.shape:
            move = float(np.max(principal_angles(prev, f), initial=0.0))
            if move <= tol:
                converged = True
                break
        prev = f
    return OracleResult(state, converged, state.iteration, history[-1], history)
