"""Dense real linear algebra used as ground truth by the rest of the package.

Matrices are plain ``float64`` numpy arrays. Everything here is a pure
function of its inputs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
GS_DROP_TOL = 1e-10


class DimensionError(ValueError):
    pass


class SymmetryError(ValueError):
    pass


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and copy ``a`` into a finite 2-D float64 array."""
    m = np.array(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def _require_square(a: np.ndarray, name: str) -> None:
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {a.shape}")


class EigenDecomposition:
    """Eigenvalues (descending) with matching orthonormal eigenvector columns."""

    def __init__(self, eigenvalues: np.ndarray, eigenvectors: np.ndarray):
        self.eigenvalues = eigenvalues
        self.eigenvectors = eigenvectors

    def top(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return self.eigenvalues[:k], self.eigenvectors[:, :k]

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T

    def __iter__(self):
        yield self.eigenvalues
        yield self.eigenvectors


def sym_eigen(a, sym_tol: float = 1e-12) -> EigenDecomposition:
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps over all (p, q) pairs until the off-diagonal Frobenius norm drops
    below ``JACOBI_TOL`` times the Frobenius norm of the input. Eigenvalues are
    returned in non-increasing order (stable w.r.t. the diagonal position for
    exact ties) and each eigenvector is flipped so that its first entry of
    largest magnitude is non-negative.
    """
    a = as_matrix(a)
    _require_square(a, "sym_eigen input")
    scale = max(np.max(np.abs(a)), 1.0) if a.size else 1.0
    if not np.allclose(a, a.T, rtol=0.0, atol=sym_tol * scale):
        raise SymmetryError("sym_eigen input is not symmetric")
    n = a.shape[0]
    work = 0.5 * (a + a.T)
    v = np.eye(n)
    target = JACOBI_TOL * np.linalg.norm(work)

    for _ in range(JACOBI_MAX_SWEEPS):
        off = np.linalg.norm(work - np.diag(np.diag(work)))
        if off <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = work[p, q]
                if apq == 0.0:
                    continue
                diff = work[q, q] - work[p, p]
                if abs(apq) < 1e-150 * abs(diff):
                    # theta^2 would overflow; t ~ 1 / (2 theta)
                    t = apq / diff
                else:
                    theta = diff / (2.0 * apq)
                    t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = work[:, p].copy()
                col_q = work[:, q].copy()
                work[:, p] = c * col_p - s * col_q
                work[:, q] = s * col_p + c * col_q
                row_p = work[p, :].copy()
                row_q = work[q, :].copy()
                work[p, :] = c * row_p - s * row_q
                work[q, :] = s * row_p + c * row_q
                work[p, q] = work[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq

    w = np.diag(work).copy()
    order = np.argsort(-w, kind="stable")
    w = w[order]
    v = v[:, order]
    for j in range(n):
        k = int(np.argmax(np.abs(v[:, j])))
        if v[k, j] < 0:
            v[:, j] = -v[:, j]
    return EigenDecomposition(w, v)


def gram_schmidt(columns, drop_tol: float = GS_DROP_TOL) -> tuple[np.ndarray, list[int]]:
    """Orthonormalize columns left to right (modified Gram-Schmidt, two passes).

    Columns whose residual norm falls below ``drop_tol`` are returned as zero
    columns; their indices are reported in the second return value.
    """
    a = as_matrix(columns, "columns")
    rows, cols = a.shape
    if rows < cols:
        raise DimensionError(f"gram_schmidt needs rows >= cols, got {a.shape}")
    q = np.zeros_like(a)
    dropped = []
    for j in range(cols):
        r = a[:, j].copy()
        for _ in range(2):
            for k in range(j):
                r -= (q[:, k] @ r) * q[:, k]
        norm = np.linalg.norm(r)
        if norm < drop_tol:
            dropped.append(j)
            continue
        q[:, j] = r / norm
    return q, dropped


def lower_triangular(a) -> np.ndarray:
    """Zero every entry above the diagonal."""
    a = as_matrix(a)
    _require_square(a, "lower_triangular input")
    return np.tril(a)


def _check_orthonormal(u: np.ndarray, name: str, tol: float = 1e-8) -> None:
    gram = u.T @ u
    if np.max(np.abs(gram - np.eye(u.shape[1])), initial=0.0) > tol:
        raise ValueError(f"{name} does not have orthonormal columns")


def principal_angles(u, v) -> np.ndarray:
    """Principal angles (ascending, radians) between two column spaces.

    Cosines come from the singular values of ``u.T @ v``; for small angles the
    sines of the residual ``v - u u.T v`` are used instead, since arccos loses
    all precision near 1.
    """
    u = as_matrix(u, "u")
    v = as_matrix(v, "v")
    if u.shape[0] != v.shape[0]:
        raise DimensionError("principal_angles: row counts differ")
    _check_orthonormal(u, "u")
    _check_orthonormal(v, "v")
    if u.shape[1] < v.shape[1]:
        u, v = v, u
    k = v.shape[1]
    if k == 0:
        return np.zeros(0)
    cos = np.clip(np.linalg.svd(u.T @ v, compute_uv=False), -1.0, 1.0)
    cos = np.sort(cos)[::-1][:k]
    sin = np.clip(np.linalg.svd(v - u @ (u.T @ v), compute_uv=False), -1.0, 1.0)
    sin = np.sort(sin)[:k]
    angles = np.where(cos**2 < 0.5, np.arccos(cos), np.arcsin(sin))
    return np.sort(angles)


def orthonormal_basis(a, rel_tol: float = 1e-8) -> np.ndarray:
    """Orthonormal basis of the column space, dropping directions below ``rel_tol``."""
    a = as_matrix(a)
    if a.size == 0:
        return np.zeros((a.shape[0], 0))
    u, s, _ = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((a.shape[0], 0))
    return u[:, s > rel_tol * s[0]]


def format_matrix(a) -> str:
    a = as_matrix(a)
    lines = [f"{a.shape[0]} {a.shape[1]}"]
    lines += [" ".join(format(x, ".17g") for x in row) for row in a]
    return "\n".join(lines) + "\n"


def parse_matrix(text: str) -> np.ndarray:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    rows, cols = (int(t) for t in lines[0].split())
    body = lines[1:]
    if len(body) != rows:
        raise DimensionError(f"expected {rows} rows, found {len(body)}")
    out = np.empty((rows, cols))
    for i, ln in enumerate(body):
        vals = ln.split()
        if len(vals) != cols:
            raise DimensionError(f"row {i} has {len(vals)} entries, expected {cols}")
        out[i] = [float(x) for x in vals]
    return as_matrix(out)


def save_matrix(path, a) -> None:
    Path(path).write_text(format_matrix(a))


def load_matrix(path) -> np.ndarray:
    return parse_matrix(Path(path).read_text())
