"""Representation diagnostics: linear probe, subspace alignment, collapse and
estimator-variance measurements."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dataset import JointDistribution, sample_pairs
from .linalg import lower_triangular
from .power_iteration import alignment_angles, top_eigenspace

PROBE_GRAD_TOL = 1e-6
PROBE_MAX_ITER = 10_000


@dataclass
class ProbeResult:
    train_accuracy: float
    holdout_accuracy: float
    num_classes: int

    def to_dict(self) -> dict:
        return asdict(self)


def stratified_split(labels, seed: int, holdout_frac: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    train, hold = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_hold = max(1, int(round(holdout_frac * idx.size)))
        hold.append(idx[:n_hold])
        train.append(idx[n_hold:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(hold))


def _whitener(x: np.ndarray, rel_tol: float = 1e-10):
    mu = x.mean(axis=0)
    cov = np.cov(x - mu, rowvar=False, bias=True).reshape(x.shape[1], x.shape[1])
    w, v = np.linalg.eigh(cov)
    top = np.max(w, initial=0.0)
    keep = w > rel_tol * top if top > 0 else np.zeros_like(w, dtype=bool)
    proj = v[:, keep] / np.sqrt(w[keep])
    return mu, proj


def fit_softmax(x: np.ndarray, y: np.ndarray, num_classes: int) -> tuple[np.ndarray, int]:
    """Unregularized multinomial logistic regression by full-batch gradient descent.

    Step size is 1/L for the smoothness bound L = ||X~||_2^2 / n of the
    bias-augmented design. Stops at gradient norm <= PROBE_GRAD_TOL or after
    PROBE_MAX_ITER steps. Returns the (features+1) x classes weights.
    """
    n = x.shape[0]
    xb = np.hstack([x, np.ones((n, 1))])
    onehot = np.eye(num_classes)[y]
    lr = n / max(np.linalg.norm(xb, 2) ** 2, 1e-12)
    theta = np.zeros((xb.shape[1], num_classes))
    it = 0
    for it in range(1, PROBE_MAX_ITER + 1):
        logits = xb @ theta
        logits -= logits.max(axis=1, keepdims=True)
        prob = np.exp(logits)
        prob /= prob.sum(axis=1, keepdims=True)
        grad = xb.T @ (prob - onehot) / n
        if np.linalg.norm(grad) <= PROBE_GRAD_TOL:
            break
        theta -= lr * grad
    return theta, it


def linear_probe(embeddings, labels, split_seed: int = 0) -> ProbeResult:
    """Linear classifier on frozen embeddings with a stratified 80/20 split.

    Embeddings are whitened on the training split first, which makes the
    result invariant to invertible affine maps of the representation.
    """
    z = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    y_raw = np.asarray(labels)
    classes, y = np.unique(y_raw, return_inverse=True)
    counts = np.bincount(y)
    if classes.size < 2 or np.any(counts < 4):
        raise ValueError("linear_probe needs >= 2 classes with >= 4 points each")
    tr, ho = stratified_split(y, split_seed)
    mu, proj = _whitener(z[tr])
    feats = (z - mu) @ proj
    theta, _ = fit_softmax(feats[tr], y[tr], classes.size)
    pred = np.argmax(np.hstack([feats, np.ones((len(z), 1))]) @ theta, axis=1)
    return ProbeResult(
        float(np.mean(pred[tr] == y[tr])),
        float(np.mean(pred[ho] == y[ho])),
        int(classes.size),
    )


def subspace_alignment(phi, joint: JointDistribution, d_top: int) -> float:
    """Largest principal angle between the top-``d_top`` eigenspace of M and span(diag(sqrt p) phi)."""
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    if d_top > phi.shape[1]:
        raise ValueError("d_top exceeds the embedding dimension")
    _, ref = top_eigenspace(joint, d_top)
    return float(np.max(alignment_angles(joint, phi, ref)))


def collapse_metrics(embeddings, weights=None) -> tuple[float, float]:
    """(rank_ratio, mean pairwise cosine).

    rank_ratio is the top eigenvalue of the (uncentered) second-moment matrix
    divided by its trace; an all-zero batch counts as fully collapsed (1.0).
    """
    z = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    n = z.shape[0]
    if n < 2:
        raise ValueError("collapse_metrics needs at least two embeddings")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    moment = (z * w[:, None]).T @ z
    tr = float(np.trace(moment))
    ratio = 1.0 if tr <= 0 else float(np.linalg.eigvalsh(0.5 * (moment + moment.T))[-1] / tr)
    norms = np.linalg.norm(z, axis=1)
    unit = z / np.where(norms > 0, norms, 1.0)[:, None]
    # sum over all ordered pairs is ||sum of unit vectors||^2; zero vectors have
    # no direction and count as identical to each other only
    n_zero = int(np.sum(norms == 0))
    total = float(np.sum(np.sum(unit, axis=0) ** 2)) + n_zero * n_zero
    return ratio, (total - n) / (n * (n - 1))


def exact_moment(joint: JointDistribution, phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    m = (phi * joint.marginal_x[:, None]).T @ phi
    return 0.5 * (m + m.T)


@dataclass
class VarianceReport:
    variance: float
    mean: float
    std_error: float
    trials: int


def estimator_variance(
    joint: JointDistribution,
    phi,
    batch_size: int,
    trials: int,
    estimator: str,
    seed: int = 0,
    use_lt: bool = False,
) -> VarianceReport:
    """Monte-Carlo variance of a minibatch estimate of the repulsive term.

    ``contrastive_second_term`` averages (phi(x_i)^T phi(x'_j))^2 over the
    batch's cross pairs i != j. ``minc_second_term`` averages
    phi(x')^T lam phi(x') with lam frozen at the exact moment matrix (or its
    lower triangle with ``use_lt``). Both target E_{p(x)p(x')}[(phi^T phi')^2]
    when lam is used in full.
    """
    if trials < 2:
        raise ValueError("need at least two trials")
    phi = np.asarray(phi, dtype=np.float64)
    lam = exact_moment(joint, phi)
    if use_lt:
        lam = lower_triangular(lam)
    rng = np.random.default_rng(seed)
    est = np.empty(trials)
    if estimator == "contrastive_second_term":
        if batch_size < 2:
            raise ValueError("contrastive estimate needs batch_size >= 2")
        off = ~np.eye(batch_size, dtype=bool)
        for t in range(trials):
            idx = sample_pairs(joint, batch_size, rng)
            sim = phi[idx[:, 0]] @ phi[idx[:, 1]].T
            est[t] = np.mean(sim[off] ** 2)
    elif estimator == "minc_second_term":
        for t in range(trials):
            idx = sample_pairs(joint, batch_size, rng)
            zp = phi[idx[:, 1]]
            est[t] = np.mean(np.einsum("ni,ij,nj->n", zp, lam, zp))
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    var = float(np.var(est, ddof=1))
    return VarianceReport(var, float(np.mean(est)), float(np.sqrt(var / trials)), trials)
