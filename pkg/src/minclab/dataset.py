"""Finite-support joint distributions over positive pairs.

A :class:`JointDistribution` stores the full table ``p(x_i, x'_j)``; its
normalized matrix ``M`` has an exactly computable eigenstructure, which is
what the power-iteration oracle and the alignment metrics compare against.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import format_matrix, parse_matrix

PROB_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class JointDistribution:
    joint: np.ndarray
    class_labels: np.ndarray | None = None
    marginal_x: np.ndarray = field(init=False)
    marginal_xp: np.ndarray = field(init=False)

    def __post_init__(self):
        p = np.array(self.joint, dtype=np.float64)
        if p.ndim != 2 or p.size == 0:
            raise ValueError("joint must be a non-empty 2-D table")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("joint probabilities must be finite and >= 0")
        if abs(p.sum() - 1.0) > PROB_TOL:
            raise ValueError(f"joint sums to {p.sum()!r}, expected 1")
        mx, mxp = p.sum(axis=1), p.sum(axis=0)
        if np.any(mx <= 0) or np.any(mxp <= 0):
            raise ValueError("support points with zero marginal are not allowed; prune them first")
        p.setflags(write=False)
        object.__setattr__(self, "joint", p)
        object.__setattr__(self, "marginal_x", mx)
        object.__setattr__(self, "marginal_xp", mxp)
        if self.class_labels is not None:
            labels = np.asarray(self.class_labels, dtype=np.int64)
            if labels.shape != (p.shape[0],):
                raise ValueError("need one class label per support point")
            object.__setattr__(self, "class_labels", labels)

    @property
    def support_size_x(self) -> int:
        return self.joint.shape[0]

    @property
    def support_size_xp(self) -> int:
        return self.joint.shape[1]

    @property
    def is_symmetric(self) -> bool:
        p = self.joint
        return p.shape[0] == p.shape[1] and np.allclose(p, p.T, rtol=0, atol=PROB_TOL)

    @property
    def marginal(self) -> np.ndarray:
        """Shared marginal of a symmetric joint."""
        if not self.is_symmetric:
            raise ValueError("joint is not symmetric; use marginal_x / marginal_xp")
        return self.marginal_x


@dataclass(frozen=True, eq=False)
class FeatureTable:
    features: np.ndarray

    def __post_init__(self):
        f = np.array(self.features, dtype=np.float64)
        if f.ndim != 2:
            raise ValueError("features must be a 2-D table (one row per support point)")
        f.setflags(write=False)
        object.__setattr__(self, "features", f)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.features.shape[0]


def normalized_table(table) -> np.ndarray:
    t = np.asarray(table, dtype=np.float64)
    return t / t.sum()


def make_block_graph(
    num_classes: int,
    points_per_class: int,
    intra_mass: float,
    noise: float,
    feature_dim: int,
    seed: int,
) -> tuple[JointDistribution, FeatureTable]:
    """Class-structured "augmentation graph" with Gaussian-perturbed centroid features.

    Same-class pairs share ``intra_mass`` uniformly, the rest is spread
    uniformly over cross-class pairs. The joint is symmetric with a uniform
    marginal, and the top ``num_classes`` eigenvectors of ``M`` span the class
    indicators.
    """
    if num_classes < 2 or points_per_class < 1 or feature_dim < 1:
        raise ValueError("need >= 2 classes, >= 1 point per class and feature_dim >= 1")
    if not 0.0 < intra_mass <= 1.0:
        raise ValueError("intra_mass must lie in (0, 1]")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    k, n = num_classes, points_per_class
    labels = np.repeat(np.arange(k), n)
    same = labels[:, None] == labels[None, :]
    table = np.where(same, intra_mass / (k * n * n), (1.0 - intra_mass) / (k * (k - 1) * n * n))
    table = table / table.sum()
    joint = JointDistribution(table, labels)
    _check_singular_values(joint)

    rng = np.random.default_rng(seed)
    centroids = rng.normal(size=(k, feature_dim))
    feats = centroids[labels] + noise * rng.normal(size=(k * n, feature_dim))
    return joint, FeatureTable(feats)


def random_psd_joint(
    size: int,
    components: int,
    seed: int,
    decay: float = 0.6,
    concentration: float = 0.3,
    feature_dim: int = 4,
) -> tuple[JointDistribution, FeatureTable]:
    """Random symmetric joint ``sum_k w_k q_k q_k^T`` (a latent-class mixture).

    Such a joint is entrywise non-negative and positive semidefinite, so its
    ``M`` matrix is PSD. Weights decay geometrically to create eigengaps.
    """
    if size < 2 or components < 1:
        raise ValueError("need size >= 2 and components >= 1")
    rng = np.random.default_rng(seed)
    q = rng.dirichlet(np.full(size, concentration), size=components).T
    w = decay ** np.arange(components)
    w = w / w.sum()
    table = (q * w) @ q.T
    table = table + 1e-6 / size**2
    table = 0.5 * (table + table.T)
    labels = np.argmax(q * w, axis=1)
    joint = JointDistribution(table / table.sum(), labels)
    feats = rng.normal(size=(size, feature_dim))
    return joint, FeatureTable(feats)


def _check_singular_values(joint: JointDistribution) -> None:
    s = np.linalg.svd(build_m_matrix(joint), compute_uv=False)
    if s[0] > 1.0 + 1e-9:
        raise ValueError(f"generator produced M with singular value {s[0]} > 1")


def build_m_matrix(joint: JointDistribution) -> np.ndarray:
    """M_ij = p(x_i, x'_j) / sqrt(p(x_i) p(x'_j))."""
    return joint.joint / np.sqrt(np.outer(joint.marginal_x, joint.marginal_xp))


def _inverse_cdf(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(cdf, u * cdf[-1], side="right")
    return np.minimum(idx, len(cdf) - 1)


def sample_pairs(joint: JointDistribution, batch: int, rng_seed) -> np.ndarray:
    """I.i.d. (i, j) index pairs drawn from the joint table, shape ``(batch, 2)``.

    ``rng_seed`` may be an integer or a ``numpy.random.Generator``.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    rng = np.random.default_rng(rng_seed)
    cdf = np.cumsum(joint.joint.ravel())
    flat = _inverse_cdf(cdf, rng.random(batch))
    return np.stack(np.divmod(flat, joint.support_size_xp), axis=1)


def sample_marginal(joint: JointDistribution, side: str, batch: int, rng_seed) -> np.ndarray:
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if side == "x":
        p = joint.marginal_x
    elif side == "xp":
        p = joint.marginal_xp
    else:
        raise ValueError("side must be 'x' or 'xp'")
    rng = np.random.default_rng(rng_seed)
    return _inverse_cdf(np.cumsum(p), rng.random(batch))


def dataset_to_dict(joint: JointDistribution, features: FeatureTable, params: dict | None = None) -> dict:
    labels = None if joint.class_labels is None else joint.class_labels.tolist()
    return {
        "format": "minclab-dataset/1",
        "support_size_x": joint.support_size_x,
        "support_size_xp": joint.support_size_xp,
        "joint": format_matrix(joint.joint),
        "features": format_matrix(features.features),
        "labels": labels,
        "generator": params or {},
    }


def save_dataset(path, joint: JointDistribution, features: FeatureTable, params: dict | None = None) -> None:
    text = json.dumps(dataset_to_dict(joint, features, params), indent=2, sort_keys=True)
    Path(path).write_text(text + "\n")


def load_dataset(path) -> tuple[JointDistribution, FeatureTable, dict]:
    doc = json.loads(Path(path).read_text())
    table = parse_matrix(doc["joint"])
    # the stored table already sums to one within rounding; no renormalization
    joint = JointDistribution(table, doc.get("labels"))
    feats = FeatureTable(parse_matrix(doc["features"]))
    if len(feats) != joint.support_size_x:
        raise ValueError("feature table size does not match the joint support")
    return joint, feats, doc.get("generator", {})


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
