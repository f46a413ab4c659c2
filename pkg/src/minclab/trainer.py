"""Minibatch training loop and ablation grid.

Per step (MINC): sample a pair batch, update the auxiliary matrix from target
embeddings of the first view, take a momentum-SGD step on the online network,
then move the target network toward the online one.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .dataset import FeatureTable, JointDistribution, sample_marginal, sample_pairs
from .divergences import AlphaDivergence
from .encoder import EmbeddingModel, GradientBuffer, backward, ema_blend, forward
from .objectives import (
    SCALE_LR,
    SCALE_MOMENTUM,
    AuxiliaryState,
    MarginalBatch,
    MincConfig,
    PairBatch,
    exhaustive_batches,
    l2_metric_loss_and_grad,
    linear_byol_loss_and_grad,
    minc_terms,
    spectral_loss_and_grad,
    update_lambda,
)
from .linalg import lower_triangular
from .power_iteration import fixed_point_residuals
from .probe import collapse_metrics, subspace_alignment

log = logging.getLogger(__name__)

LOSS_KINDS = ("minc", "spectral", "l2_variant", "linear_byol")
METRIC_FIELDS = (
    "step",
    "loss",
    "orth_residual",
    "eigen_residual",
    "principal_angle_max",
    "embedding_rank_ratio",
    "lambda_trace",
)


class NumericalAbort(RuntimeError):
    pass


@dataclass
class TrainConfig:
    minc: MincConfig = field(default_factory=MincConfig)
    batch_size: int = 32
    steps: int = 1000
    learning_rate: float = 0.05
    momentum: float = 0.9
    lr_schedule: str = "constant"
    seed: int = 0
    eval_every: int = 100
    loss_kind: str = "minc"
    hidden: tuple[int, ...] = (32,)
    embed_dim: int = 8
    align_dim: int = 4

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1 or (self.loss_kind == "spectral" and self.batch_size < 2):
            raise ValueError("batch_size must be >= 1 (>= 2 for the spectral loss)")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.align_dim > self.embed_dim:
            raise ValueError("align_dim cannot exceed embed_dim")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["minc"]["divergence"] = self.minc.divergence.alpha
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        minc = dict(doc.pop("minc", {}))
        if "divergence" in minc:
            minc["divergence"] = AlphaDivergence(float(minc["divergence"]))
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(minc=MincConfig(**minc), **doc)


@dataclass
class MetricsRecord:
    step: int
    loss: float
    orth_residual: float
    eigen_residual: float
    principal_angle_max: float
    embedding_rank_ratio: float
    lambda_trace: float

    def row(self) -> list[str]:
        return [str(self.step)] + [format(getattr(self, k), ".17g") for k in METRIC_FIELDS[1:]]


@dataclass
class TrainResult:
    model: EmbeddingModel
    records: list[MetricsRecord]
    target: EmbeddingModel | None = None
    state: AuxiliaryState | None = None
    predictor: np.ndarray | None = None
    scale: float = 1.0
    aborted: bool = False
    message: str = ""


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for update number ``step`` (0-based); cosine hits 0 at ``steps``."""
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))


class MomentumSGD:
    def __init__(self, model: EmbeddingModel, momentum: float):
        self.momentum = momentum
        self.velocity = GradientBuffer.zeros_like(model)

    def step(self, model: EmbeddingModel, grads: GradientBuffer, lr: float) -> None:
        self.velocity = self.velocity.scaled(self.momentum) + grads
        model.apply_update(self.velocity.scaled(-lr))


def build_model(cfg: TrainConfig, input_dim: int) -> EmbeddingModel:
    sizes = (input_dim, *cfg.hidden, cfg.embed_dim)
    return EmbeddingModel.init(sizes, seed=cfg.seed, normalize_output=True)


def _uses_state(cfg: TrainConfig) -> bool:
    return cfg.loss_kind in ("minc", "l2_variant")


def _uses_target(cfg: TrainConfig) -> bool:
    return cfg.loss_kind != "spectral" and cfg.minc.use_target


def evaluate(
    cfg: TrainConfig,
    step: int,
    joint: JointDistribution,
    features: FeatureTable,
    model: EmbeddingModel,
    target: EmbeddingModel | None,
    state: AuxiliaryState | None,
    predictor: np.ndarray | None,
    scale: float,
) -> MetricsRecord:
    """Exact (full-support) metrics for the current training state."""
    pairs, marg = exhaustive_batches(joint, features)
    phi = model(features.features)
    tgt = target if _uses_target(cfg) else None
    if cfg.loss_kind == "minc":
        zt = forward(tgt or model, pairs.x)[0]
        zp = forward(model, pairs.xp)[0]
        lam_q = lower_triangular(state.lam) if cfg.minc.use_lt else state.lam
        loss = minc_terms(cfg.minc, zt, zp, lam_q, pairs.weights, scale)[0]
    elif cfg.loss_kind == "spectral":
        loss = spectral_loss_and_grad(model, pairs, marg)[0]
    elif cfg.loss_kind == "l2_variant":
        loss = l2_metric_loss_and_grad(model, tgt, state, pairs, use_target=tgt is not None)[0]
    else:
        loss = linear_byol_loss_and_grad(predictor, model, tgt, pairs, use_target=tgt is not None)[0]
    eff = phi * math.sqrt(scale) if cfg.loss_kind == "minc" else phi
    orth, eig = fixed_point_residuals(joint, eff)
    angle = subspace_alignment(phi, joint, cfg.align_dim)
    ratio = collapse_metrics(phi, joint.marginal_x)[0]
    lam_trace = float(np.trace(state.lam)) if state is not None else 0.0
    return MetricsRecord(step, float(loss), orth, eig, angle, ratio, lam_trace)


def train(
    cfg: TrainConfig,
    joint: JointDistribution,
    features: FeatureTable,
    model: EmbeddingModel | None = None,
    update_order: str = "algorithm",
) -> TrainResult:
    """Run ``cfg.steps`` updates; records at step 0, every ``eval_every`` and the final step.

    ``update_order="phi_first"`` swaps the auxiliary and network updates. It
    exists to show that the ordering matters and is not meant for real runs.
    """
    if update_order not in ("algorithm", "phi_first"):
        raise ValueError("update_order must be 'algorithm' or 'phi_first'")
    feats = features.features
    model = build_model(cfg, feats.shape[1]) if model is None else model.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = MomentumSGD(model, cfg.momentum)
    d = model.embedding_dim
    target = model.copy() if _uses_target(cfg) else None
    state = AuxiliaryState.zeros(d, cfg.minc.beta) if _uses_state(cfg) else None
    predictor = np.eye(d) if cfg.loss_kind == "linear_byol" else None
    scale = cfg.minc.inner_scale
    scale_vel = 0.0

    records = [evaluate(cfg, 0, joint, features, model, target, state, predictor, scale)]
    for k in range(1, cfg.steps + 1):
        lr = lr_at(cfg, k - 1)
        idx = sample_pairs(joint, cfg.batch_size, rng)
        batch = PairBatch(feats[idx[:, 0]], feats[idx[:, 1]])
        snapshot = (model.copy(), None if target is None else target.copy(), state, predictor, scale)
        try:
            if cfg.loss_kind == "minc":
                if update_order == "algorithm":
                    state = update_lambda(state, forward(target or model, batch.x)[0])
                zt = forward(target or model, batch.x)[0]
                zp, tape = forward(model, batch.xp)
                lam_q = lower_triangular(state.lam) if cfg.minc.use_lt else state.lam
                loss, cot, d_scale = minc_terms(cfg.minc, zt, zp, lam_q, batch.weights, scale)
                grads = backward(model, tape, cot)
                _check_finite(loss, grads, k)
                opt.step(model, grads, lr)
                if cfg.minc.learn_scale:
                    scale_vel = SCALE_MOMENTUM * scale_vel + d_scale
                    scale = max(scale - SCALE_LR * scale_vel, 1e-3)
                if update_order == "phi_first":
                    state = update_lambda(state, forward(target or model, batch.x)[0])
            elif cfg.loss_kind == "spectral":
                mx = sample_marginal(joint, "x", cfg.batch_size, rng)
                mxp = sample_marginal(joint, "xp", cfg.batch_size, rng)
                loss, grads = spectral_loss_and_grad(model, batch, MarginalBatch(feats[mx], feats[mxp]))
                _check_finite(loss, grads, k)
                opt.step(model, grads, lr)
            elif cfg.loss_kind == "l2_variant":
                if update_order == "algorithm":
                    state = update_lambda(state, forward(target or model, batch.x)[0])
                loss, grads = l2_metric_loss_and_grad(model, target, state, batch, use_target=target is not None)
                _check_finite(loss, grads, k)
                opt.step(model, grads, lr)
                if update_order == "phi_first":
                    state = update_lambda(state, forward(target or model, batch.x)[0])
            else:
                loss, grad_a, grads = linear_byol_loss_and_grad(
                    predictor, model, target, batch, use_target=target is not None
                )
                _check_finite(loss, grads, k)
                opt.step(model, grads, lr)
                predictor = predictor - lr * grad_a
            if not np.all(np.isfinite(model.flat_params())):
                raise NumericalAbort(f"non-finite parameters after step {k}")
        except NumericalAbort as exc:
            model, target, state, predictor, scale = snapshot
            log.warning("training aborted: %s", exc)
            return TrainResult(model, records, target, state, predictor, scale, True, str(exc))

        if target is not None:
            target = ema_blend(target, model, cfg.minc.gamma)
        if k % cfg.eval_every == 0 or k == cfg.steps:
            records.append(evaluate(cfg, k, joint, features, model, target, state, predictor, scale))
    return TrainResult(model, records, target, state, predictor, scale)


def _check_finite(loss: float, grads: GradientBuffer, step: int) -> None:
    if not math.isfinite(loss) or not np.all(np.isfinite(grads.flat())):
        raise NumericalAbort(f"non-finite loss or gradient at step {step} (loss={loss!r})")


def write_metrics_csv(path, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in records:
            w.writerow(r.row())


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        MetricsRecord(int(r["step"]), *(float(r[k]) for k in METRIC_FIELDS[1:]))
        for r in rows
    ]


ABLATION_GHA = (True, False)
ABLATION_TARGET = (True, False)
ABLATION_BETAS = (0.0, 0.5, 0.8, 0.95)
ABLATION_ALPHAS = (1.5, 2.0, 2.5)


def ablation_grid(base: TrainConfig):
    for gha, tgt, beta, alpha in itertools.product(ABLATION_GHA, ABLATION_TARGET, ABLATION_BETAS, ABLATION_ALPHAS):
        minc = replace(base.minc, use_lt=gha, use_target=tgt, beta=beta, divergence=AlphaDivergence(alpha))
        yield replace(base, minc=minc, loss_kind="minc")


def ablation_suite(base: TrainConfig, joint: JointDistribution, features: FeatureTable) -> list[dict]:
    """Final metrics for every {GHA} x {target} x beta x alpha cell."""
    rows = []
    for cfg in ablation_grid(base):
        res = train(cfg, joint, features)
        last = res.records[-1]
        rows.append(
            {
                "gha": cfg.minc.use_lt,
                "target": cfg.minc.use_target,
                "beta": cfg.minc.beta,
                "alpha": cfg.minc.divergence.alpha,
                "aborted": res.aborted,
                **asdict(last),
            }
        )
    return rows
