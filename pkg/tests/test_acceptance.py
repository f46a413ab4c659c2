"""Acceptance gate: each test checks one criterion at its stated tolerance and
prints a single PASS/FAIL line (repeated in the terminal summary)."""

import json
import time

import numpy as np
import pytest

from minclab import cli
from minclab.dataset import FeatureTable, build_m_matrix, random_psd_joint, save_dataset
from minclab.divergences import AlphaDivergence, f_alpha, fstar_alpha, t_alpha
from minclab.encoder import EmbeddingModel, finite_difference_grad, forward, max_relative_error
from minclab.linalg import sym_eigen
from minclab.objectives import (
    AuxiliaryState,
    MarginalBatch,
    MincConfig,
    PairBatch,
    exhaustive_batches,
    l2_metric_loss,
    l2_metric_loss_and_grad,
    linear_byol_loss_and_grad,
    matrix_factorization_residual,
    minc_loss_and_grad,
    minc_surrogate,
    spectral_contrastive_loss,
    spectral_gradient,
    spectral_loss_and_grad,
    update_lambda,
)
from minclab.power_iteration import eigen_scaled_table, fixed_point_residuals, run_power_iteration
from minclab.probe import estimator_variance
from minclab import reference as ref
from minclab.trainer import train

from conftest import random_joint, record_criterion


def check(number, title, ok, detail):
    record_criterion(number, title, ok, detail)
    assert ok, detail


# --- 1 ---------------------------------------------------------------------


def test_criterion_01_conjugacy():
    start = time.perf_counter()
    y = np.arange(0.0, 50.0 + 5e-4, 1e-3)
    worst = 0.0
    for a in (1.25, 1.5, 2.0, 2.5):
        div = AlphaDivergence(a)
        fy = f_alpha(div, y)
        for t in np.linspace(-0.5, 2.0, 51):
            vals = t * y - fy
            k = int(np.argmax(vals))
            assert 0 < k < len(y) - 1, "supremum not interior"
            worst = max(worst, abs(float(fstar_alpha(div, t)) - vals[k]))
    elapsed = time.perf_counter() - start
    check(1, "conjugacy", worst <= 1e-4 and elapsed < 5.0, f"max |f* - grid sup| = {worst:.2e}, {elapsed:.2f}s")


# --- 2 ---------------------------------------------------------------------


def test_criterion_02_alpha2_reductions(sixteen_point):
    div = AlphaDivergence(2.0)
    u = np.linspace(-5, 5, 1000)
    exact = bool(np.array_equal(t_alpha(div, u), u - 1.0))
    joint, feats = sixteen_point
    model = EmbeddingModel.init((feats.dim, 8, 4), 0)
    pairs, marg = exhaustive_batches(joint, feats)
    state = update_lambda(AuxiliaryState.zeros(4, 0.0), model(marg.x), marg.wx)
    cfg = MincConfig(divergence=div, inner_scale=1.0, use_lt=False, use_target=False)
    minc, _ = minc_loss_and_grad(cfg, model, None, state, pairs)
    sc, _ = spectral_loss_and_grad(model, pairs, marg)
    gap = abs(minc - (0.5 * sc + 1.0))
    check(2, "alpha=2 reductions", exact and gap <= 1e-8, f"t_2 exact on grid: {exact}; |MINC - (SC/2 + 1)| = {gap:.2e}")


# --- 3 ---------------------------------------------------------------------


def test_criterion_03_matrix_identity():
    worst = 0.0
    for k, n in enumerate((5, 12, 20, 27, 32)):
        joint = random_joint(n, seed=100 + k, symmetric=k % 2 == 0)
        phi = np.random.default_rng(k).normal(size=(n, 4))
        i, j = np.nonzero(joint.joint > 0)
        sc = spectral_contrastive_loss(phi[i], phi[j], joint.joint[i, j], phi, phi, joint.marginal_x, joint.marginal_xp)
        m2 = float(np.sum(build_m_matrix(joint) ** 2))
        worst = max(worst, abs(sc + m2 - matrix_factorization_residual(joint, phi)))
    check(3, "matrix identity", worst <= 1e-8, f"max |SC + ||M||^2 - residual| = {worst:.2e} over 5 joints")


# --- 4 ---------------------------------------------------------------------


def gapped_joints(count, size=24, components=6, d=3, min_gap=1.5):
    out = []
    seed = 0
    while len(out) < count:
        joint, _ = random_psd_joint(size, components, seed)
        w = sym_eigen(build_m_matrix(joint)).eigenvalues
        if w[d - 1] / w[d] >= min_gap:
            out.append(joint)
        seed += 1
    return out


def test_criterion_04_power_iteration_oracle():
    start = time.perf_counter()
    d = 3
    worst_angle = worst_resid = 0.0
    worst_iters = 0
    for joint in gapped_joints(10, d=d):
        res = run_power_iteration(joint, d, seed=0, max_iter=200, tol=1e-12)
        worst_angle = max(worst_angle, res.max_angle)
        worst_iters = max(worst_iters, res.iterations)
        table = eigen_scaled_table(joint, res.state.phi_table)
        worst_resid = max(worst_resid, *fixed_point_residuals(joint, table))
    elapsed = time.perf_counter() - start
    ok = worst_angle <= 1e-6 and worst_resid <= 1e-8 and worst_iters <= 200 and elapsed < 30.0
    check(
        4,
        "power-iteration oracle",
        ok,
        f"max angle {worst_angle:.2e}, max residual {worst_resid:.2e}, <= {worst_iters} iterations, {elapsed:.2f}s",
    )


# --- 5 ---------------------------------------------------------------------

ARCHS = [(3, 2), (4, 5, 3), (3, 6, 4, 3), (5, 4, 4)]


def gradient_case(seed):
    rng = np.random.default_rng(seed)
    sizes = ARCHS[seed % len(ARCHS)]
    d = sizes[-1]
    online = EmbeddingModel.init(sizes, seed)
    for b in online.biases:
        b[...] = rng.normal(scale=0.2, size=b.shape)
    target = online.copy()
    target.set_flat_params(online.flat_params() + rng.normal(scale=0.2, size=online.num_params))
    n = int(rng.integers(2, 9))
    batch = PairBatch(rng.normal(size=(n, sizes[0])), rng.normal(size=(n, sizes[0])), rng.dirichlet(np.ones(n)))
    marg = MarginalBatch(rng.normal(size=(n + 1, sizes[0])), rng.normal(size=(n, sizes[0])))
    g = rng.normal(size=(d, d))
    state = AuxiliaryState(g @ g.T / d)
    return rng, online, target, batch, marg, state


def test_criterion_05_gradient_checks():
    errs = {"spectral": 0.0, "minc a=1.5": 0.0, "minc a=2": 0.0, "l2": 0.0, "linear byol": 0.0}
    for seed in range(20):
        rng, online, target, batch, marg, state = gradient_case(seed)
        g = spectral_gradient(online, batch, marg).flat()
        fd = finite_difference_grad(lambda m: spectral_loss_and_grad(m, batch, marg)[0], online)
        errs["spectral"] = max(errs["spectral"], max_relative_error(g, fd))
        for alpha, key in ((1.5, "minc a=1.5"), (2.0, "minc a=2")):
            cfg = MincConfig(divergence=alpha, inner_scale=float(rng.uniform(0.3, 2.0)), use_lt=bool(seed % 2), use_target=seed % 3 != 0)
            _, g = minc_loss_and_grad(cfg, online, target, state, batch)
            zt = (target if cfg.use_target else online)(batch.x)
            zp = online(batch.xp)
            fd = finite_difference_grad(lambda m: minc_surrogate(cfg, m, state, batch, zt, zp), online)
            errs[key] = max(errs[key], max_relative_error(g.flat(), fd))
        _, g = l2_metric_loss_and_grad(online, target, state, batch)
        fd = finite_difference_grad(lambda m: l2_metric_loss(m, target, state, batch), online)
        errs["l2"] = max(errs["l2"], max_relative_error(g.flat(), fd))
        d = online.embedding_dim
        a = np.eye(d) + 0.3 * rng.normal(size=(d, d))
        _, ga, g = linear_byol_loss_and_grad(a, online, target, batch)
        fd = finite_difference_grad(lambda m: linear_byol_loss_and_grad(a, m, target, batch)[0], online)
        h = 1e-6
        fda = np.zeros_like(a)
        for i in range(d):
            for j in range(d):
                e = np.zeros_like(a)
                e[i, j] = h
                fda[i, j] = (linear_byol_loss_and_grad(a + e, online, target, batch)[0] - linear_byol_loss_and_grad(a - e, online, target, batch)[0]) / (2 * h)
        errs["linear byol"] = max(errs["linear byol"], max_relative_error(g.flat(), fd), max_relative_error(ga, fda))
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    check(5, "gradient checks", worst <= 1e-4, f"max relative error over 20 configs: {detail}")


# --- 6 ---------------------------------------------------------------------


def test_criterion_06_gradient_equivalence(sixteen_point):
    joint, feats = sixteen_point
    x = feats.features
    cov = (x * joint.marginal_x[:, None]).T @ x
    _, v = np.linalg.eigh(cov)
    model = EmbeddingModel((x.shape[1], 3), [v.T[::-1][:3].copy()], [np.zeros(3)], normalize_output=False)
    pairs, marg = exhaustive_batches(joint, feats)
    state = update_lambda(AuxiliaryState.zeros(3, 0.0), model(marg.x), marg.wx)
    off_diag = float(np.max(np.abs(state.lam - np.diag(np.diag(state.lam)))))
    _, g_minc = minc_loss_and_grad(MincConfig(inner_scale=1.0), model, model.copy(), state, pairs)
    g_sc = spectral_gradient(model, pairs, marg, branch="xp")
    gap = float(np.max(np.abs(g_minc.flat() - 0.5 * g_sc.flat())))
    check(6, "gradient equivalence", gap <= 1e-8 and off_diag < 1e-12, f"max |g_MINC - g_SC/2| = {gap:.2e} (Lambda off-diagonal {off_diag:.1e})")


# --- 7, 8 ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def reference_runs():
    joint, feats = ref.reference_graph()
    runs, timing = {}, {}
    variants = {
        "full": {},
        "no_gha_no_target": {"use_lt": False, "use_target": False},
        "beta0": {"beta": 0.0},
    }
    for name, overrides in variants.items():
        start = time.perf_counter()
        for seed in ref.SEEDS:
            runs[name, seed] = train(ref.reference_config(seed, **overrides), joint, feats)
        timing[name] = time.perf_counter() - start
    return runs, timing


def test_criterion_07_collapse_ablation(reference_runs):
    runs, timing = reference_runs
    full = [runs["full", s].records[-1] for s in ref.SEEDS]
    bare = [runs["no_gha_no_target", s].records[-1] for s in ref.SEEDS]
    ok = all(r.principal_angle_max <= ref.MAX_ANGLE_FULL and r.embedding_rank_ratio <= ref.MAX_RANK_RATIO_FULL for r in full)
    ok &= all(r.embedding_rank_ratio > ref.MIN_RANK_RATIO_COLLAPSED for r in bare)
    elapsed = timing["full"] + timing["no_gha_no_target"]
    ok &= elapsed < 300.0
    detail = (
        "GHA+target angle " + "/".join(f"{r.principal_angle_max:.3f}" for r in full)
        + " rank_ratio " + "/".join(f"{r.embedding_rank_ratio:.3f}" for r in full)
        + "; no GHA, no target rank_ratio " + "/".join(f"{r.embedding_rank_ratio:.3f}" for r in bare)
        + f"; {elapsed:.0f}s"
    )
    check(7, "collapse ablation", ok, detail)


def test_criterion_08_ema_sweep(reference_runs):
    runs, _ = reference_runs
    pairs = [(runs["full", s].records[-1].principal_angle_max, runs["beta0", s].records[-1].principal_angle_max) for s in ref.SEEDS]
    ok = all(a08 <= a0 for a08, a0 in pairs)
    detail = "angle(beta=0.8) vs angle(beta=0): " + ", ".join(f"{a:.6f} vs {b:.6f}" for a, b in pairs)
    check(8, "EMA sweep ordering", ok, detail)


# --- 9 ---------------------------------------------------------------------


def test_criterion_09_variance(reference_runs):
    runs, _ = reference_runs
    joint, feats = ref.reference_graph()
    phi = runs["full", 0].model(feats.features)
    con = estimator_variance(joint, phi, 16, 10_000, "contrastive_second_term", seed=0)
    mnc = estimator_variance(joint, phi, 16, 10_000, "minc_second_term", seed=1)
    se = float(np.hypot(con.std_error, mnc.std_error))
    ok = mnc.variance <= con.variance and abs(con.mean - mnc.mean) <= 4 * se
    detail = (
        f"var MINC {mnc.variance:.3e} vs contrastive {con.variance:.3e}; "
        f"means {mnc.mean:.5f} vs {con.mean:.5f} ({abs(con.mean - mnc.mean) / se:.2f} SE)"
    )
    check(9, "estimator variance", ok, detail)


# --- 10 --------------------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    joint, feats = ref.reference_graph()
    data = tmp_path / "reference.json"
    save_dataset(data, joint, feats, ref.GRAPH)
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(ref.reference_config(0).to_dict()))
    first, second = tmp_path / "run1", tmp_path / "run2"
    assert cli.main(["train", "--data", str(data), "--config", str(cfg), "--out", str(first)]) == 0
    assert cli.main(["train", "--manifest", str(first / "manifest.json"), "--out", str(second)]) == 0
    a, b = (first / "metrics.csv").read_bytes(), (second / "metrics.csv").read_bytes()
    lines = a.count(b"\n")
    check(10, "determinism", a == b, f"metrics CSV byte-identical across reruns ({len(a)} bytes, {lines} lines)")
