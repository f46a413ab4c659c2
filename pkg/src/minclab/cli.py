"""Command-line entry point: ``minclab {gen-data,train,oracle,eval,ablate}``.

Exit codes: 0 success, 1 usage/config error, 2 numerical abort, 3 oracle
non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import build_m_matrix, file_sha256, load_dataset, make_block_graph, save_dataset
from .encoder import load_checkpoint, save_checkpoint
from .linalg import save_matrix, sym_eigen
from .power_iteration import ritz_pairs, run_power_iteration, top_eigenspace
from .probe import collapse_metrics, linear_probe, subspace_alignment
from .trainer import TrainConfig, ablation_suite, train, write_metrics_csv

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_NONCONVERGED = 0, 1, 2, 3
MANIFEST = "manifest.json"

log = logging.getLogger("minclab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_manifest(out: Path, command: str, config: dict, seed, dataset: Path | None, artifacts: dict) -> None:
    doc = {
        "tool": "minclab",
        "version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "dataset": None if dataset is None else {"path": str(dataset.resolve()), "sha256": file_sha256(dataset)},
        "artifacts": artifacts,
    }
    (out / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"dataset file not found: {p}")
    joint, feats, params = load_dataset(p)
    return p, joint, feats, params


# --- gen-data ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    params = dict(
        num_classes=args.classes,
        points_per_class=args.per_class,
        intra_mass=args.intra_mass,
        noise=args.noise,
        feature_dim=args.feature_dim,
        seed=args.seed,
    )
    try:
        joint, feats = make_block_graph(**params)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args)
    path = out / "dataset.json"
    save_dataset(path, joint, feats, params)
    _write_manifest(out, "gen-data", params, args.seed, path, {"dataset": path.name})
    m = build_m_matrix(joint)
    top = sym_eigen(0.5 * (m + m.T)).eigenvalues[: args.show]
    print("top eigenvalues of M:", " ".join(f"{v:.10g}" for v in top))
    return EXIT_OK


# --- train ------------------------------------------------------------------

# flag name -> (dotted config key, type)
_TRAIN_FLAGS = {
    "loss_kind": ("loss_kind", str),
    "batch_size": ("batch_size", int),
    "steps": ("steps", int),
    "learning_rate": ("learning_rate", float),
    "momentum": ("momentum", float),
    "lr_schedule": ("lr_schedule", str),
    "seed": ("seed", int),
    "eval_every": ("eval_every", int),
    "embed_dim": ("embed_dim", int),
    "align_dim": ("align_dim", int),
    "alpha": ("minc.divergence", float),
    "inner_scale": ("minc.inner_scale", float),
    "use_lt": ("minc.use_lt", bool),
    "use_target": ("minc.use_target", bool),
    "beta": ("minc.beta", float),
    "gamma": ("minc.gamma", float),
    "learn_scale": ("minc.learn_scale", bool),
}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON config file (TrainConfig layout)", default=None)
    p.add_argument("--loss-kind", "--loss", dest="loss_kind", choices=["minc", "spectral", "l2_variant", "linear_byol"], default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float, default=S)
    p.add_argument("--momentum", type=float, default=S)
    p.add_argument("--lr-schedule", choices=["constant", "cosine"], default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--eval-every", type=int, default=S)
    p.add_argument("--hidden", type=str, default=S, help="comma-separated hidden sizes, '' for a linear model")
    p.add_argument("--embed-dim", type=int, default=S)
    p.add_argument("--align-dim", type=int, default=S)
    p.add_argument("--alpha", type=float, default=S)
    p.add_argument("--inner-scale", type=float, default=S)
    p.add_argument("--use-lt", "--gha", dest="use_lt", action=argparse.BooleanOptionalAction, default=S)
    p.add_argument("--use-target", "--target", dest="use_target", action=argparse.BooleanOptionalAction, default=S)
    p.add_argument("--beta", type=float, default=S)
    p.add_argument("--gamma", type=float, default=S)
    p.add_argument("--learn-scale", action=argparse.BooleanOptionalAction, default=S)


def resolve_config(args) -> TrainConfig:
    """Defaults, then the config file, then explicit flags."""
    doc = TrainConfig().to_dict()
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        minc = loaded.pop("minc", {})
        doc.update(loaded)
        doc["minc"].update(minc)
    ns = vars(args)
    for flag, (key, _) in _TRAIN_FLAGS.items():
        if flag in ns:
            if key.startswith("minc."):
                doc["minc"][key.split(".", 1)[1]] = ns[flag]
            else:
                doc[key] = ns[flag]
    if "hidden" in ns:
        doc["hidden"] = [int(h) for h in ns["hidden"].split(",") if h.strip()]
    try:
        return TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def cmd_train(args) -> int:
    if getattr(args, "manifest", None):
        man = json.loads(Path(args.manifest).read_text())
        cfg = TrainConfig.from_dict(man["config"])
        data = Path(man["dataset"]["path"])
        if file_sha256(data) != man["dataset"]["sha256"]:
            raise UsageError("dataset content does not match the manifest hash")
    else:
        if not args.data:
            raise UsageError("train needs --data or --manifest")
        cfg = resolve_config(args)
        data = Path(args.data)
    data, joint, feats, _ = _load_data(data)
    if feats.dim <= 0:
        raise UsageError("empty feature table")
    out = _out_dir(args)
    result = train(cfg, joint, feats)
    artifacts = {"metrics": "metrics.csv", "checkpoint": "checkpoint.json"}
    write_metrics_csv(out / "metrics.csv", result.records)
    save_checkpoint(out / "checkpoint.json", result.model)
    if result.target is not None:
        save_checkpoint(out / "target.json", result.target)
        artifacts["target"] = "target.json"
    if result.state is not None:
        save_matrix(out / "lambda.txt", result.state.lam)
        artifacts["lambda"] = "lambda.txt"
    if result.predictor is not None:
        save_matrix(out / "predictor.txt", result.predictor)
        artifacts["predictor"] = "predictor.txt"
    _write_manifest(out, "train", cfg.to_dict(), cfg.seed, data, artifacts)
    last = result.records[-1]
    print(
        f"step {last.step}: loss={last.loss:.6g} angle={last.principal_angle_max:.4f} "
        f"rank_ratio={last.embedding_rank_ratio:.4f}"
    )
    if result.aborted:
        print(f"numerical abort: {result.message} (last good checkpoint kept)", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# --- oracle -----------------------------------------------------------------


def cmd_oracle(args) -> int:
    data, joint, _, _ = _load_data(args.data)
    if not joint.is_symmetric:
        raise UsageError("oracle needs a symmetric joint")
    out = _out_dir(args)
    res = run_power_iteration(joint, args.dim, seed=args.seed, max_iter=args.max_iter, tol=args.tol)
    exact, _ = top_eigenspace(joint, args.dim)
    est, _ = ritz_pairs(joint, res.state.phi_table)
    report = {
        "converged": res.converged,
        "iterations": res.iterations,
        "max_principal_angle": res.max_angle,
        "exact_eigenvalues": exact.tolist(),
        "power_iteration_eigenvalues": est.tolist(),
        "nontrivial_eigenvalues": int(np.sum(exact > 1e-10)),
    }
    (out / "oracle.json").write_text(json.dumps(report, indent=2) + "\n")
    _write_manifest(out, "oracle", {"dim": args.dim, "max_iter": args.max_iter, "tol": args.tol}, args.seed, data, {"report": "oracle.json"})
    print("eigenvalues (sym_eigen):       ", " ".join(f"{v:.12g}" for v in exact))
    print("eigenvalues (power iteration): ", " ".join(f"{v:.12g}" for v in est))
    print(f"max principal angle: {res.max_angle:.3e} after {res.iterations} iterations")
    if not res.converged:
        print(f"not converged: subspace still moving after {res.iterations} iterations", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


# --- eval -------------------------------------------------------------------


def cmd_eval(args) -> int:
    data, joint, feats, _ = _load_data(args.data)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    out = _out_dir(args)
    phi = model(feats.features)
    if joint.class_labels is None:
        raise UsageError("dataset has no class labels to probe")
    probe = linear_probe(phi, joint.class_labels, args.split_seed)
    probe_pen = linear_probe(model.penultimate(feats.features), joint.class_labels, args.split_seed)
    ratio, cos = collapse_metrics(phi, joint.marginal_x)
    record = {
        "checkpoint": str(ckpt),
        "probe": probe.to_dict(),
        "probe_penultimate": probe_pen.to_dict(),
        "alignment": subspace_alignment(phi, joint, args.align_dim),
        "rank_ratio": ratio,
        "mean_pairwise_cos": cos,
    }
    with open(out / "eval.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    existing = out / MANIFEST
    if existing.is_file():
        # evaluating inside a run directory: extend its manifest instead of replacing it
        doc = json.loads(existing.read_text())
        doc.setdefault("artifacts", {})["eval_records"] = "eval.jsonl"
        existing.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    else:
        cfg = {"align_dim": args.align_dim, "split_seed": args.split_seed, "checkpoint": str(ckpt.resolve())}
        _write_manifest(out, "eval", cfg, args.split_seed, data, {"eval_records": "eval.jsonl"})
    print(json.dumps(record, sort_keys=True))
    return EXIT_OK


# --- ablate -----------------------------------------------------------------


def cmd_ablate(args) -> int:
    data, joint, feats, _ = _load_data(args.data)
    cfg = resolve_config(args)
    out = _out_dir(args)
    rows = ablation_suite(cfg, joint, feats)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: format(v, ".17g") if isinstance(v, float) else v for k, v in r.items()})
    _write_manifest(out, "ablate", cfg.to_dict(), cfg.seed, data, {"table": "ablation.csv"})
    print(f"{len(rows)} ablation rows written to {out / 'ablation.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="minclab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a block-graph dataset")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--per-class", type=int, default=8)
    g.add_argument("--intra-mass", type=float, default=0.97)
    g.add_argument("--noise", type=float, default=0.5)
    g.add_argument("--feature-dim", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--show", type=int, default=8, help="number of eigenvalues to print")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train an encoder")
    t.add_argument("--data")
    t.add_argument("--manifest", help="replay a previous train manifest")
    t.add_argument("--out", required=True)
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("oracle", help="exact power iteration on the dataset")
    o.add_argument("--data", required=True)
    o.add_argument("--dim", type=int, default=4)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--max-iter", type=int, default=500)
    o.add_argument("--tol", type=float, default=1e-9)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_oracle)

    e = sub.add_parser("eval", help="probe / alignment / collapse metrics for a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--align-dim", type=int, default=4)
    e.add_argument("--split-seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="GHA x target x beta x alpha grid")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    _add_train_flags(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"minclab {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
