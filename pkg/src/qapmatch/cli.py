"""Command-line pipeline: dataset generation, training, and evaluation.

Subcommands:
  synth    generate a synthetic registration dataset on disk
  train    fit a matching network on a stored dataset
  eval     score solvers on the test split of a stored dataset
  qaplib   run solvers on QAPLIB-format instance files
  sync     joint-matching evaluation of a pairwise checkpoint

Every command writes its outputs next to a small JSON manifest recording
the arguments, package version, and a content hash, so runs can be told
apart later.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import warnings
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .affinity import LawlerQap, build_association, lawler_objective
from .benchdata import (
    SynthConfig,
    gen_multi,
    load_dataset,
    load_qaplib_dir,
    negate_affinity,
    qaplib_objective,
    qaplib_to_lawler,
    rel_obj_score,
    to_training_example,
    write_dataset,
)
from .classic import discretize, rrwm, spectral_match
from .multigraph import nmgm_forward, pair_keys, train_nmgm
from .neural import (
    Adam,
    NetParams,
    TrainingExample,
    config_for_variant,
    forward,
    load_checkpoint,
    matching_accuracy,
    qap_loss,
    save_checkpoint,
    train,
)
from .numerics import SparseMatrix

CLASSIC_SOLVERS = ("sm", "rrwm")
NEURAL_SOLVERS = ("ngm", "ngm-v", "ngm+", "nhgm")


class CliError(Exception):
    """User-facing failure: printed to stderr, exit code 1."""


def _parse_config(pairs: list[str], overrides: dict) -> SynthConfig:
    """key=value pairs coerced by field type; explicit flags win."""
    types = {f.name: f.type for f in fields(SynthConfig)}
    kwargs = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise CliError(f"bad --config entry {pair!r}; expected key=value")
        key, _, raw = pair.partition("=")
        if key not in types:
            raise CliError(f"unknown config key {key!r}; "
                           f"valid keys: {', '.join(sorted(types))}")
        caster = int if types[key] == "int" else float
        try:
            kwargs[key] = caster(raw)
        except ValueError as err:
            raise CliError(f"bad value for {key}: {err}") from err
    for key, val in overrides.items():
        if val is not None:
            kwargs[key] = val
    try:
        return SynthConfig(**kwargs)
    except ValueError as err:
        raise CliError(str(err)) from err


def _write_manifest(out_path: Path, command: str, args_dict: dict,
                    content_hash: str) -> None:
    manifest = {
        "command": command,
        "args": args_dict,
        "version": __version__,
        "hash": content_hash,
    }
    out_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _hash_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        writer.writerows(rows)


# -- synth -----------------------------------------------------------------------


def cmd_synth(args) -> int:
    config = _parse_config(args.config, {
        "seed": args.seed, "sigma_noise": args.sigma_n, "outliers": args.outliers,
    })
    root = write_dataset(config, args.out)
    digest = hashlib.sha256()
    for p in sorted(root.rglob("inst*.json")):
        digest.update(p.read_bytes())
    _write_manifest(root / "run.manifest.json", "synth",
                    {"config": asdict(config)}, digest.hexdigest())
    total = config.num_sets * (config.train_per_set + config.test_per_set)
    print(f"wrote {total} instances across {config.num_sets} sets to {root}")
    return 0


# -- train -----------------------------------------------------------------------


def _gather_examples(sets, set_indices, split: str, variant: str,
                     sigma3: float) -> list[TrainingExample]:
    with_hyper = variant == "nhgm"
    out = []
    for k in set_indices:
        for inst in sets[k][split]:
            out.append(to_training_example(inst, with_hyper=with_hyper,
                                           sigma3=sigma3))
    return out


def _select_sets(spec: str | None, num_sets: int) -> list[int]:
    if not spec:
        return list(range(num_sets))
    try:
        indices = sorted({int(tok) for tok in spec.split(",")})
    except ValueError as err:
        raise CliError(f"bad --sets value: {err}") from err
    for k in indices:
        if not 0 <= k < num_sets:
            raise CliError(f"set index {k} out of range (dataset has {num_sets})")
    return indices


def cmd_train(args) -> int:
    if args.variant not in NEURAL_SOLVERS:
        raise CliError(f"unknown variant {args.variant!r}; "
                       f"expected one of {NEURAL_SOLVERS}")
    data_cfg, sets = load_dataset(args.data)
    set_indices = _select_sets(args.sets, len(sets))
    examples = _gather_examples(sets, set_indices, "train", args.variant,
                                data_cfg.sigma3)
    overrides = {}
    if args.channels is not None:
        overrides["channels"] = args.channels
    if args.layers is not None:
        overrides["num_layers"] = args.layers
    config = config_for_variant(args.variant, **overrides)
    if args.resume:
        params, config, optimizer, _ = load_checkpoint(args.resume)
        if optimizer is None:
            optimizer = Adam(lr=args.lr)
    else:
        params = NetParams.init(config, seed=args.seed)
        optimizer = Adam(lr=args.lr)
    history = train(params, examples, config, epochs=args.epochs,
                    optimizer=optimizer, loss=args.loss, seed=args.seed)
    for rec in history:
        acc = "" if rec.mean_accuracy is None else f"  acc {rec.mean_accuracy:.3f}"
        print(f"epoch {rec.epoch}: loss {rec.mean_loss:.4f}{acc}")
    meta = {
        "variant": args.variant,
        "dataset": str(args.data),
        "sets": set_indices,
        "seed": args.seed,
        "epochs": args.epochs,
        "loss": args.loss,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, params, config, optimizer=optimizer, meta=meta)
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "train",
                    meta, _hash_file(out))
    print(f"checkpoint written to {out}")
    return 0


# -- eval ------------------------------------------------------------------------


def _run_classic(solver: str, qap: LawlerQap):
    if solver == "sm":
        sol = spectral_match(qap.k, qap.n1, qap.n2)
    else:
        sol = rrwm(qap.k, qap.n1, qap.n2)
    return discretize(sol.scores)


def _classic_task(payload):
    solver, set_idx, inst_idx, qap, gt = payload
    x = _run_classic(solver, qap)
    return {
        "set": set_idx,
        "instance": inst_idx,
        "solver": solver,
        "accuracy": f"{matching_accuracy(x, gt):.6f}",
        "objective": f"{lawler_objective(qap.k, x):.6g}",
    }


def _parse_solvers(spec: str) -> list[str]:
    solvers = [tok.strip() for tok in spec.split(",") if tok.strip()]
    for tok in solvers:
        if tok not in CLASSIC_SOLVERS + NEURAL_SOLVERS:
            raise CliError(
                f"unknown solver {tok!r}; expected any of "
                f"{', '.join(CLASSIC_SOLVERS + NEURAL_SOLVERS)}"
            )
    if not solvers:
        raise CliError("no solvers requested")
    return solvers


def cmd_eval(args) -> int:
    solvers = _parse_solvers(args.solvers)
    data_cfg, sets = load_dataset(args.data)
    set_indices = _select_sets(args.sets, len(sets))
    neural = [s for s in solvers if s in NEURAL_SOLVERS]
    params = config = meta = None
    if neural:
        if len(neural) > 1:
            raise CliError("one checkpoint serves one neural solver per run")
        if not args.checkpoint:
            raise CliError(f"solver {neural[0]!r} needs --checkpoint")
        params, config, _, meta = load_checkpoint(args.checkpoint)
        if meta.get("variant") != neural[0]:
            raise CliError(
                f"checkpoint variant {meta.get('variant')!r} does not match "
                f"requested solver {neural[0]!r}"
            )
    rows = []
    classic_tasks = []
    for k in set_indices:
        for idx, inst in enumerate(sets[k]["test"]):
            for solver in solvers:
                if solver in CLASSIC_SOLVERS:
                    classic_tasks.append((solver, k, idx, inst.qap, inst.gt))
    if classic_tasks:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            if args.workers > 1:
                from concurrent.futures import ProcessPoolExecutor

                with ProcessPoolExecutor(max_workers=args.workers) as pool:
                    rows.extend(pool.map(_classic_task, classic_tasks))
            else:
                rows.extend(_classic_task(t) for t in classic_tasks)
    if neural:
        solver = neural[0]
        for k in set_indices:
            for idx, inst in enumerate(sets[k]["test"]):
                ex = to_training_example(inst, with_hyper=solver == "nhgm",
                                         sigma3=data_cfg.sigma3)
                out = forward(params, ex.graph, config, hyper=ex.hyper)
                x = discretize(out.scores.data)
                rows.append({
                    "set": k,
                    "instance": idx,
                    "solver": solver,
                    "accuracy": f"{matching_accuracy(x, inst.gt):.6f}",
                    "objective": f"{lawler_objective(inst.qap.k, x):.6g}",
                })
    rows.sort(key=lambda r: (r["set"], r["instance"], r["solver"]))
    out = Path(args.out)
    _write_csv(out, ["set", "instance", "solver", "accuracy", "objective"], rows)
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "eval",
                    {"data": str(args.data), "solvers": solvers},
                    _hash_file(out))
    for solver in solvers:
        vals = [float(r["accuracy"]) for r in rows if r["solver"] == solver]
        print(f"{solver}: mean accuracy {np.mean(vals):.4f} over {len(vals)} instances")
    print(f"results written to {out}")
    return 0


# -- qaplib ----------------------------------------------------------------------


def _train_on_instance(qap_min: LawlerQap, variant: str, epochs: int,
                       seed: int) -> np.ndarray:
    """Self-supervised fit on a single minimization instance.

    The network consumes affinities rescaled to [0, 1] (the kernel scale is
    arbitrary) while the optimized objective keeps the original values.
    """
    scale = qap_min.k.vals.max()
    if scale <= 0:
        raise CliError("instance affinity is identically zero")
    k_in = SparseMatrix(qap_min.k.shape, qap_min.k.rows, qap_min.k.cols,
                        qap_min.k.vals / scale)
    graph = build_association(
        LawlerQap(k=k_in, n1=qap_min.n1, n2=qap_min.n2, sense="minimize")
    )
    config = config_for_variant(variant)
    params = NetParams.init(config, seed=seed)
    example = TrainingExample(graph=graph, qap=qap_min)
    train(params, [example], config, epochs=epochs, loss="qap", seed=seed)
    out = forward(params, graph, config)
    return discretize(out.scores.data)


def cmd_qaplib(args) -> int:
    solvers = _parse_solvers(args.solvers)
    for s in solvers:
        if s in NEURAL_SOLVERS and s != "ngm":
            raise CliError("only the plain network variant runs on these instances")
    entries = load_qaplib_dir(args.data)
    rows = []
    for entry in entries:
        qap_min = qaplib_to_lawler(entry["a"], entry["b"])
        qap_max = negate_affinity(qap_min)
        for solver in solvers:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                if solver in CLASSIC_SOLVERS:
                    x = _run_classic(solver, qap_max)
                else:
                    x = _train_on_instance(qap_min, solver, args.epochs, args.seed)
            perm = np.argmax(x, axis=1)
            obj = qaplib_objective(entry["a"], entry["b"], perm)
            row = {"name": entry["name"], "n": entry["n"], "solver": solver,
                   "objective": f"{obj:.6g}", "bound": "", "rel_gap": ""}
            if entry["bound"] is not None:
                row["bound"] = f"{entry['bound']:.6g}"
                row["rel_gap"] = f"{rel_obj_score(obj, entry['bound']):.6f}"
            rows.append(row)
            gap = f", gap {row['rel_gap']}" if row["rel_gap"] else ""
            print(f"{entry['name']} {solver}: objective {obj:.6g}{gap}")
    out = Path(args.out)
    _write_csv(out, ["name", "n", "solver", "objective", "bound", "rel_gap"], rows)
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "qaplib",
                    {"data": str(args.data), "solvers": solvers},
                    _hash_file(out))
    print(f"results written to {out}")
    return 0


# -- sync ------------------------------------------------------------------------


def cmd_sync(args) -> int:
    config = _parse_config(args.config, {"seed": args.seed,
                                         "sigma_noise": args.sigma_n})
    if config.outliers:
        raise CliError("joint matching needs outlier-free sets")
    params, net_config, _, meta = load_checkpoint(args.checkpoint)
    if net_config.hyper:
        raise CliError("joint matching runs on second-order checkpoints only")
    examples = gen_multi(config, args.graphs, args.examples)
    stages: list[tuple[str, NetParams]] = [("pairwise", params), ("synced", params)]
    if args.tune > 0:
        tuned = params.copy()
        tune_cfg = SynthConfig(**{**asdict(config), "seed": config.seed + 1})
        tune_examples = gen_multi(tune_cfg, args.graphs, args.tune_examples)
        train_nmgm(tuned, tune_examples, net_config, epochs=args.tune,
                   seed=args.seed)
        stages.append(("synced_tuned", tuned))
    rows = []
    for stage, stage_params in stages:
        for ex_idx, ex in enumerate(examples):
            if stage == "pairwise":
                scores = {
                    key: forward(stage_params, g, net_config).scores
                    for key, g in ex.graphs.items()
                }
            else:
                scores, _ = nmgm_forward(stage_params, ex, net_config)
            for key in pair_keys(ex.num_graphs):
                acc = matching_accuracy(scores[key].data, ex.gts[key])
                rows.append({
                    "example": ex_idx,
                    "pair": f"{key[0]}-{key[1]}",
                    "stage": stage,
                    "accuracy": f"{acc:.6f}",
                })
    out = Path(args.out)
    _write_csv(out, ["example", "pair", "stage", "accuracy"], rows)
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "sync",
                    {"checkpoint": str(args.checkpoint), "graphs": args.graphs,
                     "config": asdict(config)},
                    _hash_file(out))
    for stage, _ in stages:
        vals = [float(r["accuracy"]) for r in rows if r["stage"] == stage]
        print(f"{stage}: mean accuracy {np.mean(vals):.4f}")
    print(f"results written to {out}")
    return 0


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qapmatch",
        description="Graph matching solvers over quadratic assignment affinities.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", action="append", metavar="KEY=VALUE",
                       help="benchmark config override, repeatable")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--sigma-n", type=float, default=None,
                       help="coordinate noise level")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    add_config_flags(p)
    p.add_argument("--outliers", type=int, default=None)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a matching network")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--variant", required=True,
                   help=f"one of {', '.join(NEURAL_SOLVERS)}")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--loss", choices=("perm", "qap"), default="perm")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sets", help="comma-separated set indices (default all)")
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate solvers on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--solvers", required=True,
                   help="comma-separated: sm, rrwm, or a trained variant")
    p.add_argument("--checkpoint", help="checkpoint for the neural solver")
    p.add_argument("--sets", help="comma-separated set indices (default all)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("qaplib", help="run solvers on QAPLIB-format files")
    p.add_argument("--data", required=True, help="directory with .dat files")
    p.add_argument("--solvers", required=True)
    p.add_argument("--epochs", type=int, default=150,
                   help="per-instance training steps for the network solver")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_qaplib)

    p = sub.add_parser("sync", help="joint-matching evaluation")
    add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graphs", type=int, default=4)
    p.add_argument("--examples", type=int, default=10)
    p.add_argument("--tune", type=int, default=0,
                   help="fine-tuning epochs through synchronization")
    p.add_argument("--tune-examples", type=int, default=10)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_sync)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
