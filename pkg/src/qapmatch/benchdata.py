"""Benchmark harnesses: synthetic point registration and QAPLIB-format files.

Synthetic sets follow a planted-correspondence protocol: a reference point
cloud is drawn once per set, every sample is a scaled and noise-perturbed
copy with optional outlier points appended, and the ground-truth assignment
is the identity block.  The QAPLIB side parses the classic plain-text
format and converts instances to the general quadratic form.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .affinity import (
    DEFAULT_SIGMA2,
    DEFAULT_SIGMA3,
    Graph,
    LawlerQap,
    build_affinity_matrix,
    build_affinity_tensor,
    build_association,
    delaunay,
    fully_connected,
)
from .multigraph import MultiExample, pair_keys
from .neural import HyperSupport, TrainingExample, build_hyper_support
from .numerics import SparseMatrix, kron


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic registration benchmark."""

    num_sets: int = 10
    train_per_set: int = 200
    test_per_set: int = 100
    inliers: int = 10
    outliers: int = 0
    sigma_noise: float = 0.0
    scale_low: float = 1.0
    scale_high: float = 1.0
    sigma2: float = DEFAULT_SIGMA2
    sigma3: float = DEFAULT_SIGMA3
    seed: int = 0

    def __post_init__(self):
        if self.inliers < 3:
            raise ValueError("need at least three inlier points")
        if self.outliers < 0 or self.sigma_noise < 0:
            raise ValueError("outliers and sigma_noise must be nonnegative")
        if not 0 < self.scale_low <= self.scale_high:
            raise ValueError("need 0 < scale_low <= scale_high")


@dataclass(frozen=True)
class MatchInstance:
    """One pairwise matching problem with its ground-truth assignment."""

    g1: Graph
    g2: Graph
    gt: np.ndarray
    qap: LawlerQap


@dataclass(frozen=True)
class SetData:
    """All samples sharing one reference cloud."""

    gt_points: np.ndarray
    reference: Graph
    train: list[MatchInstance]
    test: list[MatchInstance]


def _sample_instance(
    rng: np.random.Generator, gt_points: np.ndarray, reference: Graph,
    config: SynthConfig,
) -> MatchInstance:
    n = config.inliers
    u = rng.uniform(config.scale_low, config.scale_high)
    target = u * gt_points + rng.normal(0.0, config.sigma_noise, gt_points.shape)
    if config.outliers:
        target = np.vstack([target, rng.uniform(0.0, 1.0, (config.outliers, 2))])
    g2 = fully_connected(target)
    gt = np.zeros((n, n + config.outliers))
    gt[np.arange(n), np.arange(n)] = 1.0
    qap = build_affinity_matrix(reference, g2, sigma2=config.sigma2)
    return MatchInstance(g1=reference, g2=g2, gt=gt, qap=qap)


def gen_synthetic(config: SynthConfig) -> list[SetData]:
    """Deterministic benchmark generation; each set gets its own seed stream."""
    sets = []
    for set_seq in np.random.SeedSequence(config.seed).spawn(config.num_sets):
        gt_seq, train_seq, test_seq = set_seq.spawn(3)
        gt_points = np.random.default_rng(gt_seq).uniform(
            0.0, 1.0, (config.inliers, 2)
        )
        reference = delaunay(gt_points)
        train_rng = np.random.default_rng(train_seq)
        test_rng = np.random.default_rng(test_seq)
        train = [
            _sample_instance(train_rng, gt_points, reference, config)
            for _ in range(config.train_per_set)
        ]
        test = [
            _sample_instance(test_rng, gt_points, reference, config)
            for _ in range(config.test_per_set)
        ]
        sets.append(SetData(
            gt_points=gt_points, reference=reference, train=train, test=test
        ))
    return sets


def to_training_example(
    inst: MatchInstance, with_hyper: bool = False,
    sigma3: float = DEFAULT_SIGMA3,
) -> TrainingExample:
    """Attach the association graph (and optionally the third-order support)."""
    hyper: HyperSupport | None = None
    if with_hyper:
        hyper = build_hyper_support(
            build_affinity_tensor(inst.g1, inst.g2, sigma3=sigma3)
        )
    return TrainingExample(
        graph=build_association(inst.qap), gt=inst.gt,
        qap=inst.qap, hyper=hyper,
    )


def gen_multi(
    config: SynthConfig, num_graphs: int, num_examples: int
) -> list[MultiExample]:
    """Joint-matching sets: several noisy copies of one reference cloud.

    Outlier-free by construction (the joint matrix needs square blocks).
    Within each example, pair (i, j) matches the triangulated copy i
    against the complete graph over copy j; all ground truths are the
    identity because every copy keeps the reference node order.
    """
    if config.outliers != 0:
        raise ValueError("joint matching requires outlier-free sets")
    if num_graphs < 2:
        raise ValueError("need at least two graphs")
    n = config.inliers
    out = []
    for ex_seq in np.random.SeedSequence(config.seed).spawn(num_examples):
        gt_seq, sample_seq = ex_seq.spawn(2)
        gt_points = np.random.default_rng(gt_seq).uniform(0.0, 1.0, (n, 2))
        rng = np.random.default_rng(sample_seq)
        clouds = [
            rng.uniform(config.scale_low, config.scale_high) * gt_points
            + rng.normal(0.0, config.sigma_noise, gt_points.shape)
            for _ in range(num_graphs)
        ]
        graphs = {}
        gts = {}
        for (i, j) in pair_keys(num_graphs):
            qap = build_affinity_matrix(
                delaunay(clouds[i]), fully_connected(clouds[j]),
                sigma2=config.sigma2,
            )
            graphs[(i, j)] = build_association(qap)
            gts[(i, j)] = np.eye(n)
        out.append(MultiExample(
            num_graphs=num_graphs, num_nodes=n, graphs=graphs, gts=gts
        ))
    return out


# -- instance and dataset files -------------------------------------------------


def instance_to_dict(inst: MatchInstance, sigma2: float) -> dict:
    return {
        "points1": inst.g1.points.tolist(),
        "kind1": "delaunay" if inst.g1.triangles is not None else "complete",
        "points2": inst.g2.points.tolist(),
        "kind2": "delaunay" if inst.g2.triangles is not None else "complete",
        "gt": np.argwhere(inst.gt == 1.0).tolist(),
        "sigma2": sigma2,
    }


def instance_from_dict(raw: dict) -> MatchInstance:
    builders = {"delaunay": delaunay, "complete": fully_connected}
    g1 = builders[raw["kind1"]](np.asarray(raw["points1"], dtype=np.float64))
    g2 = builders[raw["kind2"]](np.asarray(raw["points2"], dtype=np.float64))
    gt = np.zeros((g1.num_nodes, g2.num_nodes))
    for i, a in raw["gt"]:
        gt[int(i), int(a)] = 1.0
    qap = build_affinity_matrix(g1, g2, sigma2=float(raw["sigma2"]))
    return MatchInstance(g1=g1, g2=g2, gt=gt, qap=qap)


def write_dataset(config: SynthConfig, root) -> Path:
    """Generate and store a dataset as <root>/set<k>/{train,test}/*.json."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    sets = gen_synthetic(config)
    for k, data in enumerate(sets):
        for split, items in (("train", data.train), ("test", data.test)):
            d = root / f"set{k}" / split
            d.mkdir(parents=True, exist_ok=True)
            for idx, inst in enumerate(items):
                path = d / f"inst{idx:04d}.json"
                path.write_text(
                    json.dumps(instance_to_dict(inst, config.sigma2))
                )
    manifest = {"config": asdict(config), "num_sets": config.num_sets}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def load_dataset(root) -> tuple[SynthConfig, list[dict[str, list[MatchInstance]]]]:
    """Read a stored dataset back; returns the config and per-set splits."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    config = SynthConfig(**manifest["config"])
    sets = []
    for k in range(manifest["num_sets"]):
        splits = {}
        for split in ("train", "test"):
            d = root / f"set{k}" / split
            items = [
                instance_from_dict(json.loads(p.read_text()))
                for p in sorted(d.glob("inst*.json"))
            ]
            splits[split] = items
        sets.append(splits)
    return config, sets


# -- QAPLIB-format files ---------------------------------------------------------


def parse_qaplib(text: str) -> tuple[int, np.ndarray, np.ndarray]:
    """Instance file: size n followed by two n*n matrices, any whitespace."""
    tokens = text.split()
    if not tokens:
        raise ValueError("empty instance file")
    n = int(tokens[0])
    need = 1 + 2 * n * n
    if len(tokens) < need:
        raise ValueError(f"instance file truncated: {len(tokens)} tokens, "
                         f"expected {need}")
    vals = np.array([float(t) for t in tokens[1:need]])
    a = vals[: n * n].reshape(n, n)
    b = vals[n * n :].reshape(n, n)
    return n, a, b


def parse_sln(text: str) -> tuple[int, float, np.ndarray]:
    """Solution file: size and objective, then a 1-indexed permutation."""
    tokens = text.split()
    if len(tokens) < 2:
        raise ValueError("solution file too short")
    n = int(tokens[0])
    objective = float(tokens[1])
    if len(tokens) < 2 + n:
        raise ValueError("solution file truncated")
    perm = np.array([int(t) for t in tokens[2 : 2 + n]], dtype=np.int64) - 1
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError("solution is not a permutation of 1..n")
    return n, objective, perm


def qaplib_objective(a: np.ndarray, b: np.ndarray, perm: np.ndarray) -> float:
    """sum_ij a[i, j] * b[perm[i], perm[j]] (the minimized quantity)."""
    perm = np.asarray(perm, dtype=np.int64)
    return float(np.sum(a * b[np.ix_(perm, perm)]))


def perm_to_assignment(perm: np.ndarray) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    n = perm.shape[0]
    x = np.zeros((n, n))
    x[np.arange(n), perm] = 1.0
    return x


def qaplib_to_lawler(a: np.ndarray, b: np.ndarray,
                     dim_cap: int | None = None) -> LawlerQap:
    """General quadratic form whose value at an assignment equals the
    facility-location objective; sense is minimize."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("a and b must be square matrices of the same size")
    kwargs = {} if dim_cap is None else {"dim_cap": dim_cap}
    k = kron(b, a, **kwargs)
    k = 0.5 * (k + k.T)
    n = a.shape[0]
    return LawlerQap(k=SparseMatrix.from_dense(k), n1=n, n2=n, sense="minimize")


def negate_affinity(qap: LawlerQap) -> LawlerQap:
    """Flip a minimization instance into an equivalent-ranking maximization
    one by replacing K with (max K) - K entrywise (dense)."""
    if qap.sense != "minimize":
        raise ValueError("expected a minimization instance")
    dense = qap.k.to_dense()
    flipped = dense.max() - dense
    return LawlerQap(
        k=SparseMatrix.from_dense(flipped, keep_zeros=True),
        n1=qap.n1, n2=qap.n2, sense="maximize",
    )


def load_qaplib_dir(path) -> list[dict]:
    """All .dat instances in a directory, joined with .sln files if present."""
    path = Path(path)
    out = []
    for dat in sorted(path.glob("*.dat")):
        n, a, b = parse_qaplib(dat.read_text())
        entry = {"name": dat.stem, "n": n, "a": a, "b": b,
                 "bound": None, "perm": None}
        sln = dat.with_suffix(".sln")
        if sln.exists():
            sn, objective, perm = parse_sln(sln.read_text())
            if sn != n:
                raise ValueError(f"{sln.name}: size mismatch with {dat.name}")
            claimed = qaplib_objective(a, b, perm)
            if abs(claimed - objective) > 1e-6 * max(1.0, abs(objective)):
                raise ValueError(
                    f"{sln.name}: stated objective {objective} does not match "
                    f"its own permutation ({claimed})"
                )
            entry["bound"] = objective
            entry["perm"] = perm
        out.append(entry)
    if not out:
        raise ValueError(f"no .dat files under {path}")
    return out


def rel_obj_score(objective: float, bound: float) -> float:
    """Relative gap (objective - bound) / objective for minimization runs;
    negative values mean the solver beat the reference bound."""
    if objective == 0.0:
        if bound == 0.0:
            return 0.0
        raise ValueError("zero objective with nonzero bound")
    if objective < 0:
        raise ValueError("objective must be nonnegative")
    return float((objective - bound) / objective)
