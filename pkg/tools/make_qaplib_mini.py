"""Generate the bundled QAPLIB-format fixture instances.

Creates small facility-location style instances (symmetric integer flow and
distance matrices, zero diagonals) plus .sln files holding the best
permutation found by multi-restart pairwise-swap descent.  The .sln
objective is always the objective of its own permutation, so the files are
self-consistent; the solutions are best-found, not certified optima.

Run from the repository root:  python3 tools/make_qaplib_mini.py
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parent.parent / "data" / "qaplib-mini"
SIZES = (12, 14, 16, 17, 18, 20)
RESTARTS = 40


def make_instance(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    flow = rng.integers(0, 10, (n, n))
    flow = np.triu(flow, 1)
    flow = flow + flow.T
    spots = rng.uniform(0.0, 10.0, (n, 2))
    dist = np.rint(
        np.sqrt(((spots[:, None, :] - spots[None, :, :]) ** 2).sum(-1))
    ).astype(np.int64)
    np.fill_diagonal(dist, 0)
    return flow.astype(np.int64), dist


def objective(a: np.ndarray, b: np.ndarray, perm: np.ndarray) -> int:
    return int(np.sum(a * b[np.ix_(perm, perm)]))


def swap_descent(a: np.ndarray, b: np.ndarray, perm: np.ndarray) -> np.ndarray:
    n = len(perm)
    perm = perm.copy()
    improved = True
    while improved:
        improved = False
        for r in range(n - 1):
            for s in range(r + 1, n):
                pr, ps = perm[r], perm[s]
                mask = np.ones(n, dtype=bool)
                mask[[r, s]] = False
                k = np.nonzero(mask)[0]
                pk = perm[k]
                delta = 2 * np.sum(
                    (a[r, k] - a[s, k]) * (b[ps, pk] - b[pr, pk])
                )
                delta += 2 * a[r, s] * (b[ps, pr] - b[pr, ps])
                if delta < 0:
                    perm[r], perm[s] = ps, pr
                    improved = True
    return perm


def best_found(a: np.ndarray, b: np.ndarray, seed: int) -> np.ndarray:
    n = a.shape[0]
    rng = np.random.default_rng(seed)
    best_perm = None
    best_val = None
    for _ in range(RESTARTS):
        perm = swap_descent(a, b, rng.permutation(n))
        val = objective(a, b, perm)
        if best_val is None or val < best_val:
            best_val, best_perm = val, perm
    return best_perm


def matrix_text(m: np.ndarray) -> str:
    return "\n".join(" ".join(f"{v:3d}" for v in row) for row in m)


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    for idx, n in enumerate(SIZES):
        rng = np.random.default_rng([11, n])
        a, b = make_instance(n, rng)
        perm = best_found(a, b, seed=100 + idx)
        val = objective(a, b, perm)
        name = f"mini{n}a"
        (OUT / f"{name}.dat").write_text(
            f"{n}\n\n{matrix_text(a)}\n\n{matrix_text(b)}\n"
        )
        one_indexed = " ".join(str(p + 1) for p in perm)
        (OUT / f"{name}.sln").write_text(f"{n} {val}\n{one_indexed}\n")
        print(f"{name}: objective {val}")


if __name__ == "__main__":
    main()
