"""Joint matching of several graphs with spectral cycle-consistency.

Pairwise score matrices are assembled into one symmetric block matrix whose
dominant eigenspace encodes a cycle-consistent matching; projecting onto
that space and renormalizing each block repairs pairwise mistakes.  The
projection is differentiable, so the pairwise network can be fine-tuned
through it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as ag
from .affinity import AssociationGraph
from .grad import Tensor
from .neural import (
    Adam,
    EpochRecord,
    NetConfig,
    NetParams,
    doubly_stochastic,
    forward,
    matching_accuracy,
    perm_loss,
)
from .numerics import sym_eig_full

DEFAULT_DELTA = 1e-4


@dataclass(frozen=True)
class SyncInfo:
    """Diagnostics from one synchronization pass.

    used_fallback: the top eigenvalues were one near-flat cluster, so the
    input blocks were returned untouched.  grad_detached: the spectrum was
    too close to degenerate for a stable eigenvector derivative, so the
    backward pass treats the projection as constant.
    """

    used_fallback: bool
    grad_detached: bool
    eigenvalues: np.ndarray
    cluster_width: float
    min_gap: float
    separation: float


def pair_keys(num_graphs: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(num_graphs) for j in range(i + 1, num_graphs)]


def assemble_joint(
    blocks: dict[tuple[int, int], Tensor], num_graphs: int, n: int
) -> Tensor:
    """Symmetric (m*n, m*n) joint matrix from upper-triangle blocks.

    Diagonal blocks are identities; lower blocks mirror the upper ones.
    """
    expected = set(pair_keys(num_graphs))
    if set(blocks) != expected:
        raise ValueError("blocks must cover exactly the pairs i < j")
    eye = Tensor.const(np.eye(n))
    rows = []
    for i in range(num_graphs):
        row = []
        for j in range(num_graphs):
            if i == j:
                row.append(eye)
            elif i < j:
                row.append(blocks[(i, j)])
            else:
                row.append(ag.transpose(blocks[(j, i)]))
        rows.append(ag.concat(row, axis=1))
    return ag.concat(rows, axis=0)


def _eig_top_u(joint: Tensor, k: int, detach: bool) -> tuple[Tensor, np.ndarray]:
    """Top-k eigenvector block of a symmetric tape matrix.

    The backward rule needs the full spectrum: with J = V diag(w) V^T and
    upstream gradient G on U = V[:, :k], dL/dJ is V (F * (V^T G_pad)) V^T
    symmetrized, where F_ab = 1 / (w_b - w_a) off the diagonal.  Near-equal
    eigenvalue pairs make F blow up, so callers pass detach=True when the
    spectrum is too degenerate and the projection is treated as constant.
    """
    w, v = sym_eig_full(joint.data)
    u = v[:, :k].copy()
    if detach or not joint.requires_grad:
        return Tensor.const(u), w

    out = Tensor(u, requires_grad=True, parents=(joint,))

    def bw(g):
        size = joint.data.shape[0]
        g_pad = np.zeros((size, size))
        g_pad[:, :k] = g
        diff = w[None, :] - w[:, None]
        with np.errstate(divide="ignore"):
            f = np.where(np.abs(diff) > 1e-12, 1.0 / diff, 0.0)
        inner = f * (v.T @ g_pad)
        grad_j = v @ inner @ v.T
        return (0.5 * (grad_j + grad_j.T),)

    out._backward = bw
    return out, w


def synchronize_ops(
    blocks: dict[tuple[int, int], Tensor],
    num_graphs: int,
    n: int,
    alpha_hat: float = 20.0,
    delta: float = DEFAULT_DELTA,
    sinkhorn_iters: int = 10,
    pad: float = 1e-3,
) -> tuple[dict[tuple[int, int], Tensor], SyncInfo]:
    """Differentiable synchronization of pairwise score blocks.

    Projects the joint matrix onto its top-n eigenspace scaled by the graph
    count, then renormalizes each block to doubly stochastic form.  When the
    top-n eigenvalues form one near-flat cluster there is no preferred
    correction direction and the inputs are returned unchanged.
    """
    for key, b in blocks.items():
        if b.data.shape != (n, n):
            raise ValueError(f"block {key} is not {n}x{n}")
    joint = assemble_joint(blocks, num_graphs, n)
    size = num_graphs * n
    eigvals_probe, _ = sym_eig_full(joint.data)
    top = eigvals_probe[:n]
    cluster_width = float(top[0] - top[-1])
    min_gap = float(np.min(top[:-1] - top[1:])) if n > 1 else np.inf
    separation = float(top[-1] - eigvals_probe[n]) if size > n else np.inf
    detach = min_gap < delta or separation < delta
    if cluster_width < delta:
        info = SyncInfo(
            used_fallback=True,
            grad_detached=False,
            eigenvalues=top.copy(),
            cluster_width=cluster_width,
            min_gap=min_gap,
            separation=separation,
        )
        return dict(blocks), info
    u, w = _eig_top_u(joint, n, detach)
    s_hat = float(num_graphs) * (u @ ag.transpose(u))
    refined: dict[tuple[int, int], Tensor] = {}
    for (i, j) in pair_keys(num_graphs):
        block = s_hat[i * n : (i + 1) * n, j * n : (j + 1) * n]
        refined[(i, j)] = doubly_stochastic(
            alpha_hat * block, n, n, sinkhorn_iters, pad
        )
    info = SyncInfo(
        used_fallback=False,
        grad_detached=detach,
        eigenvalues=w[:n].copy(),
        cluster_width=cluster_width,
        min_gap=min_gap,
        separation=separation,
    )
    return refined, info


def synchronize(
    grid: np.ndarray,
    alpha_hat: float = 20.0,
    delta: float = DEFAULT_DELTA,
    sinkhorn_iters: int = 10,
    pad: float = 1e-3,
) -> tuple[np.ndarray, SyncInfo]:
    """Plain-array synchronization of an (m, m, n, n) score grid.

    Validates that diagonal blocks are identities and that the grid is
    block-symmetric, then runs the differentiable path on constants.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 4 or grid.shape[0] != grid.shape[1] \
            or grid.shape[2] != grid.shape[3]:
        raise ValueError("grid must have shape (m, m, n, n)")
    m, _, n, _ = grid.shape
    eye = np.eye(n)
    for i in range(m):
        if not np.allclose(grid[i, i], eye, atol=1e-12):
            raise ValueError(f"diagonal block {i} is not the identity")
        for j in range(i + 1, m):
            if not np.allclose(grid[j, i], grid[i, j].T, atol=1e-12):
                raise ValueError(f"blocks ({i},{j}) and ({j},{i}) are not transposes")
    blocks = {
        (i, j): Tensor.const(grid[i, j]) for (i, j) in pair_keys(m)
    }
    refined, info = synchronize_ops(
        blocks, m, n, alpha_hat=alpha_hat, delta=delta,
        sinkhorn_iters=sinkhorn_iters, pad=pad,
    )
    out = np.zeros_like(grid)
    for i in range(m):
        out[i, i] = eye
    for (i, j), t in refined.items():
        out[i, j] = t.data
        out[j, i] = t.data.T
    return out, info


# -- end-to-end forward and fine-tuning ---------------------------------------


@dataclass(frozen=True)
class MultiExample:
    """A set of graphs to match jointly: one association graph and one
    ground-truth assignment per pair i < j, all square of the same size."""

    num_graphs: int
    num_nodes: int
    graphs: dict[tuple[int, int], AssociationGraph]
    gts: dict[tuple[int, int], np.ndarray] | None = None

    def __post_init__(self):
        expected = set(pair_keys(self.num_graphs))
        if set(self.graphs) != expected:
            raise ValueError("graphs must cover exactly the pairs i < j")
        for key, g in self.graphs.items():
            if g.n1 != self.num_nodes or g.n2 != self.num_nodes:
                raise ValueError(f"pair {key} is not square of size {self.num_nodes}")


def nmgm_forward(
    params: NetParams,
    example: MultiExample,
    config: NetConfig,
    delta: float = DEFAULT_DELTA,
) -> tuple[dict[tuple[int, int], Tensor], SyncInfo]:
    """Pairwise network on every pair, then spectral synchronization."""
    blocks = {
        key: forward(params, g, config).scores
        for key, g in example.graphs.items()
    }
    return synchronize_ops(
        blocks,
        example.num_graphs,
        example.num_nodes,
        alpha_hat=config.alpha_hat,
        delta=delta,
        sinkhorn_iters=config.sinkhorn_iters,
        pad=config.pad,
    )


def train_nmgm(
    params: NetParams,
    examples: list[MultiExample],
    config: NetConfig,
    epochs: int,
    optimizer: Adam | None = None,
    seed: int = 0,
    delta: float = DEFAULT_DELTA,
) -> list[EpochRecord]:
    """Fine-tune a pairwise net through synchronization.

    The loss is the sum of assignment cross entropies over all pairs of the
    set.  Start from pretrained pairwise parameters; training from scratch
    through the eigendecomposition is much slower to move.
    """
    if not examples:
        raise ValueError("no training examples")
    for ex in examples:
        if ex.gts is None:
            raise ValueError("fine-tuning needs ground truth for every pair")
    opt = optimizer if optimizer is not None else Adam()
    history: list[EpochRecord] = []
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(examples))
        losses = []
        accs = []
        for idx in order:
            ex = examples[idx]
            params.zero_grad()
            refined, _ = nmgm_forward(params, ex, config, delta=delta)
            total = None
            for key in pair_keys(ex.num_graphs):
                term = perm_loss(refined[key], ex.gts[key])
                total = term if total is None else total + term
            val = float(total.data)
            if not np.isfinite(val):
                raise RuntimeError(f"training diverged at epoch {epoch}: loss {val}")
            total.backward()
            opt.step(params)
            losses.append(val)
            accs.append(float(np.mean([
                matching_accuracy(refined[k].data, ex.gts[k])
                for k in pair_keys(ex.num_graphs)
            ])))
        history.append(EpochRecord(
            epoch=epoch,
            mean_loss=float(np.mean(losses)),
            mean_accuracy=float(np.mean(accs)),
        ))
    return history
