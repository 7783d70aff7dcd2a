"""Geometry, affinity kernels, QAP objectives, and association graphs.

Takes 2-d point sets to graphs (incremental Delaunay triangulation for the
reference side, fully connected for the target side), builds second-order
edge-length affinity matrices and third-order angle-sine affinity tensors,
and assembles the association graph the learned solvers run on.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .numerics import SparseMatrix, SparseTensor3, kron

DEFAULT_SIGMA2 = 5e-7
DEFAULT_SIGMA3 = 0.1


class DegenerateGeometry(ValueError):
    """Point configuration too degenerate to triangulate."""


@dataclass(frozen=True)
class Graph:
    """Undirected geometric graph: points, edges (i < j), edge lengths.

    `triangles` is populated by the Delaunay constructor and is what the
    third-order affinity uses as reference hyperedges.
    """

    points: np.ndarray
    edges: np.ndarray
    edge_feature: np.ndarray
    triangles: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        feat = np.asarray(self.edge_feature, dtype=np.float64)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "edge_feature", feat)
        if pts.ndim != 2 or pts.shape[1] != 2 or not np.all(np.isfinite(pts)):
            raise ValueError("points must be a finite (n, 2) array")
        if edges.shape[0] != feat.shape[0]:
            raise ValueError("edge_feature length must match number of edges")
        if edges.size:
            if edges.min() < 0 or edges.max() >= len(pts):
                raise ValueError("edge index out of range")
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise ValueError("edges must be stored with i < j")

    @property
    def num_nodes(self) -> int:
        return int(self.points.shape[0])


def _edge_lengths(points: np.ndarray, edges: np.ndarray) -> np.ndarray:
    d = points[edges[:, 0]] - points[edges[:, 1]]
    return np.sqrt((d * d).sum(axis=1))


def fully_connected(points) -> Graph:
    """Complete graph over the point set, edge feature = Euclidean length."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    iu = np.triu_indices(n, k=1)
    edges = np.stack([iu[0], iu[1]], axis=1)
    return Graph(points, edges, _edge_lengths(points, edges))


def delaunay(points) -> Graph:
    """Delaunay triangulation by incremental insertion (Bowyer-Watson).

    Degenerate configurations (cocircular or collinear points) are retried
    with a deterministic jitter, increasing from 1e-9 of the coordinate
    span; the returned edges and features always refer to the original
    coordinates.  Fully collinear inputs raise DegenerateGeometry.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("points must be (n, 2)")
    n = points.shape[0]
    if n < 3:
        raise ValueError("need at least three points to triangulate")
    if not np.all(np.isfinite(points)):
        raise ValueError("points contain NaN or Inf")
    span = float(max(np.ptp(points[:, 0]), np.ptp(points[:, 1]), 1e-12))
    last_err: Exception | None = None
    for attempt, scale in enumerate((0.0, 1e-9, 1e-8, 1e-7)):
        pts = points
        if scale > 0.0:
            jit_rng = np.random.default_rng([7919, attempt])
            pts = points + jit_rng.uniform(-1.0, 1.0, points.shape) * scale * span
        try:
            tris = _bowyer_watson(pts)
        except DegenerateGeometry as err:
            last_err = err
            continue
        if not tris:
            last_err = DegenerateGeometry("no valid triangles (collinear input?)")
            continue
        edge_set = set()
        for (a, b, c) in tris:
            edge_set.add((min(a, b), max(a, b)))
            edge_set.add((min(b, c), max(b, c)))
            edge_set.add((min(a, c), max(a, c)))
        edges = np.array(sorted(edge_set), dtype=np.int64)
        triangles = np.array(sorted(tuple(sorted(t)) for t in tris), dtype=np.int64)
        return Graph(points, edges, _edge_lengths(points, edges), triangles)
    raise DegenerateGeometry(f"triangulation failed after jitter retries: {last_err}")


def _bowyer_watson(pts: np.ndarray) -> list[tuple[int, int, int]]:
    n = pts.shape[0]
    cx, cy = pts.mean(axis=0)
    span = float(max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-12))
    big = 64.0 * span
    # Three synthetic vertices far outside the cloud enclose every point.
    sup = np.array(
        [[cx - big, cy - 0.7 * big], [cx + big, cy - 0.7 * big], [cx, cy + big]]
    )
    allp = np.vstack([pts, sup])
    s0, s1, s2 = n, n + 1, n + 2
    triangles: list[tuple[int, int, int]] = [(s0, s1, s2)]
    for p in range(n):
        bad = []
        for t in triangles:
            if _in_circumcircle(allp, t, p):
                bad.append(t)
        boundary: dict[tuple[int, int], int] = {}
        for t in bad:
            for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                key = (min(e), max(e))
                boundary[key] = boundary.get(key, 0) + 1
        cavity = [e for e, cnt in boundary.items() if cnt == 1]
        triangles = [t for t in triangles if t not in bad]
        for (a, b) in cavity:
            triangles.append((a, b, p))
    return [t for t in triangles if max(t) < n]


def _in_circumcircle(pts: np.ndarray, tri: tuple[int, int, int], p: int) -> bool:
    ax, ay = pts[tri[0]]
    bx, by = pts[tri[1]]
    cx, cy = pts[tri[2]]
    px, py = pts[p]
    # Orient counter-clockwise so the incircle determinant sign is meaningful.
    area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    area_scale = abs(bx - ax) * abs(cy - ay) + abs(by - ay) * abs(cx - ax)
    if abs(area2) <= 1e-12 * max(area_scale, 1e-300):
        raise DegenerateGeometry("collinear triangle during insertion")
    if area2 < 0:
        bx, by, cx, cy = cx, cy, bx, by
    adx, ady = ax - px, ay - py
    bdx, bdy = bx - px, by - py
    cdx, cdy = cx - px, cy - py
    alift = adx * adx + ady * ady
    blift = bdx * bdx + bdy * bdy
    clift = cdx * cdx + cdy * cdy
    t1 = adx * (bdy * clift - cdy * blift)
    t2 = ady * (bdx * clift - cdx * blift)
    t3 = alift * (bdx * cdy - cdx * bdy)
    det = t1 - t2 + t3
    err = 1e-11 * (abs(t1) + abs(t2) + abs(t3))
    if abs(det) <= err:
        raise DegenerateGeometry("cocircular points during insertion")
    return det > 0


# -- correspondence indexing --------------------------------------------------
#
# A correspondence (i, a) between node i of the reference graph (n1 nodes)
# and node a of the target graph maps to flat index a * n1 + i, the
# column-stacked ordering of an n1 x n2 assignment matrix.


def vec_assignment(x: np.ndarray) -> np.ndarray:
    """Column-stacked flattening of an assignment-shaped matrix."""
    return np.asarray(x, dtype=np.float64).T.reshape(-1)


def unvec_assignment(v: np.ndarray, n1: int, n2: int) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(n2, n1).T


@dataclass(frozen=True)
class LawlerQap:
    """General QAP: optimize vec(X)^T K vec(X) over assignment matrices X."""

    k: SparseMatrix
    n1: int
    n2: int
    sense: str = "maximize"

    def __post_init__(self):
        if self.sense not in ("maximize", "minimize"):
            raise ValueError("sense must be maximize or minimize")
        size = self.n1 * self.n2
        if self.k.shape != (size, size):
            raise ValueError(
                f"affinity must be {size}x{size} for n1={self.n1}, n2={self.n2}"
            )


@dataclass(frozen=True)
class KoopmansBeckmannQap:
    """Factored QAP: tr(X^T F1 X F2) + tr(Kp^T X), square instances."""

    f1: np.ndarray
    f2: np.ndarray
    kp: np.ndarray | None = None
    sense: str = "maximize"

    def __post_init__(self):
        f1 = np.asarray(self.f1, dtype=np.float64)
        f2 = np.asarray(self.f2, dtype=np.float64)
        object.__setattr__(self, "f1", f1)
        object.__setattr__(self, "f2", f2)
        if f1.ndim != 2 or f1.shape[0] != f1.shape[1] or f1.shape != f2.shape:
            raise ValueError("f1 and f2 must be square matrices of equal size")
        if self.kp is not None:
            kp = np.asarray(self.kp, dtype=np.float64)
            object.__setattr__(self, "kp", kp)
            if kp.shape != f1.shape:
                raise ValueError("kp must match f1/f2 shape")

    @property
    def n(self) -> int:
        return int(self.f1.shape[0])


def ordered_edges(g: Graph) -> tuple[np.ndarray, np.ndarray]:
    """Both orientations of every edge, with the feature duplicated."""
    e = np.vstack([g.edges, g.edges[:, ::-1]])
    f = np.concatenate([g.edge_feature, g.edge_feature])
    return e, f


def build_affinity_matrix(
    g1: Graph,
    g2: Graph,
    sigma2: float = DEFAULT_SIGMA2,
    node_aff: np.ndarray | None = None,
) -> LawlerQap:
    """Edge-length affinity K[ia, jb] = exp(-(len1_ij - len2_ab)^2 / sigma2).

    One entry is stored for every (reference edge, target edge) pair in both
    orientations, even when the kernel underflows to zero in float64: the
    stored support is the combinatorial structure of the two edge sets,
    which is what the association graph adjacency is defined on.  Optional
    node affinities fill the diagonal (only positive values are stored, so
    an all-zero table leaves the diagonal empty).
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    n1, n2 = g1.num_nodes, g2.num_nodes
    size = n1 * n2
    e1, f1 = ordered_edges(g1)
    e2, f2 = ordered_edges(g2)
    if e1.size == 0 or e2.size == 0:
        raise ValueError("both graphs need at least one edge")
    diff = f1[:, None] - f2[None, :]
    vals = np.exp(-(diff * diff) / sigma2)
    i = e1[:, 0][:, None]
    j = e1[:, 1][:, None]
    a = e2[:, 0][None, :]
    b = e2[:, 1][None, :]
    rows = (a * n1 + i).ravel()
    cols = (b * n1 + j).ravel()
    vals = vals.ravel()
    if node_aff is not None:
        node_aff = np.asarray(node_aff, dtype=np.float64)
        if node_aff.shape != (n1, n2):
            raise ValueError("node_aff must be (n1, n2)")
        dvals = vec_assignment(node_aff)
        didx = np.nonzero(dvals)[0]
        rows = np.concatenate([rows, didx])
        cols = np.concatenate([cols, didx])
        vals = np.concatenate([vals, dvals[didx]])
    k = SparseMatrix((size, size), rows, cols, vals)
    return LawlerQap(k=k, n1=n1, n2=n2, sense="maximize")


def _triangle_sines(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Sine of the interior angle at each vertex of each (t, 3) triangle.

    Degenerate corners (coincident points) get sine 0 and a warning.
    """
    p0 = points[tri[:, 0]]
    p1 = points[tri[:, 1]]
    p2 = points[tri[:, 2]]
    out = np.zeros((tri.shape[0], 3))
    warned = False
    for q, (a, b, c) in enumerate(((p0, p1, p2), (p1, p0, p2), (p2, p0, p1))):
        u = b - a
        v = c - a
        lu = np.sqrt((u * u).sum(axis=1))
        lv = np.sqrt((v * v).sum(axis=1))
        denom = lu * lv
        cross = np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
        bad = denom <= 0
        if np.any(bad) and not warned:
            warnings.warn("degenerate triangle: undefined angle treated as sin 0",
                          RuntimeWarning, stacklevel=3)
            warned = True
        safe = np.where(bad, 1.0, denom)
        out[:, q] = np.where(bad, 0.0, cross / safe)
    return out


def build_affinity_tensor(
    g1: Graph, g2: Graph, sigma3: float = DEFAULT_SIGMA3
) -> SparseTensor3:
    """Third-order affinity from angle sines.

    Hyperedges on the reference side are its triangulation triangles; on the
    target side, every ordered triple of distinct nodes.  The value for a
    correspondence triple is exp(-sum_q |sin t1_q - sin t2_q| / sigma3^2).
    """
    if sigma3 <= 0:
        raise ValueError("sigma3 must be positive")
    if g1.triangles is None or len(g1.triangles) == 0:
        raise ValueError("reference graph has no triangles; triangulate it first")
    n1, n2 = g1.num_nodes, g2.num_nodes
    if n2 < 3:
        raise ValueError("target graph needs at least three nodes")
    size = n1 * n2
    tri1 = np.asarray(g1.triangles, dtype=np.int64)
    sines1 = _triangle_sines(g1.points, tri1)

    # All ordered triples of distinct target nodes, with per-slot sines.
    from itertools import combinations, permutations

    combos = np.array(list(combinations(range(n2), 3)), dtype=np.int64)
    sines2_combo = _triangle_sines(g2.points, combos)
    tri2_list = []
    sines2_list = []
    for perm in permutations(range(3)):
        tri2_list.append(combos[:, perm])
        sines2_list.append(sines2_combo[:, perm])
    tri2 = np.vstack(tri2_list)
    sines2 = np.vstack(sines2_list)

    denom = sigma3 * sigma3
    idx1_parts, idx2_parts, idx3_parts, val_parts = [], [], [], []
    for t in range(tri1.shape[0]):
        i, j, k = tri1[t]
        s1 = sines1[t]
        dist = np.abs(s1[None, :] - sines2).sum(axis=1)
        vals = np.exp(-dist / denom)
        idx1_parts.append(tri2[:, 0] * n1 + i)
        idx2_parts.append(tri2[:, 1] * n1 + j)
        idx3_parts.append(tri2[:, 2] * n1 + k)
        val_parts.append(vals)
    return SparseTensor3(
        dim=size,
        idx1=np.concatenate(idx1_parts),
        idx2=np.concatenate(idx2_parts),
        idx3=np.concatenate(idx3_parts),
        vals=np.concatenate(val_parts),
    )


def lawler_objective(k: SparseMatrix, x: np.ndarray) -> float:
    """vec(X)^T K vec(X) for an assignment-shaped X."""
    v = vec_assignment(x)
    if v.shape[0] != k.shape[0]:
        raise ValueError("assignment size does not match affinity matrix")
    return float(np.sum(k.vals * v[k.rows] * v[k.cols]))


def kb_objective(
    f1: np.ndarray, f2: np.ndarray, kp: np.ndarray | None, x: np.ndarray
) -> float:
    """tr(X^T F1 X F2) plus the linear term tr(Kp^T X)."""
    x = np.asarray(x, dtype=np.float64)
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    out = float(np.trace(x.T @ f1 @ x @ f2))
    if kp is not None:
        out += float(np.sum(np.asarray(kp, dtype=np.float64) * x))
    return out


def kb_to_lawler(
    f1, f2, kp=None, sense: str = "maximize", dim_cap: int | None = None
) -> LawlerQap:
    """Expand a factored instance into the general quadratic form.

    The quadratic coefficient matrix is kron(F2^T, F1) under column-stacked
    assignment flattening (the transpose keeps tr(X^T F1 X F2) exact for
    asymmetric F2); it is symmetrized, which preserves the quadratic form,
    and the linear term lands on the diagonal.  Exact zeros are dropped.
    """
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    kwargs = {} if dim_cap is None else {"dim_cap": dim_cap}
    k = kron(f2.T, f1, **kwargs)
    k = 0.5 * (k + k.T)
    if kp is not None:
        kp = np.asarray(kp, dtype=np.float64)
        k[np.diag_indices_from(k)] += vec_assignment(kp)
    n = f1.shape[0]
    return LawlerQap(k=SparseMatrix.from_dense(k), n1=n, n2=n, sense=sense)


def hyper_objective(h: SparseTensor3, x: np.ndarray) -> float:
    """Third-order objective: sum over the full symmetric tensor of
    H[i,j,k] * v[i] * v[j] * v[k] with v = vec(X)."""
    v = np.asarray(x, dtype=np.float64).T.reshape(-1)
    if v.shape[0] != h.dim:
        raise ValueError("assignment size does not match tensor dimension")
    ii, jj, kk, vv = h.expand_ordered()
    return float(np.sum(vv * v[ii] * v[jj] * v[kk]))


@dataclass
class AssociationGraph:
    """Correspondence graph a matching network runs on.

    Vertices are correspondences (i, a); w holds the off-diagonal affinity
    values on their structural support, a_norm the support adjacency with
    each column scaled to sum to one, and v0 the initial vertex features
    (the affinity diagonal, or all ones when that diagonal is empty).
    """

    n1: int
    n2: int
    w: SparseMatrix
    a_norm: SparseMatrix
    v0: np.ndarray
    _dense_prop: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def num_vertices(self) -> int:
        return self.n1 * self.n2

    def dense_propagation(self) -> np.ndarray:
        """Dense (A_norm (*) W) used by the second-order message pass."""
        if self._dense_prop is None:
            n = self.num_vertices
            p = np.zeros((n, n))
            p[self.w.rows, self.w.cols] = self.a_norm.vals * self.w.vals
            self._dense_prop = p
        return self._dense_prop


def build_association(qap: LawlerQap) -> AssociationGraph:
    """Split a Lawler affinity into the association-graph ingredients."""
    k = qap.k
    n = k.shape[0]
    off = k.rows != k.cols
    if not np.any(off):
        raise ValueError("affinity has empty off-diagonal support; "
                         "association graph would have no edges")
    rows, cols, vals = k.rows[off], k.cols[off], k.vals[off]
    w = SparseMatrix((n, n), rows, cols, vals)
    col_deg = np.bincount(cols, minlength=n).astype(np.float64)
    a_vals = 1.0 / col_deg[cols]
    a_norm = SparseMatrix((n, n), rows, cols, a_vals)
    diag = k.diagonal()
    v0 = diag.copy() if np.any(diag > 0) else np.ones(n)
    return AssociationGraph(n1=qap.n1, n2=qap.n2, w=w, a_norm=a_norm, v0=v0)
