"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor records the operation graph as it is built; calling backward() on
a scalar result walks the graph in reverse topological order and
accumulates gradients on every tensor created with requires_grad=True.
The op set is exactly what the matching networks need: broadcast
arithmetic, matmul, exp/log/relu, reductions, shape moves, concatenation,
row gather, and two custom scatter ops for edge-weighted and third-order
message passing.  Everything is checked against central finite differences
in the test suite.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out the axes numpy broadcasting introduced or stretched."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def param(data) -> "Tensor":
        return Tensor(np.array(data, dtype=np.float64), requires_grad=True)

    @staticmethod
    def const(data) -> "Tensor":
        return Tensor(data, requires_grad=False)

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- graph traversal ------------------------------------------------------

    def backward(self, seed=None):
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                parent_grads = node._backward(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    if id(p) in grads:
                        grads[id(p)] = grads[id(p)] + pg
                    else:
                        grads[id(p)] = pg
            else:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
        return self

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    @property
    def T(self):
        return transpose(self)

    def __getitem__(self, idx):
        return tslice(self, idx)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor.const(x)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data
    sa, sb = a.data.shape, b.data.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor(out_data, parents=(a, b), backward=bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.data.shape, b.data.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor(a.data - b.data, parents=(a, b), backward=bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor(ad * bd, parents=(a, b), backward=bw)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return Tensor(ad / bd, parents=(a, b), backward=bw)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return Tensor(ad @ bd, parents=(a, b), backward=bw)


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def bw(g):
        return (g * out_data,)

    return Tensor(out_data, parents=(a,), backward=bw)


def log(a) -> Tensor:
    a = _wrap(a)
    ad = a.data

    def bw(g):
        return (g / ad,)

    return Tensor(np.log(ad), parents=(a,), backward=bw)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return Tensor(a.data * mask, parents=(a,), backward=bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through gradient strictly inside [lo, hi]."""
    a = _wrap(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        return (g * mask,)

    return Tensor(np.clip(a.data, lo, hi), parents=(a,), backward=bw)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    shape = a.data.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,), backward=bw)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    orig = a.data.shape

    def bw(g):
        return (g.reshape(orig),)

    return Tensor(a.data.reshape(shape), parents=(a,), backward=bw)


def transpose(a) -> Tensor:
    a = _wrap(a)

    def bw(g):
        return (g.T,)

    return Tensor(a.data.T, parents=(a,), backward=bw)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([t.data for t in ts], axis=axis), parents=ts, backward=bw)


def tslice(a, idx) -> Tensor:
    """Basic slicing (slices / ints / tuples thereof) with scatter backward."""
    a = _wrap(a)
    shape = a.data.shape

    def bw(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return Tensor(a.data[idx], parents=(a,), backward=bw)


def _scatter_rows(index: np.ndarray, values: np.ndarray, num_rows: int) -> np.ndarray:
    """Segment sum out[index[e], :] += values[e, :], built on bincount
    (much faster than np.add.at for the entry counts seen here)."""
    num_cols = values.shape[1]
    flat_index = (index[:, None] * num_cols + np.arange(num_cols)).ravel()
    out = np.bincount(flat_index, weights=values.ravel(),
                      minlength=num_rows * num_cols)
    return out.reshape(num_rows, num_cols)


def gather_rows(a, index: np.ndarray) -> Tensor:
    """Row gather a[index] for an integer index array, with add-scatter backward."""
    a = _wrap(a)
    index = np.asarray(index, dtype=np.int64)
    shape = a.data.shape

    def bw(g):
        return (_scatter_rows(index, g.reshape(index.shape[0], -1),
                              shape[0]).reshape(shape),)

    return Tensor(a.data[index], parents=(a,), backward=bw)


def edge_aggregate(rows: np.ndarray, cols: np.ndarray, coeff: np.ndarray,
                   edge_vals, node_vals, num_nodes: int) -> Tensor:
    """Per-channel weighted aggregation over a fixed edge support.

    out[r, c] = sum over edges e with rows[e] == r of
                coeff[e] * edge_vals[e, c] * node_vals[cols[e], c]

    `coeff` is a constant per-edge scalar; `edge_vals` (nnz, C) and
    `node_vals` (N, C) participate in the gradient.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    coeff = np.asarray(coeff, dtype=np.float64)
    ev, nv = _wrap(edge_vals), _wrap(node_vals)
    evd, nvd = ev.data, nv.data
    contrib = coeff[:, None] * evd * nvd[cols]
    out = _scatter_rows(rows, contrib, num_nodes)

    def bw(g):
        g_at_rows = g[rows]
        g_edge = coeff[:, None] * g_at_rows * nvd[cols]
        g_node = _scatter_rows(cols, coeff[:, None] * g_at_rows * evd,
                               nvd.shape[0])
        return g_edge, g_node

    return Tensor(out, parents=(ev, nv), backward=bw)


def tensor3_message(idx1: np.ndarray, idx2: np.ndarray, idx3: np.ndarray,
                    coeff: np.ndarray, p, num_nodes: int) -> Tensor:
    """Third-order message over an ordered hyperedge list.

    out[i, c] = sum over entries e with idx1[e] == i of
                coeff[e] * p[idx2[e], c] * p[idx3[e], c]
    """
    idx1 = np.asarray(idx1, dtype=np.int64)
    idx2 = np.asarray(idx2, dtype=np.int64)
    idx3 = np.asarray(idx3, dtype=np.int64)
    coeff = np.asarray(coeff, dtype=np.float64)
    pt = _wrap(p)
    pd = pt.data
    contrib = coeff[:, None] * pd[idx2] * pd[idx3]
    out = np.zeros((num_nodes, pd.shape[1]))
    np.add.at(out, idx1, contrib)

    def bw(g):
        g_at = coeff[:, None] * g[idx1]
        gp = np.zeros_like(pd)
        np.add.at(gp, idx2, g_at * pd[idx3])
        np.add.at(gp, idx3, g_at * pd[idx2])
        return (gp,)

    return Tensor(out, parents=(pt,), backward=bw)
