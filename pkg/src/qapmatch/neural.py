"""Learned matching networks on the association graph.

One forward routine covers the whole family: plain vertex message passing,
the variant without the doubly-stochastic embedding channel, the variant
with learned edge embeddings, and the hypergraph variant with a third-order
message term.  Which path runs is decided entirely by the config, so
variants with the same parameter names and shapes share bit-identical
initialization.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import grad as ag
from .affinity import AssociationGraph, LawlerQap
from .grad import Tensor
from .numerics import SparseTensor3, hungarian

VARIANTS = ("ngm", "ngm-v", "ngm+", "nhgm", "nmgm")

LOG_CLIP = 1e-7
EXP_BOUND = 700.0


@dataclass(frozen=True)
class NetConfig:
    """Architecture and head hyperparameters for the matching networks."""

    channels: int = 16
    num_layers: int = 3
    alpha: float = 20.0
    alpha_hat: float = 20.0
    sinkhorn_embedding: bool = True
    edge_embedding: bool = False
    hyper: bool = False
    lambda2: float = 1.0
    lambda3: float = 1.0
    sinkhorn_iters: int = 10
    pad: float = 1e-3

    def __post_init__(self):
        if self.channels < 1 or self.num_layers < 1:
            raise ValueError("channels and num_layers must be positive")
        if self.sinkhorn_iters < 1:
            raise ValueError("sinkhorn_iters must be positive")

    def vertex_dim(self, layer: int) -> int:
        """Input feature width of the given layer."""
        if layer == 0:
            return 1
        return self.channels + (1 if self.sinkhorn_embedding else 0)

    def edge_dim(self, layer: int) -> int:
        """Width of the edge features entering the given layer."""
        return 1 if layer == 0 else self.channels

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "NetConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(NetConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return NetConfig(**raw)


def config_for_variant(variant: str, **overrides) -> NetConfig:
    """Canonical config for a named model variant."""
    base = {
        "ngm": NetConfig(),
        "ngm-v": NetConfig(sinkhorn_embedding=False),
        "ngm+": NetConfig(edge_embedding=True),
        "nhgm": NetConfig(hyper=True),
        "nmgm": NetConfig(),
    }
    if variant not in base:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return replace(base[variant], **overrides) if overrides else base[variant]


# -- parameters ----------------------------------------------------------------


def _mlp_names(prefix: str) -> tuple[str, ...]:
    return (f"{prefix}.w1", f"{prefix}.b1", f"{prefix}.w2", f"{prefix}.b2")


def parameter_shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape table, fully determined by the config."""
    ch = config.channels
    shapes: dict[str, tuple[int, ...]] = {}

    def mlp(prefix: str, din: int, dout: int) -> None:
        shapes[f"{prefix}.w1"] = (din, ch)
        shapes[f"{prefix}.b1"] = (ch,)
        shapes[f"{prefix}.w2"] = (ch, dout)
        shapes[f"{prefix}.b2"] = (dout,)

    for l in range(config.num_layers):
        vd = config.vertex_dim(l)
        mlp(f"l{l}.fm", vd, ch)
        mlp(f"l{l}.fv", vd, ch)
        if config.hyper:
            mlp(f"l{l}.fm3", vd, ch)
        if config.edge_embedding:
            mlp(f"l{l}.fe", config.edge_dim(l) + vd, ch)
        if config.sinkhorn_embedding:
            shapes[f"l{l}.cls.w"] = (ch, 1)
            shapes[f"l{l}.cls.b"] = (1,)
    final_dim = config.vertex_dim(config.num_layers)
    shapes["out.w"] = (final_dim, 1)
    shapes["out.b"] = (1,)
    return shapes


def _init_array(name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    """Deterministic per-parameter init: a parameter's values depend only on
    (seed, name, shape), so shared names across variants start identical."""
    if name.endswith((".b1", ".b2", ".b")):
        return np.zeros(shape)
    rng = np.random.default_rng([seed, *name.encode()])
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, shape)


@dataclass
class NetParams:
    """Name-keyed trainable tensors with flat-vector import/export."""

    tensors: dict[str, Tensor]

    @staticmethod
    def init(config: NetConfig, seed: int = 0) -> "NetParams":
        shapes = parameter_shapes(config)
        tensors = {
            name: Tensor.param(_init_array(name, shape, seed))
            for name, shape in shapes.items()
        }
        return NetParams(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def names(self) -> list[str]:
        return sorted(self.tensors)

    @property
    def size(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.tensors[n].data.ravel() for n in self.names])

    def grad_flat(self) -> np.ndarray:
        out = []
        for n in self.names:
            t = self.tensors[n]
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            out.append(g.ravel())
        return np.concatenate(out)

    def assign_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"expected flat vector of length {self.size}")
        pos = 0
        for n in self.names:
            t = self.tensors[n]
            k = t.data.size
            t.data = vec[pos : pos + k].reshape(t.data.shape).copy()
            pos += k

    def copy(self) -> "NetParams":
        return NetParams(
            {n: Tensor.param(t.data.copy()) for n, t in self.tensors.items()}
        )


# -- building blocks -----------------------------------------------------------


def _two_layer(params: NetParams, prefix: str, x: Tensor) -> Tensor:
    h = ag.relu(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    return h @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def _affine(params: NetParams, prefix: str, x: Tensor) -> Tensor:
    return x @ params[f"{prefix}.w"] + params[f"{prefix}.b"]


def _to_assignment(flat: Tensor, n1: int, n2: int) -> Tensor:
    """Column-stacked (n, 1) vertex vector -> (n1, n2) assignment layout."""
    return ag.transpose(ag.reshape(flat, (n2, n1)))


def _to_flat(mat: Tensor, n1: int, n2: int) -> Tensor:
    return ag.reshape(ag.transpose(mat), (n1 * n2, 1))


def doubly_stochastic(
    logits: Tensor, n1: int, n2: int, iters: int, pad: float
) -> Tensor:
    """Differentiable Sinkhorn on exp(logits), stabilized by the max.

    Subtracting the (detached) maximum before exponentiation leaves the
    normalized result unchanged but keeps exp in range; rectangular inputs
    get constant dummy rows at the same scale.  n1 <= n2 is required.
    """
    if n1 > n2:
        raise ValueError("assignment head expects n1 <= n2")
    shift = float(np.max(logits.data))
    s = ag.exp(logits - shift)
    if n1 < n2:
        fill = pad * np.exp(np.clip(-shift, -EXP_BOUND, EXP_BOUND))
        s = ag.concat([s, Tensor.const(np.full((n2 - n1, n2), fill))], axis=0)
    for _ in range(iters):
        s = s / ag.tsum(s, axis=0, keepdims=True)
        s = s / ag.tsum(s, axis=1, keepdims=True)
    if n1 < n2:
        s = s[:n1, :]
    return s


@dataclass(frozen=True)
class HyperSupport:
    """Expanded third-order support with mode-wise normalized coefficients.

    Every symmetric copy of each stored tensor entry is materialized, and
    each value is divided by the number of entries sharing its first index,
    mirroring the column normalization of the second-order adjacency.
    """

    idx1: np.ndarray
    idx2: np.ndarray
    idx3: np.ndarray
    coeff: np.ndarray


def build_hyper_support(h: SparseTensor3) -> HyperSupport:
    ii, jj, kk, vv = h.expand_ordered()
    count = np.bincount(ii, minlength=h.dim).astype(np.float64)
    return HyperSupport(idx1=ii, idx2=jj, idx3=kk, coeff=vv / count[ii])


@dataclass
class NetOutput:
    """Forward result: doubly-stochastic score tensor plus a per-layer
    snapshot of the message features (detached, for inspection)."""

    scores: Tensor
    layer_messages: list[np.ndarray]


def forward(
    params: NetParams,
    graph: AssociationGraph,
    config: NetConfig,
    hyper: HyperSupport | None = None,
) -> NetOutput:
    """Run the matching network on one association graph."""
    n1, n2, n = graph.n1, graph.n2, graph.num_vertices
    use_hyper = config.hyper and config.lambda3 != 0.0
    if use_hyper and hyper is None:
        raise ValueError("config requests the third-order term but no "
                         "hyper support was provided")
    v = Tensor.const(graph.v0.reshape(n, 1))
    if config.edge_embedding:
        rows, cols = graph.w.rows, graph.w.cols
        coeff = graph.a_norm.vals
        w_edge = Tensor.const(graph.w.vals.reshape(-1, 1))
    else:
        prop = Tensor.const(graph.dense_propagation())
    messages: list[np.ndarray] = []
    for l in range(config.num_layers):
        fm = _two_layer(params, f"l{l}.fm", v)
        if config.edge_embedding:
            w_edge = _two_layer(
                params, f"l{l}.fe",
                ag.concat([w_edge, ag.gather_rows(v, cols)], axis=1),
            )
            m2 = ag.edge_aggregate(rows, cols, coeff, w_edge, fm, n)
        else:
            m2 = prop @ fm
        if config.hyper:
            m2 = config.lambda2 * m2
            if use_hyper:
                p3 = _two_layer(params, f"l{l}.fm3", v)
                m3 = ag.tensor3_message(
                    hyper.idx1, hyper.idx2, hyper.idx3, hyper.coeff, p3, n
                )
                m2 = m2 + config.lambda3 * m3
        m = m2 + _two_layer(params, f"l{l}.fv", v)
        messages.append(m.data.copy())
        if config.sinkhorn_embedding:
            z = config.alpha * _affine(params, f"l{l}.cls", m)
            ds = doubly_stochastic(
                _to_assignment(z, n1, n2), n1, n2,
                config.sinkhorn_iters, config.pad,
            )
            v = ag.concat([m, _to_flat(ds, n1, n2)], axis=1)
        else:
            v = m
    z = config.alpha * _affine(params, "out", v)
    scores = doubly_stochastic(
        _to_assignment(z, n1, n2), n1, n2, config.sinkhorn_iters, config.pad
    )
    return NetOutput(scores=scores, layer_messages=messages)


# -- losses --------------------------------------------------------------------


def perm_loss(scores: Tensor, gt: np.ndarray) -> Tensor:
    """Elementwise binary cross entropy against a ground-truth assignment."""
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != scores.data.shape:
        raise ValueError("ground truth shape does not match scores")
    if np.any((gt != 0.0) & (gt != 1.0)):
        raise ValueError("ground truth must be binary")
    g = Tensor.const(gt)
    pos = g * ag.log(ag.clip(scores, LOG_CLIP, 1.0))
    neg = (1.0 - g) * ag.log(ag.clip(1.0 - scores, LOG_CLIP, 1.0))
    return -ag.tsum(pos + neg)


def qap_loss(scores: Tensor, qap: LawlerQap) -> Tensor:
    """Quadratic assignment objective of the relaxed scores, oriented so
    that lower is always better for the optimizer."""
    n = qap.n1 * qap.n2
    if scores.data.shape != (qap.n1, qap.n2):
        raise ValueError("scores shape does not match the instance")
    v = _to_flat(scores, qap.n1, qap.n2)
    quad = ag.tsum(
        Tensor.const(qap.k.vals.reshape(-1, 1))
        * ag.gather_rows(v, qap.k.rows)
        * ag.gather_rows(v, qap.k.cols)
    )
    return -quad if qap.sense == "maximize" else quad


# -- optimization --------------------------------------------------------------


class Adam:
    """Adam with exportable state so training can resume bit-exactly."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: NetParams) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name in params.names:
            tensor = params.tensors[name]
            g = tensor.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(tensor.data)
                self.v[name] = np.zeros_like(tensor.data)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            tensor.data = tensor.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    @staticmethod
    def from_state(state: dict) -> "Adam":
        opt = Adam(lr=state["lr"], beta1=state["beta1"],
                   beta2=state["beta2"], eps=state["eps"])
        opt.t = int(state["t"])
        opt.m = {k: np.asarray(v, dtype=np.float64) for k, v in state["m"].items()}
        opt.v = {k: np.asarray(v, dtype=np.float64) for k, v in state["v"].items()}
        return opt


# -- training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingExample:
    """One supervised instance: the graph to match plus its targets."""

    graph: AssociationGraph
    gt: np.ndarray | None = None
    qap: LawlerQap | None = None
    hyper: HyperSupport | None = None


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    mean_accuracy: float | None


def matching_accuracy(scores: np.ndarray, gt: np.ndarray) -> float:
    """Fraction of ground-truth correspondences kept after discretization."""
    x = hungarian(scores)
    total = gt.sum()
    if total == 0:
        raise ValueError("ground truth selects no correspondences")
    return float((x * gt).sum() / total)


def train(
    params: NetParams,
    examples: list[TrainingExample],
    config: NetConfig,
    epochs: int,
    optimizer: Adam | None = None,
    loss: str = "perm",
    seed: int = 0,
) -> list[EpochRecord]:
    """Per-example gradient steps with a fresh shuffle each epoch.

    A non-finite loss aborts immediately rather than training on garbage.
    """
    if loss not in ("perm", "qap"):
        raise ValueError("loss must be 'perm' or 'qap'")
    if not examples:
        raise ValueError("no training examples")
    opt = optimizer if optimizer is not None else Adam()
    history: list[EpochRecord] = []
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(examples))
        losses = []
        accs = []
        for idx in order:
            ex = examples[idx]
            params.zero_grad()
            out = forward(params, ex.graph, config, hyper=ex.hyper)
            if loss == "perm":
                if ex.gt is None:
                    raise ValueError("perm loss needs ground truth")
                obj = perm_loss(out.scores, ex.gt)
            else:
                if ex.qap is None:
                    raise ValueError("qap loss needs the affinity instance")
                obj = qap_loss(out.scores, ex.qap)
            val = float(obj.data)
            if not np.isfinite(val):
                raise RuntimeError(
                    f"training diverged at epoch {epoch}: loss {val}"
                )
            obj.backward()
            opt.step(params)
            losses.append(val)
            if ex.gt is not None:
                accs.append(matching_accuracy(out.scores.data, ex.gt))
        history.append(EpochRecord(
            epoch=epoch,
            mean_loss=float(np.mean(losses)),
            mean_accuracy=float(np.mean(accs)) if accs else None,
        ))
    return history


# -- checkpointing -------------------------------------------------------------


def save_checkpoint(
    path,
    params: NetParams,
    config: NetConfig,
    optimizer: Adam | None = None,
    meta: dict | None = None,
) -> None:
    """Binary checkpoint: config, parameters, optional optimizer state."""
    payload: dict[str, np.ndarray] = {
        "config": np.frombuffer(config.to_json().encode(), dtype=np.uint8),
        "meta": np.frombuffer(
            json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8
        ),
    }
    for name, t in params.tensors.items():
        payload[f"param:{name}"] = t.data
    if optimizer is not None:
        st = optimizer.state()
        payload["adam:scalars"] = np.array(
            [st["lr"], st["beta1"], st["beta2"], st["eps"], float(st["t"])]
        )
        for name, arr in st["m"].items():
            payload[f"adam:m:{name}"] = arr
        for name, arr in st["v"].items():
            payload[f"adam:v:{name}"] = arr
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[NetParams, NetConfig, Adam | None, dict]:
    with np.load(path) as data:
        config = NetConfig.from_json(bytes(data["config"]).decode())
        meta = json.loads(bytes(data["meta"]).decode())
        tensors = {}
        adam_m: dict[str, np.ndarray] = {}
        adam_v: dict[str, np.ndarray] = {}
        scalars = None
        for key in data.files:
            if key.startswith("param:"):
                tensors[key[len("param:"):]] = Tensor.param(data[key].copy())
            elif key.startswith("adam:m:"):
                adam_m[key[len("adam:m:"):]] = data[key].copy()
            elif key.startswith("adam:v:"):
                adam_v[key[len("adam:v:"):]] = data[key].copy()
            elif key == "adam:scalars":
                scalars = data[key].copy()
    expected = parameter_shapes(config)
    if set(tensors) != set(expected):
        raise ValueError("checkpoint parameters do not match its config")
    for name, shape in expected.items():
        if tensors[name].data.shape != shape:
            raise ValueError(f"checkpoint parameter {name} has wrong shape")
    params = NetParams(tensors)
    optimizer = None
    if scalars is not None:
        optimizer = Adam.from_state({
            "lr": float(scalars[0]), "beta1": float(scalars[1]),
            "beta2": float(scalars[2]), "eps": float(scalars[3]),
            "t": int(scalars[4]), "m": adam_m, "v": adam_v,
        })
    return params, config, optimizer, meta
