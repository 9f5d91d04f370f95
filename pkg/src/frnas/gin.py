"""Three-layer GIN encoder with global mean pooling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import (
    BadRate,
    BatchNormState,
    DegenerateBatch,
    EmptyInput,
    ShapeMismatch,
    Tensor,
    add,
    batch_norm,
    dropout,
    gin_aggregate,
    linear,
    record,
    relu,
    row_mean,
    scale,
    update_running_stats,
)
from . import kernels
from .graph import ArchGraph, OpVocabulary, one_hot_features

HIDDEN = 32
N_LAYERS = 3
DROPOUT = 0.1


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    @classmethod
    def glorot(cls, rng: np.random.Generator, d_in: int, d_out: int) -> "Linear":
        limit = np.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-limit, limit, size=(d_in, d_out))
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(d_out), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


@dataclass
class GinLayerParams:
    fc1: Linear
    fc2: Linear
    bn: BatchNormState
    eps: float = 0.0

    @classmethod
    def init(cls, rng, d_in: int, hidden: int = HIDDEN) -> "GinLayerParams":
        return cls(Linear.glorot(rng, d_in, hidden), Linear.glorot(rng, hidden, hidden),
                   BatchNormState.create(hidden))

    @property
    def in_dim(self) -> int:
        return self.fc1.weight.shape[0]


@dataclass
class DirGinLayerParams:
    """A layer averaging a forward-aggregating and a reverse-aggregating GIN sublayer."""

    fwd: GinLayerParams
    rev: GinLayerParams

    @classmethod
    def init(cls, rng, d_in: int, hidden: int = HIDDEN) -> "DirGinLayerParams":
        return cls(GinLayerParams.init(rng, d_in, hidden), GinLayerParams.init(rng, d_in, hidden))


@dataclass
class EncoderParams:
    layers: list = field(default_factory=list)
    dropout_rate: float = DROPOUT

    @classmethod
    def init(cls, rng, in_dim: int, hidden: int = HIDDEN, n_layers: int = N_LAYERS,
             dropout_rate: float = DROPOUT, directed: bool = False) -> "EncoderParams":
        kind = DirGinLayerParams if directed else GinLayerParams
        dims = [in_dim] + [hidden] * n_layers
        return cls([kind.init(rng, dims[i], hidden) for i in range(n_layers)], dropout_rate)

    @property
    def out_dim(self) -> int:
        last = self.layers[-1]
        lin = last.fwd.fc2 if isinstance(last, DirGinLayerParams) else last.fc2
        return lin.weight.shape[1]


@dataclass(frozen=True)
class GraphBatch:
    """Padded stack of graphs: features [M, N, D], adjacency [M, N, N], mask [M, N]."""

    features: np.ndarray
    adjacency: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return self.features.shape[0]

    @property
    def adjacency_t(self) -> np.ndarray:
        return np.ascontiguousarray(np.swapaxes(self.adjacency, 1, 2))

    @classmethod
    def from_graphs(cls, graphs: Sequence[ArchGraph], vocab: OpVocabulary) -> "GraphBatch":
        if not graphs:
            raise ValueError("empty graph batch")
        m = len(graphs)
        n = max(g.n_vertices for g in graphs)
        feats = np.zeros((m, n, vocab.size))
        adj = np.zeros((m, n, n))
        mask = np.zeros((m, n))
        for k, g in enumerate(graphs):
            nv = g.n_vertices
            feats[k, :nv] = one_hot_features(g, vocab)
            adj[k, :nv, :nv] = g.adjacency
            mask[k, :nv] = 1.0
        return cls(feats, adj, mask)

    def subset(self, idx) -> "GraphBatch":
        idx = np.asarray(idx)
        mask = self.mask[idx]
        n = int(mask.sum(axis=1).max())
        return GraphBatch(np.ascontiguousarray(self.features[idx, :n]),
                          np.ascontiguousarray(self.adjacency[idx, :n, :n]),
                          np.ascontiguousarray(mask[:, :n]))


def gin_layer_forward(h: Tensor, adjacency: np.ndarray, p: GinLayerParams, train: bool,
                      mask: np.ndarray | None = None, fused: bool = True) -> Tensor:
    """Aggregate over in-neighbours of ``adjacency``, then fc-ReLU-fc-ReLU-BN.

    ``h`` is ``[N, d]`` for one graph or ``[M, N, d]`` with ``mask`` for a
    padded batch. In train mode the whole layer is one fused tape record
    unless ``fused`` is False, in which case it is built from primitives.
    """
    if h.shape[-1] != p.in_dim:
        raise ShapeMismatch(f"layer expects {p.in_dim} input features, got {h.shape[-1]}")
    if adjacency.shape[-1] != h.shape[-2] or adjacency.shape[-2] != h.shape[-2]:
        raise ShapeMismatch(f"adjacency {adjacency.shape} vs features {h.shape}")
    if train and fused:
        return _fused_gin_layer(h, adjacency, p, mask)
    z = gin_aggregate(h, adjacency, p.eps)
    z = relu(p.fc1(z))
    z = relu(p.fc2(z))
    return batch_norm(z, p.bn, train, mask)


def _fused_gin_layer(h: Tensor, adjacency: np.ndarray, p: GinLayerParams,
                     mask: np.ndarray | None) -> Tensor:
    single = h.data.ndim == 2
    hd = h.data[None] if single else h.data
    adj = np.ascontiguousarray(adjacency[None] if single else adjacency, dtype=np.float64)
    mask = np.ones(hd.shape[:2]) if mask is None else np.ascontiguousarray(mask, dtype=np.float64)
    if mask.sum() < 2:
        raise DegenerateBatch("batch_norm in train mode needs at least 2 vertices")
    hd = np.ascontiguousarray(hd)
    w1, b1, w2, b2 = p.fc1.weight, p.fc1.bias, p.fc2.weight, p.fc2.bias
    gamma, beta = p.bn.gamma, p.bn.beta
    y, agg, z1, z2, xhat, mean, var, inv_std = kernels.gin_layer_forward(
        hd, adj, mask, w1.data, b1.data, w2.data, b2.data, gamma.data, beta.data,
        float(p.eps), float(p.bn.eps))
    update_running_stats(p.bn, mean, var, [mask.sum()])
    out = Tensor(y[0] if single else y)

    def fn(g):
        g3 = np.ascontiguousarray(g[None] if single else g)
        dh, dw1, db1, dw2, db2, dgamma, dbeta = kernels.gin_layer_backward(
            g3, hd, adj, mask, w1.data, w2.data, gamma.data, float(p.eps),
            agg, z1, z2, xhat, inv_std)
        for t, d in ((w1, dw1), (b1, db1), (w2, dw2), (b2, db2), (gamma, dgamma), (beta, dbeta)):
            if t.requires_grad:
                t._accumulate(d)
        if h.requires_grad:
            h._accumulate(dh[0] if single else dh)

    return record(out, (h, w1, b1, w2, b2, gamma, beta), fn)


def _fused_encoder(features: np.ndarray, adj: np.ndarray, mask: np.ndarray, p: EncoderParams,
                   rng: np.random.Generator | None) -> Tensor:
    adj = np.ascontiguousarray(adj, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.float64)
    n_real = float(mask.sum())
    if n_real < 2:
        raise DegenerateBatch("batch_norm in train mode needs at least 2 vertices")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise EmptyInput("graph with no vertices in batch")
    h = np.ascontiguousarray(features, dtype=np.float64)
    saved = []
    for layer in p.layers:
        y, agg, z1, z2, xhat, mean, var, inv_std = kernels.gin_layer_forward(
            h, adj, mask, layer.fc1.weight.data, layer.fc1.bias.data, layer.fc2.weight.data,
            layer.fc2.bias.data, layer.bn.gamma.data, layer.bn.beta.data, float(layer.eps),
            float(layer.bn.eps))
        update_running_stats(layer.bn, mean, var, (n_real,))
        saved.append((h, agg, z1, z2, xhat, inv_std))
        h = y
    pool = mask / counts[:, None]
    emb = np.einsum("mn,mnd->md", pool, h)
    rate = p.dropout_rate
    if rate > 0.0:
        if not rate < 1.0:
            raise BadRate(f"dropout rate must be in [0, 1), got {rate}")
        keep = (rng.random(emb.shape) >= rate) / (1.0 - rate)
        emb = emb * keep
    else:
        keep = None
    out = Tensor(emb)

    def fn(g):
        if keep is not None:
            g = g * keep
        gy = np.ascontiguousarray(pool[:, :, None] * g[:, None, :])
        for layer, (h_in, agg, z1, z2, xhat, inv_std) in zip(reversed(p.layers), reversed(saved)):
            gy, dw1, db1, dw2, db2, dgamma, dbeta = kernels.gin_layer_backward(
                gy, h_in, adj, mask, layer.fc1.weight.data, layer.fc2.weight.data,
                layer.bn.gamma.data, float(layer.eps), agg, z1, z2, xhat, inv_std)
            layer.fc1.weight._accumulate(dw1)
            layer.fc1.bias._accumulate(db1)
            layer.fc2.weight._accumulate(dw2)
            layer.fc2.bias._accumulate(db2)
            layer.bn.gamma._accumulate(dgamma)
            layer.bn.beta._accumulate(dbeta)

    return record(out, _encoder_tensors(p), fn)


def _encoder_tensors(p: EncoderParams) -> tuple:
    return tuple(t for layer in p.layers
                 for t in (layer.fc1.weight, layer.fc1.bias, layer.fc2.weight, layer.fc2.bias,
                           layer.bn.gamma, layer.bn.beta))


def dirgin_layer_forward(h: Tensor, adjacency: np.ndarray, adjacency_t: np.ndarray,
                         p: DirGinLayerParams, train: bool,
                         mask: np.ndarray | None = None) -> Tensor:
    fwd = gin_layer_forward(h, adjacency, p.fwd, train, mask)
    rev = gin_layer_forward(h, adjacency_t, p.rev, train, mask)
    return scale(add(fwd, rev), 0.5)


def encode(batch: GraphBatch, reverse: bool, p: EncoderParams, train: bool,
           rng: np.random.Generator | None = None, fused: bool = True) -> Tensor:
    """Embed every graph of ``batch``: returns [M, hidden].

    In train mode a plain GIN stack, pooling and dropout form a single tape
    record; ``fused=False`` builds the same computation layer by layer.
    """
    adj, adj_t = batch.adjacency, batch.adjacency_t
    if reverse:
        adj, adj_t = adj_t, adj
    if train and fused and all(isinstance(layer, GinLayerParams) for layer in p.layers):
        return _fused_encoder(batch.features, adj, batch.mask, p, rng)
    h = Tensor(batch.features)
    for layer in p.layers:
        if isinstance(layer, DirGinLayerParams):
            h = dirgin_layer_forward(h, adj, adj_t, layer, train, batch.mask)
        else:
            h = gin_layer_forward(h, adj, layer, train, batch.mask, fused=fused)
    emb = row_mean(h, batch.mask)
    return dropout(emb, p.dropout_rate, train, rng)


def encoder_forward(g: ArchGraph, reverse: bool, p: EncoderParams, vocab: OpVocabulary,
                    train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Embedding of a single graph, shape [hidden]."""
    adj = g.adjacency.astype(np.float64)
    if reverse:
        adj = adj.T.copy()
    h = Tensor(one_hot_features(g, vocab))
    for layer in p.layers:
        if isinstance(layer, DirGinLayerParams):
            h = dirgin_layer_forward(h, adj, adj.T.copy(), layer, train)
        else:
            h = gin_layer_forward(h, adj, layer, train)
    emb = row_mean(h)
    return dropout(emb, p.dropout_rate, train, rng)
