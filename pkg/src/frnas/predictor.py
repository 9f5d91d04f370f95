"""Forward/reverse dual-encoder predictor and its ablation variants.

Variants:

``fr``
    Encoder 1 reads the adjacency, encoder 2 its transpose; the two heads are
    averaged. Trained with the relational feature loss.
``fr_no_feature_loss``
    Same network, trained with the feature-loss weight forced to 0.
``forward_only``
    Same network, but both encoders read the forward adjacency.
``dirgin``
    One encoder whose layers average a forward-aggregating and a
    reverse-aggregating GIN sublayer, with a single head.

All trainable weights of a predictor live in one flat float64 buffer; each
weight tensor is a view into it, and the same holds for gradients. The
optimizer works on the flat buffers directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

from .autodiff import (
    BatchNormState,
    DegenerateBatch,
    Tensor,
    add,
    batch_norm,
    record,
    relu,
    reshape,
    scale,
    update_running_stats,
)
from .gin import (
    DROPOUT,
    HIDDEN,
    N_LAYERS,
    DirGinLayerParams,
    EncoderParams,
    GinLayerParams,
    GraphBatch,
    Linear,
    encode,
)
from .graph import ArchGraph, OpVocabulary

HEAD_HIDDEN = 16
CHECKPOINT_VERSION = 1


class UnknownVariant(ValueError):
    pass


class Variant(str, Enum):
    FR = "fr"
    FORWARD_ONLY = "forward_only"
    FR_NO_FEATURE_LOSS = "fr_no_feature_loss"
    DIRGIN = "dirgin"

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        key = _ALIASES.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise UnknownVariant(f"unknown variant {name!r}") from None

    @property
    def two_branch(self) -> bool:
        return self is not Variant.DIRGIN

    @property
    def uses_feature_loss(self) -> bool:
        return self is Variant.FR


_ALIASES = {
    "fr_nas": "fr",
    "frnas": "fr",
    "npenas_forward": "forward_only",
    "forward": "forward_only",
    "npenas_fr": "fr_no_feature_loss",
    "npnas_dirgin": "dirgin",
}


@dataclass
class Head:
    """linear(d -> 16) -> BN -> ReLU -> linear(16 -> 1)."""

    fc1: Linear
    bn: BatchNormState
    fc2: Linear

    @classmethod
    def init(cls, rng, d_in: int = HIDDEN, hidden: int = HEAD_HIDDEN) -> "Head":
        return cls(Linear.glorot(rng, d_in, hidden), BatchNormState.create(hidden),
                   Linear.glorot(rng, hidden, 1))

    def __call__(self, h: Tensor, train: bool, fused: bool = True) -> Tensor:
        if train and fused:
            return _fused_head(h, self)
        z = relu(batch_norm(self.fc1(h), self.bn, train))
        return reshape(self.fc2(z), (h.shape[0],))


def _fused_head(h: Tensor, head: Head) -> Tensor:
    """Train-mode head as one tape record."""
    x = h.data
    if x.shape[0] < 2:
        raise DegenerateBatch("head batch norm in train mode needs at least 2 graphs")
    w1, b1, w2, b2 = head.fc1.weight, head.fc1.bias, head.fc2.weight, head.fc2.bias
    gamma, beta, bn = head.bn.gamma, head.bn.beta, head.bn
    a = x @ w1.data + b1.data
    mean = a.mean(axis=0)
    centred = a - mean
    var = (centred * centred).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = centred * inv_std
    z = gamma.data * xhat + beta.data
    pos = z > 0
    r = z * pos
    out = Tensor(r @ w2.data[:, 0] + b2.data[0])
    update_running_stats(bn, mean[None], var[None], [x.shape[0]])

    def fn(g):
        dr = np.outer(g, w2.data[:, 0])
        dz = dr * pos
        dxhat = dz * gamma.data
        da = (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)) * inv_std
        for t, d in ((w2, (r.T @ g)[:, None]), (b2, np.array([g.sum()])),
                     (gamma, (dz * xhat).sum(axis=0)), (beta, dz.sum(axis=0)),
                     (w1, x.T @ da), (b1, da.sum(axis=0))):
            if t.requires_grad:
                t._accumulate(d)
        if h.requires_grad:
            h._accumulate(da @ w1.data.T)

    return record(out, (h, w1, b1, w2, b2, gamma, beta), fn)


@dataclass
class PredictionBundle:
    h_f: Tensor
    p_f: Tensor
    p: Tensor
    h_r: Tensor | None = None
    p_r: Tensor | None = None

    def __len__(self):
        return self.p.shape[0]


@dataclass
class FrPredictorParams:
    variant: Variant
    vocab_size: int
    enc_f: EncoderParams
    head_f: Head
    enc_r: EncoderParams | None = None
    head_r: Head | None = None
    values: np.ndarray | None = None
    grads: np.ndarray | None = None

    def branches(self):
        yield "enc_f", self.enc_f
        yield "head_f", self.head_f
        if self.enc_r is not None:
            yield "enc_r", self.enc_r
            yield "head_r", self.head_r

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for prefix, part in self.branches():
            for name, t in _walk(part, prefix):
                if isinstance(t, Tensor):
                    yield name, t

    def bn_states(self) -> Iterator[tuple[str, BatchNormState]]:
        for prefix, part in self.branches():
            for name, t in _walk(part, prefix):
                if isinstance(t, BatchNormState):
                    yield name, t

    def zero_grad(self):
        self.grads[...] = 0.0

    @property
    def n_parameters(self) -> int:
        return self.values.size

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every trainable weight and BN running statistic."""
        out = {name: t.data.copy() for name, t in self.named_parameters()}
        for name, bn in self.bn_states():
            out[f"{name}.running_mean"] = bn.running_mean.copy()
            out[f"{name}.running_var"] = bn.running_var.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            t.data[...] = state[name]
        for name, bn in self.bn_states():
            bn.running_mean = np.array(state[f"{name}.running_mean"], dtype=np.float64)
            bn.running_var = np.array(state[f"{name}.running_var"], dtype=np.float64)

    def clone(self) -> "FrPredictorParams":
        twin = build_variant(self.variant, self.vocab_size, seed=0,
                             **_shape_kwargs(self))
        twin.load_state_dict(self.state_dict())
        return twin


def _walk(obj, prefix):
    if isinstance(obj, (Tensor, BatchNormState)):
        if isinstance(obj, BatchNormState):
            yield f"{prefix}.gamma", obj.gamma
            yield f"{prefix}.beta", obj.beta
        yield prefix, obj
        return
    if isinstance(obj, EncoderParams):
        for i, layer in enumerate(obj.layers):
            yield from _walk(layer, f"{prefix}.layer{i}")
    elif isinstance(obj, DirGinLayerParams):
        yield from _walk(obj.fwd, f"{prefix}.fwd")
        yield from _walk(obj.rev, f"{prefix}.rev")
    elif isinstance(obj, GinLayerParams):
        yield from _walk(obj.fc1, f"{prefix}.fc1")
        yield from _walk(obj.fc2, f"{prefix}.fc2")
        yield from _walk(obj.bn, f"{prefix}.bn")
    elif isinstance(obj, Head):
        yield from _walk(obj.fc1, f"{prefix}.fc1")
        yield from _walk(obj.bn, f"{prefix}.bn")
        yield from _walk(obj.fc2, f"{prefix}.fc2")
    elif isinstance(obj, Linear):
        yield f"{prefix}.weight", obj.weight
        yield f"{prefix}.bias", obj.bias


def _shape_kwargs(params: FrPredictorParams) -> dict:
    enc = params.enc_f
    return {
        "hidden": enc.out_dim,
        "n_layers": len(enc.layers),
        "head_hidden": params.head_f.fc1.weight.shape[1],
        "dropout": enc.dropout_rate,
    }


def _flatten(params: FrPredictorParams) -> None:
    tensors = [t for _, t in params.named_parameters()]
    total = sum(t.data.size for t in tensors)
    values = np.empty(total)
    grads = np.zeros(total)
    off = 0
    for t in tensors:
        n = t.data.size
        values[off:off + n] = t.data.ravel()
        t.data = values[off:off + n].reshape(t.shape)
        t.grad = grads[off:off + n].reshape(t.shape)
        t._owns_grad = True
        t.requires_grad = True
        off += n
    params.values = values
    params.grads = grads


def build_variant(variant, vocab: OpVocabulary | int, seed: int = 0, *,
                  hidden: int = HIDDEN, n_layers: int = N_LAYERS,
                  head_hidden: int = HEAD_HIDDEN, dropout: float = DROPOUT,
                  tie_init: bool = False) -> FrPredictorParams:
    """Freshly initialised parameters for ``variant``.

    With ``tie_init`` both branches start from identical weights (held in
    separate storage).
    """
    variant = Variant.parse(variant)
    d = vocab.size if isinstance(vocab, OpVocabulary) else int(vocab)
    seeds = np.random.SeedSequence(seed).spawn(2)
    if tie_init:
        seeds = [seeds[0], seeds[0]]
    rng_f = np.random.default_rng(seeds[0])

    if variant is Variant.DIRGIN:
        enc_f = EncoderParams.init(rng_f, d, hidden, n_layers, dropout, directed=True)
        params = FrPredictorParams(variant, d, enc_f, Head.init(rng_f, hidden, head_hidden))
    else:
        rng_r = np.random.default_rng(seeds[1])
        enc_f = EncoderParams.init(rng_f, d, hidden, n_layers, dropout)
        head_f = Head.init(rng_f, hidden, head_hidden)
        enc_r = EncoderParams.init(rng_r, d, hidden, n_layers, dropout)
        head_r = Head.init(rng_r, hidden, head_hidden)
        params = FrPredictorParams(variant, d, enc_f, head_f, enc_r, head_r)
    _flatten(params)
    return params


def predict_batch(graphs: Sequence[ArchGraph] | GraphBatch, params: FrPredictorParams,
                  train: bool = False, rng: np.random.Generator | None = None,
                  vocab: OpVocabulary | None = None) -> PredictionBundle:
    """Run the predictor on a batch. ``vocab`` is needed only for raw graphs."""
    if isinstance(graphs, GraphBatch):
        batch = graphs
    else:
        if vocab is None:
            vocab = OpVocabulary(tuple(str(i) for i in range(params.vocab_size)))
        batch = GraphBatch.from_graphs(list(graphs), vocab)

    h_f = encode(batch, False, params.enc_f, train, rng)
    p_f = params.head_f(h_f, train)
    if not params.variant.two_branch:
        return PredictionBundle(h_f=h_f, p_f=p_f, p=p_f)
    reverse = params.variant is not Variant.FORWARD_ONLY
    h_r = encode(batch, reverse, params.enc_r, train, rng)
    p_r = params.head_r(h_r, train)
    p = scale(add(p_f, p_r), 0.5)
    return PredictionBundle(h_f=h_f, p_f=p_f, p=p, h_r=h_r, p_r=p_r)


def predict(params: FrPredictorParams, batch: GraphBatch, chunk: int = 1024) -> np.ndarray:
    """Eval-mode predictions as a plain array."""
    out = [predict_batch(batch.subset(np.arange(i, min(i + chunk, len(batch)))), params).p.data
           for i in range(0, len(batch), chunk)]
    return np.concatenate(out)


def embed(params: FrPredictorParams, batch: GraphBatch) -> tuple[np.ndarray, np.ndarray | None]:
    """Eval-mode embeddings (h_f, h_r)."""
    bundle = predict_batch(batch, params)
    return bundle.h_f.data, None if bundle.h_r is None else bundle.h_r.data


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(params: FrPredictorParams, path) -> None:
    """Write every weight and BN statistic to a JSON file (floats round-trip exactly)."""
    doc = {
        "format": "frnas-checkpoint",
        "version": CHECKPOINT_VERSION,
        "variant": params.variant.value,
        "vocab_size": params.vocab_size,
        **_shape_kwargs(params),
        "tensors": {
            name: {"shape": list(a.shape), "values": a.ravel().tolist()}
            for name, a in params.state_dict().items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> FrPredictorParams:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "frnas-checkpoint":
        raise ValueError(f"{path} is not a predictor checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    params = build_variant(doc["variant"], doc["vocab_size"], hidden=doc["hidden"],
                           n_layers=doc["n_layers"], head_hidden=doc["head_hidden"],
                           dropout=doc["dropout"])
    state = {name: np.array(t["values"], dtype=np.float64).reshape(t["shape"])
             for name, t in doc["tensors"].items()}
    expected = set(params.state_dict())
    if set(state) != expected:
        missing = sorted(expected - set(state))
        extra = sorted(set(state) - expected)
        raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    params.load_state_dict(state)
    return params
