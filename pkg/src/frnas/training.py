"""Sequential two-loss training with Adam and cosine-annealed learning rate.

Per mini-batch the predictor takes two optimizer steps: one on
``L1 = (1 - lam) * L_pf + lam * L_e`` and then, after a fresh forward pass
with the updated weights, one on ``L2 = (1 - lam) * L_pr + lam * L_e``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .autodiff import ShapeMismatch, Tape, Tensor, backward
from .gin import GraphBatch
from .graph import OpVocabulary
from .losses import _check_lambda, combined_losses, irg_feature_loss, prediction_mse
from .predictor import FrPredictorParams, Variant, build_variant, predict, predict_batch

log = logging.getLogger(__name__)


class EpochOutOfRange(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.8
    lr0: float = 5e-3
    weight_decay: float = 1e-4
    epochs: int = 300
    batch_size: int = 16
    seed: int = 0
    dropout: float = 0.1

    def __post_init__(self):
        _check_lambda(self.lam)
        if self.lr0 <= 0 or self.weight_decay < 0 or self.epochs < 1 or self.batch_size < 2:
            raise ValueError(f"invalid training config {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f.type for f in fields(cls)}
        d = {("lam" if k == "lambda" else k): v for k, v in d.items()}
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        casts = {"epochs": int, "batch_size": int, "seed": int}
        return cls(**{k: casts.get(k, float)(v) for k, v in d.items()})

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Read ``key = value`` (or ``key: value``) lines; ``#`` starts a comment."""
        d = {}
        with open(path, encoding="utf-8") as fh:
            for raw in fh:
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                sep = "=" if "=" in line else ":"
                key, _, value = line.partition(sep)
                d[key.strip()] = value.strip()
        return cls.from_dict(d)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, values: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(values), np.zeros_like(values))


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {cfg.epochs})")
    return 0.5 * cfg.lr0 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


def adam_step(values: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              weight_decay: float = 0.0) -> None:
    """One in-place Adam update; the decay term ``weight_decay * w`` is added to the gradient."""
    if values.shape != grads.shape or state.m.shape != values.shape:
        raise ShapeMismatch(f"values {values.shape}, grads {grads.shape}, moments {state.m.shape}")
    state.step += 1
    kernels.adam_update(values, grads, state.m, state.v, float(lr), state.beta1, state.beta2,
                        state.eps, float(weight_decay), float(state.step))


@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    l1: list[float] = field(default_factory=list)
    l2: list[float] = field(default_factory=list)
    l_e: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def append(self, epoch, l1, l2, l_e, lr):
        self.epoch.append(epoch)
        self.l1.append(l1)
        self.l2.append(l2)
        self.l_e.append(l_e)
        self.lr.append(lr)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "l1", "l2", "l_e", "lr"])
            for row in zip(self.epoch, self.l1, self.l2, self.l_e, self.lr):
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one is folded into its predecessor."""
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def _as_training_data(dataset, vocab):
    graphs, targets = [], []
    for item in dataset:
        if isinstance(item, tuple):
            g, y = item
        else:
            g, y = item.graph, item.error_pct
        graphs.append(g)
        targets.append(float(y))
    if vocab is None:
        d = max(max(g.ops) for g in graphs) + 1
        vocab = OpVocabulary(tuple(str(i) for i in range(d)))
    return GraphBatch.from_graphs(graphs, vocab), np.asarray(targets), vocab


def train_predictor(dataset: Sequence, cfg: TrainConfig, variant="fr",
                    vocab: OpVocabulary | None = None,
                    callback: Callable[[int, FrPredictorParams], None] | None = None):
    """Train a fresh predictor on ``dataset``.

    ``dataset`` holds ``(ArchGraph, error_pct)`` pairs or records with
    ``graph`` and ``error_pct`` attributes. Returns ``(params, history)``.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if len(dataset) < 2:
        raise EmptyDataset("training needs at least 2 architectures for batch norm")
    variant = Variant.parse(variant)
    full, y, vocab = _as_training_data(dataset, vocab)

    init_seq, shuffle_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    params = build_variant(variant, vocab, seed=int(init_seq.generate_state(1)[0]),
                           dropout=cfg.dropout)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    opt = AdamState.zeros_like(params.values)
    lam = cfg.lam if variant.uses_feature_loss else 0.0
    history = History()

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        sums = np.zeros(3)
        batches = make_batches(len(y), cfg.batch_size, shuffle_rng)
        for idx in batches:
            batch = full.subset(idx)
            target = y[idx]
            if variant.two_branch:
                l1, l_e = _step(params, opt, batch, target, lam, lr, cfg, dropout_rng, first=True)
                l2, _ = _step(params, opt, batch, target, lam, lr, cfg, dropout_rng, first=False)
            else:
                l1, l_e = _step(params, opt, batch, target, lam, lr, cfg, dropout_rng, first=True)
                l2 = l1
            sums += (l1, l2, l_e)
        sums /= len(batches)
        history.append(epoch, *sums.tolist(), lr)
        if callback is not None:
            callback(epoch, params)
    log.debug("trained %s on %d graphs: final l1=%.4g l2=%.4g", variant.value, len(y),
              history.l1[-1], history.l2[-1])
    return params, history


def _step(params, opt, batch, target, lam, lr, cfg, rng, first: bool):
    with Tape() as tape:
        out = predict_batch(batch, params, train=True, rng=rng)
        if out.h_r is None:
            loss = prediction_mse(out.p, target)
            l_e = float("nan")
        else:
            branch_p = out.p_f if first else out.p_r
            l_p = prediction_mse(branch_p, target)
            if lam > 0.0:
                le_t = irg_feature_loss(out.h_f, out.h_r)
                # L1 on the forward pass, L2 on the reverse pass; same form
                loss, _ = combined_losses(l_p, l_p, le_t, lam)
                l_e = float(le_t.data)
            else:
                loss = l_p
                l_e = float(irg_feature_loss(Tensor(out.h_f.data), Tensor(out.h_r.data)).data)
    params.zero_grad()
    backward(loss, tape)
    adam_step(params.values, params.grads, opt, lr, cfg.weight_decay)
    return float(loss.data), l_e


def train_mse(params: FrPredictorParams, dataset, vocab: OpVocabulary) -> float:
    """Eval-mode MSE of the averaged prediction over ``dataset``."""
    batch, y, _ = _as_training_data(dataset, vocab)
    return float(np.mean((predict(params, batch) - y) ** 2))
