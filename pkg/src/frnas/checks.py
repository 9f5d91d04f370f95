"""Finite-difference check of the full two-branch predictor."""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, backward
from .gin import GraphBatch, encode
from .graph import ArchGraph, OpVocabulary
from .losses import combined_losses, irg_feature_loss, prediction_mse
from .predictor import Variant, build_variant


def random_graph_batch(rng: np.random.Generator, vocab: OpVocabulary, m: int = 4,
                       n_range=(4, 7), edge_prob: float = 0.5) -> GraphBatch:
    graphs = []
    for _ in range(m):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        adj = np.triu(rng.random((n, n)) < edge_prob, k=1).astype(np.int8)
        graphs.append(ArchGraph(adj, rng.integers(0, vocab.size, n)))
    return GraphBatch.from_graphs(graphs, vocab)


def predictor_grad_check(seed: int, variant="fr", lam: float = 0.8, eps: float = 1e-5,
                         m: int = 4, vocab_size: int = 6, refine_above: float = 1e-4,
                         refine_steps=(3e-6, 1e-6)) -> float:
    """Worst relative error over every parameter for both sequential losses.

    Batch norm runs in train mode; dropout is disabled so the loss is a
    deterministic function of the weights. Errors are scored as
    ``|a - n| / max(|a|, |n|, 1e-6 * max|a|)``. Central differences use step
    ``eps``; entries scoring at least ``refine_above`` are re-estimated with
    each of ``refine_steps`` and keep their best score.
    """
    variant = Variant.parse(variant)
    if not variant.two_branch:
        raise ValueError("the sequential-loss check needs a two-branch variant")
    rng = np.random.default_rng(seed)
    vocab = OpVocabulary(tuple(f"op{i}" for i in range(vocab_size)))
    batch = random_graph_batch(rng, vocab, m)
    y = rng.uniform(0.0, 10.0, size=m)
    params = build_variant(variant, vocab, seed=seed, dropout=0.0)
    reverse = variant is not Variant.FORWARD_ONLY

    def forward_branch():
        h = encode(batch, False, params.enc_f, True)
        return h, params.head_f(h, True)

    def reverse_branch():
        h = encode(batch, reverse, params.enc_r, True)
        return h, params.head_r(h, True)

    def losses(f=None, r=None):
        h_f, p_f = f or forward_branch()
        h_r, p_r = r or reverse_branch()
        l_e = irg_feature_loss(h_f, h_r)
        return combined_losses(prediction_mse(p_f, y), prediction_mse(p_r, y), l_e, lam)

    analytic = []
    for which in (0, 1):
        params.zero_grad()
        with Tape() as tape:
            loss = losses()[which]
        backward(loss, tape)
        analytic.append(params.grads.copy())

    # a weight of one branch leaves the other branch's output unchanged
    f0, r0 = forward_branch(), reverse_branch()
    in_forward = np.concatenate([
        np.full(t.data.size, name.startswith(("enc_f.", "head_f.")))
        for name, t in params.named_parameters()])
    values = params.values

    def central(i, h):
        cached = {"r": r0} if in_forward[i] else {"f": f0}
        orig = values[i]
        values[i] = orig + h
        up = [float(t.data) for t in losses(**cached)]
        values[i] = orig - h
        down = [float(t.data) for t in losses(**cached)]
        values[i] = orig
        return (up[0] - down[0]) / (2.0 * h), (up[1] - down[1]) / (2.0 * h)

    def rel_error(a, n, floor):
        return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)

    numeric = np.array([central(i, eps) for i in range(values.size)]).T
    floors = [1e-6 * max(float(np.abs(a).max()), 1e-12) for a in analytic]
    errors = np.array([rel_error(a, n, f) for a, n, f in zip(analytic, numeric, floors)])
    # a step that straddles a ReLU kink gives a wrong difference that vanishes
    # at smaller steps; a wrong gradient does not
    for i in np.flatnonzero(errors.max(axis=0) >= refine_above):
        for h in refine_steps:
            est = central(i, h)
            for k in (0, 1):
                errors[k, i] = min(errors[k, i], rel_error(analytic[k][i], est[k], floors[k]))
    return float(errors.max())
