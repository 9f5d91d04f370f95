"""Relational feature loss between the two encoders and the prediction losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import (
    ShapeMismatch,
    Tensor,
    add,
    mean_all,
    mse,
    pairwise_sqdist,
    record,
    scale,
    square,
    sub,
)


class BadLambda(ValueError):
    pass


def irg_feature_loss(h_f: Tensor, h_r: Tensor, fused: bool = True) -> Tensor:
    """Mean over all ordered pairs (i, j), diagonal included, of
    ``(||hf_i - hf_j||^2 - ||hr_i - hr_j||^2)^2``.

    ``fused=False`` builds the same value from tape primitives.
    """
    if h_f.shape != h_r.shape or len(h_f.shape) != 2:
        raise ShapeMismatch(f"embeddings {h_f.shape} vs {h_r.shape}")
    if h_f.shape[0] < 1:
        raise ShapeMismatch("need at least one embedding row")
    if not fused:
        return mean_all(square(sub(pairwise_sqdist(h_f), pairwise_sqdist(h_r))))

    a = np.ascontiguousarray(h_f.data)
    b = np.ascontiguousarray(h_r.data)
    m = a.shape[0]
    diff = kernels.pairwise_sqdist(a) - kernels.pairwise_sqdist(b)
    out = Tensor(np.mean(diff * diff))

    def fn(g):
        # d/dD of the mean square is 2 * diff / m^2; D is symmetric in (i, j)
        w = (4.0 * float(g) / (m * m)) * diff
        rows = w.sum(axis=1)[:, None]
        if h_f.requires_grad:
            h_f._accumulate(2.0 * (rows * a - w @ a))
        if h_r.requires_grad:
            h_r._accumulate(-2.0 * (rows * b - w @ b))

    return record(out, (h_f, h_r), fn)


def prediction_mse(p: Tensor, y) -> Tensor:
    return mse(p, y)


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise BadLambda(f"lambda must lie in [0, 1], got {lam}")
    return lam


def combined_losses(l_pf, l_pr, l_e, lam: float):
    """``((1 - lam) * l_pf + lam * l_e, (1 - lam) * l_pr + lam * l_e)``.

    Works on floats and on scalar tensors alike.
    """
    lam = _check_lambda(lam)
    if isinstance(l_pf, Tensor):
        l_1 = add(scale(l_pf, 1.0 - lam), scale(l_e, lam))
        l_2 = add(scale(l_pr, 1.0 - lam), scale(l_e, lam))
        return l_1, l_2
    return (1.0 - lam) * l_pf + lam * l_e, (1.0 - lam) * l_pr + lam * l_e


@dataclass(frozen=True)
class LossBundle:
    l_e: float
    l_pf: float
    l_pr: float
    l_1: float
    l_2: float
    lam: float

    @classmethod
    def from_parts(cls, l_pf: float, l_pr: float, l_e: float, lam: float) -> "LossBundle":
        l_1, l_2 = combined_losses(float(l_pf), float(l_pr), float(l_e), lam)
        return cls(float(l_e), float(l_pf), float(l_pr), l_1, l_2, float(lam))

