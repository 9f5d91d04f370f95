"""Rank correlation, embedding-distance diagnostics and the multi-trial experiment runner."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .autodiff import ShapeMismatch
from .data import DatasetRecord, InsufficientData, sample_split
from .gin import GraphBatch
from .graph import OpVocabulary
from .predictor import Variant, embed, predict
from .training import History, TrainConfig, train_predictor

log = logging.getLogger(__name__)

N_DIAGNOSTIC_GRAPHS = 32


class TooFewItems(ValueError):
    pass


class AllTied(ValueError):
    pass


def kendall_tau(pred, truth) -> float:
    """Tie-corrected Kendall tau-b.

    Pairs tied in both lists count toward neither the numerator nor either
    tie term.
    """
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeMismatch(f"pred has {x.size} items, truth has {y.size}")
    if x.size < 2:
        raise TooFewItems("kendall tau needs at least 2 items")
    c, d, tx, ty = kernels.kendall_counts(x, y)
    denom = (c + d + tx) * (c + d + ty)
    if denom == 0:
        raise AllTied("every pair is tied in at least one list")
    return (c - d) / math.sqrt(denom)


def irg_diff_matrix(h_f, h_r) -> np.ndarray:
    """``|D_f - D_r|`` where ``D[i, j]`` is the squared distance between rows i and j."""
    a = np.ascontiguousarray(h_f, dtype=np.float64)
    b = np.ascontiguousarray(h_r, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeMismatch(f"embeddings {a.shape} vs {b.shape}")
    return np.abs(kernels.pairwise_sqdist(a) - kernels.pairwise_sqdist(b))


def write_matrix_csv(matrix: np.ndarray, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for row in np.asarray(matrix):
            w.writerow([f"{v:.6f}" for v in row])


@dataclass(frozen=True)
class TrialReport:
    seed: int
    variant: str
    train_size: int
    test_size: int
    kendall_tau: float
    wall_time: float
    irg_diff_mean: float = float("nan")
    history: History | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class SummaryRow:
    variant: str
    train_size: int
    mean_tau: float
    std_tau: float
    sem_tau: float
    n_trials: int


@dataclass
class ExperimentSummary:
    rows: list[SummaryRow]
    trials: list[TrialReport]

    @classmethod
    def from_trials(cls, trials: Sequence[TrialReport]) -> "ExperimentSummary":
        groups: dict[tuple[str, int], list[float]] = {}
        for t in trials:
            groups.setdefault((t.variant, t.train_size), []).append(t.kendall_tau)
        rows = []
        for (variant, size), taus in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            taus = np.asarray(taus)
            std = float(taus.std(ddof=1)) if taus.size > 1 else 0.0
            rows.append(SummaryRow(variant, size, float(taus.mean()), std,
                                   std / math.sqrt(taus.size), int(taus.size)))
        return cls(rows, list(trials))

    def row(self, variant, train_size: int) -> SummaryRow:
        name = Variant.parse(variant).value
        for r in self.rows:
            if r.variant == name and r.train_size == train_size:
                return r
        raise KeyError((name, train_size))

    def taus(self, variant, train_size: int) -> dict[int, float]:
        """Per-seed tau for one grid cell, keyed by seed for paired comparisons."""
        name = Variant.parse(variant).value
        return {t.seed: t.kendall_tau for t in self.trials
                if t.variant == name and t.train_size == train_size}

    def irg_means(self, variant, train_size: int) -> dict[int, float]:
        name = Variant.parse(variant).value
        return {t.seed: t.irg_diff_mean for t in self.trials
                if t.variant == name and t.train_size == train_size}

    def write_summary_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "train_size", "mean_tau", "std_tau", "sem_tau", "n_trials"])
            for r in self.rows:
                w.writerow([r.variant, r.train_size, f"{r.mean_tau:.10f}", f"{r.std_tau:.10f}",
                            f"{r.sem_tau:.10f}", r.n_trials])

    def write_trials_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "variant", "train_size", "tau", "irg_diff_mean", "seconds"])
            for t in self.trials:
                w.writerow([t.seed, t.variant, t.train_size, f"{t.kendall_tau:.10f}",
                            f"{t.irg_diff_mean:.10f}", f"{t.wall_time:.3f}"])


def paired_difference(a: dict[int, float], b: dict[int, float]) -> tuple[float, float]:
    """Mean and standard error of ``a[s] - b[s]`` over the seeds both contain."""
    seeds = sorted(set(a) & set(b))
    if len(seeds) < 2:
        raise TooFewItems("paired comparison needs at least 2 shared seeds")
    d = np.array([a[s] - b[s] for s in seeds])
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(d.size))


def run_trial(split_train: Sequence[DatasetRecord], test_batch: GraphBatch, y_test: np.ndarray,
              variant, cfg: TrainConfig, vocab: OpVocabulary, seed: int,
              n_diag: int = N_DIAGNOSTIC_GRAPHS) -> TrialReport:
    variant = Variant.parse(variant)
    start = time.perf_counter()
    params, history = train_predictor(split_train, cfg, variant, vocab)
    tau = kendall_tau(predict(params, test_batch), y_test)
    irg = float("nan")
    if variant.two_branch:
        h_f, h_r = embed(params, test_batch.subset(np.arange(min(n_diag, len(test_batch)))))
        irg = float(irg_diff_matrix(h_f, h_r).mean())
    return TrialReport(seed, variant.value, len(split_train), len(y_test), tau,
                       time.perf_counter() - start, irg, history)


def run_experiment(records: Sequence[DatasetRecord], vocab: OpVocabulary,
                   variants: Iterable = (Variant.FR, Variant.FORWARD_ONLY),
                   train_sizes: Iterable[int] = (50, 400), n_trials: int = 30,
                   test_size: int = 1000, cfg: TrainConfig | None = None, base_seed: int = 0,
                   progress: Callable[[TrialReport], None] | None = None) -> ExperimentSummary:
    """Paired-seed grid: every variant sees the same nested train sets and test set per seed.

    Trial ``r`` uses split seed ``base_seed + r`` and the same value as the
    training seed, so variants differ only in architecture and loss.
    """
    cfg = cfg or TrainConfig()
    variants = [Variant.parse(v) for v in variants]
    sizes = sorted({int(s) for s in train_sizes})
    if max(sizes) + test_size > len(records):
        raise InsufficientData(
            f"need {max(sizes)} train + {test_size} test records, have {len(records)}")
    trials = []
    for r in range(n_trials):
        seed = base_seed + r
        split = sample_split(records, sizes, test_size, seed)
        test_batch = GraphBatch.from_graphs([rec.graph for rec in split.test], vocab)
        y_test = np.array([rec.error_pct for rec in split.test])
        trial_cfg = TrainConfig(**{**cfg.to_dict(), "seed": seed})
        for size in sizes:
            for variant in variants:
                report = run_trial(split.train[size], test_batch, y_test, variant, trial_cfg,
                                   vocab, seed)
                log.info("seed %d %s n=%d tau=%.4f (%.1fs)", seed, report.variant, size,
                         report.kendall_tau, report.wall_time)
                if progress is not None:
                    progress(report)
                trials.append(report)
    return ExperimentSummary.from_trials(trials)
