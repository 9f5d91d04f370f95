"""Dataset records, JSONL ingestion, the synthetic search space and nested splits."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .graph import ArchGraph, GraphError, OpVocabulary, topological_order, validate_graph


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(ValueError):
    def __init__(self, line: int, cause: Exception):
        super().__init__(f"line {line}: {cause}")
        self.line = line
        self.cause = cause


class ExhaustedResampling(RuntimeError):
    pass


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    graph: ArchGraph
    accuracy: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")

    @property
    def error_pct(self) -> float:
        return 100.0 * (1.0 - self.accuracy)

    def to_json(self, vocab: OpVocabulary) -> str:
        return json.dumps({
            "id": self.id,
            "adjacency": self.graph.adjacency.astype(int).tolist(),
            "ops": [vocab.names[i] for i in self.graph.ops],
            "accuracy": self.accuracy,
        })


_KEYS = ("id", "adjacency", "ops", "accuracy")


def load_jsonl(path, vocab: OpVocabulary) -> list[DatasetRecord]:
    """Read one record per line; blank lines are skipped. Line numbers are 1-based."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, exc.msg) from None
            if not isinstance(obj, dict):
                raise ParseError(lineno, "expected a JSON object")
            missing = [k for k in _KEYS if k not in obj]
            if missing:
                raise ParseError(lineno, f"missing keys {missing}")
            ops = [vocab.index(name) for name in obj["ops"]]
            try:
                adj = np.asarray(obj["adjacency"])
                g = ArchGraph(adj, tuple(ops))
                validate_graph(g, vocab)
                rec = DatasetRecord(str(obj["id"]), g, float(obj["accuracy"]))
            except (GraphError, ValueError, TypeError) as exc:
                raise ValidationError(lineno, exc) from None
            records.append(rec)
    return records


def write_jsonl(records: Sequence[DatasetRecord], path, vocab: OpVocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json(vocab) + "\n")


@dataclass(frozen=True)
class SyntheticSpaceConfig:
    """Random DAG space with a topology-sensitive accuracy oracle.

    ``op_weights`` has one entry per op; the oracle's features are the op
    counts, the edge count, the longest-path length in edges, and how many
    vertices carrying ``designated_op`` lie on a longest path.
    """

    min_vertices: int = 5
    max_vertices: int = 8
    op_names: tuple[str, ...] = ("conv3", "conv1", "pool", "skip", "zero")
    edge_prob: float = 0.4
    op_weights: tuple[float, ...] = (0.15, 0.05, -0.10, 0.0, -0.20)
    edge_weight: float = -0.05
    longest_path_weight: float = 0.35
    designated_op: int = 0
    designated_weight: float = 0.30
    bias: float = 0.0
    noise: float = 0.05
    seed: int = 0
    max_attempts_factor: int = 50

    def __post_init__(self):
        object.__setattr__(self, "op_names", tuple(self.op_names))
        object.__setattr__(self, "op_weights", tuple(float(w) for w in self.op_weights))
        if not 2 <= self.min_vertices <= self.max_vertices:
            raise ValueError("need 2 <= min_vertices <= max_vertices")
        if len(self.op_weights) != len(self.op_names):
            raise ValueError("op_weights must have one entry per op name")
        if not 0.0 <= self.edge_prob <= 1.0:
            raise ValueError("edge_prob must lie in [0, 1]")
        if not 0 <= self.designated_op < len(self.op_names):
            raise ValueError("designated_op is not a valid op index")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    @property
    def vocab(self) -> OpVocabulary:
        return OpVocabulary(self.op_names)

    @property
    def weights(self) -> np.ndarray:
        return np.array(self.op_weights + (self.edge_weight, self.longest_path_weight,
                                           self.designated_weight))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["op_names"] = list(self.op_names)
        d["op_weights"] = list(self.op_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpaceConfig":
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "SyntheticSpaceConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def default_synthetic_config() -> SyntheticSpaceConfig:
    """The committed configuration shipped in ``frnas/configs/synthetic.json``."""
    from importlib import resources

    text = resources.files("frnas").joinpath("configs/synthetic.json").read_text("utf-8")
    return SyntheticSpaceConfig.from_dict(json.loads(text))


def longest_path_vertices(adjacency: np.ndarray) -> tuple[int, np.ndarray]:
    """Longest path length in edges and a mask of vertices lying on some longest path."""
    a = np.asarray(adjacency)
    order = topological_order(a)
    if order is None:
        raise GraphError("graph has a cycle")
    n = a.shape[0]
    down = np.zeros(n, dtype=int)  # longest path ending at v
    for v in order:
        preds = np.flatnonzero(a[:, v])
        if preds.size:
            down[v] = down[preds].max() + 1
    up = np.zeros(n, dtype=int)  # longest path starting at v
    for v in reversed(order):
        succ = np.flatnonzero(a[v])
        if succ.size:
            up[v] = up[succ].max() + 1
    total = down + up
    length = int(total.max())
    return length, total == length


def synthetic_features(g: ArchGraph, cfg: SyntheticSpaceConfig) -> np.ndarray:
    counts = np.bincount(np.asarray(g.ops), minlength=len(cfg.op_names)).astype(float)
    length, on_path = longest_path_vertices(g.adjacency)
    designated = sum(1 for v in np.flatnonzero(on_path) if g.ops[v] == cfg.designated_op)
    return np.concatenate([counts, [g.n_edges, length, designated]])


def _sample_graph(rng: np.random.Generator, cfg: SyntheticSpaceConfig) -> ArchGraph:
    n = int(rng.integers(cfg.min_vertices, cfg.max_vertices + 1))
    upper = np.triu(rng.random((n, n)) < cfg.edge_prob, k=1)
    # every non-source vertex gets at least one predecessor so the DAG is connected
    for j in range(1, n):
        if not upper[:j, j].any():
            upper[int(rng.integers(0, j)), j] = True
    ops = tuple(int(o) for o in rng.integers(0, len(cfg.op_names), size=n))
    return ArchGraph(upper.astype(np.int8), ops)


def gen_synthetic(n: int, cfg: SyntheticSpaceConfig) -> list[DatasetRecord]:
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(cfg.seed)
    w = cfg.weights
    seen: set[bytes] = set()
    records = []
    attempts = 0
    limit = cfg.max_attempts_factor * n
    while len(records) < n:
        attempts += 1
        if attempts > limit:
            raise ExhaustedResampling(
                f"only {len(records)} unique graphs after {limit} draws; space too small for {n}")
        g = _sample_graph(rng, cfg)
        noise = rng.normal(0.0, cfg.noise) if cfg.noise > 0 else 0.0
        if g.key() in seen:
            continue
        seen.add(g.key())
        z = float(w @ synthetic_features(g, cfg)) + cfg.bias + noise
        records.append(DatasetRecord(f"syn-{len(records):06d}", g, 1.0 / (1.0 + math.exp(-z))))
    return records


@dataclass(frozen=True)
class Split:
    train: dict[int, list[DatasetRecord]] = field(default_factory=dict)
    test: list[DatasetRecord] = field(default_factory=list)


def sample_split(records: Sequence[DatasetRecord], train_sizes, test_size: int,
                 seed: int) -> Split:
    """Nested train sets (each smaller one a prefix of the largest) and a disjoint test set."""
    sizes = sorted({int(s) for s in np.atleast_1d(train_sizes)})
    if not sizes or sizes[0] < 1 or test_size < 1:
        raise ValueError("train sizes and test size must be positive")
    largest = sizes[-1]
    if largest + test_size > len(records):
        raise InsufficientData(
            f"need {largest} train + {test_size} test records, have {len(records)}")
    perm = np.random.default_rng(seed).permutation(len(records))
    pool = [records[i] for i in perm]
    train = pool[:largest]
    test = pool[largest:largest + test_size]
    return Split({s: train[:s] for s in sizes}, test)
