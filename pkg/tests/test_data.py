import json

import numpy as np
import pytest

from frnas.data import (
    DatasetRecord,
    ExhaustedResampling,
    InsufficientData,
    ParseError,
    SyntheticSpaceConfig,
    ValidationError,
    default_synthetic_config,
    gen_synthetic,
    load_jsonl,
    longest_path_vertices,
    sample_split,
    synthetic_features,
    write_jsonl,
)
from frnas.graph import ArchGraph, OpVocabulary, UnknownOpName, topological_order, validate_graph

VOCAB = OpVocabulary(("conv", "out"))


def _write(tmp_path, lines):
    path = tmp_path / "d.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_load_example_line(tmp_path):
    line = '{"id":"a","adjacency":[[0,1],[0,0]],"ops":["conv","out"],"accuracy":0.91}'
    (rec,) = load_jsonl(_write(tmp_path, [line]), VOCAB)
    assert rec.id == "a" and rec.error_pct == pytest.approx(9.0)
    assert DatasetRecord("b", rec.graph, 1.0).error_pct == 0.0


@pytest.mark.parametrize("line, exc", [
    ("{not json", ParseError),
    ('{"id":"a","adjacency":[[0]],"ops":["conv"]}', ParseError),
    ('{"id":"a","adjacency":[[0,1],[1,0]],"ops":["conv","out"],"accuracy":0.5}', ValidationError),
    ('{"id":"a","adjacency":[[0]],"ops":["conv"],"accuracy":1.5}', ValidationError),
    ('{"id":"a","adjacency":[[0]],"ops":["pool"],"accuracy":0.5}', UnknownOpName),
])
def test_malformed_lines_report_line_number(tmp_path, line, exc):
    good = '{"id":"g","adjacency":[[0]],"ops":["out"],"accuracy":0.5}'
    with pytest.raises(exc) as info:
        load_jsonl(_write(tmp_path, [good, line]), VOCAB)
    if exc is not UnknownOpName:
        assert info.value.line == 2


def test_round_trip(tmp_path):
    cfg = default_synthetic_config()
    recs = gen_synthetic(30, cfg)
    write_jsonl(recs, tmp_path / "x.jsonl", cfg.vocab)
    back = load_jsonl(tmp_path / "x.jsonl", cfg.vocab)
    assert [(r.id, r.graph, r.accuracy) for r in back] == [(r.id, r.graph, r.accuracy) for r in recs]


def test_synthetic_is_pure_and_valid():
    cfg = default_synthetic_config()
    a, b = gen_synthetic(200, cfg), gen_synthetic(200, cfg)
    assert [r.to_json(cfg.vocab) for r in a] == [r.to_json(cfg.vocab) for r in b]
    assert len({r.graph.key() for r in a}) == 200
    for r in a:
        validate_graph(r.graph, cfg.vocab)
        assert r.error_pct == 100.0 * (1.0 - r.accuracy)


def test_zero_weights_give_one_half():
    cfg = SyntheticSpaceConfig(op_weights=(0.0,) * 5, edge_weight=0.0, longest_path_weight=0.0,
                               designated_weight=0.0, noise=0.0)
    assert {r.accuracy for r in gen_synthetic(20, cfg)} == {0.5}


def _longest_path_by_dfs(adj):
    n = len(adj)
    memo = {}

    def down(u):
        if u not in memo:
            memo[u] = max([1 + down(w) for w in range(n) if adj[u][w]], default=0)
        return memo[u]

    return max(down(u) for u in range(n))


def test_edge_weight_only_is_monotone_in_edge_count():
    cfg = SyntheticSpaceConfig(op_weights=(0.0,) * 5, edge_weight=0.3, longest_path_weight=0.0,
                               designated_weight=0.0, noise=0.0)
    recs = gen_synthetic(150, cfg)
    edges = np.array([r.graph.adjacency.sum() for r in recs])  # independent count
    acc = np.array([r.accuracy for r in recs])
    order = np.argsort(edges, kind="stable")
    assert np.all(np.diff(acc[order]) >= -1e-15)
    assert all(np.isclose(a, 1 / (1 + np.exp(-0.3 * e))) for a, e in zip(acc, edges))


def test_longest_path_features_match_dfs():
    for r in gen_synthetic(100, default_synthetic_config()):
        adj = r.graph.adjacency.tolist()
        length, on_path = longest_path_vertices(r.graph.adjacency)
        assert length == _longest_path_by_dfs(adj)
        assert on_path.any()


def test_exhausted_resampling():
    cfg = SyntheticSpaceConfig(min_vertices=2, max_vertices=2, op_names=("a",), op_weights=(0.0,),
                               designated_op=0, max_attempts_factor=20)
    with pytest.raises(ExhaustedResampling):
        gen_synthetic(5, cfg)


def test_split_is_nested_and_disjoint():
    recs = gen_synthetic(1500, default_synthetic_config())
    split = sample_split(recs, [50, 200, 400], 1000, seed=3)
    assert split.train[50] == split.train[200][:50] and split.train[200] == split.train[400][:200]
    assert not {r.id for r in split.test} & {r.id for r in split.train[400]}
    exact = sample_split(recs, [500], 1000, seed=0)
    assert {r.id for r in exact.test} | {r.id for r in exact.train[500]} == {r.id for r in recs}
    with pytest.raises(InsufficientData):
        sample_split(recs, [501], 1000, seed=0)


def test_different_seeds_shuffle_differently():
    recs = gen_synthetic(300, default_synthetic_config())
    orders = {tuple(r.id for r in sample_split(recs, [100], 100, seed=s).train[100])
              for s in range(20)}
    assert len(orders) == 20


def test_config_file_round_trip(tmp_path):
    cfg = default_synthetic_config()
    cfg.to_file(tmp_path / "c.json")
    assert SyntheticSpaceConfig.from_file(tmp_path / "c.json") == cfg
    assert json.loads((tmp_path / "c.json").read_text())["op_names"] == list(cfg.op_names)
