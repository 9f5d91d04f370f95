import numpy as np
import pytest

from frnas.autodiff import ShapeMismatch, Tape, Tensor, backward, grad_check, mean_all
from frnas.gin import (
    EncoderParams,
    GinLayerParams,
    GraphBatch,
    encode,
    encoder_forward,
    gin_layer_forward,
)
from frnas.graph import ArchGraph, OpVocabulary, reverse_graph

VOCAB = OpVocabulary(("a", "b", "c"))


def _random_graph(rng, n=6):
    adj = np.triu(rng.random((n, n)) < 0.5, 1).astype(int)
    return ArchGraph(adj, rng.integers(0, VOCAB.size, n))


def test_aggregation_examples():
    from frnas.autodiff import gin_aggregate

    np.testing.assert_array_equal(gin_aggregate(Tensor([[2.0]]), np.zeros((1, 1))).data, [[2.0]])
    np.testing.assert_array_equal(
        gin_aggregate(Tensor([[1.0], [10.0]]), np.array([[0, 1], [0, 0]])).data, [[1.0], [11.0]])
    adj = np.array([[0, 0, 1], [0, 0, 1], [0, 0, 0]])
    out = gin_aggregate(Tensor([[1.0], [20.0], [300.0]]), adj).data
    assert out[2, 0] == 321.0


def test_layer_shape_checks():
    p = GinLayerParams.init(np.random.default_rng(0), 3)
    with pytest.raises(ShapeMismatch):
        gin_layer_forward(Tensor(np.ones((4, 2))), np.zeros((4, 4)), p, False)
    with pytest.raises(ShapeMismatch):
        gin_layer_forward(Tensor(np.ones((4, 3))), np.zeros((5, 5)), p, False)


def test_embedding_is_32_wide_and_eval_deterministic():
    rng = np.random.default_rng(1)
    p = EncoderParams.init(rng, VOCAB.size)
    for n in (1, 4, 9):
        g = _random_graph(rng, n)
        e1 = encoder_forward(g, False, p, VOCAB)
        e2 = encoder_forward(g, False, p, VOCAB)
        assert e1.shape == (32,)
        np.testing.assert_array_equal(e1.data, e2.data)


def test_reverse_direction_equals_reversed_graph():
    rng = np.random.default_rng(2)
    p = EncoderParams.init(rng, VOCAB.size)
    g = _random_graph(rng)
    np.testing.assert_allclose(encoder_forward(g, True, p, VOCAB).data,
                               encoder_forward(reverse_graph(g), False, p, VOCAB).data)


def test_vertex_permutation_invariance():
    rng = np.random.default_rng(3)
    p = EncoderParams.init(rng, VOCAB.size)
    for _ in range(10):
        g = _random_graph(rng, 7)
        perm = rng.permutation(7)
        a = g.adjacency[np.ix_(perm, perm)]
        h = ArchGraph(a, [g.ops[i] for i in perm])
        np.testing.assert_allclose(encoder_forward(g, False, p, VOCAB).data,
                                   encoder_forward(h, False, p, VOCAB).data, atol=1e-12)


def test_padded_batch_matches_single_graphs_in_eval():
    rng = np.random.default_rng(4)
    p = EncoderParams.init(rng, VOCAB.size)
    graphs = [_random_graph(rng, n) for n in (3, 6, 5)]
    batched = encode(GraphBatch.from_graphs(graphs, VOCAB), False, p, False).data
    single = np.stack([encoder_forward(g, False, p, VOCAB).data for g in graphs])
    np.testing.assert_allclose(batched, single, atol=1e-12)


def _train_embedding_and_grads(fused, seed=5):
    rng = np.random.default_rng(seed)
    p = EncoderParams.init(np.random.default_rng(0), VOCAB.size, dropout_rate=0.1)
    for layer in p.layers:
        for t in (layer.fc1.weight, layer.fc1.bias, layer.fc2.weight, layer.fc2.bias,
                  layer.bn.gamma, layer.bn.beta):
            t.requires_grad = True
    batch = GraphBatch.from_graphs([_random_graph(rng, n) for n in (4, 6, 5)], VOCAB)
    w = rng.normal(size=(3, 32))
    with Tape() as tape:
        emb = encode(batch, True, p, True, np.random.default_rng(7), fused=fused)
        loss = mean_all(emb * Tensor(w))
    backward(loss, tape)
    grads = [t.grad for layer in p.layers for t in (layer.fc1.weight, layer.fc2.bias, layer.bn.gamma)]
    return emb.data, grads


def test_fused_encoder_matches_composite_route():
    emb_a, grads_a = _train_embedding_and_grads(True)
    emb_b, grads_b = _train_embedding_and_grads(False)
    np.testing.assert_allclose(emb_a, emb_b, atol=1e-12)
    for a, b in zip(grads_a, grads_b):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("fused", [True, False])
def test_encoder_gradients_match_finite_differences(fused):
    rng = np.random.default_rng(6)
    p = EncoderParams.init(np.random.default_rng(1), VOCAB.size, dropout_rate=0.0)
    batch = GraphBatch.from_graphs([_random_graph(rng, n) for n in (4, 5, 6)], VOCAB)
    w = Tensor(rng.normal(size=(3, 32)))
    layer = p.layers[1]
    f = lambda *_: mean_all(encode(batch, False, p, True, fused=fused) * w)
    assert grad_check(f, [layer.fc1.weight, layer.fc2.bias, layer.bn.gamma], eps=1e-5) < 1e-4


def test_isolated_vertex_sees_only_itself():
    p = GinLayerParams.init(np.random.default_rng(0), VOCAB.size)
    h = np.eye(3)
    adj = np.array([[0, 1, 0], [0, 0, 0], [0, 0, 0]])
    from frnas.autodiff import gin_aggregate

    agg = gin_aggregate(Tensor(h), adj).data
    np.testing.assert_array_equal(agg[2], h[2])
