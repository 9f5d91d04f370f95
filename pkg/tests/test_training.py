import math

import numpy as np
import pytest

from frnas.autodiff import ShapeMismatch
from frnas.data import SyntheticSpaceConfig, gen_synthetic
from frnas.training import (
    AdamState,
    EmptyDataset,
    EpochOutOfRange,
    TrainConfig,
    adam_step,
    cosine_lr,
    make_batches,
    train_mse,
    train_predictor,
)

SEVEN = SyntheticSpaceConfig(seed=3, min_vertices=7, max_vertices=7)


def test_cosine_schedule():
    cfg = TrainConfig(epochs=300)
    assert cosine_lr(0, cfg) == 5e-3
    assert cosine_lr(150, cfg) == pytest.approx(2.5e-3, abs=1e-15)
    assert cosine_lr(299, cfg) < 1e-6
    for bad in (-1, 300):
        with pytest.raises(EpochOutOfRange):
            cosine_lr(bad, cfg)


def test_adam_examples():
    w, g = np.array([1.0]), np.array([1.0])
    state = AdamState.zeros_like(w)
    adam_step(w, g, state, lr=0.1)
    assert w[0] == pytest.approx(0.9, abs=1e-6)

    w = np.array([0.3, -2.0])
    before = w.copy()
    adam_step(w, np.zeros(2), AdamState.zeros_like(w), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(w, before)

    d = 0.01
    a, b = np.array([0.5, -1.5]), np.array([0.5, -1.5])
    adam_step(a, np.zeros(2), AdamState.zeros_like(a), lr=0.1, weight_decay=d)
    adam_step(b, d * b.copy(), AdamState.zeros_like(b), lr=0.1)
    np.testing.assert_array_equal(a, b)

    with pytest.raises(ShapeMismatch):
        adam_step(np.zeros(3), np.zeros(2), AdamState.zeros_like(np.zeros(3)), lr=0.1)


def test_adam_matches_textbook_update():
    rng = np.random.default_rng(0)
    w = rng.normal(size=5)
    ref, m, v = w.copy(), np.zeros(5), np.zeros(5)
    state = AdamState.zeros_like(w)
    for t in range(1, 8):
        g = rng.normal(size=5)
        adam_step(w, g, state, lr=0.01, weight_decay=1e-3)
        gt = g + 1e-3 * ref
        m = 0.9 * m + 0.1 * gt
        v = 0.999 * v + 0.001 * gt * gt
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(w, ref, rtol=1e-12)


def test_batches_cover_everything_and_never_leave_a_singleton():
    rng = np.random.default_rng(0)
    for n in (2, 17, 33, 50):
        batches = make_batches(n, 16, rng)
        assert sorted(np.concatenate(batches).tolist()) == list(range(n))
        assert min(len(b) for b in batches) >= 2


def test_config_file_round_trip(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("# comment\nlambda = 0.5\nepochs: 12\nlr0 = 1e-3\n")
    cfg = TrainConfig.from_file(path)
    assert (cfg.lam, cfg.epochs, cfg.lr0, cfg.batch_size) == (0.5, 12, 1e-3, 16)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"momentum": 1})
    with pytest.raises(ValueError):
        TrainConfig(lam=2.0)


def test_empty_dataset_rejected():
    with pytest.raises(EmptyDataset):
        train_predictor([], TrainConfig(epochs=1))


@pytest.mark.parametrize("variant", ["fr", "forward_only", "fr_no_feature_loss", "dirgin"])
def test_identical_seeds_give_identical_parameters(variant):
    recs = gen_synthetic(40, SEVEN)
    cfg = TrainConfig(epochs=3, seed=11)
    a, ha = train_predictor(recs, cfg, variant, SEVEN.vocab)
    b, hb = train_predictor(recs, cfg, variant, SEVEN.vocab)
    assert a.values.tobytes() == b.values.tobytes()
    assert ha.l1 == hb.l1


def test_history_csv(tmp_path):
    recs = gen_synthetic(20, SEVEN)
    _, hist = train_predictor(recs, TrainConfig(epochs=4), "fr", SEVEN.vocab)
    hist.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,l1,l2,l_e,lr" and len(lines) == 5
    assert hist.lr[0] == 5e-3


def test_every_parameter_gets_gradient_in_some_pass():
    from frnas.autodiff import Tape, backward
    from frnas.gin import GraphBatch
    from frnas.losses import combined_losses, irg_feature_loss, prediction_mse
    from frnas.predictor import build_variant, predict_batch

    recs = gen_synthetic(16, SEVEN)
    batch = GraphBatch.from_graphs([r.graph for r in recs], SEVEN.vocab)
    y = np.array([r.error_pct for r in recs])
    params = build_variant("fr", SEVEN.vocab, seed=1)
    # per tensor rather than per entry: a ReLU unit that is dead on this batch
    # legitimately receives no gradient
    touched = {name: False for name, _ in params.named_parameters()}
    for which in (0, 1):
        params.zero_grad()
        with Tape() as tape:
            out = predict_batch(batch, params, train=True, rng=np.random.default_rng(which))
            losses = combined_losses(prediction_mse(out.p_f, y), prediction_mse(out.p_r, y),
                                     irg_feature_loss(out.h_f, out.h_r), 0.8)
        backward(losses[which], tape)
        for name, t in params.named_parameters():
            touched[name] |= bool(t.grad.any())
    assert all(touched.values()), [k for k, v in touched.items() if not v]


def test_lambda_zero_passes_touch_only_their_branch():
    from frnas.autodiff import Tape, backward
    from frnas.gin import GraphBatch
    from frnas.losses import prediction_mse
    from frnas.predictor import build_variant, predict_batch

    recs = gen_synthetic(16, SEVEN)
    batch = GraphBatch.from_graphs([r.graph for r in recs], SEVEN.vocab)
    y = np.array([r.error_pct for r in recs])
    params = build_variant("fr_no_feature_loss", SEVEN.vocab, seed=1)
    names = np.concatenate([[n.split(".")[0]] * t.data.size for n, t in params.named_parameters()])
    params.zero_grad()
    with Tape() as tape:
        out = predict_batch(batch, params, train=True, rng=np.random.default_rng(0))
        loss = prediction_mse(out.p_f, y)
    backward(loss, tape)
    assert not params.grads[np.isin(names, ["enc_r", "head_r"])].any()
    assert params.grads[np.isin(names, ["enc_f", "head_f"])].any()


# The two smoke oracles below use pure MSE (lambda = 0) without dropout so
# that they measure whether optimisation can fit a representable target.
# Vertex count is fixed because mean pooling sees op fractions, not counts.

def test_learns_linear_function_of_an_op_count():
    recs = gen_synthetic(128, SEVEN)
    data = [(r.graph, 2.0 + r.graph.ops.count(0)) for r in recs]
    params, _ = train_predictor(data, TrainConfig(seed=0, lam=0.0, dropout=0.0), "fr", SEVEN.vocab)
    assert train_mse(params, data, SEVEN.vocab) < 1e-2


def test_constant_target_converges():
    recs = gen_synthetic(256, SEVEN)
    data = [(r.graph, 5.0) for r in recs]
    params, _ = train_predictor(data, TrainConfig(seed=0, lam=0.0, dropout=0.0), "fr", SEVEN.vocab)
    assert train_mse(params, data, SEVEN.vocab) < 1e-3
