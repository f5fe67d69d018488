import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import check_gradients
from stencil_lab.labeling import Quartile, build_dataset
from stencil_lab.model import (Adam, CheckpointError, ModelConfig, PointNet, TrainConfig,
                               canonical_points, cross_entropy, history_csv, load_checkpoint,
                               param_shapes, predict, predict_proba, recalibrate_statistics,
                               save_checkpoint, stratified_split, train)
from stencil_lab.nodes import GenConfig

SMALL = ModelConfig(input_size=15, point_widths=(8, 8, 16), dense_widths=(16, 8))


@pytest.fixture(scope="module")
def data():
    return build_dataset(GenConfig(seed=2), [6, 15], 60)


@pytest.fixture(scope="module")
def batch(data):
    x, y, _, _ = data.arrays()
    return x, y


def test_default_architecture_shapes():
    shapes = param_shapes(ModelConfig())
    assert shapes["point0.weight"] == (2, 128)
    assert shapes["point4.weight"] == (256, 2048)
    assert shapes["dense0.weight"] == (2048, 1024)
    assert shapes["dense1.weight"] == (1024, 512)
    assert shapes["out.weight"] == (512, 4)
    assert "out.gamma" not in shapes


def test_init_deterministic_and_scaled():
    a = PointNet.init(SMALL, 3)
    b = PointNet.init(SMALL, 3)
    c = PointNet.init(SMALL, 4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params["point0.weight"], c.params["point0.weight"])
    assert np.abs(a.params["point1.weight"]).max() <= math.sqrt(6 / 8)
    assert np.all(a.params["point0.running_var"] == 1) and np.all(a.params["dense0.gamma"] == 1)


def test_softmax_sums_to_one(batch):
    x, _ = batch
    model = PointNet.init(ModelConfig(), 0)
    probs = predict_proba(model, x)
    assert probs.shape == (len(x), 4)
    assert np.all(np.abs(probs.sum(axis=1) - 1) <= 1e-6)
    assert np.all(probs >= 0)


def test_input_shape_checked():
    model = PointNet.init(SMALL, 0)
    with pytest.raises(ValueError):
        model.forward(np.zeros((2, 9, 2)))
    with pytest.raises(ValueError):
        model.forward(np.zeros((2, 15, 2)), mode="eval")


def test_permutation_and_padding_invariance(data):
    model = PointNet.init(ModelConfig(), 1)
    rng = np.random.default_rng(0)
    for rec in data.records[:20]:
        c = rec.stencil.coords
        s = len(c)
        perm = c[rng.permutation(s)]
        # pad with copies of an arbitrary member instead of the centre
        pad = np.vstack([c, np.repeat(c[rng.integers(s)][None], 15 - s, axis=0)])
        pad = pad[rng.permutation(15)]
        ref = model.forward(np.vstack([c, np.zeros((15 - s, 2))])[None])
        for other in (np.vstack([perm, np.zeros((15 - s, 2))]), pad):
            assert model.forward(other[None]).tobytes() == ref.tobytes()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 15))
def test_canonical_points_properties(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.integers(-3, 3, size=(n, 2)).astype(float)
    pts = np.vstack([pts, pts[rng.integers(n, size=15 - n)]])
    canon = canonical_points(pts[None])[0]
    assert {tuple(p) for p in canon} == {tuple(p) for p in pts}
    assert np.array_equal(canonical_points(pts[rng.permutation(15)][None])[0], canon)
    assert np.array_equal(canonical_points(canon[None])[0], canon)


def test_cross_entropy_examples():
    assert cross_entropy([[1.0, 0, 0, 0]], [0]) == 0.0
    assert cross_entropy([[0.25] * 4], [2]) == pytest.approx(math.log(4), rel=1e-15)
    assert cross_entropy([[0.5, 0.5, 0, 0]], [1]) == pytest.approx(math.log(2), rel=1e-15)
    assert cross_entropy([[1.0, 0, 0, 0]], [3]) == pytest.approx(-math.log(1e-12))


@pytest.mark.parametrize("batch_stats", [False, True], ids=["fixed-stats", "batch-stats"])
def test_gradients_match_finite_differences(batch, batch_stats):
    x, y = batch
    model = PointNet.init(SMALL, 0, "float64")
    recalibrate_statistics(model, x)
    result = check_gradients(model, x[:32], y[:32], batch_stats=batch_stats, count=100)
    assert result.checked == 100
    assert result.max_rel < 1e-4, result.worst
    assert result.redrawn < 200


def test_zero_upstream_gives_zero_gradients(batch):
    x, _ = batch
    model = PointNet.init(SMALL, 0, "float64")
    for bs in (False, True):
        _, cache = model.forward(x[:8], "infer", batch_stats=bs, keep_cache=True)
        grads = model._backward_from_logits(cache, np.zeros((8, 4)))
        assert all(not g.any() for g in grads.values())


def test_duplicated_points_leave_gradients_unchanged(data):
    x, y, _, sizes = data.arrays()
    model = PointNet.init(SMALL, 5, "float64")
    k = int(np.flatnonzero(sizes == 6)[0])
    stencil = x[k:k + 1]
    _, cache = model.forward(stencil, "infer", keep_cache=True)
    g1 = model.backward(cache, y[k:k + 1])
    dup = stencil.copy()
    dup[0, 6:] = stencil[0, 3]
    _, cache2 = model.forward(dup, "infer", keep_cache=True)
    g2 = model.backward(cache2, y[k:k + 1])
    assert all(g1[name].tobytes() == g2[name].tobytes() for name in g1)


def test_adam_behaviour():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    opt = Adam(learning_rate=0.1)
    opt.step(params, {"w": np.zeros(3)})
    assert np.array_equal(params["w"], [1.0, -2.0, 0.5])
    opt = Adam(learning_rate=0.1)
    opt.step(params, {"w": np.array([2.0, -3.0, 0.0])})
    # first step moves each coordinate by the step size against the gradient sign
    np.testing.assert_allclose(params["w"], [0.9, -1.9, 0.5], atol=1e-6)


def test_adam_deterministic():
    runs = []
    for _ in range(2):
        params = {"w": np.ones(4)}
        opt = Adam()
        for k in range(5):
            opt.step(params, {"w": np.arange(4.0) - k})
        runs.append(params["w"].tobytes())
    assert runs[0] == runs[1]


def test_stratified_split():
    labels = np.repeat(np.arange(4), 25)
    sizes = np.tile([6, 15], 50)
    tr, te = stratified_split(labels, sizes, 0.2, 0)
    assert len(te) == 20 and len(tr) == 80 and not set(tr) & set(te)
    assert np.array_equal(stratified_split(labels, sizes, 0.2, 0)[1], te)


def test_train_history_and_determinism(data):
    cfg = TrainConfig(batch_size=32, epochs=3, seed=1)
    m1, h1, split1 = train(data, SMALL, cfg)
    m2, h2, split2 = train(data, SMALL, cfg)
    assert [h.epoch for h in h1] == [1, 2, 3]
    assert history_csv(h1) == history_csv(h2)
    assert history_csv(h1).splitlines()[0] == "epoch,train_loss,train_acc,test_loss,test_acc"
    assert all(np.array_equal(m1.params[k], m2.params[k]) for k in m1.params)
    assert np.array_equal(split1[1], split2[1])
    assert m1.config.input_size == 15


def test_training_loss_decreases(data):
    _, hist, _ = train(data, SMALL, TrainConfig(batch_size=16, epochs=8, seed=0))
    assert hist[-1].train_loss < hist[0].train_loss


def test_predict(data):
    model = PointNet.init(SMALL, 0)
    q, probs = predict(model, data.records[0].stencil)
    assert isinstance(q, Quartile) and probs.shape == (4,)
    assert predict(model, data.records[0].stencil)[1].tobytes() == probs.tobytes()
    with pytest.raises(ValueError):
        predict(model, np.zeros((16, 2)))


def test_checkpoint_round_trip(tmp_path, data):
    model, _, _ = train(data, SMALL, TrainConfig(batch_size=32, epochs=1))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, {"seed": 0})
    loaded, manifest = load_checkpoint(path)
    assert manifest["seed"] == 0 and manifest["model_config"]["dense_widths"] == [16, 8]
    x, _, _, _ = data.arrays()
    assert predict_proba(loaded, x).tobytes() == predict_proba(model, x).tobytes()
    save_checkpoint(tmp_path / "again.ckpt", loaded, {"seed": 0})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_shape_mismatch(tmp_path, data):
    model = PointNet.init(SMALL, 0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, {})
    raw = path.read_bytes().replace(b'"point_widths": [8, 8, 16]', b'"point_widths": [8, 9, 16]')
    path.write_bytes(raw)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)
    path.write_bytes(b"garbage\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_recalibration_matches_population_statistics(batch):
    x, _ = batch
    model = PointNet.init(SMALL, 0, "float64")
    recalibrate_statistics(model, x, batch_size=len(x))
    z = x.reshape(-1, 2) @ model.params["point0.weight"]
    np.testing.assert_allclose(model.params["point0.running_mean"], z.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(model.params["point0.running_var"], z.var(axis=0), rtol=1e-10)
