import numpy as np
import pytest

from obsurgeon.harness import (
    SGD,
    DataSpec,
    DivergenceError,
    KDConfig,
    ModelConfig,
    QuantConfig,
    ShapeError,
    ToyModel,
    Trainer,
    drop_layers,
    evaluate,
    fake_quant_finetune,
    fake_quantize,
    gradient_stream,
    load_model,
    loss_and_grad,
    loss_and_grads,
    make_dataset,
    quant_scale,
    save_model,
)
from obsurgeon.harness.model import gelu, gelu_grad
from obsurgeon.harness.quant import FakeQuantContext, WeightObserver
from obsurgeon.harness.training import TrainingError, cross_entropy, loss_and_dlogits
from obsurgeon.pruner import Mask

LAYER_CASES = {
    "relu": dict(activation="relu"),
    "gelu": dict(activation="gelu"),
    "attention-relu": dict(activation="relu", attention=[3, 4]),
    "attention-gelu": dict(activation="gelu", attention=[3, 4]),
}


def _model(dtype="float64", seed=0, **kw):
    cfg = ModelConfig(12, [10, 8], 5, dtype=dtype, **kw)
    m = ToyModel(cfg, seed=seed)
    for name, p in m.params.items():
        if p.ndim == 1:  # non-zero biases so their paths are exercised
            p[...] = np.random.default_rng(seed + 1).normal(0, 0.1, size=p.shape)
    return m


def _as_float64(model):
    cfg = ModelConfig(**{**model.config.__dict__, "dtype": "float64"})
    return ToyModel(cfg, {k: v.astype(np.float64) for k, v in model.params.items()})


def _fd_check(model, x, y, kd, t_logits, n_coords=10, eps=1e-5, seed=0):
    """Max relative error of analytic vs central-difference gradients, float64 reference."""
    _, grads = loss_and_grads(model, x, y, kd, t_logits)
    ref = _as_float64(model)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in ref.params.items():
        flat = p.reshape(-1)
        idx = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        fd = np.empty(idx.size)
        for k, j in enumerate(idx):
            old = flat[j]
            flat[j] = old + eps
            lp = loss_and_grads(ref, x, y, kd, t_logits)[0]
            flat[j] = old - eps
            lm = loss_and_grads(ref, x, y, kd, t_logits)[0]
            flat[j] = old
            fd[k] = (lp - lm) / (2 * eps)
        an = grads[name].reshape(-1)[idx].astype(np.float64)
        worst = max(worst, np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-12))
    return worst


def _batch(seed=0, n=16):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 12)), rng.integers(0, 5, size=n)


@pytest.mark.parametrize("case", list(LAYER_CASES))
@pytest.mark.parametrize("hardness", [0.0, 0.5, 1.0])
def test_gradients_double_precision(case, hardness):
    m = _model(**LAYER_CASES[case])
    x, y = _batch()
    kd, t = None, None
    if hardness:
        teacher = _model(seed=3, **LAYER_CASES[case])
        kd, t = KDConfig(hardness, 2.0, teacher), teacher.forward(x)
    assert _fd_check(m, x, y, kd, t) <= 1e-7


@pytest.mark.parametrize("case", list(LAYER_CASES))
def test_gradients_single_precision(case):
    m = _model(dtype="float32", **LAYER_CASES[case])
    x, y = _batch(1)
    teacher = _model(seed=5, **LAYER_CASES[case])
    kd = KDConfig(0.5, 2.0, teacher)
    assert _fd_check(m, x.astype(np.float32), y, kd, teacher.forward(x).astype(np.float32)) <= 1e-4


def test_gelu_derivative():
    z = np.linspace(-4, 4, 81)
    fd = (gelu(z + 1e-6) - gelu(z - 1e-6)) / 2e-6
    np.testing.assert_allclose(gelu_grad(z), fd, atol=1e-8)


def test_zero_model_and_identity_layer():
    m = _model()
    for p in m.params.values():
        p[...] = 0
    np.testing.assert_array_equal(m.forward(np.ones((3, 12))), 0.0)
    ident = ToyModel(ModelConfig(4, [4], 4, dtype="float64"),
                     {"h0.W": np.eye(4), "h0.b": np.zeros(4), "out.W": np.eye(4), "out.b": np.zeros(4)})
    x = np.abs(np.random.default_rng(0).normal(size=(5, 4)))
    np.testing.assert_array_equal(ident.forward(x), x)


def test_forward_is_deterministic():
    a, b = _model(dtype="float32", seed=4), _model(dtype="float32", seed=4)
    x = np.random.default_rng(0).normal(size=(8, 12)).astype(np.float32)
    np.testing.assert_array_equal(a.forward(x), b.forward(x))


def test_input_shape_mismatch():
    with pytest.raises(ShapeError):
        _model().forward(np.ones((2, 11)))


def test_kd_loss_properties():
    rng = np.random.default_rng(0)
    s, t = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    y = rng.integers(0, 5, size=6)
    ce = loss_and_dlogits(s, y)[0]
    assert ce == pytest.approx(cross_entropy(s, y))
    assert loss_and_dlogits(s, y, KDConfig(0.0, 2.0, object()), t)[0] == pytest.approx(ce)
    assert loss_and_dlogits(s, y, KDConfig(1.0, 2.0, object()), s)[0] == pytest.approx(0.0, abs=1e-15)
    l0, l1 = (loss_and_dlogits(s, y, KDConfig(h, 2.0, object()), t)[0] for h in (0.0, 1.0))
    for h in (0.25, 0.5, 0.9):
        lh = loss_and_dlogits(s, y, KDConfig(h, 2.0, object()), t)[0]
        assert lh == pytest.approx((1 - h) * l0 + h * l1, rel=1e-12)


def test_kd_teacher_width_mismatch():
    with pytest.raises(TrainingError, match="does not match"):
        loss_and_dlogits(np.zeros((2, 3)), np.zeros(2, int), KDConfig(1.0, 2.0, object()), np.zeros((2, 4)))


def test_loss_and_grad_masks_and_flags_nonfinite():
    m = _model()
    x, y = _batch()
    mask = np.ones(m.n_prunable, dtype=bool)
    mask[::3] = False
    loss, g = loss_and_grad(m, x, y, mask=mask)
    assert g.shape == (m.n_prunable,) and np.all(g[~mask] == 0)
    x[0, 0] = np.nan
    with pytest.raises(DivergenceError, match="batch 7"):
        loss_and_grad(m, x, y, batch_id=7)


def test_flatten_roundtrip_and_segments():
    m = _model(attention=[3, 4])
    w = m.get_prunable()
    assert w.size == m.n_prunable == 3 * 16 + 12 * 10 + 10 * 8
    assert [s.name for s in m.segments()] == ["attn.q", "attn.k", "attn.v", "h0.W", "h1.W"]
    m.set_prunable(w * 2)
    np.testing.assert_array_equal(m.get_prunable(), w * 2)


def _data():
    spec = DataSpec(seed=0, n_samples=1024, n_features=12, n_classes=5, spread=1.0, centers_per_class=1)
    return make_dataset(spec)


def test_masked_weights_stay_zero_during_training():
    m = _model(dtype="float32")
    data = _data()
    bits = np.random.default_rng(0).random(m.n_prunable) > 0.5
    mask = Mask(bits, m.segments())
    m.set_prunable(m.get_prunable() * bits)
    tr = Trainer(m, data, 16, np.random.default_rng(0), optimizer=SGD(0.9, 0.01), mask=mask)
    for _ in range(1000):
        tr.step(0.05)
    assert np.all(m.get_prunable()[~bits] == 0.0)


def test_zero_lr_leaves_weights():
    m = _model(dtype="float32")
    before = {k: v.copy() for k, v in m.params.items()}
    Trainer(m, _data(), 16, np.random.default_rng(0)).train_span([0.0] * 20)
    for k in before:
        np.testing.assert_array_equal(m.params[k], before[k])


def test_dense_training_reduces_heldout_loss():
    data = _data()
    m = ToyModel(ModelConfig(12, [32, 32], 5), seed=0)
    start = evaluate(m, data.x_test, data.y_test)[0]
    tr = Trainer(m, data, 32, np.random.default_rng(0))
    tr.train_span([0.02] * (5 * tr.steps_per_epoch))
    end, acc = evaluate(m, data.x_test, data.y_test)
    assert end < 0.5 * start and acc > 0.8


def test_divergence_is_reported():
    m = _model(dtype="float32")
    tr = Trainer(m, _data(), 16, np.random.default_rng(0))
    with pytest.raises(DivergenceError):
        tr.train_span([1e6] * 50)


def test_gradient_stream():
    m = _model(dtype="float32")
    data = _data()
    bits = np.ones(m.n_prunable, dtype=bool)
    bits[:40] = False
    grads = list(gradient_stream(m, data, bits, None, count=70, batch_size=16))
    assert len(grads) == 70  # 64 batches per pass, so the stream cycles
    assert all(g.dtype == np.float64 and np.all(g[:40] == 0) for g in grads)
    # self-distillation at h = 1 has zero loss and zero gradient
    zero = list(gradient_stream(m, data, None, KDConfig(1.0, 2.0, m.copy()), count=3))
    assert all(np.all(g == 0) for g in zero)


def test_stream_gradient_matches_finite_differences():
    m = _model(dtype="float32", activation="gelu")
    data = _data()
    tr = Trainer(m, data, 16, np.random.default_rng(3))
    g = next(tr.gradient_stream(1))
    # replay the same batch: the trainer's own stream draws the first permutation
    rng = np.random.default_rng(3)
    rng.permutation(data.n_train)
    idx = rng.permutation(data.n_train)
    ref = _as_float64(m)
    x, y = data.x_train[idx[:16]].astype(np.float64), data.y_train[idx[:16]]
    w = ref.get_prunable()
    coords = np.random.default_rng(0).choice(w.size, 10, replace=False)
    fd = []
    for j in coords:
        for sgn in (1, -1):
            w2 = w.copy()
            w2[j] += sgn * 1e-5
            ref.set_prunable(w2)
            fd.append(loss_and_grads(ref, x, y)[0])
    fd = (np.array(fd[0::2]) - np.array(fd[1::2])) / 2e-5
    assert np.linalg.norm(g[coords] - fd) / np.linalg.norm(fd) <= 1e-4


def test_drop_layers():
    m = ToyModel(ModelConfig(12, [8, 8, 8], 5), seed=1)
    same = drop_layers(m, 3)
    x = np.random.default_rng(0).normal(size=(4, 12)).astype(np.float32)
    np.testing.assert_array_equal(same.forward(x), m.forward(x))
    one = drop_layers(m, 1)
    assert one.depth == 1 and one.forward(x).shape == (4, 5)
    np.testing.assert_array_equal(one.params["h0.W"], m.params["h0.W"])
    assert one.n_prunable == 12 * 8
    with pytest.raises(ValueError):
        drop_layers(m, 0)
    with pytest.raises(ShapeError):
        drop_layers(ToyModel(ModelConfig(12, [8, 6], 5)), 1)


def test_checkpoint_roundtrip(tmp_path):
    m = _model(dtype="float32", attention=[3, 4])
    save_model(m, tmp_path / "m.bin", {"note": "x"})
    back, extra = load_model(tmp_path / "m.bin")
    assert extra == {"note": "x"}
    assert back.config == m.config
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k])
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:8] == b"OBSMODEL"


def test_fake_quantize_grid_and_idempotence():
    w = np.array([-1.0, -0.5, 0.0, 0.3, 1.0])
    s = quant_scale(np.abs(w).max())
    assert s == 1.0 / 127
    q = fake_quantize(w, s)
    np.testing.assert_array_equal(fake_quantize(q, s), q)
    assert q[2] == 0.0
    on_grid = np.arange(-127, 128) * s
    np.testing.assert_array_equal(fake_quantize(on_grid, s), on_grid)
    np.testing.assert_array_equal(fake_quantize(np.array([5.0]), s), [1.0])
    assert quant_scale(0.0) == 1.0
    # round half to even
    np.testing.assert_array_equal(fake_quantize(np.array([0.5, 1.5, 2.5]), 1.0), [0.0, 2.0, 2.0])


def test_fake_quant_context_is_straight_through():
    m = _model(dtype="float32")
    x, y = _batch()
    obs = WeightObserver(m)
    float_w = {k: v.copy() for k, v in m.params.items()}
    with FakeQuantContext(m, obs):
        quantized = {k: v.copy() for k, v in m.params.items()}
        _, g_ctx = loss_and_grads(m, x, y)
    for k in float_w:
        np.testing.assert_array_equal(m.params[k], float_w[k])
    qm = ToyModel(m.config, quantized)
    _, g_q = loss_and_grads(qm, x, y)
    for k in g_q:
        np.testing.assert_array_equal(g_ctx[k], g_q[k])


def test_fake_quant_finetune_keeps_mask_and_grid():
    m = _model(dtype="float32")
    data = _data()
    bits = np.random.default_rng(1).random(m.n_prunable) > 0.3
    m.set_prunable(m.get_prunable() * bits)
    tr = Trainer(m, data, 16, np.random.default_rng(0), mask=Mask(bits, m.segments()))
    spe = tr.steps_per_epoch
    qc = QuantConfig(8, epochs=2, observer_epochs=1)
    _, scales = fake_quant_finetune(tr, qc, [1e-2] * (2 * spe), spe)
    w = m.get_prunable()
    assert np.all(w[~bits] == 0.0)
    for name in m.prunable_names():
        p = m.params[name].astype(np.float64)
        k = p / np.float32(scales[name])
        np.testing.assert_allclose(k, np.rint(k), atol=1e-3)
        assert np.abs(k).max() <= 127 + 1e-3
