import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrpn import gradcore as gc
from mrpn.components import (
    FeatureNorm,
    FusionComponent,
    ParamStore,
    ResPerceptron,
    Scoring,
    feature_norm,
    fusion_component,
    res_perceptron,
    scoring,
)
from mrpn.errors import BuildError, DimensionError


def rng(seed=0):
    return np.random.default_rng(seed)


def test_scoring_zero_output_dense_gives_uniform_softmax():
    s = ParamStore()
    unit = Scoring(s, "sc", 6, 4, rng(), hidden=6, dropout=0.0)
    unit.hidden.W.data = np.eye(6)
    unit.out.W.data[:] = 0.0
    unit.out.b.data[:] = 0.0
    x = gc.Tensor(rng(1).normal(size=(5, 6)))
    p = gc.softmax_rows(scoring(x, unit, "train")).data
    np.testing.assert_allclose(p, 0.25, atol=1e-15)


def test_scoring_test_mode_is_deterministic():
    s = ParamStore()
    unit = Scoring(s, "sc", 6, 4, rng(), dropout=0.5)
    counter = gc.CountingRNG(3)
    unit(gc.Tensor(rng(1).normal(size=(8, 6))), "train", counter)
    x = gc.Tensor(rng(2).normal(size=(3, 6)))
    before = counter.calls
    a = unit(x, "test", counter).data
    b = unit(x, "test", counter).data
    np.testing.assert_array_equal(a, b)
    assert counter.calls == before


def test_scoring_width_checks():
    unit = Scoring(ParamStore(), "sc", 6, 4, rng())
    with pytest.raises(DimensionError):
        unit(gc.Tensor(np.zeros((3, 5))), "train")
    assert unit.hidden.d_out == max(4, 6 // 2)


@pytest.mark.parametrize("seed", range(5))
def test_scoring_gradcheck(seed):
    s = ParamStore()
    unit = Scoring(s, "sc", 5, 3, rng(seed), dropout=0.0)
    x = gc.parameter(rng(seed + 10).normal(size=(6, 5)))
    t = np.eye(3)[rng(seed + 20).integers(0, 3, 6)]
    f = lambda: gc.softmax_cross_entropy(unit(x, "train"), t)
    for th in [x, *s.params.values()]:
        assert gc.grad_check(f, th) < 1e-4


def test_fusion_component_is_order_sensitive():
    s = ParamStore()
    unit = FusionComponent(s, "fusion", [4, 4], 3, rng(), dropout=0.0)
    gv, ga = gc.Tensor(rng(1).normal(size=(6, 4))), gc.Tensor(rng(2).normal(size=(6, 4)))
    a = fusion_component([gv, ga], unit, "train").data
    b = fusion_component([ga, gv], unit, "train").data
    assert np.max(np.abs(a - b)) > 1e-6


def test_fusion_component_zero_inputs_finite():
    unit = FusionComponent(ParamStore(), "fusion", [3, 2], 4, rng(), dropout=0.0)
    out = unit([gc.Tensor(np.zeros((4, 3))), gc.Tensor(np.zeros((4, 2)))], "train").data
    assert np.all(np.isfinite(out))
    # constant columns normalize to beta (zero) -> output depends on biases only: identical rows
    np.testing.assert_allclose(out, np.tile(out[0], (4, 1)), atol=1e-12)


def test_fusion_component_batch_mismatch():
    unit = FusionComponent(ParamStore(), "fusion", [3, 2], 4, rng())
    with pytest.raises(DimensionError):
        unit([gc.Tensor(np.zeros((4, 3))), gc.Tensor(np.zeros((5, 2)))], "train")


def _rp(dim, seed=0, zero=True):
    s = ParamStore()
    unit = ResPerceptron(s, "m.rp", dim, rng(seed))
    if zero:
        unit.dense.W.data[:] = 0.0
        unit.dense.b.data[:] = 0.0
    return s, unit


def test_res_perceptron_zero_dense_is_identity():
    _, unit = _rp(5)
    x = gc.Tensor(rng(1).normal(size=(7, 5)))
    np.testing.assert_array_equal(res_perceptron(x, unit, "train").data, x.data)


@given(st.integers(1, 12), st.integers(2, 16), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_res_perceptron_shape_and_residual_decomposition(dim, batch, seed):
    _, unit = _rp(dim, seed, zero=False)
    x = gc.Tensor(rng(seed).normal(size=(batch, dim)))
    out = unit(x, "train")
    assert out.shape == x.shape
    stats_before = (unit.norm.stats.mean.copy(), unit.norm.stats.var.copy())
    r = unit.residual(x, "train")
    np.testing.assert_allclose(out.data - x.data, r.data, atol=1e-12)
    assert stats_before[0].shape == (dim,)


def test_res_perceptron_rejects_non_square():
    with pytest.raises(BuildError):
        ResPerceptron(ParamStore(), "rp", 4, rng(), d_out=5)


@pytest.mark.parametrize("seed", range(5))
def test_res_perceptron_gradcheck(seed):
    s, unit = _rp(4, seed, zero=False)
    x = gc.parameter(rng(seed + 1).normal(size=(6, 4)))
    w = rng(seed + 2).normal(size=(6, 4))
    f = lambda: gc.sum_all(gc.mul(gc.tanh(unit(x, "train")), w))
    for th in [x, *s.params.values()]:
        assert gc.grad_check(f, th) < 1e-4


def test_feature_norm_delegates_to_batchnorm():
    s = ParamStore()
    unit = FeatureNorm(s, "n", 2)
    out = feature_norm(gc.Tensor([[1.0, 0.0], [3.0, 2.0]]), unit, "train")
    np.testing.assert_allclose(out.data, [[-1, -1], [1, 1]], atol=1e-4)
    assert unit.stats.updates == 1


def test_frozen_feature_norm_leaves_stats_untouched():
    s = ParamStore()
    unit = FeatureNorm(s, "n", 3)
    unit(gc.Tensor(rng().normal(size=(5, 3))), "train")
    unit.frozen = True
    m, v = unit.stats.mean.copy(), unit.stats.var.copy()
    unit(gc.Tensor(rng(1).normal(size=(5, 3))), "train")
    np.testing.assert_array_equal(m, unit.stats.mean)
    np.testing.assert_array_equal(v, unit.stats.var)


def test_param_store_rejects_duplicates():
    s = ParamStore()
    FeatureNorm(s, "x", 2)
    with pytest.raises(BuildError):
        FeatureNorm(s, "x", 2)
