import numpy as np
import pytest

from conftest import random_psd
from magr.quant import QuantConfig, layer_error, optq_quantize, rtn_quantize
from oracles import (
    l1_projection_oracle,
    naive_matmul,
    prox_linf_oracle,
    prox_objective,
    quant_exhaustive_oracle,
)


def test_l1_examples():
    np.testing.assert_allclose(l1_projection_oracle([3.0, 1.0]).value, [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(l1_projection_oracle([2.0, 2.0]).value, [0.5, 0.5], atol=1e-12)
    np.testing.assert_array_equal(l1_projection_oracle([0.3, -0.2]).value, [0.3, -0.2])


def test_l1_kkt(rng):
    # off-support entries satisfy |v_i| <= lambda, on-support |v_i| - |x_i| = lambda
    for _ in range(50):
        v = rng.standard_normal(int(rng.integers(1, 9))) * 3
        if np.abs(v).sum() <= 1:
            continue
        x = l1_projection_oracle(v).value
        assert np.abs(x).sum() == pytest.approx(1.0)
        on = x != 0
        lam = np.abs(v[on]) - np.abs(x[on])
        np.testing.assert_allclose(lam, lam[0], atol=1e-10)
        assert np.all(np.abs(v[~on]) <= lam[0] + 1e-10)


def test_l1_limits():
    with pytest.raises(ValueError):
        l1_projection_oracle(np.ones(9))
    with pytest.raises(ValueError):
        l1_projection_oracle([1.0], 0.0)


def test_prox_examples():
    np.testing.assert_allclose(prox_linf_oracle([3.0, 1.0], 1.0).value, [2.0, 1.0], atol=1e-9)
    np.testing.assert_array_equal(prox_linf_oracle([0.0, 0.0], 1.0).value, [0.0, 0.0])


def test_prox_large_t():
    v = np.array([0.5, -0.2, 0.1])
    res = prox_linf_oracle(v, 10.0)
    assert res.objective <= prox_objective(np.zeros(3), v, 10.0) + 1e-9
    assert np.abs(res.value).max() < 1e-9


def test_prox_limits():
    with pytest.raises(ValueError):
        prox_linf_oracle(np.ones(5), 1.0)
    with pytest.raises(ValueError):
        prox_linf_oracle([1.0], 0.0)


def test_quant_toy():
    W = np.array([[0.3], [0.8]])
    H = np.array([[1.0, 0.9], [0.9, 1.0]])
    res = quant_exhaustive_oracle(W, H, 0.5, 0, 1)
    np.testing.assert_allclose(res.value, [[0.5], [0.5]])
    assert res.objective == pytest.approx(0.022)


def test_quant_identity_is_rtn(rng):
    W = rng.standard_normal((3, 2))
    rtn = rtn_quantize(W, QuantConfig(bits=2, beta=1.0))
    res = quant_exhaustive_oracle(W, np.eye(3), rtn.expand(rtn.delta), rtn.expand(rtn.zero), 2)
    np.testing.assert_allclose(res.value, rtn.dequantized, atol=1e-12)


def test_quant_chain_random(rng):
    for _ in range(10):
        H, _ = random_psd(rng, 3)
        W = rng.standard_normal((3, 1))
        cfg = QuantConfig(bits=2)
        rtn = rtn_quantize(W, cfg)
        opt = optq_quantize(W, H, cfg)
        best = quant_exhaustive_oracle(W, H, rtn.delta, rtn.zero, 2)
        assert best.objective <= layer_error(opt.dequantized, W, H) ** 2 + 1e-9
        assert best.objective <= layer_error(rtn.dequantized, W, H) ** 2 + 1e-9


def test_quant_space_limit():
    with pytest.raises(ValueError):
        quant_exhaustive_oracle(np.ones((3, 3)), np.eye(3), 1.0, 0, 2)


def test_naive_matmul(rng):
    A, B = rng.standard_normal((5, 3)), rng.standard_normal((3, 4))
    np.testing.assert_allclose(naive_matmul(A, B), A @ B, atol=1e-12)
