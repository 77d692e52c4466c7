import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from exodebias.numkernel import RngStream
from exodebias.scoremodel import (CheckpointFormatError, CheckpointShapeError, CorrelationParam, GradBuffer,
                                  KindMismatch, MatrixFactorization, PairRef, ScalarLinear, ScalarMLP,
                                  load_checkpoint, save_checkpoint)


def fd_grad(model, inputs, upstream, h=1e-5):
    """Central differences of sum(upstream * score) w.r.t. every parameter."""
    out = np.zeros_like(model.params)
    for j in range(model.params.size):
        keep = model.params[j]
        model.params[j] = keep + h
        up = np.sum(upstream * model.score(inputs))
        model.params[j] = keep - h
        down = np.sum(upstream * model.score(inputs))
        model.params[j] = keep
        out[j] = (up - down) / (2 * h)
    return out


def analytic(model, inputs, upstream):
    buf = GradBuffer.like(model)
    model.accumulate_grad(inputs, upstream, buf)
    return buf.params


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


# ---------------------------------------------------------------- scores


def test_mf_zero_params_scores_zero():
    mf = MatrixFactorization(3, 4, 2)
    assert np.all(mf.score(PairRef(np.array([0, 2]), np.array([3, 1]))) == 0)


def test_mf_hand_computed_2x2():
    mf = MatrixFactorization(2, 2, 2)
    P = np.array([[0.1, 0.2], [0.3, -0.4]])
    Q = np.array([[0.5, 0.6], [-0.7, 0.8]])
    bu, bi, b0 = np.array([0.01, 0.02]), np.array([0.03, 0.04]), 0.05
    mf.params[:] = np.concatenate([P.ravel(), Q.ravel(), bu, bi, [b0]])
    users, items = np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1])
    want = [P[u] @ Q[i] + bu[u] + bi[i] + b0 for u, i in zip(users, items)]
    assert np.allclose(mf.score(PairRef(users, items)), want, atol=1e-15)
    # one hand value written out: 0.1*0.5 + 0.2*0.6 + 0.01 + 0.03 + 0.05
    assert mf.score(PairRef(np.array([0]), np.array([0])))[0] == pytest.approx(0.26, abs=1e-15)


def test_scalar_linear_affine():
    lin = ScalarLinear(5.0, 0.0)
    assert lin.score(np.array([0.2]))[0] == pytest.approx(1.0)
    buf = GradBuffer.like(lin)
    lin.accumulate_grad(np.array([2.0]), np.array([1.0]), buf)
    assert np.allclose(buf.params, [2.0, 1.0])


def test_param_count_is_deterministic():
    assert MatrixFactorization.num_params(3, 4, 2) == 3 * 2 + 4 * 2 + 3 + 4 + 1
    assert MatrixFactorization(3, 4, 2).params.size == MatrixFactorization.num_params(3, 4, 2)
    assert ScalarMLP((4, 3)).params.size == ScalarMLP.num_params((4, 3)) == (1 * 4 + 4) + (4 * 3 + 3) + (3 + 1)


def test_kind_mismatch_rejected():
    with pytest.raises(KindMismatch):
        MatrixFactorization(2, 2, 1).score(np.array([0.1]))
    with pytest.raises(KindMismatch):
        ScalarLinear().score(PairRef(np.array([0]), np.array([0])))
    with pytest.raises(KindMismatch):
        ScalarMLP((2,)).score(PairRef(np.array([0]), np.array([0])))


def test_mlp_zero_output_init_is_constant():
    mlp = ScalarMLP.init((8,), RngStream(0, 1), zero_output=True)
    assert np.all(mlp.score(np.linspace(-3, 3, 7)) == 0.0)


def test_scores_finite_on_extreme_inputs():
    mlp = ScalarMLP.init((4, 4), RngStream(1, 1))
    assert np.all(np.isfinite(mlp.score(np.array([-1e6, 0.0, 1e6]))))


# ---------------------------------------------------------------- gradients


def test_zero_upstream_leaves_buffer():
    mf = MatrixFactorization.init(4, 5, 3, RngStream(0, 2))
    buf = GradBuffer.like(mf)
    buf.params[:] = 1.5
    mf.accumulate_grad(PairRef(np.array([1, 2]), np.array([0, 4])), np.zeros(2), buf)
    assert np.all(buf.params == 1.5)


def test_accumulation_is_additive():
    lin = ScalarLinear(0.3, -0.1)
    x = np.array([1.0, -2.0])
    buf = GradBuffer.like(lin)
    lin.accumulate_grad(x, np.array([1.0, 1.0]), buf)
    lin.accumulate_grad(x, np.array([1.0, 1.0]), buf)
    assert np.allclose(buf.params, 2 * analytic(lin, x, np.ones(2)))
    buf.zero()
    assert np.all(buf.params == 0) and buf.rho_raw == 0


def test_mf_grad_touches_only_used_rows():
    mf = MatrixFactorization.init(5, 5, 2, RngStream(0, 3))
    g = analytic(mf, PairRef(np.array([1]), np.array([3])), np.array([1.0]))
    P, Q, bu, bi, b0 = mf._views(g)
    assert np.all(P[[0, 2, 3, 4]] == 0) and np.all(Q[[0, 1, 2, 4]] == 0)
    assert bu[1] == 1 and bi[3] == 1 and b0 == 1


@pytest.mark.parametrize("seed", range(50))
def test_mf_gradient_matches_fd(seed):
    rng = RngStream(seed, 40)
    mf = MatrixFactorization(4, 3, 2, rng.normal(MatrixFactorization.num_params(4, 3, 2)))
    users = (rng.uniform(6) * 4).astype(int)
    items = (rng.uniform(6) * 3).astype(int)
    up = rng.normal(6)
    pairs = PairRef(users, items)
    assert rel_err(analytic(mf, pairs, up), fd_grad(mf, pairs, up)) <= 1e-6


@pytest.mark.parametrize("seed", range(50))
def test_linear_gradient_matches_fd(seed):
    rng = RngStream(seed, 41)
    lin = ScalarLinear(params=rng.normal(2))
    x, up = rng.normal(5), rng.normal(5)
    assert rel_err(analytic(lin, x, up), fd_grad(lin, x, up)) <= 1e-5


@pytest.mark.parametrize("seed", range(50))
def test_mlp_gradient_matches_fd(seed):
    rng = RngStream(seed, 42)
    hidden = (3, 2) if seed % 2 else (4,)
    mlp = ScalarMLP(hidden, rng.normal(ScalarMLP.num_params(hidden)))
    x, up = 1.5 * rng.normal(5), rng.normal(5)
    assert rel_err(analytic(mlp, x, up), fd_grad(mlp, x, up)) <= 1e-5


# ---------------------------------------------------------------- correlation parameter


@given(st.floats(-50, 50))
def test_rho_stays_inside_unit_interval(raw):
    v = CorrelationParam(raw).value()
    assert -1.0 <= v <= 1.0
    if abs(raw) < 15:
        assert abs(v) < 1.0


@given(st.floats(-4, 4))
def test_rho_jacobian_matches_fd(raw):
    h = 1e-6
    fd = (math.tanh(raw + h) - math.tanh(raw - h)) / (2 * h)
    assert CorrelationParam(raw).jacobian() == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_rho_from_value_roundtrip():
    assert CorrelationParam.from_value(0.37).value() == pytest.approx(0.37, abs=1e-15)
    assert CorrelationParam().value() == 0.0


# ---------------------------------------------------------------- checkpoints


def _models():
    rng = RngStream(3, 3)
    mf = MatrixFactorization.init(10, 6, 3, rng)
    mf.params[-1] = 0.123
    mlp = ScalarMLP.init((5, 2), rng)
    return mf, mlp, CorrelationParam(0.4321)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    mf, mlp, corr = _models()
    save_checkpoint(mf, mlp, corr, tmp_path / "a.ckpt")
    mo, mr, c = load_checkpoint(tmp_path / "a.ckpt", 10, 6)
    assert np.array_equal(mo.params, mf.params) and np.array_equal(mr.params, mlp.params)
    assert c.raw == corr.raw
    x = np.linspace(-2, 2, 9)
    assert np.array_equal(mr.score(x), mlp.score(x))
    save_checkpoint(ScalarLinear(1.0, 2.0), ScalarLinear(-1.0, 0.5), CorrelationParam(), tmp_path / "b.ckpt")
    lo, lr, _ = load_checkpoint(tmp_path / "b.ckpt")
    assert np.array_equal(lr.params, [-1.0, 0.5])


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOPE" + b"\0" * 40)
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(p)


def test_checkpoint_corruption_detected(tmp_path):
    mf, mlp, corr = _models()
    p = tmp_path / "a.ckpt"
    save_checkpoint(mf, mlp, corr, p)
    data = bytearray(p.read_bytes())
    data[40] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(p)


def test_checkpoint_version_mismatch(tmp_path):
    mf, mlp, corr = _models()
    p = tmp_path / "a.ckpt"
    save_checkpoint(mf, mlp, corr, p)
    data = bytearray(p.read_bytes())
    data[4] = 99
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointFormatError, match="version"):
        load_checkpoint(p)


def test_checkpoint_shape_mismatch(tmp_path):
    mf, mlp, corr = _models()
    save_checkpoint(mf, mlp, corr, tmp_path / "a.ckpt")
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(tmp_path / "a.ckpt", 20, 6)
