import numpy as np
import pytest

import oracles
from mculab.errors import ConfigError, NumericError
from mculab.nn import Arch, ParamVector
from mculab.nn import tensor as T
from mculab.nn.model import LayoutEntry
from mculab.optim import (
    OptimizerState,
    adam_step,
    apply_update,
    curriculum_order,
    estimate_hessian_diag,
    hutchinson_diag,
    sgd_step,
    so_diag_step,
)
from mculab.rng import Xoshiro256


def vec(values, name="theta"):
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    return ParamVector(values, (LayoutEntry(name, (values.size,), 0),))


def test_sgd_arithmetic():
    assert sgd_step(vec(1.0), vec(6.0), 0.1).values[0] == pytest.approx(0.4)


def test_sgd_zero_gradient_is_identity():
    p = vec([1.0, -2.0])
    assert sgd_step(p, vec([0.0, 0.0]), 0.3).values.tobytes() == p.values.tobytes()


def test_sgd_linearity():
    p, g = vec([0.5, 1.5]), vec([0.25, -0.5])
    two = sgd_step(sgd_step(p, g, 0.1), g, 0.1)
    one = sgd_step(p, vec(2 * g.values), 0.1)
    np.testing.assert_allclose(two.values, one.values, atol=1e-7)


def test_nan_gradient_names_parameter():
    with pytest.raises(NumericError, match="theta"):
        sgd_step(vec([1.0, 2.0]), vec([np.nan, 0.0]), 0.1)


def test_adam_first_step_is_lr():
    for c in (1e-3, 1.0, 250.0):
        state = OptimizerState("adam", lr=0.01)
        out = adam_step(state, vec(0.0), vec(c))
        assert abs(out.values[0]) == pytest.approx(0.01, rel=1e-4)


def test_adam_zero_gradient_forever():
    state = OptimizerState("adam", lr=0.1)
    p = vec([1.0, 2.0])
    for _ in range(5):
        p = adam_step(state, p, vec([0.0, 0.0]))
    assert p.values.tolist() == [1.0, 2.0]
    assert state.step_count == 5


def _quadratic(seed, n=3):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 3.0, size=n)
    b = rng.normal(size=n)
    theta0 = rng.normal(size=n).astype(np.float32)
    return a, b, theta0


def test_adam_matches_64bit_reference():
    a, b, theta0 = _quadratic(1)

    def grad(theta):
        return a * theta - b

    ref = oracles.adam_reference(grad, theta0, 10, lr=0.05)
    state = OptimizerState("adam", lr=0.05)
    p = vec(theta0)
    for k in range(10):
        p = adam_step(state, p, vec(grad(p.values.astype(np.float64))))
        np.testing.assert_allclose(p.values, ref[k], atol=1e-6)


def test_so_newton_step_on_quadratic():
    h = 2.0
    state = OptimizerState("so_diag", lr=1.0, clip_factor=1.0)
    out = so_diag_step(state, vec(0.5), vec(h * 0.5), vec(h))
    assert out.values[0] == pytest.approx(0.0, abs=1e-7)


def test_so_zero_curvature_caps_at_lr():
    state = OptimizerState("so_diag", lr=0.2, clip_factor=1.0)
    p = vec([1.0, -1.0, 3.0])
    out = so_diag_step(state, p, vec([1e-3, -5.0, 1e6]), vec([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(np.abs(out.values - p.values), 0.2, rtol=1e-6)


def test_so_matches_64bit_reference():
    a, b, theta0 = _quadratic(2, n=2)

    def grad(theta):
        return a * theta - b

    ref = oracles.so_reference(grad, lambda th: a, theta0, 25, lr=0.05, gamma=0.5)
    state = OptimizerState("so_diag", lr=0.05, clip_factor=0.5)
    p = vec(theta0)
    for k in range(25):
        curv = vec(a) if state.needs_curvature() else None
        p = apply_update(state, p, vec(grad(p.values.astype(np.float64))), curv)
        np.testing.assert_allclose(p.values, ref[k], atol=1e-6)


def test_so_displacement_bounded_by_lr(rng):
    state = OptimizerState("so_diag", lr=0.01, clip_factor=0.32)
    p = vec(rng.normal(size=50))
    for _ in range(30):
        q = so_diag_step(state, p, vec(rng.normal(scale=100, size=50)), vec(rng.normal(size=50)))
        # the bound holds before rounding to float32 storage, so allow one ulp of theta
        slack = np.spacing(np.abs(q.values)).astype(np.float64)
        assert np.all(np.abs(q.values.astype(np.float64) - p.values) <= 0.01 + slack)
        p = q


def test_so_rejects_non_positive_damping():
    with pytest.raises(ConfigError):
        OptimizerState("so_diag", damping=0.0)
    state = OptimizerState("so_diag")
    state.damping = -1.0
    with pytest.raises(ConfigError):
        so_diag_step(state, vec(1.0), vec(1.0), vec(1.0))


def test_step_count_increments_by_one():
    for kind in ("sgd", "adam", "so_diag"):
        state = OptimizerState(kind)
        p = vec([1.0])
        for k in range(1, 4):
            p = apply_update(state, p, vec([0.5]), vec([1.0]) if kind == "so_diag" else None)
            assert state.step_count == k


def test_hutchinson_diagonal_quadratic_exact():
    a = np.array([0.5, 2.0, 3.0, 7.0])
    p = vec(np.ones(4))
    est = hutchinson_diag(lambda lv: 0.5 * T.tsum(T.Tensor(a) * lv[0] * lv[0]), p, probes=1, seed=3)
    np.testing.assert_allclose(est.values, a, rtol=1e-6)


def test_hutchinson_linear_is_zero():
    c = np.array([1.0, -2.0, 0.5])
    est = hutchinson_diag(lambda lv: T.tsum(T.Tensor(c) * lv[0]), vec(np.ones(3)), probes=4)
    assert not np.any(est.values)


def test_hutchinson_non_negative(rng):
    m = rng.normal(size=(5, 5))
    hess = m + m.T

    def quad(lv):
        row = T.reshape(lv[0], (1, 5))
        return 0.5 * T.tsum(row * (row @ T.Tensor(hess)))

    est = hutchinson_diag(quad, vec(rng.normal(size=5)), probes=3)
    assert np.all(est.values >= 0)


def test_hutchinson_needs_a_probe():
    with pytest.raises(ConfigError):
        hutchinson_diag(lambda lv: T.tsum(lv[0]), vec([1.0]), probes=0)


def _mlp_case():
    arch = Arch((2, 6, 2), "tanh")
    params = arch.init_params(0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, 2)).astype(np.float32)
    y = rng.integers(0, 2, 16)

    def f(theta):
        return oracles.xent64(oracles.forward64(arch.layer_dims, "tanh", theta, x), y)

    return arch, params, x, y, f


def _fd_hessian(f, theta, h=1e-3):
    n = theta.size
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            e = np.zeros(n)
            e[i] = h
            g = np.zeros(n)
            g[j] = h
            out[i, j] = out[j, i] = (f(theta + e + g) - f(theta + e - g) - f(theta - e + g) + f(theta - e - g)) / (4 * h * h)
    return out


def test_hutchinson_equals_probe_average_of_fd_hessian():
    arch, params, x, y, f = _mlp_case()
    theta = params.values.astype(np.float64)
    hess = _fd_hessian(f, theta)
    probes = Xoshiro256.derived(1, "hutchinson")
    acc = np.zeros(theta.size)
    for _ in range(64):
        z = probes.rademacher(theta.size).astype(np.float64)
        acc += z * (hess @ z)
    expected = np.maximum(acc / 64, 0.0)
    est = estimate_hessian_diag(arch.build(params), (x, y), probes=64, seed=1).values
    np.testing.assert_allclose(est, expected, atol=1e-5)


def test_hutchinson_converges_to_fd_diagonal():
    # the probe noise on coordinate i has std sqrt(sum_{j != i} H_ij^2 / probes), so a
    # 10% aggregate match needs on the order of 10^3 probes for a generic MLP
    arch, params, x, y, f = _mlp_case()
    diag = np.maximum(oracles.second_diff_diag(f, params.values.astype(np.float64)), 0.0)
    errs = []
    for probes in (64, 1024):
        est = estimate_hessian_diag(arch.build(params), (x, y), probes=probes, seed=1).values
        errs.append(np.linalg.norm(est - diag) / np.linalg.norm(diag))
    assert errs[1] < 0.10
    assert errs[1] < errs[0]


def test_curriculum_examples():
    assert curriculum_order([0.5, 0.1, 0.9], "ascending").tolist() == [1, 0, 2]
    assert curriculum_order([0.3, 0.3, 0.3, 0.3]).tolist() == [0, 1, 2, 3]
    assert curriculum_order([0.3, 0.3, 0.3], "descending").tolist() == [0, 1, 2]


def test_curriculum_descending_reverses_distinct(rng):
    losses = rng.permutation(20).astype(float)
    asc = curriculum_order(losses, "ascending")
    assert curriculum_order(losses, "descending").tolist() == asc[::-1].tolist()
    assert sorted(asc.tolist()) == list(range(20))


def test_curriculum_rejects_nan():
    with pytest.raises(NumericError):
        curriculum_order([0.1, np.nan])
    with pytest.raises(ConfigError):
        curriculum_order([0.1], "sideways")
