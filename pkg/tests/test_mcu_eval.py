import math

import numpy as np
import pytest

import oracles
from helpers import record, records_from
from mculab.curves import CurveSpec, grid, sample_curve
from mculab.errors import ConfigError, ContractError, DimensionError, NumericError
from mculab.mcu_eval import (
    FQ_THRESHOLD,
    MetricRecord,
    barrier_profile,
    evaluate_point,
    evaluate_points,
    forget_quality,
    js_divergence_bits,
    ks_two_sample,
    mc_barrier_standard,
    worker_count,
    zrf_score,
)
from mculab.nn import Arch, ParamVector
from mculab.training import predict, per_sample_xent
from mculab.unlearn import dumb_params


# ---- ZRF ---------------------------------------------------------------------

def test_zrf_identical_is_one(rng):
    z = rng.normal(size=(6, 3))
    assert zrf_score(z, z) == 1.0


def test_zrf_one_hot_vs_uniform():
    js = oracles.js_bits([[1.0, 0.0]], [[0.5, 0.5]])[0]
    assert js == pytest.approx(0.3113, abs=1e-4)
    assert zrf_score(np.array([[60.0, -60.0]]), np.array([[0.0, 0.0]])) == pytest.approx(1 - js, abs=1e-12)
    assert 1 - js == pytest.approx(0.6887, abs=1e-4)


def test_js_matches_formula(rng):
    p = rng.normal(scale=3, size=(20, 4))
    q = rng.normal(scale=3, size=(20, 4))
    np.testing.assert_allclose(js_divergence_bits(p, q), oracles.js_bits(oracles.softmax64(p), oracles.softmax64(q)), atol=1e-12)


def test_zrf_shape_mismatch():
    with pytest.raises(DimensionError):
        zrf_score(np.zeros((2, 2)), np.zeros((3, 2)))


# ---- KS ----------------------------------------------------------------------

def test_ks_identical_samples():
    a = [0.3, 1.2, 5.0, 5.0, -1.0]
    assert ks_two_sample(a, a) == (0.0, 1.0)


def test_ks_disjoint_supports():
    assert ks_two_sample([1, 2, 3], [4, 5, 6]).statistic == 1.0


def test_ks_matches_bruteforce_and_series():
    rng = np.random.default_rng(2024)
    for k in range(100):
        n, m = rng.integers(10, 201, size=2)
        a = rng.normal(size=n)
        b = rng.normal(loc=0.05 * (k % 10), size=m)
        d_ref, p_ref = oracles.ks_pvalue_reference(a, b)
        res = ks_two_sample(a, b)
        assert res.statistic == d_ref
        assert abs(res.pvalue - p_ref) <= 1e-6


def test_ks_with_ties_matches_bruteforce(rng):
    a = rng.integers(0, 5, size=37)
    b = rng.integers(1, 7, size=23)
    assert ks_two_sample(a, b).statistic == float(oracles.ks_statistic_exact(a, b))


def test_ks_errors():
    with pytest.raises(ConfigError):
        ks_two_sample([], [1.0])
    with pytest.raises(NumericError):
        ks_two_sample([np.nan], [1.0])


def test_ks_symmetric(rng):
    a, b = rng.normal(size=30), rng.normal(size=45)
    assert ks_two_sample(a, b) == ks_two_sample(b, a)


# ---- point evaluation --------------------------------------------------------

def test_forget_quality_self_is_one(small_arch, small_base, small_ds):
    assert forget_quality(small_base, small_base, small_arch, small_ds) == 1.0
    assert forget_quality(small_base, small_base, small_arch, small_ds, "true_class_prob") == 1.0
    assert FQ_THRESHOLD == 0.05


def test_forget_quality_bad_statistic(small_arch, small_base, small_ds):
    with pytest.raises(ConfigError):
        forget_quality(small_base, small_base, small_arch, small_ds, "rouge")


def test_evaluate_point_matches_recomputation(small_arch, small_base, small_ds):
    ref = dumb_params(small_arch, 9)
    rec = evaluate_point(small_arch, small_base, small_ds, ref, small_base, t=0.0)

    def acc(idx):
        x, y = small_ds.subset(idx)
        logits = oracles.forward64(small_arch.layer_dims, small_arch.activation, small_base.values, x)
        return float(np.mean(np.argmax(logits, axis=1) == y))

    def loss(idx):
        x, y = small_ds.subset(idx)
        return oracles.xent64(oracles.forward64(small_arch.layer_dims, small_arch.activation, small_base.values, x), y)

    assert rec.acc_test == acc(small_ds.test_idx)
    assert rec.acc_forget == acc(small_ds.forget_idx)
    assert rec.acc_retain == acc(small_ds.retain_idx)
    assert rec.loss_retain == pytest.approx(loss(small_ds.retain_idx), rel=1e-5)
    assert rec.loss_forget == pytest.approx(loss(small_ds.forget_idx), rel=1e-5)
    xf = small_ds.features[small_ds.forget_idx]
    p = oracles.softmax64(oracles.forward64(small_arch.layer_dims, small_arch.activation, small_base.values, xf))
    q = oracles.softmax64(oracles.forward64(small_arch.layer_dims, small_arch.activation, ref.values, xf))
    assert rec.zrf == pytest.approx(1 - float(np.mean(oracles.js_bits(p, q))), abs=1e-5)
    assert rec.forget_quality == 1.0


def test_constant_model_accuracies(small_ds):
    from mculab.data import make_moons, split_forget_retain

    ds = split_forget_retain(make_moons(200, seed=0), 0.5, 0.5, seed=0)
    arch = Arch((2, 2))
    const = ParamVector(np.zeros(arch.num_params), arch.layout())
    labels_balanced = [np.bincount(ds.labels[getattr(ds, n)], minlength=2) for n in ("forget_idx", "retain_idx", "test_idx")]
    rec = evaluate_point(arch, const, ds, None, None)
    for name, counts in zip(("acc_forget", "acc_retain", "acc_test"), labels_balanced):
        assert getattr(rec, name) == pytest.approx(counts[0] / counts.sum())
    assert math.isnan(rec.zrf) and math.isnan(rec.forget_quality)


def test_evaluate_point_empty_split(small_arch, small_base):
    from mculab.data import make_moons

    with pytest.raises(ConfigError):
        evaluate_point(small_arch, small_base, make_moons(20), None, None)


def test_evaluate_points_parallel_order(small_arch, small_base, small_ds):
    other = dumb_params(small_arch, 1)
    pts = sample_curve(CurveSpec.linear(small_base, other), 8)
    serial = evaluate_points(small_arch, pts, small_ds, other, small_base, workers=1)
    parallel = evaluate_points(small_arch, list(reversed(pts)), small_ds, other, small_base, workers=4)
    assert [r.as_dict() for r in serial] == [r.as_dict() for r in parallel]
    assert [r.t for r in serial] == grid(8)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("MCULAB_WORKERS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("MCULAB_WORKERS", "0")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.delenv("MCULAB_WORKERS")
    assert worker_count() >= 1


def test_metric_record_ranges():
    with pytest.raises(ConfigError):
        record(1.5, 0.1, 0.1)
    with pytest.raises(ConfigError):
        record(0.5, 0.1, 0.1, zrf=1.2)
    MetricRecord(0.0, 0.1, 0.2)


# ---- barriers ------------------------------------------------------------------

def test_barrier_bump_example():
    rep = barrier_profile(records_from([0, 0.5, 1], [1.0, 2.0, 1.0], [1.0, 1.0, 1.0]))
    assert rep.retain_barrier_height == 1.0 and rep.argmax_t_retain == 0.5
    assert not rep.mcu_holds


def test_cliff_example():
    rep = barrier_profile(records_from([0, 0.5, 1], [1.0, 1.0, 1.0], [5.0, 3.0, 5.0]))
    assert rep.forget_cliff_depth == 2.0 and rep.argmax_t_forget == 0.5


@pytest.mark.parametrize("tau", [0.0, 0.05, 3.0])
def test_linear_profile_holds_for_any_tau(tau):
    ts = grid(16)
    recs = records_from(ts, [(1 - t) * 0.2 + t * 0.9 for t in ts], [(1 - t) * 4.0 + t * 2.5 for t in ts])
    rep = barrier_profile(recs, tau=tau)
    assert abs(rep.retain_barrier_height) < 1e-12 and abs(rep.forget_cliff_depth) < 1e-12
    assert rep.mcu_holds


def test_two_point_profile_is_zero():
    rep = barrier_profile(records_from([0.0, 1.0], [0.3, 7.0], [2.0, 0.1]))
    assert rep.retain_barrier_height == 0.0 and rep.forget_cliff_depth == 0.0
    assert rep.mcu_holds


def test_ties_resolve_to_smallest_t():
    rep = barrier_profile(records_from([0, 0.25, 0.5, 0.75, 1], [0, 1, 0, 1, 0], [0, 0, 0, 0, 0]))
    assert rep.argmax_t_retain == 0.25


def test_orientation_invariance(rng):
    ts = grid(16)
    lr, lf = rng.uniform(0, 3, 16), rng.uniform(0, 3, 16)
    fwd = barrier_profile(records_from(ts, lr, lf))
    rev = barrier_profile(records_from(ts, lr[::-1], lf[::-1]))
    assert fwd.retain_barrier_height == pytest.approx(rev.retain_barrier_height, abs=1e-12)
    assert fwd.forget_cliff_depth == pytest.approx(rev.forget_cliff_depth, abs=1e-12)
    assert fwd.argmax_t_retain == pytest.approx(1 - rev.argmax_t_retain, abs=1e-12)


def test_mcu_verdict_is_conjunction():
    recs = records_from([0, 0.5, 1], [1.0, 1.04, 1.0], [1.0, 0.97, 1.0])
    assert barrier_profile(recs, tau=0.05).mcu_holds
    assert not barrier_profile(recs, tau=0.035).mcu_holds
    assert not barrier_profile(recs, tau=0.02).mcu_holds


def test_barrier_contract_violations():
    with pytest.raises(ContractError):
        barrier_profile(records_from([0.5, 0.0, 1.0], [1, 1, 1], [1, 1, 1]))
    with pytest.raises(ContractError):
        barrier_profile(records_from([0.0, 0.5, 0.5, 1.0], [1] * 4, [1] * 4))
    with pytest.raises(ContractError):
        barrier_profile(records_from([0.0], [1], [1]))
    with pytest.raises(ConfigError):
        barrier_profile(records_from([0.0, 1.0], [1, 1], [1, 1]), tau=-1)


def test_mc_barrier_standard():
    bump = records_from([0, 0.5, 1], [1.0, 2.0, 1.0], [0, 0, 0])
    assert mc_barrier_standard(bump) == 1.0
    assert mc_barrier_standard(records_from([0, 0.5, 1], [1.0, 1.0, 1.0], [0, 0, 0])) == 0.0
    recs = records_from(grid(8), np.linspace(0, 1, 8) ** 2, np.zeros(8))
    assert mc_barrier_standard(recs) == barrier_profile(recs).retain_barrier_height


def test_explicit_endpoints():
    recs = records_from([0.25, 0.5, 0.75], [1.0, 2.0, 1.0], [1, 1, 1])
    ends = (record(0.0, 1.0, 1.0), record(1.0, 1.0, 1.0))
    assert barrier_profile(recs, ends).retain_barrier_height == 1.0


def test_forget_scores_true_class_prob(small_arch, small_base, small_ds):
    from mculab.mcu_eval import forget_scores

    xent = per_sample_xent(small_arch, small_base, *small_ds.subset(small_ds.forget_idx))
    np.testing.assert_allclose(forget_scores(small_arch, small_base, small_ds, "true_class_prob"), np.exp(-xent))
    assert predict(small_arch, small_base, small_ds.features[:2]).shape == (2, 2)
