import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from helpers import records_from
from mculab.curves import CurveSpec, curve_point, grid
from mculab.experiment.checkpoint import decode, encode
from mculab.mcu_eval import barrier_profile, ks_two_sample, zrf_score
from mculab.optim import curriculum_order
from mculab.rng import Xoshiro256
from test_optim import vec

finite32 = st.floats(-1e4, 1e4, allow_nan=False, width=32)
unit = st.floats(0.0, 1.0, allow_nan=False)


@st.composite
def triplets(draw):
    n = draw(st.integers(1, 12))
    return tuple(vec(draw(arrays(np.float32, n, elements=finite32))) for _ in range(3))


@given(triplets(), unit)
def test_bezier_symmetry_and_endpoints(trip, t):
    a, b, m = trip
    fwd, rev = CurveSpec.bezier(a, b, m), CurveSpec.bezier(b, a, m)
    assert curve_point(fwd, t).values.tobytes() == curve_point(rev, 1.0 - t).values.tobytes()
    assert curve_point(fwd, 0.0).values.tobytes() == a.values.tobytes()
    assert curve_point(CurveSpec.linear(a, b), 1.0).values.tobytes() == b.values.tobytes()


@given(st.integers(1, 6), st.integers(2, 5), st.data())
def test_zrf_in_unit_interval(rows, classes, data):
    logits = st.floats(-80, 80, allow_nan=False)
    p = data.draw(arrays(np.float64, (rows, classes), elements=logits))
    q = data.draw(arrays(np.float64, (rows, classes), elements=logits))
    z = zrf_score(p, q)
    assert 0.0 <= z <= 1.0


samples = st.lists(st.integers(-20, 20), min_size=1, max_size=40)


@settings(max_examples=60)
@given(samples, samples)
def test_ks_statistic_exact_and_p_in_range(a, b):
    res = ks_two_sample(a, b)
    assert res.statistic == float(oracles.ks_statistic_exact(a, b))
    assert 0.0 <= res.pvalue <= 1.0
    assert ks_two_sample(b, a) == res


@given(st.integers(2, 20), st.floats(-5, 5), st.floats(-5, 5), st.data())
def test_barrier_ignores_affine_trend(n, slope, offset, data):
    ts = grid(n)
    lr = data.draw(st.lists(st.floats(0, 5), min_size=n, max_size=n))
    lf = data.draw(st.lists(st.floats(0, 5), min_size=n, max_size=n))
    base = barrier_profile(records_from(ts, lr, lf))
    shift = [offset + 10 + slope * t for t in ts]
    moved = barrier_profile(records_from(ts, [a + s for a, s in zip(lr, shift)], [a + s for a, s in zip(lf, shift)]))
    assert base.retain_barrier_height >= 0.0 and base.forget_cliff_depth >= 0.0
    assert abs(base.retain_barrier_height - moved.retain_barrier_height) <= 1e-9
    assert abs(base.forget_cliff_depth - moved.forget_cliff_depth) <= 1e-9


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50))
def test_curriculum_is_a_stable_sort(losses):
    order = curriculum_order(losses, "ascending")
    assert sorted(order.tolist()) == list(range(len(losses)))
    keyed = [(losses[i], i) for i in order]
    assert keyed == sorted(keyed)


@given(st.lists(st.integers(0, 2**64 - 1), min_size=4, max_size=4).filter(any))
def test_xoshiro_matches_reference(state):
    g = Xoshiro256(0)
    g._s = list(state)
    assert [g.next_u64() for _ in range(8)] == oracles.xoshiro_reference(state, 8)


@given(arrays(np.float32, st.integers(1, 64), elements=st.floats(width=32, allow_nan=False)))
def test_checkpoint_round_trip(values):
    p = vec(values)
    assert decode(encode(p)).values.tobytes() == p.values.tobytes()
