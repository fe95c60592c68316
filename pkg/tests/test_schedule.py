import numpy as np
import pytest

from diffctr.errors import DataError
from diffctr.rng import stream
from diffctr.schedule import MAX_MASK_PROB, FieldCurve, NoiseSchedule, build_schedule


def test_zero_at_origin():
    s = build_schedule(2, lo=0.0, hi=0.9, horizon=100)
    assert s.mask_prob(0, 0.0) == 0.0
    assert s.cumulative_rate(0, 0.0) == 0.0


def test_half_mask_prob_is_log_two_rate():
    s = build_schedule(1, lo=0.0, hi=1.0 - 1e-4, horizon=10)
    # pick t where the linear curve hits exactly 0.5
    t = 10 * 0.5 / (1.0 - 1e-4)
    assert abs(s.mask_prob(0, t) - 0.5) < 1e-12
    assert abs(s.cumulative_rate(0, t) - np.log(2.0)) < 1e-12


def test_endpoint_rate():
    s = build_schedule(1, lo=0.0, hi=0.99, horizon=500)
    assert abs(s.mask_prob(0, 500) - 0.99) < 1e-15
    assert abs(s.cumulative_rate(0, 500) - (-np.log(0.01))) < 1e-12
    assert abs(s.cumulative_rate(0, 500) - 4.6052) < 1e-4


def test_midpoint_linear():
    s = build_schedule(1, lo=0.0, hi=0.99, horizon=500)
    assert abs(s.mask_prob(0, 250) - 0.495) < 1e-12


def test_rate_and_mask_prob_are_inverse():
    s = build_schedule(3, lo=0.05, hi=0.98, horizon=500)
    for t in np.linspace(0, 500, 23):
        m = s.mask_prob(1, t)
        assert abs((1.0 - np.exp(-s.cumulative_rate(1, t))) - m) < 1e-12


@pytest.mark.parametrize("kind", ["linear-mask", "geometric-rate"])
def test_monotone_and_bounds(kind):
    lo = 0.02 if kind == "geometric-rate" else 0.0
    s = build_schedule(2, lo=lo, hi=0.97, horizon=300, kind=kind)
    ts = np.linspace(0, 300, 50)
    vals = [s.mask_prob(0, t) for t in ts]
    assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:]))
    assert abs(vals[0] - lo) < 1e-12 and abs(vals[-1] - 0.97) < 1e-12
    assert all(lo - 1e-12 <= v <= 0.97 + 1e-12 for v in vals)


def test_shared_flag_unifies_fields():
    s = build_schedule(4, lo=0.0, hi=0.9, label_lo=0.3, horizon=100, shared=True)
    probs = s.sample_mask_probs(stream(0, "draw"))
    assert np.all(probs == probs[0])
    assert len(probs) == 5


def test_per_field_curves_differ():
    s = NoiseSchedule(curves=(FieldCurve(0.0, 0.5), FieldCurve(0.0, 0.9)), horizon=100)
    probs = s.mask_probs(90.0)
    assert probs[0] != probs[1]


def test_uniform_t_gives_uniform_mask_prob_mean():
    s = build_schedule(0, lo=0.0, hi=MAX_MASK_PROB, horizon=500)
    rng = stream(123, "mean-check")
    n = 10**6
    # same t draw as sample_mask_probs, vectorized for the million-draw check
    t = 500 * (1.0 - rng.random(n))
    probs = MAX_MASK_PROB * t / 500
    for ti in t[:50]:
        assert abs(s.mask_prob(0, ti) - MAX_MASK_PROB * ti / 500) < 1e-15
    target = MAX_MASK_PROB / 2
    sigma = MAX_MASK_PROB / np.sqrt(12 * n)
    assert abs(probs.mean() - target) < 3 * sigma


def test_t_out_of_range():
    s = build_schedule(1, horizon=10)
    with pytest.raises(DataError):
        s.mask_prob(0, -1.0)
    with pytest.raises(DataError):
        s.mask_prob(0, 10.5)


def test_invalid_bounds_rejected():
    with pytest.raises(DataError):
        build_schedule(1, lo=0.5, hi=0.5)
    with pytest.raises(DataError):
        build_schedule(1, lo=0.0, hi=1.0)
    with pytest.raises(DataError):
        build_schedule(1, lo=0.0, hi=0.9, kind="geometric-rate")
    with pytest.raises(DataError):
        build_schedule(1, kind="nope")
