import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import mape_oracle, rmse_oracle
from srcn.data import BinnedSeries, DayWindow, SampleWindow
from srcn.evaluation import HistoricalAverage, mape, mape_signed, persistence_baseline, rmse
from srcn.grid_codec import GridSpec, LinkGeometry, build_network_map


def test_trivial_values():
    a = np.full((3, 2), 50.0)
    assert mape(a, a) == 0.0 and rmse(a, a) == 0.0
    assert mape(np.full((3, 2), 45.0), a) == pytest.approx(0.10, abs=1e-15)
    assert rmse(a + 3.0, a) == 3.0


@pytest.mark.parametrize("seed", range(10))
def test_against_scalar_oracles(seed):
    rng = np.random.default_rng(seed)
    p, a = rng.uniform(0, 80, (4, 3)), rng.uniform(0, 80, (4, 3))
    a[0, 0] = 0.3  # exercise the epsilon floor
    assert abs(mape(p, a, 1.0) - mape_oracle(p.tolist(), a.tolist(), 1.0)) < 1e-12
    assert abs(rmse(p, a) - rmse_oracle(p.tolist(), a.tolist())) < 1e-12


def test_errors():
    with pytest.raises(ValueError):
        mape(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        rmse(np.ones(3), np.ones(4))
    with pytest.raises(ZeroDivisionError):
        mape(np.ones(2), np.array([1.0, 0.0]), epsilon=0.0)
    with pytest.raises(ValueError):
        mape(np.ones(2), np.ones(2), epsilon=-1.0)


def test_signed_mape_divides_by_prediction():
    p, a = np.array([50.0, 40.0]), np.array([40.0, 50.0])
    assert mape_signed(p, a) == pytest.approx((10 / 50 - 10 / 40) / 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(0, 10_000))
def test_permutation_invariance_and_zero_iff_equal(n, seed):
    rng = np.random.default_rng(seed)
    p, a = rng.uniform(0, 90, n), rng.uniform(0, 90, n)
    perm = rng.permutation(n)
    assert mape(p[perm], a[perm]) == pytest.approx(mape(p, a), rel=1e-12)
    assert rmse(p[perm], a[perm]) == pytest.approx(rmse(p, a), rel=1e-12)
    assert rmse(p, a) >= 0 and mape(p, a) >= 0
    assert (rmse(p, a) == 0) == bool(np.array_equal(p, a))


def _net():
    links = [LinkGeometry(f"l{k}", ((2 * k + 0.5, 0.5), (2 * k + 0.5, 2.5))) for k in range(2)]
    return build_network_map(links, GridSpec((0.0, 0.0), 1.0, 4, 3))


def _window(net, speeds, offsets, v_max=100.0):
    frames, _ = net.encode_many(np.asarray(speeds), v_max)
    return SampleWindow(frames, np.zeros((len(offsets), net.n_links)), 0, 0, tuple(offsets))


def test_persistence_constant_and_ramp():
    net = _net()
    w = _window(net, [[40.0, 55.0]] * 4, (1, 2, 3))
    pred = persistence_baseline(w, net, 100.0)
    assert np.allclose(pred, [[40.0, 55.0]] * 3, atol=1e-12)
    slope = 1.5
    series = np.array([[10 + slope * t, 20 + slope * t] for t in range(10)])
    w = _window(net, series[:4], (1, 2, 3))
    pred = persistence_baseline(w, net, 100.0)
    for k, off in enumerate((1, 2, 3)):
        assert rmse(pred[k], series[3 + off]) == pytest.approx(slope * off, abs=1e-12)


def _series(values):
    values = np.asarray(values, dtype=float)
    d, b, n = values.shape
    return BinnedSeries([f"l{k}" for k in range(n)], np.arange(d), DayWindow(0, b, 60), values,
                        np.ones(values.shape, dtype=int))


def test_historical_average():
    s = _series([[[40.0], [10.0]], [[60.0], [10.0]]])
    ha = HistoricalAverage(s)
    assert ha.predict(0).tolist() == [50.0]
    with pytest.raises(KeyError):
        ha.predict(2)
    with pytest.raises(ValueError):
        HistoricalAverage(s, days=[0])
    same = _series(np.tile(np.random.default_rng(0).uniform(0, 80, (1, 5, 3)), (3, 1, 1)))
    ha = HistoricalAverage(same, days=[0, 1])
    assert all(np.allclose(ha.predict(b), same.values[2, b]) for b in range(5))


def test_historical_matches_groupby():
    rng = np.random.default_rng(1)
    s = _series(rng.uniform(0, 80, (4, 6, 2)))
    ha = HistoricalAverage(s, days=[0, 2, 3])
    for b in range(6):
        for j in range(2):
            expect = sum(s.values[d, b, j] for d in (0, 2, 3)) / 3
            assert ha.predict(b)[j] == pytest.approx(expect, abs=1e-12)
