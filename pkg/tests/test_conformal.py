import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedccp.conformal import (CalibrationResult, GridSpec, PredictionSet, QuantileConfig, QuantileModel, calibrate,
                              coverage_and_size, cqr_score, fit_quantile_model, interval_sets, load_quantile_model,
                              pinball_loss, reference_interval, save_quantile_model, train_quantile_model,
                              transform_set, transform_sets, write_sets_csv)
from fedccp.flow import CouplingLayer, FlowParams, ReferenceSpec, flow_forward, init_flow
from fedccp.numerics import MlpParams, conformal_quantile, substream


def constant_model(lo, hi, d=1, alpha=0.1):
    """Quantile model whose heads ignore the input."""
    gap = math.log(math.expm1(hi - lo))
    return QuantileModel(MlpParams([(np.zeros((d, 2)), np.array([lo, gap]))]), alpha)


def linear_band_model(half_width, alpha=0.1):
    # q_lo = x - w, q_hi = x + w for one feature
    gap = math.log(math.expm1(2 * half_width))
    return QuantileModel(MlpParams([(np.array([[1.0, 0.0]]), np.array([-half_width, gap]))]), alpha)


def result_with_tau(tau, alpha=0.1):
    return CalibrationResult(np.array([tau]), tau, alpha, 1)


def random_flow(seed, cond_dim=2, n_layers=4, scale=0.4):
    rng = substream(seed, "init")
    flow = init_flow(2, cond_dim, rng, n_layers=n_layers, hidden=8, depth=1)
    v = flow.to_vector()
    return flow.with_vector(v + scale * rng.standard_normal(v.size))


def folding_flow():
    """Keeps y and shifts x by 3 tanh(y), so the pulled-back set splits into pieces."""
    scale = MlpParams([(np.zeros((1, 1)), np.zeros(1))])
    shift = MlpParams([(np.array([[1.0]]), np.zeros(1)), (np.array([[3.0]]), np.zeros(1))])
    return FlowParams([CouplingLayer(np.array([False, True]), scale, shift)], 2, 0)


@pytest.mark.parametrize("pred, y, level, expected", [
    (0.0, 1.0, 0.9, 0.9),
    (0.0, -1.0, 0.9, 0.1),
    (2.0, 2.0, 0.3, 0.0),
])
def test_pinball_examples(pred, y, level, expected):
    assert pinball_loss(pred, y, level) == pytest.approx(expected)


@given(pred=st.floats(-50, 50), y=st.floats(-50, 50))
def test_pinball_median_is_half_abs_error(pred, y):
    assert pinball_loss(pred, y, 0.5) == pytest.approx(0.5 * abs(y - pred))


def test_pinball_rejects_bad_level():
    with pytest.raises(ValueError):
        pinball_loss(0.0, 1.0, 1.0)


def test_constant_model_heads():
    lo, hi = constant_model(-1.0, 1.0).predict([0.3])
    assert lo == pytest.approx(-1.0)
    assert hi == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("y, expected", [(2.0, 1.0), (0.0, -1.0), (-3.0, 2.0)])
def test_cqr_score_examples(y, expected):
    assert cqr_score(constant_model(-1.0, 1.0), [0.0], y) == pytest.approx(expected, abs=1e-12)


def test_calibrate_quantile_arithmetic():
    model = constant_model(-1.0, 1.0)
    # labels 2..11 give scores 1..10
    ys = np.arange(2.0, 12.0)
    res = calibrate(model, np.zeros((10, 1)), ys, 0.1)
    assert res.tau == pytest.approx(10.0)
    assert res.n == 10
    np.testing.assert_allclose(np.sort(res.scores), np.arange(1.0, 11.0), atol=1e-12)


def test_calibrate_all_negative_scores_shrinks():
    model = constant_model(-1.0, 1.0)
    res = calibrate(model, np.zeros((20, 1)), np.linspace(-0.5, 0.5, 20), 0.1)
    assert res.tau < 0
    lo, hi = reference_interval(model, [0.0], res)
    assert hi - lo < 2.0


def test_calibrate_small_n_is_unbounded():
    model = constant_model(-1.0, 1.0)
    res = calibrate(model, np.zeros((2, 1)), [0.0, 3.0], 0.05)
    assert res.tau == math.inf and res.unbounded
    grid = GridSpec(-5.0, 5.0, 101)
    ps = interval_sets(model, res, [[0.0]], grid)[0]
    assert ps.accepted.all() and ps.unbounded


def test_calibrate_empty_rejected():
    with pytest.raises(ValueError):
        calibrate(constant_model(-1.0, 1.0), np.zeros((0, 1)), [], 0.1)


@pytest.mark.parametrize("tau, expected", [(0.2, (-1.8, 1.8)), (-0.1, (-1.5, 1.5)), (math.inf, (-math.inf, math.inf))])
def test_reference_interval_examples(tau, expected):
    lo, hi = reference_interval(constant_model(-1.6, 1.6), [0.0], result_with_tau(tau))
    assert (lo, hi) == pytest.approx(expected, abs=1e-12)


def test_grid_from_labels():
    grid = GridSpec.from_labels([0.0, 2.0, 1.0], n_points=5)
    assert (grid.y_min, grid.y_max) == (-1.0, 3.0)
    np.testing.assert_allclose(grid.points, [-1, 0, 1, 2, 3])
    assert grid.spacing == 1.0


def test_full_and_empty_sets():
    grid = GridSpec(-1.0, 1.0, 11)
    full = [PredictionSet(grid, np.ones(11, bool)) for _ in range(3)]
    empty = [PredictionSet(grid, np.zeros(11, bool)) for _ in range(3)]
    ys = [-0.95, 0.0, 0.73]
    assert coverage_and_size(full, ys)[0] == 1.0
    assert coverage_and_size(empty, ys) == (0.0, 0.0)
    with pytest.raises(ValueError):
        coverage_and_size([], [])


def test_membership_by_nearest_cell():
    grid = GridSpec(0.0, 1.0, 11)
    acc = np.zeros(11, bool)
    acc[5] = True
    ps = PredictionSet(grid, acc)
    assert ps.contains(0.54) and ps.contains(0.46)
    assert not ps.contains(0.56) and not ps.contains(0.44)
    assert not ps.contains(-3.0)


def test_identity_flow_pullback_is_interval():
    model = constant_model(-1.0, 1.0)
    flow = init_flow(2, 3, substream(0, "init"))
    grid = GridSpec(-3.0, 3.0, 601)
    ps = transform_set(flow, model, result_with_tau(0.25), [0.7], np.ones(3), grid)
    direct = interval_sets(model, result_with_tau(0.25), [[0.7]], grid)[0]
    np.testing.assert_array_equal(ps.accepted, direct.accepted)
    (a, b), = ps.intervals()
    assert a == pytest.approx(-1.25, abs=grid.spacing)
    assert b == pytest.approx(1.25, abs=grid.spacing)
    assert ps.measure == pytest.approx(2.5, abs=2 * grid.spacing)


def brute_force_accept(flow, model, tau, x, eta, grid):
    out = []
    for y in grid.points:
        z, _ = flow_forward(flow, np.append(x, y), eta)
        lo, hi = model.predict(z[:-1])
        out.append(lo - tau <= z[-1] <= hi + tau)
    return np.array(out)


@pytest.mark.parametrize("seed", range(5))
def test_pullback_matches_brute_force(seed):
    rng = substream(seed, "eval")
    flow = random_flow(seed)
    model = linear_band_model(0.8)
    grid = GridSpec(-4.0, 4.0, 257)
    for _ in range(3):
        x = rng.standard_normal(1)
        eta = rng.standard_normal(2)
        tau = float(rng.uniform(-0.3, 0.5))
        ps = transform_set(flow, model, result_with_tau(tau), x, eta, grid)
        np.testing.assert_array_equal(ps.accepted, brute_force_accept(flow, model, tau, x, eta, grid))


def test_disconnected_set():
    flow = folding_flow()
    model = linear_band_model(0.5)
    grid = GridSpec(-5.0, 5.0, 1001)
    ps = transform_set(flow, model, result_with_tau(0.0), [0.0], np.zeros(0), grid)
    np.testing.assert_array_equal(ps.accepted, brute_force_accept(flow, model, 0.0, [0.0], np.zeros(0), grid))
    spans = ps.intervals()
    # |y - 3 tanh(y)| <= 0.5 holds near 0 and near the two nonzero fixed points
    assert len(spans) == 3
    assert spans[1][0] == pytest.approx(-0.25, abs=0.02)
    assert spans[1][1] == pytest.approx(0.25, abs=0.02)
    assert ps.measure == pytest.approx(sum(b - a for a, b in spans), abs=1e-9)
    assert ps.contains(3.0) and ps.contains(0.0) and not ps.contains(1.2)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), t1=st.floats(-0.5, 1.0), t2=st.floats(-0.5, 1.0))
def test_larger_tau_never_removes_cells(seed, t1, t2):
    lo_t, hi_t = sorted((t1, t2))
    flow = random_flow(seed)
    model = linear_band_model(0.6)
    grid = GridSpec(-4.0, 4.0, 129)
    rng = substream(seed, "eval")
    x, eta = rng.standard_normal((5, 1)), rng.standard_normal((5, 2))
    small = transform_sets(flow, model, result_with_tau(lo_t), x, eta, grid)
    big = transform_sets(flow, model, result_with_tau(hi_t), x, eta, grid)
    for a, b in zip(small, big):
        assert np.all(b.accepted[a.accepted])


def test_overflowing_cells_rejected_and_counted():
    scale = MlpParams([(np.array([[1.0]]), np.array([0.0]))])
    shift = MlpParams([(np.zeros((1, 1)), np.zeros(1))])
    flow = FlowParams([CouplingLayer(np.array([True, False]), scale, shift)], 2, 0)
    model = constant_model(-1.0, 1.0)
    grid = GridSpec(-1e307, 1e307, 5)
    # log-scale saturates at 4, and e^4 * 5e306 overflows
    ps = transform_set(flow, model, result_with_tau(math.inf), [1000.0], np.zeros(0), grid)
    assert ps.failures == 4
    np.testing.assert_array_equal(ps.accepted, [False, False, True, False, False])


def test_batched_sets_match_single():
    flow = random_flow(9)
    model = linear_band_model(0.7)
    grid = GridSpec(-3.0, 3.0, 100)
    rng = substream(9, "eval")
    x, eta = rng.standard_normal((7, 1)), rng.standard_normal((7, 2))
    batch = transform_sets(flow, model, result_with_tau(0.1), x, eta, grid, chunk_rows=250)
    for i in range(7):
        single = transform_set(flow, model, result_with_tau(0.1), x[i], eta[i], grid)
        np.testing.assert_array_equal(single.accepted, batch[i].accepted)


def test_transformed_calibration_covers_with_untrained_flow():
    # exchangeable client points, arbitrary flow: marginal coverage survives
    alpha, n_cal, trials = 0.1, 50, 300
    flow = random_flow(21, cond_dim=2, scale=0.6)
    model = linear_band_model(0.3)
    grid = GridSpec(-8.0, 8.0, 801)
    hits = []
    for t in range(trials):
        rng = substream(t, "data")
        x = rng.standard_normal((n_cal + 1, 1))
        y = np.sin(2 * x[:, 0]) + (0.2 + 0.5 * np.abs(x[:, 0])) * rng.standard_normal(n_cal + 1)
        eta = 0.1 * rng.standard_normal((n_cal + 1, 2)) + np.array([1.0, 0.0])
        z, _ = flow_forward(flow, np.column_stack([x, y]), eta)
        res = calibrate(model, z[:n_cal, :1], z[:n_cal, 1], alpha)
        ps = transform_set(flow, model, res, x[n_cal], eta[n_cal], grid)
        hits.append(ps.contains(y[n_cal]))
    cov = float(np.mean(hits))
    eps = 3 * math.sqrt(alpha * (1 - alpha) / trials)
    assert cov >= 1 - alpha - eps


def test_quantile_heads_on_reference_median_level():
    model = train_quantile_model(ReferenceSpec.standard(2), 0.5, QuantileConfig(steps=1500),
                                 substream(0, "reference"))
    probe = np.linspace(-2, 2, 41).reshape(-1, 1)
    lo, hi = model.predict(probe)
    # levels 0.25 and 0.75 of a standard normal
    assert np.max(np.abs(lo + 0.6745)) < 0.1
    assert np.max(np.abs(hi - 0.6745)) < 0.1
    assert np.all(lo <= hi)


def test_reference_heads_flat_in_features():
    # labels are independent of features under the diagonal reference
    model = train_quantile_model(ReferenceSpec.standard(3), 0.1, QuantileConfig(steps=2000),
                                 substream(1, "reference"))
    g = np.linspace(-2, 2, 9)
    probe = np.array(np.meshgrid(g, g)).reshape(2, -1).T
    for head in model.predict(probe):
        assert np.max(np.abs(head - head.mean())) <= 0.15


def test_heads_never_cross():
    rng = substream(1, "init")
    model = QuantileModel(MlpParams([(rng.standard_normal((2, 8)), rng.standard_normal(8)),
                                     (5 * rng.standard_normal((8, 2)), rng.standard_normal(2))]), 0.1)
    lo, hi = model.predict(rng.standard_normal((500, 2)) * 5)
    assert np.all(lo <= hi)


def test_fit_quantile_model_on_data():
    rng = substream(3, "data")
    x = rng.uniform(-1, 1, (4000, 1))
    y = 2 * x[:, 0] + 0.5 * rng.standard_normal(4000)
    model = fit_quantile_model(x, y, 0.1, QuantileConfig(steps=2000), substream(3, "init"))
    lo, hi = model.predict(np.array([[0.0], [0.5]]))
    np.testing.assert_allclose(lo, [-0.822, 1.0 - 0.822], atol=0.15)
    np.testing.assert_allclose(hi, [0.822, 1.0 + 0.822], atol=0.15)


def test_quantile_model_round_trip(tmp_path):
    model = constant_model(-0.3, 0.9)
    save_quantile_model(model, tmp_path / "q.json")
    back = load_quantile_model(tmp_path / "q.json")
    assert back.alpha == model.alpha
    for a, b in zip(back.net.arrays(), model.net.arrays()):
        assert a.tobytes() == b.tobytes()


def test_sets_csv_export(tmp_path):
    grid = GridSpec(0.0, 1.0, 11)
    acc = np.zeros(11, bool)
    acc[[2, 3, 7]] = True
    write_sets_csv(tmp_path / "s.csv", [(0, 4, 0.3, PredictionSet(grid, acc))])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "client_id,point_id,y_true,measure,covered,accepted_intervals"
    fields = lines[1].split(",")
    assert fields[:2] == ["0", "4"] and fields[4] == "1"
    assert len(fields[5].split(";")) == 2


def test_quantile_of_scores_matches_calibration():
    model = constant_model(-1.0, 1.0)
    ys = substream(4, "data").standard_normal(37) * 2
    res = calibrate(model, np.zeros((37, 1)), ys, 0.2)
    assert res.tau == conformal_quantile(res.scores, 0.2)
