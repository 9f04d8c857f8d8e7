import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from priorloc.estimators import (DegenerateDataError, GaussianNoiseModel, HistogramNoiseModel,
                                 Posterior, knn_locate, load_noise_model, mismatch_samples,
                                 mse_optimality_audit, normalize_log_weights, pme, pme_locate,
                                 posterior, save_noise_model, train_gaussian, train_histogram)
from priorloc.gridmap import Cell, CellSet, GridGeometry, RadioMapSet, window_mask
from priorloc.priors import full_prior, perfect_prior_random, uniform_prior
from priorloc.scenario import AssignmentStrategy, Measurement
from priorloc.synthgen import CityGenParams, PropagationParams, generate_environment, simulate_map_set


def make_set(planes):
    planes = np.asarray(planes, dtype=np.uint8)
    n, h, w = planes.shape
    return RadioMapSet(GridGeometry(w, h), tuple(Cell(0, 0) for _ in range(n)), planes)


def oracle_pme(m, maps, prior, mu, sigma2, dps=50):
    """Direct Bayes sum of raw exp terms in high precision, no log-domain tricks."""
    with mpmath.workdps(dps):
        cells = list(prior.support)
        w = []
        for c, p in zip(cells, prior.mass):
            q = mpmath.mpf(0)
            for t, r in zip(m.tx_ids, m.rss):
                z = mpmath.mpf(float(r)) - int(maps.planes[t, c.y, c.x]) - mpmath.mpf(mu)
                q += z * z
            w.append(mpmath.mpf(float(p)) * mpmath.exp(-q / (2 * mpmath.mpf(sigma2))))
        total = mpmath.fsum(w)
        mass = [wi / total for wi in w]
        x = mpmath.fsum(mi * c.x for mi, c in zip(mass, cells))
        y = mpmath.fsum(mi * c.y for mi, c in zip(mass, cells))
        return [float(v) for v in mass], float(x), float(y)


# -- posterior ----------------------------------------------------------------

def test_single_cell_support_has_mass_one():
    maps = make_set(np.array([[[10, 200]]]))
    prior = uniform_prior(CellSet.from_cells(maps.geometry, [(1, 0)]))
    m = Measurement((0,), [10.0])
    for noise in (GaussianNoiseModel(0, 5), HistogramNoiseModel.fit(np.arange(-3, 4))):
        post = posterior(m, maps, prior, noise)
        assert post.mass.tolist() == [1.0]
        assert (pme_locate(post).x, pme_locate(post).y) == (1.0, 0.0)


def test_symmetric_two_cells():
    maps = make_set(np.array([[[90, 110]]]))
    post = posterior(Measurement((0,), [100.0]), maps, full_prior(maps.geometry), GaussianNoiseModel(0, 5))
    np.testing.assert_allclose(post.mass, [0.5, 0.5], rtol=0, atol=1e-15)
    assert pme_locate(post).x == pytest.approx(0.5)


def test_three_cell_softmax():
    # fingerprints chosen so z = r - c is (0,0), (1,2), (3,-1)
    r = np.array([100.0, 50.0])
    planes = np.zeros((2, 1, 3))
    planes[:, 0, 0] = r - [0, 0]
    planes[:, 0, 1] = r - [1, 2]
    planes[:, 0, 2] = r - [3, -1]
    maps = make_set(planes)
    post = posterior(Measurement((0, 1), r), maps, full_prior(maps.geometry), GaussianNoiseModel(0, 5))
    sq = [0.0, 5.0, 10.0]
    den = sum(math.exp(-s / 10) for s in sq)
    want = [math.exp(-s / 10) / den for s in sq]
    np.testing.assert_allclose(post.mass, want, rtol=1e-9, atol=0)
    est = pme_locate(post)
    assert est.x == pytest.approx(want[1] * 1 + want[2] * 2, rel=1e-12)
    assert est.y == 0


def test_pme_weighted_mean_examples():
    g = GridGeometry(30, 30)
    one = CellSet.from_cells(g, [(10, 20)])
    post = Posterior(one, np.zeros(1), np.ones(1))
    assert (pme_locate(post).x, pme_locate(post).y) == (10.0, 20.0)
    two = CellSet.from_cells(g, [(0, 0), (2, 0)])
    post = Posterior(two, np.zeros(2), np.array([0.5, 0.5]))
    assert (pme_locate(post).x, pme_locate(post).y) == (1.0, 0.0)


def test_posterior_rejects_bad_inputs():
    maps = make_set(np.ones((1, 2, 2)))
    with pytest.raises(IndexError):
        posterior(Measurement((3,), [1.0]), maps, full_prior(maps.geometry), GaussianNoiseModel(0, 1))
    with pytest.raises(FloatingPointError):
        Posterior(CellSet.full(maps.geometry), np.array([0, np.nan, 0, 0]), np.full(4, 0.25))


def test_uncovered_cells_score_as_zero_readings():
    maps = make_set(np.array([[[0, 200]]]))
    post = posterior(Measurement((0,), [200.0]), maps, full_prior(maps.geometry), GaussianNoiseModel(0, 5))
    assert post.mass[1] > 1 - 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-6, 6))
def test_normalization_across_noise_scales(seed, log_sigma2):
    sigma2 = 10.0 ** log_sigma2
    rng = np.random.default_rng(seed)
    maps = make_set(rng.integers(0, 256, size=(3, 9, 9)))
    m = Measurement((2, 0), rng.uniform(-50, 300, size=2))
    for noise in (GaussianNoiseModel(float(rng.normal()), sigma2),):
        post = posterior(m, maps, full_prior(maps.geometry), noise)
        assert abs(post.mass.sum() - 1) <= 1e-10
        assert np.all(np.isfinite(post.log_weights))
        est = pme_locate(post)
        assert 0 <= est.x <= 8 and 0 <= est.y <= 8


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.floats(-1e6, 1e6))
def test_log_weight_shift_invariance(lw, c):
    lw = np.array(lw)
    np.testing.assert_allclose(normalize_log_weights(lw + c), normalize_log_weights(lw), rtol=1e-9, atol=1e-300)


def test_shift_leaves_estimate_unchanged():
    g = GridGeometry(4, 1)
    cells = CellSet.full(g)
    lw = np.array([-3.0, 0.5, 2.0, -1.0])
    a = pme_locate(Posterior(cells, lw, normalize_log_weights(lw)))
    b = pme_locate(Posterior(cells, lw + 1e4, normalize_log_weights(lw + 1e4)))
    assert a.x == pytest.approx(b.x, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_high_precision_oracle(seed):
    rng = np.random.default_rng(seed)
    w, h, n = int(rng.integers(2, 9)), int(rng.integers(2, 9)), int(rng.integers(1, 6))
    maps = make_set(rng.integers(0, 256, size=(n, h, w)))
    k = int(rng.integers(1, n + 1))
    ids = tuple(int(t) for t in rng.permutation(n)[:k])
    truth = Cell(int(rng.integers(w)), int(rng.integers(h)))
    sigma2, mu = float(rng.uniform(1, 50)), float(rng.normal(0, 2))
    rss = maps.planes[list(ids), truth.y, truth.x] + rng.normal(0, math.sqrt(sigma2), size=k)
    m = Measurement(ids, rss, truth)
    prior = full_prior(maps.geometry)
    post = posterior(m, maps, prior, GaussianNoiseModel(mu, sigma2))
    est = pme_locate(post)
    mass, x, y = oracle_pme(m, maps, prior, mu, sigma2)
    big = np.array(mass) > 1e-280
    np.testing.assert_allclose(post.mass[big], np.array(mass)[big], rtol=1e-9)
    assert est.x == pytest.approx(x, rel=1e-9, abs=1e-12)
    assert est.y == pytest.approx(y, rel=1e-9, abs=1e-12)


def test_small_noise_concentrates_on_argmin():
    rng = np.random.default_rng(5)
    maps = make_set(rng.integers(0, 256, size=(3, 6, 6)))
    m = Measurement((0, 1, 2), [120.3, 40.0, 200.1])
    c = maps.planes.reshape(3, -1).astype(float)
    best = int(np.argmin(((m.rss[:, None] - c) ** 2).sum(axis=0)))
    want = (best % 6, best // 6)
    prev = math.inf
    for sigma2 in (100.0, 10.0, 1.0, 1e-2, 1e-4):
        est = pme(m, maps, full_prior(maps.geometry), GaussianNoiseModel(0, sigma2))
        d = math.hypot(est.x - want[0], est.y - want[1])
        assert d <= prev + 1e-9
        prev = d
    assert prev < 1e-9


def test_histogram_model_scoring():
    probs = np.full(511, 1.0)
    probs[255 + 3] = 100.0
    model = HistogramNoiseModel(probs / probs.sum())
    maps = make_set(np.array([[[97, 100, 110]]]))
    post = posterior(Measurement((0,), [100.0]), maps, full_prior(maps.geometry), model)
    assert int(np.argmax(post.mass)) == 0
    # out-of-range mismatches land in the edge bins
    assert HistogramNoiseModel.bin_index(np.array([-1e9, -255.4, 0.49, 0.5, 1e9])).tolist() == [0, 0, 255, 256, 510]


# -- kNN ----------------------------------------------------------------------

def test_knn_exact_fingerprint():
    rng = np.random.default_rng(2)
    maps = make_set(rng.integers(0, 256, size=(4, 5, 5)))
    full = CellSet.full(maps.geometry)
    c = Cell(3, 1)
    m = Measurement((0, 1, 2, 3), maps.planes[:, c.y, c.x])
    est = knn_locate(m, maps, full, 1)
    assert (est.x, est.y) == (3.0, 1.0)


def test_knn_all_candidates_is_centroid():
    rng = np.random.default_rng(2)
    maps = make_set(rng.integers(0, 256, size=(2, 4, 6)))
    full = CellSet.full(maps.geometry)
    for r in ([0.0, 0.0], [255.0, 17.0]):
        est = knn_locate(Measurement((0, 1), r), maps, full, 24)
        assert (est.x, est.y) == (2.5, 1.5)
    assert knn_locate(Measurement((0, 1), [1, 2]), maps, full, 1000) == est


def test_knn_hand_ranked_toy():
    # distances from r=100: 40, 5, 20, 0, 10 -> nearest three are x=3, 1, 4
    maps = make_set(np.array([[[60, 95, 120, 100, 110]]]))
    est = knn_locate(Measurement((0,), [100.0]), maps, CellSet.full(maps.geometry), 3)
    assert est.x == pytest.approx((3 + 1 + 4) / 3) and est.y == 0


def test_knn_ties_by_row_major_order():
    maps = make_set(np.array([[[90, 110], [110, 90]]]))
    est = knn_locate(Measurement((0,), [100.0]), maps, CellSet.full(maps.geometry), 2)
    assert (est.x, est.y) == (0.5, 0.0)


def test_knn_errors():
    maps = make_set(np.ones((1, 2, 2)))
    with pytest.raises(ValueError):
        knn_locate(Measurement((0,), [1.0]), maps, CellSet.empty(maps.geometry), 1)
    with pytest.raises(ValueError):
        knn_locate(Measurement((0,), [1.0]), maps, CellSet.full(maps.geometry), 0)


# -- training -----------------------------------------------------------------

def test_identical_maps_are_degenerate():
    rng = np.random.default_rng(0)
    est = make_set(rng.integers(0, 256, size=(2, 5, 5)))
    with pytest.raises(DegenerateDataError):
        train_gaussian(est, est)
    assert mismatch_samples(est, est).mean() == 0
    low = rng.integers(0, 250, size=(2, 5, 5))
    base, shifted = make_set(low), make_set(low + 3)
    assert mismatch_samples(base, shifted).mean() == 3
    with pytest.raises(DegenerateDataError):
        train_gaussian(base, shifted)
    hist = train_histogram(est, est)
    assert int(np.argmax(hist.probs)) == 255


def test_gaussian_training_recovers_parameters():
    rng = np.random.default_rng(8)
    base = rng.integers(60, 190, size=(10, 100, 100))
    est = make_set(base)
    noise = np.rint(rng.normal(-2, math.sqrt(8), size=base.shape)).astype(int)
    meas = make_set(base + noise)
    model = train_gaussian(est, meas)
    # integer rounding adds about 1/12 to the variance, well inside the 5% band
    assert model.mu == pytest.approx(-2, rel=0.05)
    assert model.sigma2 == pytest.approx(8, rel=0.05)


def test_all_plus_five_argmax():
    est = make_set(np.full((2, 3, 3), 100))
    meas = make_set(np.full((2, 3, 3), 105))
    assert int(np.argmax(train_histogram(est, meas).probs)) - 255 == 5


def test_histogram_recovers_discrete_law():
    rng = np.random.default_rng(4)
    law = {-1: 0.2, 0: 0.5, 1: 0.3}
    n = 100_000
    z = rng.choice(list(law), p=list(law.values()), size=n)
    base = rng.integers(10, 240, size=n)
    est = make_set(base.reshape(1, 1, n))
    meas = make_set((base + z).reshape(1, 1, n))
    model = train_histogram(est, meas)
    for k, p in law.items():
        assert model.probs[255 + k] == pytest.approx(p, rel=0.02)
    assert np.all(model.probs > 0)
    assert abs(model.probs.sum() - 1) <= 1e-12


def test_only_positive_pairs_are_sampled():
    est = make_set(np.array([[[0, 0, 5]]]))
    meas = make_set(np.array([[[0, 7, 0]]]))
    assert sorted(mismatch_samples(est, meas).tolist()) == [-5, 7]
    assert mismatch_samples(est, meas, CellSet.from_cells(est.geometry, [(1, 0)])).tolist() == [7]


def test_empty_population_is_degenerate():
    z = make_set(np.zeros((1, 2, 2)))
    with pytest.raises(DegenerateDataError):
        train_histogram(z, z)


def test_centered_histogram():
    z = np.full(100, 4.0)
    plain = HistogramNoiseModel.fit(z)
    centered = HistogramNoiseModel.fit(z, center=True)
    assert centered.mu == 4.0 and int(np.argmax(centered.probs)) == 255
    assert plain.log_likelihood(np.array([[4.0]])) == pytest.approx(centered.log_likelihood(np.array([[4.0]])))


def test_noise_model_json_round_trip(tmp_path):
    for model in (GaussianNoiseModel(-1.5, 7.25), HistogramNoiseModel.fit(np.arange(-20, 20), center=True)):
        save_noise_model(model, tmp_path / "m.json")
        assert load_noise_model(tmp_path / "m.json") == model


def test_noise_model_validation():
    with pytest.raises(DegenerateDataError):
        GaussianNoiseModel(0, 0)
    with pytest.raises(ValueError):
        HistogramNoiseModel(np.array([0.5, 0.5, 0.0]))


# -- MSE audit -----------------------------------------------------------------

def desk_maps(seed=0):
    env, txs = generate_environment(CityGenParams(seed=seed))
    return simulate_map_set(env, txs, PropagationParams())


def test_audit_perfect_prior_beats_full_grid():
    maps = desk_maps()
    win = window_mask(maps.geometry, 41, 41)
    assign = AssignmentStrategy("random_positive", 3)
    noise = GaussianNoiseModel(0, 5)
    perfect = perfect_prior_random(maps, win, 3)
    full = full_prior(maps.geometry)
    res = mse_optimality_audit(maps, win, 5.0, assign, {
        "perfect": lambda m: pme(m, maps, perfect, noise),
        "full": lambda m: pme(m, maps, full, noise),
        "knn": lambda m: knn_locate(m, maps, win, 300),
    }, trials=300, seed=1)
    assert res["perfect"][0] <= res["full"][0]
    assert res["perfect"][0] < res["knn"][0]


def test_audit_zero_noise_limit():
    maps = make_set(np.arange(16).reshape(1, 4, 4) * 15 + 10)
    full = CellSet.full(maps.geometry)
    res = mse_optimality_audit(maps, full, 1e-6, AssignmentStrategy("random_positive", 1), {
        "pme": lambda m: pme(m, maps, uniform_prior(full), GaussianNoiseModel(0, 1e-6)),
    }, trials=50, seed=0)
    assert res["pme"][0] < 1e-12
