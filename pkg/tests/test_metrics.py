import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowchain.metrics import (
    DensityGrid,
    GridSpec,
    MetricError,
    ade,
    best_of_n,
    emd,
    emd_grid_spec,
    emd_linprog,
    fde,
    gaussian_fit,
    kde_log_density,
    mean_step_metrics,
    rasterize_gaussian,
    rasterize_mixture,
    rasterize_points,
    scott_bandwidth,
    square_grid,
)


def _random_grid(rng, n=6, sparsity=0.3):
    mass = rng.random((n, n)) * (rng.random((n, n)) > sparsity)
    mass[0, 0] += 1e-3
    return DensityGrid(np.zeros(2), 0.5, mass / mass.sum())


class TestDisplacement:
    def test_identical(self, rng):
        t = rng.standard_normal((12, 2))
        assert ade(t, t) == 0.0 and fde(t, t) == 0.0

    def test_three_four_five(self, rng):
        t = rng.standard_normal((12, 2))
        assert ade(t + [3, 4], t) == pytest.approx(5.0) and fde(t + [3, 4], t) == pytest.approx(5.0)

    def test_direct_recomputation(self, rng):
        a, b = rng.standard_normal((2, 12, 2))
        direct = sum(math.hypot(*(a[i] - b[i])) for i in range(12)) / 12
        assert ade(a, b) == pytest.approx(direct, abs=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            ade(np.zeros((12, 2)), np.zeros((11, 2)))

    def test_best_of_n(self, rng):
        gt = rng.standard_normal((12, 2))
        cands = rng.standard_normal((5, 12, 2))
        assert best_of_n(np.concatenate([cands, gt[None]]), gt) == (0.0, 0.0)
        assert best_of_n(cands[:1], gt) == (ade(cands[0], gt), fde(cands[0], gt))
        a, f = best_of_n(cands, gt)
        assert all(a <= ade(c, gt) and f <= fde(c, gt) for c in cands)
        with pytest.raises(MetricError):
            best_of_n(np.zeros((0, 12, 2)), gt)

    def test_best_of_n_monotone_when_appending(self, rng):
        gt = rng.standard_normal((12, 2))
        cands = rng.standard_normal((20, 12, 2))
        vals = [best_of_n(cands[: k + 1], gt) for k in range(20)]
        assert all(b[0] <= a[0] and b[1] <= a[1] for a, b in zip(vals, vals[1:]))

    def test_mean_step_metrics(self):
        assert mean_step_metrics(np.full((4, 12), 2.5)) == 2.5
        assert mean_step_metrics([[7.0]]) == 7.0
        assert mean_step_metrics([1.0, 2.0, 6.0]) == pytest.approx(3.0)


class TestRasterize:
    def test_point_at_cell_center(self):
        spec = GridSpec(np.zeros(2), 1.0, (4, 4))
        g = rasterize_points(np.array([[2.5, 1.5]]), spec)
        assert g.mass[2, 1] == 1.0 and g.mass.sum() == 1.0

    def test_unit_gaussian_mass(self):
        spec = square_grid([-6, -6], [6, 6], 48)
        g = rasterize_gaussian(np.zeros(2), np.eye(2), spec, normalize=False, oversample=1)
        assert g.mass.sum() == pytest.approx(1.0, abs=0.01)
        m = rasterize_mixture(np.zeros((1, 2)), [1.0], 1.0, spec, normalize=False)
        assert m.mass.sum() == pytest.approx(1.0, abs=0.01)

    def test_translation(self, rng):
        pts = rng.uniform(0, 4, (50, 2))
        spec = GridSpec(np.zeros(2), 1.0, (8, 8))
        a = rasterize_points(pts, spec)
        b = rasterize_points(pts + [2.0, 1.0], spec)
        assert np.allclose(b.mass[2:6, 1:5], a.mass[:4, :4])

    def test_outside_raises(self):
        spec = GridSpec(np.zeros(2), 1.0, (2, 2))
        with pytest.raises(MetricError):
            rasterize_points(np.array([[10.0, 10.0]]), spec)
        with pytest.raises(MetricError):
            rasterize_mixture(np.array([[100.0, 100.0]]), [1.0], 0.1, spec)

    def test_mixture_coverage_requirement(self):
        spec = square_grid([-1, -1], [1, 1], 8)
        with pytest.raises(MetricError, match="covers only"):
            rasterize_mixture(np.zeros((1, 2)), [1.0], 1.0, spec)

    def test_grid_spec_covers_inputs(self, rng):
        pts = rng.standard_normal((500, 2)) + [5, 0]
        spec = emd_grid_spec([pts], [(np.array([[0.0, 0.0], [0.0, 3.0]]), 0.1)])
        lo, hi = spec.origin, spec.origin + np.array(spec.shape) * spec.cell
        assert np.all(lo <= [-0.4, -0.4]) and np.all(hi >= pts.max(0).clip(max=9))


class TestEmd:
    def test_identical_is_zero(self, rng):
        g = _random_grid(rng)
        assert emd(g, g) == pytest.approx(0.0, abs=1e-12)

    def test_two_point_masses(self):
        spec = GridSpec(np.zeros(2), 1.0, (10, 10))
        a = rasterize_points(np.array([[0.5, 0.5]]), spec)
        b = rasterize_points(np.array([[3.5, 4.5]]), spec)
        assert emd(a, b) == pytest.approx(5.0, abs=1e-12)

    def test_matches_linprog(self, rng):
        for _ in range(5):
            a, b = _random_grid(rng), _random_grid(rng)
            assert abs(emd(a, b) - emd_linprog(a, b)) < 1e-6

    def test_metric_axioms(self, rng):
        for _ in range(5):
            a, b, c = (_random_grid(rng, 5) for _ in range(3))
            assert abs(emd(a, b) - emd(b, a)) < 1e-6
            assert emd(a, c) <= emd(a, b) + emd(b, c) + 1e-6

    def test_mass_mismatch(self, rng):
        a = _random_grid(rng)
        b = DensityGrid(a.origin, a.cell, a.mass * 1.1)
        with pytest.raises(MetricError, match="masses differ"):
            emd(a, b)

    def test_geometry_mismatch(self, rng):
        a = _random_grid(rng)
        with pytest.raises(MetricError):
            emd(a, DensityGrid(a.origin + 1, a.cell, a.mass))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_emd_equals_lp_property(seed):
    rng = np.random.default_rng(seed)
    a, b = _random_grid(rng, 4), _random_grid(rng, 4)
    assert abs(emd(a, b) - emd_linprog(a, b)) < 1e-6


class TestKde:
    def test_coincident_samples(self):
        # two coincident clusters keep the bandwidth finite; the query sits on one of them
        samples = np.array([[0.0, 0.0]] * 50 + [[1.0, 2.0]] * 50)
        h = scott_bandwidth(samples)
        far = math.exp(-0.5 * ((1 / h[0]) ** 2 + (2 / h[1]) ** 2))
        expected = math.log((0.5 + 0.5 * far) / (2 * math.pi * h[0] * h[1]))
        assert kde_log_density(samples, np.zeros(2)) == pytest.approx(expected, abs=1e-12)

    def test_brute_force(self, rng):
        s = rng.standard_normal((300, 2)) * [1.0, 2.0]
        q = rng.standard_normal((7, 2))
        h = scott_bandwidth(s)
        brute = []
        for p in q:
            tot = 0.0
            for x in s:
                tot += math.exp(-0.5 * (((p - x) / h) ** 2).sum()) / (2 * math.pi * h[0] * h[1])
            brute.append(math.log(tot / len(s)))
        assert np.allclose(kde_log_density(s, q), brute, rtol=0, atol=1e-12)

    def test_scott_rule(self, rng):
        s = rng.standard_normal((1000, 2))
        assert np.allclose(scott_bandwidth(s), 1000 ** (-1 / 6) * s.std(0, ddof=1))

    def test_integrates_to_one(self, rng):
        s = rng.standard_normal((200, 2))
        xs = np.linspace(-7, 7, 200)
        g = np.stack(np.meshgrid(xs, xs, indexing="ij"), -1).reshape(-1, 2)
        mass = np.exp(kde_log_density(s, g)).sum() * (xs[1] - xs[0]) ** 2
        assert mass == pytest.approx(1.0, abs=0.02)

    def test_degenerate(self):
        with pytest.raises(MetricError):
            kde_log_density(np.ones((10, 2)), np.zeros(2))
        with pytest.raises(MetricError):
            kde_log_density(np.ones((1, 2)), np.zeros(2))


def test_gaussian_fit(rng):
    s = rng.multivariate_normal([1, 2], [[2, 0.5], [0.5, 1]], size=20_000)
    mean, cov = gaussian_fit(s)
    assert np.allclose(mean, [1, 2], atol=0.05) and np.allclose(cov, [[2, 0.5], [0.5, 1]], atol=0.08)
