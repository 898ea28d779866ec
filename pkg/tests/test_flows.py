import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowchain.flows import (
    BijectiveFlow,
    CifLayer,
    CouplingLayer,
    MafLayer,
    cif_inverse_logdensity,
    cif_log_density_iw,
    cif_sample,
    coupling_forward,
    coupling_inverse,
    gaussian_log_prob,
    maf,
    maf_forward,
    maf_inverse,
    realnvp,
)
from flowchain.numcore import Tensor

from conftest import numerical_jacobian, randomize

COND = 3


def _layer(kind, seed, perturb=0.4, **kw):
    rng = np.random.default_rng(seed)
    params = {}
    if kind == "coupling":
        layer = CouplingLayer(params, "c", passed=seed % 2, cond_dim=COND, hidden=12, depth=2, rng=rng)
    elif kind == "maf":
        layer = MafLayer(params, "m", order=(seed % 2, 1 - seed % 2), cond_dim=COND, hidden=12, depth=2, rng=rng)
    elif kind == "realnvp":
        layer = realnvp(params, "r", COND, hidden=12, depth=2, rng=rng)
    else:
        layer = CifLayer(params, "f", COND, hidden=12, depth=2, rng=rng, **kw)
    if perturb:
        params.update(randomize(params, rng, perturb))
    return layer, params


FWD = {"coupling": coupling_forward, "maf": maf_forward}
INV = {"coupling": coupling_inverse, "maf": maf_inverse}


class TestCoupling:
    def test_zero_nets_are_identity(self):
        layer, _ = _layer("coupling", 0, perturb=0)
        for p in layer.scale_net.params:
            if p.startswith("c.scale"):
                layer.scale_net.params[p] = np.zeros_like(layer.scale_net.params[p])
        x = np.array([0.3, -1.2])
        res = coupling_forward(layer, x, np.ones(COND))
        assert np.array_equal(res.point, x) and res.delta_logp == 0.0
        back = coupling_inverse(layer, x, np.ones(COND))
        assert np.array_equal(back.point, x) and back.delta_logp == 0.0

    def test_constant_scale_closed_form(self):
        params = {}
        layer = CouplingLayer(params, "c", passed=0, cond_dim=COND, hidden=4, depth=1, rng=np.random.default_rng(0))
        # soft clamp 5 tanh(s / 5) = ln 2
        params["c.scale.b1"] = np.array([5 * math.atanh(math.log(2) / 5)])
        res = coupling_forward(layer, np.array([1.5, -0.25]), np.zeros(COND))
        assert np.allclose(res.point, [1.5, -0.5], atol=1e-14)
        assert res.delta_logp == pytest.approx(math.log(2), abs=1e-14)

    @pytest.mark.parametrize("kind", ["coupling", "maf"])
    def test_logdet_matches_numerical_jacobian(self, kind):
        rng = np.random.default_rng(1)
        for seed in range(20):
            layer, _ = _layer(kind, seed)
            cond = rng.standard_normal(COND)
            x = rng.uniform(-3, 3, 2)
            fwd = FWD[kind](layer, x, cond)
            jac = numerical_jacobian(lambda p: FWD[kind](layer, p, cond).point, x)
            num = math.log(abs(np.linalg.det(jac)))
            assert abs(fwd.delta_logp - num) <= 1e-4 * max(abs(num), 1e-3)

    @pytest.mark.parametrize("kind", ["coupling", "maf"])
    def test_roundtrip_and_antisymmetry(self, kind):
        rng = np.random.default_rng(2)
        for seed in range(10):
            layer, _ = _layer(kind, seed)
            cond = rng.standard_normal((50, COND))
            x = rng.uniform(-100, 100, (50, 2))
            fwd = FWD[kind](layer, x, cond)
            inv = INV[kind](layer, fwd.point, cond)
            assert np.max(np.abs(inv.point - x)) < 1e-9
            assert np.max(np.abs(fwd.delta_logp + inv.delta_logp)) < 1e-9

    def test_maf_jacobian_is_triangular(self):
        layer, _ = _layer("maf", 0)  # order (0, 1): y0 depends only on x0
        cond = np.zeros(COND)
        jac = numerical_jacobian(lambda p: maf_forward(layer, p, cond).point, np.array([0.4, -0.7]))
        assert abs(jac[0, 1]) < 1e-9


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 50),
    x=st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=2),
)
def test_bijective_flow_roundtrip_property(seed, x):
    flow, _ = _layer("realnvp", seed)
    cond = Tensor(np.full((1, COND), 0.5))
    pt = Tensor(np.array([x]))
    y, ld = flow.forward(pt, cond)
    back, ld_inv = flow.inverse(y, cond)
    assert np.max(np.abs(back.value - pt.value)) < 1e-9
    assert abs(ld.value[0] + ld_inv.value[0]) < 1e-9


class TestBijectiveFlow:
    def test_masks_alternate(self):
        flow, _ = _layer("realnvp", 0)
        assert [l.passed for l in flow.layers] == [0, 1, 0]

    def test_total_logdet_is_sum(self):
        flow, _ = _layer("realnvp", 3)
        x = Tensor(np.array([[0.2, 0.9]]))
        cond = Tensor(np.ones((1, COND)))
        total = 0.0
        cur = x
        for layer in flow.layers:
            cur, ld = layer.forward(cur, cond)
            total += ld.value[0]
        _, ld_all = flow.forward(x, cond)
        assert ld_all.value[0] == pytest.approx(total, abs=1e-14)

    def test_pushforward_normalizes(self):
        flow, _ = _layer("realnvp", 4, perturb=0.2)
        cond = Tensor(np.zeros((1, COND)))
        z = np.random.default_rng(0).standard_normal((4000, 2))
        y, _ = flow.forward(Tensor(z), cond)
        lo = y.value.mean(0) - 6 * y.value.std(0).max()
        hi = y.value.mean(0) + 6 * y.value.std(0).max()
        xs = np.linspace(lo[0], hi[0], 301)
        ys = np.linspace(lo[1], hi[1], 301)
        g = np.stack(np.meshgrid(xs, ys, indexing="ij"), -1).reshape(-1, 2)
        zz, ld = flow.inverse(Tensor(g), cond)
        logp = -0.5 * np.sum(zz.value**2, axis=1) - math.log(2 * math.pi) + ld.value
        mass = np.exp(logp).sum() * (xs[1] - xs[0]) * (ys[1] - ys[0])
        assert mass == pytest.approx(1.0, abs=0.02)

    def test_maf_builder(self):
        params = {}
        flow = maf(params, "m", COND, hidden=8, depth=1, rng=np.random.default_rng(0))
        assert isinstance(flow, BijectiveFlow) and len(flow.layers) == 3


def _degenerate_cif(seed=0, inner="realnvp"):
    """CIF whose prior/posterior are N(0, I) and whose inner flow ignores u."""
    layer, params = _layer("cif", seed, inner=inner)
    for key in list(params):
        if key.startswith(("f.prior", "f.posterior")):
            params[key] = np.zeros_like(params[key])
        elif key.startswith("f.inner") and key.endswith(".w0"):
            w = params[key].copy()
            w[-2:] = 0.0  # rows fed by the index u
            params[key] = w
    return layer, params


class TestCif:
    def test_fresh_layer_is_identity(self):
        layer, _ = _layer("cif", 0, perturb=0)
        res = cif_sample(layer, np.array([0.5, 1.0]), np.ones(COND), np.random.default_rng(0))
        assert np.array_equal(res.point, [0.5, 1.0]) and res.delta_logp == 0.0

    @pytest.mark.parametrize("inner", ["realnvp", "maf"])
    def test_degenerate_matches_bijective(self, inner):
        layer, _ = _degenerate_cif(1, inner)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((20, 2))
        cond = rng.standard_normal((20, COND))
        u_free = Tensor(np.zeros((20, 2)))
        y_ref, ld_ref = layer.inner.forward(Tensor(x), Tensor(np.concatenate([cond, u_free.value], 1)))
        res = cif_sample(layer, x, cond, rng)
        assert np.allclose(res.point, y_ref.value, atol=1e-12)
        assert np.allclose(res.delta_logp, ld_ref.value, atol=1e-12)
        inv = cif_inverse_logdensity(layer, y_ref.value, cond, rng)
        assert np.allclose(inv.delta_logp, -ld_ref.value, atol=1e-12)

    def test_same_seed_same_output(self):
        layer, _ = _layer("cif", 2)
        a = cif_sample(layer, np.array([0.1, 0.2]), np.ones(COND), np.random.default_rng(9))
        b = cif_sample(layer, np.array([0.1, 0.2]), np.ones(COND), np.random.default_rng(9))
        assert np.array_equal(a.point, b.point) and a.delta_logp == b.delta_logp

    def test_shared_index_roundtrip(self):
        layer, _ = _layer("cif", 3)
        rng = np.random.default_rng(0)
        z = Tensor(rng.standard_normal((30, 2)))
        cond = Tensor(rng.standard_normal((30, COND)))
        u = Tensor(rng.standard_normal((30, 2)))
        y, d_fwd = layer.forward_with_index(z, cond, u)
        back, d_inv = layer.inverse_with_index(y, cond, u)
        assert np.max(np.abs(back.value - z.value)) < 1e-9
        assert np.max(np.abs(d_fwd.value + d_inv.value)) < 1e-9

    def test_logstd_clamped(self):
        layer, params = _layer("cif", 4)
        last = f"f.prior.b{layer.prior.n_layers - 1}"
        params[last] = params[last] + np.array([0, 0, 1e3, -1e3])
        _, log_std = layer._gaussian(layer.prior, Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, COND))), None)
        assert np.all(np.abs(log_std.value) <= 7.0)

    @staticmethod
    def _marginal_reference(layer, x, cond, n, rng):
        """Importance estimate of the exact layer density with u ~ N(0, I) as proposal."""
        xs = Tensor(np.repeat(x[None], n, axis=0))
        c = Tensor(np.repeat(cond[None], n, axis=0))
        u = Tensor(rng.standard_normal((n, 2)))
        z, ld = layer.inner.inverse(xs, concat_cond(c, u))
        pm, ps = layer._gaussian(layer.prior, z, c, None)
        log_prior = gaussian_log_prob(u, pm, ps).value
        log_prop = -0.5 * np.sum(u.value**2, 1) - math.log(2 * math.pi)
        log_base = -0.5 * np.sum(z.value**2, 1) - math.log(2 * math.pi)
        w = log_base + ld.value + log_prior - log_prop
        top = w.max()
        return top + math.log(np.mean(np.exp(w - top)))

    def test_many_sample_estimate_matches_importance_oracle(self):
        # a mildly perturbed posterior keeps the 1e4-draw estimate's variance small
        layer, _ = _layer("cif", 5, perturb=0.15)
        x = np.array([0.3, -0.4])
        cond = np.array([0.2, -0.1, 0.5])
        base = lambda z: -0.5 * np.sum(z**2, 1) - math.log(2 * math.pi)
        est = cif_log_density_iw(layer, x, cond, base, 10_000, np.random.default_rng(0))
        ref = self._marginal_reference(layer, x, cond, 1_000_000, np.random.default_rng(1))
        assert abs(math.exp(est - ref) - 1.0) < 0.02

    def test_single_sample_is_lower_bound(self):
        layer, _ = _layer("cif", 6, perturb=0.3)
        x = np.array([-0.2, 0.6])
        cond = np.array([0.1, 0.3, -0.2])
        rng = np.random.default_rng(3)
        xs = np.repeat(x[None], 1000, axis=0)
        z, delta = layer.invert(Tensor(xs), Tensor(np.repeat(cond[None], 1000, 0)), Tensor(rng.standard_normal((1000, 2))))
        bound = -0.5 * np.sum(z.value**2, 1) - math.log(2 * math.pi) + delta.value
        ref = self._marginal_reference(layer, x, cond, 200_000, np.random.default_rng(4))
        assert bound.mean() <= ref + 3 * bound.std(ddof=1) / math.sqrt(len(bound))


def concat_cond(c, u):
    from flowchain.numcore import concat

    return concat([c, u])
