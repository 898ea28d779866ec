"""Conditional 2D flow layers: affine coupling, MAF, and the CIF wrapper.

Every transform reports ``delta_logp`` as the log |det J| of the map it
applies, i.e. ``log p(input) - log p(output)``.  For the CIF layer this is
the single-sample variational analogue of that quantity.

Batched methods take ``x`` of shape ``(B, 2)`` and a condition of shape
``(B, C)`` or ``(1, C)``; the latter is broadcast over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numcore import Mlp, Tape, Tensor, concat

SCALE_CLAMP = 5.0
LOGSTD_CLAMP = 7.0
INDEX_DIM = 2
_LOG_2PI = math.log(2.0 * math.pi)


class FlowError(FloatingPointError):
    pass


@dataclass
class TransformResult:
    point: np.ndarray
    delta_logp: np.ndarray | float


def soft_clamp(s: Tensor, bound: float) -> Tensor:
    return (s * (1.0 / bound)).tanh() * bound


def gaussian_log_prob(u: Tensor, mean: Tensor, log_std: Tensor) -> Tensor:
    """Diagonal Gaussian log density summed over the last axis."""
    z = (u - mean) * (-log_std).exp()
    return (z.square() * -0.5 - log_std - 0.5 * _LOG_2PI).sum(axis=-1)


def _check(t: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(t.value)):
        raise FlowError(f"non-finite output from {what}")
    return t


def _col(x: Tensor, i: int) -> Tensor:
    return x[:, i : i + 1]


def _join(first: Tensor, second: Tensor, first_index: int) -> Tensor:
    return concat([first, second]) if first_index == 0 else concat([second, first])


class CouplingLayer:
    """Affine coupling: one coordinate passes through, the other is scaled and shifted."""

    def __init__(self, params, prefix, passed, cond_dim, hidden=128, depth=3, rng=None):
        self.passed = passed
        self.other = 1 - passed
        self.cond_dim = cond_dim
        sizes = [1 + cond_dim] + [hidden] * depth + [1]
        self.scale_net = Mlp(params, f"{prefix}.scale", sizes, rng)
        self.shift_net = Mlp(params, f"{prefix}.shift", sizes, rng)

    def _scale_shift(self, keep, cond, tape):
        h = concat([keep, cond])
        s = soft_clamp(self.scale_net(h, tape), SCALE_CLAMP)
        t = self.shift_net(h, tape)
        return _check(s, "coupling scale net"), _check(t, "coupling shift net")

    def forward(self, x: Tensor, cond: Tensor, tape: Tape | None = None):
        keep, moving = _col(x, self.passed), _col(x, self.other)
        s, t = self._scale_shift(keep, cond, tape)
        out = moving * s.exp() + t
        return _join(keep, out, self.passed), s[:, 0]

    def inverse(self, y: Tensor, cond: Tensor, tape: Tape | None = None):
        keep, moving = _col(y, self.passed), _col(y, self.other)
        s, t = self._scale_shift(keep, cond, tape)
        out = (moving - t) * (-s).exp()
        return _join(keep, out, self.passed), -s[:, 0]


class MafLayer:
    """Two-coordinate autoregressive affine layer.

    Under ``order = (a, b)`` coordinate ``a`` is transformed from the
    condition alone and ``b`` from ``x[a]`` and the condition.  The forward
    map is evaluated in one pass; the inverse solves ``a`` then ``b``.
    """

    def __init__(self, params, prefix, order, cond_dim, hidden=128, depth=3, rng=None):
        self.order = tuple(order)
        self.cond_dim = cond_dim
        first = [cond_dim] + [hidden] * depth + [1]
        second = [1 + cond_dim] + [hidden] * depth + [1]
        self.scale_a = Mlp(params, f"{prefix}.scale_a", first, rng)
        self.shift_a = Mlp(params, f"{prefix}.shift_a", first, rng)
        self.scale_b = Mlp(params, f"{prefix}.scale_b", second, rng)
        self.shift_b = Mlp(params, f"{prefix}.shift_b", second, rng)

    def _first(self, cond, tape):
        s = _check(soft_clamp(self.scale_a(cond, tape), SCALE_CLAMP), "maf scale net")
        return s, _check(self.shift_a(cond, tape), "maf shift net")

    def _second(self, xa, cond, tape):
        h = concat([xa, cond])
        s = _check(soft_clamp(self.scale_b(h, tape), SCALE_CLAMP), "maf scale net")
        return s, _check(self.shift_b(h, tape), "maf shift net")

    def forward(self, x: Tensor, cond: Tensor, tape: Tape | None = None):
        a, b = self.order
        xa, xb = _col(x, a), _col(x, b)
        sa, ta = self._first(cond, tape)
        sb, tb = self._second(xa, cond, tape)
        ya = xa * sa.exp() + ta
        yb = xb * sb.exp() + tb
        return _join(ya, yb, a), (sa + sb)[:, 0]

    def inverse(self, y: Tensor, cond: Tensor, tape: Tape | None = None):
        a, b = self.order
        ya, yb = _col(y, a), _col(y, b)
        sa, ta = self._first(cond, tape)
        xa = (ya - ta) * (-sa).exp()
        sb, tb = self._second(xa, cond, tape)
        xb = (yb - tb) * (-sb).exp()
        return _join(xa, xb, a), -(sa + sb)[:, 0]


class BijectiveFlow:
    """Composition of invertible layers; log-dets add."""

    n_noise = 0

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, cond, tape=None):
        total = None
        for layer in self.layers:
            x, ld = layer.forward(x, cond, tape)
            total = ld if total is None else total + ld
        return x, total

    def inverse(self, y, cond, tape=None):
        total = None
        for layer in reversed(self.layers):
            y, ld = layer.inverse(y, cond, tape)
            total = ld if total is None else total + ld
        return y, total

    # uniform stage interface shared with CifLayer
    def sample(self, z, cond, eps=None, tape=None):
        y, ld = self.forward(z, cond, tape)
        return y, ld

    def invert(self, x, cond, eps=None, tape=None):
        z, ld = self.inverse(x, cond, tape)
        return z, ld


def realnvp(params, prefix, cond_dim, hidden=128, depth=3, rng=None, n_layers=3):
    """Coupling stack whose pass-through coordinate alternates 0, 1, 0, ..."""
    return BijectiveFlow(
        CouplingLayer(params, f"{prefix}.c{i}", i % 2, cond_dim, hidden, depth, rng)
        for i in range(n_layers)
    )


def maf(params, prefix, cond_dim, hidden=128, depth=3, rng=None, n_layers=3):
    return BijectiveFlow(
        MafLayer(params, f"{prefix}.m{i}", (i % 2, 1 - i % 2), cond_dim, hidden, depth, rng)
        for i in range(n_layers)
    )


class CifLayer:
    """Continuously-indexed flow around an inner bijection.

    The inner flow sees ``cond ++ u`` with a 2D index ``u``.  ``prior`` gives
    p(u | z) from the layer input and ``posterior`` gives q(u | x) from the
    layer output; both are diagonal Gaussians with clamped log-std.
    """

    n_noise = INDEX_DIM

    def __init__(self, params, prefix, cond_dim, hidden=128, depth=3, rng=None, inner="realnvp"):
        build = {"realnvp": realnvp, "maf": maf}[inner]
        self.cond_dim = cond_dim
        self.inner = build(params, f"{prefix}.inner", cond_dim + INDEX_DIM, hidden, depth, rng)
        sizes = [2 + cond_dim] + [hidden] * depth + [2 * INDEX_DIM]
        self.prior = Mlp(params, f"{prefix}.prior", sizes, rng)
        self.posterior = Mlp(params, f"{prefix}.posterior", sizes, rng)

    def _gaussian(self, net, point, cond, tape):
        out = _check(net(concat([point, cond]), tape), "cif index network")
        mean = out[:, :INDEX_DIM]
        log_std = soft_clamp(out[:, INDEX_DIM:], LOGSTD_CLAMP)
        return mean, log_std

    def _inner_cond(self, cond, u):
        return concat([cond, u])

    def forward_with_index(self, z, cond, u, tape=None):
        """Inner forward plus the index terms, for a given ``u``."""
        y, ld = self.inner.forward(z, self._inner_cond(cond, u), tape)
        pm, ps = self._gaussian(self.prior, z, cond, tape)
        qm, qs = self._gaussian(self.posterior, y, cond, tape)
        delta = ld - gaussian_log_prob(u, pm, ps) + gaussian_log_prob(u, qm, qs)
        return y, delta

    def inverse_with_index(self, x, cond, u, tape=None):
        z, ld = self.inner.inverse(x, self._inner_cond(cond, u), tape)
        pm, ps = self._gaussian(self.prior, z, cond, tape)
        qm, qs = self._gaussian(self.posterior, x, cond, tape)
        delta = ld + gaussian_log_prob(u, pm, ps) - gaussian_log_prob(u, qm, qs)
        return z, delta

    def sample(self, z, cond, eps, tape=None):
        """Draw ``u = mean + std * eps`` from the prior and push ``z`` forward."""
        pm, ps = self._gaussian(self.prior, z, cond, tape)
        u = pm + ps.exp() * eps
        y, ld = self.inner.forward(z, self._inner_cond(cond, u), tape)
        qm, qs = self._gaussian(self.posterior, y, cond, tape)
        delta = ld - gaussian_log_prob(u, pm, ps) + gaussian_log_prob(u, qm, qs)
        return _check(y, "cif forward"), delta

    def invert(self, x, cond, eps, tape=None):
        """Draw ``u`` from the posterior at ``x`` and invert the inner flow."""
        qm, qs = self._gaussian(self.posterior, x, cond, tape)
        u = qm + qs.exp() * eps
        z, ld = self.inner.inverse(x, self._inner_cond(cond, u), tape)
        pm, ps = self._gaussian(self.prior, z, cond, tape)
        delta = ld + gaussian_log_prob(u, pm, ps) - gaussian_log_prob(u, qm, qs)
        return _check(z, "cif inverse"), delta

    def index_draw(self, which, point, cond, eps):
        net = self.prior if which == "prior" else self.posterior
        m, s = self._gaussian(net, _batch(point), _cond(cond), None)
        return (m + s.exp() * _batch(eps)).value


# ---------------------------------------------------------------------------
# point-level helpers operating on plain arrays


def _batch(x) -> Tensor:
    a = np.asarray(x, dtype=np.float64)
    return Tensor(a.reshape(-1, a.shape[-1]))


def _cond(c) -> Tensor:
    a = np.asarray(c, dtype=np.float64)
    return Tensor(a.reshape(-1, a.shape[-1]) if a.ndim else a.reshape(1, 1))


def _result(point: Tensor, delta: Tensor, single: bool) -> TransformResult:
    p, d = point.value, delta.value
    if single:
        return TransformResult(p[0], float(d[0]))
    return TransformResult(p, d)


def _single(x) -> bool:
    return np.asarray(x).ndim == 1


def coupling_forward(layer: CouplingLayer, x, cond) -> TransformResult:
    y, ld = layer.forward(_batch(x), _cond(cond))
    return _result(y, ld, _single(x))


def coupling_inverse(layer: CouplingLayer, y, cond) -> TransformResult:
    x, ld = layer.inverse(_batch(y), _cond(cond))
    return _result(x, ld, _single(y))


def maf_forward(layer: MafLayer, x, cond) -> TransformResult:
    y, ld = layer.forward(_batch(x), _cond(cond))
    return _result(y, ld, _single(x))


def maf_inverse(layer: MafLayer, y, cond) -> TransformResult:
    x, ld = layer.inverse(_batch(y), _cond(cond))
    return _result(x, ld, _single(y))


def _normals(rng, x):
    n = 1 if _single(x) else np.asarray(x).shape[0]
    return Tensor(rng.standard_normal((n, INDEX_DIM)))


def cif_sample(layer: CifLayer, z, cond, rng) -> TransformResult:
    y, delta = layer.sample(_batch(z), _cond(cond), _normals(rng, z))
    return _result(y, delta, _single(z))


def cif_inverse_logdensity(layer: CifLayer, x, cond, rng) -> TransformResult:
    z, delta = layer.invert(_batch(x), _cond(cond), _normals(rng, x))
    return _result(z, delta, _single(x))


def cif_log_density_iw(layer: CifLayer, x, cond, base_log_prob, k: int, rng) -> float:
    """Importance-weighted log density at one point using ``k`` posterior draws.

    ``base_log_prob`` maps an ``(k, 2)`` array of layer inputs to their log
    density.  With ``k = 1`` this is the single-sample bound; it tightens as
    ``k`` grows.  Intended for diagnostics.
    """
    xs = np.repeat(np.asarray(x, dtype=np.float64).reshape(1, 2), k, axis=0)
    z, delta = layer.invert(Tensor(xs), _cond(cond), Tensor(rng.standard_normal((k, INDEX_DIM))))
    w = base_log_prob(z.value) + delta.value
    top = w.max()
    return float(top + np.log(np.mean(np.exp(w - top))))
