"""The flow chain: per-step densities, trajectory sampling and the fast update.

All public functions work in world coordinates.  Internally the flows act
on offsets from the newest observed position x_t divided by the model's
data scale; the ``- 2 log(scale)`` Jacobian of that normalization is added
back to every reported log density.

Densities are stored step-major, ``positions[n - 1, s]`` being the step-n
position of sample ``s``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .encoder import Encoder, Scene
from .flows import CifLayer, FlowError, realnvp
from .numcore import Tensor

MODES = ("cif", "bijective", "maf")
MANIFEST_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)


class HorizonExhausted(RuntimeError):
    pass


def gaussian_logpdf(points, mean, sigma) -> np.ndarray:
    """log N(points; mean, diag(sigma^2)) over the last axis."""
    d = (np.asarray(points) - mean) / sigma
    return -0.5 * np.sum(d * d, axis=-1) - np.sum(np.log(sigma)) - _LOG_2PI


class FlowChainModel:
    """Encoder, one flow stage per future step, and the base log-std.

    Building without ``params`` initializes fresh weights from ``seed``;
    passing ``params`` wraps existing arrays (shapes are validated).
    """

    def __init__(
        self,
        mode="cif",
        obs_len=8,
        horizon=12,
        hidden=128,
        depth=3,
        enc_hidden=64,
        social_pooling=False,
        sigma=0.1,
        seed=0,
        scale=1.0,
        params=None,
    ):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        self.obs_len = obs_len
        self.horizon = horizon
        self.hidden = hidden
        self.depth = depth
        self.enc_hidden = enc_hidden
        self.social_pooling = social_pooling
        self.seed = seed
        self.scale = float(scale)

        fresh = {}
        self._build(fresh, np.random.default_rng(seed))
        fresh["base.log_sigma"] = np.full(2, math.log(sigma))
        if params is None:
            self.params = fresh
        else:
            missing = set(fresh) - set(params)
            extra = set(params) - set(fresh)
            if missing or extra:
                raise ValueError(
                    f"parameter set mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}"
                )
            for k, v in fresh.items():
                if np.shape(params[k]) != v.shape:
                    raise ValueError(f"parameter {k!r} has shape {np.shape(params[k])}, expected {v.shape}")
            self.params = dict(params)
        self._build(self.params, None)

    def _build(self, params, rng):
        self.encoder = Encoder(params, self.obs_len, self.enc_hidden, self.social_pooling, rng)
        c = self.encoder.dim
        self.stages = []
        for n in range(1, self.horizon + 1):
            prefix = f"stage{n}"
            if self.mode == "bijective":
                st = realnvp(params, prefix, c, self.hidden, self.depth, rng)
            else:
                inner = "realnvp" if self.mode == "cif" else "maf"
                st = CifLayer(params, prefix, c, self.hidden, self.depth, rng, inner=inner)
            self.stages.append(st)

    @property
    def sigma(self) -> np.ndarray:
        """Base standard deviation in model units."""
        return np.exp(self.params["base.log_sigma"])

    @property
    def cond_dim(self) -> int:
        return self.encoder.dim

    def stage_keys(self, n: int):
        prefix = f"stage{n}."
        return [k for k in self.params if k.startswith(prefix)]

    def with_params(self, params) -> FlowChainModel:
        out = object.__new__(FlowChainModel)
        out.__dict__.update(self.__dict__)
        out.params = dict(params)
        out._build(out.params, None)
        return out

    def manifest(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "mode": self.mode,
            "T_o": self.obs_len,
            "T_f": self.horizon,
            "n_stages": len(self.stages),
            "hidden": self.hidden,
            "depth": self.depth,
            "enc_hidden": self.enc_hidden,
            "social_pooling": self.social_pooling,
            "sigma": self.sigma.tolist(),
            "scale": self.scale,
            "seed": self.seed,
        }

    def condition(self, scene: Scene) -> np.ndarray:
        return self.encoder.encode(scene, self.scale)


@dataclass
class DensityEstimate:
    """Samples and log densities for steps ``start_step .. T_f``.

    ``positions`` always covers every step (shape ``(T_f, S, 2)``) so it can
    be shared with the cache; ``log_density`` only covers the valid steps.
    """

    positions: np.ndarray
    log_density: np.ndarray
    anchor: np.ndarray
    cond: np.ndarray
    start_step: int = 1

    @property
    def horizon(self) -> int:
        return self.positions.shape[0]

    @property
    def n_samples(self) -> int:
        return self.positions.shape[1]

    @property
    def steps(self):
        return range(self.start_step, self.horizon + 1)

    def _check_step(self, n):
        if not self.start_step <= n <= self.horizon:
            raise ValueError(f"step {n} outside {self.start_step}..{self.horizon}")

    def step_positions(self, n: int) -> np.ndarray:
        self._check_step(n)
        return self.positions[n - 1]

    def step_log_density(self, n: int) -> np.ndarray:
        self._check_step(n)
        return self.log_density[n - self.start_step]


@dataclass
class MotionTrendCache:
    """Everything the update needs: positions, per-stage log-density increments, base draws.

    ``increments[n - 1, s]`` is log |det d f_n^{-1}| at sample ``s`` (the
    Eq.-6 style summand).  ``k`` counts updates already applied.
    """

    positions: np.ndarray
    increments: np.ndarray
    z: np.ndarray
    sigma: np.ndarray
    anchor: np.ndarray
    k: int = 0


def _check_finite(arr, n):
    if not np.all(np.isfinite(arr)):
        raise FlowError(f"non-finite value produced by stage {n}")


def predict(model: FlowChainModel, cond, x_t, n_samples: int, rng, chunk=16384):
    """Sample ``n_samples`` trajectories and their per-step log densities.

    Returns ``(DensityEstimate, MotionTrendCache)``.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    sigma = model.sigma
    if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
        raise ValueError(f"invalid base sigma {sigma}")
    x_t = np.asarray(x_t, dtype=np.float64)
    cond_t = Tensor(np.asarray(cond, dtype=np.float64).reshape(1, -1))
    T = model.horizon
    scale = model.scale

    eps0 = rng.standard_normal((n_samples, 2))
    offsets0 = eps0 * sigma
    z = x_t + scale * offsets0
    world_sigma = sigma * scale
    base = gaussian_logpdf(z, x_t, world_sigma)

    positions = np.empty((T, n_samples, 2))
    increments = np.empty((T, n_samples))
    for lo in range(0, n_samples, chunk):
        hi = min(lo + chunk, n_samples)
        cur = Tensor(offsets0[lo:hi])
        for n, stage in enumerate(model.stages, start=1):
            eps = Tensor(rng.standard_normal((hi - lo, stage.n_noise))) if stage.n_noise else None
            try:
                cur, delta = stage.sample(cur, cond_t, eps)
            except FlowError as exc:
                raise FlowError(f"stage {n}: {exc}") from exc
            _check_finite(delta.value, n)
            positions[n - 1, lo:hi] = x_t + scale * cur.value
            increments[n - 1, lo:hi] = -delta.value
    log_density = base + np.cumsum(increments, axis=0)
    estimate = DensityEstimate(positions, log_density, x_t, np.asarray(cond), 1)
    cache = MotionTrendCache(positions, increments, z, world_sigma, x_t, 0)
    return estimate, cache


def update(model: FlowChainModel, cache: MotionTrendCache, x_new):
    """Re-anchor a prediction on a newly observed position without any flow evaluation.

    The Gaussian N(x_new, sigma) replaces the density of the oldest
    remaining step; its values at the cached positions plus the cached
    increments of later stages give the new densities.
    """
    k = cache.k
    T = cache.positions.shape[0]
    if k + 1 >= T:
        raise HorizonExhausted(
            f"cache already advanced {k} times over a {T}-step horizon; run predict again"
        )
    x_new = np.asarray(x_new, dtype=np.float64)
    base = gaussian_logpdf(cache.positions[k], x_new, cache.sigma)
    log_density = base + np.cumsum(cache.increments[k + 1 :], axis=0)
    estimate = DensityEstimate(cache.positions, log_density, cache.anchor, None, k + 2)
    return estimate, replace(cache, k=k + 1)


# ---------------------------------------------------------------------------
# deterministic per-point noise for CIF evaluation

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & _M64
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _M64
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _M64
    return x ^ (x >> np.uint64(31))


def hashed_normals(points, seed: int, step: int, stage: int) -> np.ndarray:
    """Two standard normals per point, a pure function of (point, seed, step, stage)."""
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2)
    bits = pts.view(np.uint64)
    key = np.array([(seed * 1_000_003 + step * 1009 + stage) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _splitmix(bits[:, 0] ^ _splitmix(bits[:, 1] ^ _splitmix(key)))
        a = _splitmix(h ^ np.uint64(1))
        b = _splitmix(h ^ np.uint64(2))
    u1 = (a >> np.uint64(11)).astype(np.float64) * 2.0**-53
    u2 = (b >> np.uint64(11)).astype(np.float64) * 2.0**-53
    r = np.sqrt(-2.0 * np.log1p(-u1))
    return np.stack([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)], axis=-1)


def evaluate_log_density(model: FlowChainModel, cond, x_t, point, n: int, rng=None, *, updates=0, x_new=None):
    """Log density of ``point`` at step ``n`` by inverting stages ``n .. 1``.

    With ``updates = k > 0`` this evaluates the density the fast update
    produces after ``k`` updates, the last one anchored at ``x_new``:
    stages ``n .. k + 1`` are inverted and the Gaussian N(x_new, sigma) is
    applied at the step-``k`` position.

    CIF stages use the single-sample bound; without ``rng`` the index noise
    is derived from the point itself so repeated calls agree.
    """
    if not 1 <= n <= model.horizon:
        raise ValueError(f"step {n} outside 1..{model.horizon}")
    if not 0 <= updates < n:
        raise ValueError(f"cannot evaluate step {n} after {updates} updates")
    x_t = np.asarray(x_t, dtype=np.float64)
    pts = np.asarray(point, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    cond_t = Tensor(np.asarray(cond, dtype=np.float64).reshape(1, -1))
    scale = model.scale

    cur = Tensor((pts - x_t) / scale)
    total = np.zeros(len(pts))
    for m in range(n, updates, -1):
        stage = model.stages[m - 1]
        eps = None
        if stage.n_noise:
            noise = rng.standard_normal((len(pts), 2)) if rng is not None else hashed_normals(pts, model.seed, n, m)
            eps = Tensor(noise)
        try:
            cur, delta = stage.invert(cur, cond_t, eps)
        except FlowError as exc:
            raise FlowError(f"stage {m}: {exc}") from exc
        _check_finite(delta.value, m)
        total += delta.value
    center = np.zeros(2) if updates == 0 else (np.asarray(x_new, dtype=np.float64) - x_t) / scale
    out = total + gaussian_logpdf(cur.value, center, model.sigma) - 2.0 * math.log(scale)
    return float(out[0]) if single else out


def density_map(estimate: DensityEstimate, n: int):
    """``(points, density)`` pairs of step ``n``."""
    return estimate.step_positions(n), np.exp(estimate.step_log_density(n))


def best_trajectories(estimate: DensityEstimate, count: int) -> np.ndarray:
    """The first ``count`` sampled trajectories, shape ``(count, T_f, 2)``."""
    if count > estimate.n_samples:
        raise ValueError(f"asked for {count} trajectories but only {estimate.n_samples} were sampled")
    return np.swapaxes(estimate.positions[:, :count], 0, 1)


# ---------------------------------------------------------------------------
# export

DENSITY_COLUMNS = ("step", "sample_id", "x", "y", "log_density")


def density_rows(estimate: DensityEstimate, prefix=()):
    for n in estimate.steps:
        pos = estimate.step_positions(n)
        ld = estimate.step_log_density(n)
        for s in range(estimate.n_samples):
            yield (*prefix, n, s, float(pos[s, 0]), float(pos[s, 1]), float(ld[s]))


def write_density_csv(path, estimate: DensityEstimate) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(DENSITY_COLUMNS)
        w.writerows(density_rows(estimate))


def write_density_json(path, estimate: DensityEstimate) -> None:
    rows = [dict(zip(DENSITY_COLUMNS, r)) for r in density_rows(estimate)]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rows, fh)


# ---------------------------------------------------------------------------
# scene-level conveniences


def predict_scene(model: FlowChainModel, scene: Scene, n_samples: int, rng):
    cond = model.condition(scene)
    return predict(model, cond, scene.obs[-1], n_samples, rng)


def scene_log_density(model: FlowChainModel, scene: Scene, cond=None, rng=None) -> np.ndarray:
    """Log density of each ground-truth future position at its own step."""
    if scene.future is None:
        raise ValueError("scene has no ground-truth future")
    cond = model.condition(scene) if cond is None else cond
    return np.array(
        [
            evaluate_log_density(model, cond, scene.obs[-1], scene.future[n - 1], n, rng)
            for n in range(1, model.horizon + 1)
        ]
    )
