"""Observed-history encoder: GRU over displacements plus optional social pooling."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numcore import Mlp, Tape, Tensor

FRAME_INTERVAL = 0.4


class SceneError(ValueError):
    pass


@dataclass
class Scene:
    """One prediction window for a target agent.

    ``obs`` holds the target's observed positions, the last row being the
    current position x_t.  Each neighbor array holds that agent's positions
    up to and including time t (one or two rows are enough).
    """

    obs: np.ndarray
    future: np.ndarray | None = None
    neighbors: list = field(default_factory=list)
    name: str = ""
    agent_id: int = -1
    frame: int = -1

    @property
    def anchor(self) -> np.ndarray:
        return self.obs[-1]


def relative_normalize(scene: Scene) -> tuple[Scene, np.ndarray]:
    anchor = np.array(scene.obs[-1], dtype=np.float64)
    out = replace(
        scene,
        obs=scene.obs - anchor,
        future=None if scene.future is None else scene.future - anchor,
        neighbors=[nb - anchor for nb in scene.neighbors],
    )
    return out, anchor


def denormalize(scene: Scene, anchor) -> Scene:
    anchor = np.asarray(anchor, dtype=np.float64)
    return replace(
        scene,
        obs=scene.obs + anchor,
        future=None if scene.future is None else scene.future + anchor,
        neighbors=[nb + anchor for nb in scene.neighbors],
    )


def neighbor_features(scene: Scene) -> np.ndarray:
    """Relative position and relative velocity of each neighbor at time t, shape (N, 4)."""
    if not scene.neighbors:
        return np.zeros((0, 4))
    x_t = scene.obs[-1]
    v_t = scene.obs[-1] - scene.obs[-2]
    rows = []
    for nb in scene.neighbors:
        nb = np.asarray(nb, dtype=np.float64)
        vel = nb[-1] - nb[-2] if len(nb) > 1 else np.zeros(2)
        rows.append(np.concatenate([nb[-1] - x_t, vel - v_t]))
    return np.array(rows)


class Encoder:
    def __init__(self, params: dict, obs_len=8, hidden=64, social_pooling=False, rng=None):
        self.params = params
        self.obs_len = obs_len
        self.hidden = hidden
        self.social_pooling = social_pooling
        H = hidden
        if rng is not None:
            bound = np.sqrt(1.0 / H)
            params["enc.gru.wx"] = rng.uniform(-bound, bound, (2, 3 * H))
            params["enc.gru.wh"] = rng.uniform(-bound, bound, (H, 3 * H))
            params["enc.gru.bx"] = np.zeros(3 * H)
            params["enc.gru.bh"] = np.zeros(3 * H)
        self.social = None
        if social_pooling:
            self.social = Mlp(params, "enc.social", [4, H, H], rng, zero_last=False)

    @property
    def dim(self) -> int:
        return self.hidden

    def _p(self, name, tape):
        value = self.params[name]
        return Tensor(value) if tape is None else tape.param(name, value)

    def encode_batch(self, disp, neigh=None, mask=None, tape: Tape | None = None) -> Tensor:
        """Encode displacement sequences ``disp`` of shape (B, T, 2).

        ``neigh`` is a (B, N, 4) array of neighbor features padded along N,
        with ``mask`` (B, N) marking real entries.
        """
        disp = np.asarray(disp, dtype=np.float64)
        B, T, _ = disp.shape
        H = self.hidden
        wx, wh = self._p("enc.gru.wx", tape), self._p("enc.gru.wh", tape)
        bx, bh = self._p("enc.gru.bx", tape), self._p("enc.gru.bh", tape)
        h = Tensor(np.zeros((B, H)))
        for step in range(T):
            gx = Tensor(disp[:, step]) @ wx + bx
            gh = h @ wh + bh
            r = (gx[:, :H] + gh[:, :H]).sigmoid()
            z = (gx[:, H : 2 * H] + gh[:, H : 2 * H]).sigmoid()
            n = (gx[:, 2 * H :] + r * gh[:, 2 * H :]).tanh()
            h = n + z * (h - n)
        if self.social is not None and neigh is not None and neigh.shape[1] > 0:
            emb = self.social(Tensor(neigh), tape)
            m = np.asarray(mask, dtype=np.float64)[..., None]
            counts = np.maximum(m.sum(axis=1), 1.0)
            h = h + (emb * m).sum(axis=1) * (1.0 / counts)
        return h

    def inputs(self, scenes, scale=1.0):
        """Stack scenes into (disp, neigh, mask) arrays in model units."""
        disp = []
        feats = []
        for sc in scenes:
            if len(sc.obs) < self.obs_len:
                raise SceneError(
                    f"history of {len(sc.obs)} positions is shorter than {self.obs_len}"
                )
            obs = np.asarray(sc.obs[-self.obs_len :], dtype=np.float64)
            if not np.all(np.isfinite(obs)):
                raise SceneError("non-finite observed position")
            disp.append(np.diff(obs, axis=0) / scale)
            feats.append(neighbor_features(replace(sc, obs=obs)) / scale)
        n_max = max((len(f) for f in feats), default=0)
        neigh = np.zeros((len(scenes), n_max, 4))
        mask = np.zeros((len(scenes), n_max))
        for i, f in enumerate(feats):
            neigh[i, : len(f)] = f
            mask[i, : len(f)] = 1.0
        return np.array(disp), neigh, mask

    def encode(self, scene: Scene, scale=1.0) -> np.ndarray:
        disp, neigh, mask = self.inputs([scene], scale)
        return self.encode_batch(disp, neigh, mask).value[0]


def encode(scene: Scene, encoder: Encoder, scale=1.0) -> np.ndarray:
    return encoder.encode(scene, scale)


__all__ = [
    "Scene",
    "SceneError",
    "Encoder",
    "encode",
    "relative_normalize",
    "denormalize",
    "neighbor_features",
]
