"""Synthetic generators (Simfork, unicycle), TrajNet text ingestion and splits."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .encoder import FRAME_INTERVAL, Scene

OBS_LEN = 8
PRED_LEN = 12


class DataFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Simfork


@dataclass
class SimforkConfig:
    n_trajectories: int = 1000
    obs_len: int = OBS_LEN
    pred_len: int = PRED_LEN
    step: float = 1.0
    noise_std: float = 0.1
    fork_angle: float = 45.0
    p_left: float = 0.5

    def validate(self):
        for name in ("n_trajectories", "obs_len", "pred_len", "step"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.noise_std < 0 or self.fork_angle <= 0:
            raise ValueError("noise_std must be >= 0 and fork_angle > 0")
        if not 0.0 < self.p_left < 1.0:
            raise ValueError("p_left must lie in (0, 1)")


@dataclass
class GroundTruthDensity:
    """Per-step two-component isotropic Gaussian mixture.

    ``means`` has shape (T_f, 2, 2): step, branch (left, right), xy.
    """

    means: np.ndarray
    weights: np.ndarray
    std: float

    def log_pdf(self, n: int, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        d = pts[..., None, :] - self.means[n - 1]
        var = self.std**2
        comp = -0.5 * np.sum(d * d, axis=-1) / var - math.log(2 * math.pi * var)
        comp = comp + np.log(self.weights)
        top = comp.max(axis=-1, keepdims=True)
        return (top + np.log(np.exp(comp - top).sum(axis=-1, keepdims=True)))[..., 0]

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "weights": self.weights.tolist(), "std": self.std}

    @classmethod
    def from_dict(cls, d) -> GroundTruthDensity:
        return cls(np.asarray(d["means"], dtype=np.float64), np.asarray(d["weights"], dtype=np.float64), float(d["std"]))


def simfork_skeleton(cfg: SimforkConfig) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free left and right polylines, each (obs_len + pred_len, 2).

    The straight part runs along +x and ends at the origin, which is the
    last observed position; branches leave it at +/- fork_angle.
    """
    obs_x = (np.arange(cfg.obs_len) - (cfg.obs_len - 1)) * cfg.step
    straight = np.stack([obs_x, np.zeros(cfg.obs_len)], axis=-1)
    k = np.arange(1, cfg.pred_len + 1)[:, None] * cfg.step
    a = math.radians(cfg.fork_angle)
    left = np.concatenate([straight, k * np.array([math.cos(a), math.sin(a)])])
    right = np.concatenate([straight, k * np.array([math.cos(a), -math.sin(a)])])
    return left, right


def gen_simfork(cfg: SimforkConfig, rng):
    """Return ``(trajectories, branch, density)``.

    ``trajectories`` is (N, T_o + T_f, 2); ``branch`` is 1 for left and 0
    for right; ``density`` holds the analytic future-step mixtures.
    """
    cfg.validate()
    left, right = simfork_skeleton(cfg)
    branch = (rng.random(cfg.n_trajectories) < cfg.p_left).astype(int)
    base = np.where(branch[:, None, None] == 1, left, right)
    noise = rng.standard_normal(base.shape) * cfg.noise_std
    traj = base + noise
    means = np.stack([left[cfg.obs_len :], right[cfg.obs_len :]], axis=1)
    density = GroundTruthDensity(means, np.array([cfg.p_left, 1.0 - cfg.p_left]), max(cfg.noise_std, 1e-12))
    return traj, branch, density


# ---------------------------------------------------------------------------
# unicycle


@dataclass
class UnicycleConfig:
    n_trajectories: int = 1000
    length: int = OBS_LEN + PRED_LEN
    speed: float = 1.0
    heading: float = 0.0
    yaw_rate: float = 0.0
    speed_noise: float = 0.0
    yaw_rate_noise: float = 0.3
    dt: float = FRAME_INTERVAL

    def validate(self):
        if self.n_trajectories <= 0 or self.length < 2:
            raise ValueError("need at least one trajectory of two positions")
        if self.speed < 0 or self.speed_noise < 0 or self.yaw_rate_noise < 0 or self.dt <= 0:
            raise ValueError("speed, noise stds and dt must be non-negative (dt positive)")


def gen_unicycle(cfg: UnicycleConfig, rng) -> np.ndarray:
    """Integrate the unicycle model exactly over each step, (N, length, 2).

    Speed and yaw rate are redrawn each step as ``nominal + noise``.
    """
    cfg.validate()
    n, T = cfg.n_trajectories, cfg.length
    pos = np.zeros((n, T, 2))
    theta = np.full(n, float(cfg.heading))
    for i in range(1, T):
        v = np.maximum(cfg.speed + cfg.speed_noise * rng.standard_normal(n), 0.0)
        w = cfg.yaw_rate + cfg.yaw_rate_noise * rng.standard_normal(n)
        new_theta = theta + w * cfg.dt
        small = np.abs(w) < 1e-9
        safe_w = np.where(small, 1.0, w)
        dx = np.where(small, v * cfg.dt * np.cos(theta), v / safe_w * (np.sin(new_theta) - np.sin(theta)))
        dy = np.where(small, v * cfg.dt * np.sin(theta), v / safe_w * (np.cos(theta) - np.cos(new_theta)))
        pos[:, i, 0] = pos[:, i - 1, 0] + dx
        pos[:, i, 1] = pos[:, i - 1, 1] + dy
        theta = new_theta
    return pos


# ---------------------------------------------------------------------------
# TrajNet text format: "frame agent x y" per line


def write_trajnet(path, trajectories, frame_step: int = 1, separate=True, sidecar: dict | None = None):
    """Write (N, T, 2) trajectories.

    With ``separate`` each trajectory gets its own frame range so agents
    never co-occur (no spurious neighbors).
    """
    traj = np.asarray(trajectories, dtype=np.float64)
    n, T, _ = traj.shape
    with open(path, "w", encoding="utf-8") as fh:
        for a in range(n):
            start = a * T if separate else 0
            for i in range(T):
                x, y = traj[a, i]
                fh.write(f"{(start + i) * frame_step}\t{a}\t{float(x)!r}\t{float(y)!r}\n")
    if sidecar is not None:
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")


def read_sidecar(path) -> dict | None:
    p = Path(str(path) + ".json")
    if not p.exists():
        return None
    return json.loads(p.read_text(encoding="utf-8"))


def _parse(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                frame = float(parts[0])
                agent = float(parts[1])
                x, y = float(parts[2]), float(parts[3])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if not (math.isfinite(x) and math.isfinite(y)) or frame != int(frame) or agent != int(agent):
                raise DataFormatError(f"{path}:{lineno}: invalid value")
            rows.append((int(frame), int(agent), x, y, lineno))
    return rows


def load_tracks(path) -> tuple[dict, int]:
    """Per-agent ``(frames, positions)`` and the dataset's frame interval."""
    tracks: dict[int, list] = {}
    for frame, agent, x, y, lineno in _parse(path):
        tr = tracks.setdefault(agent, [])
        if tr and frame <= tr[-1][0]:
            raise DataFormatError(f"{path}:{lineno}: frames of agent {agent} are not increasing")
        tr.append((frame, x, y))
    diffs = Counter()
    for tr in tracks.values():
        f = np.array([r[0] for r in tr])
        diffs.update(np.diff(f).tolist())
    interval = diffs.most_common(1)[0][0] if diffs else 1
    out = {}
    for agent, tr in tracks.items():
        arr = np.array(tr, dtype=np.float64)
        out[agent] = (arr[:, 0].astype(int), arr[:, 1:])
    return out, int(interval)


def _segments(frames, interval):
    """Split index ranges at gaps."""
    breaks = np.nonzero(np.diff(frames) != interval)[0] + 1
    bounds = [0, *breaks.tolist(), len(frames)]
    return list(zip(bounds[:-1], bounds[1:]))


def load_trajnet(path, obs_len=OBS_LEN, pred_len=PRED_LEN, name=None) -> list[Scene]:
    """Slide windows of ``obs_len + pred_len`` positions over every gap-free track.

    Neighbors are the other agents present at the window's current frame,
    with their position at that frame and the one before when available.
    """
    tracks, interval = load_tracks(path)
    name = Path(path).stem if name is None else name
    index = {}
    for agent, (frames, pos) in tracks.items():
        for f, p in zip(frames, pos):
            index.setdefault(int(f), {})[agent] = p
    win = obs_len + pred_len
    scenes = []
    for agent in sorted(tracks):
        frames, pos = tracks[agent]
        for lo, hi in _segments(frames, interval):
            for s in range(lo, hi - win + 1):
                t_idx = s + obs_len - 1
                frame_t = int(frames[t_idx])
                neighbors = []
                for other, p in sorted(index.get(frame_t, {}).items()):
                    if other == agent:
                        continue
                    prev = index.get(frame_t - interval, {}).get(other)
                    neighbors.append(np.array([prev, p]) if prev is not None else np.array([p]))
                scenes.append(
                    Scene(
                        obs=pos[s : t_idx + 1].copy(),
                        future=pos[t_idx + 1 : s + win].copy(),
                        neighbors=neighbors,
                        name=name,
                        agent_id=int(agent),
                        frame=frame_t,
                    )
                )
    return scenes


def scenes_from_trajectories(traj, obs_len=OBS_LEN, name="") -> list[Scene]:
    traj = np.asarray(traj, dtype=np.float64)
    return [
        Scene(obs=t[:obs_len].copy(), future=t[obs_len:].copy(), name=name, agent_id=i, frame=obs_len - 1)
        for i, t in enumerate(traj)
    ]


def leave_one_out_split(scene_files, held_out: str, obs_len=OBS_LEN, pred_len=PRED_LEN):
    """Train on every scene file except ``held_out`` (matched by file stem)."""
    files = {Path(p).stem: Path(p) for p in scene_files}
    if held_out not in files:
        raise KeyError(f"unknown scene {held_out!r}; available: {sorted(files)}")
    train, test = [], []
    for stem in sorted(files):
        scenes = load_trajnet(files[stem], obs_len, pred_len, name=stem)
        (test if stem == held_out else train).extend(scenes)
    return train, test


def data_scale(scenes) -> float:
    """Median step length over observed segments, used to make steps O(1)."""
    steps = np.concatenate([np.linalg.norm(np.diff(s.obs, axis=0), axis=-1) for s in scenes])
    steps = steps[steps > 0]
    return float(np.median(steps)) if len(steps) else 1.0


def config_dict(cfg) -> dict:
    return asdict(cfg)
