"""Per-stage negative log-likelihood training and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .chain import MANIFEST_VERSION, MODES, FlowChainModel
from .data import data_scale
from .flows import FlowError
from .numcore import Adam, Tape, Tensor, backward, concat, load_params, save_params

log = logging.getLogger(__name__)

DIVERGENCE_NLL = 1e6


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-4
    epochs: int = 20
    seed: int = 0
    mode: str = "cif"
    social_pooling: bool = False
    patience: int = 0
    val_fraction: float = 0.1
    hidden: int = 128
    depth: int = 3
    enc_hidden: int = 64
    sigma: float = 0.1
    scale: float | None = None

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        for name in ("batch_size", "epochs", "hidden", "depth", "enc_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.sigma <= 0 or self.patience < 0:
            raise ValueError("lr and sigma must be positive, patience non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class Batch:
    disp: np.ndarray
    neigh: np.ndarray
    mask: np.ndarray
    targets: np.ndarray  # (B, T_f, 2) future offsets from x_t in model units

    def __len__(self):
        return len(self.targets)


def make_batch(model: FlowChainModel, scenes) -> Batch:
    disp, neigh, mask = model.encoder.inputs(scenes, model.scale)
    targets = np.array([(s.future[: model.horizon] - s.obs[-1]) / model.scale for s in scenes])
    if targets.shape[1] != model.horizon:
        raise ValueError(f"scenes carry {targets.shape[1]} future steps, model needs {model.horizon}")
    return Batch(disp, neigh, mask, targets)


def stage_log_probs(model: FlowChainModel, batch: Batch, rng, tape: Tape | None = None):
    """Per-step log p(ground truth at step n | history), each of shape (B,).

    For step n the point is inverted through stage n with that stage's
    parameters on the tape, then through stages n-1 .. 1 with their
    parameters held constant, so stage parameters only see their own
    step's loss.  The encoder and the base sigma are shared.
    """
    B = len(batch)
    T = model.horizon
    cond = model.encoder.encode_batch(batch.disp, batch.neigh, batch.mask, tape)
    rows = acc = None
    blocks = 0
    for m in range(T, 0, -1):
        stage = model.stages[m - 1]
        noise = stage.n_noise
        fresh = Tensor(batch.targets[:, m - 1])
        eps = Tensor(rng.standard_normal((B, noise))) if noise else None
        try:
            z_new, d_new = stage.invert(fresh, cond, eps, tape)
            if rows is None:
                rows, acc = z_new, d_new
            else:
                cond_rep = concat([cond] * blocks, axis=0) if blocks > 1 else cond
                eps = Tensor(rng.standard_normal((B * blocks, noise))) if noise else None
                z_old, d_old = stage.invert(rows, cond_rep, eps, None)
                rows = concat([z_old, z_new], axis=0)
                acc = concat([acc + d_old, d_new], axis=0)
        except FlowError as exc:
            raise TrainingError(f"non-finite value at stage {m}: {exc}") from exc
        blocks += 1

    if tape is None:
        log_sigma = Tensor(model.params["base.log_sigma"])
    else:
        log_sigma = tape.param("base.log_sigma", model.params["base.log_sigma"])
    zs = rows * (-log_sigma).exp()
    base = (zs.square() * -0.5 - log_sigma - 0.5 * math.log(2 * math.pi)).sum(axis=-1)
    logp = acc + base
    # blocks are ordered T, T-1, ..., 1
    return [logp[(T - n) * B : (T - n + 1) * B] for n in range(1, T + 1)]


def nll_loss(model: FlowChainModel, batch: Batch, rng, tape: Tape | None = None):
    """``(total, per_stage)`` where per_stage[n-1] = -mean log p at step n."""
    per_stage = [-lp.mean() for lp in stage_log_probs(model, batch, rng, tape)]
    for n, loss in enumerate(per_stage, start=1):
        if not np.isfinite(loss.value):
            raise TrainingError(f"non-finite loss at stage {n}")
    total = per_stage[0]
    for loss in per_stage[1:]:
        total = total + loss
    return total, per_stage


def loss_and_grads(model: FlowChainModel, batch: Batch, rng):
    tape = Tape()
    total, per_stage = nll_loss(model, batch, rng, tape)
    grads = backward(tape, total)
    return float(total.value), [float(l.value) for l in per_stage], grads


def evaluate_nll(model: FlowChainModel, scenes, seed=0, batch_size=512) -> float:
    """Mean per-trajectory total NLL (summed over stages) with fixed CIF noise."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for lo in range(0, len(scenes), batch_size):
        batch = make_batch(model, scenes[lo : lo + batch_size])
        t, _ = nll_loss(model, batch, rng)
        total += float(t.value) * len(batch)
        count += len(batch)
    return total / max(count, 1)


def split_validation(scenes, fraction, rng):
    if fraction <= 0 or len(scenes) < 2:
        return list(scenes), []
    order = rng.permutation(len(scenes))
    n_val = max(1, int(round(fraction * len(scenes))))
    val = [scenes[i] for i in order[:n_val]]
    train = [scenes[i] for i in order[n_val:]]
    return train, val


def batches(n_items, batch_size, rng):
    order = rng.permutation(n_items)
    return [order[i : i + batch_size] for i in range(0, n_items, batch_size)]


@dataclass
class TrainResult:
    model: FlowChainModel
    log: list
    best_epoch: int
    final_model: FlowChainModel


def build_model(cfg: TrainConfig, scale=1.0, horizon=12, obs_len=8) -> FlowChainModel:
    return FlowChainModel(
        mode=cfg.mode,
        obs_len=obs_len,
        horizon=horizon,
        hidden=cfg.hidden,
        depth=cfg.depth,
        enc_hidden=cfg.enc_hidden,
        social_pooling=cfg.social_pooling,
        sigma=cfg.sigma,
        seed=cfg.seed,
        scale=scale,
    )


def train(scenes, cfg: TrainConfig, val_scenes=None, model=None, progress=None) -> TrainResult:
    """Adam over shuffled mini-batches; returns the best-validation model.

    ``progress`` is called with each log row if given.
    """
    cfg.validate()
    if not scenes:
        raise TrainingError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    if val_scenes is None:
        scenes, val_scenes = split_validation(list(scenes), cfg.val_fraction, rng)
    if not scenes:
        raise TrainingError("no training scenes left after the validation split")
    if model is None:
        scale = cfg.scale if cfg.scale is not None else data_scale(scenes)
        horizon = len(scenes[0].future)
        model = build_model(cfg, scale, horizon, len(scenes[0].obs))
    params = dict(model.params)
    opt = Adam(lr=cfg.lr)
    monitor = val_scenes if val_scenes else scenes

    best = (math.inf, -1, params)
    rows = []
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        epoch_loss, n_seen = 0.0, 0
        for idx in batches(len(scenes), cfg.batch_size, rng):
            current = model.with_params(params)
            batch = make_batch(current, [scenes[i] for i in idx])
            total, per_stage, grads = loss_and_grads(current, batch, rng)
            if not math.isfinite(total) or total > DIVERGENCE_NLL:
                raise TrainingError(
                    f"training diverged at epoch {epoch}: NLL {total:.4g}, per-stage {np.round(per_stage, 3).tolist()}"
                )
            params = opt.step(params, grads)
            epoch_loss += total * len(idx)
            n_seen += len(idx)
        current = model.with_params(params)
        val = evaluate_nll(current, monitor, seed=cfg.seed + 1)
        row = {
            "epoch": epoch,
            "train_nll": epoch_loss / n_seen,
            "val_nll": val,
            "wall_time": time.perf_counter() - t0,
        }
        rows.append(row)
        log.info("epoch %d train %.4f val %.4f (%.1fs)", epoch, row["train_nll"], val, row["wall_time"])
        if progress is not None:
            progress(row)
        if val < best[0]:
            best = (val, epoch, params)
            stale = 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break
    return TrainResult(model.with_params(best[2]), rows, best[1], model.with_params(params))


def write_log(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_nll", "val_nll", "wall_time"])
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# checkpoints: a directory holding params.bin and manifest.json


def save_checkpoint(model: FlowChainModel, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_params(path / "params.bin", model.params)
    (path / "manifest.json").write_text(json.dumps(model.manifest(), indent=2), encoding="utf-8")


def load_checkpoint(path) -> FlowChainModel:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ValueError(f"{path}: missing manifest.json") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: corrupt manifest") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {manifest.get('version')}")
    if manifest.get("n_stages") != manifest.get("T_f"):
        raise ValueError(f"{path}: manifest T_f={manifest.get('T_f')} but {manifest.get('n_stages')} stages")
    params, _ = load_params(path / "params.bin")
    n_stages = len({k.split(".")[0] for k in params if k.startswith("stage")})
    if n_stages != manifest["T_f"]:
        raise ValueError(f"{path}: manifest T_f={manifest['T_f']} but parameters hold {n_stages} stages")
    return FlowChainModel(
        mode=manifest["mode"],
        obs_len=manifest["T_o"],
        horizon=manifest["T_f"],
        hidden=manifest["hidden"],
        depth=manifest["depth"],
        enc_hidden=manifest["enc_hidden"],
        social_pooling=manifest["social_pooling"],
        seed=manifest["seed"],
        scale=manifest["scale"],
        params=params,
    )


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
