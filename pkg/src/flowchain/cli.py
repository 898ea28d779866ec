"""Command-line entry point: ``flowchain <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import chain, data, metrics
from .numcore import count_mlp_calls
from .train import TrainConfig, load_checkpoint, save_checkpoint, train, write_log

log = logging.getLogger("flowchain")


class UsageError(ValueError):
    pass


# defaults per command; a --config JSON may set any of these keys, flags win
DEFAULTS = {
    "gen": {
        "kind": "simfork",
        "seed": 0,
        "n_trajectories": 1000,
        "step": 1.0,
        "noise_std": 0.1,
        "fork_angle": 45.0,
        "p_left": 0.5,
        "speed": 1.0,
        "heading": 0.0,
        "yaw_rate": 0.0,
        "speed_noise": 0.0,
        "yaw_rate_noise": 0.3,
    },
    "train": {
        "seed": 0,
        "mode": "cif",
        "social_pooling": False,
        "epochs": 20,
        "batch_size": 128,
        "lr": 1e-4,
        "patience": 0,
        "val_fraction": 0.1,
        "hidden": 128,
        "depth": 3,
        "enc_hidden": 64,
        "sigma": 0.1,
        "held_out": None,
    },
    "predict": {"seed": 0, "samples": 1000, "best_of": 20, "max_windows": None, "format": "csv"},
    "eval": {
        "seed": 0,
        "samples": 1000,
        "metrics": "ade,fde,logprob",
        "best_of": 20,
        "kde_samples": 1000,
        "grid_size": 32,
        "max_windows": None,
        "held_out": None,
    },
    "bench-update": {"seed": 0, "samples": 100_000, "repetitions": 20, "warmup": 3, "window": 0},
    "export-figure-data": {"seed": 0, "window": 0, "steps": "1,6,12", "grid_size": 200, "samples": 2000, "width": 6.0},
}


def _resolve(command, args) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(loaded)
    for key in DEFAULTS[command]:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _write_resolved(path, command, cfg, extra=None):
    out = {"command": command, **cfg, **(extra or {})}
    Path(path).write_text(json.dumps(out, indent=2, default=str), encoding="utf-8")


def _load_scenes(paths, obs_len, pred_len, held_out=None, want="test"):
    paths = [Path(p) for p in paths]
    if held_out:
        train_set, test_set = data.leave_one_out_split(paths, held_out, obs_len, pred_len)
        return train_set if want == "train" else test_set
    scenes = []
    for p in paths:
        scenes.extend(data.load_trajnet(p, obs_len, pred_len))
    return scenes


def _steps(spec, horizon):
    steps = [int(s) for s in str(spec).split(",") if s.strip()]
    for s in steps:
        if not 1 <= s <= horizon:
            raise UsageError(f"step {s} outside 1..{horizon}")
    return steps


# ---------------------------------------------------------------------------


def cmd_gen(cfg, out):
    rng = np.random.default_rng(cfg["seed"])
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if cfg["kind"] == "simfork":
        sf = data.SimforkConfig(
            n_trajectories=cfg["n_trajectories"],
            step=cfg["step"],
            noise_std=cfg["noise_std"],
            fork_angle=cfg["fork_angle"],
            p_left=cfg["p_left"],
        )
        traj, branch, density = data.gen_simfork(sf, rng)
        sidecar = {"kind": "simfork", "seed": cfg["seed"], "config": data.config_dict(sf), "density": density.to_dict()}
    elif cfg["kind"] == "unicycle":
        uc = data.UnicycleConfig(
            n_trajectories=cfg["n_trajectories"],
            speed=cfg["speed"],
            heading=cfg["heading"],
            yaw_rate=cfg["yaw_rate"],
            speed_noise=cfg["speed_noise"],
            yaw_rate_noise=cfg["yaw_rate_noise"],
        )
        traj = data.gen_unicycle(uc, rng)
        sidecar = {"kind": "unicycle", "seed": cfg["seed"], "config": data.config_dict(uc)}
    else:
        raise UsageError(f"unknown dataset kind {cfg['kind']!r}")
    data.write_trajnet(out, traj, sidecar=sidecar)
    _write_resolved(str(out) + ".resolved.json", "gen", cfg, {"out": str(out)})
    return {"rows": int(traj.shape[0] * traj.shape[1]), "out": str(out)}


def cmd_train(cfg, data_paths, out):
    out = Path(out)
    scenes = _load_scenes(data_paths, 8, 12, cfg["held_out"], want="train")
    tc = TrainConfig(
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        mode=cfg["mode"],
        social_pooling=bool(cfg["social_pooling"]),
        patience=cfg["patience"],
        val_fraction=cfg["val_fraction"],
        hidden=cfg["hidden"],
        depth=cfg["depth"],
        enc_hidden=cfg["enc_hidden"],
        sigma=cfg["sigma"],
    )
    result = train(scenes, tc)
    save_checkpoint(result.model, out)
    write_log(out / "train_log.csv", result.log)
    _write_resolved(out / "resolved_config.json", "train", cfg, {"data": [str(p) for p in data_paths], "out": str(out)})
    return {"best_epoch": result.best_epoch, "val_nll": result.log[result.best_epoch - 1]["val_nll"], "out": str(out)}


def cmd_predict(cfg, checkpoint, data_path, out):
    model = load_checkpoint(checkpoint)
    scenes = data.load_trajnet(data_path, model.obs_len, model.horizon)
    if cfg["max_windows"] is not None:
        scenes = scenes[: cfg["max_windows"]]
    if not scenes:
        raise UsageError(f"{data_path} holds no window of {model.obs_len + model.horizon} positions")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    n_best = min(cfg["best_of"], cfg["samples"])
    with open(out / "trajectories.csv", "w", newline="", encoding="utf-8") as fh:
        tw = csv.writer(fh)
        tw.writerow(["window", "candidate", "step", "x", "y"])
        for w, scene in enumerate(scenes):
            est, _ = chain.predict_scene(model, scene, cfg["samples"], rng)
            if cfg["format"] == "json":
                chain.write_density_json(out / f"density_window{w}.json", est)
            else:
                chain.write_density_csv(out / f"density_window{w}.csv", est)
            for c, traj in enumerate(chain.best_trajectories(est, n_best)):
                for n, (x, y) in enumerate(traj, start=1):
                    tw.writerow([w, c, n, x, y])
    _write_resolved(out / "resolved_config.json", "predict", cfg, {"checkpoint": str(checkpoint), "data": str(data_path)})
    return {"windows": len(scenes), "out": str(out)}


KNOWN_METRICS = ("ade", "fde", "emd", "gauss_emd", "logprob", "kde_logprob")


def cmd_eval(cfg, checkpoint, data_paths, out):
    requested = [m.strip() for m in cfg["metrics"].split(",") if m.strip()]
    for m in requested:
        if m not in KNOWN_METRICS:
            raise UsageError(f"unknown metric {m!r}; known: {', '.join(KNOWN_METRICS)}")
    density = None
    if {"emd", "gauss_emd"} & set(requested):
        sidecars = [data.read_sidecar(p) for p in data_paths]
        if len(data_paths) != 1 or not sidecars[0] or "density" not in sidecars[0]:
            raise UsageError("EMD needs an analytic ground-truth density, which only Simfork data provides")
        density = data.GroundTruthDensity.from_dict(sidecars[0]["density"])
    model = load_checkpoint(checkpoint)
    scenes = _load_scenes(data_paths, model.obs_len, model.horizon, cfg["held_out"])
    if cfg["max_windows"] is not None:
        scenes = scenes[: cfg["max_windows"]]
    rows = evaluate(model, scenes, requested, cfg, density)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "step", "metric", "value"])
        w.writerows(rows)
    summary = summarize(rows, requested)
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    _write_resolved(out / "resolved_config.json", "eval", cfg, {"checkpoint": str(checkpoint), "data": [str(p) for p in data_paths]})
    return summary


def evaluate(model, scenes, requested, cfg, density=None):
    """Per-item metric rows ``(item_id, step, metric, value)``; step 0 marks whole-trajectory metrics."""
    rng = np.random.default_rng(cfg["seed"])
    rows = []
    for i, scene in enumerate(scenes):
        cond = model.condition(scene)
        est, _ = chain.predict(model, cond, scene.obs[-1], cfg["samples"], rng)
        if "ade" in requested or "fde" in requested:
            a, f = metrics.best_of_n(chain.best_trajectories(est, min(cfg["best_of"], est.n_samples)), scene.future)
            if "ade" in requested:
                rows.append((i, 0, "ade", a))
            if "fde" in requested:
                rows.append((i, 0, "fde", f))
        for n in range(1, model.horizon + 1):
            pts = est.step_positions(n)
            if "logprob" in requested:
                rows.append((i, n, "logprob", chain.evaluate_log_density(model, cond, scene.obs[-1], scene.future[n - 1], n)))
            if "kde_logprob" in requested:
                rows.append((i, n, "kde_logprob", metrics.kde_log_density(pts[: cfg["kde_samples"]], scene.future[n - 1])))
            if density is not None:
                spec = metrics.emd_grid_spec([pts], [(density.means[n - 1], density.std)], n=cfg["grid_size"])
                gt = metrics.rasterize_mixture(density.means[n - 1], density.weights, density.std, spec, min_coverage=0.0)
                if "emd" in requested:
                    rows.append((i, n, "emd", metrics.emd(metrics.rasterize_points(pts, spec), gt)))
                if "gauss_emd" in requested:
                    mean, cov = metrics.gaussian_fit(pts)
                    rows.append((i, n, "gauss_emd", metrics.emd(metrics.rasterize_gaussian(mean, cov, spec), gt)))
    return rows


def summarize(rows, requested) -> dict:
    summary = {}
    for m in requested:
        per_item = {}
        for item, step, name, value in rows:
            if name == m:
                per_item.setdefault(item, []).append(value)
        if per_item:
            summary[m] = float(np.mean([np.mean(v) for v in per_item.values()]))
        else:
            summary[m] = None
    return summary


def bench_update(model, scene, n_samples, repetitions, warmup=3, seed=0):
    """Median wall times of predict and update on one scene, plus update MLP calls."""
    if repetitions < 5:
        raise UsageError("need at least 5 repetitions")
    rng = np.random.default_rng(seed)
    cond = model.condition(scene)
    x_t = scene.obs[-1]
    x_new = scene.future[0] if scene.future is not None else x_t
    pred_times, upd_times, calls = [], [], []
    for r in range(warmup + repetitions):
        t0 = time.perf_counter()
        _, cache = chain.predict(model, cond, x_t, n_samples, rng)
        t1 = time.perf_counter()
        with count_mlp_calls() as counted:
            t2 = time.perf_counter()
            chain.update(model, cache, x_new)
            t3 = time.perf_counter()
        if r >= warmup:
            pred_times.append(t1 - t0)
            upd_times.append(t3 - t2)
            calls.append(counted())
    p, u = statistics.median(pred_times), statistics.median(upd_times)
    return {
        "samples": n_samples,
        "repetitions": repetitions,
        "predict_ms": 1e3 * p,
        "update_ms": 1e3 * u,
        "ratio": p / u,
        "update_mlp_calls": int(max(calls)),
    }


def cmd_bench_update(cfg, checkpoint, data_path, out):
    model = load_checkpoint(checkpoint)
    scenes = data.load_trajnet(data_path, model.obs_len, model.horizon)
    report = bench_update(model, scenes[cfg["window"]], cfg["samples"], cfg["repetitions"], cfg["warmup"], cfg["seed"])
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
        _write_resolved(out / "resolved_config.json", "bench-update", cfg, {"checkpoint": str(checkpoint), "data": str(data_path)})
    return report


def figure_grids(model, scene, steps, grid_size, n_samples, width, seed):
    """Dense per-step evaluation of the exact density on square grids.

    Each grid is centered on the step's samples and spans ``width`` sample
    standard deviations (longest axis) on each side.
    """
    rng = np.random.default_rng(seed)
    cond = model.condition(scene)
    est, _ = chain.predict(model, cond, scene.obs[-1], n_samples, rng)
    grids = {}
    for n in steps:
        pts = est.step_positions(n)
        center = pts.mean(axis=0)
        half = width * float(pts.std(axis=0).max())
        spec = metrics.square_grid(center - half, center + half, grid_size)
        c = spec.centers().reshape(-1, 2)
        ld = chain.evaluate_log_density(model, cond, scene.obs[-1], c, n)
        grids[n] = (spec, c, ld)
    return grids


def cmd_export_figure_data(cfg, checkpoint, data_path, out):
    model = load_checkpoint(checkpoint)
    scenes = data.load_trajnet(data_path, model.obs_len, model.horizon)
    scene = scenes[cfg["window"]]
    steps = _steps(cfg["steps"], model.horizon)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    masses = {}
    grids = figure_grids(model, scene, steps, cfg["grid_size"], cfg["samples"], cfg["width"], cfg["seed"])
    for n, (spec, c, ld) in grids.items():
        with open(out / f"grid_step{n}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["ix", "iy", "x", "y", "log_density"])
            nx, ny = spec.shape
            for k, (x, y) in enumerate(c):
                w.writerow([k // ny, k % ny, x, y, ld[k]])
        masses[n] = float(np.exp(ld).sum() * spec.cell**2)
    _write_resolved(out / "resolved_config.json", "export-figure-data", cfg, {"checkpoint": str(checkpoint), "data": str(data_path)})
    return {"steps": steps, "grid_mass": masses, "out": str(out)}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowchain", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with option values; flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("kind", nargs="?", choices=["simfork", "unicycle"])
    common(g)
    g.add_argument("--n-trajectories", dest="n_trajectories", type=int)
    g.add_argument("--noise-std", dest="noise_std", type=float)
    g.add_argument("--fork-angle", dest="fork_angle", type=float)
    g.add_argument("--p-left", dest="p_left", type=float)
    g.add_argument("--yaw-rate", dest="yaw_rate", type=float)
    g.add_argument("--yaw-rate-noise", dest="yaw_rate_noise", type=float)
    g.add_argument("--speed-noise", dest="speed_noise", type=float)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("data", nargs="+")
    common(t)
    t.add_argument("--mode", choices=list(chain.MODES))
    t.add_argument("--social-pooling", dest="social_pooling", action="store_const", const=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--hidden", type=int)
    t.add_argument("--depth", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--held-out", dest="held_out")

    pr = sub.add_parser("predict", help="emit density maps and best-of-N trajectories")
    pr.add_argument("checkpoint")
    pr.add_argument("data")
    common(pr)
    pr.add_argument("--samples", type=int)
    pr.add_argument("--max-windows", dest="max_windows", type=int)
    pr.add_argument("--format", choices=["csv", "json"])

    e = sub.add_parser("eval", help="compute evaluation metrics")
    e.add_argument("checkpoint")
    e.add_argument("data", nargs="+")
    common(e)
    e.add_argument("--metrics")
    e.add_argument("--samples", type=int)
    e.add_argument("--max-windows", dest="max_windows", type=int)
    e.add_argument("--held-out", dest="held_out")

    b = sub.add_parser("bench-update", help="time predict against the fast update")
    b.add_argument("checkpoint")
    b.add_argument("data")
    b.add_argument("--config")
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b.add_argument("--samples", type=int)
    b.add_argument("--repetitions", type=int)
    b.add_argument("--warmup", type=int)
    b.add_argument("--window", type=int)

    f = sub.add_parser("export-figure-data", help="write dense per-step density grids")
    f.add_argument("checkpoint")
    f.add_argument("data")
    common(f)
    f.add_argument("--steps")
    f.add_argument("--window", type=int)
    f.add_argument("--grid-size", dest="grid_size", type=int)
    f.add_argument("--samples", type=int)
    f.add_argument("--width", type=float, help="grid half-width in sample standard deviations")
    return p


def run(argv=None) -> dict:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = _resolve(args.command, args)
    if args.command == "gen":
        return cmd_gen(cfg, args.out)
    if args.command == "train":
        return cmd_train(cfg, args.data, args.out)
    if args.command == "predict":
        return cmd_predict(cfg, args.checkpoint, args.data, args.out)
    if args.command == "eval":
        return cmd_eval(cfg, args.checkpoint, args.data, args.out)
    if args.command == "bench-update":
        return cmd_bench_update(cfg, args.checkpoint, args.data, args.out)
    return cmd_export_figure_data(cfg, args.checkpoint, args.data, args.out)


def main(argv=None) -> int:
    try:
        result = run(argv)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure becomes one structured line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
