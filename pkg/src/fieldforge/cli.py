"""``fieldforge`` command line: fits, ablations, sweeps and exports.

Exit codes: 0 success, 1 configuration or usage error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .diffcore import NonFiniteError
from .runner import (is_success, quality_of, rebuild, run_task, write_alpha_map, write_csv, write_run_artifacts,
                     write_surface)
from .tasks import DivergenceError

log = logging.getLogger("fieldforge")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


def _out_dir(args, cfg: ExperimentConfig, default: str) -> Path:
    out = Path(args.out or cfg.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _shapes(cfg: ExperimentConfig) -> list[str]:
    return list(cfg.ablation.shapes) or [cfg.task.shape]


def _safe_run(cfg: ExperimentConfig, seed: int, shape: str | None = None):
    """``(quality, result, status)``; numeric failures become status rows."""
    try:
        res = run_task(cfg, seed, shape)
    except (DivergenceError, NonFiniteError, FloatingPointError) as exc:
        log.warning("run failed (seed %s, shape %s): %s", seed, shape, exc)
        return float("nan"), None, "failed"
    return quality_of(res, cfg), res, "ok"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_fit(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args, cfg, "runs/fit")
    res = run_task(cfg, cfg.seed)
    write_run_artifacts(res, cfg, out, cfg.seed)
    q = cfg.task.quality
    print(f"{q} = {res.report.metrics[q]:.6g}  ({res.report.wall_time:.1f}s)  -> {out}")
    return EXIT_OK


def cmd_ablate_alpha0(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args, cfg, "runs/ablate_alpha0")
    values = cfg.ablation.alpha0
    if len(values) < 2:
        raise ConfigError("ablation.alpha0 needs at least two values")
    rows = []
    for a0 in values:
        run_cfg = copy.deepcopy(cfg)
        run_cfg.precond.enabled = True
        run_cfg.precond.adaptive = False
        run_cfg.precond.alpha0 = a0
        for shape in _shapes(cfg):
            for seed in cfg.seeds:
                q, _, status = _safe_run(run_cfg, seed, shape)
                rows.append([a0, shape, seed, q, status])
    # relative quality: each run over the alpha0 = 0 run of the same shape and seed
    base = {(r[1], r[2]): r[3] for r in rows if r[0] == 0.0}
    summary = []
    for a0 in values:
        qs = np.array([r[3] for r in rows if r[0] == a0])
        rel = np.array([r[3] / base[(r[1], r[2])] if (r[1], r[2]) in base else np.nan for r in rows if r[0] == a0])
        summary.append([a0, _nanmean(qs), _nanmean(rel)])
    h = cfg.hash()
    q = cfg.task.quality
    write_csv(out / "ablate_alpha0.csv", ["alpha0", "shape", "seed", q, "status"], rows, h, cfg.seed)
    write_csv(out / "ablate_alpha0_mean.csv", ["alpha0", f"mean_{q}", f"mean_relative_{q}"], summary, h, cfg.seed)
    for a0, m, rel in summary:
        print(f"alpha0={a0:<8g} mean {q}={m:.6g} relative={rel:.4g}")
    return EXIT_OK


def _nanmean(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    return float(np.nanmean(v)) if np.isfinite(v).any() else float("nan")


def cmd_ablate_noise(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args, cfg, "runs/ablate_noise")
    rows = []
    variants = [("none", False)] + [(k, True) for k in cfg.ablation.kernels]
    for kernel, enabled in variants:
        run_cfg = copy.deepcopy(cfg)
        run_cfg.precond.enabled = enabled
        run_cfg.precond.adaptive = False
        if enabled:
            run_cfg.precond.kernel = kernel
        for shape in _shapes(cfg):
            for seed in cfg.seeds:
                q, _, status = _safe_run(run_cfg, seed, shape)
                rows.append([kernel, shape, seed, q, status])
    write_csv(out / "ablate_noise.csv", ["kernel", "shape", "seed", cfg.task.quality, "status"], rows,
              cfg.hash(), cfg.seed)
    for kernel, _ in variants:
        qs = [r[3] for r in rows if r[0] == kernel]
        print(f"{kernel:<17} median {cfg.task.quality}={np.nanmedian(qs):.6g}")
    return EXIT_OK


def cmd_ablate_samples(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args, cfg, "runs/ablate_samples")
    rows = []
    for count in cfg.ablation.samples:
        run_cfg = copy.deepcopy(cfg)
        run_cfg.precond.enabled = True
        run_cfg.precond.samples = count
        for shape in _shapes(cfg):
            for seed in cfg.seeds:
                q, res, status = _safe_run(run_cfg, seed, shape)
                wall = res.report.wall_time if res else float("nan")
                sp_wall = res.report.sp_wall_time if res else float("nan")
                rows.append([count, shape, seed, q, wall, sp_wall, status])
    write_csv(out / "ablate_samples.csv",
              ["samples", "shape", "seed", cfg.task.quality, "wall_time", "sp_wall_time", "status"],
              rows, cfg.hash(), cfg.seed)
    for count in cfg.ablation.samples:
        sel = [r for r in rows if r[0] == count]
        print(f"samples={count} mean {cfg.task.quality}={np.nanmean([r[3] for r in sel]):.6g} "
              f"sp_time={np.nanmean([r[5] for r in sel]):.2f}s")
    return EXIT_OK


SWEEP_AXES = ("lr", "hash_lr", "max_resolution", "table_size_log2")


def sweep_cells(cfg: ExperimentConfig) -> list[tuple]:
    s = cfg.sweep
    return list(itertools.product(s.lr, s.hash_lr, s.max_resolution, s.table_size_log2))


def cell_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence(master, spawn_key=(index,)).generate_state(1)[0])


def _sweep_job(job):
    cfg, index, cell, sp = job
    lr, hash_lr, max_res, tsl = cell
    run_cfg = copy.deepcopy(cfg)
    run_cfg.optim.lr = lr
    run_cfg.optim.hash_lr = hash_lr
    hg = run_cfg.field.hashgrid
    hg.max_resolution = max_res
    hg.base_resolution = min(hg.base_resolution, max_res)
    hg.table_size_log2 = tsl
    run_cfg.precond.enabled = sp
    seed = cell_seed(cfg.seed, index)
    try:
        q, _, status = _safe_run(run_cfg, seed)
    except Exception as exc:  # a crashed cell must still produce its row
        log.warning("sweep cell %d crashed: %s", index, exc)
        q, status = float("nan"), "failed"
    ok = status == "ok" and is_success(q, cfg)
    return [index, lr, hash_lr, max_res, tsl, int(sp), seed, q, int(ok), status]


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args, cfg, "runs/sweep")
    jobs = [(cfg, i, cell, sp) for i, cell in enumerate(sweep_cells(cfg)) for sp in (True, False)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    header = ["cell", *SWEEP_AXES, "sp", "seed", cfg.task.quality, "success", "status"]
    write_csv(out / "sweep.csv", header, rows, cfg.hash(), cfg.seed)
    for sp in (1, 0):
        n_ok = sum(r[8] for r in rows if r[5] == sp)
        print(f"SP {'on ' if sp else 'off'}: {n_ok}/{len(rows) // 2} cells succeeded")
    return EXIT_OK


def cmd_extract(args, cfg: ExperimentConfig) -> int:
    if not args.checkpoint:
        raise ConfigError("extract needs --checkpoint")
    if cfg.task.kind == "image":
        raise ConfigError("task.kind image has no level set to extract")
    out = _out_dir(args, cfg, "runs/extract")
    field_, _ = rebuild(cfg, args.checkpoint)
    surface = write_surface(field_, cfg, out)
    print(f"extracted {len(surface.vertices)} vertices -> {out}")
    return EXIT_OK


def cmd_export_alpha_map(args, cfg: ExperimentConfig) -> int:
    if not args.checkpoint:
        raise ConfigError("export-alpha-map needs --checkpoint")
    out = _out_dir(args, cfg, "runs/alpha_map")
    _, grid = rebuild(cfg, args.checkpoint, require_alpha=True)
    alpha = np.maximum(grid.values(), 0.0)
    write_alpha_map(alpha, out, cfg.hash(), cfg.seed)
    print(f"alpha map min={alpha.min():.4g} max={alpha.max():.4g} -> {out}")
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "ablate-alpha0": cmd_ablate_alpha0,
    "ablate-noise": cmd_ablate_noise,
    "ablate-samples": cmd_ablate_samples,
    "sweep": cmd_sweep,
    "extract": cmd_extract,
    "export-alpha-map": cmd_export_alpha_map,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fieldforge", description="Stochastic preconditioning for neural fields.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="experiment TOML file")
    p.add_argument("--seed", type=int, default=None, help="overrides the config and FIELDFORGE_SEED")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs for sweep")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--checkpoint", default=None, help="checkpoint for extract / export-alpha-map")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.seed)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
