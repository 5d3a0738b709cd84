"""Command-line front end.

Subcommands mirror the pipeline stages::

    gpmorse sample       collect trajectory data        -> dataset file
    gpmorse fit          fit the GP surrogate           -> model file
    gpmorse analyze      multivalued map + Morse graph  -> run directory
    gpmorse refine       continue refinement rounds     -> updated run dir
    gpmorse ground-truth dense forward propagation      -> truth raster
    gpmorse score        compare estimate vs truth      -> printed metrics

Configuration is a JSON document (see README for the schema and units);
unknown keys are rejected.  Exit codes: 0 success, 2 configuration/schema
error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

SCHEMA_VERSION = 1

_ALLOWED = {
    "": {
        "schema_version", "system", "grid", "dataset", "kernel", "delta",
        "refinement", "goal", "ground_truth", "seed",
    },
    "system": {"name", "tau", "step_size", "parameters", "oracle"},
    "grid": {"lower", "upper", "subdivisions", "cells", "periodic"},
    "dataset": {"initial_count", "mode", "long_total_time", "noise_std"},
    "kernel": {
        "nu", "restarts", "max_iter", "noise_floor_rel2", "refit_every",
        "refit_restarts", "refit_max_iter",
    },
    "delta": {"initial", "final"},
    "refinement": {"points_per_round", "rounds", "scope"},
    "goal": {"lower", "upper"},
    "ground_truth": {"resolution_multiplier", "horizon"},
}


class ConfigError(ValueError):
    pass


def _check_keys(section: str, obj: dict):
    allowed = _ALLOWED[section]
    for key in obj:
        if key not in allowed:
            raise ConfigError(
                f"unknown key {key!r} in config section {section or 'top level'!r}"
            )


def load_config(path, seed_override=None, oracle_override=None):
    """Parse and validate a JSON run configuration into a PipelineConfig."""
    from .dynamics import FlowMapSpec
    from .grid import StateBox
    from .pipeline import (
        DatasetPlan, DeltaSchedule, GridConfig, GroundTruthPlan, KernelPlan,
        PipelineConfig, RefinementPlan,
    )
    from .systems import system_info

    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    _check_keys("", raw)
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"{path}: schema_version must be {SCHEMA_VERSION}"
        )
    sysraw = dict(raw.get("system", {}))
    _check_keys("system", sysraw)
    name = sysraw.get("name")
    if not name:
        raise ConfigError("system.name is required")
    oracle = oracle_override or sysraw.get("oracle")
    info = None
    if name != "external":
        info = system_info(name)
    tau = sysraw.get("tau", info.default_tau if info else None)
    if tau is None:
        raise ConfigError("system.tau is required for external systems")

    gridraw = dict(raw.get("grid", {}))
    _check_keys("grid", gridraw)
    if info is not None:
        gridraw.setdefault("lower", info.bounds.lower.tolist())
        gridraw.setdefault("upper", info.bounds.upper.tolist())
        gridraw.setdefault("periodic", list(info.periodic))
    for req in ("lower", "upper"):
        if req not in gridraw:
            raise ConfigError(f"grid.{req} is required")
    if "subdivisions" not in gridraw and "cells" not in gridraw:
        raise ConfigError("grid needs subdivisions or cells")
    grid_cfg = GridConfig(
        lower=gridraw["lower"],
        upper=gridraw["upper"],
        subdivisions=gridraw.get("subdivisions"),
        cells=gridraw.get("cells"),
        periodic=gridraw.get("periodic"),
    )

    params = dict(sysraw.get("parameters", {}))
    if name == "external" or oracle:
        params.setdefault("dim", len(gridraw["lower"]))
    system = FlowMapSpec(
        system=name,
        tau=float(tau),
        step_size=sysraw.get("step_size"),
        parameters=params,
        oracle_command=oracle,
    )

    def section(key, cls):
        body = dict(raw.get(key, {}))
        _check_keys(key, body)
        return cls(**body)

    ds = section("dataset", DatasetPlan)
    kp = section("kernel", KernelPlan)
    delta_raw = dict(raw.get("delta", {"initial": 0.125}))
    _check_keys("delta", delta_raw)
    delta = DeltaSchedule(**delta_raw)
    refine = section("refinement", RefinementPlan)
    gt = section("ground_truth", GroundTruthPlan)
    goal = None
    if "goal" in raw:
        goalraw = dict(raw["goal"])
        _check_keys("goal", goalraw)
        goal = StateBox(goalraw["lower"], goalraw["upper"])
    elif info is not None:
        goal = info.goal
    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
    try:
        return PipelineConfig(
            system=system, grid=grid_cfg, dataset=ds, kernel=kp, delta=delta,
            refinement=refine, goal=goal, ground_truth=gt, seed=seed,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_hash(path) -> str:
    canon = json.dumps(json.loads(Path(path).read_text()), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


# -- subcommands -----------------------------------------------------------


def cmd_sample(args) -> int:
    from .pipeline import _initial_dataset
    from .systems import make_flow_map

    cfg = load_config(args.config, args.seed, args.oracle)
    if cfg.dataset.initial_count < 1:
        raise ConfigError("dataset.initial_count must be >= 1")
    flow = make_flow_map(cfg.system)
    grid = cfg.grid.build()
    rng = np.random.default_rng(cfg.seed)
    ds = _initial_dataset(cfg, flow, grid, rng)
    ds.save(args.out)
    print(f"wrote {len(ds)} pairs to {args.out}")
    print(f"propagations: {ds.propagation_count}")
    return 0


def cmd_fit(args) -> int:
    from .dynamics import TrajectoryDataset
    from .gp import FitOptions, KernelSpec, fit

    cfg = load_config(args.config, args.seed, args.oracle)
    ds = TrajectoryDataset.load(args.dataset)
    grid = cfg.grid.build()
    if ds.dim != grid.dim:
        raise ConfigError(
            f"dataset dimension {ds.dim} does not match grid dimension {grid.dim}"
        )
    periods = np.where(grid.periodic, grid.periods, 0.0)
    model = fit(
        ds,
        KernelSpec(nu=cfg.kernel.nu, periods=periods),
        FitOptions(
            restarts=cfg.kernel.restarts,
            max_iter=cfg.kernel.max_iter,
            noise_floor_rel2=cfg.kernel.noise_floor_rel2,
        ),
        seed=cfg.seed,
    )
    model.save(args.out)
    for ell, out in enumerate(model.outputs):
        ls = " ".join(f"{v:.6g}" for v in out.kernel.lengthscales)
        print(
            f"output {ell}: lengthscales [{ls}] sigma2 {out.sigma2:.6g} "
            f"noise_rel2 {out.noise_rel2:.3g}"
        )
    print(f"log_likelihood: {model.log_likelihood:.6f}")
    print(f"wrote {args.out}")
    return 0


def _analyze_artifacts(outdir, grid, result, mv, goal):
    from .morse import save_morse_dot, save_raster
    from .morse import roa_for_goal

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    mv.save_edges(outdir / "map_edges.txt")
    save_morse_dot(result, outdir / "morse_graph.dot")
    save_raster(
        grid, result.roa, outdir / "roa.raster",
        legend="-2 escaped; -1 uncertain; >=0 attractor morse-node index",
    )
    if goal is not None:
        nodes, cells = roa_for_goal(result, goal)
        mask = np.zeros(grid.ncells, dtype=np.int64)
        mask[cells] = 1
        save_raster(grid, mask, outdir / "roa_goal.raster", legend="1 inside goal RoA")
        return nodes
    return None


def cmd_analyze(args) -> int:
    from .gp import GpSurrogate
    from .morse import condense, morse_graph, regions_of_attraction
    from .mvmap import build_gp_map, build_true_map
    from .systems import make_flow_map

    cfg = load_config(args.config, args.seed, args.oracle)
    grid = cfg.grid.build()
    delta = args.delta if args.delta is not None else cfg.delta.initial
    if args.mode == "gp":
        if not args.model:
            raise ConfigError("--mode gp requires --model")
        model = GpSurrogate.load(args.model)
        if model.dim != grid.dim:
            raise ConfigError("model dimension does not match grid")
        mv = build_gp_map(grid, model, delta)
        props = 0
    else:
        flow = make_flow_map(cfg.system)
        mv = build_true_map(grid, flow, args.epsilon)
        props = flow.propagations
    result = morse_graph(condense(mv))
    regions_of_attraction(result)
    outdir = args.out or os.path.join("runs", config_hash(args.config))
    nodes = _analyze_artifacts(outdir, grid, result, mv, cfg.resolved_goal())
    print(f"mode: {mv.mode}")
    print(f"morse nodes: {result.n_nodes}")
    print(f"attractors: {len(result.attractor_nodes)}")
    print(f"escaped cells: {len(mv.escaped_cells())}")
    if nodes is not None:
        print(f"goal attractor nodes: {nodes.tolist()}")
    print(f"propagations: {props}")
    print(f"artifacts in {outdir}")
    return 0


def cmd_refine(args) -> int:
    from .dynamics import TrajectoryDataset
    from .gp import FitOptions, GpSurrogate, KernelSpec, fit
    from .morse import condense, load_raster, morse_graph, regions_of_attraction
    from .mvmap import build_gp_map
    from .pipeline import (
        GroundTruthRaster, PipelineError, _sample_refinement_points, score,
    )
    from .grid import CubicalGrid, StateBox
    from .systems import make_flow_map

    cfg = load_config(args.config, args.seed, args.oracle)
    rundir = Path(args.run_dir)
    dataset_path = rundir / "dataset.txt"
    model_path = rundir / "model.txt"
    for p in (dataset_path, model_path):
        if not p.exists():
            raise FileNotFoundError(f"missing prior artifact: {p}")
    grid = cfg.grid.build()
    goal = cfg.resolved_goal()
    dataset = TrajectoryDataset.load(dataset_path)
    model = GpSurrogate.load(model_path)
    flow = make_flow_map(cfg.system)
    rounds = args.rounds if args.rounds is not None else cfg.refinement.rounds
    truth = None
    if args.truth:
        header, vals = load_raster(args.truth)
        fg = CubicalGrid(
            StateBox([d["lower"] for d in header["dim"]], [d["upper"] for d in header["dim"]]),
            [d["cells"] for d in header["dim"]],
            [d["periodic"] for d in header["dim"]],
        )
        truth = GroundTruthRaster(fg, vals.astype(bool), 0)
    rng = np.random.default_rng(cfg.seed + 1 + dataset.propagation_count)
    periods = np.where(grid.periodic, grid.periods, 0.0)
    kernel = KernelSpec(nu=cfg.kernel.nu, periods=periods)
    history_path = rundir / "report.txt"
    mode_lines = []
    result = mv = None
    for r in range(rounds + 1):
        delta = cfg.delta.value(r, rounds) if rounds else cfg.delta.initial
        mv = build_gp_map(grid, model, delta)
        result = morse_graph(condense(mv))
        regions_of_attraction(result)
        sigma_bar = float(np.mean(mv.center_sigma))
        if truth is not None:
            ratio, fp = score(result, truth, goal)
        else:
            ratio = fp = float("nan")
        mode_lines.append(
            f"{r} {delta:.6f} {sigma_bar:.8f} {ratio:.6f} {fp:.6f}"
        )
        if r == rounds:
            break
        xs = _sample_refinement_points(grid, result, goal, cfg.refinement, rng)
        ys = flow.flow_batch(xs)
        dataset = dataset.extended(xs, ys, len(xs))
        if (r + 1) % cfg.kernel.refit_every == 0:
            warm = FitOptions(
                restarts=cfg.kernel.refit_restarts,
                max_iter=cfg.kernel.refit_max_iter,
                noise_floor_rel2=cfg.kernel.noise_floor_rel2,
                init_lengthscales=[o.kernel.lengthscales for o in model.outputs],
                init_noise_rel=[np.sqrt(o.noise_rel2) for o in model.outputs],
            )
            model = fit(dataset, kernel, warm, seed=int(rng.integers(2**31)))
        else:
            model = model.with_data(dataset)
    dataset.save(dataset_path)
    model.save(model_path)
    _analyze_artifacts(rundir, grid, result, mv, goal)
    stamp = "round delta sigma_bar roa_ratio fp_fraction\n" + "\n".join(mode_lines)
    with open(history_path, "a") as fh:
        fh.write(stamp + "\n")
    print(f"refined {rounds} rounds; dataset now {len(dataset)} pairs")
    print(f"propagations: {dataset.propagation_count}")
    print(f"morse nodes: {result.n_nodes}")
    return 0


def cmd_ground_truth(args) -> int:
    from .morse import save_raster
    from .pipeline import ground_truth_roa

    cfg = load_config(args.config, args.seed, args.oracle)
    grid = cfg.grid.build()
    truth = ground_truth_roa(
        cfg.system, cfg.resolved_goal(), grid,
        cfg.ground_truth.resolution_multiplier, cfg.ground_truth.horizon,
    )
    save_raster(
        truth.grid, truth.labels.astype(np.int64), args.out, legend="1 in-RoA"
    )
    print(f"in-RoA fraction: {truth.labels.mean():.4f}")
    print(f"ground-truth propagations: {truth.propagations}")
    if truth.diverged:
        print(f"diverged rollouts: {truth.diverged}")
    print(f"wrote {args.out}")
    return 0


def cmd_score(args) -> int:
    from .morse import load_raster

    est_hdr, est_vals = load_raster(args.est)
    tr_hdr, tr_vals = load_raster(args.truth)
    est_cells = [d["cells"] for d in est_hdr["dim"]]
    tr_cells = [d["cells"] for d in tr_hdr["dim"]]
    if len(est_cells) != len(tr_cells) or any(
        t % e for e, t in zip(est_cells, tr_cells)
    ):
        raise ConfigError("truth raster does not refine the estimate raster")
    mult = [t // e for e, t in zip(est_cells, tr_cells)]
    # map each fine cell to its coarse cell (dimension 0 fastest)
    tr_shape = tr_cells
    idx = np.arange(len(tr_vals))
    coarse = np.zeros(len(tr_vals), dtype=np.int64)
    stride = 1
    rem = idx
    for d, (tc, m) in enumerate(zip(tr_shape, mult)):
        md = (rem % tc) // m
        rem = rem // tc
        coarse += md * stride
        stride *= est_cells[d]
    est = est_vals[coarse] > 0
    true = tr_vals > 0
    n_true = int(true.sum())
    ratio = 1.0 if (n_true == 0 and not est.any()) else (
        float((est & true).sum()) / n_true if n_true else 0.0
    )
    fp = float((est & ~true).sum()) / len(true)
    print(f"roa_ratio: {ratio:.6f}")
    print(f"fp_fraction: {fp:.6f}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(f"roa_ratio {ratio:.6f}\nfp_fraction {fp:.6f}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gpmorse",
        description="Attractors and regions of attraction via GP surrogates and Morse graphs",
    )
    ap.add_argument(
        "--threads",
        type=int,
        default=os.environ.get("GPMORSE_THREADS"),
        help="cap worker/BLAS threads (default: env GPMORSE_THREADS)",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", "-c", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument(
            "--oracle", default=None,
            help="external dynamics oracle command (spawned subprocess)",
        )

    p = sub.add_parser("sample", help="collect trajectory data")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("fit", help="fit the GP surrogate")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("analyze", help="build the map and Morse graph")
    common(p)
    p.add_argument("--mode", choices=("gp", "true"), default="gp")
    p.add_argument("--model", help="model file (gp mode)")
    p.add_argument("--delta", type=float, default=None, help="confidence parameter")
    p.add_argument("--epsilon", type=float, default=0.0, help="true-map padding")
    p.add_argument("--out", default=None, help="output directory (default runs/<hash>)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("refine", help="continue refinement rounds")
    common(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--truth", default=None, help="truth raster for per-round scores")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("ground-truth", help="dense forward-propagation raster")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ground_truth)

    p = sub.add_parser("score", help="compare an estimate raster against truth")
    p.add_argument("--est", required=True, help="roa_goal.raster from analyze")
    p.add_argument("--truth", required=True, help="raster from ground-truth")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_score)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .dynamics import NonFiniteStateError
    from .gp import FitError
    from .oracle import OracleError
    from .pipeline import PipelineError

    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(args.threads)):
                return args.func(args)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FitError, PipelineError, NonFiniteStateError, OracleError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
