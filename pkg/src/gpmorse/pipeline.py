"""End-to-end orchestration: data, surrogate, Morse graph, refinement, scoring.

A run collects trajectory data, fits the surrogate, builds the
pointwise-confidence map and its Morse graph at the scheduled confidence,
and optionally refines: each round draws new initial states (globally or
from the current target RoA and its one-cell boundary shell), propagates
them with the true dynamics, refits, rebuilds, and re-scores.  Ground-truth
rasters are computed by dense forward propagation with a budget kept apart
from the method's propagation count.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    ContinuousFlowMap,
    DiscreteFlowMap,
    FlowMapSpec,
    TrajectoryDataset,
    decompose_long_trajectory,
    rk4,
    sample_short_trajectories,
)
from .gp import FitOptions, GpSurrogate, KernelSpec, fit
from .grid import OUTSIDE, CubicalGrid, StateBox
from .morse import MorseGraphResult, condense, morse_graph, regions_of_attraction, roa_for_goal
from .mvmap import build_gp_map
from .systems import make_flow_map, system_info


class PipelineError(RuntimeError):
    """A refinement round could not proceed (e.g. the target RoA emptied)."""


@dataclass
class GridConfig:
    """Analysis grid: bounds, per-dim cell counts, periodic flags.

    ``subdivisions`` gives power-of-two cell counts ``2**k``; ``cells`` gives
    explicit counts.  Exactly one of the two must be set.
    """

    lower: list
    upper: list
    subdivisions: list | None = None
    cells: list | None = None
    periodic: list | None = None

    def build(self) -> CubicalGrid:
        if (self.subdivisions is None) == (self.cells is None):
            raise ValueError("grid config needs exactly one of subdivisions/cells")
        box = StateBox(self.lower, self.upper)
        if self.subdivisions is not None:
            return CubicalGrid.from_subdivisions(box, self.subdivisions, self.periodic)
        return CubicalGrid(box, self.cells, self.periodic)


@dataclass
class DatasetPlan:
    """How the initial dataset is collected (counts are true propagations)."""

    initial_count: int = 300
    mode: str = "short"  # "short" | "long"
    long_total_time: float | None = None
    noise_std: float = 0.0

    def __post_init__(self):
        if self.initial_count < 1:
            raise ValueError("initial_count must be >= 1")
        if self.mode not in ("short", "long"):
            raise ValueError("dataset mode must be 'short' or 'long'")
        if self.mode == "long" and not self.long_total_time:
            raise ValueError("long mode needs long_total_time")


@dataclass
class KernelPlan:
    """Surrogate kernel family and fit/refit effort."""

    nu: float = 2.5
    restarts: int = 8
    max_iter: int = 200
    noise_floor_rel2: float = 1e-8
    refit_every: int = 1
    refit_restarts: int = 1
    refit_max_iter: int = 30


@dataclass
class DeltaSchedule:
    """Confidence parameter per round, interpolated linearly."""

    initial: float
    final: float | None = None

    def __post_init__(self):
        for v in (self.initial, self.final):
            if v is not None and not 0.0 < v < 1.0:
                raise ValueError("delta values must lie in (0, 1)")

    def value(self, round_index: int, rounds: int) -> float:
        if self.final is None or rounds == 0:
            return self.initial
        t = round_index / rounds
        return self.initial + (self.final - self.initial) * t


@dataclass
class RefinementPlan:
    points_per_round: int = 0
    rounds: int = 0
    scope: str = "global"  # "global" | "target_roa"

    def __post_init__(self):
        if self.rounds < 0 or self.points_per_round < 0:
            raise ValueError("refinement counts must be non-negative")
        if self.rounds > 0 and self.points_per_round < 1:
            raise ValueError("points_per_round must be >= 1 when refining")
        if self.scope not in ("global", "target_roa"):
            raise ValueError("scope must be 'global' or 'target_roa'")


@dataclass
class GroundTruthPlan:
    resolution_multiplier: int = 2
    horizon: float = 30.0

    def __post_init__(self):
        if self.resolution_multiplier < 2:
            raise ValueError("resolution_multiplier must be >= 2")
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")


@dataclass
class PipelineConfig:
    system: FlowMapSpec
    grid: GridConfig
    dataset: DatasetPlan = field(default_factory=DatasetPlan)
    kernel: KernelPlan = field(default_factory=KernelPlan)
    delta: DeltaSchedule = field(default_factory=lambda: DeltaSchedule(0.125))
    refinement: RefinementPlan = field(default_factory=RefinementPlan)
    goal: StateBox | None = None
    ground_truth: GroundTruthPlan = field(default_factory=GroundTruthPlan)
    seed: int = 0

    def __post_init__(self):
        if self.refinement.scope == "target_roa" and self.goal is None:
            raise ValueError("target_roa sampling requires a goal box")

    def resolved_goal(self) -> StateBox:
        if self.goal is not None:
            return self.goal
        return system_info(self.system.system).goal


@dataclass
class EvaluationReport:
    """Scores of a run: accuracy, false positives, and data cost."""

    roa_ratio: float
    fp_fraction: float
    propagation_count: int
    morse_node_count: int
    attractor_count: int
    history: list  # rows: (round, delta, sigma_bar, roa_ratio, fp_fraction)
    ground_truth_propagations: int = 0

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("# gpmorse-report 1\n")
            fh.write(f"roa_ratio {self.roa_ratio:.6f}\n")
            fh.write(f"fp_fraction {self.fp_fraction:.6f}\n")
            fh.write(f"propagation_count {self.propagation_count}\n")
            fh.write(f"morse_node_count {self.morse_node_count}\n")
            fh.write(f"attractor_count {self.attractor_count}\n")
            fh.write(f"ground_truth_propagations {self.ground_truth_propagations}\n")
            fh.write(f"rounds {len(self.history) - 1}\n")
            fh.write("round delta sigma_bar roa_ratio fp_fraction\n")
            for row in self.history:
                fh.write(
                    "%d %.6f %.8f %.6f %.6f\n"
                    % (row[0], row[1], row[2], row[3], row[4])
                )


@dataclass
class RunResult:
    surrogate: GpSurrogate
    morse: MorseGraphResult
    report: EvaluationReport
    grid: CubicalGrid
    dataset: TrajectoryDataset
    mvmap: object
    truth: "GroundTruthRaster"


@dataclass
class GroundTruthRaster:
    """In-RoA labels on a refined grid, from dense forward propagation."""

    grid: CubicalGrid
    labels: np.ndarray  # bool per fine cell
    propagations: int
    diverged: int = 0


def ground_truth_roa(
    system: FlowMapSpec,
    goal: StateBox,
    grid: CubicalGrid,
    resolution_multiplier: int = 2,
    horizon: float = 30.0,
) -> GroundTruthRaster:
    """Forward-propagate every fine-cell center until goal entry or timeout.

    The fine grid refines the analysis grid by ``resolution_multiplier`` per
    dimension.  Goal entry is checked every integrator step (every map step
    for discrete systems), so the criterion does not depend on the analysis
    resolution.  Uses its own flow-map instance: the propagation budget stays
    separate from the method's.
    """
    if resolution_multiplier < 2:
        raise ValueError("resolution multiplier must be >= 2")
    flow = make_flow_map(system)
    fine = CubicalGrid(grid.bounds, grid.cells * resolution_multiplier, grid.periodic)
    pts = fine.all_centers()
    labels = np.zeros(fine.ncells, dtype=bool)
    diverged = np.zeros(fine.ncells, dtype=bool)

    def in_goal(states):
        w = _wrap_columns(states, fine)
        ok = np.ones(len(states), dtype=bool)
        for d in range(fine.dim):
            ok &= (w[:, d] >= goal.lower[d]) & (w[:, d] <= goal.upper[d])
        return ok

    active = np.arange(fine.ncells)
    states = pts.copy()
    labels[in_goal(states)] = True
    active = active[~labels[active]]
    states = pts[active]
    steps_done = 0
    if isinstance(flow, DiscreteFlowMap):
        h, n_steps, per_step = flow.tau, int(np.floor(horizon / flow.tau + 1e-9)), 1.0
    else:
        h = flow.step_size
        n_steps = int(np.ceil(horizon / h - 1e-9))
        per_step = h / flow.tau
    substeps = 0
    while len(active) and steps_done < n_steps:
        if isinstance(flow, DiscreteFlowMap):
            states = flow.apply(states)
        else:
            states = rk4(flow.rhs, states, h, h)
        substeps += len(active)
        steps_done += 1
        finite = np.all(np.isfinite(states), axis=1)
        if not np.all(finite):
            diverged[active[~finite]] = True
            states = states[finite]
            active = active[finite]
            if not len(active):
                break
        hit = in_goal(states)
        if np.any(hit):
            labels[active[hit]] = True
            states = states[~hit]
            active = active[~hit]
    props = int(np.ceil(substeps * per_step))
    return GroundTruthRaster(fine, labels, props, int(diverged.sum()))


def _wrap_columns(states: np.ndarray, grid: CubicalGrid) -> np.ndarray:
    out = states.copy()
    for d in np.nonzero(grid.periodic)[0]:
        P = grid.periods[d]
        out[:, d] = grid.lower[d] + np.mod(out[:, d] - grid.lower[d], P)
    return out


def score(
    result: MorseGraphResult, truth: GroundTruthRaster, goal: StateBox
) -> tuple[float, float]:
    """RoA ratio and false-positive fraction against a ground-truth raster.

    Volumes are measured on the fine raster by containment of fine-cell
    centers in analysis cells.  ``roa_ratio`` is estimated-and-true over
    true; ``fp_fraction`` is estimated-not-true over the whole space.
    """
    grid = result.condensation.mvmap.grid
    if not np.array_equal(truth.grid.cells % grid.cells, np.zeros(grid.dim, dtype=np.int64)):
        raise ValueError("truth raster does not refine the analysis grid")
    nodes, cells = roa_for_goal(result, goal)
    est_mask_cells = np.zeros(grid.ncells, dtype=bool)
    est_mask_cells[cells] = True
    loc = grid.locate_batch(truth.grid.all_centers())
    inside = loc != OUTSIDE
    est = np.zeros(truth.grid.ncells, dtype=bool)
    est[inside] = est_mask_cells[loc[inside]]
    true = truth.labels
    n_true = int(true.sum())
    if n_true == 0:
        ratio = 1.0 if not est.any() else 0.0
    else:
        ratio = float((est & true).sum()) / n_true
    fp = float((est & ~true).sum()) / truth.grid.ncells
    return ratio, fp


def _initial_dataset(cfg: PipelineConfig, flow, grid: CubicalGrid, rng) -> TrajectoryDataset:
    plan = cfg.dataset
    region = grid.bounds
    if plan.mode == "short":
        ds = sample_short_trajectories(flow, region, plan.initial_count, rng, plan.noise_std)
    else:
        parts: list[TrajectoryDataset] = []
        have = 0
        calls = 0
        while have < plan.initial_count:
            x0 = rng.uniform(region.lower, region.upper)
            piece = decompose_long_trajectory(flow, x0, plan.long_total_time)
            parts.append(piece)
            have += len(piece)
            calls += piece.propagation_count
        x = np.vstack([p.x for p in parts])[: plan.initial_count]
        y = np.vstack([p.y for p in parts])[: plan.initial_count]
        if plan.noise_std > 0.0:
            y = y + rng.normal(0.0, plan.noise_std, size=y.shape)
        ds = TrajectoryDataset(x, y, calls, tau=flow.tau)
    ds.system = cfg.system.system
    return ds


def _sample_refinement_points(
    grid: CubicalGrid, result: MorseGraphResult, goal: StateBox, plan: RefinementPlan, rng
) -> np.ndarray:
    n = plan.points_per_round
    if plan.scope == "global":
        return rng.uniform(grid.lower, grid.upper, size=(n, grid.dim))
    nodes, cells = roa_for_goal(result, goal)
    if len(cells) == 0:
        raise PipelineError("target RoA is empty; cannot sample refinement points")
    shell = grid.neighbor_shell(cells)
    n_shell = n // 2 if len(shell) else 0
    n_core = n - n_shell
    chosen = [cells[rng.integers(0, len(cells), size=n_core)]]
    if n_shell:
        chosen.append(shell[rng.integers(0, len(shell), size=n_shell)])
    chosen = np.concatenate(chosen)
    lows = grid.lower + grid.multi_index(chosen) * grid.cell_widths
    return lows + rng.uniform(0.0, 1.0, size=(n, grid.dim)) * grid.cell_widths


def run(config: PipelineConfig) -> RunResult:
    """Execute the full estimation loop; deterministic for a fixed seed."""
    flow = make_flow_map(config.system)
    grid = config.grid.build()
    if flow.dim != grid.dim:
        raise ValueError("system and grid dimensions differ")
    goal = config.resolved_goal()
    rng = np.random.default_rng(config.seed)
    kplan = config.kernel
    periods = np.where(grid.periodic, grid.periods, 0.0)
    kernel = KernelSpec(nu=kplan.nu, periods=periods)

    dataset = _initial_dataset(config, flow, grid, rng)
    options = FitOptions(
        restarts=kplan.restarts,
        max_iter=kplan.max_iter,
        noise_floor_rel2=kplan.noise_floor_rel2,
    )
    model = fit(dataset, kernel, options, seed=int(rng.integers(2**31)))

    truth = ground_truth_roa(
        config.system,
        goal,
        grid,
        config.ground_truth.resolution_multiplier,
        config.ground_truth.horizon,
    )

    rounds = config.refinement.rounds
    history = []
    mv = result = None
    for r in range(rounds + 1):
        delta = config.delta.value(r, rounds)
        mv = build_gp_map(grid, model, delta)
        result = morse_graph(condense(mv))
        regions_of_attraction(result)
        ratio, fp = score(result, truth, goal)
        sigma_bar = float(np.mean(mv.center_sigma))
        history.append((r, delta, sigma_bar, ratio, fp))
        if r == rounds:
            break
        xs = _sample_refinement_points(grid, result, goal, config.refinement, rng)
        ys = flow.flow_batch(xs)
        if config.dataset.noise_std > 0.0:
            ys = ys + rng.normal(0.0, config.dataset.noise_std, size=ys.shape)
        dataset = dataset.extended(xs, ys, len(xs))
        if (r + 1) % kplan.refit_every == 0:
            warm = FitOptions(
                restarts=kplan.refit_restarts,
                max_iter=kplan.refit_max_iter,
                noise_floor_rel2=kplan.noise_floor_rel2,
                init_lengthscales=[o.kernel.lengthscales for o in model.outputs],
                init_noise_rel=[np.sqrt(o.noise_rel2) for o in model.outputs],
            )
            model = fit(dataset, kernel, warm, seed=int(rng.integers(2**31)))
        else:
            model = model.with_data(dataset)

    report = EvaluationReport(
        roa_ratio=history[-1][3],
        fp_fraction=history[-1][4],
        propagation_count=dataset.propagation_count,
        morse_node_count=result.n_nodes,
        attractor_count=len(result.attractor_nodes),
        history=history,
        ground_truth_propagations=truth.propagations,
    )
    return RunResult(model, result, report, grid, dataset, mv, truth)


def config_to_dict(config: PipelineConfig) -> dict:
    """Plain-dict view of a config (stable key order for hashing)."""
    d = dataclasses.asdict(config)
    if config.goal is not None:
        d["goal"] = {
            "lower": config.goal.lower.tolist(),
            "upper": config.goal.upper.tolist(),
        }
    return d
