"""Test-time fusion loop: alternate hierarchy search and local adjustment.

A FusionSession owns one fusion problem. Input part groups are concatenated,
normalized to unit scene diagonal, and bootstrapped into a single hierarchy
(per-group trees joined by an adjacency chain). Each step runs hierarchy
inference (never objective-increasing) followed by one adjustment cascade;
in strict mode an adjustment that raises the objective is rolled back, so the
whole trace is non-increasing. Synthesis steps are exempt from rollback and
reset the convergence counter, since they change the problem itself.

The benchmark harness sweeps noise, separation, or ablation grids over seeded
merge tasks and reports one row per task and iteration.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .adjust import AdjustConfig, dock_parts, local_adjust
from .geometry import OBB, SceneTransform, normalize_scene, obb_to_params
from .inference import SamplerConfig, infer_hierarchy, structure_objective
from .rng import SeededRng
from .rvnn import AblationFlags, ModelBundle
from .sceneio import BENCHMARK_HEADER as CSV_HEADER
from .structure import Hierarchy, greedy_build, link_groups
from .synthdata import FAMILIES, MergeTask, make_merge_task, sample_shape


class DriverError(ValueError):
    pass


class EmptyInput(DriverError):
    """fuse needs at least one group with at least one box."""


@dataclass(frozen=True)
class StopRule:
    """Converged when relative improvement stays below rel_tol for patience
    consecutive iterations, or at the hard cap."""

    rel_tol: float = 1e-3
    patience: int = 3
    max_iterations: int = 50


@dataclass
class FusionConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    adjust: AdjustConfig = field(default_factory=AdjustConfig)
    flags: AblationFlags = field(default_factory=AblationFlags)
    stop: StopRule = field(default_factory=StopRule)
    strict: bool = True
    dock: bool = False
    seed: int = 0
    keep_history: bool = False


@dataclass
class IterationRecord:
    iteration: int
    objective_infer: float
    objective: float
    rolled_back: bool
    synthesized_nodes: list[int]
    parts: int
    boxes: list[OBB] | None = None
    source_map: dict[int, int] | None = None


def _bootstrap(groups) -> tuple[list[OBB], Hierarchy, list[int]]:
    if not groups:
        raise EmptyInput("no part groups")
    boxes: list[OBB] = []
    trees: list[Hierarchy] = []
    for gi, (gboxes, gh) in enumerate(groups):
        if not gboxes:
            raise EmptyInput(f"group {gi} is empty")
        if gh is None:
            gh = greedy_build(gboxes)
        else:
            gh.validate(expect_parts=len(gboxes))
        boxes.extend(gboxes)
        trees.append(gh)
    if len(trees) == 1:
        return boxes, trees[0], [0] * len(boxes)
    h, part_group = link_groups(trees)
    return boxes, h, part_group


class FusionSession:
    """One fusion problem over normalized coordinates.

    groups: list of (boxes, optional Hierarchy with local 0-based parts).
    The objective trace always has length iteration+1.
    """

    def __init__(
        self,
        m: ModelBundle,
        groups: list[tuple[list[OBB], Hierarchy | None]],
        config: FusionConfig | None = None,
    ):
        self.config = config or FusionConfig()
        adj = self.config.adjust
        if adj.allow_synthesis and adj.eta_threshold < 1.0:
            m.require_stage("dae")
        else:
            m.require_stage("vqvae", "dae")
        self.model = m
        self.rng = SeededRng(self.config.seed)
        world, h, part_group = _bootstrap(groups)
        self.boxes, self.transform = normalize_scene(world)
        self.h = h
        self.part_group = part_group
        self.source_map = {i: i for i in range(len(world))}
        self.iteration = 0
        self.total_steps = 0  # never reset; keys the rng stream
        obj, errors = structure_objective(m, self.boxes, self.h, self.config.flags)
        self.trace = [obj]
        self.errors = errors
        self.synthesis_events: list[dict] = []
        self.dock_events: list = []
        self.rolled_back = 0
        self.budget_exceeded = False
        self._streak = 0
        self._converged = False
        self.records = [self._record(obj, obj, False, [])]
        self.history: list[IterationRecord] = [self.records[0]]

    def _record(self, obj_i, obj, rolled, synth) -> IterationRecord:
        rec = IterationRecord(
            iteration=self.iteration,
            objective_infer=obj_i,
            objective=obj,
            rolled_back=rolled,
            synthesized_nodes=list(synth),
            parts=len(self.boxes),
        )
        if self.config.keep_history:
            rec.boxes = self.world_boxes()
            rec.source_map = dict(self.source_map)
        return rec

    @property
    def converged(self) -> bool:
        return self._converged

    @property
    def status(self) -> str:
        return "converged" if self._converged else "idle"

    def world_boxes(self) -> list[OBB]:
        return self.transform.invert_all(self.boxes)

    def step(self) -> bool:
        """One inference + adjustment iteration; False once converged."""
        if self._converged:
            return False
        cfg = self.config
        srng = self.rng.derive("iter", self.total_steps)
        inf = infer_hierarchy(self.model, self.boxes, self.h, srng, cfg.sampler, cfg.flags)
        adj = local_adjust(self.model, self.boxes, inf.hierarchy, cfg.adjust, cfg.flags)
        post_obj, post_err = structure_objective(
            self.model, adj.boxes, adj.hierarchy, cfg.flags
        )
        self.iteration += 1
        self.total_steps += 1
        rolled = False
        if adj.synthesized or not (cfg.strict and post_obj > inf.objective):
            self.h = adj.hierarchy
            self.boxes = adj.boxes
            self.source_map = {
                new: self.source_map[old]
                for new, old in adj.part_map.items()
                if old in self.source_map
            }
            self.part_group = [
                self.part_group[adj.part_map[i]] if i in adj.part_map else -1
                for i in range(len(adj.boxes))
            ]
            self.trace.append(post_obj)
            self.errors = post_err
            if adj.synthesized:
                self.synthesis_events.append(
                    {"iteration": self.iteration, "nodes": list(adj.synthesized)}
                )
            self.budget_exceeded = self.budget_exceeded or adj.budget_exceeded
        else:
            rolled = True
            self.rolled_back += 1
            self.h = inf.hierarchy
            self.trace.append(inf.objective)
            self.errors = inf.errors
        rec = self._record(inf.objective, self.trace[-1], rolled, adj.synthesized)
        self.records.append(rec)
        self.history.append(rec)
        # convergence bookkeeping
        prev, cur = self.trace[-2], self.trace[-1]
        rel = (prev - cur) / max(abs(prev), 1e-12)
        if adj.synthesized:
            self._streak = 0
        elif rel < cfg.stop.rel_tol:
            self._streak += 1
        else:
            self._streak = 0
        if self._streak >= cfg.stop.patience or self.iteration >= cfg.stop.max_iterations:
            self._converged = True
        return True

    def run(self) -> "FusionSession":
        while self.step():
            pass
        return self

    def update_config(self, **changes) -> None:
        """Apply config changes (eta_threshold, allow_synthesis, strict, ...)
        from the next iteration; resets the convergence counter."""
        adjust_fields = {"eta_threshold", "allow_synthesis", "max_depth", "max_parts"}
        adj = {k: v for k, v in changes.items() if k in adjust_fields}
        rest = {k: v for k, v in changes.items() if k not in adjust_fields}
        if adj:
            self.config.adjust = replace(self.config.adjust, **adj)
        for k, v in rest.items():
            if not hasattr(self.config, k):
                raise DriverError(f"unknown config field {k!r}")
            setattr(self.config, k, v)
        self._streak = 0
        self._converged = False

    # -- interactive edits (service); all coordinates are world-space -------

    def _rebootstrap(self, world: list[OBB], part_group: list[int]) -> None:
        groups: list[tuple[list[OBB], None]] = []
        order: list[int] = []
        for gi in sorted(set(part_group)):
            members = [i for i, g in enumerate(part_group) if g == gi]
            groups.append(([world[i] for i in members], None))
            order.extend(members)
        boxes, h, pg = _bootstrap(groups)
        self.boxes = self.transform.apply_all(boxes)
        self.h = h
        self.part_group = pg
        self.source_map = {i: i for i in range(len(boxes))}
        self.iteration = 0
        self._streak = 0
        self._converged = False
        self.synthesis_events = []
        self.rolled_back = 0
        self.budget_exceeded = False
        obj, errors = structure_objective(self.model, self.boxes, self.h, self.config.flags)
        self.trace = [obj]
        self.errors = errors
        self.records = [self._record(obj, obj, False, [])]
        self.history = [self.records[0]]

    def add_part(self, box: OBB, group: int) -> None:
        world = self.world_boxes() + [box]
        self._rebootstrap(world, self.part_group + [int(group)])

    def remove_part(self, part: int) -> None:
        world = self.world_boxes()
        if not 0 <= part < len(world):
            raise DriverError(f"no part {part}")
        if len(world) == 1:
            raise DriverError("cannot remove the last part")
        world.pop(part)
        pg = list(self.part_group)
        pg.pop(part)
        self._rebootstrap(world, pg)

    def move_parts(self, parts: list[int], translation: np.ndarray) -> None:
        world = self.world_boxes()
        for p in parts:
            if not 0 <= p < len(world):
                raise DriverError(f"no part {p}")
            world[p] = world[p].translated(translation)
        self._rebootstrap(world, list(self.part_group))

    def move_group(self, group: int, translation: np.ndarray) -> None:
        members = [i for i, g in enumerate(self.part_group) if g == group]
        if not members:
            raise DriverError(f"no group {group}")
        self.move_parts(members, translation)


@dataclass
class FusionReport:
    trace: list[float]
    iterations: int
    converged: bool
    rolled_back: int
    synthesis_events: list[dict]
    budget_exceeded: bool
    errors: dict[int, float]
    part_source: dict[int, int]
    part_group: list[int]
    dock_events: list


def fuse(
    m: ModelBundle,
    groups: list[tuple[list[OBB], Hierarchy | None]],
    config: FusionConfig | None = None,
) -> tuple[list[OBB], Hierarchy, FusionReport]:
    """Run one fusion problem to convergence; boxes return in world space."""
    session = FusionSession(m, groups, config)
    session.run()
    dock_events = []
    if session.config.dock:
        session.boxes, dock_events = dock_parts(session.boxes, session.h, diag=1.0)
    report = FusionReport(
        trace=list(session.trace),
        iterations=session.iteration,
        converged=session.converged,
        rolled_back=session.rolled_back,
        synthesis_events=list(session.synthesis_events),
        budget_exceeded=session.budget_exceeded,
        errors=dict(session.errors),
        part_source=dict(session.source_map),
        part_group=list(session.part_group),
        dock_events=dock_events,
    )
    return session.world_boxes(), session.h, report


# -- metrics -------------------------------------------------------------------


@dataclass
class MergeErrorReport:
    total: float
    per_part: dict[int, float]
    unmatched: list[int]


def merge_error_report(
    out_boxes: list[OBB], gt_boxes: list[OBB], corr: dict[int, int]
) -> MergeErrorReport:
    """Sum of squared parameter distances under the given correspondence.

    Output parts without a correspondent (synthesized or extra) are excluded
    from the sum and listed separately."""
    per_part: dict[int, float] = {}
    unmatched: list[int] = []
    for i, b in enumerate(out_boxes):
        gt = corr.get(i)
        if gt is None:
            unmatched.append(i)
            continue
        d = obb_to_params(b) - obb_to_params(gt_boxes[gt])
        per_part[i] = float(d @ d)
    return MergeErrorReport(total=sum(per_part.values()), per_part=per_part, unmatched=unmatched)


def merge_error(out_boxes: list[OBB], gt_boxes: list[OBB], corr: dict[int, int]) -> float:
    return merge_error_report(out_boxes, gt_boxes, corr).total


# -- benchmark harness -----------------------------------------------------------

NOISE_GRID = (0.01, 0.02, 0.05, 0.10)
SEPARATION_GRID = (0.0, 0.05, 0.10, 0.20)
ABLATION_ORDER = (
    "full",
    "no_vq",
    "no_resampling",
    "no_sibling_inner",
    "inner_outer_concat",
    "no_inner_for_leaves",
)

@dataclass(frozen=True)
class BenchmarkConfig:
    bench: str  # "noise" | "separation" | "ablation"
    n_tasks: int = 20
    seed: int = 0
    noise_level: float = 0.05
    separation: float = 0.10
    families: tuple = FAMILIES
    stop: StopRule = field(default_factory=StopRule)


@dataclass
class BenchmarkResult:
    rows: list[dict]
    summary: dict


def benchmark_fusion_config(
    flags: AblationFlags | None = None, seed: int = 0, stop: StopRule | None = None
) -> FusionConfig:
    """Benchmark defaults: strict, no synthesis, no docking, keep history."""
    return FusionConfig(
        adjust=AdjustConfig(allow_synthesis=False),
        flags=flags or AblationFlags(),
        stop=stop or StopRule(),
        strict=True,
        dock=False,
        seed=seed,
        keep_history=True,
    )


def _variants(cfg: BenchmarkConfig) -> list[tuple[str, dict, AblationFlags]]:
    if cfg.bench == "noise":
        return [
            (f"noise={v:.2f}", {"noise_level": v, "separation": cfg.separation}, AblationFlags())
            for v in NOISE_GRID
        ]
    if cfg.bench == "separation":
        return [
            (f"separation={v:.2f}", {"noise_level": cfg.noise_level, "separation": v}, AblationFlags())
            for v in SEPARATION_GRID
        ]
    if cfg.bench == "ablation":
        out = []
        for name in ABLATION_ORDER:
            flags = AblationFlags() if name == "full" else AblationFlags(**{name: True})
            out.append((name, {"noise_level": cfg.noise_level, "separation": cfg.separation}, flags))
        return out
    raise DriverError(f"unknown bench {cfg.bench!r}")


def task_groups(task: MergeTask) -> tuple[list[tuple[list[OBB], None]], list[int]]:
    """Split a merge task into fuse() groups; perm maps fused input index ->
    task part index."""
    perm = [i for g in task.groups for i in g]
    groups = [([task.boxes[i] for i in g], None) for g in task.groups]
    return groups, perm


def run_task(
    m: ModelBundle,
    task: MergeTask,
    fusion: FusionConfig,
) -> tuple[FusionSession, list[dict]]:
    """Fuse one task and compute per-iteration merge errors."""
    groups, perm = task_groups(task)
    cfg = replace(fusion, keep_history=True)
    session = FusionSession(m, groups, cfg)
    session.run()
    rows = []
    for rec in session.history:
        corr = {
            i: task.gt_map[perm[src]]
            for i, src in (rec.source_map or {}).items()
        }
        err = merge_error(rec.boxes or [], task.gt_boxes, corr)
        rows.append(
            {
                "iteration": rec.iteration,
                "objective_infer": rec.objective_infer,
                "objective": rec.objective,
                "merge_error": err,
                "parts": rec.parts,
                "synthesized": len(rec.synthesized_nodes),
                "rolled_back": int(rec.rolled_back),
                "converged_iteration": session.iteration,
            }
        )
    return session, rows


def _bench_tasks(cfg: BenchmarkConfig, task_kwargs: dict) -> list[MergeTask]:
    root = SeededRng(cfg.seed).derive("bench", cfg.bench)
    tasks = []
    for t in range(cfg.n_tasks):
        family = cfg.families[t % len(cfg.families)]
        boxes, h = sample_shape(family, root.derive("shape", t))
        tasks.append(
            make_merge_task(boxes, h, root.derive("task", t), family=family, **task_kwargs)
        )
    return tasks


def run_benchmark(
    m: ModelBundle, cfg: BenchmarkConfig, progress=None
) -> BenchmarkResult:
    """Sweep the grid for cfg.bench; deterministic given the model and seed.

    SCORES_THREADS caps task-level parallelism (default 1); output ordering
    is independent of scheduling."""
    variants = _variants(cfg)
    units = []
    for vi, (label, task_kwargs, flags) in enumerate(variants):
        tasks = _bench_tasks(cfg, task_kwargs)
        for ti, task in enumerate(tasks):
            units.append((vi, ti, label, flags, task))

    results: dict[tuple[int, int], list[dict]] = {}

    def work(unit):
        vi, ti, label, flags, task = unit
        fusion = benchmark_fusion_config(
            flags, seed=SeededRng(cfg.seed).derive("fuse", label, ti).seed, stop=cfg.stop
        )
        _, rows = run_task(m, task, fusion)
        return (vi, ti), rows

    threads = max(1, int(os.environ.get("SCORES_THREADS", "1")))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for key, rows in pool.map(work, units):
                results[key] = rows
    else:
        for unit in units:
            key, rows = work(unit)
            results[key] = rows
            if progress:
                progress(f"{unit[2]} task {unit[1] + 1}/{cfg.n_tasks}")

    out_rows: list[dict] = []
    summary_variants: dict[str, dict] = {}
    for vi, (label, task_kwargs, flags) in enumerate(variants):
        finals, inputs, iters = [], [], []
        curves: list[list[float]] = []
        for ti in range(cfg.n_tasks):
            rows = results[(vi, ti)]
            seed = SeededRng(cfg.seed).derive("fuse", label, ti).seed
            for r in rows:
                out_rows.append(
                    {"bench": cfg.bench, "variant": label, "task": ti, "seed": seed, **r}
                )
            inputs.append(rows[0]["merge_error"])
            finals.append(rows[-1]["merge_error"])
            iters.append(rows[-1]["converged_iteration"])
            curves.append([r["merge_error"] for r in rows])
        depth = max(len(c) for c in curves)
        padded = [c + [c[-1]] * (depth - len(c)) for c in curves]
        curve = [float(np.mean([c[k] for c in padded])) for k in range(depth)]
        summary_variants[label] = {
            "mean_input_error": float(np.mean(inputs)),
            "mean_final_error": float(np.mean(finals)),
            "improved_fraction": float(np.mean([f < i for f, i in zip(finals, inputs)])),
            "mean_iterations": float(np.mean(iters)),
            "mean_error_curve": curve,
        }
    summary = {
        "bench": cfg.bench,
        "seed": cfg.seed,
        "n_tasks": cfg.n_tasks,
        "noise_level": cfg.noise_level,
        "separation": cfg.separation,
        "variants": summary_variants,
    }
    return BenchmarkResult(rows=out_rows, summary=summary)
