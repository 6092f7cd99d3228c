"""Hierarchy inference: structure search guided by the code prior.

A hierarchy is scored by the total representation error of its internal
non-root outer codes. Each round draws candidate hierarchies by selecting
high-error nodes (probability grows with squared relative error) and
resampling their subtrees; the best candidate replaces the current hierarchy
only on strict improvement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .geometry import OBB
from .rng import SeededRng
from .rvnn import AblationFlags, ModelBundle, decode_outer, encode_inner
from .structure import (
    LEAF,
    Hierarchy,
    rebuild_keeping,
    resample_subtrees,
    unselected_atoms,
)


@dataclass(frozen=True)
class SamplerConfig:
    """Structure-search settings.

    sigma scales how aggressively error turns into resampling probability;
    literal_pn selects the inverted (decreasing-in-error) probability form
    instead of its complement.
    """

    sigma: float = 0.6
    m_candidates: int = 10
    n_rounds: int = 10
    literal_pn: bool = False


def sampling_probability(e: float, e_max: float, cfg: SamplerConfig = SamplerConfig()) -> float:
    """Probability of resampling a node with error e given the scene maximum."""
    if e_max <= 0.0:
        return 0.0
    decreasing = math.exp(-(e * e) / (cfg.sigma**2 * e_max * e_max))
    return decreasing if cfg.literal_pn else 1.0 - decreasing


def select_nodes(
    h: Hierarchy,
    errors: dict[int, float],
    rng: SeededRng,
    cfg: SamplerConfig = SamplerConfig(),
) -> list[int]:
    """Top-down independent draw over internal non-root nodes; a selected
    node removes its whole subtree from further consideration, so the result
    is an antichain. The root is never selected."""
    e_max = max(errors.values()) if errors else 0.0
    selected: list[int] = []
    blocked: set[int] = set()
    for nid in h.pre_order():
        if nid == h.root or h.nodes[nid].kind == LEAF or nid in blocked:
            continue
        p = sampling_probability(errors.get(nid, 0.0), e_max, cfg)
        if rng.uniform() < p:
            selected.append(nid)
            blocked.update(h.subtree_nodes(nid))
    return selected


def structure_objective(
    m: ModelBundle,
    boxes: list[OBB],
    h: Hierarchy,
    flags: AblationFlags | None = None,
) -> tuple[float, dict[int, float]]:
    """Total representation error and the per-node error map.

    Scored with snapping off: the objective measures how far the structure
    itself sits from the codebook, not the residual left after snapping."""
    inner = encode_inner(m, boxes, h)
    outer = decode_outer(m, h, inner, snap_on=False, flags=flags)
    return sum(outer.evq.values()), outer.evq


@dataclass
class InferenceResult:
    hierarchy: Hierarchy
    objective: float
    errors: dict[int, float]
    history: list[float] = field(default_factory=list)
    rounds_accepted: int = 0


def infer_hierarchy(
    m: ModelBundle,
    boxes: list[OBB],
    h0: Hierarchy,
    rng: SeededRng,
    cfg: SamplerConfig = SamplerConfig(),
    flags: AblationFlags | None = None,
) -> InferenceResult:
    """Iterated candidate search from a starting hierarchy.

    Per round, m_candidates proposals are drawn from a mixture of two moves
    around the selected high-error nodes: rebuild the region spanning them
    (their groupings plus every ancestor up to the root dissolve, untouched
    subtrees transplanted verbatim), or reshuffle strictly inside their
    subtrees. The first move can regroup parts across the root split, which
    merging disjoint part groups requires. Under literal_pn the selection
    reads as the keep-set instead and everything around it rebuilds. The
    round's argmin replaces the current hierarchy only on strict improvement,
    so the objective history is non-increasing. Deterministic given the rng.
    """
    m.require_stage("vqvae", "dae")
    flags = flags or AblationFlags()
    best_h = h0
    best_obj, errors = structure_objective(m, boxes, best_h, flags)
    result = InferenceResult(best_h, best_obj, errors, history=[best_obj])
    if flags.no_resampling:
        return result
    for rnd in range(cfg.n_rounds):
        candidates = []
        for c in range(cfg.m_candidates):
            crng = rng.derive("round", rnd, "cand", c)
            picked = select_nodes(best_h, errors, crng, cfg)
            if not picked:
                continue
            if cfg.literal_pn:
                h_c = rebuild_keeping(best_h, picked, crng.derive("rebuild"), boxes=boxes)
            elif c % 2 == 0:
                kept = unselected_atoms(best_h, picked)
                h_c = rebuild_keeping(best_h, kept, crng.derive("rebuild"), boxes=boxes)
            else:
                h_c = resample_subtrees(best_h, picked, crng.derive("resample"), boxes=boxes)
            obj_c, err_c = structure_objective(m, boxes, h_c, flags)
            candidates.append((obj_c, c, h_c, err_c))
        if candidates:
            obj_c, _, h_c, err_c = min(candidates, key=lambda t: (t[0], t[1]))
            if obj_c < best_obj:
                best_h, best_obj, errors = h_c, obj_c, err_c
                result.rounds_accepted += 1
        result.history.append(best_obj)
    result.hierarchy = best_h
    result.objective = best_obj
    result.errors = errors
    return result
