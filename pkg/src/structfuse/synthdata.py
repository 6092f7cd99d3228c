"""Synthetic box-assembly families, training perturbations, and merge tasks.

Four parametric families (table, chair, lamp, candelabrum) with ground-truth
hierarchies that mirror their construction grammar, 3 to 16 parts each.
Perturbations follow a truncated-Gaussian convention: the stated maxima are
hard bounds, std is max/3, samples are clamped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    OBB,
    REFLECTIVE,
    ROTATIONAL,
    SymmetryParams,
    apply_symmetry,
    obb_to_params,
    params_to_obb,
    rotation_matrix,
    scene_diagonal,
)
from .rng import SeededRng
from .structure import (
    Hierarchy,
    _Alloc,
    chain_adjacency,
    collapse_part_map,
    greedy_build,
    path_collapse,
)

FAMILIES = ("table", "chair", "lamp", "candelabrum")


class DataError(ValueError):
    pass


class TooFewParts(DataError):
    pass


@dataclass
class ShapeSample:
    family: str
    boxes: list[OBB]
    hierarchy: Hierarchy
    seed: int


def _box(center, extents, u=(1, 0, 0), v=(0, 1, 0)) -> OBB:
    return OBB(center=center, extents=extents, axis_u=u, axis_v=v)


def _legs_rotational(n: int, radius: float, height: float, width: float):
    """n congruent vertical legs on a circle about the z axis, plus params."""
    angle0 = math.pi / 4.0 if n == 4 else math.pi / 2.0
    gen = _box(
        (radius * math.cos(angle0), radius * math.sin(angle0), height / 2.0),
        (width, width, height),
    )
    sym = SymmetryParams(kind=ROTATIONAL, axis=(0, 0, 1), anchor=(0, 0, 0), magnitude=float(n))
    return apply_symmetry(gen, sym), sym


def _assemble(parts: list[tuple[list[int], SymmetryParams | None]], total: int) -> Hierarchy:
    """Build a hierarchy from units: each unit is (member part ids, sym or None).

    Members of a unit chain left-deep; symmetric units get a symmetry wrapper;
    units then chain left-deep in the given order.
    """
    alloc = _Alloc()
    leaf_ids = {p: alloc.leaf(p) for p in range(total)}
    roots = []
    for members, sym in parts:
        sub = chain_adjacency(alloc, [leaf_ids[p] for p in members])
        roots.append(alloc.sym(sub, sym) if sym is not None else sub)
    root = chain_adjacency(alloc, roots) if len(roots) > 1 else roots[0]
    return Hierarchy(alloc.nodes, root)


def _sample_table(rng: SeededRng):
    w = rng.uniform(0.8, 1.6)
    d = rng.uniform(0.8, 1.6)
    t = rng.uniform(0.05, 0.12)
    h = rng.uniform(0.5, 1.0)
    leg_w = rng.uniform(0.06, 0.14)
    n = int(rng.choice([3, 4]))
    radius = 0.5 * min(w, d) - leg_w
    legs, sym = _legs_rotational(n, radius, h, leg_w)
    top = _box((0.0, 0.0, h + t / 2.0), (w, d, t))
    boxes = legs + [top]
    units = [(list(range(n)), sym), ([n], None)]
    if rng.uniform() < 0.5:
        z = rng.uniform(0.15, 0.4) * h
        stretcher = _box((0.0, 0.0, z), (1.4 * radius, 1.4 * radius, 0.05))
        boxes.append(stretcher)
        units.append(([n + 1], None))
    return boxes, _assemble(units, len(boxes))


def _sample_chair(rng: SeededRng):
    w = rng.uniform(0.8, 1.2)
    t = rng.uniform(0.06, 0.12)
    h = rng.uniform(0.45, 0.7)
    leg_w = rng.uniform(0.06, 0.12)
    legs, sym = _legs_rotational(4, 0.5 * w - leg_w, h, leg_w)
    seat = _box((0.0, 0.0, h + t / 2.0), (w, w, t))
    back_h = rng.uniform(0.6, 1.0) * w
    back = _box((0.0, -w / 2.0 + t / 2.0, h + t + back_h / 2.0), (w, t, back_h))
    boxes = legs + [seat, back]
    units = [(list(range(4)), sym), ([4], None), ([5], None)]
    if rng.uniform() < 0.5:
        arm_h = 0.35 * back_h
        arm = _box(
            (w / 2.0 - t / 2.0, 0.0, h + t + arm_h),
            (t, 0.8 * w, t),
        )
        arm_sym = SymmetryParams(kind=REFLECTIVE, axis=(1, 0, 0), anchor=(0, 0, 0))
        arms = apply_symmetry(arm, arm_sym)
        base = len(boxes)
        boxes.extend(arms)
        units.append(([base, base + 1], arm_sym))
    return boxes, _assemble(units, len(boxes))


def _sample_lamp(rng: SeededRng):
    base_r = rng.uniform(0.3, 0.5)
    base = _box((0.0, 0.0, 0.03), (base_r, base_r, 0.06))
    pole_h = rng.uniform(0.7, 1.3)
    pole_w = rng.uniform(0.04, 0.08)
    segments = int(rng.choice([1, 2]))
    boxes = [base]
    units = [([0], None)]
    z = 0.06
    for s in range(segments):
        seg_h = pole_h / segments
        boxes.append(_box((0.0, 0.0, z + seg_h / 2.0), (pole_w, pole_w, seg_h)))
        units.append(([len(boxes) - 1], None))
        z += seg_h
    shade_r = rng.uniform(0.25, 0.45)
    boxes.append(_box((0.0, 0.0, z + 0.12), (shade_r, shade_r, 0.24)))
    units.append(([len(boxes) - 1], None))
    return boxes, _assemble(units, len(boxes))


def _sample_candelabrum(rng: SeededRng):
    base = _box((0.0, 0.0, 0.04), (0.55, 0.55, 0.08))
    stem_h = rng.uniform(0.6, 1.0)
    stem = _box((0.0, 0.0, 0.08 + stem_h / 2.0), (0.08, 0.08, stem_h))
    n = int(rng.choice([3, 4, 5]))
    arm_len = rng.uniform(0.3, 0.5)
    z_arm = 0.08 + stem_h * rng.uniform(0.75, 0.95)
    gen = _box((arm_len / 2.0 + 0.04, 0.0, z_arm), (arm_len, 0.05, 0.05))
    sym = SymmetryParams(kind=ROTATIONAL, axis=(0, 0, 1), anchor=(0, 0, 0), magnitude=float(n))
    arms = apply_symmetry(gen, sym)
    boxes = [base, stem] + arms
    units = [([0], None), ([1], None), (list(range(2, 2 + n)), sym)]
    if rng.uniform() < 0.5:
        cup = _box((0.0, 0.0, 0.08 + stem_h + 0.05), (0.12, 0.12, 0.1))
        boxes.append(cup)
        units.append(([len(boxes) - 1], None))
    return boxes, _assemble(units, len(boxes))


_SAMPLERS = {
    "table": _sample_table,
    "chair": _sample_chair,
    "lamp": _sample_lamp,
    "candelabrum": _sample_candelabrum,
}


def sample_shape(family: str, rng: SeededRng) -> tuple[list[OBB], Hierarchy]:
    """Draw one shape; the returned hierarchy is its construction grammar."""
    if family not in _SAMPLERS:
        raise DataError(f"unknown family {family!r}, pick from {FAMILIES}")
    boxes, h = _SAMPLERS[family](rng)
    if not 3 <= len(boxes) <= 16:
        raise DataError(f"{family} produced {len(boxes)} parts")
    h.validate(expect_parts=len(boxes))
    return boxes, h


def sample_dataset(count: int, seed: int, families=FAMILIES) -> list[ShapeSample]:
    """count shapes cycling through the families, each from a derived stream."""
    root = SeededRng(seed)
    out = []
    for i in range(count):
        fam = families[i % len(families)]
        srng = root.derive("shape", fam, i)
        boxes, h = sample_shape(fam, srng)
        out.append(ShapeSample(family=fam, boxes=boxes, hierarchy=h, seed=srng.seed))
    return out


# -- perturbations -----------------------------------------------------------


@dataclass(frozen=True)
class PerturbConfig:
    """Hard maxima for geometric noise; std is max/3, samples are clamped."""

    position_frac: float = 0.10  # of shape diagonal
    scale_lo: float = 0.8
    scale_hi: float = 1.2
    max_rot_deg: float = 10.0
    remove_prob: float = 0.35
    dup_prob: float = 0.35
    max_change_frac: float = 0.20  # of part count, for removal/duplication


def _clamped_normal(rng: SeededRng, hi: float, size=None):
    x = rng.normal(0.0, hi / 3.0, size=size)
    return np.clip(x, -hi, hi)


def _perturb_one(b: OBB, rng: SeededRng, diag: float, cfg: PerturbConfig) -> OBB:
    shift = rng.normal(size=3)
    norm = float(np.linalg.norm(shift))
    mag = abs(float(_clamped_normal(rng, cfg.position_frac * diag)))
    shift = shift / norm * mag if norm > 1e-12 else np.zeros(3)
    mid = 0.5 * (cfg.scale_lo + cfg.scale_hi)
    half = 0.5 * (cfg.scale_hi - cfg.scale_lo)
    s = float(np.clip(rng.normal(mid, half / 3.0), cfg.scale_lo, cfg.scale_hi))
    axis = rng.normal(size=3)
    axis = axis / max(float(np.linalg.norm(axis)), 1e-12)
    angle = float(_clamped_normal(rng, math.radians(cfg.max_rot_deg)))
    rot = rotation_matrix(axis, angle)
    return OBB(
        center=b.center + shift,
        extents=b.extents * s,
        axis_u=rot @ b.axis_u,
        axis_v=rot @ b.axis_v,
    )


def perturb_obbs(
    boxes: list[OBB],
    rng: SeededRng,
    cfg: PerturbConfig = PerturbConfig(),
    diag: float | None = None,
) -> list[OBB]:
    """Independent per-box offset, uniform rescale, and small rotation."""
    diag = scene_diagonal(boxes) if diag is None else diag
    return [_perturb_one(b, rng, diag, cfg) for b in boxes]


def perturb_structure(
    boxes: list[OBB],
    h: Hierarchy,
    rng: SeededRng,
    cfg: PerturbConfig = PerturbConfig(),
) -> tuple[list[OBB], Hierarchy, dict[int, int]]:
    """Geometric noise plus (with configured probabilities) part removal via
    path collapse or part duplication with a greedy hierarchy rebuild.

    Returns (noisy boxes, noisy hierarchy, clean_map) where clean_map sends
    each noisy part index to the clean part it answers for; duplicated parts
    map to their source.
    """
    p = len(boxes)
    noisy = perturb_obbs(boxes, rng, cfg)
    u = rng.uniform()
    max_k = int(cfg.max_change_frac * p)
    if u < cfg.remove_prob and max_k >= 1 and p >= 2:
        k = int(rng.integers(0, max_k + 1))
        if k > 0:
            removed = set(int(i) for i in rng.choice(p, size=min(k, p - 1), replace=False))
            part_map = collapse_part_map(p, removed)
            h2 = path_collapse(h, removed)
            boxes2 = [noisy[old] for old in sorted(part_map)]
            clean_map = {new: old for old, new in part_map.items()}
            return boxes2, h2, clean_map
        return noisy, h, {i: i for i in range(p)}
    if u < cfg.remove_prob + cfg.dup_prob and max_k >= 1:
        k = int(rng.integers(0, max_k + 1))
        if k > 0:
            sources = [int(i) for i in rng.choice(p, size=k, replace=False)]
            diag = scene_diagonal(boxes)
            copies = [_perturb_one(noisy[s], rng, diag, cfg) for s in sources]
            boxes2 = noisy + copies
            clean_map = {i: i for i in range(p)}
            clean_map.update({p + j: s for j, s in enumerate(sources)})
            return boxes2, greedy_build(boxes2), clean_map
    return noisy, h, {i: i for i in range(p)}


# -- merge tasks ---------------------------------------------------------------


@dataclass
class MergeTask:
    """A fusion problem: noisy part groups plus the ground truth they came from.

    groups lists part indices into `boxes`; gt_map sends each part to the
    ground-truth part it answers for (duplicates map to their source).
    """

    family: str
    gt_boxes: list[OBB]
    gt_hierarchy: Hierarchy
    boxes: list[OBB]
    groups: list[list[int]]
    gt_map: dict[int, int]
    noise_level: float
    separation: float
    defect: tuple[str, float] | None
    seed: int


def _noise_params(b: OBB, rng: SeededRng, level: float, diag: float) -> OBB:
    if level <= 0:
        return b
    v = obb_to_params(b)
    v = v + _clamped_normal(rng, level * diag, size=12)
    return params_to_obb(v, scale=diag)


def make_merge_task(
    boxes: list[OBB],
    h: Hierarchy,
    rng: SeededRng,
    noise_level: float = 0.05,
    separation: float = 0.10,
    defect: tuple[str, float] | None = None,
    family: str = "unknown",
) -> MergeTask:
    """Split a shape into two part groups, then separate, defect, and noise.

    Separation rigidly shifts the groups apart by a total of separation*diag
    along a random direction (half each way), so separation 0 with zero noise
    tiles the ground truth exactly. Missing drops round(frac*P) parts from one
    group; redundant duplicates round(frac*P) parts of one group into the
    other.
    """
    p = len(boxes)
    if p < 2:
        raise TooFewParts("need at least 2 parts to split")
    h.validate(expect_parts=p)
    diag = scene_diagonal(boxes)
    size_a = int(rng.integers(1, p))
    in_a = set(int(i) for i in rng.choice(p, size=size_a, replace=False))

    parts = list(range(p))
    gt_map = {i: i for i in parts}
    group_of = {i: (0 if i in in_a else 1) for i in parts}
    work = {i: boxes[i] for i in parts}

    if defect is not None:
        kind, frac = defect
        k = max(1, int(round(frac * p)))
        if kind == "missing":
            side = 0 if size_a > p - size_a else 1
            pool = [i for i in parts if group_of[i] == side]
            k = min(k, len(pool) - 1) if len(pool) > 1 else 0
            dropped = set(int(i) for i in rng.choice(pool, size=k, replace=False)) if k else set()
            parts = [i for i in parts if i not in dropped]
        elif kind == "redundant":
            pool = [i for i in parts if group_of[i] == 0]
            srcs = [int(i) for i in rng.choice(pool, size=min(k, len(pool)), replace=False)]
            nxt = p
            for s in srcs:
                work[nxt] = work[s]
                gt_map[nxt] = s
                group_of[nxt] = 1
                parts.append(nxt)
                nxt += 1
        else:
            raise DataError(f"unknown defect kind {kind!r}")

    # Rigid group separation.
    u = rng.normal(size=3)
    u /= max(float(np.linalg.norm(u)), 1e-12)
    t = u * (separation * diag / 2.0)
    for i in parts:
        work[i] = work[i].translated(t if group_of[i] == 0 else -t)

    # Per-part parameter noise, then frame repair.
    final = []
    groups = [[], []]
    final_map = {}
    for new, old in enumerate(parts):
        final.append(_noise_params(work[old], rng, noise_level, diag))
        groups[group_of[old]].append(new)
        final_map[new] = gt_map[old]
    if not groups[0] or not groups[1]:
        # Degenerate split after defects; put the last part alone.
        lone = len(final) - 1
        groups = [[i for i in range(len(final)) if i != lone], [lone]]

    return MergeTask(
        family=family,
        gt_boxes=list(boxes),
        gt_hierarchy=h,
        boxes=final,
        groups=groups,
        gt_map=final_map,
        noise_level=noise_level,
        separation=separation,
        defect=defect,
        seed=rng.seed,
    )
