"""Prior-guided local adjustment: snap, recurse, or resynthesize.

A top-down cascade decodes the hierarchy with codebook snapping. At each
internal non-root node the blend weight eta combines how badly the node's
code fits the prior (relative to the scene's worst, measured in a snap-free
pre-pass) with how deep the node sits; nodes at or above the synthesis
threshold are regenerated wholesale from their code by the generative
decoders, everything else is snapped and descended into. Leaf boxes are
decoded from their codes, so the cascade also denoises geometry.

Docking is a separate post-process that closes small gaps between sibling
subtrees with capped translations and scales.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import vq
from .geometry import OBB, DegenerateAxes, SymmetryParams, apply_symmetry
from .nn import mlp_forward
from .rvnn import (
    SYM_WIDTH,
    AblationFlags,
    ModelBundle,
    classify_node,
    decode_box,
    decode_outer,
    encode_inner,
)
from .structure import ADJACENCY, LEAF, SYMMETRY, Hierarchy, Node, _Alloc


class AdjustError(ValueError):
    pass


@dataclass(frozen=True)
class AdjustConfig:
    """eta = clamp(e/e_max, <=1)^alpha * (depth/d_max)^depth_exponent.

    d_max counts every node including leaves, so internal nodes always have
    eta strictly below 1 and eta_threshold 1.0 switches synthesis off exactly.
    Synthesis triggers at eta >= eta_threshold.
    """

    eta_threshold: float = 0.7
    alpha: float = 0.3
    depth_exponent: float = 0.7
    allow_synthesis: bool = True
    max_depth: int = 10
    max_parts: int = 32


def eta(e: float, e_max: float, depth: int, d_max: int, cfg: AdjustConfig = AdjustConfig()) -> float:
    """Synthesis blend weight of a node."""
    if e_max <= 0.0 or d_max <= 0:
        return 0.0
    r = min(e / e_max, 1.0)
    return (r ** cfg.alpha) * ((depth / d_max) ** cfg.depth_exponent)


@dataclass
class NodeRecord:
    nid: int
    depth: int
    error: float
    eta: float
    action: str  # "snap" | "synthesize" | "keep"


@dataclass
class AdjustResult:
    boxes: list[OBB]
    hierarchy: Hierarchy
    part_map: dict[int, int]  # new part -> source part; synthesized parts absent
    records: list[NodeRecord]
    synthesized: list[int]  # old-tree node ids replaced by synthesis
    budget_exceeded: bool = False


# Plan-tree nodes assembled during the cascade, turned into a Hierarchy after.
@dataclass
class _Plan:
    kind: str
    box: OBB | None = None
    old_part: int | None = None
    sym: SymmetryParams | None = None
    children: list["_Plan"] = field(default_factory=list)


def _plan_leaves(p: _Plan) -> int:
    if p.kind == LEAF:
        return 1
    return sum(_plan_leaves(c) for c in p.children)


class _Synth:
    """Generative unroll from a code pair, with depth and part budgets."""

    def __init__(self, m: ModelBundle, cfg: AdjustConfig, flags: AblationFlags, scale: float):
        self.m = m
        self.cfg = cfg
        self.flags = flags
        self.scale = scale
        self.parts = 0
        self.exceeded = False

    def _leaf(self, inner_vec, outer_vec) -> _Plan:
        self.parts += 1
        box = decode_box(self.m, inner_vec, outer_vec, flags=self.flags, scale=self.scale)
        return _Plan(kind=LEAF, box=box)

    def _snap_internal(self, outer_vec):
        if self.flags.no_vq:
            return outer_vec
        return vq.vq_denoise(self.m, outer_vec)

    def unroll(self, inner_vec, outer_vec, depth: int) -> _Plan:
        kind, _ = classify_node(self.m, np.concatenate([inner_vec, outer_vec]))
        if kind == LEAF:
            return self._leaf(inner_vec, outer_vec)
        if depth >= self.cfg.max_depth or self.parts + 2 > self.cfg.max_parts:
            self.exceeded = True
            return self._leaf(inner_vec, outer_vec)
        d = self.m.config.d_code
        x = np.concatenate([inner_vec, outer_vec])
        if kind == ADJACENCY:
            y, _ = mlp_forward(self.m.nets["gen_adj"], x)
            in_l, out_l = y[:d], y[d:2 * d]
            in_r, out_r = y[2 * d:3 * d], y[3 * d:]
            left = self.unroll(in_l, self._snap_internal(out_l), depth + 1)
            right = self.unroll(in_r, self._snap_internal(out_r), depth + 1)
            return _Plan(kind=ADJACENCY, children=[left, right])
        y, _ = mlp_forward(self.m.nets["gen_sym"], x)
        in_c, out_c = y[:d], y[d:2 * d]
        raw_sym = y[2 * d:2 * d + SYM_WIDTH]
        try:
            sym = SymmetryParams.from_vec(raw_sym)
        except DegenerateAxes:
            repaired = raw_sym.copy()
            repaired[1:4] = (0.0, 0.0, 1.0)
            sym = SymmetryParams.from_vec(repaired)
        gen = self.unroll(in_c, self._snap_internal(out_c), depth + 1)
        copies = self._sym_copies(sym)
        extra = _plan_leaves(gen) * (copies - 1)
        if self.parts + extra > self.cfg.max_parts:
            self.exceeded = True
            return _Plan(kind=SYMMETRY, sym=sym, children=[gen])
        members = [gen] + [self._replicate(gen, sym, i) for i in range(1, copies)]
        self.parts += extra
        chain = members[0]
        for nxt in members[1:]:
            chain = _Plan(kind=ADJACENCY, children=[chain, nxt])
        return _Plan(kind=SYMMETRY, sym=sym, children=[chain])

    def _sym_copies(self, sym: SymmetryParams) -> int:
        if sym.kind == 1:  # rotational
            return max(2, int(round(sym.magnitude)))
        if sym.kind == 2:  # translational
            return self.m.config.translational_copies
        return 2

    def _replicate(self, plan: _Plan, sym: SymmetryParams, index: int) -> _Plan:
        if plan.kind == LEAF:
            copies = apply_symmetry(plan.box, sym, self.m.config.translational_copies)
            return _Plan(kind=LEAF, box=copies[index])
        return _Plan(
            kind=plan.kind,
            sym=plan.sym,
            children=[self._replicate(c, sym, index) for c in plan.children],
        )


def local_adjust(
    m: ModelBundle,
    boxes: list[OBB],
    h: Hierarchy,
    cfg: AdjustConfig = AdjustConfig(),
    flags: AblationFlags | None = None,
    scale: float = 1.0,
) -> AdjustResult:
    """One adjustment pass over a shape. Deterministic.

    Without synthesis the output boxes are exactly the snapped-decode
    reconstruction in the input part order. Synthesis replaces whole subtrees;
    surviving parts are re-based by rank and recorded in part_map.
    """
    if cfg.allow_synthesis and cfg.eta_threshold < 1.0:
        m.require_stage("dae")
    else:
        m.require_stage("vqvae", "dae")
    flags = flags or AblationFlags()
    inner = encode_inner(m, boxes, h)
    pre = decode_outer(m, h, inner, snap_on=False, flags=flags)
    e_max = max(pre.evq.values()) if pre.evq else 0.0
    d_max = h.max_depth()

    records: list[NodeRecord] = []
    synthesized: list[int] = []
    budget = False
    d = m.config.d_code

    def descend(nid: int, eff_vec: np.ndarray) -> _Plan:
        """Build the plan subtree for old node nid given its effective code."""
        nonlocal budget
        node = h.nodes[nid]
        if node.kind == LEAF:
            box = decode_box(m, inner[nid], eff_vec, flags=flags, scale=scale)
            return _Plan(kind=LEAF, box=box, old_part=node.part)
        if node.kind == ADJACENCY:
            l, r = node.children
            ol, _ = mlp_forward(m.nets["outer_adj"], np.concatenate([eff_vec, _sib(nid, r)]))
            orr, _ = mlp_forward(m.nets["outer_adj"], np.concatenate([eff_vec, _sib(nid, l)]))
            return _Plan(kind=ADJACENCY, children=[
                child_plan(l, ol[:d]), child_plan(r, orr[d:]),
            ])
        c = node.children[0]
        o, _ = mlp_forward(m.nets["outer_sym"], np.concatenate([eff_vec, _sib(nid, c)]))
        return _Plan(kind=SYMMETRY, sym=node.sym, children=[child_plan(c, o[:d])])

    def _sib(pid: int, sib: int) -> np.ndarray:
        if flags.inner_outer_concat:
            return inner[pid]
        if flags.no_sibling_inner:
            return np.zeros(d)
        return inner[sib]

    def child_plan(cid: int, raw_vec: np.ndarray) -> _Plan:
        nonlocal budget
        node = h.nodes[cid]
        if node.kind == LEAF:
            box = decode_box(m, inner[cid], raw_vec, flags=flags, scale=scale)
            return _Plan(kind=LEAF, box=box, old_part=node.part)
        err = vq.representation_error(m, raw_vec)
        dep = h.depth(cid)
        e = eta(err, e_max, dep, d_max, cfg)
        synth = cfg.allow_synthesis and e >= cfg.eta_threshold
        if synth:
            # the un-snapped code seeds generation: snapping failed to
            # explain this node, so the raw code carries the information
            records.append(NodeRecord(cid, dep, err, e, "synthesize"))
            synthesized.append(cid)
            s = _Synth(m, cfg, flags, scale)
            plan = s.unroll(inner[cid], raw_vec, depth=0)
            budget = budget or s.exceeded
            return plan
        eff_vec = raw_vec if flags.no_vq else vq.vq_denoise(m, raw_vec)
        records.append(NodeRecord(cid, dep, err, e, "snap" if not flags.no_vq else "keep"))
        return descend(cid, eff_vec)

    root_plan = descend(h.root, inner[h.root])

    # Assemble output: kept parts re-based by rank, synthesized parts appended
    # in plan order.
    kept: list[int] = []

    def collect(p: _Plan):
        if p.kind == LEAF and p.old_part is not None:
            kept.append(p.old_part)
        for c in p.children:
            collect(c)

    collect(root_plan)
    if synthesized:
        rank = {old: i for i, old in enumerate(sorted(kept))}
        next_part = len(kept)
        out_boxes: list[OBB] = [None] * len(kept)
        part_map = {new: old for old, new in rank.items()}
        alloc = _Alloc()

        def build(p: _Plan) -> int:
            nonlocal next_part
            if p.kind == LEAF:
                if p.old_part is not None:
                    part = rank[p.old_part]
                    out_boxes[part] = p.box
                else:
                    part = next_part
                    next_part += 1
                    out_boxes.append(p.box)
                return alloc.leaf(part)
            kids = [build(c) for c in p.children]
            if p.kind == ADJACENCY:
                return alloc.adj(kids[0], kids[1])
            return alloc.sym(kids[0], p.sym)

        root = build(root_plan)
        out_h = Hierarchy(alloc.nodes, root)
    else:
        out_boxes = [None] * len(boxes)

        def fill(p: _Plan):
            if p.kind == LEAF:
                out_boxes[p.old_part] = p.box
            for c in p.children:
                fill(c)

        fill(root_plan)
        part_map = {i: i for i in range(len(boxes))}
        out_h = h
    out_h.validate(expect_parts=len(out_boxes))
    return AdjustResult(
        boxes=out_boxes,
        hierarchy=out_h,
        part_map=part_map,
        records=records,
        synthesized=synthesized,
        budget_exceeded=budget,
    )


# -- docking -------------------------------------------------------------------


@dataclass
class DockEvent:
    nid: int
    translation: float  # applied per-side magnitude
    scale: float


def dock_parts(
    boxes: list[OBB],
    h: Hierarchy,
    diag: float = 1.0,
    translation_cap: float = 0.022,
    scale_cap: float = 0.035,
    noop_band: float = 0.005,
) -> tuple[list[OBB], list[DockEvent]]:
    """Close gaps between the two sides of every adjacency node, deepest
    first. The closest face-center pair across the sides sets the gap; both
    sides translate toward each other (capped per side), and if a gap
    remains the side with fewer parts scales about its centroid (capped).
    Gaps inside the no-op band are left alone. Deterministic."""
    out = list(boxes)
    events: list[DockEvent] = []
    order = [nid for nid in h.post_order() if h.nodes[nid].kind == ADJACENCY]
    for nid in order:
        l, r = h.nodes[nid].children
        side_a = h.subtree_leaf_parts(l)
        side_b = h.subtree_leaf_parts(r)
        best = None
        for a in side_a:
            for b in side_b:
                for fa in out[a].face_centers():
                    for fb in out[b].face_centers():
                        gap = float(np.linalg.norm(fb - fa))
                        if best is None or gap < best[0] - 1e-15:
                            best = (gap, fa.copy(), fb.copy())
        if best is None:
            continue
        gap, fa, fb = best
        if gap < noop_band * diag or gap <= 0.0:
            continue
        g = fb - fa
        half = 0.5 * g
        cap = translation_cap * diag
        norm = float(np.linalg.norm(half))
        step = half if norm <= cap else half * (cap / norm)
        for p in side_a:
            out[p] = out[p].translated(step)
        for p in side_b:
            out[p] = out[p].translated(-step)
        residual = g - 2.0 * step
        s = 1.0
        res_norm = float(np.linalg.norm(residual))
        if res_norm > 1e-12:
            small = side_a if len(side_a) <= len(side_b) else side_b
            sign = 1.0 if small is side_a else -1.0
            centroid = np.mean([out[p].center for p in small], axis=0)
            anchor = fa + step if small is side_a else fb - step
            u = anchor - centroid
            uu = float(u @ u)
            if uu > 1e-12:
                raw_s = 1.0 + sign * float(u @ residual) / uu
                s = float(np.clip(raw_s, 1.0 - scale_cap, 1.0 + scale_cap))
                if abs(s - 1.0) > 1e-12:
                    for p in small:
                        b = out[p]
                        out[p] = OBB(
                            center=centroid + s * (b.center - centroid),
                            extents=b.extents * s,
                            axis_u=b.axis_u,
                            axis_v=b.axis_v,
                        )
        events.append(DockEvent(nid=nid, translation=float(np.linalg.norm(step)), scale=s))
    return out, events
