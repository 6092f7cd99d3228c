"""Binary part hierarchies and the operations that edit them.

A hierarchy is a tree over part indices: leaves carry a part index, adjacency
nodes have exactly two children, symmetry nodes have one child subtree that
contains every member of the group plus the 8-number symmetry record. Leaf
part indices are a bijection onto {0..P-1}.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import (
    OBB,
    REFLECTIVE,
    ROTATIONAL,
    TRANSLATIONAL,
    SymmetryParams,
    rotation_matrix,
    scene_diagonal,
)
from .rng import SeededRng

LEAF = "leaf"
ADJACENCY = "adjacency"
SYMMETRY = "symmetry"

# Congruence tolerance for symmetry detection, as a fraction of scene diagonal.
SYM_TOL_FRAC = 0.02


class StructureError(ValueError):
    pass


class InvalidHierarchy(StructureError):
    pass


class NotInternal(StructureError):
    """Operation requires an internal (non-leaf) node."""


class AllPartsRemoved(StructureError):
    pass


class OverlappingPartIndices(StructureError):
    pass


@dataclass(frozen=True)
class Node:
    kind: str
    part: int | None = None
    children: tuple[int, ...] = ()
    sym: SymmetryParams | None = None


class Hierarchy:
    """Immutable tree; edits return new Hierarchy objects.

    Depths are stored at construction and the validator recomputes them
    independently.
    """

    def __init__(self, nodes: dict[int, Node], root: int):
        self.nodes = dict(nodes)
        self.root = root
        self.depths = self._compute_depths()
        self._parents: dict[int, int] | None = None

    # -- shape queries ---------------------------------------------------

    def _compute_depths(self) -> dict[int, int]:
        depths = {}
        stack = [(self.root, 0)]
        while stack:
            nid, d = stack.pop()
            depths[nid] = d
            for c in self.nodes[nid].children:
                stack.append((c, d + 1))
        return depths

    def parent(self, nid: int) -> int | None:
        if self._parents is None:
            self._parents = {}
            for pid, node in self.nodes.items():
                for c in node.children:
                    self._parents[c] = pid
        return self._parents.get(nid)

    def is_leaf(self, nid: int) -> bool:
        return self.nodes[nid].kind == LEAF

    def depth(self, nid: int) -> int:
        return self.depths[nid]

    def max_depth(self) -> int:
        return max(self.depths.values())

    def post_order(self) -> list[int]:
        out: list[int] = []

        def rec(nid: int):
            for c in self.nodes[nid].children:
                rec(c)
            out.append(nid)

        rec(self.root)
        return out

    def pre_order(self) -> list[int]:
        out = []
        stack = [self.root]
        while stack:
            nid = stack.pop()
            out.append(nid)
            stack.extend(reversed(self.nodes[nid].children))
        return out

    def leaves(self) -> list[int]:
        return [n for n in self.pre_order() if self.nodes[n].kind == LEAF]

    def leaf_parts(self) -> list[int]:
        return [self.nodes[n].part for n in self.leaves()]

    def internal_nodes(self) -> list[int]:
        return [n for n in self.pre_order() if self.nodes[n].kind != LEAF]

    def subtree_nodes(self, nid: int) -> list[int]:
        out = []
        stack = [nid]
        while stack:
            n = stack.pop()
            out.append(n)
            stack.extend(self.nodes[n].children)
        return out

    def subtree_leaf_parts(self, nid: int) -> list[int]:
        return sorted(
            self.nodes[n].part for n in self.subtree_nodes(nid) if self.nodes[n].kind == LEAF
        )

    def part_count(self) -> int:
        return len(self.leaves())

    # -- validation ------------------------------------------------------

    def validate(self, expect_parts: int | None = None) -> None:
        """Raise InvalidHierarchy on any structural violation."""
        seen: set[int] = set()
        depths: dict[int, int] = {}
        stack = [(self.root, 0)]
        while stack:
            nid, d = stack.pop()
            if nid in seen:
                raise InvalidHierarchy(f"node {nid} reachable twice (cycle or shared child)")
            seen.add(nid)
            if nid not in self.nodes:
                raise InvalidHierarchy(f"dangling child reference {nid}")
            depths[nid] = d
            node = self.nodes[nid]
            if node.kind == LEAF:
                if len(node.children) != 0 or node.part is None:
                    raise InvalidHierarchy(f"malformed leaf {nid}")
            elif node.kind == ADJACENCY:
                if len(node.children) != 2:
                    raise InvalidHierarchy(f"adjacency {nid} must have 2 children")
            elif node.kind == SYMMETRY:
                if len(node.children) != 1 or node.sym is None:
                    raise InvalidHierarchy(f"symmetry {nid} must have 1 child and params")
            else:
                raise InvalidHierarchy(f"unknown kind {node.kind!r}")
            for c in node.children:
                stack.append((c, d + 1))
        if seen != set(self.nodes):
            raise InvalidHierarchy("unreachable nodes present")
        if depths != self.depths:
            raise InvalidHierarchy("stored depths do not match recomputed depths")
        parts = [self.nodes[n].part for n in seen if self.nodes[n].kind == LEAF]
        if len(parts) != len(set(parts)):
            raise InvalidHierarchy("duplicate leaf part indices")
        expected = set(range(len(parts))) if expect_parts is None else set(range(expect_parts))
        if set(parts) != expected:
            raise InvalidHierarchy(f"leaf parts {sorted(parts)} are not 0..{len(expected) - 1}")

    def pretty(self) -> str:
        lines = []

        def rec(nid: int, indent: int):
            node = self.nodes[nid]
            pad = "  " * indent
            if node.kind == LEAF:
                lines.append(f"{pad}leaf[{node.part}]")
            elif node.kind == ADJACENCY:
                lines.append(f"{pad}adj#{nid}")
                for c in node.children:
                    rec(c, indent + 1)
            else:
                lines.append(f"{pad}sym#{nid} kind={node.sym.kind}")
                rec(node.children[0], indent + 1)

        rec(self.root, 0)
        return "\n".join(lines)


# -- builders ------------------------------------------------------------


class _Alloc:
    """Sequential node id allocator for deterministic construction."""

    def __init__(self, start: int = 0):
        self.next = start
        self.nodes: dict[int, Node] = {}

    def add(self, node: Node, nid: int | None = None) -> int:
        if nid is None:
            nid = self.next
        self.next = max(self.next, nid + 1)
        self.nodes[nid] = node
        return nid

    def leaf(self, part: int) -> int:
        return self.add(Node(LEAF, part=part))

    def adj(self, left: int, right: int, nid: int | None = None) -> int:
        return self.add(Node(ADJACENCY, children=(left, right)), nid)

    def sym(self, child: int, params: SymmetryParams, nid: int | None = None) -> int:
        return self.add(Node(SYMMETRY, children=(child,), sym=params), nid)


def chain_adjacency(alloc: _Alloc, roots: list[int]) -> int:
    """Left-deep adjacency chain over existing subtree roots."""
    cur = roots[0]
    for r in roots[1:]:
        cur = alloc.adj(cur, r)
    return cur


def _subtree_centroid(boxes: list[OBB], parts: list[int]) -> np.ndarray:
    return np.mean([boxes[p].center for p in parts], axis=0)


# -- symmetry detection ---------------------------------------------------


def _congruent(a: OBB, b: OBB, tol: float) -> bool:
    return bool(np.all(np.abs(np.sort(a.extents) - np.sort(b.extents)) <= tol))


def _try_reflective(boxes: list[OBB], pair: list[int], tol: float) -> SymmetryParams | None:
    a, b = boxes[pair[0]], boxes[pair[1]]
    d = b.center - a.center
    n = float(np.linalg.norm(d))
    if n < tol:
        return None
    axis = d / n
    anchor = (a.center + b.center) / 2.0
    return SymmetryParams(kind=REFLECTIVE, axis=axis, anchor=anchor, magnitude=0.0)


def _try_translational(boxes: list[OBB], members: list[int], tol: float) -> SymmetryParams | None:
    centers = np.array([boxes[m].center for m in members])
    d = centers[-1] - centers[0]
    n = float(np.linalg.norm(d))
    if n < tol:
        return None
    axis = d / n
    order = np.argsort(centers @ axis)
    centers = centers[order]
    gaps = np.diff(centers, axis=0)
    step = gaps[0]
    if any(np.linalg.norm(g - step) > tol for g in gaps):
        return None
    # All centers must actually be collinear along axis.
    offs = centers - centers[0]
    if any(np.linalg.norm(o - (o @ axis) * axis) > tol for o in offs):
        return None
    return SymmetryParams(
        kind=TRANSLATIONAL, axis=axis, anchor=centers[0], magnitude=float(np.linalg.norm(step))
    )


def _try_rotational(boxes: list[OBB], members: list[int], tol: float) -> SymmetryParams | None:
    n = len(members)
    if n < 3:
        return None
    centers = np.array([boxes[m].center for m in members])
    centroid = centers.mean(axis=0)
    rel = centers - centroid
    radii = np.linalg.norm(rel, axis=1)
    if radii.max() - radii.min() > tol or radii.min() < tol:
        return None
    # Axis = normal of the best-fit plane of the centers.
    _, _, vt = np.linalg.svd(rel)
    axis = vt[-1]
    if any(abs(r @ axis) > tol for r in rel):
        return None
    sym = SymmetryParams(kind=ROTATIONAL, axis=axis, anchor=centroid, magnitude=float(n))
    # Rotating member 0's center by each 2 pi k / n step must land on a member.
    hit = set()
    for k in range(n):
        rot = rotation_matrix(axis, 2.0 * np.pi * k / n)
        target = rot @ (centers[0] - centroid) + centroid
        dists = np.linalg.norm(centers - target, axis=1)
        j = int(np.argmin(dists))
        if dists[j] > tol:
            return None
        hit.add(j)
    if len(hit) != n:
        return None
    return sym


def detect_symmetry_groups(
    boxes: list[OBB], candidates: list[int] | None = None
) -> list[tuple[list[int], SymmetryParams]]:
    """Find disjoint congruent groups mapped by a reflective, rotational, or
    translational symmetry. Deterministic; greedy over ascending indices."""
    idx = sorted(range(len(boxes)) if candidates is None else candidates)
    if len(idx) < 2:
        return []
    tol = SYM_TOL_FRAC * scene_diagonal([boxes[i] for i in idx])
    used: set[int] = set()
    out: list[tuple[list[int], SymmetryParams]] = []
    for i in idx:
        if i in used:
            continue
        cluster = [i] + [j for j in idx if j > i and j not in used and _congruent(boxes[i], boxes[j], tol)]
        if len(cluster) < 2:
            continue
        params = None
        if len(cluster) >= 3:
            params = _try_rotational(boxes, cluster, tol) or _try_translational(boxes, cluster, tol)
        if params is None and len(cluster) == 2:
            params = _try_translational(boxes, cluster, tol) or _try_reflective(boxes, cluster, tol)
        if params is not None:
            used.update(cluster)
            out.append((cluster, params))
    return out


# -- construction from boxes ----------------------------------------------


def _greedy_merge(alloc: _Alloc, boxes: list[OBB], items: list[tuple[int, list[int]]]) -> int:
    """Merge subtree roots pairwise by minimal centroid distance.

    items are (root_id, leaf part list); ties break on the lowest index pair.
    """
    items = list(items)
    while len(items) > 1:
        best = None
        for a in range(len(items)):
            for b in range(a + 1, len(items)):
                d = float(
                    np.linalg.norm(
                        _subtree_centroid(boxes, items[a][1]) - _subtree_centroid(boxes, items[b][1])
                    )
                )
                if best is None or d < best[0] - 1e-15:
                    best = (d, a, b)
        _, a, b = best
        nid = alloc.adj(items[a][0], items[b][0])
        merged = (nid, items[a][1] + items[b][1])
        items = [it for k, it in enumerate(items) if k not in (a, b)]
        items.append(merged)
    return items[0][0]


def greedy_build(boxes: list[OBB], rng: SeededRng | None = None) -> Hierarchy:
    """Bootstrap a hierarchy for a raw box set.

    Symmetry groups are detected first (congruent boxes mapped by a common
    symmetry) and collapsed into symmetry nodes; remaining subtrees merge
    greedily by centroid distance. Deterministic for a given box set.
    """
    if not boxes:
        raise StructureError("cannot build a hierarchy over zero boxes")
    alloc = _Alloc()
    leaf_ids = {p: alloc.leaf(p) for p in range(len(boxes))}
    if len(boxes) == 1:
        return Hierarchy(alloc.nodes, leaf_ids[0])
    items: list[tuple[int, list[int]]] = []
    grouped: set[int] = set()
    for members, params in detect_symmetry_groups(boxes):
        sub_items = [(leaf_ids[m], [m]) for m in members]
        sub_root = _greedy_merge(alloc, boxes, sub_items)
        items.append((alloc.sym(sub_root, params), list(members)))
        grouped.update(members)
    for p in range(len(boxes)):
        if p not in grouped:
            items.append((leaf_ids[p], [p]))
    root = _greedy_merge(alloc, boxes, items) if len(items) > 1 else items[0][0]
    return Hierarchy(alloc.nodes, root)


def link_groups(groups: list[Hierarchy]) -> tuple[Hierarchy, list[int]]:
    """Join per-group hierarchies under a left-deep adjacency chain.

    Part indices are re-based to be globally unique (group order, cumulative
    offsets). Returns the combined hierarchy and the per-part group id list.
    Groups must each cover a 0-based contiguous part range, or already be
    globally disjoint.
    """
    if len(groups) < 2:
        raise StructureError("need at least 2 groups to link")
    all_parts = [p for g in groups for p in g.leaf_parts()]
    disjoint = len(all_parts) == len(set(all_parts))
    rebase = not disjoint
    if rebase:
        for g in groups:
            if sorted(g.leaf_parts()) != list(range(g.part_count())):
                raise OverlappingPartIndices(
                    "groups overlap and are not 0-based contiguous, cannot re-base"
                )
    alloc = _Alloc()
    roots = []
    part_group: list[int] = []
    offset = 0
    for gi, g in enumerate(groups):
        remap: dict[int, int] = {}

        def rec(nid: int) -> int:
            node = g.nodes[nid]
            if node.kind == LEAF:
                part = node.part + offset if rebase else node.part
                return alloc.add(Node(LEAF, part=part))
            kids = tuple(rec(c) for c in node.children)
            return alloc.add(replace(node, children=kids))

        roots.append(rec(g.root))
        part_group.extend([gi] * g.part_count())
        offset += g.part_count()
    root = chain_adjacency(alloc, roots)
    return Hierarchy(alloc.nodes, root), part_group


# -- edits -----------------------------------------------------------------


def collapse_part_map(total: int, removed: set[int]) -> dict[int, int]:
    """Old part index -> new index after removing a part set (rank order)."""
    survivors = [p for p in range(total) if p not in removed]
    return {p: i for i, p in enumerate(survivors)}


def path_collapse(h: Hierarchy, removed: set[int]) -> Hierarchy:
    """Remove the given leaf parts; unary adjacency paths collapse, symmetry
    nodes whose group lost members are deleted with the child promoted.
    Surviving parts are re-based to 0..P'-1 by rank order."""
    total = h.part_count()
    if not removed:
        return h
    part_map = collapse_part_map(total, removed)
    if not part_map:
        raise AllPartsRemoved("every part was removed")
    alloc = _Alloc()

    def rec(nid: int) -> int | None:
        node = h.nodes[nid]
        if node.kind == LEAF:
            if node.part in removed:
                return None
            return alloc.add(Node(LEAF, part=part_map[node.part]))
        if node.kind == ADJACENCY:
            kids = [rec(c) for c in node.children]
            kids = [k for k in kids if k is not None]
            if not kids:
                return None
            if len(kids) == 1:
                return kids[0]
            return alloc.adj(kids[0], kids[1])
        # symmetry
        lost = any(h.nodes[n].kind == LEAF and h.nodes[n].part in removed for n in h.subtree_nodes(nid))
        child = rec(node.children[0])
        if child is None:
            return None
        if lost:
            return child
        return alloc.sym(child, node.sym)

    root = rec(h.root)
    return Hierarchy(alloc.nodes, root)


def _random_grouping(alloc: _Alloc, pool: list[int], rng: SeededRng) -> int:
    """Uniform random pairwise merges over subtree roots until one remains."""
    pool = list(pool)
    while len(pool) > 1:
        i, j = sorted(rng.np.choice(len(pool), size=2, replace=False).tolist())
        b = pool.pop(j)
        a = pool.pop(i)
        pool.append(alloc.adj(a, b))
    return pool[0]


def resample_subtree(
    h: Hierarchy,
    nid: int,
    rng: SeededRng,
    boxes: list[OBB] | None = None,
) -> Hierarchy:
    """Replace the internal organization under node nid with a random binary
    regrouping of its leaves; everything outside the subtree is untouched.

    With probability 0.5 (and boxes given), symmetry groups among the
    subtree's parts are re-detected first and kept as units.
    """
    return resample_subtrees(h, [nid], rng, boxes)


def resample_subtrees(
    h: Hierarchy,
    nids: list[int],
    rng: SeededRng,
    boxes: list[OBB] | None = None,
) -> Hierarchy:
    """Resample several disjoint subtrees in one rebuild (see resample_subtree).

    Each target node id is reused for its new subtree root so parents outside
    the resampled regions are bit-identical.
    """
    for nid in nids:
        if h.nodes[nid].kind == LEAF:
            raise NotInternal(f"node {nid} is a leaf")
    targets = set(nids)
    # Disjointness: no target may sit inside another target's subtree.
    for nid in nids:
        inside = set(h.subtree_nodes(nid)) - {nid}
        if inside & targets:
            raise StructureError("resample targets must be disjoint subtrees")

    alloc = _Alloc(start=max(h.nodes) + 1)

    def rebuild(nid: int) -> int:
        parts = h.subtree_leaf_parts(nid)
        leaf_map = {
            h.nodes[n].part: n
            for n in h.subtree_nodes(nid)
            if h.nodes[n].kind == LEAF
        }
        for p, leaf_id in leaf_map.items():
            alloc.add(h.nodes[leaf_id], leaf_id)
        pool: list[int] = []
        grouped: set[int] = set()
        if boxes is not None and rng.np.random() < 0.5:
            for members, params in detect_symmetry_groups(boxes, parts):
                sub = _random_grouping(alloc, [leaf_map[m] for m in members], rng)
                pool.append(alloc.sym(sub, params))
                grouped.update(members)
        pool.extend(leaf_map[p] for p in parts if p not in grouped)
        if len(pool) == 1:
            inner = pool[0]
            # Single unit: wrap is impossible at the original id unless the
            # unit itself was freshly allocated; re-add under the target id.
            node = alloc.nodes.pop(inner)
            return alloc.add(node, nid)
        # Merge down to two subtrees, then join them at the reused target id.
        while len(pool) > 2:
            i, j = sorted(rng.np.choice(len(pool), size=2, replace=False).tolist())
            b = pool.pop(j)
            a = pool.pop(i)
            pool.append(alloc.adj(a, b))
        return alloc.adj(pool[0], pool[1], nid)

    def rec(nid: int) -> int:
        if nid in targets:
            return rebuild(nid)
        node = h.nodes[nid]
        if node.kind == LEAF:
            return alloc.add(node, nid)
        kids = tuple(rec(c) for c in node.children)
        return alloc.add(replace(node, children=kids), nid)

    root = rec(h.root)
    return Hierarchy(alloc.nodes, root)


def unselected_atoms(h: Hierarchy, selected: list[int]) -> list[int]:
    """Maximal subtrees containing no selected node.

    The complement of a selection: these are the regions a rebuild around the
    selected nodes must leave untouched. Selecting nothing keeps the whole
    tree ([root])."""
    sel = set(selected)
    out: list[int] = []

    def rec(nid: int) -> None:
        sub = set(h.subtree_nodes(nid))
        if not (sub & sel):
            out.append(nid)
            return
        for c in h.nodes[nid].children:
            rec(c)

    rec(h.root)
    return out


def rebuild_keeping(
    h: Hierarchy,
    kept: list[int],
    rng: SeededRng,
    boxes: list[OBB] | None = None,
) -> Hierarchy:
    """Random global regroup that transplants the kept subtrees verbatim.

    kept must be a disjoint antichain (leaves allowed; empty means every leaf
    regroups on its own). Kept subtrees keep their node ids and enter the
    regroup as atomic units; all other structure dissolves. Unlike
    resample_subtrees this rebuilds the tree's top, so parts can regroup
    across the old root split. With probability 0.5 (and boxes given),
    symmetry groups among the free parts are re-detected and kept as units.
    The new root reuses h.root's id."""
    targets = set(kept)
    for nid in kept:
        inside = set(h.subtree_nodes(nid)) - {nid}
        if inside & targets:
            raise StructureError("kept nodes must be disjoint subtrees")
    if kept == [h.root] or (len(kept) == 1 and kept[0] == h.root):
        return h
    alloc = _Alloc(start=max(h.nodes) + 1)

    def copy(nid: int) -> int:
        node = h.nodes[nid]
        if node.kind == LEAF:
            return alloc.add(node, nid)
        kids = tuple(copy(c) for c in node.children)
        return alloc.add(replace(node, children=kids), nid)

    pool = [copy(nid) for nid in kept]
    covered: set[int] = set()
    for nid in kept:
        covered.update(h.subtree_leaf_parts(nid))
    leaf_id = {
        h.nodes[n].part: n for n in h.nodes if h.nodes[n].kind == LEAF
    }
    free = [p for p in h.leaf_parts() if p not in covered]
    grouped: set[int] = set()
    if boxes is not None and free and rng.np.random() < 0.5:
        for members, params in detect_symmetry_groups(boxes, free):
            ids = [alloc.add(h.nodes[leaf_id[p]], leaf_id[p]) for p in members]
            pool.append(alloc.sym(_random_grouping(alloc, ids, rng), params))
            grouped.update(members)
    pool.extend(alloc.add(h.nodes[leaf_id[p]], leaf_id[p]) for p in free if p not in grouped)
    if len(pool) == 1:
        node = alloc.nodes.pop(pool[0])
        return Hierarchy(alloc.nodes, alloc.add(node, h.root))
    while len(pool) > 2:
        i, j = sorted(rng.np.choice(len(pool), size=2, replace=False).tolist())
        b = pool.pop(j)
        a = pool.pop(i)
        pool.append(alloc.adj(a, b))
    root = alloc.adj(pool[0], pool[1], h.root)
    return Hierarchy(alloc.nodes, root)


def splice_subtree(h: Hierarchy, nid: int, fragment: Hierarchy) -> Hierarchy:
    """Replace the subtree at nid with a fragment (part indices must already
    be consistent with the surrounding tree). The fragment root takes id nid."""
    alloc = _Alloc(start=max(max(h.nodes), max(fragment.nodes)) + 1)

    def copy_fragment(fid: int, force_id: int | None = None) -> int:
        node = fragment.nodes[fid]
        if node.kind == LEAF:
            return alloc.add(node, force_id)
        kids = tuple(copy_fragment(c) for c in node.children)
        return alloc.add(replace(node, children=kids), force_id)

    def rec(cur: int) -> int:
        if cur == nid:
            return copy_fragment(fragment.root, cur)
        node = h.nodes[cur]
        if node.kind == LEAF:
            return alloc.add(node, cur)
        kids = tuple(rec(c) for c in node.children)
        return alloc.add(replace(node, children=kids), cur)

    root = rec(h.root)
    return Hierarchy(alloc.nodes, root)
