"""Two-stage training: code prior first, structure denoising second.

Stage one trains the recursive autoencoder with codebook snapping in the
decode path (straight-through gradients; the codebook itself moves toward the
embedded codes, the embedded codes are pulled toward their rows by a
commitment term). The first warmup_epochs run without snapping while the
embedding pair trains as a detached side autoencoder; the codebook is then
initialized by k-means over the embedded codes.

Stage two freezes the codebook and trains against structure-altered inputs:
the altered shape must decode back to the clean boxes it answers for, and at
every altered internal node the generative decoders plus the kind classifier
are taught to reproduce the matching clean node (its deepest clean ancestor
by leaf coverage). Clean (input, child) pairs across the whole clean tree are
included with detached inputs.

Gradients are assembled on a closure tape: every forward step appends a
backward closure; running the closures in reverse accumulates parameter
gradients and per-node vector gradients keyed by ("in" | "raw" | "eff", node).
Finite differences on a snap-frozen loss are the correctness oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from . import vq
from .geometry import OBB, obb_to_params
from .nn import AdamState, LrSchedule, adam_step, lr_schedule, mlp_backward, mlp_forward, softmax
from .rng import SeededRng
from .rvnn import KIND_ORDER, ModelBundle, decode_outer, encode_inner
from .structure import ADJACENCY, LEAF, Hierarchy, resample_subtree
from .synthdata import PerturbConfig, ShapeSample, perturb_structure


class TrainError(ValueError):
    pass


class StageOrder(TrainError):
    """Training stages must run in order (init -> vqvae -> dae)."""


@dataclass(frozen=True)
class TrainWeights:
    recon: float = 1.0
    vq: float = 1.0
    commit: float = 0.25
    classify: float = 0.2
    gen: float = 1.0


@dataclass
class LossBreakdown:
    """Unweighted per-bucket sums; total is the weighted training loss."""

    recon: float = 0.0
    vq: float = 0.0
    commit: float = 0.0
    classify: float = 0.0
    gen: float = 0.0
    total: float = 0.0

    def finalize(self, w: TrainWeights) -> "LossBreakdown":
        self.total = (
            w.recon * self.recon
            + w.vq * self.vq
            + w.commit * self.commit
            + w.classify * self.classify
            + w.gen * self.gen
        )
        return self


@dataclass(frozen=True)
class TrainConfig:
    epochs_vqvae: int = 300
    epochs_dae: int = 150
    batch_size: int = 50
    lr_vqvae: LrSchedule = field(default_factory=LrSchedule)
    lr_dae: LrSchedule = field(default_factory=LrSchedule)
    warmup_epochs: int = 20
    weights: TrainWeights = field(default_factory=TrainWeights)
    alterations_per_shape: int = 3
    min_steps_per_epoch: int = 1
    reseed_dead_codes: bool = True
    perturb: PerturbConfig = field(default_factory=PerturbConfig)


def desk_train_config(epochs_vqvae: int = 60, epochs_dae: int = 40) -> TrainConfig:
    """Small-run settings: tiny batches and a faster schedule so a desk-scale
    dataset still sees enough update steps per stage."""

    def sched(epochs: int) -> LrSchedule:
        m1 = max(1, (2 * epochs) // 3)
        m2 = max(m1 + 1, (9 * epochs) // 10)
        return LrSchedule(rates=(1e-3, 3e-4, 1e-4), milestones=(m1, m2))

    return TrainConfig(
        epochs_vqvae=epochs_vqvae,
        epochs_dae=epochs_dae,
        batch_size=8,
        lr_vqvae=sched(epochs_vqvae),
        lr_dae=sched(epochs_dae),
        warmup_epochs=max(1, min(12, epochs_vqvae // 5)),
        min_steps_per_epoch=4,
    )


# -- gradient containers -------------------------------------------------------


class Grads:
    """Parameter gradients laid out like ModelBundle.all_params()."""

    def __init__(self, m: ModelBundle):
        self.nets = {
            name: [np.zeros_like(p) for p in net.params()] for name, net in m.nets.items()
        }
        self.codebook = np.zeros_like(m.codebook)

    def add_mlp(self, name: str, dws, dbs) -> None:
        acc = self.nets[name]
        for i, (dw, db) in enumerate(zip(dws, dbs)):
            acc[2 * i] += dw
            acc[2 * i + 1] += db

    def add(self, other: "Grads") -> None:
        for name, arrs in other.nets.items():
            for a, b in zip(self.nets[name], arrs):
                a += b
        self.codebook += other.codebook

    def scale(self, s: float) -> None:
        for arrs in self.nets.values():
            for a in arrs:
                a *= s
        self.codebook *= s

    def flat(self, include_codebook: bool = True) -> list[np.ndarray]:
        out = [g for name in sorted(self.nets) for g in self.nets[name]]
        if include_codebook:
            out.append(self.codebook)
        return out


class GradStore:
    """Vector gradients keyed by (slot, node id), accumulated until popped."""

    def __init__(self):
        self._g: dict[tuple[str, int], np.ndarray] = {}

    def add(self, key, g) -> None:
        cur = self._g.get(key)
        self._g[key] = g.copy() if cur is None else cur + g

    def pop(self, key):
        return self._g.pop(key, None)

    def leftovers(self):
        return sorted(self._g)


def _run_backward(m: ModelBundle, ops: list) -> Grads:
    store = GradStore()
    pg = Grads(m)
    for op in reversed(ops):
        op(store, pg)
    left = store.leftovers()
    if left:
        raise TrainError(f"unconsumed gradients for {left[:4]}")
    return pg


# -- taped forward pieces --------------------------------------------------------


def _encode_taped(m: ModelBundle, boxes: list[OBB], h: Hierarchy, ops: list) -> dict[int, np.ndarray]:
    d = m.config.d_code
    inner: dict[int, np.ndarray] = {}
    for nid in h.post_order():
        node = h.nodes[nid]
        if node.kind == LEAF:
            y, tape = mlp_forward(m.nets["box_enc"], obb_to_params(boxes[node.part]))
            inner[nid] = y

            def op(store, pg, nid=nid, tape=tape):
                g = store.pop(("in", nid))
                if g is None:
                    return
                dws, dbs, _ = mlp_backward(m.nets["box_enc"], tape, g)
                pg.add_mlp("box_enc", dws, dbs)

        elif node.kind == ADJACENCY:
            l, r = node.children
            y, tape = mlp_forward(m.nets["inner_adj"], np.concatenate([inner[l], inner[r]]))
            inner[nid] = y

            def op(store, pg, nid=nid, tape=tape, l=l, r=r):
                g = store.pop(("in", nid))
                if g is None:
                    return
                dws, dbs, dx = mlp_backward(m.nets["inner_adj"], tape, g)
                pg.add_mlp("inner_adj", dws, dbs)
                store.add(("in", l), dx[:d])
                store.add(("in", r), dx[d:])

        else:
            c = node.children[0]
            x = np.concatenate([inner[c], node.sym.to_vec()])
            y, tape = mlp_forward(m.nets["inner_sym"], x)
            inner[nid] = y

            def op(store, pg, nid=nid, tape=tape, c=c):
                g = store.pop(("in", nid))
                if g is None:
                    return
                dws, dbs, dx = mlp_backward(m.nets["inner_sym"], tape, g)
                pg.add_mlp("inner_sym", dws, dbs)
                store.add(("in", c), dx[:d])

        ops.append(op)
    return inner


@dataclass
class FrozenVq:
    """Snap state captured at a base point, for smooth finite differencing."""

    k: int
    z_base: np.ndarray
    e_base: np.ndarray


def _vq_taped(m, ops, nid, raw_vec, w, mode, fz, lb, aux) -> np.ndarray:
    """Effective outer code of an internal non-root node, with backward op.

    mode "snap": quantized path, codebook and commitment terms train.
    mode "warmup": identity main path; the embedding pair trains as a
    detached side autoencoder (counts into the vq bucket).
    Stage two routes through _vq_teacher instead.
    """
    in_code = m.config.vq_in_code_space

    if mode == "warmup":
        if not in_code:
            # The side autoencoder input is detached; fz (an ndarray here)
            # pins it for finite differencing.
            raw_const = fz if fz is not None else raw_vec.copy()
            z, t_enc = mlp_forward(m.nets["vq_enc"], raw_const)
            r, t_dec = mlp_forward(m.nets["vq_dec"], z)
            diff = r - raw_const
            lb.vq += float(diff @ diff)
            aux["embeddings"][nid] = z.copy()

            def op(store, pg, nid=nid, t_enc=t_enc, t_dec=t_dec, diff=diff):
                g = store.pop(("eff", nid))
                if g is not None:
                    store.add(("raw", nid), g)
                dws, dbs, dz = mlp_backward(m.nets["vq_dec"], t_dec, (2.0 * w.vq) * diff)
                pg.add_mlp("vq_dec", dws, dbs)
                dws, dbs, _ = mlp_backward(m.nets["vq_enc"], t_enc, dz)
                pg.add_mlp("vq_enc", dws, dbs)

        else:
            aux["embeddings"][nid] = raw_vec.copy()

            def op(store, pg, nid=nid):
                g = store.pop(("eff", nid))
                if g is not None:
                    store.add(("raw", nid), g)

        ops.append(op)
        return raw_vec

    if in_code:
        z, t_enc = raw_vec, None
    else:
        z, t_enc = mlp_forward(m.nets["vq_enc"], raw_vec)
    if fz is not None:
        k = fz.k
        e = m.codebook[k].copy()
        eff_in = z + (fz.e_base - fz.z_base)
        commit_ref, cb_ref = fz.e_base, fz.z_base
    else:
        k, e = vq.snap(m.codebook, z)
        eff_in = e
        commit_ref, cb_ref = e, z
    if in_code:
        eff, t_dec = eff_in, None
    else:
        eff, t_dec = mlp_forward(m.nets["vq_dec"], eff_in)

    dzq = z - e
    aux["evq"][nid] = float(dzq @ dzq)
    aux["snap_index"][nid] = k
    aux["embeddings"][nid] = np.asarray(z, dtype=float).copy()
    dcb = cb_ref - e
    lb.vq += float(dcb @ dcb)
    dcm = z - commit_ref
    lb.commit += float(dcm @ dcm)

    def op(store, pg, nid=nid, k=k, t_enc=t_enc, t_dec=t_dec,
           z=np.asarray(z, dtype=float).copy(), e=e.copy(),
           commit_ref=np.asarray(commit_ref, dtype=float).copy(),
           cb_ref=np.asarray(cb_ref, dtype=float).copy()):
        g = store.pop(("eff", nid))
        if g is None:
            dz = np.zeros_like(z)
        elif t_dec is None:
            dz = g.copy()
        else:
            dws, dbs, dz = mlp_backward(m.nets["vq_dec"], t_dec, g)
            pg.add_mlp("vq_dec", dws, dbs)
        dz = dz + (2.0 * w.commit) * (z - commit_ref)
        pg.codebook[k] += (2.0 * w.vq) * (e - cb_ref)
        if t_enc is None:
            store.add(("raw", nid), dz)
        else:
            dws, dbs, dx = mlp_backward(m.nets["vq_enc"], t_enc, dz)
            pg.add_mlp("vq_enc", dws, dbs)
            store.add(("raw", nid), dx)

    ops.append(op)
    return eff


def _vq_teacher(m, ops, nid, raw_vec, w, teacher_eff, anchor_k, anchor_e, lb, aux) -> np.ndarray:
    """Stage-2 effective code: teacher-forced to the clean cover's effective
    code, so the decode side always sees valid context. The commitment term
    pulls the noisy embedding toward the cover's codebook entry (anchor),
    teaching nearest-neighbor snapping to land on the right row at test time.
    Covers without an entry (clean root or leaf) get no anchor.
    """
    if m.config.vq_in_code_space:
        z, t_enc = raw_vec, None
    else:
        z, t_enc = mlp_forward(m.nets["vq_enc"], raw_vec)
    aux["embeddings"][nid] = np.asarray(z, dtype=float).copy()
    if anchor_e is not None:
        dzq = z - anchor_e
        aux["evq"][nid] = float(dzq @ dzq)
        aux["snap_index"][nid] = anchor_k
        lb.commit += float(dzq @ dzq)

    def op(store, pg, nid=nid, t_enc=t_enc,
           z=np.asarray(z, dtype=float).copy(), anchor_e=anchor_e):
        store.pop(("eff", nid))  # the teacher code is constant
        if anchor_e is None:
            return
        dz = (2.0 * w.commit) * (z - anchor_e)
        if t_enc is None:
            store.add(("raw", nid), dz)
        else:
            dws, dbs, dx = mlp_backward(m.nets["vq_enc"], t_enc, dz)
            pg.add_mlp("vq_enc", dws, dbs)
            store.add(("raw", nid), dx)

    ops.append(op)
    return teacher_eff


def _decode_taped(m, h, inner, ops, w, lb, mode, frozen_vq, aux, sym_recon=True, teacher=None):
    d = m.config.d_code
    raw: dict[int, np.ndarray] = {h.root: inner[h.root]}
    eff: dict[int, np.ndarray] = {h.root: inner[h.root]}

    def root_op(store, pg):
        total = None
        for slot in ("eff", "raw"):
            g = store.pop((slot, h.root))
            if g is not None:
                total = g if total is None else total + g
        if total is not None:
            store.add(("in", h.root), total)

    ops.append(root_op)
    for pid in h.pre_order():
        node = h.nodes[pid]
        if node.kind == LEAF:
            continue
        if node.kind == ADJACENCY:
            l, r = node.children
            ol, tl = mlp_forward(m.nets["outer_adj"], np.concatenate([eff[pid], inner[r]]))
            raw[l] = ol[:d]
            orr, tr = mlp_forward(m.nets["outer_adj"], np.concatenate([eff[pid], inner[l]]))
            raw[r] = orr[d:]

            def op(store, pg, pid=pid, l=l, r=r, tl=tl, tr=tr):
                for cid, tape, lo in ((l, tl, 0), (r, tr, d)):
                    g = store.pop(("raw", cid))
                    if g is None:
                        continue
                    dy = np.zeros(2 * d)
                    dy[lo:lo + d] = g
                    dws, dbs, dx = mlp_backward(m.nets["outer_adj"], tape, dy)
                    pg.add_mlp("outer_adj", dws, dbs)
                    store.add(("eff", pid), dx[:d])
                    store.add(("in", r if cid == l else l), dx[d:])

            ops.append(op)
            kids = (l, r)
        else:
            c = node.children[0]
            o, tape = mlp_forward(m.nets["outer_sym"], np.concatenate([eff[pid], inner[c]]))
            raw[c] = o[:d]
            sym_diff = o[d:] - node.sym.to_vec()
            if sym_recon:
                lb.recon += float(sym_diff @ sym_diff)

            def op(store, pg, pid=pid, c=c, tape=tape, sym_diff=sym_diff):
                g = store.pop(("raw", c))
                dy = np.zeros(d + sym_diff.size)
                if g is not None:
                    dy[:d] = g
                if sym_recon:
                    dy[d:] = (2.0 * w.recon) * sym_diff
                dws, dbs, dx = mlp_backward(m.nets["outer_sym"], tape, dy)
                pg.add_mlp("outer_sym", dws, dbs)
                store.add(("eff", pid), dx[:d])
                store.add(("in", c), dx[d:])

            ops.append(op)
            kids = (c,)
        for c in kids:
            if h.nodes[c].kind == LEAF:
                eff[c] = raw[c]

                def op(store, pg, c=c):
                    g = store.pop(("eff", c))
                    if g is not None:
                        store.add(("raw", c), g)

                ops.append(op)
            elif mode == "dae":
                t_eff, anchor_k, anchor_e = teacher[c]
                eff[c] = _vq_teacher(m, ops, c, raw[c], w, t_eff, anchor_k, anchor_e, lb, aux)
            else:
                fz = frozen_vq.get(c) if frozen_vq else None
                eff[c] = _vq_taped(m, ops, c, raw[c], w, mode, fz, lb, aux)
    return raw, eff


def _box_term(m, ops, nid, inner_vec, eff_vec, target_params, weight, slot="eff") -> float:
    """Squared error of a decoded box against target params, with backward."""
    d = m.config.d_code
    y, tape = mlp_forward(m.nets["box_dec"], np.concatenate([inner_vec, eff_vec]))
    diff = y - target_params

    def op(store, pg, nid=nid, tape=tape, diff=diff, slot=slot):
        dws, dbs, dx = mlp_backward(m.nets["box_dec"], tape, (2.0 * weight) * diff)
        pg.add_mlp("box_dec", dws, dbs)
        store.add(("in", nid), dx[:d])
        store.add((slot, nid), dx[d:])

    ops.append(op)
    return float(diff @ diff)


def _classify_term(m, ops, nid, x, kind_idx, weight, slot="eff") -> float:
    d = m.config.d_code
    logits, tape = mlp_forward(m.nets["classifier"], x)
    p = softmax(logits)
    dy = p.copy()
    dy[kind_idx] -= 1.0

    def op(store, pg, nid=nid, tape=tape, dy=dy, slot=slot):
        dws, dbs, dx = mlp_backward(m.nets["classifier"], tape, weight * dy)
        pg.add_mlp("classifier", dws, dbs)
        if nid is not None:
            store.add(("in", nid), dx[:d])
            store.add((slot, nid), dx[d:])

    ops.append(op)
    return -math.log(max(float(p[kind_idx]), 1e-300))


def _gen_term(m, ops, net_name, nid, x, target, weight, slot="eff") -> float:
    d = m.config.d_code
    y, tape = mlp_forward(m.nets[net_name], x)
    diff = y - target

    def op(store, pg, nid=nid, tape=tape, diff=diff, net_name=net_name, slot=slot):
        dws, dbs, dx = mlp_backward(m.nets[net_name], tape, (2.0 * weight) * diff)
        pg.add_mlp(net_name, dws, dbs)
        if nid is not None:
            store.add(("in", nid), dx[:d])
            store.add((slot, nid), dx[d:])

    ops.append(op)
    return float(diff @ diff)


# -- stage 1 loss -----------------------------------------------------------------


def vqvae_loss(
    m: ModelBundle,
    boxes: list[OBB],
    h: Hierarchy,
    w: TrainWeights = TrainWeights(),
    mode: str = "snap",
    frozen: dict[int, FrozenVq] | None = None,
) -> tuple[LossBreakdown, Grads, dict]:
    """Reconstruction plus prior terms for one shape; returns full gradients.

    mode "warmup" disables snapping and trains the embedding pair on the side;
    frozen pins the discontinuous pieces for finite differencing: snap rows
    and quantization offsets in snap mode (freeze_snap_state), the detached
    side-autoencoder inputs in warmup mode (freeze_warmup_state).
    """
    ops: list = []
    lb = LossBreakdown()
    aux = {"snap_index": {}, "embeddings": {}, "evq": {}}
    inner = _encode_taped(m, boxes, h, ops)
    _, eff = _decode_taped(m, h, inner, ops, w, lb, mode, frozen, aux)
    for nid in h.leaves():
        target = obb_to_params(boxes[h.nodes[nid].part])
        lb.recon += _box_term(m, ops, nid, inner[nid], eff[nid], target, w.recon)
    lb.finalize(w)
    return lb, _run_backward(m, ops), aux


def freeze_warmup_state(m: ModelBundle, boxes: list[OBB], h: Hierarchy) -> dict[int, np.ndarray]:
    """Pinned raw outer codes for differencing the warmup-mode loss."""
    inner = encode_inner(m, boxes, h)
    outer = decode_outer(m, h, inner, snap_on=False)
    return {
        nid: outer.raw[nid].copy()
        for nid in h.internal_nodes()
        if nid != h.root
    }


def freeze_snap_state(m: ModelBundle, boxes: list[OBB], h: Hierarchy) -> dict[int, FrozenVq]:
    inner = encode_inner(m, boxes, h)
    outer = decode_outer(m, h, inner, snap_on=True)
    out = {}
    for nid in h.internal_nodes():
        if nid == h.root:
            continue
        z = vq.embed(m, outer.raw[nid])
        k, e = vq.snap(m.codebook, z)
        out[nid] = FrozenVq(k=k, z_base=z.copy(), e_base=e.copy())
    return out


# -- stage 2 loss -----------------------------------------------------------------


@dataclass
class CleanTargets:
    """Detached clean-shape codes used as teacher-forcing targets.

    snap_index/entry record, per clean internal non-root node, the codebook
    row it snaps to and a copy of that row: stage two anchors noisy codes to
    these entries, so a frozen CleanTargets pins the whole quantized side.
    """

    inner: dict[int, np.ndarray]
    eff: dict[int, np.ndarray]
    snap_index: dict[int, int]
    entry: dict[int, np.ndarray]


@dataclass
class FrozenDae:
    targets: CleanTargets


def clean_targets(m: ModelBundle, boxes: list[OBB], h: Hierarchy) -> CleanTargets:
    inner = encode_inner(m, boxes, h)
    outer = decode_outer(m, h, inner, snap_on=True)
    return CleanTargets(
        inner={k: v.copy() for k, v in inner.items()},
        eff={k: v.copy() for k, v in outer.eff.items()},
        snap_index=dict(outer.snap_index),
        entry={nid: m.codebook[k].copy() for nid, k in outer.snap_index.items()},
    )


def freeze_dae_state(m, clean_boxes, h_c) -> FrozenDae:
    return FrozenDae(targets=clean_targets(m, clean_boxes, h_c))


def minimal_superset_node(h_c: Hierarchy, leafsets: dict[int, frozenset], mapped: set[int]) -> int:
    """Deepest clean node whose leaf parts cover the mapped part set."""
    best, best_depth = h_c.root, -1
    for nid, parts in leafsets.items():
        if mapped <= parts:
            dep = h_c.depth(nid)
            if dep > best_depth or (dep == best_depth and nid < best):
                best, best_depth = nid, dep
    return best


def _kind_index(kind: str) -> int:
    return KIND_ORDER.index(kind)


def dae_loss(
    m: ModelBundle,
    clean_boxes: list[OBB],
    h_c: Hierarchy,
    noisy_boxes: list[OBB],
    h_n: Hierarchy,
    clean_map: dict[int, int],
    w: TrainWeights = TrainWeights(),
    frozen: FrozenDae | None = None,
) -> tuple[LossBreakdown, Grads, dict]:
    """Structure-denoising loss for one (clean, altered) pair.

    Each altered internal node is covered by the deepest clean node whose
    parts contain its own. The decode side is teacher-forced: effective
    outer codes come from the covers' clean codes (codebook frozen), while
    the commitment term pulls noisy embeddings toward the covers' entries,
    so test-time snapping learns to pick the corresponding clean row.
    Altered boxes decode back to the clean boxes their parts answer for;
    every altered internal node additionally drives the kind classifier and
    the generative decoders toward its cover; clean-tree teacher pairs are
    added with detached inputs.
    """
    targets = frozen.targets if frozen else clean_targets(m, clean_boxes, h_c)
    leafsets = {nid: frozenset(h_c.subtree_leaf_parts(nid)) for nid in h_c.nodes}
    cover = {
        nid: minimal_superset_node(
            h_c, leafsets, {clean_map[p] for p in h_n.subtree_leaf_parts(nid)}
        )
        for nid in h_n.internal_nodes()
    }
    teacher = {}
    for nid, tid in cover.items():
        if nid == h_n.root:
            continue
        k = targets.snap_index.get(tid)
        teacher[nid] = (targets.eff[tid], k, targets.entry.get(tid))

    ops: list = []
    lb = LossBreakdown()
    aux = {"snap_index": {}, "embeddings": {}, "evq": {}}
    inner = _encode_taped(m, noisy_boxes, h_n, ops)
    raw, eff = _decode_taped(m, h_n, inner, ops, w, lb, "dae", None, aux, teacher=teacher)
    for nid in h_n.leaves():
        target = obb_to_params(clean_boxes[clean_map[h_n.nodes[nid].part]])
        lb.recon += _box_term(m, ops, nid, inner[nid], eff[nid], target, w.recon)

    def child_pair_target(tid: int) -> np.ndarray:
        node = h_c.nodes[tid]
        if node.kind == ADJACENCY:
            l, r = node.children
            return np.concatenate(
                [targets.inner[l], targets.eff[l], targets.inner[r], targets.eff[r]]
            )
        c = node.children[0]
        return np.concatenate([targets.inner[c], targets.eff[c], node.sym.to_vec()])

    # Bridge: altered codes must classify and generate like their clean cover.
    # Inputs take the un-snapped outer: at test time synthesis fires exactly
    # when snapping failed to explain a node, so the raw code is what the
    # generative nets will see.
    for nid in h_n.internal_nodes():
        tid = cover[nid]
        tnode = h_c.nodes[tid]
        x = np.concatenate([inner[nid], raw[nid]])
        lb.classify += _classify_term(m, ops, nid, x, _kind_index(tnode.kind), w.classify, slot="raw")
        if tnode.kind == LEAF:
            target = obb_to_params(clean_boxes[tnode.part])
            lb.gen += _box_term(m, ops, nid, inner[nid], raw[nid], target, w.gen, slot="raw")
        elif tnode.kind == ADJACENCY:
            lb.gen += _gen_term(m, ops, "gen_adj", nid, x, child_pair_target(tid), w.gen, slot="raw")
        else:
            lb.gen += _gen_term(m, ops, "gen_sym", nid, x, child_pair_target(tid), w.gen, slot="raw")

    # Clean-tree teacher pairs, inputs detached.
    for tid in h_c.pre_order():
        tnode = h_c.nodes[tid]
        x = np.concatenate([targets.inner[tid], targets.eff[tid]])
        lb.classify += _classify_term(m, ops, None, x, _kind_index(tnode.kind), w.classify)
        if tnode.kind == ADJACENCY:
            lb.gen += _gen_term(m, ops, "gen_adj", None, x, child_pair_target(tid), w.gen)
        elif tnode.kind != LEAF:
            lb.gen += _gen_term(m, ops, "gen_sym", None, x, child_pair_target(tid), w.gen)

    lb.finalize(w)
    return lb, _run_backward(m, ops), aux


# -- training loops ----------------------------------------------------------------


@dataclass
class TrainLog:
    stage: str
    history: list[dict]

    def last(self) -> dict:
        return self.history[-1]


def _epoch_order(n: int, cfg: TrainConfig, rng: SeededRng) -> list[int]:
    need = max(n, cfg.batch_size * cfg.min_steps_per_epoch)
    order: list[int] = []
    while len(order) < need:
        order.extend(rng.shuffle(list(range(n))))
    return order


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def _mean_breakdown(items: list[LossBreakdown]) -> dict:
    n = max(1, len(items))
    return {
        "recon": sum(b.recon for b in items) / n,
        "vq": sum(b.vq for b in items) / n,
        "commit": sum(b.commit for b in items) / n,
        "classify": sum(b.classify for b in items) / n,
        "gen": sum(b.gen for b in items) / n,
        "total": sum(b.total for b in items) / n,
    }


def _net_params(m: ModelBundle) -> list[np.ndarray]:
    return [p for name in sorted(m.nets) for p in m.nets[name].params()]


def init_codebook_kmeans(m: ModelBundle, shapes: list[ShapeSample], rng: SeededRng) -> int:
    """k-means over the embedded outer codes of the dataset; returns the
    number of embedding points used."""
    pts = []
    for s in shapes:
        inner = encode_inner(m, s.boxes, s.hierarchy)
        outer = decode_outer(m, s.hierarchy, inner, snap_on=False)
        for nid in s.hierarchy.internal_nodes():
            if nid != s.hierarchy.root:
                pts.append(vq.embed(m, outer.raw[nid]))
    k = m.config.codebook_size
    if not pts:
        return 0
    x = np.asarray(pts, dtype=float)
    if len(x) < k:
        extra = rng.integers(0, len(x), size=k - len(x))
        pad = x[extra] + rng.normal(0.0, 1e-3, size=(k - len(x), x.shape[1]))
        x = np.vstack([x, pad])
    cent, _ = kmeans2(x, k, minit="++", iter=20, rng=np.random.default_rng(int(rng.integers(2**31 - 1))))
    m.codebook[:] = cent
    return len(pts)


def _reseed_dead_codes(m: ModelBundle, usage: np.ndarray, reservoir: list[np.ndarray], rng: SeededRng) -> int:
    if not reservoir:
        return 0
    dead = np.flatnonzero(usage == 0)
    for k in dead:
        pick = reservoir[int(rng.integers(0, len(reservoir)))]
        m.codebook[k] = pick + rng.normal(0.0, 1e-3, size=pick.shape)
    return len(dead)


def train_vqvae(
    m: ModelBundle,
    shapes: list[ShapeSample],
    cfg: TrainConfig,
    seed: int = 0,
    progress=None,
) -> TrainLog:
    """Stage one. Mutates the model in place; sets stage to "vqvae"."""
    m.require_stage("init")
    if not shapes:
        raise TrainError("empty training set")
    rng = SeededRng(seed).derive("train", "vqvae")
    params = _net_params(m) + [m.codebook]
    adam = AdamState.for_params(params)
    history: list[dict] = []
    for epoch in range(cfg.epochs_vqvae):
        mode = "warmup" if epoch < cfg.warmup_epochs else "snap"
        if epoch == cfg.warmup_epochs:
            init_codebook_kmeans(m, shapes, rng.derive("kmeans"))
        lr = lr_schedule(epoch, cfg.lr_vqvae)
        order = _epoch_order(len(shapes), cfg, rng.derive("order", epoch))
        usage = np.zeros(m.config.codebook_size, dtype=int)
        reservoir: list[np.ndarray] = []
        res_rng = rng.derive("reservoir", epoch)
        stats: list[LossBreakdown] = []
        for batch in _chunks(order, cfg.batch_size):
            total = Grads(m)
            for idx in batch:
                s = shapes[idx]
                lb, g, aux = vqvae_loss(m, s.boxes, s.hierarchy, cfg.weights, mode=mode)
                total.add(g)
                stats.append(lb)
                for k in aux["snap_index"].values():
                    usage[k] += 1
                for z in aux["embeddings"].values():
                    if len(reservoir) < 1024:
                        reservoir.append(z)
                    elif res_rng.uniform() < 0.05:
                        reservoir[int(res_rng.integers(0, len(reservoir)))] = z
            total.scale(1.0 / len(batch))
            adam_step(adam, params, total.flat(include_codebook=True), lr)
        if mode == "snap" and cfg.reseed_dead_codes:
            _reseed_dead_codes(m, usage, reservoir, rng.derive("reseed", epoch))
        row = {"epoch": epoch, "stage": "vqvae", "mode": mode, "lr": lr,
               "n_samples": len(order), **_mean_breakdown(stats)}
        history.append(row)
        if progress:
            progress(f"vqvae epoch {epoch}: total {row['total']:.5f} recon {row['recon']:.5f}")
    m.stage = "vqvae"
    m.meta["vqvae"] = {"epochs": cfg.epochs_vqvae, "shapes": len(shapes), "seed": seed}
    return TrainLog(stage="vqvae", history=history)


def _altered_pair(s: ShapeSample, rng: SeededRng, cfg: TrainConfig):
    """One structure-altered copy of a clean shape for denoising training."""
    h = s.hierarchy
    internal = h.internal_nodes()
    nid = int(rng.choice(internal))
    h_alt = resample_subtree(h, nid, rng.derive("resample"), boxes=s.boxes)
    return perturb_structure(s.boxes, h_alt, rng.derive("perturb"), cfg.perturb)


def train_dae(
    m: ModelBundle,
    shapes: list[ShapeSample],
    cfg: TrainConfig,
    seed: int = 0,
    progress=None,
) -> TrainLog:
    """Stage two. The discrete prior learned in stage one (codebook plus the
    embedding pair) stays bit-identical; only the geometry-facing nets move.
    Sets stage to "dae"."""
    m.require_stage("vqvae")
    if not shapes:
        raise TrainError("empty training set")
    rng = SeededRng(seed).derive("train", "dae")
    cb_before = m.codebook.copy()
    frozen_nets = ("vq_enc", "vq_dec")
    pinned = [p.copy() for name in frozen_nets for p in m.nets[name].params()]
    params = _net_params(m)
    adam = AdamState.for_params(params)
    history: list[dict] = []
    # The stage-1 model's clean codes and snap assignments ARE the prior;
    # freeze them up front so every pair anchors to the same entries.
    frozen = [freeze_dae_state(m, s.boxes, s.hierarchy) for s in shapes]
    for epoch in range(cfg.epochs_dae):
        lr = lr_schedule(epoch, cfg.lr_dae)
        specs = [
            (i, j)
            for i in range(len(shapes))
            for j in range(cfg.alterations_per_shape)
        ]
        if not specs:
            raise TrainError("alterations_per_shape must be at least 1")
        rng.derive("order", epoch).shuffle(specs)
        need = max(len(specs), cfg.batch_size * cfg.min_steps_per_epoch)
        while len(specs) < need:
            specs = specs + specs
        specs = specs[:need]
        stats: list[LossBreakdown] = []
        for batch in _chunks(specs, cfg.batch_size):
            total = Grads(m)
            for i, j in batch:
                s = shapes[i]
                arng = rng.derive("alter", epoch, i, j)
                nb, nh, cmap = _altered_pair(s, arng, cfg)
                lb, g, _ = dae_loss(
                    m, s.boxes, s.hierarchy, nb, nh, cmap, cfg.weights, frozen=frozen[i]
                )
                total.add(g)
                stats.append(lb)
            total.scale(1.0 / len(batch))
            # Commitment still backpropagates THROUGH the embedding net into
            # the outer cascade, but the embedding itself must not bend toward
            # the noise: a fixed embedding keeps the node objective comparable
            # across inputs, which the fusion driver relies on.
            for name in frozen_nets:
                for g in total.nets[name]:
                    g[:] = 0.0
            adam_step(adam, params, total.flat(include_codebook=False), lr)
        row = {"epoch": epoch, "stage": "dae", "mode": "dae", "lr": lr,
               "n_samples": len(specs), **_mean_breakdown(stats)}
        history.append(row)
        if progress:
            progress(f"dae epoch {epoch}: total {row['total']:.5f} recon {row['recon']:.5f}")
    if not np.array_equal(cb_before, m.codebook):
        raise TrainError("codebook changed during structure-denoising stage")
    now = [p for name in frozen_nets for p in m.nets[name].params()]
    if any(not np.array_equal(a, b) for a, b in zip(pinned, now)):
        raise TrainError("embedding nets changed during structure-denoising stage")
    m.stage = "dae"
    m.meta["dae"] = {"epochs": cfg.epochs_dae, "shapes": len(shapes), "seed": seed}
    return TrainLog(stage="dae", history=history)
