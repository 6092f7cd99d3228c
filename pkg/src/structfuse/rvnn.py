"""Recursive encoder/decoder over part hierarchies.

Bottom-up: leaf boxes encode to fixed-width inner codes, adjacency nodes merge
two child inners, symmetry nodes merge the child inner with the 8-number
symmetry record. Top-down: the root's outer code is its inner code; every
other node's outer code is decoded from its parent's outer code plus the
sibling inner (for symmetry children, their own inner). Leaf boxes decode
from the concatenated inner and outer code of the leaf.

Between decode steps the outer code of an internal non-root node can be
snapped to the nearest codebook entry (see vq module); the snapped version is
what the children are decoded from.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import vq
from .geometry import OBB, DegenerateAxes, obb_to_params, params_to_obb
from .nn import Mlp, mlp_forward, mlp_init, softmax
from .rng import SeededRng
from .structure import ADJACENCY, LEAF, SYMMETRY, Hierarchy


class ModelError(ValueError):
    pass


class UntrainedModel(ModelError):
    """The requested operation needs a trained model stage."""


class MissingInner(ModelError):
    """decode_outer needs inner codes for every node in the hierarchy."""


# Classifier output order for generated nodes.
KIND_ORDER = (LEAF, ADJACENCY, SYMMETRY)
SYM_WIDTH = 8
BOX_WIDTH = 12


@dataclass(frozen=True)
class ModelConfig:
    """Network widths. Defaults are desk scale; paper_config() for full size."""

    d_code: int = 32
    d_hidden: int = 100
    d_vq: int = 8
    codebook_size: int = 256
    vq_in_code_space: bool = False
    translational_copies: int = 2

    @staticmethod
    def paper_config() -> "ModelConfig":
        return ModelConfig(d_code=80, d_hidden=200, d_vq=8, codebook_size=2048)

    def net_dims(self) -> dict[str, tuple[int, ...]]:
        d, h = self.d_code, self.d_hidden
        dims = {
            "box_enc": (BOX_WIDTH, h, h, d),
            "inner_adj": (2 * d, h, h, d),
            "inner_sym": (d + SYM_WIDTH, h, h, d),
            "outer_adj": (2 * d, h, h, 2 * d),
            "outer_sym": (2 * d, h, h, d + SYM_WIDTH),
            "box_dec": (2 * d, h, h, BOX_WIDTH),
            "classifier": (2 * d, h, len(KIND_ORDER)),
            "gen_adj": (2 * d, h, h, 4 * d),
            "gen_sym": (2 * d, h, h, 2 * d + SYM_WIDTH),
        }
        if not self.vq_in_code_space:
            dims["vq_enc"] = (d, h, self.d_vq)
            dims["vq_dec"] = (self.d_vq, h, d)
        return dims

    @property
    def codebook_dim(self) -> int:
        return self.d_code if self.vq_in_code_space else self.d_vq


@dataclass
class AblationFlags:
    """Test-time wiring variants; all off reproduces the full method."""

    no_vq: bool = False
    no_resampling: bool = False
    no_sibling_inner: bool = False
    inner_outer_concat: bool = False
    no_inner_for_leaves: bool = False

    def label(self) -> str:
        on = [k for k, v in self.__dict__.items() if v]
        return "full" if not on else "+".join(on)


@dataclass
class ModelBundle:
    config: ModelConfig
    nets: dict[str, Mlp]
    codebook: np.ndarray  # (K, codebook_dim)
    stage: str = "init"  # init -> vqvae -> dae
    meta: dict = field(default_factory=dict)

    def require_stage(self, *stages: str) -> None:
        if self.stage not in stages:
            raise UntrainedModel(f"model stage {self.stage!r}, need one of {stages}")

    def all_params(self) -> dict[str, list[np.ndarray]]:
        out = {name: net.params() for name, net in sorted(self.nets.items())}
        out["codebook"] = [self.codebook]
        return out


def new_model(config: ModelConfig | None = None, seed: int = 0) -> ModelBundle:
    config = config or ModelConfig()
    rng = SeededRng(seed)
    nets = {name: mlp_init(dims, rng.derive("net", name)) for name, dims in config.net_dims().items()}
    k = config.codebook_size
    codebook = rng.derive("codebook").uniform(-1.0, 1.0, size=(k, config.codebook_dim))
    return ModelBundle(config=config, nets=nets, codebook=codebook)


# -- forward passes (inference; no tapes) -----------------------------------


def encode_box(m: ModelBundle, b: OBB) -> np.ndarray:
    y, _ = mlp_forward(m.nets["box_enc"], obb_to_params(b))
    return y


def encode_inner(m: ModelBundle, boxes: list[OBB], h: Hierarchy) -> dict[int, np.ndarray]:
    """Bottom-up inner codes for every node."""
    inner: dict[int, np.ndarray] = {}
    for nid in h.post_order():
        node = h.nodes[nid]
        if node.kind == LEAF:
            inner[nid] = encode_box(m, boxes[node.part])
        elif node.kind == ADJACENCY:
            l, r = node.children
            x = np.concatenate([inner[l], inner[r]])
            inner[nid], _ = mlp_forward(m.nets["inner_adj"], x)
        else:
            c = node.children[0]
            x = np.concatenate([inner[c], node.sym.to_vec()])
            inner[nid], _ = mlp_forward(m.nets["inner_sym"], x)
    return inner


@dataclass
class OuterCodes:
    """Top-down decode result.

    raw: outer code as decoded from the parent; eff: the code the children
    were actually decoded from (snapped when snapping applies); evq: squared
    embedded-space distance to the nearest codebook entry for internal
    non-root nodes; snap_index: chosen codebook row for snapped nodes.
    """

    raw: dict[int, np.ndarray]
    eff: dict[int, np.ndarray]
    evq: dict[int, float]
    snap_index: dict[int, int]


def _sibling_slot(m: ModelBundle, inner: dict[int, np.ndarray], pid: int, sib: int | None, flags: AblationFlags) -> np.ndarray:
    if flags.inner_outer_concat:
        return inner[pid]
    if flags.no_sibling_inner or sib is None:
        return np.zeros(m.config.d_code)
    return inner[sib]


def decode_outer(
    m: ModelBundle,
    h: Hierarchy,
    inner: dict[int, np.ndarray],
    snap_on: bool = True,
    flags: AblationFlags | None = None,
) -> OuterCodes:
    """Top-down outer codes; snapping (when on) replaces each internal
    non-root node's outer code with its codebook reconstruction before its
    children decode. evq is always measured on the raw code."""
    flags = flags or AblationFlags()
    missing = [nid for nid in h.nodes if nid not in inner]
    if missing:
        raise MissingInner(f"inner codes missing for nodes {sorted(missing)[:4]}")
    d = m.config.d_code
    raw: dict[int, np.ndarray] = {}
    eff: dict[int, np.ndarray] = {}
    evq: dict[int, float] = {}
    snap_index: dict[int, int] = {}
    snap_active = snap_on and not flags.no_vq

    raw[h.root] = inner[h.root]
    eff[h.root] = raw[h.root]
    for pid in h.pre_order():
        node = h.nodes[pid]
        if node.kind == LEAF:
            continue
        if node.kind == ADJACENCY:
            l, r = node.children
            xl = np.concatenate([eff[pid], _sibling_slot(m, inner, pid, r, flags)])
            ol, _ = mlp_forward(m.nets["outer_adj"], xl)
            raw[l] = ol[:d]
            xr = np.concatenate([eff[pid], _sibling_slot(m, inner, pid, l, flags)])
            orr, _ = mlp_forward(m.nets["outer_adj"], xr)
            raw[r] = orr[d:]
            kids = (l, r)
        else:
            c = node.children[0]
            x = np.concatenate([eff[pid], _sibling_slot(m, inner, pid, c, flags)])
            o, _ = mlp_forward(m.nets["outer_sym"], x)
            raw[c] = o[:d]
            kids = (c,)
        for c in kids:
            if h.nodes[c].kind != LEAF:
                evq[c] = vq.representation_error(m, raw[c])
                if snap_active:
                    k, _ = vq.snap(m.codebook, vq.embed(m, raw[c]))
                    snap_index[c] = k
                    eff[c] = vq.vq_denoise(m, raw[c])
                else:
                    eff[c] = raw[c]
            else:
                eff[c] = raw[c]
    return OuterCodes(raw=raw, eff=eff, evq=evq, snap_index=snap_index)


def decode_box(
    m: ModelBundle,
    inner_vec: np.ndarray,
    outer_vec: np.ndarray,
    flags: AblationFlags | None = None,
    scale: float = 1.0,
) -> OBB:
    """Decode one leaf box; degenerate axes fall back to the identity frame."""
    flags = flags or AblationFlags()
    iv = np.zeros(m.config.d_code) if flags.no_inner_for_leaves else inner_vec
    y, _ = mlp_forward(m.nets["box_dec"], np.concatenate([iv, outer_vec]))
    try:
        return params_to_obb(y, scale=scale)
    except DegenerateAxes:
        repaired = y.copy()
        repaired[6:9] = (1.0, 0.0, 0.0)
        repaired[9:12] = (0.0, 1.0, 0.0)
        return params_to_obb(repaired, scale=scale)


def classify_node(m: ModelBundle, gen_code: np.ndarray) -> tuple[str, np.ndarray]:
    logits, _ = mlp_forward(m.nets["classifier"], gen_code)
    p = softmax(logits)
    return KIND_ORDER[int(np.argmax(p))], p


def reconstruct(
    m: ModelBundle,
    boxes: list[OBB],
    h: Hierarchy,
    snap_on: bool = True,
    flags: AblationFlags | None = None,
) -> list[OBB]:
    """Encode then decode every leaf box (part order preserved)."""
    flags = flags or AblationFlags()
    inner = encode_inner(m, boxes, h)
    outer = decode_outer(m, h, inner, snap_on=snap_on, flags=flags)
    out: list[OBB] = [None] * len(boxes)
    for nid in h.leaves():
        part = h.nodes[nid].part
        out[part] = decode_box(m, inner[nid], outer.eff[nid], flags=flags)
    return out


def clone_model(m: ModelBundle) -> ModelBundle:
    nets = {
        name: Mlp(net.dims, [w.copy() for w in net.weights], [b.copy() for b in net.biases])
        for name, net in m.nets.items()
    }
    return ModelBundle(
        config=replace(m.config),
        nets=nets,
        codebook=m.codebook.copy(),
        stage=m.stage,
        meta=dict(m.meta),
    )
