"""Serialization: scene JSON, model checkpoints, benchmark tables, OBJ dump.

Scenes travel as versioned JSON documents (human-diffable, shared with the
browser UI). Checkpoints use a small self-describing binary container: a JSON
header declaring config, shapes, and checksums, followed by little-endian
32-bit parameter blobs in header order. Floats in JSON rely on repr, which
round-trips exactly within 17 significant digits.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .geometry import GeometryError, OBB, SymmetryParams, obb_to_params, params_to_obb
from .nn import Mlp
from .rvnn import ModelBundle, ModelConfig
from .structure import ADJACENCY, LEAF, SYMMETRY, Hierarchy, _Alloc


class IoError(ValueError):
    pass


class ParseError(IoError):
    """Malformed document; the message names the offending field or part."""


class VersionMismatch(IoError):
    pass


class CorruptBlob(IoError):
    """Checkpoint payload failed a checksum or ran short."""


class ConfigMismatch(IoError):
    """Checkpoint config does not match what the caller expects."""


SCENE_VERSION = 1
CHECKPOINT_MAGIC = b"SCOR"
CHECKPOINT_VERSION = 1


# -- scene documents ---------------------------------------------------------


@dataclass
class SceneDocument:
    boxes: list[OBB]
    groups: list[int]
    hierarchy: Hierarchy | None = None
    sources: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.groups) != len(self.boxes):
            raise ParseError("groups and parts disagree in length")
        if self.sources is None:
            self.sources = ["input"] * len(self.boxes)
        if len(self.sources) != len(self.boxes):
            raise ParseError("sources and parts disagree in length")
        if self.hierarchy is not None:
            self.hierarchy.validate(expect_parts=len(self.boxes))


def _node_dict(h: Hierarchy, nid: int) -> dict:
    n = h.nodes[nid]
    if n.kind == LEAF:
        return {"kind": "leaf", "part": int(n.part)}
    d: dict = {"kind": n.kind, "children": [_node_dict(h, c) for c in n.children]}
    if n.sym is not None:
        d["sym"] = [float(x) for x in n.sym.to_vec()]
    return d


def _node_parse(rec, alloc: _Alloc, path: str) -> int:
    if not isinstance(rec, dict):
        raise ParseError(f"{path}: node record must be an object")
    kind = rec.get("kind")
    if kind == "leaf":
        part = rec.get("part")
        if not isinstance(part, int):
            raise ParseError(f"{path}: leaf needs an integer 'part'")
        return alloc.leaf(part)
    children = rec.get("children")
    if not isinstance(children, list):
        raise ParseError(f"{path}: missing 'children'")
    kids = [_node_parse(c, alloc, f"{path}.children[{i}]") for i, c in enumerate(children)]
    if kind == "adjacency":
        if len(kids) != 2:
            raise ParseError(f"{path}: adjacency needs exactly 2 children")
        return alloc.adj(kids[0], kids[1])
    if kind == "symmetry":
        if len(kids) != 1:
            raise ParseError(f"{path}: symmetry needs exactly 1 child")
        sym = rec.get("sym")
        if not (isinstance(sym, list) and len(sym) == 8):
            raise ParseError(f"{path}: symmetry needs 'sym' with 8 numbers")
        return alloc.sym(kids[0], SymmetryParams.from_vec(np.asarray(sym, dtype=float)))
    raise ParseError(f"{path}: unknown node kind {kind!r}")


def scene_to_dict(doc: SceneDocument) -> dict:
    parts = [
        {
            "id": i,
            "params": [float(x) for x in obb_to_params(b)],
            "group": int(doc.groups[i]),
            "source": doc.sources[i],
        }
        for i, b in enumerate(doc.boxes)
    ]
    out = {"version": SCENE_VERSION, "parts": parts, "meta": dict(doc.meta)}
    if doc.hierarchy is not None:
        out["hierarchy"] = _node_dict(doc.hierarchy, doc.hierarchy.root)
    return out


def scene_from_dict(data) -> SceneDocument:
    if not isinstance(data, dict):
        raise ParseError("scene document must be an object")
    version = data.get("version")
    if version != SCENE_VERSION:
        raise VersionMismatch(f"scene version {version!r}, this reader knows {SCENE_VERSION}")
    raw_parts = data.get("parts")
    if not isinstance(raw_parts, list) or not raw_parts:
        raise ParseError("scene needs a non-empty 'parts' list")
    by_id: dict[int, dict] = {}
    for k, rec in enumerate(raw_parts):
        if not isinstance(rec, dict) or not isinstance(rec.get("id"), int):
            raise ParseError(f"parts[{k}]: needs an integer 'id'")
        pid = rec["id"]
        if pid in by_id:
            raise ParseError(f"part {pid}: duplicate id")
        by_id[pid] = rec
    if sorted(by_id) != list(range(len(raw_parts))):
        raise ParseError("part ids must cover 0..P-1")
    boxes, groups, sources = [], [], []
    for pid in range(len(raw_parts)):
        rec = by_id[pid]
        params = rec.get("params")
        if not (isinstance(params, list) and len(params) == 12):
            raise ParseError(f"part {pid}: missing 'params' with 12 numbers")
        try:
            v = np.asarray(params, dtype=float)
        except (TypeError, ValueError) as e:
            raise ParseError(f"part {pid}: bad params ({e})") from e
        try:
            # already-valid params load verbatim, keeping round-trips bit-exact
            boxes.append(OBB(center=v[0:3], extents=v[3:6], axis_u=v[6:9], axis_v=v[9:12]))
        except GeometryError:
            try:
                boxes.append(params_to_obb(v))
            except GeometryError as e:
                raise ParseError(f"part {pid}: bad params ({e})") from e
        group = rec.get("group", 0)
        if not isinstance(group, int):
            raise ParseError(f"part {pid}: 'group' must be an integer")
        groups.append(group)
        sources.append(str(rec.get("source", "input")))
    hierarchy = None
    if "hierarchy" in data:
        alloc = _Alloc()
        root = _node_parse(data["hierarchy"], alloc, "hierarchy")
        hierarchy = Hierarchy(alloc.nodes, root)
    meta = data.get("meta", {})
    if not isinstance(meta, dict):
        raise ParseError("'meta' must be an object")
    return SceneDocument(boxes=boxes, groups=groups, hierarchy=hierarchy, sources=sources, meta=meta)


def save_scene(path, doc: SceneDocument) -> None:
    with open(path, "w") as f:
        json.dump(scene_to_dict(doc), f, indent=2, sort_keys=True)
        f.write("\n")


def load_scene(path) -> SceneDocument:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    return scene_from_dict(data)


# -- model checkpoints --------------------------------------------------------


def _config_dict(config: ModelConfig) -> dict:
    return asdict(config)


def _config_parse(data) -> ModelConfig:
    if not isinstance(data, dict):
        raise ParseError("checkpoint config must be an object")
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(data) - known
    if unknown:
        raise ParseError(f"checkpoint config has unknown fields {sorted(unknown)}")
    return ModelConfig(**data)


def _blob(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def save_model(path, m: ModelBundle) -> None:
    """Write a self-describing checkpoint; parameters quantize to 32-bit."""
    nets = []
    payload = bytearray()

    def declare(a: np.ndarray) -> dict:
        raw = _blob(a)
        payload.extend(raw)
        return {"shape": list(a.shape), "len": len(raw), "crc": zlib.crc32(raw)}

    for name in sorted(m.nets):
        net = m.nets[name]
        arrays = []
        for w, b in zip(net.weights, net.biases):
            arrays.append(declare(w))
            arrays.append(declare(b))
        nets.append({"name": name, "dims": list(net.dims), "arrays": arrays})
    codebook = declare(m.codebook)
    header = {
        "config": _config_dict(m.config),
        "stage": m.stage,
        "nets": nets,
        "codebook": codebook,
        "meta": m.meta,
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        f.write(head)
        f.write(payload)


def load_model(path, expect: ModelConfig | None = None) -> ModelBundle:
    """Read a checkpoint back; loaded forward passes match the quantized
    originals bit-for-bit. expect rejects config drift up front."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ParseError("not a checkpoint file (bad magic)")
    if len(blob) < 12:
        raise CorruptBlob("checkpoint header ran short")
    version, head_len = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this reader knows {CHECKPOINT_VERSION}")
    head_end = 12 + head_len
    if len(blob) < head_end:
        raise CorruptBlob("checkpoint header ran short")
    try:
        header = json.loads(blob[12:head_end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"checkpoint header is not valid JSON ({e})") from e
    config = _config_parse(header.get("config"))
    if expect is not None and config != expect:
        diffs = [
            f.name
            for f in fields(ModelConfig)
            if getattr(config, f.name) != getattr(expect, f.name)
        ]
        raise ConfigMismatch(f"checkpoint config differs from expected in {diffs}")

    offset = head_end

    def take(decl, what: str) -> np.ndarray:
        nonlocal offset
        n = int(decl["len"])
        raw = blob[offset : offset + n]
        if len(raw) != n:
            raise CorruptBlob(f"{what}: blob truncated")
        if zlib.crc32(raw) != decl["crc"]:
            raise CorruptBlob(f"{what}: checksum mismatch")
        offset += n
        a = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        return a.reshape(decl["shape"])

    nets: dict[str, Mlp] = {}
    for net_rec in header["nets"]:
        name = net_rec["name"]
        arrays = net_rec["arrays"]
        weights, biases = [], []
        for i in range(0, len(arrays), 2):
            weights.append(take(arrays[i], f"{name} weights[{i // 2}]"))
            biases.append(take(arrays[i + 1], f"{name} biases[{i // 2}]"))
        nets[name] = Mlp(dims=tuple(net_rec["dims"]), weights=weights, biases=biases)
    codebook = take(header["codebook"], "codebook")
    if offset != len(blob):
        raise CorruptBlob("trailing bytes after declared blobs")
    want = config.net_dims()
    if set(nets) != set(want) or any(nets[k].dims != want[k] for k in want):
        raise ParseError("checkpoint networks do not match its config")
    return ModelBundle(
        config=config,
        nets=nets,
        codebook=codebook,
        stage=header.get("stage", "init"),
        meta=header.get("meta", {}),
    )


def quantized(m: ModelBundle) -> ModelBundle:
    """The model as a checkpoint round-trip would return it (f32 weights)."""

    def q(a: np.ndarray) -> np.ndarray:
        return a.astype(np.float32).astype(np.float64)

    nets = {
        name: Mlp(dims=net.dims, weights=[q(w) for w in net.weights], biases=[q(b) for b in net.biases])
        for name, net in m.nets.items()
    }
    return ModelBundle(
        config=m.config, nets=nets, codebook=q(m.codebook), stage=m.stage, meta=dict(m.meta)
    )


# -- tables and logs ----------------------------------------------------------

BENCHMARK_HEADER = (
    "bench,variant,task,seed,iteration,objective_infer,objective,"
    "merge_error,parts,synthesized,rolled_back,converged_iteration"
)


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_benchmark_csv(path, rows: list[dict]) -> None:
    cols = BENCHMARK_HEADER.split(",")
    with open(path, "w") as f:
        f.write(BENCHMARK_HEADER + "\n")
        for row in rows:
            f.write(",".join(_cell(row[c]) for c in cols) + "\n")


def write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def write_loss_csv(path, stage: str, history: list[dict]) -> None:
    keys = sorted({k for rec in history for k in rec} - {"epoch"})
    with open(path, "w") as f:
        f.write(",".join(["stage", "epoch"] + keys) + "\n")
        for i, rec in enumerate(history):
            epoch = rec.get("epoch", i)
            cells = [stage, str(epoch)] + [_cell(rec.get(k, "")) for k in keys]
            f.write(",".join(cells) + "\n")


def train_log_digest(history: list[dict]) -> str:
    """Stable fingerprint of a loss curve for checkpoint metadata."""
    return hashlib.sha256(json.dumps(history, sort_keys=True).encode()).hexdigest()[:16]


# Corners differ in one sign bit per edge; OBB.corners() orders by (u, v, w).
_EDGES = ((0, 1), (0, 2), (0, 4), (1, 3), (1, 5), (2, 3), (2, 6), (3, 7), (4, 5), (4, 6), (5, 7), (6, 7))


def write_obj_wireframe(path, boxes: list[OBB]) -> None:
    """Debug export: each box as 8 vertices and 12 polyline edges."""
    with open(path, "w") as f:
        for bi, b in enumerate(boxes):
            f.write(f"o box{bi}\n")
            for c in b.corners():
                f.write(f"v {c[0]!r} {c[1]!r} {c[2]!r}\n")
            base = 8 * bi
            for a, z in _EDGES:
                f.write(f"l {base + a + 1} {base + z + 1}\n")
