"""HTTP facade over fusion sessions for the browser UI.

Sessions live in memory, one lock each: mutations (step, run, config, part
edits) serialize per session, reads take the same lock so they never observe
torn state, and a background run marks the session busy so competing
mutations get 409. The model is loaded once and shared read-only. Responses
are JSON and CORS-open; SCHEMAS documents their shapes.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import fields
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .adjust import AdjustConfig, eta
from .driver import DriverError, FusionConfig, FusionSession, StopRule
from .geometry import obb_to_params, params_to_obb
from .inference import SamplerConfig
from .rvnn import AblationFlags, ModelBundle, UntrainedModel
from .sceneio import ParseError, scene_from_dict
from .structure import LEAF


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


# -- config plumbing -----------------------------------------------------------

_CONFIG_KEYS = {
    "eta_t": ("adjust", "eta_threshold", float),
    "eta_threshold": ("adjust", "eta_threshold", float),
    "allow_synthesis": ("adjust", "allow_synthesis", bool),
    "max_depth": ("adjust", "max_depth", int),
    "max_parts": ("adjust", "max_parts", int),
    "sigma": ("sampler", "sigma", float),
    "m_candidates": ("sampler", "m_candidates", int),
    "n_rounds": ("sampler", "n_rounds", int),
    "rel_tol": ("stop", "rel_tol", float),
    "patience": ("stop", "patience", int),
    "max_iterations": ("stop", "max_iterations", int),
    "strict": (None, "strict", bool),
    "dock": (None, "dock", bool),
    "seed": (None, "seed", int),
}
_FLAG_KEYS = {f.name for f in fields(AblationFlags)}


def _config_from_body(data: dict) -> FusionConfig:
    sampler, adjust, stop, top, flags = {}, {}, {}, {}, {}
    for k, v in data.items():
        if k in _FLAG_KEYS:
            flags[k] = bool(v)
            continue
        if k not in _CONFIG_KEYS:
            raise ApiError(400, f"unknown config key {k!r}")
        where, name, cast = _CONFIG_KEYS[k]
        try:
            value = cast(v)
        except (TypeError, ValueError):
            raise ApiError(400, f"config key {k!r} has invalid value {v!r}")
        {"sampler": sampler, "adjust": adjust, "stop": stop, None: top}[where][name] = value
    # interactive sessions default to non-strict, mirroring the CLI
    return FusionConfig(
        sampler=SamplerConfig(**sampler),
        adjust=AdjustConfig(**adjust),
        flags=AblationFlags(**flags),
        stop=StopRule(**stop),
        strict=top.get("strict", False),
        dock=top.get("dock", False),
        seed=top.get("seed", 0),
    )


# -- state snapshots ------------------------------------------------------------


def _node_state(session: FusionSession, nid: int, e_max: float, d_max: int) -> dict:
    h = session.h
    n = h.nodes[nid]
    out: dict = {"id": nid, "kind": n.kind, "depth": h.depth(nid)}
    if n.kind == LEAF:
        out["part"] = n.part
        return out
    out["children"] = [_node_state(session, c, e_max, d_max) for c in n.children]
    if n.sym is not None:
        out["sym"] = [float(x) for x in n.sym.to_vec()]
    if nid in session.errors:
        e = session.errors[nid]
        out["error"] = float(e)
        out["eta"] = float(eta(e, e_max, h.depth(nid), d_max, session.config.adjust))
    return out


def session_state(box: "_SessionBox") -> dict:
    s = box.session
    world = s.world_boxes()
    parts = []
    for i, b in enumerate(world):
        src = s.source_map.get(i)
        parts.append(
            {
                "id": i,
                "params": [float(x) for x in obb_to_params(b)],
                "group": int(s.part_group[i]),
                "source": "input" if src is not None else "synthesized",
            }
        )
    e_max = max(s.errors.values()) if s.errors else 0.0
    d_max = s.h.max_depth()
    cfg = s.config
    return {
        "id": box.id,
        "status": "running" if box.running else s.status,
        "iteration": s.iteration,
        "objective": s.trace[-1],
        "trace": list(s.trace),
        "parts": parts,
        "hierarchy": _node_state(s, s.h.root, e_max, d_max),
        "synthesis_events": list(s.synthesis_events),
        "rolled_back": s.rolled_back,
        "budget_exceeded": s.budget_exceeded,
        "config": {
            "eta_t": cfg.adjust.eta_threshold,
            "allow_synthesis": cfg.adjust.allow_synthesis,
            "strict": cfg.strict,
            "sigma": cfg.sampler.sigma,
            "seed": cfg.seed,
        },
    }


# -- session hub -----------------------------------------------------------------


class _SessionBox:
    def __init__(self, sid: str, session: FusionSession):
        self.id = sid
        self.session = session
        self.lock = threading.Lock()
        self.running = False


class Hub:
    def __init__(self, model: ModelBundle):
        self.model = model
        self._lock = threading.Lock()
        self._sessions: dict[str, _SessionBox] = {}
        self._counter = 0

    def create(self, body: dict) -> _SessionBox:
        scenes = body.get("scenes")
        if not isinstance(scenes, list) or not scenes:
            raise ApiError(400, "body needs a non-empty 'scenes' list")
        config = _config_from_body(body.get("config") or {})
        groups = []
        for k, raw in enumerate(scenes):
            try:
                doc = scene_from_dict(raw)
            except ParseError as e:
                raise ApiError(400, f"scenes[{k}]: {e}")
            if len(scenes) == 1 and len(set(doc.groups)) > 1:
                for g in sorted(set(doc.groups)):
                    members = [i for i, gi in enumerate(doc.groups) if gi == g]
                    groups.append(([doc.boxes[i] for i in members], None))
            else:
                groups.append((doc.boxes, doc.hierarchy))
        try:
            session = FusionSession(self.model, groups, config)
        except (DriverError, UntrainedModel) as e:
            raise ApiError(400, str(e))
        with self._lock:
            self._counter += 1
            box = _SessionBox(f"s{self._counter}", session)
            self._sessions[box.id] = box
        return box

    def get(self, sid: str) -> _SessionBox:
        with self._lock:
            box = self._sessions.get(sid)
        if box is None:
            raise ApiError(404, f"no session {sid!r}")
        return box


def _require_idle(box: _SessionBox) -> None:
    if box.running:
        raise ApiError(409, f"session {box.id} is running")


def _do_step(box: _SessionBox, body: dict) -> dict:
    n = body.get("n", 1)
    if not isinstance(n, int) or n < 1:
        raise ApiError(400, "'n' must be a positive integer")
    with box.lock:
        _require_idle(box)
        for _ in range(n):
            if not box.session.step():
                break
        return session_state(box)


def _do_run(box: _SessionBox) -> dict:
    with box.lock:
        _require_idle(box)
        box.running = True

        def worker():
            try:
                while True:
                    with box.lock:
                        if not box.session.step():
                            break
            finally:
                box.running = False

        threading.Thread(target=worker, daemon=True).start()
        return {"id": box.id, "status": "running"}


_PATCH_KEYS = {"eta_t": "eta_threshold", "allow_synthesis": "allow_synthesis", "strict": "strict"}


def _do_patch_config(box: _SessionBox, body: dict) -> dict:
    unknown = set(body) - set(_PATCH_KEYS)
    if unknown:
        raise ApiError(400, f"cannot patch {sorted(unknown)}")
    with box.lock:
        _require_idle(box)
        changes = {_PATCH_KEYS[k]: v for k, v in body.items()}
        box.session.update_config(**changes)
        cfg = box.session.config
        return {
            "id": box.id,
            "status": "running" if box.running else box.session.status,
            "config": {
                "eta_t": cfg.adjust.eta_threshold,
                "allow_synthesis": cfg.adjust.allow_synthesis,
                "strict": cfg.strict,
            },
        }


def _do_parts(box: _SessionBox, body: dict) -> dict:
    op = body.get("op")
    with box.lock:
        _require_idle(box)
        s = box.session
        try:
            if op == "add":
                params = body.get("params")
                if not (isinstance(params, list) and len(params) == 12):
                    raise ApiError(400, "'add' needs 'params' with 12 numbers")
                s.add_part(params_to_obb(np.asarray(params, dtype=float)), int(body.get("group", 0)))
            elif op == "remove":
                if not isinstance(body.get("part"), int):
                    raise ApiError(400, "'remove' needs an integer 'part'")
                s.remove_part(body["part"])
            elif op == "move":
                t = body.get("translation")
                if not (isinstance(t, list) and len(t) == 3):
                    raise ApiError(400, "'move' needs 'translation' with 3 numbers")
                vec = np.asarray(t, dtype=float)
                if isinstance(body.get("group"), int):
                    s.move_group(body["group"], vec)
                elif isinstance(body.get("parts"), list):
                    s.move_parts([int(p) for p in body["parts"]], vec)
                else:
                    raise ApiError(400, "'move' needs 'group' or 'parts'")
            else:
                raise ApiError(400, f"unknown op {op!r}")
        except ValueError as e:
            raise ApiError(400, str(e))
        return session_state(box)


# -- HTTP plumbing -----------------------------------------------------------------

_ROUTES = [
    ("POST", re.compile(r"^/sessions$"), "create"),
    ("GET", re.compile(r"^/sessions/([^/]+)$"), "state"),
    ("GET", re.compile(r"^/sessions/([^/]+)/trace$"), "trace"),
    ("POST", re.compile(r"^/sessions/([^/]+)/step$"), "step"),
    ("POST", re.compile(r"^/sessions/([^/]+)/run$"), "run"),
    ("POST", re.compile(r"^/sessions/([^/]+)/parts$"), "parts"),
    ("PATCH", re.compile(r"^/sessions/([^/]+)/config$"), "config"),
]


def make_handler(hub: Hub):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):
            pass

        def _cors(self):
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, PATCH, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")

        def _send(self, status: int, obj) -> None:
            body = json.dumps(obj).encode()
            self.send_response(status)
            self._cors()
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            if length == 0:
                return {}
            try:
                data = json.loads(self.rfile.read(length))
            except json.JSONDecodeError as e:
                raise ApiError(400, f"invalid JSON body: {e.msg}")
            if not isinstance(data, dict):
                raise ApiError(400, "body must be a JSON object")
            return data

        def do_OPTIONS(self):
            self.send_response(204)
            self._cors()
            self.send_header("Content-Length", "0")
            self.end_headers()

        def _dispatch(self, method: str):
            try:
                for verb, pattern, name in _ROUTES:
                    m = pattern.match(self.path)
                    if not m:
                        continue
                    if verb != method:
                        raise ApiError(405, f"{method} not allowed on {self.path}")
                    return self._handle(name, m)
                raise ApiError(404, f"no route {self.path!r}")
            except ApiError as e:
                self._send(e.status, {"error": e.message})

        def _handle(self, name: str, m):
            if name == "create":
                box = hub.create(self._body())
                with box.lock:
                    return self._send(200, session_state(box))
            box = hub.get(m.group(1))
            if name == "state":
                with box.lock:
                    return self._send(200, session_state(box))
            if name == "trace":
                with box.lock:
                    s = box.session
                    return self._send(
                        200,
                        {
                            "id": box.id,
                            "trace": list(s.trace),
                            "iteration": s.iteration,
                            "rolled_back": s.rolled_back,
                        },
                    )
            if name == "step":
                return self._send(200, _do_step(box, self._body()))
            if name == "run":
                self._body()
                return self._send(202, _do_run(box))
            if name == "parts":
                return self._send(200, _do_parts(box, self._body()))
            if name == "config":
                return self._send(200, _do_patch_config(box, self._body()))
            raise ApiError(404, f"no route {self.path!r}")

        def do_GET(self):
            self._dispatch("GET")

        def do_POST(self):
            self._dispatch("POST")

        def do_PATCH(self):
            self._dispatch("PATCH")

    return Handler


def start_server(m: ModelBundle, host: str = "127.0.0.1", port: int = 0):
    """Bind and start serving on a background thread; returns the server
    (its .server_address carries the bound port) and the hub."""
    hub = Hub(m)
    server = ThreadingHTTPServer((host, port), make_handler(hub))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, hub


def run_server(m: ModelBundle, host: str = "127.0.0.1", port: int = 8574, notify=None) -> None:
    server = ThreadingHTTPServer((host, port), make_handler(Hub(m)))
    if notify:
        notify(f"serving on http://{host}:{server.server_address[1]}/")
    try:
        server.serve_forever()
    finally:
        server.server_close()


# -- response schemas ---------------------------------------------------------------

_PART = {
    "type": "object",
    "required": ["id", "params", "group", "source"],
    "properties": {
        "id": {"type": "integer"},
        "params": {"type": "array", "items": {"type": "number"}, "minItems": 12, "maxItems": 12},
        "group": {"type": "integer"},
        "source": {"type": "string"},
    },
}

_NODE = {
    "type": "object",
    "required": ["id", "kind", "depth"],
    "properties": {
        "id": {"type": "integer"},
        "kind": {"enum": ["leaf", "adjacency", "symmetry"]},
        "depth": {"type": "integer"},
        "part": {"type": "integer"},
        "children": {"type": "array", "items": {"$ref": "#/$defs/node"}},
        "sym": {"type": "array", "items": {"type": "number"}, "minItems": 8, "maxItems": 8},
        "error": {"type": "number"},
        "eta": {"type": "number"},
    },
}

SCHEMAS = {
    "session_state": {
        "$defs": {"node": _NODE},
        "type": "object",
        "required": [
            "id",
            "status",
            "iteration",
            "objective",
            "trace",
            "parts",
            "hierarchy",
            "synthesis_events",
            "config",
        ],
        "properties": {
            "id": {"type": "string"},
            "status": {"enum": ["idle", "running", "converged"]},
            "iteration": {"type": "integer"},
            "objective": {"type": "number"},
            "trace": {"type": "array", "items": {"type": "number"}},
            "parts": {"type": "array", "items": _PART},
            "hierarchy": {"$ref": "#/$defs/node"},
            "synthesis_events": {"type": "array"},
            "rolled_back": {"type": "integer"},
            "budget_exceeded": {"type": "boolean"},
            "config": {"type": "object"},
        },
    },
    "trace": {
        "type": "object",
        "required": ["id", "trace", "iteration"],
        "properties": {
            "id": {"type": "string"},
            "trace": {"type": "array", "items": {"type": "number"}},
            "iteration": {"type": "integer"},
            "rolled_back": {"type": "integer"},
        },
    },
    "run_ack": {
        "type": "object",
        "required": ["id", "status"],
        "properties": {"id": {"type": "string"}, "status": {"enum": ["running"]}},
    },
    "config_ack": {
        "type": "object",
        "required": ["id", "status", "config"],
        "properties": {
            "id": {"type": "string"},
            "status": {"enum": ["idle", "running", "converged"]},
            "config": {"type": "object"},
        },
    },
    "error": {
        "type": "object",
        "required": ["error"],
        "properties": {"error": {"type": "string"}},
    },
}
