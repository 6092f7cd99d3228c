"""HTTP service: routing, status codes, schemas, session isolation."""

import json
import time
import urllib.error
import urllib.request

import jsonschema
import pytest

from structfuse.rng import SeededRng
from structfuse.rvnn import ModelConfig, new_model
from structfuse.sceneio import SceneDocument, scene_to_dict
from structfuse.service import SCHEMAS, start_server
from structfuse.synthdata import sample_shape

TINY = ModelConfig(d_code=6, d_hidden=10, d_vq=4, codebook_size=8)


@pytest.fixture(scope="module")
def base_url():
    m = new_model(TINY, seed=0)
    m.stage = "dae"
    server, _hub = start_server(m, port=0)
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    server.server_close()


def req(method: str, url: str, body=None):
    data = json.dumps(body).encode() if body is not None else None
    r = urllib.request.Request(url, data=data, method=method)
    if data is not None:
        r.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(r, timeout=30) as resp:
            return resp.status, json.loads(resp.read() or b"{}"), dict(resp.headers)
    except urllib.error.HTTPError as e:
        return e.code, json.loads(e.read() or b"{}"), dict(e.headers)


def _scene_dict(seed: int, family: str = "table") -> dict:
    boxes, h = sample_shape(family, SeededRng(seed))
    doc = SceneDocument(boxes=boxes, groups=[0] * len(boxes), hierarchy=h)
    return scene_to_dict(doc)


def _create(base_url, config=None, seeds=(11, 12)):
    body = {"scenes": [_scene_dict(s) for s in seeds]}
    if config:
        body["config"] = config
    return req("POST", f"{base_url}/sessions", body)


FAST = {"m_candidates": 2, "n_rounds": 2, "max_iterations": 4, "allow_synthesis": False}


class TestCreate:
    def test_initial_state(self, base_url):
        status, state, _ = _create(base_url, config=FAST)
        assert status == 200
        jsonschema.validate(state, SCHEMAS["session_state"])
        assert state["status"] == "idle"
        assert state["iteration"] == 0
        assert len(state["trace"]) == 1
        n_parts = sum(len(_scene_dict(s)["parts"]) for s in (11, 12))
        assert len(state["parts"]) == n_parts
        assert {p["group"] for p in state["parts"]} == {0, 1}

    def test_internal_nodes_carry_error_and_eta(self, base_url):
        _, state, _ = _create(base_url, config=FAST)

        def walk(node):
            yield node
            for c in node.get("children", ()):
                yield from walk(c)

        nodes = list(walk(state["hierarchy"]))
        internals = [n for n in nodes if n["kind"] != "leaf" and n["id"] != state["hierarchy"]["id"]]
        assert internals
        for n in internals:
            assert n["error"] >= 0.0
            assert 0.0 <= n["eta"] <= 1.0
        leaves = [n for n in nodes if n["kind"] == "leaf"]
        assert len(leaves) == len(state["parts"])

    def test_missing_scenes_is_400(self, base_url):
        status, body, _ = req("POST", f"{base_url}/sessions", {"config": {}})
        assert status == 400
        jsonschema.validate(body, SCHEMAS["error"])

    def test_bad_scene_is_400(self, base_url):
        status, body, _ = req("POST", f"{base_url}/sessions", {"scenes": [{"version": 1}]})
        assert status == 400
        assert "scenes[0]" in body["error"]

    def test_unknown_config_key_is_400(self, base_url):
        status, body, _ = _create(base_url, config={"warp_speed": 9})
        assert status == 400

    def test_single_scene_splits_by_group(self, base_url):
        d = _scene_dict(21)
        n = len(d["parts"])
        for p in d["parts"][n // 2 :]:
            p["group"] = 1
        del d["hierarchy"]
        status, state, _ = req(
            "POST", f"{base_url}/sessions", {"scenes": [d], "config": FAST}
        )
        assert status == 200
        assert len(state["parts"]) == n
        assert {p["group"] for p in state["parts"]} == {0, 1}


class TestRouting:
    def test_unknown_session_404(self, base_url):
        status, body, _ = req("GET", f"{base_url}/sessions/s999999")
        assert status == 404
        jsonschema.validate(body, SCHEMAS["error"])

    def test_unknown_route_404(self, base_url):
        status, _, _ = req("GET", f"{base_url}/nothing/here")
        assert status == 404

    def test_wrong_method_405(self, base_url):
        status, _, _ = req("GET", f"{base_url}/sessions")
        assert status == 405

    def test_options_preflight(self, base_url):
        status, _, headers = req("OPTIONS", f"{base_url}/sessions")
        assert status == 204
        assert headers["Access-Control-Allow-Origin"] == "*"
        assert "PATCH" in headers["Access-Control-Allow-Methods"]

    def test_cors_on_regular_responses(self, base_url):
        _, _, headers = _create(base_url, config=FAST)
        assert headers["Access-Control-Allow-Origin"] == "*"

    def test_invalid_json_body_400(self, base_url):
        r = urllib.request.Request(
            f"{base_url}/sessions", data=b"{nope", method="POST"
        )
        try:
            urllib.request.urlopen(r, timeout=10)
            status = 200
        except urllib.error.HTTPError as e:
            status = e.code
        assert status == 400


class TestStep:
    def test_single_step(self, base_url):
        _, state, _ = _create(base_url, config=FAST)
        sid = state["id"]
        status, after, _ = req("POST", f"{base_url}/sessions/{sid}/step", {})
        assert status == 200
        jsonschema.validate(after, SCHEMAS["session_state"])
        assert after["iteration"] == 1
        assert len(after["trace"]) == 2

    def test_multi_step(self, base_url):
        _, state, _ = _create(base_url, config=FAST)
        sid = state["id"]
        _, after, _ = req("POST", f"{base_url}/sessions/{sid}/step", {"n": 10})
        assert after["iteration"] <= 4
        assert after["status"] == "converged"

    def test_bad_n_is_400(self, base_url):
        _, state, _ = _create(base_url, config=FAST)
        sid = state["id"]
        status, _, _ = req("POST", f"{base_url}/sessions/{sid}/step", {"n": 0})
        assert status == 400

    def test_step_on_converged_is_noop(self, base_url):
        _, state, _ = _create(base_url, config=FAST)
        sid = state["id"]
        _, done, _ = req("POST", f"{base_url}/sessions/{sid}/step", {"n": 50})
        assert done["status"] == "converged"
        status, again, _ = req("POST", f"{base_url}/sessions/{sid}/step", {})
        assert status == 200
        assert again["status"] == "converged"
        assert again["iteration"] == done["iteration"]
        assert again["trace"] == done["trace"]
        assert again["parts"] == done["parts"]

    def test_sessions_deterministic_and_isolated(self, base_url):
        cfg = dict(FAST, seed=77)
        _, a, _ = _create(base_url, config=cfg)
        _, b, _ = _create(base_url, config=cfg)
        assert a["id"] != b["id"]
        # interleave the two sessions; each must follow its own seed stream
        for sid in (a["id"], b["id"], a["id"], b["id"]):
            req("POST", f"{base_url}/sessions/{sid}/step", {})
        _, ta, _ = req("GET", f"{base_url}/sessions/{a['id']}/trace")
        _, tb, _ = req("GET", f"{base_url}/sessions/{b['id']}/trace")
        jsonschema.validate(ta, SCHEMAS["trace"])
        assert ta["trace"] == tb["trace"]
        assert ta["iteration"] == tb["iteration"] == 2


class TestRunAndPatch:
    def _poll_until(self, base_url, sid, want, timeout=30.0):
        t0 = time.time()
        while time.time() - t0 < timeout:
            _, state, _ = req("GET", f"{base_url}/sessions/{sid}")
            if state["status"] == want:
                return state
            time.sleep(0.02)
        raise AssertionError(f"session never reached {want!r}")

    def test_run_to_convergence(self, base_url):
        _, state, _ = _create(base_url, config=FAST)
        sid = state["id"]
        status, ack, _ = req("POST", f"{base_url}/sessions/{sid}/run", {})
        assert status == 202
        jsonschema.validate(ack, SCHEMAS["run_ack"])
        final = self._poll_until(base_url, sid, "converged")
        assert final["iteration"] <= 4
        jsonschema.validate(final, SCHEMAS["session_state"])

    def test_mutations_409_while_running(self, base_url):
        cfg = {"m_candidates": 1, "n_rounds": 1, "max_iterations": 500,
               "patience": 1000000, "allow_synthesis": False}
        _, state, _ = _create(base_url, config=cfg)
        sid = state["id"]
        req("POST", f"{base_url}/sessions/{sid}/run", {})
        codes = set()
        for _ in range(50):
            s1, _, _ = req("POST", f"{base_url}/sessions/{sid}/step", {})
            s2, _, _ = req("PATCH", f"{base_url}/sessions/{sid}/config", {"strict": True})
            s3, _, _ = req(
                "POST",
                f"{base_url}/sessions/{sid}/parts",
                {"op": "move", "group": 0, "translation": [0.1, 0, 0]},
            )
            codes.update((s1, s2, s3))
            if 409 in codes:
                break
        assert 409 in codes
        # reads stay available during the run
        status, snap, _ = req("GET", f"{base_url}/sessions/{sid}")
        assert status == 200
        self._poll_until(base_url, sid, "converged", timeout=60.0)

    def test_patch_applies_next_iteration(self, base_url):
        _, state, _ = _create(base_url, config=FAST)
        sid = state["id"]
        status, ack, _ = req(
            "PATCH",
            f"{base_url}/sessions/{sid}/config",
            {"eta_t": 1.0, "allow_synthesis": False, "strict": True},
        )
        assert status == 200
        jsonschema.validate(ack, SCHEMAS["config_ack"])
        assert ack["config"]["eta_t"] == 1.0
        _, after, _ = req("POST", f"{base_url}/sessions/{sid}/step", {"n": 50})
        assert after["synthesis_events"] == []
        assert after["config"]["eta_t"] == 1.0

    def test_patch_reopens_converged_session(self, base_url):
        _, state, _ = _create(base_url, config=FAST)
        sid = state["id"]
        _, done, _ = req("POST", f"{base_url}/sessions/{sid}/step", {"n": 50})
        assert done["status"] == "converged"
        _, ack, _ = req("PATCH", f"{base_url}/sessions/{sid}/config", {"eta_t": 0.9})
        assert ack["status"] == "idle"

    def test_patch_unknown_key_400(self, base_url):
        _, state, _ = _create(base_url, config=FAST)
        sid = state["id"]
        status, _, _ = req("PATCH", f"{base_url}/sessions/{sid}/config", {"sigma": 1.0})
        assert status == 400


class TestParts:
    def test_add_resets_session(self, base_url):
        _, state, _ = _create(base_url, config=FAST)
        sid = state["id"]
        req("POST", f"{base_url}/sessions/{sid}/step", {})
        n = len(state["parts"])
        params = state["parts"][0]["params"]
        moved = list(params)
        moved[1] += 2.0
        status, after, _ = req(
            "POST",
            f"{base_url}/sessions/{sid}/parts",
            {"op": "add", "params": moved, "group": 0},
        )
        assert status == 200
        jsonschema.validate(after, SCHEMAS["session_state"])
        assert len(after["parts"]) == n + 1
        assert after["iteration"] == 0
        assert len(after["trace"]) == 1
        assert after["status"] == "idle"

    def test_remove_part(self, base_url):
        _, state, _ = _create(base_url, config=FAST)
        sid = state["id"]
        n = len(state["parts"])
        _, after, _ = req(
            "POST", f"{base_url}/sessions/{sid}/parts", {"op": "remove", "part": 0}
        )
        assert len(after["parts"]) == n - 1

    def test_move_group_shifts_centers(self, base_url):
        _, state, _ = _create(base_url, config=FAST)
        sid = state["id"]
        before = {p["id"]: p for p in state["parts"]}
        _, after, _ = req(
            "POST",
            f"{base_url}/sessions/{sid}/parts",
            {"op": "move", "group": 1, "translation": [0.0, 0.0, 3.0]},
        )
        for p in after["parts"]:
            b = before[p["id"]]
            dz = p["params"][2] - b["params"][2]
            want = 3.0 if b["group"] == 1 else 0.0
            assert dz == pytest.approx(want, abs=1e-6)

    def test_bad_ops_400(self, base_url):
        _, state, _ = _create(base_url, config=FAST)
        sid = state["id"]
        for body in (
            {"op": "explode"},
            {"op": "add", "params": [1, 2]},
            {"op": "remove", "part": "x"},
            {"op": "move", "translation": [1, 2, 3]},
            {"op": "remove", "part": 99999},
        ):
            status, _, _ = req("POST", f"{base_url}/sessions/{sid}/parts", body)
            assert status == 400, body
