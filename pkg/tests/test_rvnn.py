import numpy as np
import pytest

from structfuse.geometry import OBB, REFLECTIVE, SymmetryParams
from structfuse.rng import SeededRng
from structfuse.rvnn import (
    AblationFlags,
    ModelConfig,
    UntrainedModel,
    classify_node,
    clone_model,
    decode_box,
    decode_outer,
    encode_inner,
    new_model,
    reconstruct,
)
from structfuse.structure import ADJACENCY, LEAF, SYMMETRY, Hierarchy, Node, greedy_build


def box(center, extents=(0.2, 0.2, 0.2)):
    return OBB(center=center, extents=extents, axis_u=(1, 0, 0), axis_v=(0, 1, 0))


def small_scene():
    boxes = [box((0.0, 0.0, 0.0)), box((0.4, 0.0, 0.0)), box((0.2, 0.4, 0.0), (0.5, 0.1, 0.1))]
    return boxes, greedy_build(boxes)


def sym_scene():
    boxes = [box((-0.3, 0.0, 0.0)), box((0.3, 0.0, 0.0))]
    s = SymmetryParams(kind=REFLECTIVE, axis=(1, 0, 0), anchor=(0, 0, 0))
    nodes = {
        0: Node(LEAF, part=0),
        1: Node(LEAF, part=1),
        2: Node(ADJACENCY, children=(0, 1)),
        3: Node(SYMMETRY, children=(2,), sym=s),
    }
    return boxes, Hierarchy(nodes, 3)


def test_paper_config_dims():
    dims = ModelConfig.paper_config().net_dims()
    assert dims["box_enc"] == (12, 200, 200, 80)
    assert dims["inner_adj"] == (160, 200, 200, 80)
    assert dims["inner_sym"] == (88, 200, 200, 80)
    assert dims["outer_adj"] == (160, 200, 200, 160)
    assert dims["outer_sym"] == (160, 200, 200, 88)
    assert dims["box_dec"] == (160, 200, 200, 12)
    assert dims["classifier"] == (160, 200, 3)
    assert dims["gen_adj"] == (160, 200, 200, 320)
    assert dims["gen_sym"] == (160, 200, 200, 168)
    assert dims["vq_enc"] == (80, 200, 8)
    assert dims["vq_dec"] == (8, 200, 80)
    m = new_model(ModelConfig.paper_config(), seed=0)
    assert m.codebook.shape == (2048, 8)


def test_desk_config_dims_scale_with_code_width():
    cfg = ModelConfig()
    dims = cfg.net_dims()
    assert dims["box_enc"] == (12, 100, 100, 32)
    assert dims["outer_sym"] == (64, 100, 100, 40)
    assert dims["gen_adj"] == (64, 100, 100, 128)
    m = new_model(cfg, seed=0)
    assert m.codebook.shape == (256, 8)


def test_new_model_deterministic_per_seed():
    a = new_model(seed=11)
    b = new_model(seed=11)
    c = new_model(seed=12)
    np.testing.assert_array_equal(a.nets["box_enc"].weights[0], b.nets["box_enc"].weights[0])
    assert not np.array_equal(a.nets["box_enc"].weights[0], c.nets["box_enc"].weights[0])


def test_encode_inner_covers_every_node():
    m = new_model(seed=0)
    boxes, h = small_scene()
    inner = encode_inner(m, boxes, h)
    assert set(inner) == set(h.nodes)
    for v in inner.values():
        assert v.shape == (m.config.d_code,)


def test_decode_outer_root_is_inner():
    m = new_model(seed=0)
    boxes, h = small_scene()
    inner = encode_inner(m, boxes, h)
    out = decode_outer(m, h, inner, snap_on=False)
    np.testing.assert_array_equal(out.raw[h.root], inner[h.root])
    np.testing.assert_array_equal(out.eff[h.root], inner[h.root])
    assert set(out.raw) == set(h.nodes)
    assert set(out.eff) == set(h.nodes)


def test_decode_outer_errors_only_on_internal_nonroot():
    m = new_model(seed=0)
    boxes, h = small_scene()
    inner = encode_inner(m, boxes, h)
    out = decode_outer(m, h, inner, snap_on=False)
    expected = {n for n in h.internal_nodes() if n != h.root}
    assert set(out.evq) == expected
    assert all(e >= 0.0 for e in out.evq.values())


def test_snap_on_changes_eff_not_raw():
    m = new_model(seed=0)
    boxes, h = small_scene()
    inner = encode_inner(m, boxes, h)
    off = decode_outer(m, h, inner, snap_on=False)
    on = decode_outer(m, h, inner, snap_on=True)
    internal = [n for n in h.internal_nodes() if n != h.root]
    assert internal, "scene must have an internal non-root node"
    for n in internal:
        assert n in on.snap_index
        assert not np.array_equal(on.eff[n], on.raw[n])
    assert not off.snap_index
    # Leaves are never snapped.
    for n in h.leaves():
        np.testing.assert_array_equal(on.eff[n], on.raw[n])


def test_no_vq_flag_disables_snapping():
    m = new_model(seed=0)
    boxes, h = small_scene()
    inner = encode_inner(m, boxes, h)
    out = decode_outer(m, h, inner, snap_on=True, flags=AblationFlags(no_vq=True))
    for n in h.nodes:
        np.testing.assert_array_equal(out.eff[n], out.raw[n])
    assert not out.snap_index


def test_symmetry_decode_paths():
    m = new_model(seed=0)
    boxes, h = sym_scene()
    inner = encode_inner(m, boxes, h)
    out = decode_outer(m, h, inner, snap_on=False)
    assert set(out.raw) == set(h.nodes)


def test_wiring_ablations_change_outputs():
    m = new_model(seed=0)
    boxes, h = small_scene()
    base = reconstruct(m, boxes, h, snap_on=False)
    for flags in [
        AblationFlags(no_sibling_inner=True),
        AblationFlags(inner_outer_concat=True),
        AblationFlags(no_inner_for_leaves=True),
    ]:
        alt = reconstruct(m, boxes, h, snap_on=False, flags=flags)
        diffs = [np.linalg.norm(a.center - b.center) for a, b in zip(base, alt)]
        assert max(diffs) > 0, f"{flags.label()} did not change the decode"


def test_decode_box_degenerate_fallback():
    # A model whose box_dec emits zeros for the axes must still return a box.
    m = new_model(seed=0)
    net = m.nets["box_dec"]
    for w in net.weights:
        w[:] = 0.0
    net.biases[-1][:] = 0.0  # all-zero params: degenerate axes, zero extents
    b = decode_box(m, np.zeros(m.config.d_code), np.zeros(m.config.d_code))
    np.testing.assert_array_equal(b.axis_u, [1, 0, 0])
    np.testing.assert_array_equal(b.axis_v, [0, 1, 0])
    assert np.all(b.extents > 0)


def test_classify_node_valid_kind():
    m = new_model(seed=0)
    kind, probs = classify_node(m, SeededRng(1).normal(size=2 * m.config.d_code))
    assert kind in ("leaf", "adjacency", "symmetry")
    assert probs.shape == (3,)
    assert probs.sum() == pytest.approx(1.0)


def test_reconstruct_shape_and_determinism():
    m = new_model(seed=0)
    boxes, h = small_scene()
    out1 = reconstruct(m, boxes, h)
    out2 = reconstruct(m, boxes, h)
    assert len(out1) == len(boxes)
    for a, b in zip(out1, out2):
        np.testing.assert_array_equal(a.center, b.center)


def test_require_stage_raises_for_untrained():
    m = new_model(seed=0)
    with pytest.raises(UntrainedModel):
        m.require_stage("vqvae", "dae")


def test_clone_model_independent():
    m = new_model(seed=0)
    c = clone_model(m)
    c.nets["box_enc"].weights[0][0, 0] += 1.0
    assert m.nets["box_enc"].weights[0][0, 0] != c.nets["box_enc"].weights[0][0, 0]
