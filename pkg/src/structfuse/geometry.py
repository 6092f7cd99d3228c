"""Oriented bounding boxes, symmetry maps, and the 12-number box encoding.

A box is center (3), extents (3, full edge lengths), and two orthonormal axes
(3 + 3); the third axis is their cross product, so every frame is right-handed
by construction. The flat parameter layout is
``[center, extents, axis_u, axis_v]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Orthonormality tolerance for validated frames.
AXIS_TOL = 1e-6
# Below this, an axis vector cannot be normalized.
_DEGENERATE_NORM = 1e-8
# Extent floor, as a fraction of the reference scene diagonal.
EXTENT_FLOOR_FRAC = 1e-4

REFLECTIVE = 0
ROTATIONAL = 1
TRANSLATIONAL = 2


class GeometryError(ValueError):
    pass


class DegenerateAxes(GeometryError):
    """Axis vectors too short or too parallel to span a frame."""


class EmptyScene(GeometryError):
    """The operation needs at least one box."""


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n < _DEGENERATE_NORM:
        raise DegenerateAxes(f"axis norm {n:.3e} too small")
    return v / n


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class OBB:
    """Oriented bounding box. Immutable after construction.

    extents are full edge lengths and must be positive; axis_u and axis_v
    must already be orthonormal within AXIS_TOL (use params_to_obb to repair
    noisy values first).
    """

    center: np.ndarray
    extents: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(self.center))
        object.__setattr__(self, "extents", _frozen(self.extents))
        object.__setattr__(self, "axis_u", _frozen(self.axis_u))
        object.__setattr__(self, "axis_v", _frozen(self.axis_v))
        for name in ("center", "extents", "axis_u", "axis_v"):
            v = getattr(self, name)
            if v.shape != (3,):
                raise GeometryError(f"{name} must have shape (3,), got {v.shape}")
        if not np.all(self.extents > 0):
            raise GeometryError(f"extents must be positive, got {self.extents}")
        u, v = self.axis_u, self.axis_v
        if abs(np.linalg.norm(u) - 1.0) > AXIS_TOL or abs(np.linalg.norm(v) - 1.0) > AXIS_TOL:
            raise DegenerateAxes("axes are not unit length")
        if abs(float(u @ v)) > AXIS_TOL:
            raise DegenerateAxes("axes are not orthogonal")

    @property
    def axis_w(self) -> np.ndarray:
        return np.cross(self.axis_u, self.axis_v)

    def corners(self) -> np.ndarray:
        """All 8 corners, shape (8, 3)."""
        half = self.extents / 2.0
        axes = np.stack([self.axis_u, self.axis_v, self.axis_w])
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=float,
        )
        return self.center + (signs * half) @ axes

    def face_centers(self) -> np.ndarray:
        """Centers of the 6 faces, shape (6, 3)."""
        half = self.extents / 2.0
        axes = np.stack([self.axis_u, self.axis_v, self.axis_w])
        offsets = np.concatenate([axes * half[:, None], -axes * half[:, None]])
        return self.center + offsets

    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extents))

    def translated(self, t: np.ndarray) -> "OBB":
        return OBB(self.center + np.asarray(t, dtype=float), self.extents, self.axis_u, self.axis_v)

    def scaled(self, s: float) -> "OBB":
        return OBB(self.center, self.extents * float(s), self.axis_u, self.axis_v)


@dataclass(frozen=True, eq=False)
class SymmetryParams:
    """8-number symmetry record: kind, unit axis, anchor point, magnitude.

    magnitude is the fold count for rotational maps and the offset length for
    translational ones; it is unused (zero) for reflective maps, where the
    axis is the mirror plane normal and the anchor a point on the plane.
    """

    kind: int
    axis: np.ndarray
    anchor: np.ndarray
    magnitude: float = 0.0

    def __post_init__(self):
        if self.kind not in (REFLECTIVE, ROTATIONAL, TRANSLATIONAL):
            raise GeometryError(f"unknown symmetry kind {self.kind}")
        object.__setattr__(self, "axis", _frozen(_unit(np.asarray(self.axis, dtype=float))))
        object.__setattr__(self, "anchor", _frozen(self.anchor))
        if self.anchor.shape != (3,) or self.axis.shape != (3,):
            raise GeometryError("axis and anchor must have shape (3,)")

    def to_vec(self) -> np.ndarray:
        return np.concatenate([[float(self.kind)], self.axis, self.anchor, [self.magnitude]])

    @staticmethod
    def from_vec(v: np.ndarray) -> "SymmetryParams":
        v = np.asarray(v, dtype=float)
        if v.shape != (8,):
            raise GeometryError(f"symmetry vector must have shape (8,), got {v.shape}")
        kind = int(round(float(v[0])))
        kind = min(max(kind, 0), 2)
        return SymmetryParams(kind=kind, axis=v[1:4], anchor=v[4:7], magnitude=float(v[7]))


def obb_to_params(b: OBB) -> np.ndarray:
    """Flatten a box to the 12-number layout [center, extents, axis_u, axis_v]."""
    return np.concatenate([b.center, b.extents, b.axis_u, b.axis_v])


def params_to_obb(v: np.ndarray, scale: float = 1.0) -> OBB:
    """Build a box from 12 noisy numbers, repairing the frame.

    axis_u is normalized, axis_v is Gram-Schmidt projected against it, and
    extents are clamped to a floor of EXTENT_FLOOR_FRAC * scale where scale is
    the reference scene diagonal. Raises DegenerateAxes when the raw axes are
    too short or parallel to span a plane.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (12,):
        raise GeometryError(f"box vector must have shape (12,), got {v.shape}")
    center = v[0:3]
    extents = v[3:6]
    u = _unit(v[6:9])
    w = v[9:12] - (v[9:12] @ u) * u
    vv = _unit(w)
    floor = EXTENT_FLOOR_FRAC * float(scale)
    extents = np.maximum(extents, floor)
    return OBB(center=center, extents=extents, axis_u=u, axis_v=vv)


def rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    d = _unit(np.asarray(axis, dtype=float))
    k = np.array([[0, -d[2], d[1]], [d[2], 0, -d[0]], [-d[1], d[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def _transformed(b: OBB, rot: np.ndarray, about: np.ndarray) -> OBB:
    c = rot @ (b.center - about) + about
    return OBB(c, b.extents, rot @ b.axis_u, rot @ b.axis_v)


def mirror_obb(b: OBB, axis: np.ndarray, anchor: np.ndarray) -> OBB:
    d = _unit(np.asarray(axis, dtype=float))
    anchor = np.asarray(anchor, dtype=float)
    refl = np.eye(3) - 2.0 * np.outer(d, d)
    return _transformed(b, refl, anchor)


def apply_symmetry(b: OBB, s: SymmetryParams, translational_copies: int = 2) -> list[OBB]:
    """Expand one generator box into its full symmetry group.

    The generator itself is always element 0. Rotational groups produce
    round(magnitude) >= 2 members; translational groups produce
    translational_copies members spaced magnitude apart along the axis.
    """
    if s.kind == REFLECTIVE:
        return [b, mirror_obb(b, s.axis, s.anchor)]
    if s.kind == ROTATIONAL:
        n = max(2, int(round(s.magnitude)))
        out = []
        for k in range(n):
            rot = rotation_matrix(s.axis, 2.0 * math.pi * k / n)
            out.append(_transformed(b, rot, s.anchor))
        return out
    n = max(2, int(translational_copies))
    return [b.translated(k * s.magnitude * s.axis) for k in range(n)]


def aabb_of(boxes: list[OBB]) -> tuple[np.ndarray, np.ndarray]:
    if not boxes:
        raise EmptyScene("no boxes")
    corners = np.concatenate([b.corners() for b in boxes])
    return corners.min(axis=0), corners.max(axis=0)


def scene_diagonal(boxes: list[OBB]) -> float:
    """Diagonal length of the axis-aligned bounding box of all box corners."""
    lo, hi = aabb_of(boxes)
    return float(np.linalg.norm(hi - lo))


@dataclass(frozen=True)
class SceneTransform:
    """Similarity transform mapping world boxes into normalized coordinates."""

    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def apply(self, b: OBB) -> OBB:
        return OBB((b.center - self.offset) * self.scale, b.extents * self.scale, b.axis_u, b.axis_v)

    def invert(self, b: OBB) -> OBB:
        return OBB(b.center / self.scale + self.offset, b.extents / self.scale, b.axis_u, b.axis_v)

    def apply_all(self, boxes: list[OBB]) -> list[OBB]:
        return [self.apply(b) for b in boxes]

    def invert_all(self, boxes: list[OBB]) -> list[OBB]:
        return [self.invert(b) for b in boxes]


def normalize_scene(boxes: list[OBB]) -> tuple[list[OBB], SceneTransform]:
    """Center the scene AABB at the origin and scale its diagonal to 1."""
    lo, hi = aabb_of(boxes)
    diag = float(np.linalg.norm(hi - lo))
    if diag < _DEGENERATE_NORM:
        raise GeometryError("scene is degenerate, diagonal ~ 0")
    t = SceneTransform(offset=(lo + hi) / 2.0, scale=1.0 / diag)
    return t.apply_all(boxes), t


def obb_allclose(a: OBB, b: OBB, tol: float = 1e-9) -> bool:
    return (
        np.allclose(a.center, b.center, atol=tol)
        and np.allclose(a.extents, b.extents, atol=tol)
        and np.allclose(a.axis_u, b.axis_u, atol=tol)
        and np.allclose(a.axis_v, b.axis_v, atol=tol)
    )
