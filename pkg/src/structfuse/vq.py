"""Discrete substructure prior: codebook snapping and representation error.

Outer codes are projected into a small embedded space (vq_enc), snapped to
the nearest codebook row by squared distance, and projected back (vq_dec).
The squared embedded-space distance to the chosen row is the representation
error; summing it over internal non-root nodes gives the structure objective
that hierarchy inference minimizes. With vq_in_code_space the projections are
the identity and rows live directly in code space.
"""

from __future__ import annotations

import numpy as np

from .nn import mlp_forward


def snap(codebook: np.ndarray, z: np.ndarray) -> tuple[int, np.ndarray]:
    """Nearest codebook row by squared Euclidean distance.

    Ties break to the lowest index. Returns (row index, row copy).
    """
    z = np.asarray(z, dtype=float)
    d = codebook - z
    k = int(np.argmin(np.einsum("ij,ij->i", d, d)))
    return k, codebook[k].copy()


def embed(m, x: np.ndarray) -> np.ndarray:
    """Project an outer code into the codebook's space."""
    if m.config.vq_in_code_space:
        return np.asarray(x, dtype=float)
    y, _ = mlp_forward(m.nets["vq_enc"], x)
    return y


def unembed(m, z: np.ndarray) -> np.ndarray:
    """Project an embedded (or snapped) vector back to code space."""
    if m.config.vq_in_code_space:
        return np.asarray(z, dtype=float)
    y, _ = mlp_forward(m.nets["vq_dec"], z)
    return y


def representation_error(m, x: np.ndarray) -> float:
    """Squared distance between the embedded code and its nearest row."""
    z = embed(m, x)
    _, e = snap(m.codebook, z)
    diff = z - e
    return float(diff @ diff)


def vq_denoise(m, x: np.ndarray) -> np.ndarray:
    """Snap an outer code to the prior: embed, quantize, project back."""
    z = embed(m, x)
    _, e = snap(m.codebook, z)
    return unembed(m, e)


def total_objective(m, h, outers: dict[int, np.ndarray]) -> float:
    """Sum of representation errors over internal non-root nodes.

    outers must be the raw (un-snapped) outer codes of a decode pass.
    """
    total = 0.0
    for nid in h.internal_nodes():
        if nid == h.root:
            continue
        total += representation_error(m, outers[nid])
    return total
