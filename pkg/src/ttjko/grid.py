"""Regular grid on an axis-aligned box: coordinates, quadrature, differences.

Axis ``k`` carries ``N_k`` nodes including both endpoints, so the
spacing is ``h_k = (R_k - L_k) / (N_k - 1)`` and node ``i`` sits at
``L_k + i * h_k``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tt import TTTensor


@dataclass(frozen=True)
class Grid:
    lower: np.ndarray
    upper: np.ndarray
    nodes: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        nodes = np.atleast_1d(np.asarray(self.nodes, dtype=int))
        if not (lower.shape == upper.shape == nodes.shape):
            raise ValueError("lower, upper, nodes must have identical lengths")
        if np.any(upper <= lower):
            raise ValueError("upper must exceed lower on every axis")
        if np.any(nodes < 2):
            raise ValueError("need at least 2 nodes per axis")
        for name, arr in (("lower", lower), ("upper", upper), ("nodes", nodes)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def regular(cls, lower, upper, nodes, d: int | None = None) -> "Grid":
        """Build from per-axis values or scalars broadcast to dimension d."""
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        nodes = np.atleast_1d(np.asarray(nodes, dtype=int))
        if d is None:
            d = max(lower.size, upper.size, nodes.size)
        return cls(
            np.broadcast_to(lower, (d,)).copy(),
            np.broadcast_to(upper, (d,)).copy(),
            np.broadcast_to(nodes, (d,)).copy(),
        )

    @property
    def d(self) -> int:
        return self.lower.size

    @property
    def shape(self) -> tuple:
        return tuple(int(n) for n in self.nodes)

    @property
    def spacings(self) -> np.ndarray:
        return (self.upper - self.lower) / (self.nodes - 1)

    def axis_nodes(self, axis: int) -> np.ndarray:
        return np.linspace(self.lower[axis], self.upper[axis], self.nodes[axis])

    def points(self, indices: np.ndarray) -> np.ndarray:
        """Coordinates of grid multi-indices, (M, d) ints -> (M, d) floats."""
        idx = np.asarray(indices, dtype=float)
        return self.lower + idx * self.spacings

    def clamp(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def to_dict(self) -> dict:
        return {
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "nodes": self.nodes.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Grid":
        return cls.regular(data["lower"], data["upper"], data["nodes"])


def laplacian_1d(grid: Grid, axis: int) -> np.ndarray:
    """Second-difference matrix with no-flux closure: corner entries are -1.

    Every row sums to zero, so the induced semigroup conserves the
    lattice sum.
    """
    n = int(grid.nodes[axis])
    h = grid.spacings[axis]
    mat = np.zeros((n, n))
    idx = np.arange(n)
    mat[idx, idx] = -2.0
    mat[idx[:-1], idx[:-1] + 1] = 1.0
    mat[idx[1:], idx[1:] - 1] = 1.0
    mat[0, 0] = -1.0
    mat[-1, -1] = -1.0
    return mat / h**2


def quadrature_weights(grid: Grid, axis: int) -> np.ndarray:
    """Trapezoidal weights: h/2 at the endpoints, h inside."""
    n = int(grid.nodes[axis])
    h = grid.spacings[axis]
    w = np.full(n, h)
    w[0] = w[-1] = h / 2.0
    return w


def all_quadrature_weights(grid: Grid) -> list:
    return [quadrature_weights(grid, k) for k in range(grid.d)]


def gradient_matrix(grid: Grid, axis: int) -> np.ndarray:
    """Central differences inside, one-sided first order at the two boundary nodes."""
    n = int(grid.nodes[axis])
    if n < 3:
        raise ValueError("gradient needs at least 3 nodes per axis")
    h = grid.spacings[axis]
    mat = np.zeros((n, n))
    idx = np.arange(1, n - 1)
    mat[idx, idx + 1] = 0.5 / h
    mat[idx, idx - 1] = -0.5 / h
    mat[0, 0], mat[0, 1] = -1.0 / h, 1.0 / h
    mat[-1, -2], mat[-1, -1] = -1.0 / h, 1.0 / h
    return mat


def gradient_tensors(t: TTTensor, grid: Grid) -> list:
    """Per-axis finite-difference gradients of a TT function; ranks unchanged."""
    if tuple(t.shape) != grid.shape:
        raise ValueError(f"tensor shape {t.shape} does not match grid {grid.shape}")
    out = []
    for axis in range(grid.d):
        dmat = gradient_matrix(grid, axis)
        cores = list(t.cores)
        cores[axis] = np.einsum("ij,ajb->aib", dmat, t.cores[axis], optimize=True)
        out.append(TTTensor(cores, copy=False))
    return out


def _cell_weights(grid: Grid, x: np.ndarray):
    """Cell indices and barycentric weights of (possibly clamped) points."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    clamped = np.any((x < grid.lower) | (x > grid.upper), axis=1)
    xc = grid.clamp(x)
    h = grid.spacings
    pos = (xc - grid.lower) / h
    cell = np.minimum(pos.astype(np.intp), np.asarray(grid.nodes) - 2)
    w = pos - cell
    return cell, w, clamped


def interpolate_batch(t: TTTensor, grid: Grid, x: np.ndarray):
    """Multilinear interpolation at points (M, d).

    Returns ``(values, clamped)`` where ``clamped`` flags points that
    fell outside the box and were evaluated at its surface.  Works as a
    single contraction pass per axis (cost O(M d r^2)), which covers the
    high-dimensional case as well.
    """
    if tuple(t.shape) != grid.shape:
        raise ValueError(f"tensor shape {t.shape} does not match grid {grid.shape}")
    for core in t.cores:
        if not np.all(np.isfinite(core)):
            raise ValueError("tensor cores contain non-finite values")
    cell, w, clamped = _cell_weights(grid, x)
    v = None
    for n, core in enumerate(t.cores):
        lo = core[:, cell[:, n], :]
        hi = core[:, cell[:, n] + 1, :]
        slab = lo + w[:, n][None, :, None] * (hi - lo)
        if v is None:
            v = slab[0].copy()          # (M, r)
        else:
            v = np.matmul(v[:, None, :], slab.transpose(1, 0, 2))[:, 0, :]
    return v[:, 0], clamped


def interpolate(t: TTTensor, grid: Grid, point) -> float:
    """Multilinear interpolation at one point (clamped into the box)."""
    vals, _ = interpolate_batch(t, grid, np.asarray(point, dtype=float)[None, :])
    return float(vals[0])
