"""Flat-space and torus geometry helpers shared across the package.

Grid quantities live on the flat torus [0,1)^d (cell-centered nodes),
bounded-box charts use the same cell-centered layout without wrapping.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def wrap_unit(x: np.ndarray | float) -> np.ndarray:
    """Map coordinates into the fundamental domain [0, 1)."""
    return np.mod(x, 1.0)


def wrap_signed(x: np.ndarray | float) -> np.ndarray:
    """Wrap displacements to the nearest lift in [-0.5, 0.5)."""
    return np.mod(np.asarray(x, dtype=float) + 0.5, 1.0) - 0.5


def torus_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Quotient metric on [0,1)^d: Euclidean norm of per-axis wrapped deltas."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    delta = wrap_signed(a - b)
    return np.sqrt(np.sum(delta * delta, axis=-1))


def euclidean_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    delta = a - b
    return np.sqrt(np.sum(delta * delta, axis=-1))


def pairwise_distance(x: np.ndarray, y: np.ndarray, periodic: bool = False) -> np.ndarray:
    """(n, m) matrix of distances between point clouds x (n,d) and y (m,d)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    delta = x[:, None, :] - y[None, :, :]
    if periodic:
        delta = wrap_signed(delta)
    return np.sqrt(np.sum(delta * delta, axis=-1))


@dataclass(frozen=True)
class CostSpec:
    """Cost-function descriptor for coupling solvers.

    kind: "sqdist" for d(x,y)^2, "dist_p" for d(x,y)^p, "negdot" for -x.y.
    periodic selects the torus quotient metric for the distance-based kinds.
    """

    kind: str = "sqdist"
    p: float = 2.0
    periodic: bool = False

    def __post_init__(self):
        if self.kind not in ("sqdist", "dist_p", "negdot"):
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if self.kind == "dist_p" and self.p < 1:
            raise ValueError("cost exponent p must be >= 1")

    def matrix(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if self.kind == "negdot":
            return -(x @ y.T)
        d = pairwise_distance(x, y, periodic=self.periodic)
        if self.kind == "sqdist":
            return d * d
        return d ** self.p


@dataclass(frozen=True)
class GridSpec:
    """Cell-centered uniform grid over a box or torus chart.

    Node i along an axis sits at lo + (i + 1/2) * (hi - lo) / n.
    """

    dim: int
    n: int
    bounds: tuple[tuple[float, float], ...] = (((0.0, 1.0)),)
    periodic: bool = True

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("grid dim must be 1 or 2")
        bounds = tuple(tuple(map(float, b)) for b in self.bounds)
        if len(bounds) == 1 and self.dim == 2:
            bounds = bounds * 2
        if len(bounds) != self.dim:
            raise ValueError("bounds must give one (lo, hi) pair per axis")
        object.__setattr__(self, "bounds", bounds)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([(hi - lo) / self.n for lo, hi in self.bounds])

    def axis_nodes(self, axis: int) -> np.ndarray:
        lo, hi = self.bounds[axis]
        h = (hi - lo) / self.n
        return lo + (np.arange(self.n) + 0.5) * h

    def nodes(self) -> np.ndarray:
        """All node coordinates, row-major, shape (n^dim, dim)."""
        axes = [self.axis_nodes(a) for a in range(self.dim)]
        if self.dim == 1:
            return axes[0][:, None]
        xx, yy = np.meshgrid(axes[0], axes[1], indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])


def unit_torus_grid(dim: int, n: int) -> GridSpec:
    return GridSpec(dim=dim, n=n, bounds=((0.0, 1.0),) * dim, periodic=True)


def interp_grid(values: np.ndarray, points: np.ndarray, grid: GridSpec) -> np.ndarray:
    """(Bi)linear interpolation of node values at arbitrary points.

    Periodic grids wrap across the seam; box grids clamp to the edge cells.
    values has shape (n,)*dim, points (m, dim); returns (m,).
    """
    values = np.asarray(values, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = grid.n
    idx0, frac = [], []
    for a in range(grid.dim):
        lo, hi = grid.bounds[a]
        f = (pts[:, a] - lo) / (hi - lo) * n - 0.5
        if grid.periodic:
            i0 = np.floor(f).astype(int)
            w = f - i0
            i0 = np.mod(i0, n)
        else:
            f = np.clip(f, 0.0, n - 1.0)
            i0 = np.minimum(np.floor(f).astype(int), n - 2) if n > 1 else np.zeros(len(f), int)
            w = f - i0
        idx0.append(i0)
        frac.append(w)
    if grid.dim == 1:
        i0 = idx0[0]
        i1 = np.mod(i0 + 1, n) if grid.periodic else np.minimum(i0 + 1, n - 1)
        w = frac[0]
        return (1 - w) * values[i0] + w * values[i1]
    i0, j0 = idx0
    wi, wj = frac
    if grid.periodic:
        i1, j1 = np.mod(i0 + 1, n), np.mod(j0 + 1, n)
    else:
        i1, j1 = np.minimum(i0 + 1, n - 1), np.minimum(j0 + 1, n - 1)
    v00 = values[i0, j0]
    v10 = values[i1, j0]
    v01 = values[i0, j1]
    v11 = values[i1, j1]
    return ((1 - wi) * (1 - wj) * v00 + wi * (1 - wj) * v10
            + (1 - wi) * wj * v01 + wi * wj * v11)


def deposit_grid(points: np.ndarray, weights: np.ndarray, n: int, dim: int) -> np.ndarray:
    """Histogram deposit of weighted particles onto the unit torus grid.

    Nearest-cell binning keeps cell permutations (identity, rigid shifts by
    whole cells) exact; accuracy for smooth maps comes from the particle
    count, not the deposit stencil.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    w = np.asarray(weights, dtype=float)
    out = np.zeros((n,) * dim)
    idx = [np.minimum((wrap_unit(pts[:, a]) * n).astype(int), n - 1) for a in range(dim)]
    if dim == 1:
        np.add.at(out, idx[0], w)
        return out
    np.add.at(out, (idx[0], idx[1]), w)
    return out
