"""Measure representations, moments, pushforwards, and Wasserstein distances.

Two concrete representations are supported: weighted point clouds in R^d
(`DiscreteMeasure`) and periodic densities on the flat torus [0,1)^dim
(`GridDensity`, stored relative to the normalized volume, mean 1).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CostSpec,
    deposit_grid,
    torus_distance,
    euclidean_distance,
    unit_torus_grid,
    wrap_signed,
    wrap_unit,
)

WEIGHT_TOL = 1e-12
MEAN_TOL = 1e-10
MERGE_TOL = 1e-12
EXACT_SIZE_GUARD = 4096


class MeasureError(ValueError):
    """Invalid measure data or unsupported operation on a measure."""


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted point cloud in R^d, d in {1,2,3}; weights sum to one."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[1] not in (1, 2, 3):
            raise MeasureError(f"points must be (N, d) with d in 1..3, got {pts.shape}")
        w = np.asarray(self.weights, dtype=float).ravel()
        if len(w) != len(pts) or len(w) == 0:
            raise MeasureError("points and weights must have equal length >= 1")
        if np.any(w < 0):
            raise MeasureError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise MeasureError(f"weights must sum to 1 within {WEIGHT_TOL}, got {w.sum()!r}")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(w))):
            raise MeasureError("points and weights must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        self.points.setflags(write=False)
        self.weights.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return len(self.weights)

    @classmethod
    def dirac(cls, point) -> "DiscreteMeasure":
        return cls(np.atleast_2d(np.asarray(point, dtype=float)), np.array([1.0]))

    @classmethod
    def from_points(cls, points, weights=None) -> "DiscreteMeasure":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[0] == 1 and pts.shape[1] > 3:
            pts = pts.T
        if weights is None:
            weights = np.full(len(pts), 1.0 / len(pts))
        return cls(pts, weights)

    def merged(self, tol: float = MERGE_TOL) -> "DiscreteMeasure":
        """Merge atoms whose coordinates agree within tol (sums their weights)."""
        key = np.round(self.points / tol).astype(np.int64)
        uniq, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
        w = np.zeros(len(uniq))
        np.add.at(w, inverse.ravel(), self.weights)
        pts = self.points[first]
        return DiscreteMeasure(pts, w / w.sum())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i}" for i in range(self.dim)] + ["w"])
            for p, w in zip(self.points, self.weights):
                writer.writerow([repr(float(v)) for v in p] + [repr(float(w))])

    @classmethod
    def from_csv(cls, path) -> "DiscreteMeasure":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise MeasureError(f"{path}: empty measure file")
        header = rows[0]
        if header[-1] != "w" or not header[0].startswith("x"):
            raise MeasureError(f"{path}: expected header 'x0[,x1[,x2]],w'")
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        return cls(data[:, :-1], data[:, -1])


@dataclass(frozen=True)
class GridDensity:
    """Nonnegative density on the flat torus [0,1)^dim w.r.t. normalized volume.

    n cells per axis (power of two, >= 8); values are stored row-major with
    mean exactly 1 within 1e-10 so that the density integrates to one.
    """

    dim: int
    n: int
    values: np.ndarray

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise MeasureError("grid dim must be 1 or 2")
        n = int(self.n)
        if n < 8 or (n & (n - 1)) != 0:
            raise MeasureError(f"n must be a power of two >= 8, got {n}")
        vals = np.asarray(self.values, dtype=float).reshape((n,) * self.dim)
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise MeasureError("density values must be finite and nonnegative")
        if abs(vals.mean() - 1.0) > MEAN_TOL:
            raise MeasureError(f"density mean must be 1 within {MEAN_TOL}, got {vals.mean()!r}")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "values", vals)
        self.values.setflags(write=False)

    @classmethod
    def uniform(cls, dim: int, n: int) -> "GridDensity":
        return cls(dim, n, np.ones((n,) * dim))

    @classmethod
    def from_values(cls, values, normalize: bool = False) -> "GridDensity":
        vals = np.asarray(values, dtype=float)
        dim = vals.ndim
        if normalize:
            vals = vals / vals.mean()
        return cls(dim, vals.shape[0], vals)

    @property
    def grid(self):
        return unit_torus_grid(self.dim, self.n)

    @property
    def min_value(self) -> float:
        return float(self.values.min())

    def is_positive(self, kappa: float) -> bool:
        """Positive-density flag: min value >= kappa > 0."""
        if kappa <= 0:
            raise MeasureError("positivity threshold kappa must be > 0")
        return self.min_value >= kappa

    def nodes(self) -> np.ndarray:
        return self.grid.nodes()

    def cell_masses(self) -> np.ndarray:
        return self.values.ravel() / self.n ** self.dim

    def as_discrete(self, subdiv: int = 1) -> DiscreteMeasure:
        """Midpoint quadrature: one atom per (sub)cell carrying the cell mass."""
        m = self.n * subdiv
        if self.dim == 1:
            x = (np.arange(m) + 0.5) / m
            cell = np.minimum((x * self.n).astype(int), self.n - 1)
            w = self.values[cell] / m
            return DiscreteMeasure(x[:, None], w / w.sum())
        x = (np.arange(m) + 0.5) / m
        xx, yy = np.meshgrid(x, x, indexing="ij")
        ci = np.minimum((xx * self.n).astype(int), self.n - 1)
        cj = np.minimum((yy * self.n).astype(int), self.n - 1)
        w = (self.values[ci, cj] / m ** 2).ravel()
        pts = np.column_stack([xx.ravel(), yy.ravel()])
        keep = w > 0
        if not np.all(keep):
            pts, w = pts[keep], w[keep]
        return DiscreteMeasure(pts, w / w.sum())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("dim,n\n")
            fh.write(f"{self.dim},{self.n}\n")
            for v in self.values.ravel():
                fh.write(repr(float(v)) + "\n")

    @classmethod
    def from_csv(cls, path) -> "GridDensity":
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        if not lines:
            raise MeasureError(f"{path}: empty density file")
        start = 1 if lines[0].replace(" ", "") == "dim,n" else 0
        try:
            dim, n = (int(tok) for tok in lines[start].split(","))
        except Exception as exc:
            raise MeasureError(f"{path}: expected 'dim,n' metadata line") from exc
        vals = np.array([float(v) for v in lines[start + 1:]])
        if len(vals) != n ** dim:
            raise MeasureError(f"{path}: expected {n ** dim} values, got {len(vals)}")
        return cls(dim, n, vals.reshape((n,) * dim))


@dataclass(frozen=True)
class EmpiricalSample:
    """Seed-reproducible batch of draws from some source measure."""

    draws: np.ndarray
    seed: int

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.draws, dtype=float))
        if len(d) < 1:
            raise MeasureError("sample must contain at least one draw")
        object.__setattr__(self, "draws", d)
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def size(self) -> int:
        return len(self.draws)


def draw_sample(mu: DiscreteMeasure | GridDensity, n_draws: int, seed: int) -> EmpiricalSample:
    """Draw n_draws i.i.d. points from mu, reproducibly from the seed.

    Grid densities are sampled exactly: pick a cell by its mass, then a
    uniform point inside the cell.
    """
    if n_draws < 1:
        raise MeasureError("n_draws must be >= 1")
    rng = np.random.default_rng(seed)
    if isinstance(mu, DiscreteMeasure):
        idx = rng.choice(mu.size, size=n_draws, p=mu.weights / mu.weights.sum())
        return EmpiricalSample(mu.points[idx], seed)
    masses = mu.cell_masses()
    idx = rng.choice(len(masses), size=n_draws, p=masses / masses.sum())
    offs = rng.random((n_draws, mu.dim)) / mu.n
    if mu.dim == 1:
        corners = (idx / mu.n)[:, None]
    else:
        corners = np.column_stack([idx // mu.n, idx % mu.n]) / mu.n
    return EmpiricalSample(corners + offs, seed)


def empirical_measure(sample: EmpiricalSample) -> DiscreteMeasure:
    """Atoms at the draws, weight 1/N each; coincident draws merge."""
    n = sample.size
    return DiscreteMeasure(sample.draws, np.full(n, 1.0 / n)).merged()


def _base_point(base, dim: int) -> np.ndarray:
    b = np.asarray(base, dtype=float).ravel()
    if len(b) != dim:
        raise MeasureError(f"base point dimension {len(b)} != measure dimension {dim}")
    return b


def p_moment(mu: DiscreteMeasure | GridDensity, p: float, base) -> float:
    """p-th moment around `base`: integral of d(base, x)^p dmu(x).

    Discrete measures use exact summation with the Euclidean metric; grid
    densities use midpoint quadrature with the torus quotient metric.
    """
    if p < 1:
        raise MeasureError("moment order p must be >= 1")
    if isinstance(mu, DiscreteMeasure):
        b = _base_point(base, mu.dim)
        d = euclidean_distance(mu.points, b[None, :])
        return float(np.sum(mu.weights * d ** p))
    b = _base_point(base, mu.dim)
    d = torus_distance(mu.nodes(), b[None, :])
    return float(np.sum(mu.cell_masses() * d ** p))


def _as_map(T):
    """Accept a TransportMap-like object (with .evaluate) or a plain callable."""
    ev = getattr(T, "evaluate", None)
    return ev if callable(ev) else T


def pushforward(T, mu: DiscreteMeasure) -> DiscreteMeasure:
    """Image measure T_* mu: atoms move, weights are untouched, images merge."""
    f = _as_map(T)
    images = []
    for pt in mu.points:
        try:
            y = np.asarray(f(pt[None, :]), dtype=float).reshape(-1)
        except Exception as exc:
            raise MeasureError(f"map undefined at support point {pt.tolist()}: {exc}") from exc
        if not np.all(np.isfinite(y)):
            raise MeasureError(f"map undefined at support point {pt.tolist()}")
        images.append(y)
    return DiscreteMeasure(np.vstack(images), mu.weights).merged()


def grid_pushforward(T, rho: GridDensity, n_particles: int | None = None) -> GridDensity:
    """Particle estimate of T_* rho on rho's own grid.

    Particles are seeded at subcell centers (exact quadrature of the
    piecewise-constant density), transported through the map's node
    interpolation, and deposited back with linear (cloud-in-cell) weights.
    """
    n, dim = rho.n, rho.dim
    if n_particles is None:
        n_particles = 16 * n if dim == 1 else (4 * n) ** 2
    if n_particles < n ** dim:
        raise MeasureError(f"n_particles must be >= n^dim = {n ** dim}")
    subdiv = 1
    while (subdiv * n) ** dim < n_particles:
        subdiv += 1
    atoms = rho.as_discrete(subdiv=subdiv)
    f = _as_map(T)
    images = np.atleast_2d(np.asarray(f(atoms.points), dtype=float))
    hist = deposit_grid(images, atoms.weights, n, dim)
    total = hist.sum()
    if total <= 0:
        raise MeasureError("pushforward produced an empty histogram")
    return GridDensity(dim, n, hist / total * n ** dim)


# ---------------------------------------------------------------------------
# one-dimensional Wasserstein distances (quantile coupling)
# ---------------------------------------------------------------------------

def _atoms_1d(mu: DiscreteMeasure | GridDensity, subdiv: int = 1):
    if isinstance(mu, DiscreteMeasure):
        if mu.dim != 1:
            raise MeasureError("wasserstein_1d requires one-dimensional measures")
        x = mu.points[:, 0]
        w = mu.weights
    else:
        if mu.dim != 1:
            raise MeasureError("wasserstein_1d requires one-dimensional measures")
        dm = mu.as_discrete(subdiv=subdiv)
        x, w = dm.points[:, 0], dm.weights
    order = np.argsort(x, kind="stable")
    return x[order], w[order]


def _quantile_cost(xu, wu, xv, wv, p: float) -> float:
    """Exact quantile-coupling cost sum over merged cumulative-weight segments."""
    cu = np.cumsum(wu)
    cv = np.cumsum(wv)
    levels = np.union1d(cu[:-1], cv[:-1])
    levels = np.concatenate([levels, [min(cu[-1], cv[-1])]])
    lower = np.concatenate([[0.0], levels[:-1]])
    seg = np.maximum(levels - lower, 0.0)
    iu = np.searchsorted(cu, lower, side="right")
    iv = np.searchsorted(cv, lower, side="right")
    iu = np.minimum(iu, len(xu) - 1)
    iv = np.minimum(iv, len(xv) - 1)
    diff = np.abs(xu[iu] - xv[iv])
    return float(np.sum(seg * diff ** p))


def _circle_w1(xu, wu, xv, wv) -> float:
    """Exact W1 on the circle: min_t integral |F_mu - F_nu - t| dx over [0,1)."""
    xu = wrap_unit(xu)
    xv = wrap_unit(xv)
    z = np.union1d(xu, xv)
    cu = np.zeros(len(z))
    cv = np.zeros(len(z))
    np.add.at(cu, np.searchsorted(z, xu), wu)
    np.add.at(cv, np.searchsorted(z, xv), wv)
    fu = np.cumsum(cu)
    fv = np.cumsum(cv)
    d = fu - fv
    seg = np.diff(np.concatenate([z, [z[0] + 1.0]]))
    order = np.argsort(d, kind="stable")
    csum = np.cumsum(seg[order])
    k = np.searchsorted(csum, 0.5 * csum[-1])
    t_star = d[order[min(k, len(d) - 1)]]
    return float(np.sum(seg * np.abs(d - t_star)))


def _circle_cut_cost(xu, wu, xv, wv, p: float) -> float:
    """Min over support-point cuts of the line quantile cost (general p on S^1)."""
    cuts = np.union1d(wrap_unit(xu), wrap_unit(xv))
    best = np.inf
    for c in cuts:
        su = wrap_unit(xu - c)
        sv = wrap_unit(xv - c)
        ou = np.argsort(su, kind="stable")
        ov = np.argsort(sv, kind="stable")
        cost = _quantile_cost(su[ou], wu[ou], sv[ov], wv[ov], p)
        best = min(best, cost)
    return best


def wasserstein_1d(mu, nu, p: float = 1.0, periodic: bool = False,
                   grid_subdiv: int = 1) -> float:
    """Exact order-p Wasserstein distance between 1D measures.

    On the line this is the quantile-function coupling; on the circle the
    optimal cut is found exactly (weighted-median formula for p=1, cut
    search over support points otherwise). Grid densities enter through
    midpoint quadrature at subcell resolution `grid_subdiv`.
    """
    if p < 1:
        raise MeasureError("order p must be >= 1")
    xu, wu = _atoms_1d(mu, grid_subdiv)
    xv, wv = _atoms_1d(nu, grid_subdiv)
    if periodic:
        if p == 1.0:
            return _circle_w1(xu, wu, xv, wv)
        return _circle_cut_cost(xu, wu, xv, wv, p) ** (1.0 / p)
    return _quantile_cost(xu, wu, xv, wv, p) ** (1.0 / p)


def wasserstein_exact(mu: DiscreteMeasure, nu: DiscreteMeasure, p: float = 1.0,
                      periodic: bool = False) -> float:
    """Order-p Wasserstein distance via the exact coupling LP (cost d^p)."""
    from . import transport

    if not isinstance(mu, DiscreteMeasure) or not isinstance(nu, DiscreteMeasure):
        raise MeasureError("wasserstein_exact operates on discrete measures")
    if mu.size > EXACT_SIZE_GUARD or nu.size > EXACT_SIZE_GUARD:
        raise MeasureError(
            f"support sizes ({mu.size}, {nu.size}) exceed LP guard {EXACT_SIZE_GUARD}")
    plan = transport.solve_exact(mu, nu, CostSpec("dist_p", p=p, periodic=periodic))
    return float(max(plan.cost, 0.0) ** (1.0 / p))


def wasserstein_sinkhorn_upper(mu, nu, p: float = 1.0, periodic: bool = False,
                               epsilon: float = 4e-3, max_iter: int = 200,
                               tol: float = 1e-4) -> float:
    """Certified upper bound on W_p from a rounded entropic plan.

    The rounded plan is feasible, so its cost can only exceed the optimum;
    useful where the exact LP is out of reach (e.g. 2D grid densities).
    Loose convergence settings only slacken the bound, never invalidate it.
    """
    from . import transport

    a = mu.as_discrete() if isinstance(mu, GridDensity) else mu
    b = nu.as_discrete() if isinstance(nu, GridDensity) else nu
    plan = transport.solve_sinkhorn(a, b, CostSpec("dist_p", p=p, periodic=periodic),
                                    epsilon=epsilon, max_iter=max_iter, tol=tol,
                                    warm_iters=8)
    return float(max(plan.cost, 0.0) ** (1.0 / p))
