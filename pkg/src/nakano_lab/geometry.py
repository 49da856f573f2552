"""Parameter bases, fibers and total spaces over flattened real coordinates.

Every domain lives in R^d after complex coordinates are split into real
pairs.  A ReinhardtAnnulus over C^m therefore has dimension 2m and checks
membership through per-coordinate moduli; a tube domain restricts only the
real parts and leaves the imaginary directions free (they are never
integrated over).

Built-in families are pseudoconvex by construction (products, tubes over
convex bases, Reinhardt annuli); no numerical pseudoconvexity test is
attempted, and fibers are connected by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, EmptyGridError

__all__ = [
    "Domain",
    "Box",
    "HalfspaceConvex",
    "ReinhardtAnnulus",
    "TubeOverBase",
    "Fibered",
    "SampleGrid",
    "contains",
    "fiber",
    "sample_grid",
]

_MEMBER_TOL = 1e-12


class Domain:
    """Common interface: dimension, membership, bounding box."""

    dim: int

    def contains(self, p: np.ndarray, tol: float = _MEMBER_TOL) -> bool:
        raise NotImplementedError

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def _check_dim(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if p.shape[-1] != self.dim:
            raise ValueError(f"point dimension {p.shape[-1]} != domain dimension {self.dim}")
        return p

    def contains_many(self, P: np.ndarray, tol: float = _MEMBER_TOL) -> np.ndarray:
        P = self._check_dim(np.atleast_2d(P))
        return np.array([self.contains(p, tol) for p in P], dtype=bool)


@dataclass
class Box(Domain):
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != self.hi.shape or self.lo.ndim != 1:
            raise ConfigError("box bounds must be equal-length vectors")
        if not np.all(np.isfinite(self.lo)) or not np.all(np.isfinite(self.hi)):
            raise ConfigError("box bounds must be finite")
        if np.any(self.hi < self.lo):
            raise ConfigError("box upper bounds below lower bounds")
        self.dim = self.lo.size

    def contains(self, p, tol=_MEMBER_TOL):
        p = self._check_dim(p)
        return bool(np.all(p >= self.lo - tol) and np.all(p <= self.hi + tol))

    def contains_many(self, P, tol=_MEMBER_TOL):
        P = self._check_dim(np.atleast_2d(P))
        return np.all((P >= self.lo - tol) & (P <= self.hi + tol), axis=-1)

    def bounding_box(self):
        return self.lo.copy(), self.hi.copy()

    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))


@dataclass
class HalfspaceConvex(Domain):
    """Intersection of halfspaces a.x <= b inside a declared bounding box.

    Nonemptiness is certified by a strictly feasible interior point supplied
    at construction time.
    """

    normals: np.ndarray  # (k, d)
    offsets: np.ndarray  # (k,)
    box_lo: np.ndarray
    box_hi: np.ndarray
    interior_point: np.ndarray

    def __post_init__(self):
        self.normals = np.atleast_2d(np.asarray(self.normals, dtype=float))
        self.offsets = np.asarray(self.offsets, dtype=float)
        self.box_lo = np.asarray(self.box_lo, dtype=float)
        self.box_hi = np.asarray(self.box_hi, dtype=float)
        self.interior_point = np.asarray(self.interior_point, dtype=float)
        self.dim = self.normals.shape[1]
        if self.offsets.shape != (self.normals.shape[0],):
            raise ConfigError("one offset per halfspace required")
        if not (np.all(np.isfinite(self.box_lo)) and np.all(np.isfinite(self.box_hi))):
            raise ConfigError("bounding box must be finite")
        slack = self.offsets - self.normals @ self.interior_point
        if np.any(slack <= 0.0):
            raise ConfigError("interior point is not strictly feasible")
        if not Box(self.box_lo, self.box_hi).contains(self.interior_point):
            raise ConfigError("interior point outside bounding box")

    def contains(self, p, tol=_MEMBER_TOL):
        p = self._check_dim(p)
        if not (np.all(p >= self.box_lo - tol) and np.all(p <= self.box_hi + tol)):
            return False
        return bool(np.all(self.normals @ p <= self.offsets + tol))

    def contains_many(self, P, tol=_MEMBER_TOL):
        P = self._check_dim(np.atleast_2d(P))
        in_box = np.all((P >= self.box_lo - tol) & (P <= self.box_hi + tol), axis=-1)
        in_half = np.all(P @ self.normals.T <= self.offsets + tol, axis=-1)
        return in_box & in_half

    def bounding_box(self):
        return self.box_lo.copy(), self.box_hi.copy()


@dataclass
class ReinhardtAnnulus(Domain):
    """Product of annuli 0 < r_lo[j] <= |z_j| <= r_hi[j] in real-pair coordinates."""

    r_lo: np.ndarray
    r_hi: np.ndarray

    def __post_init__(self):
        self.r_lo = np.asarray(self.r_lo, dtype=float)
        self.r_hi = np.asarray(self.r_hi, dtype=float)
        if self.r_lo.ndim != 1 or self.r_lo.shape != self.r_hi.shape:
            raise ConfigError("annulus radii must be equal-length vectors")
        if np.any(self.r_lo <= 0.0) or np.any(self.r_hi < self.r_lo):
            raise ConfigError("annulus radii must satisfy 0 < r_lo <= r_hi")
        self.m = self.r_lo.size
        self.dim = 2 * self.m

    def moduli(self, p: np.ndarray) -> np.ndarray:
        pairs = np.asarray(p, dtype=float).reshape(*np.shape(p)[:-1], self.m, 2)
        return np.hypot(pairs[..., 0], pairs[..., 1])

    def contains(self, p, tol=_MEMBER_TOL):
        p = self._check_dim(p)
        r = self.moduli(p)
        return bool(np.all(r >= self.r_lo - tol) and np.all(r <= self.r_hi + tol))

    def contains_many(self, P, tol=_MEMBER_TOL):
        P = self._check_dim(np.atleast_2d(P))
        r = self.moduli(P)
        return np.all((r >= self.r_lo - tol) & (r <= self.r_hi + tol), axis=-1)

    def bounding_box(self):
        hi = np.repeat(self.r_hi, 2)
        return -hi, hi.copy()


@dataclass
class TubeOverBase(Domain):
    """Tube U + iR^m: membership constrains real parts only.

    Coordinates interleave as (x1, y1, x2, y2, ...).  The imaginary extent
    is unbounded; `im_extent` only bounds the box used for sampling.
    """

    base: Domain
    im_extent: float = 1.0

    def __post_init__(self):
        self.m = self.base.dim
        self.dim = 2 * self.m

    def real_parts(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p[..., 0::2]

    def contains(self, p, tol=_MEMBER_TOL):
        p = self._check_dim(p)
        return self.base.contains(self.real_parts(p), tol)

    def contains_many(self, P, tol=_MEMBER_TOL):
        P = self._check_dim(np.atleast_2d(P))
        return self.base.contains_many(self.real_parts(P), tol)

    def bounding_box(self):
        lo, hi = self.base.bounding_box()
        lo2 = np.empty(self.dim)
        hi2 = np.empty(self.dim)
        lo2[0::2], hi2[0::2] = lo, hi
        lo2[1::2], hi2[1::2] = -self.im_extent, self.im_extent
        return lo2, hi2


@dataclass
class Fibered(Domain):
    """Fibered region: base over t plus a rule assigning each t its fiber.

    `fiber_fn` must return the slice over z/x coordinates for any t in the
    base.  `t_independent` marks product domains, which is what allows
    under-integral differentiation of pushforwards.
    """

    base: Domain
    fiber_fn: Callable[[np.ndarray], Domain]
    t_independent: bool = False

    def __post_init__(self):
        lo, _ = self.base.bounding_box()
        probe = self.fiber(self._probe_point())
        self.fiber_dim = probe.dim
        self.dim = self.base.dim + self.fiber_dim

    def _probe_point(self) -> np.ndarray:
        if isinstance(self.base, HalfspaceConvex):
            return self.base.interior_point
        lo, hi = self.base.bounding_box()
        return 0.5 * (lo + hi)

    def fiber(self, t: np.ndarray) -> Domain:
        t = np.asarray(t, dtype=float)
        if t.shape != (self.base.dim,):
            raise ValueError(f"base point dimension {t.shape} != {self.base.dim}")
        if not self.base.contains(t):
            raise ValueError("base point outside the base domain")
        return self.fiber_fn(t)

    def contains(self, p, tol=_MEMBER_TOL):
        p = self._check_dim(p)
        t, z = p[: self.base.dim], p[self.base.dim :]
        if not self.base.contains(t, tol):
            return False
        return self.fiber_fn(t).contains(z, tol)

    def bounding_box(self):
        blo, bhi = self.base.bounding_box()
        flo, fhi = self.fiber(self._probe_point()).bounding_box()
        return np.concatenate([blo, flo]), np.concatenate([bhi, fhi])


@dataclass
class SampleGrid:
    """Deterministically ordered membership-filtered tensor grid."""

    points: np.ndarray  # (N, d)
    resolution: tuple[int, ...]
    domain: Domain = field(repr=False, default=None)

    def __len__(self) -> int:
        return self.points.shape[0]


def contains(d: Domain, p: Sequence[float]) -> bool:
    return d.contains(np.asarray(p, dtype=float))


def fiber(d: Fibered, t: Sequence[float]) -> Domain:
    if not isinstance(d, Fibered):
        raise TypeError("fiber() requires a Fibered domain")
    return d.fiber(np.asarray(t, dtype=float))


def sample_grid(d: Domain, res: Sequence[int] | int) -> SampleGrid:
    """Tensor grid on the bounding box filtered by membership.

    Enumeration is C-order over the per-axis linspaces, so grids are
    reproducible across runs.  An empty result signals a degenerate slice.
    """
    if np.isscalar(res):
        res = [int(res)] * d.dim
    res = [int(r) for r in res]
    if len(res) != d.dim:
        raise ValueError(f"need {d.dim} resolutions, got {len(res)}")
    if any(r < 2 for r in res):
        raise ValueError("resolution must be >= 2 per axis")
    lo, hi = d.bounding_box()
    axes = [np.linspace(lo[i], hi[i], res[i]) for i in range(d.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    P = np.stack([m.reshape(-1) for m in mesh], axis=-1)
    mask = d.contains_many(P)
    pts = P[mask]
    if pts.shape[0] == 0:
        raise EmptyGridError("no grid points inside the domain (degenerate slice)")
    return SampleGrid(points=pts, resolution=tuple(res), domain=d)
