"""Uniform cubical grids and outer approximations of time-T flow maps.

A :class:`CubicalSet` is a finite set of closed axis-aligned cubes of side
``h`` on the lattice ``origin + h * Z^d``, stored as lex-sorted integer
index rows.  A :class:`MultivaluedMap` assigns to every domain cube an
axis-aligned *box* of cube indices that provably (up to Lipschitz padding)
contains the time-T image of the cube; per-cube image lists are enumerated
from the box on demand.

Reachability machinery (invariant part, forward/backward closures) runs on
dense boolean occupancy masks with summed-area tables for box queries and
difference arrays for box painting, which keeps every operation a few
vectorized passes over the bounding box.
"""

from __future__ import annotations

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage

from .errors import GridTooLarge, ParseError

__all__ = [
    "CubicalSet",
    "MultivaluedMap",
    "build_grid",
    "ball_cover",
    "flow_map_outer",
    "invariant_part",
    "forward_closure",
    "backward_closure",
    "prune_forward",
    "prune_backward",
    "estimate_lipschitz",
    "validate_outer",
]

DEFAULT_CUBE_BUDGET = 10 ** 7


# -- cubical sets ---------------------------------------------------------------

def _lexsort_rows(idx: np.ndarray) -> np.ndarray:
    if len(idx) == 0:
        return idx.reshape(0, idx.shape[1] if idx.ndim == 2 else 0)
    order = np.lexsort(tuple(idx[:, a] for a in range(idx.shape[1] - 1, -1, -1)))
    return idx[order]


class CubicalSet:
    """Finite union of closed grid cubes, canonically sorted and de-duplicated."""

    def __init__(self, dim: int, origin, h: float, indices):
        self.dim = int(dim)
        self.origin = np.asarray(origin, dtype=float).reshape(self.dim)
        self.h = float(h)
        idx = np.asarray(indices, dtype=np.int64).reshape(-1, self.dim)
        idx = np.unique(idx, axis=0) if len(idx) else idx
        self.indices = idx

    # geometry -------------------------------------------------------------

    def same_grid(self, other: "CubicalSet") -> bool:
        return (
            self.dim == other.dim
            and abs(self.h - other.h) < 1e-12 * max(1.0, self.h)
            and np.allclose(self.origin, other.origin, atol=1e-12)
        )

    def _require_same_grid(self, other: "CubicalSet") -> None:
        if not self.same_grid(other):
            raise ParseError("cubical sets live on different grids")

    def __len__(self) -> int:
        return len(self.indices)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, CubicalSet)
            and self.same_grid(other)
            and self.indices.shape == other.indices.shape
            and bool(np.all(self.indices == other.indices))
        )

    def __hash__(self):
        return hash((self.dim, self.h, self.indices.tobytes()))

    @property
    def is_empty(self) -> bool:
        return len(self.indices) == 0

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        """Inclusive integer index bounds (lo, hi)."""
        if self.is_empty:
            z = np.zeros(self.dim, dtype=np.int64)
            return z, z - 1
        return self.indices.min(axis=0), self.indices.max(axis=0)

    def centers(self) -> np.ndarray:
        return self.origin[None, :] + (self.indices + 0.5) * self.h

    def cube_bounds(self, row: int) -> tuple[np.ndarray, np.ndarray]:
        lo = self.origin + self.indices[row] * self.h
        return lo, lo + self.h

    def spawn(self, indices) -> "CubicalSet":
        return CubicalSet(self.dim, self.origin, self.h, indices)

    # set algebra ----------------------------------------------------------

    def _keys(self, lo: np.ndarray, strides: np.ndarray, idx=None) -> np.ndarray:
        idx = self.indices if idx is None else idx
        return (idx - lo[None, :]) @ strides

    def union(self, other: "CubicalSet") -> "CubicalSet":
        self._require_same_grid(other)
        if self.is_empty:
            return other
        if other.is_empty:
            return self
        return self.spawn(np.vstack([self.indices, other.indices]))

    def intersection(self, other: "CubicalSet") -> "CubicalSet":
        self._require_same_grid(other)
        if self.is_empty or other.is_empty:
            return self.spawn(np.zeros((0, self.dim), dtype=np.int64))
        mask = self.member_mask(other.indices)
        return self.spawn(other.indices[mask])

    def difference(self, other: "CubicalSet") -> "CubicalSet":
        self._require_same_grid(other)
        if self.is_empty or other.is_empty:
            return self
        mask = other.member_mask(self.indices)
        return self.spawn(self.indices[~mask])

    def member_mask(self, idx: np.ndarray) -> np.ndarray:
        """Boolean membership of arbitrary index rows in this set."""
        idx = np.asarray(idx, dtype=np.int64).reshape(-1, self.dim)
        if self.is_empty or len(idx) == 0:
            return np.zeros(len(idx), dtype=bool)
        lo, hi = self.bbox()
        extent = hi - lo + 1
        strides = np.ones(self.dim, dtype=np.int64)
        for a in range(self.dim - 2, -1, -1):
            strides[a] = strides[a + 1] * extent[a + 1]
        inside = np.all((idx >= lo) & (idx <= hi), axis=1)
        out = np.zeros(len(idx), dtype=bool)
        if np.any(inside):
            own = np.sort(self._keys(lo, strides))
            keys = self._keys(lo, strides, idx[inside])
            pos = np.searchsorted(own, keys)
            pos = np.minimum(pos, len(own) - 1)
            out[inside] = own[pos] == keys
        return out

    def issubset(self, other: "CubicalSet") -> bool:
        if self.is_empty:
            return True
        return bool(np.all(other.member_mask(self.indices)))

    # mask machinery ---------------------------------------------------------

    def to_mask(self, lo: np.ndarray, extent: np.ndarray) -> np.ndarray:
        mask = np.zeros(tuple(int(e) for e in extent), dtype=bool)
        if not self.is_empty:
            rel = self.indices - lo[None, :]
            keep = np.all((rel >= 0) & (rel < extent[None, :]), axis=1)
            rel = rel[keep]
            mask[tuple(rel[:, a] for a in range(self.dim))] = True
        return mask

    @staticmethod
    def from_mask(mask: np.ndarray, lo: np.ndarray, origin, h) -> "CubicalSet":
        where = np.argwhere(mask)
        return CubicalSet(mask.ndim, origin, h, where + np.asarray(lo)[None, :])

    # morphology ---------------------------------------------------------------

    def dilate(self, layers: int = 1) -> "CubicalSet":
        """All cubes within Chebyshev distance ``layers`` (vertex adjacency)."""
        if self.is_empty or layers <= 0:
            return self
        lo, hi = self.bbox()
        pad = layers
        ext = hi - lo + 1 + 2 * pad
        mask = self.to_mask(lo - pad, ext)
        grown = ndimage.binary_dilation(
            mask, structure=np.ones((3,) * self.dim, dtype=bool), iterations=layers
        )
        return CubicalSet.from_mask(grown, lo - pad, self.origin, self.h)

    def boundary_collar(self) -> "CubicalSet":
        """Cubes of the set touching its complement (one-cube-thick rim)."""
        if self.is_empty:
            return self
        lo, hi = self.bbox()
        ext = hi - lo + 1 + 2
        mask = self.to_mask(lo - 1, ext)
        interior = ndimage.binary_erosion(
            mask, structure=np.ones((3,) * self.dim, dtype=bool)
        )
        return CubicalSet.from_mask(mask & ~interior, lo - 1, self.origin, self.h)

    def chebyshev_margin(self, other: "CubicalSet") -> int:
        """Min Chebyshev cube distance from this set to ``other`` (big if disjointly far)."""
        if self.is_empty or other.is_empty:
            lo, hi = self.bbox()
            return int(np.max(hi - lo + 1)) if not self.is_empty else 0
        lo1, hi1 = self.bbox()
        lo2, hi2 = other.bbox()
        lo = np.minimum(lo1, lo2)
        hi = np.maximum(hi1, hi2)
        ext = hi - lo + 1
        target = other.to_mask(lo, ext)
        dist = ndimage.distance_transform_cdt(~target, metric="chessboard")
        mine = self.to_mask(lo, ext)
        return int(dist[mine].min())

    # serialization -------------------------------------------------------------
    #
    # Record format (little endian):
    #   magic "SWFC1", uint8 dim, float64 h, dim*float64 origin,
    #   dim*int64 bbox_lo, dim*int64 extents, int64 count,
    #   count*int64 first-difference of row-major flat keys.

    def to_bytes(self) -> bytes:
        lo, hi = self.bbox()
        extent = np.maximum(hi - lo + 1, 1)
        strides = np.ones(self.dim, dtype=np.int64)
        for a in range(self.dim - 2, -1, -1):
            strides[a] = strides[a + 1] * extent[a + 1]
        keys = np.sort(self._keys(lo, strides)) if not self.is_empty else np.zeros(0, np.int64)
        deltas = np.diff(keys, prepend=0)
        buf = io.BytesIO()
        buf.write(b"SWFC1")
        buf.write(struct.pack("<B d", self.dim, self.h))
        buf.write(self.origin.astype("<f8").tobytes())
        buf.write(lo.astype("<i8").tobytes())
        buf.write(extent.astype("<i8").tobytes())
        buf.write(struct.pack("<q", len(keys)))
        buf.write(deltas.astype("<i8").tobytes())
        return buf.getvalue()

    @staticmethod
    def from_bytes(data: bytes) -> "CubicalSet":
        buf = io.BytesIO(data)
        if buf.read(5) != b"SWFC1":
            raise ParseError("bad cubical record magic")
        dim, h = struct.unpack("<B d", buf.read(9))
        origin = np.frombuffer(buf.read(8 * dim), dtype="<f8")
        lo = np.frombuffer(buf.read(8 * dim), dtype="<i8").astype(np.int64)
        extent = np.frombuffer(buf.read(8 * dim), dtype="<i8").astype(np.int64)
        (count,) = struct.unpack("<q", buf.read(8))
        keys = np.cumsum(np.frombuffer(buf.read(8 * count), dtype="<i8"))
        idx = np.zeros((count, dim), dtype=np.int64)
        rem = keys.astype(np.int64)
        strides = np.ones(dim, dtype=np.int64)
        for a in range(dim - 2, -1, -1):
            strides[a] = strides[a + 1] * extent[a + 1]
        for a in range(dim):
            idx[:, a] = rem // strides[a]
            rem = rem % strides[a]
        return CubicalSet(dim, origin, h, idx + lo[None, :])


def build_grid(box_lo, box_hi, h: float, budget: int = DEFAULT_CUBE_BUDGET) -> CubicalSet:
    """Grid of cubes covering the box exactly, padded outward on the last row."""
    box_lo = np.asarray(box_lo, dtype=float)
    box_hi = np.asarray(box_hi, dtype=float)
    if h <= 0 or np.any(box_hi <= box_lo):
        raise ParseError("need h > 0 and a nondegenerate box")
    counts = np.maximum(np.ceil((box_hi - box_lo) / h - 1e-12).astype(np.int64), 1)
    total = int(np.prod(counts.astype(object)))
    if total > budget:
        raise GridTooLarge(f"grid of {total} cubes exceeds budget {budget}")
    dim = len(box_lo)
    ranges = [np.arange(c, dtype=np.int64) for c in counts]
    mesh = np.meshgrid(*ranges, indexing="ij")
    idx = np.stack([m.ravel() for m in mesh], axis=1)
    return CubicalSet(dim, box_lo, h, idx)


def ball_cover(center, radius: float, h: float, budget: int = DEFAULT_CUBE_BUDGET) -> CubicalSet:
    """Cubes intersecting the closed ball; the center sits at a cube center."""
    center = np.asarray(center, dtype=float)
    dim = len(center)
    n = int(np.ceil(radius / h)) + 1
    per_axis = 2 * n + 1
    if per_axis ** dim > budget:
        raise GridTooLarge(f"ball cover of {per_axis ** dim} cubes exceeds budget {budget}")
    origin = center - (n + 0.5) * h
    ranges = [np.arange(per_axis, dtype=np.int64)] * dim
    mesh = np.meshgrid(*ranges, indexing="ij")
    idx = np.stack([m.ravel() for m in mesh], axis=1)
    cube_lo = origin[None, :] + idx * h
    nearest = np.clip(center[None, :], cube_lo, cube_lo + h)
    keep = np.linalg.norm(nearest - center[None, :], axis=1) <= radius
    return CubicalSet(dim, origin, h, idx[keep])


# -- multivalued maps --------------------------------------------------------------

@dataclass
class MultivaluedMap:
    """Outer approximation of the time-T flow map as per-cube index boxes.

    ``lo[i]``/``hi[i]`` bound (inclusively) the cube indices that may meet
    the true image of domain cube i; boxes are not clipped to the domain.
    """

    domain: CubicalSet
    lo: np.ndarray
    hi: np.ndarray
    T: float
    bloat: float

    def __post_init__(self):
        n, d = self.domain.indices.shape if len(self.domain) else (0, self.domain.dim)
        self.lo = np.asarray(self.lo, dtype=np.int64).reshape(n, d)
        self.hi = np.asarray(self.hi, dtype=np.int64).reshape(n, d)
        if np.any(self.hi < self.lo):
            raise ParseError("multivalued map has an empty image box")

    def row_of(self, subset: CubicalSet) -> np.ndarray:
        """Positions of subset cubes inside the domain ordering."""
        self.domain._require_same_grid(subset)
        if subset.is_empty:
            return np.zeros(0, dtype=np.int64)
        if not subset.issubset(self.domain):
            raise ParseError("subset is not contained in the map domain")
        dom = self.domain.indices
        sub = subset.indices
        # lexicographic row search
        pos = _rows_searchsorted(dom, sub)
        return pos

    def images(self, row: int) -> np.ndarray:
        """Sorted cube indices of the image box of domain row ``row``."""
        lo, hi = self.lo[row], self.hi[row]
        ranges = [np.arange(a, b + 1, dtype=np.int64) for a, b in zip(lo, hi)]
        mesh = np.meshgrid(*ranges, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def image_set(self, subset: CubicalSet) -> CubicalSet:
        """Union of image boxes over a subset of the domain (enumerated)."""
        rows = self.row_of(subset)
        if len(rows) == 0:
            return self.domain.spawn(np.zeros((0, self.domain.dim), dtype=np.int64))
        pieces = [self.images(int(r)) for r in rows]
        return self.domain.spawn(np.vstack(pieces))

    def to_bytes(self) -> bytes:
        dom = self.domain.to_bytes()
        rel_lo = (self.lo - self.domain.indices).astype("<i4")
        rel_hi = (self.hi - self.domain.indices).astype("<i4")
        head = struct.pack("<q d d", len(dom), self.T, self.bloat)
        return b"SWFM1" + head + dom + rel_lo.tobytes() + rel_hi.tobytes()

    @staticmethod
    def from_bytes(data: bytes) -> "MultivaluedMap":
        if data[:5] != b"SWFM1":
            raise ParseError("bad multivalued map record magic")
        dom_len, T, bloat = struct.unpack("<q d d", data[5:29])
        domain = CubicalSet.from_bytes(data[29 : 29 + dom_len])
        n, d = domain.indices.shape if len(domain) else (0, domain.dim)
        body = np.frombuffer(data[29 + dom_len :], dtype="<i4").reshape(2, n, d)
        lo = body[0].astype(np.int64) + domain.indices
        hi = body[1].astype(np.int64) + domain.indices
        return MultivaluedMap(domain, lo, hi, T, bloat)


def _rows_searchsorted(sorted_rows: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Positions of query rows inside lex-sorted rows (must be present)."""
    d = sorted_rows.shape[1]
    lo = np.minimum(sorted_rows.min(axis=0), query.min(axis=0))
    hi = np.maximum(sorted_rows.max(axis=0), query.max(axis=0))
    extent = hi - lo + 1
    strides = np.ones(d, dtype=np.int64)
    for a in range(d - 2, -1, -1):
        strides[a] = strides[a + 1] * extent[a + 1]
    skey = (sorted_rows - lo[None, :]) @ strides
    qkey = (query - lo[None, :]) @ strides
    pos = np.searchsorted(skey, qkey)
    if np.any(pos >= len(skey)) or np.any(skey[np.minimum(pos, len(skey) - 1)] != qkey):
        raise ParseError("query rows missing from domain")
    return pos


# -- flow map construction -----------------------------------------------------------

def _rk4_batch(field_batch, X: np.ndarray, T: float, n_steps: int) -> np.ndarray:
    dt = T / n_steps
    for _ in range(n_steps):
        k1 = field_batch(X)
        k2 = field_batch(X + (0.5 * dt) * k1)
        k3 = field_batch(X + (0.5 * dt) * k2)
        k4 = field_batch(X + dt * k3)
        X = X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return X


def estimate_lipschitz(model, A: CubicalSet, rng: Optional[np.random.Generator] = None,
                       n_samples: int = 128) -> float:
    """Max spectral norm of centrally differenced Jacobians over sampled centers."""
    if A.is_empty:
        return 0.0
    rng = rng or np.random.default_rng(0)
    centers = A.centers()
    take = min(n_samples, len(centers))
    sel = rng.choice(len(centers), size=take, replace=False)
    pts = centers[sel]
    d = A.dim
    L = 0.0
    for x in pts:
        delta = 1e-5 * (1.0 + float(np.linalg.norm(x)))
        J = np.zeros((d, d))
        for a in range(d):
            e = np.zeros(d)
            e[a] = delta
            J[:, a] = (model.field_batch((x + e)[None, :])[0]
                       - model.field_batch((x - e)[None, :])[0]) / (2 * delta)
        L = max(L, float(np.linalg.norm(J, 2)))
    return L


def default_flow_time(model, A: CubicalSet) -> float:
    """h / max-speed scaled by 8 so images move a few cubes."""
    if A.is_empty:
        return 1.0
    speeds = np.linalg.norm(model.field_batch(A.centers()), axis=1)
    vmax = float(speeds.max())
    if vmax <= 0:
        return 1.0
    return 8.0 * A.h / vmax


def flow_map_outer(
    model,
    A: CubicalSet,
    T: Optional[float] = None,
    safety: float = 0.5,
    n_workers: int = 1,
    lipschitz: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
) -> MultivaluedMap:
    """Outer approximation of the time-T flow map on the cubes of A.

    Integrates the shared grid vertices and the centers of every cube with
    a fixed-step RK4 batch and pads the per-cube sample hull by
    ``bloat = h * (exp(L*T) + safety)``; the safety margin also absorbs
    the integrator error, which is kept far below h by the step policy.
    """
    if A.is_empty:
        return MultivaluedMap(A, np.zeros((0, A.dim)), np.zeros((0, A.dim)), T or 0.0, 0.0)
    if T is None:
        T = default_flow_time(model, A)
    if T <= 0:
        raise ParseError("flow time T must be positive")
    L = estimate_lipschitz(model, A, rng) if lipschitz is None else float(lipschitz)
    h, d, origin = A.h, A.dim, A.origin
    idx = A.indices

    # unique grid vertices of all cubes, addressed by flat keys
    offsets = np.stack(np.meshgrid(*([np.array([0, 1])] * d), indexing="ij"),
                       axis=-1).reshape(-1, d)
    lo_b, hi_b = A.bbox()
    vext = hi_b - lo_b + 2
    vstr = np.ones(d, dtype=np.int64)
    for a in range(d - 2, -1, -1):
        vstr[a] = vstr[a + 1] * vext[a + 1]
    base_keys = (idx - lo_b[None, :]) @ vstr
    offset_keys = offsets @ vstr
    unique_keys = np.unique(
        (base_keys[:, None] + offset_keys[None, :]).ravel()
    )
    vidx = np.zeros((len(unique_keys), d), dtype=np.int64)
    rem = unique_keys.copy()
    for a in range(d):
        vidx[:, a] = rem // vstr[a]
        rem = rem % vstr[a]
    vpoints = origin[None, :] + (vidx + lo_b[None, :]) * h
    cpoints = A.centers()

    n_steps = int(max(8, min(512, np.ceil(8.0 * max(L, 1e-9) * T))))
    points = np.vstack([vpoints, cpoints])

    kernel = getattr(model, "rk4_endpoints", None)
    if kernel is not None:
        ends = kernel(points, T, n_steps)
    elif n_workers > 1 and len(points) > 4 * n_workers:
        chunks = np.array_split(points, n_workers * 4)
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            parts = list(pool.map(
                lambda c: _rk4_batch(model.field_batch, c, T, n_steps), chunks
            ))
        ends = np.vstack(parts)
    else:
        ends = _rk4_batch(model.field_batch, points, T, n_steps)
    vends = ends[: len(vpoints)]
    cends = ends[len(vpoints):]

    flo = cends.copy()
    fhi = cends.copy()
    for c in range(len(offset_keys)):
        rows = np.searchsorted(unique_keys, base_keys + offset_keys[c])
        np.minimum(flo, vends[rows], out=flo)
        np.maximum(fhi, vends[rows], out=fhi)
    bloat = h * (float(np.exp(L * T)) + safety)
    flo -= bloat
    fhi += bloat
    box_lo = np.floor((flo - origin[None, :]) / h).astype(np.int64)
    box_hi = np.floor((fhi - origin[None, :]) / h).astype(np.int64)
    return MultivaluedMap(A, box_lo, box_hi, T, bloat)


def validate_outer(
    F: MultivaluedMap,
    model,
    samples_per_cube: int = 32,
    max_cubes: int = 256,
    seed: int = 0,
) -> dict:
    """Statistical soundness check: random in-cube points integrate into the image box."""
    rng = np.random.default_rng(seed)
    A = F.domain
    if A.is_empty:
        return {"checked": 0, "violations": 0}
    rows = rng.choice(len(A), size=min(max_cubes, len(A)), replace=False)
    violations = 0
    for r in rows:
        lo = A.origin + A.indices[r] * A.h
        pts = lo[None, :] + rng.random((samples_per_cube, A.dim)) * A.h
        ends = _rk4_batch(model.field_batch, pts, F.T, 64)
        cell = np.floor((ends - A.origin[None, :]) / A.h).astype(np.int64)
        ok = np.all((cell >= F.lo[r][None, :]) & (cell <= F.hi[r][None, :]), axis=1)
        violations += int(np.sum(~ok))
    return {"checked": int(len(rows) * samples_per_cube), "violations": int(violations)}


# -- reachability ------------------------------------------------------------------

class _BoxQuery:
    """Dense workspace over the domain bbox for SAT queries and box painting."""

    def __init__(self, F: MultivaluedMap):
        self.F = F
        A = F.domain
        self.lo, self.hi = A.bbox()
        self.extent = (self.hi - self.lo + 1).astype(np.int64)
        self.shape = tuple(int(e) for e in self.extent)
        self.d = A.dim
        self.pos = tuple(A.indices[:, a] - self.lo[a] for a in range(self.d))
        # image boxes clipped to the bbox; remember whether anything pokes out
        self.clip_lo = np.clip(F.lo - self.lo[None, :], 0, self.extent[None, :] - 1)
        self.clip_hi = np.clip(F.hi - self.lo[None, :], 0, self.extent[None, :] - 1)
        self.box_outside = np.any(
            (F.hi < self.lo[None, :]) | (F.lo > self.hi[None, :]), axis=1
        )
        self.full_volume = np.prod((F.hi - F.lo + 1).astype(float), axis=1)

    def alive_from(self, subset: CubicalSet) -> np.ndarray:
        alive = np.zeros(len(self.F.domain), dtype=bool)
        alive[self.F.row_of(subset)] = True
        return alive

    def set_of(self, alive: np.ndarray) -> CubicalSet:
        return self.F.domain.spawn(self.F.domain.indices[alive])

    def _sat(self, weights: np.ndarray) -> np.ndarray:
        acc = np.zeros(self.shape, dtype=np.int64)
        acc[self.pos] = weights
        for a in range(self.d):
            np.cumsum(acc, axis=a, out=acc)
        return np.pad(acc, [(1, 0)] * self.d)

    def counts_in_boxes(self, alive_mask: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """Number of alive cubes inside each queried row's (clipped) image box."""
        sat = self._sat(alive_mask.astype(np.int64))
        lo = self.clip_lo[rows]
        hi = self.clip_hi[rows]
        out = np.zeros(len(rows), dtype=np.int64)
        for corner in range(1 << self.d):
            sign = 1
            coords = []
            for a in range(self.d):
                if corner & (1 << a):
                    coords.append(lo[:, a])
                    sign = -sign
                else:
                    coords.append(hi[:, a] + 1)
            out += sign * sat[tuple(coords)]
        out[self.box_outside[rows]] = 0
        return out

    def paint_boxes(self, rows: np.ndarray) -> np.ndarray:
        """Boolean mask of bbox cells covered by the image boxes of ``rows``."""
        shape1 = tuple(int(e) + 1 for e in self.extent)
        size = int(np.prod(np.asarray(shape1, dtype=object)))
        strides = np.ones(self.d, dtype=np.int64)
        for a in range(self.d - 2, -1, -1):
            strides[a] = strides[a + 1] * shape1[a + 1]
        flat = np.zeros(size, dtype=np.int64)
        sel = rows[~self.box_outside[rows]]
        if len(sel):
            lo = self.clip_lo[sel]
            hi = self.clip_hi[sel]
            for corner in range(1 << self.d):
                sign = 1
                keys = np.zeros(len(sel), dtype=np.int64)
                for a in range(self.d):
                    if corner & (1 << a):
                        keys += (hi[:, a] + 1) * strides[a]
                        sign = -sign
                    else:
                        keys += lo[:, a] * strides[a]
                counts = np.bincount(keys, minlength=size)
                if sign > 0:
                    flat += counts
                else:
                    flat -= counts
        diff = flat.reshape(shape1)
        for a in range(self.d):
            np.cumsum(diff, axis=a, out=diff)
        core = diff[tuple(slice(0, int(e)) for e in self.extent)]
        return core > 0

    def covered(self, painter_rows: np.ndarray) -> np.ndarray:
        """Alive-style flags of domain cubes covered by the painted boxes."""
        mask = self.paint_boxes(painter_rows)
        return mask[self.pos]


def prune_forward(q: _BoxQuery, alive: np.ndarray) -> np.ndarray:
    """Keep cubes whose image box meets the alive set."""
    rows = np.nonzero(alive)[0]
    counts = q.counts_in_boxes(alive, rows)
    out = np.zeros_like(alive)
    out[rows[counts > 0]] = True
    return out

def prune_backward(q: _BoxQuery, alive: np.ndarray) -> np.ndarray:
    """Keep cubes covered by the image box of some alive cube."""
    covered = q.covered(np.nonzero(alive)[0])
    return alive & covered


def invariant_part(F: MultivaluedMap, A: CubicalSet, max_iter: int = None) -> CubicalSet:
    """Largest subset of A closed under forward and transpose reachability.

    Iterated two-sided pruning to a fixpoint; the result contains every
    cube meeting the true invariant set of the underlying flow.
    """
    q = _BoxQuery(F)
    alive = q.alive_from(A.intersection(F.domain))
    limit = max_iter or (8 * int(np.max(q.extent)) + 64)
    for _ in range(limit):
        n0 = int(alive.sum())
        if n0 == 0:
            break
        alive = prune_forward(q, alive)
        alive = prune_backward(q, alive)
        if int(alive.sum()) == n0:
            break
    return q.set_of(alive)


def forward_closure(F: MultivaluedMap, B: CubicalSet, A: CubicalSet) -> CubicalSet:
    """Cubes of A reachable from B by forward chains staying in A (B included)."""
    q = _BoxQuery(F)
    a_alive = q.alive_from(A.intersection(F.domain))
    alive = q.alive_from(B.intersection(F.domain)) & a_alive
    frontier = np.nonzero(alive)[0]
    while len(frontier):
        covered = q.covered(frontier)
        new = covered & a_alive & ~alive
        alive |= new
        frontier = np.nonzero(new)[0]
    return q.set_of(alive)


def backward_closure(F: MultivaluedMap, X: CubicalSet, A: CubicalSet) -> CubicalSet:
    """Cubes of A from which a forward chain inside A reaches X (X included)."""
    q = _BoxQuery(F)
    a_alive = q.alive_from(A.intersection(F.domain))
    alive = q.alive_from(X.intersection(F.domain)) & a_alive
    candidates = a_alive & ~alive
    while True:
        rows = np.nonzero(candidates)[0]
        if len(rows) == 0:
            break
        counts = q.counts_in_boxes(alive, rows)
        new = rows[counts > 0]
        if len(new) == 0:
            break
        alive[new] = True
        candidates[new] = False
    return q.set_of(alive)
