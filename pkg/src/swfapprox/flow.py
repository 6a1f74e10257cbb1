"""Truncated gradient flow of the model functional on a spectral window.

The model functional on window coordinates x is

    csd(x) = 1/2 <x, l x> + P(w x),      P(y) = 1/3 sum Gamma_ijk y_i y_j y_k,

with l the diagonal linear part, w the smoothed projection weights and
Gamma a symmetric circle-equivariant coupling tensor.  The vector field is

    field(x) = -u(|x|) * (l x + w c(w x)),        c = grad P,

which is exactly -u * grad(csd); u is a radial C^2 cutoff, identically 1
on the ball of radius 3R and 0 beyond 4R, so the field is compactly
supported and the flow is globally defined.  Applying the weights on both
sides of c keeps the gradient structure exact for partial weights.

Model files are JSON documents referencing a spectrum file; coupling
tensors are stored as sparse canonical triples over the *global* real
coordinates of the spectrum and restricted to a window's coordinates when
a model is built, so one tensor serves every window of its spectrum.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import spectrum as _spectrum
from .errors import ParseError, StepUnderflow
from .spectrum import (
    BumpSpec,
    EigenMode,
    Sector,
    Spectrum,
    SpectralWindow,
    default_bump,
    load_spectrum,
    truncate,
    weight_of,
)

__all__ = [
    "CouplingTensor",
    "CutoffSpec",
    "TruncatedModel",
    "Trajectory",
    "ConfinementReport",
    "build_model",
    "linear_model",
    "load_model",
    "save_model",
    "csd_eval",
    "vector_field",
    "integrate",
    "confinement_check",
    "random_equivariant_tensor",
    "equivariant_monomials",
]


class CouplingTensor:
    """Fully symmetric sparse trilinear form over real coordinates.

    Stored as canonical triples i <= j <= k with one value per triple.
    ``c(x)_i = sum_jk Gamma_ijk x_j x_k`` and ``P(x) = (1/3) sum Gamma x x x``
    over the *full* symmetric index set, so c = grad P exactly.
    """

    def __init__(self, dim: int, triples: Iterable[tuple[int, int, int, float]] = ()):
        self.dim = int(dim)
        acc: dict[tuple[int, int, int], float] = {}
        for i, j, k, v in triples:
            key = tuple(sorted((int(i), int(j), int(k))))
            if key[0] < 0 or key[2] >= self.dim:
                raise ParseError(f"tensor index {key} out of range for dim {self.dim}")
            acc[key] = acc.get(key, 0.0) + float(v)
        items = sorted((k, v) for k, v in acc.items() if v != 0.0)
        self.idx = np.array([k for k, _ in items], dtype=np.int64).reshape(-1, 3)
        self.vals = np.array([v for _, v in items], dtype=float)
        self._full = None

    def __len__(self):
        return len(self.vals)

    @property
    def is_zero(self) -> bool:
        return len(self.vals) == 0

    def canonical_triples(self) -> list[tuple[int, int, int, float]]:
        return [(int(i), int(j), int(k), float(v)) for (i, j, k), v in zip(self.idx, self.vals)]

    def full_entries(self) -> tuple[np.ndarray, np.ndarray]:
        """All distinct permutations of the canonical triples, same value each."""
        if self._full is None:
            rows = []
            vals = []
            for (i, j, k), v in zip(self.idx, self.vals):
                for perm in set(itertools.permutations((int(i), int(j), int(k)))):
                    rows.append(perm)
                    vals.append(v)
            order = np.lexsort(
                tuple(np.array([r[a] for r in rows]) for a in (2, 1, 0))
            ) if rows else np.array([], dtype=np.int64)
            idx = np.array(rows, dtype=np.int64).reshape(-1, 3)[order]
            self._full = (idx, np.array(vals, dtype=float)[order])
        return self._full

    @classmethod
    def from_polynomial(cls, dim: int, coeffs: dict[tuple[int, ...], float]) -> "CouplingTensor":
        """Tensor whose cubic P equals ``sum coeffs[mono] * x^mono``.

        Monomial keys are sorted index triples (a, b, c), a <= b <= c.
        """
        triples = []
        for mono, q in coeffs.items():
            a, b, c = sorted(mono)
            if a == b == c:
                triples.append((a, b, c, 3.0 * q))
            elif a == b or b == c:
                triples.append((a, b, c, q))
            else:
                triples.append((a, b, c, q / 2.0))
        return cls(dim, triples)

    def polynomial_coeffs(self) -> dict[tuple[int, int, int], float]:
        """Inverse of :meth:`from_polynomial`."""
        out = {}
        for (a, b, c), g in zip(self.idx, self.vals):
            a, b, c = int(a), int(b), int(c)
            if a == b == c:
                out[(a, b, c)] = g / 3.0
            elif a == b or b == c:
                out[(a, b, c)] = g
            else:
                out[(a, b, c)] = 2.0 * g
        return out

    def c_batch(self, X: np.ndarray) -> np.ndarray:
        """Quadratic map c on points stacked as rows of X (n, dim)."""
        X = np.atleast_2d(X)
        out = np.zeros_like(X)
        if self.is_zero:
            return out
        idx, vals = self.full_entries()
        contrib = X[:, idx[:, 1]] * X[:, idx[:, 2]] * vals[None, :]
        for i in range(self.dim):
            sel = idx[:, 0] == i
            if np.any(sel):
                out[:, i] = contrib[:, sel].sum(axis=1)
        return out

    def cubic_batch(self, X: np.ndarray) -> np.ndarray:
        """P(x) on points stacked as rows."""
        X = np.atleast_2d(X)
        if self.is_zero:
            return np.zeros(X.shape[0])
        idx, vals = self.full_entries()
        terms = X[:, idx[:, 0]] * X[:, idx[:, 1]] * X[:, idx[:, 2]]
        return terms @ vals / 3.0

    def restrict(self, coords: np.ndarray) -> "CouplingTensor":
        """Sub-tensor on a coordinate subset, reindexed to 0..len(coords)-1."""
        coords = np.asarray(coords, dtype=np.int64)
        pos = {int(c): i for i, c in enumerate(coords)}
        triples = []
        for (i, j, k), v in zip(self.idx, self.vals):
            if int(i) in pos and int(j) in pos and int(k) in pos:
                triples.append((pos[int(i)], pos[int(j)], pos[int(k)], v))
        return CouplingTensor(len(coords), triples)

    def frobenius_alpha(self) -> float:
        """Upper bound alpha with |c(x)| <= alpha |x|^2 (Cauchy-Schwarz rows)."""
        if self.is_zero:
            return 0.0
        _, vals = self.full_entries()
        return float(np.sqrt(np.sum(vals ** 2)))


def equivariant_monomials(window: SpectralWindow) -> list[dict[tuple[int, int, int], float]]:
    """Basis of circle-invariant cubic monomial packets on window coordinates.

    Invariant cubics are spanned by form-only monomials f_a f_b f_c and by
    f_a * Re(z_i conj(z_j)), f_a * Im(z_i conj(z_j)) packets; three spinor
    factors can never have total charge zero.
    """
    sectors = window.coordinate_sectors()
    forms = [i for i, s in enumerate(sectors) if s == 0]
    pairs = window.spinor_pairs()
    basis = []
    for a, b, c in itertools.combinations_with_replacement(forms, 3):
        basis.append({(a, b, c): 1.0})
    for f in forms:
        for (u1, v1), (u2, v2) in itertools.combinations_with_replacement(pairs, 2):
            if (u1, v1) == (u2, v2):
                basis.append({tuple(sorted((f, u1, u1))): 1.0, tuple(sorted((f, v1, v1))): 1.0})
            else:
                basis.append({tuple(sorted((f, u1, u2))): 1.0, tuple(sorted((f, v1, v2))): 1.0})
                basis.append({tuple(sorted((f, v1, u2))): 1.0, tuple(sorted((f, u1, v2))): -1.0})
    return basis


def random_equivariant_tensor(
    window: SpectralWindow, rng: np.random.Generator, scale: float = 0.1
) -> CouplingTensor:
    """Random circle-equivariant coupling tensor on a window's coordinates."""
    coeffs: dict[tuple[int, int, int], float] = {}
    for packet in equivariant_monomials(window):
        w = float(rng.normal(0.0, scale))
        for mono, sign in packet.items():
            coeffs[mono] = coeffs.get(mono, 0.0) + w * sign
    return CouplingTensor.from_polynomial(window.total_dim, coeffs)


@dataclass(frozen=True)
class CutoffSpec:
    """Radial C^2 cutoff: 1 on [0, one_factor*R], 0 beyond zero_factor*R.

    The transition uses the quintic smoothstep, so u is C^2.
    """

    one_factor: float = 3.0
    zero_factor: float = 4.0

    def __post_init__(self):
        if not 0 < self.one_factor < self.zero_factor:
            raise ParseError("cutoff needs 0 < one_factor < zero_factor")

    def value(self, r: np.ndarray, R: float) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        a, b = self.one_factor * R, self.zero_factor * R
        s = np.clip((r - a) / (b - a), 0.0, 1.0)
        return 1.0 - s ** 3 * (10.0 + s * (-15.0 + 6.0 * s))


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    tolerance: float

    def end(self) -> np.ndarray:
        return self.states[-1]


class TruncatedModel:
    """Window data, diagonal linear part, weights, coupling and cutoff.

    Immutable after construction; all evaluation methods are pure, so a
    model may be shared freely across parallel workers.
    """

    def __init__(
        self,
        window: SpectralWindow,
        gamma: CouplingTensor,
        R: float,
        cutoff: CutoffSpec = CutoffSpec(),
        weights: Optional[np.ndarray] = None,
        name: str = "model",
    ):
        self.window = window
        self.l_diag = window.coordinate_eigenvalues()
        self.dim = len(self.l_diag)
        if gamma.dim != self.dim:
            raise ParseError(f"tensor dim {gamma.dim} != window dim {self.dim}")
        self.gamma = gamma
        self.R = float(R)
        self.cutoff = cutoff
        self.weights = (
            np.ones(self.dim) if weights is None else np.asarray(weights, dtype=float)
        )
        if self.weights.shape != (self.dim,):
            raise ParseError("weights must have one entry per window coordinate")
        self.name = name
        self.spinor_pairs = window.spinor_pairs()

    # -- evaluation ------------------------------------------------------------

    def csd_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        quad_part = 0.5 * np.sum(self.l_diag[None, :] * X * X, axis=1)
        return quad_part + self.gamma.cubic_batch(X * self.weights[None, :])

    def csd(self, x: np.ndarray) -> float:
        return float(self.csd_batch(np.asarray(x, dtype=float)[None, :])[0])

    def grad_csd_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        W = self.weights[None, :]
        return self.l_diag[None, :] * X + W * self.gamma.c_batch(X * W)

    def field_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        r = np.linalg.norm(X, axis=1)
        u = self.cutoff.value(r, self.R)
        return -u[:, None] * self.grad_csd_batch(X)

    def field(self, x: np.ndarray) -> np.ndarray:
        return self.field_batch(np.asarray(x, dtype=float)[None, :])[0]

    def rk4_endpoints(self, X: np.ndarray, T: float, n_steps: int) -> np.ndarray:
        """Fixed-step RK4 endpoints for a batch of points (compiled kernel)."""
        from ._kernels import rk4_model_batch

        full_idx, full_vals = self.gamma.full_entries()
        return rk4_model_batch(
            np.ascontiguousarray(X, dtype=np.float64),
            float(T),
            int(n_steps),
            self.l_diag,
            self.weights,
            full_idx,
            full_vals,
            self.R,
            self.cutoff.one_factor,
            self.cutoff.zero_factor,
        )

    def rotate(self, X: np.ndarray, theta: float) -> np.ndarray:
        """Circle action: form coordinates fixed, spinor pairs rotated by theta."""
        X = np.atleast_2d(np.asarray(X, dtype=float)).copy()
        c, s = math.cos(theta), math.sin(theta)
        for u, v in self.spinor_pairs:
            xu, xv = X[:, u].copy(), X[:, v].copy()
            X[:, u] = c * xu - s * xv
            X[:, v] = s * xu + c * xv
        return X

    # -- derived quantities ------------------------------------------------------

    def alpha_bound(self) -> float:
        """alpha with |w c(w x)| <= alpha |x|^2 (weights have norm <= 1)."""
        return self.gamma.frobenius_alpha()

    def min_abs_eigenvalue(self) -> float:
        return float(np.min(np.abs(self.l_diag))) if self.dim else math.inf

    def contraction_margin(self) -> float:
        """|lambda_0| - alpha*2R; positive means the origin is the only zero in B(2R)."""
        return self.min_abs_eigenvalue() - self.alpha_bound() * 2.0 * self.R

    def is_hyperbolic_linear_part(self) -> bool:
        return self.dim == 0 or float(np.min(np.abs(self.l_diag))) > 0.0

    def fixed_subspace_model(self) -> "TruncatedModel":
        """Restriction to the circle-fixed (form) coordinates."""
        sectors = self.window.coordinate_sectors()
        keep = np.nonzero(sectors == 0)[0]
        sub_window = _FixedWindow(self.window, keep)
        gamma = self.gamma.restrict(keep)
        return TruncatedModel(
            sub_window, gamma, self.R, self.cutoff, self.weights[keep],
            name=self.name + "-fixed",
        )


class _FixedWindow:
    """Window-shaped view of the form-only coordinate subset of a window."""

    def __init__(self, window: SpectralWindow, keep: np.ndarray):
        self._window = window
        self._keep = keep
        self.lam = window.lam
        self.mu = window.mu
        self.m = window.m
        self.n = 0
        self.total_dim = len(keep)
        self.spectrum = window.spectrum
        self.mode_indices = tuple(
            i for i in window.mode_indices
            if window.spectrum.modes[i].sector is Sector.FORM
        )

    @property
    def sub_zero_real_dim(self):
        return self.m

    def coordinate_eigenvalues(self):
        return self._window.coordinate_eigenvalues()[self._keep]

    def coordinate_sectors(self):
        return self._window.coordinate_sectors()[self._keep]

    def spinor_pairs(self):
        return []


# -- spec-facing functional wrappers ---------------------------------------------

def csd_eval(model: TruncatedModel, x) -> float:
    """Model functional value at x; its exact gradient is l x + w c(w x) in B(3R)."""
    return model.csd(x)


def vector_field(model: TruncatedModel, x) -> np.ndarray:
    """-cutoff(x) * (l x + weighted coupling); compactly supported, equivariant."""
    return model.field(x)


# -- model construction and files -------------------------------------------------

def build_model(
    spec: Spectrum,
    lam: float,
    mu: float,
    gamma_global: CouplingTensor,
    R: float,
    cutoff: CutoffSpec = CutoffSpec(),
    bump: BumpSpec = None,
    name: str = "model",
    apply_weights: bool = True,
) -> TruncatedModel:
    """Build the truncated model for the window (lam, mu] of a spectrum.

    The global tensor is restricted to the window's coordinates.  Weights
    come from the smoothed projection when the window cuts are beyond 1 in
    absolute value, else they are all 1 (sharp projection regime).
    """
    window = truncate(spec, lam, mu)
    coords = window.global_coordinates()
    gamma = gamma_global.restrict(coords)
    if apply_weights and (-lam > 1.0 and mu > 1.0):
        if bump is None:
            bump = default_bump()
        per_coord = []
        for i in window.mode_indices:
            mode = spec.modes[i]
            w = weight_of(mode.value, lam, mu, bump)
            per_coord.extend([w] * mode.real_dim)
        weights = np.array(per_coord, dtype=float)
    else:
        weights = None
    return TruncatedModel(window, gamma, R, cutoff, weights, name=name)


def linear_model(eigenvalues, R: float = 0.7, cutoff: CutoffSpec = CutoffSpec()) -> TruncatedModel:
    """Purely linear model with the given form-mode eigenvalues (test fixture)."""
    eigenvalues = sorted(float(v) for v in eigenvalues)
    counts: dict[float, int] = {}
    for v in eigenvalues:
        counts[v] = counts.get(v, 0) + 1
    modes = tuple(EigenMode(v, c, Sector.FORM) for v, c in sorted(counts.items()))
    spec = Spectrum(modes, name="linear", group_order=1)
    lo = min(eigenvalues) - 1.0
    hi = max(eigenvalues) + 1.0
    window = truncate(spec, min(lo, -1.0), max(hi, 1.0))
    return TruncatedModel(window, CouplingTensor(window.total_dim), R, cutoff, name="linear")


def save_model(path, spec_path: str, lam: float, mu: float, R: float,
               gamma: CouplingTensor, cutoff: CutoffSpec = CutoffSpec(),
               name: str = None) -> None:
    doc = {
        "format": "swfapprox-model-v1",
        "name": name or Path(path).stem,
        "spectrum": spec_path,
        "lambda": lam,
        "mu": mu,
        "R": R,
        "cutoff": {"one_factor": cutoff.one_factor, "zero_factor": cutoff.zero_factor},
        "tensor": gamma.canonical_triples(),
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_model(path, apply_weights: bool = True) -> TruncatedModel:
    """Load a model file; the spectrum path is resolved relative to the file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"model file {path}: {exc}") from exc
    if doc.get("format") != "swfapprox-model-v1":
        raise ParseError(f"model file {path}: unknown format {doc.get('format')!r}")
    try:
        spec = load_spectrum((path.parent / doc["spectrum"]).resolve())
        cut = doc.get("cutoff", {})
        cutoff = CutoffSpec(cut.get("one_factor", 3.0), cut.get("zero_factor", 4.0))
        gamma = CouplingTensor(spec.total_real_dim,
                               [tuple(t) for t in doc.get("tensor", [])])
        return build_model(
            spec, float(doc["lambda"]), float(doc["mu"]), gamma, float(doc["R"]),
            cutoff, name=doc.get("name", path.stem), apply_weights=apply_weights,
        )
    except KeyError as exc:
        raise ParseError(f"model file {path}: missing key {exc}") from exc


# -- integration -------------------------------------------------------------------

# Dormand-Prince RK5(4) tableau.
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)


def integrate(
    model,
    x0,
    T: float,
    tol: float = 1e-8,
    min_step: float = 1e-12,
    max_samples: int = 100000,
) -> Trajectory:
    """Adaptive embedded Runge-Kutta integration of the model flow.

    Local error is controlled at ``tol`` per unit time.  Negative T
    integrates backward.  Raises :class:`StepUnderflow` when the adaptive
    step falls below ``min_step``.
    """
    if tol <= 0:
        raise ParseError("tol must be positive")
    sign = 1.0 if T >= 0 else -1.0
    total = abs(float(T))
    f = (lambda x: model.field_batch(x[None, :])[0]) if sign > 0 else (
        lambda x: -model.field_batch(x[None, :])[0]
    )
    x = np.asarray(x0, dtype=float).copy()
    t = 0.0
    times = [0.0]
    states = [x.copy()]
    h = min(total, 0.1) if total > 0 else 0.0
    k = [None] * 7
    while t < total:
        h = min(h, total - t)
        if h < min_step:
            raise StepUnderflow(f"step {h:g} below minimum {min_step:g} at t={t:g}")
        k[0] = f(x)
        for s in range(1, 7):
            xs = x + h * sum(a * k[m] for m, a in enumerate(_DP_A[s]))
            k[s] = f(xs)
        x5 = x + h * sum(b * k[m] for m, b in enumerate(_DP_B5) if b)
        x4 = x + h * sum(b * k[m] for m, b in enumerate(_DP_B4) if b)
        err = float(np.linalg.norm(x5 - x4))
        allowed = tol * h
        if err <= allowed or h <= min_step * 2:
            t += h
            x = x5
            if len(times) >= max_samples:
                raise StepUnderflow("trajectory sample budget exhausted")
            times.append(sign * t)
            states.append(x.copy())
        # standard PI-free step adaptation with safety factor
        if err > 0:
            h = min(h * min(4.0, max(0.1, 0.9 * (allowed / err) ** 0.2)), total)
        else:
            h = min(h * 4.0, total)
    return Trajectory(np.array(times), np.array(states), tol)


@dataclass
class ConfinementReport:
    """Starts on sphere(2R) whose orbit stayed in ball(2R) over [-T, T]
    without entering ball(R); nonempty means the cutoffs are too small."""

    trapped_starts: list
    samples: int
    T: float

    @property
    def ok(self) -> bool:
        return not self.trapped_starts


def _sphere_starts(dim: int, radius: float, samples: int, rng: np.random.Generator):
    pts = []
    for axis in range(dim):
        for s in (1.0, -1.0):
            e = np.zeros(dim)
            e[axis] = s * radius
            pts.append(e)
    while len(pts) < max(samples, 2 * dim):
        v = rng.normal(size=dim)
        nrm = np.linalg.norm(v)
        if nrm > 1e-12:
            pts.append(v / nrm * radius)
    return pts[: max(samples, 2 * dim)]


def confinement_check(
    model: TruncatedModel, samples: int, T: float, seed: int = 0, tol: float = 1e-8
) -> ConfinementReport:
    """Probe the confinement property on sphere(2R) starts.

    Deterministic axis poles are always included ahead of the random
    directions so low-dimensional boundary equilibria are never missed.
    """
    if samples <= 0:
        raise ParseError("samples must be positive")
    rng = np.random.default_rng(seed)
    R = model.R
    trapped = []
    for start in _sphere_starts(model.dim, 2.0 * R, samples, rng):
        ok_trapped = True
        for direction in (T, -T):
            traj = integrate(model, start, direction, tol=tol)
            radii = np.linalg.norm(traj.states, axis=1)
            if np.any(radii > 2.0 * R + 1e-9) or np.any(radii < R):
                ok_trapped = False
                break
        if ok_trapped:
            trapped.append(np.asarray(start))
    return ConfinementReport(trapped, samples, T)
