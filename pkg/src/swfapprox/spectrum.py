"""Eigenvalue data of the first-order operator on the slice and its spectral windows.

A :class:`Spectrum` is a plain list of eigenmodes: each mode has a real
eigenvalue, a multiplicity and a sector tag.  ``form`` modes contribute
``multiplicity`` real coordinates fixed by the circle action; ``spinor``
modes contribute ``multiplicity`` complex coordinates rotated by it.
Spectra are data shipped as files (see :func:`load_spectrum`), never
computed from a metric here.

A window ``(lam, mu]`` selects modes, producing a :class:`SpectralWindow`
whose sub-zero part has ``m`` real form dimensions and ``n`` complex
spinor dimensions; zero eigenvalues count into the sub-zero part.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import quad

from .errors import EigenvalueOnBoundary, InvalidBump, ParseError

__all__ = [
    "Sector",
    "EigenMode",
    "Spectrum",
    "SpectralWindow",
    "BumpSpec",
    "default_bump",
    "truncate",
    "projection_weights",
    "weight_of",
    "reducible_morse_index",
    "load_spectrum",
    "parse_spectrum",
    "format_spectrum",
]


class Sector(str, enum.Enum):
    FORM = "form"
    SPINOR = "spinor"


@dataclass(frozen=True, order=False)
class EigenMode:
    value: float
    multiplicity: int
    sector: Sector

    def __post_init__(self):
        if self.multiplicity < 1:
            raise ParseError(f"multiplicity must be >= 1, got {self.multiplicity}")
        object.__setattr__(self, "sector", Sector(self.sector))

    @property
    def real_dim(self) -> int:
        """Real coordinates contributed: spinor modes count double."""
        return self.multiplicity * (2 if self.sector is Sector.SPINOR else 1)


@dataclass(frozen=True)
class Spectrum:
    """Ascending eigenmodes plus file-level metadata.

    ``group_order`` is the order N of the first integral homology of the
    underlying three-manifold; it bounds denominators downstream.
    """

    modes: tuple[EigenMode, ...]
    name: str = "spectrum"
    group_order: int = 1
    scalar_curvature_gap: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        if self.group_order < 1:
            raise ParseError("group order N must be a positive integer")
        prev = None
        for mode in self.modes:
            if mode.sector is Sector.FORM and mode.value == 0.0:
                raise ParseError("form sector cannot contain a zero eigenvalue")
            if prev is not None:
                if mode.value < prev.value:
                    raise ParseError("mode values must be ascending")
                if mode.value == prev.value:
                    if prev.sector == mode.sector:
                        raise ParseError(
                            "equal values in one sector must be merged into multiplicity"
                        )
                    if prev.sector is Sector.SPINOR:
                        raise ParseError("ties must list the form mode first")
            prev = mode

    def values(self) -> np.ndarray:
        return np.array([m.value for m in self.modes], dtype=float)

    def min_abs_eigenvalue(self) -> float:
        vals = self.values()
        return float(np.min(np.abs(vals))) if len(vals) else math.inf

    def spectral_gap(self) -> float:
        """Smallest gap between distinct consecutive eigenvalues."""
        vals = np.unique(self.values())
        if len(vals) < 2:
            return 1.0
        return float(np.min(np.diff(vals)))

    def coordinate_layout(self) -> list[tuple[int, int]]:
        """Global real-coordinate span (start, stop) of each mode, in mode order."""
        spans = []
        pos = 0
        for mode in self.modes:
            spans.append((pos, pos + mode.real_dim))
            pos += mode.real_dim
        return spans

    @property
    def total_real_dim(self) -> int:
        return sum(m.real_dim for m in self.modes)


@dataclass(frozen=True)
class SpectralWindow:
    """Modes with eigenvalue in ``(lam, mu]`` and the sub-zero dimension counts."""

    lam: float
    mu: float
    mode_indices: tuple[int, ...]
    m: int
    n: int
    total_dim: int
    spectrum: Spectrum = field(repr=False, compare=False, default=None)

    @property
    def sub_zero_real_dim(self) -> int:
        """Real dimension of the sub-zero part: m + 2n."""
        return self.m + 2 * self.n

    def modes(self) -> list[EigenMode]:
        return [self.spectrum.modes[i] for i in self.mode_indices]

    def coordinate_eigenvalues(self) -> np.ndarray:
        """Eigenvalue of each real coordinate of the window, in layout order."""
        out = []
        for i in self.mode_indices:
            mode = self.spectrum.modes[i]
            out.extend([mode.value] * mode.real_dim)
        return np.array(out, dtype=float)

    def coordinate_sectors(self) -> np.ndarray:
        """1 where the real coordinate belongs to a spinor mode, else 0."""
        out = []
        for i in self.mode_indices:
            mode = self.spectrum.modes[i]
            out.extend([1 if mode.sector is Sector.SPINOR else 0] * mode.real_dim)
        return np.array(out, dtype=np.int8)

    def global_coordinates(self) -> np.ndarray:
        """Global real-coordinate indices of the window, in layout order."""
        spans = self.spectrum.coordinate_layout()
        out = []
        for i in self.mode_indices:
            out.extend(range(*spans[i]))
        return np.array(out, dtype=np.int64)

    def spinor_pairs(self) -> list[tuple[int, int]]:
        """(u, v) window-coordinate index pairs of each complex spinor coordinate."""
        pairs = []
        pos = 0
        for i in self.mode_indices:
            mode = self.spectrum.modes[i]
            if mode.sector is Sector.SPINOR:
                for _ in range(mode.multiplicity):
                    pairs.append((pos, pos + 1))
                    pos += 2
            else:
                pos += mode.real_dim
        return pairs


def _check_cut(spectrum: Spectrum, cut: float, eps_cut: Optional[float]) -> None:
    tol = eps_cut if eps_cut is not None else 1e-6 * spectrum.spectral_gap()
    vals = spectrum.values()
    if len(vals) and float(np.min(np.abs(vals - cut))) <= tol:
        raise EigenvalueOnBoundary(
            f"cut {cut} lies on an eigenvalue of {spectrum.name}; "
            f"nudge the cut by more than {tol:g}"
        )


def truncate(spectrum: Spectrum, lam: float, mu: float, eps_cut: float = None) -> SpectralWindow:
    """Window of modes with eigenvalue in ``(lam, mu]``.

    Requires ``lam < 0 < mu`` with neither cut on an eigenvalue
    (:class:`EigenvalueOnBoundary` otherwise).  The sub-zero counts m, n
    use the interval ``(lam, 0]``, zero eigenvalues included.
    """
    if not lam < 0.0 < mu:
        raise ParseError(f"need lam < 0 < mu, got lam={lam}, mu={mu}")
    _check_cut(spectrum, lam, eps_cut)
    _check_cut(spectrum, mu, eps_cut)
    indices, m, n, total = [], 0, 0, 0
    for i, mode in enumerate(spectrum.modes):
        if lam < mode.value <= mu:
            indices.append(i)
            total += mode.real_dim
            if mode.value <= 0.0:
                if mode.sector is Sector.FORM:
                    m += mode.multiplicity
                else:
                    n += mode.multiplicity
    return SpectralWindow(lam, mu, tuple(indices), m, n, total, spectrum)


def reducible_morse_index(window: SpectralWindow) -> tuple[int, int]:
    """(m, n) counts of the sub-zero part; the real Morse index is m + 2n."""
    return window.m, window.n


# -- smoothed projection weights ------------------------------------------------

def _poly_bump(t):
    t = np.asarray(t, dtype=float)
    out = 30.0 * t * t * (1.0 - t) * (1.0 - t)
    return np.where((t > 0.0) & (t < 1.0), out, 0.0)


def _poly_bump_cdf(t: float) -> float:
    if t <= 0.0:
        return 0.0
    if t >= 1.0:
        return 1.0
    return ((6.0 * t - 15.0) * t + 10.0) * t ** 3


@dataclass(frozen=True)
class BumpSpec:
    """Smooth bump on (0, 1) with unit integral.

    ``cdf`` is an optional exact antiderivative used for weight evaluation;
    without it weights fall back to adaptive quadrature of ``fn``.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    cdf: Optional[Callable[[float], float]] = None
    name: str = "bump"

    def validate(self, tol: float = 1e-9) -> None:
        total, _ = quad(lambda t: float(self.fn(t)), 0.0, 1.0, limit=200)
        if abs(total - 1.0) > tol:
            raise InvalidBump(f"bump integral {total!r} deviates from 1 beyond {tol:g}")

    def integral_to(self, t: float) -> float:
        if self.cdf is not None:
            return self.cdf(t)
        if t <= 0.0:
            return 0.0
        value, _ = quad(lambda s: float(self.fn(s)), 0.0, min(t, 1.0), limit=200)
        return value

    def max_value(self) -> float:
        ts = np.linspace(0.0, 1.0, 2001)
        return float(np.max(self.fn(ts)))


def default_bump() -> BumpSpec:
    """Normalized polynomial bump 30 t^2 (1-t)^2 on (0, 1)."""
    return BumpSpec(_poly_bump, _poly_bump_cdf, name="poly-30t2(1-t)2")


def weight_of(nu: float, lam: float, mu: float, bump: BumpSpec) -> float:
    """Smoothed window weight of eigenvalue ``nu``.

    Integrates the bump over the tau for which ``lam+tau < nu <= mu-tau``;
    equals 1 on [lam+1, mu-1] and 0 outside (lam, mu].
    """
    if nu > mu or nu <= lam:
        return 0.0
    # lam + tau < nu gives tau < nu - lam; nu <= mu - tau gives tau <= mu - nu
    upper = min(nu - lam, mu - nu)
    return bump.integral_to(min(1.0, upper))


def projection_weights(
    spectrum: Spectrum, lam: float, mu: float, bump: BumpSpec = None
) -> dict[int, float]:
    """Per-mode smoothed projection weight in [0, 1].

    Requires ``-lam > 1`` and ``mu > 1`` so the smoothing stays inside the
    window; validates the bump integral (:class:`InvalidBump`).
    """
    if not (-lam > 1.0 and mu > 1.0):
        raise ParseError(f"need -lam > 1 and mu > 1, got lam={lam}, mu={mu}")
    if bump is None:
        bump = default_bump()
    bump.validate()
    return {
        i: weight_of(mode.value, lam, mu, bump) for i, mode in enumerate(spectrum.modes)
    }


# -- spectrum files ---------------------------------------------------------------
#
# Grammar (line oriented, '#' comments, blank lines ignored):
#
#   name <string>
#   N <positive int>
#   gap <float>                  (optional)
#   mode <value> <multiplicity> <form|spinor>
#
# Mode lines must be ascending in value; ties across sectors list form first.

def parse_spectrum(text: str, name: str = "spectrum") -> Spectrum:
    meta = {"name": name, "N": 1, "gap": None}
    modes = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0]
        try:
            if key == "name":
                meta["name"] = " ".join(parts[1:])
            elif key == "N":
                meta["N"] = int(parts[1])
            elif key == "gap":
                meta["gap"] = float(parts[1])
            elif key == "mode":
                modes.append(EigenMode(float(parts[1]), int(parts[2]), Sector(parts[3])))
            else:
                raise ValueError(f"unknown key {key!r}")
        except (IndexError, ValueError) as exc:
            raise ParseError(f"spectrum line {lineno}: {exc}") from exc
    return Spectrum(tuple(modes), meta["name"], meta["N"], meta["gap"])


def format_spectrum(spectrum: Spectrum) -> str:
    lines = [f"name {spectrum.name}", f"N {spectrum.group_order}"]
    if spectrum.scalar_curvature_gap is not None:
        lines.append(f"gap {spectrum.scalar_curvature_gap!r}")
    for m in spectrum.modes:
        lines.append(f"mode {m.value!r} {m.multiplicity} {m.sector.value}")
    return "\n".join(lines) + "\n"


def load_spectrum(path) -> Spectrum:
    path = Path(path)
    return parse_spectrum(path.read_text(), name=path.stem)
