"""Grids, discrete measures, sparse cell marginals, and the KL divergence.

Measures live on regular 1D/2D grids and are stored densely, one nonnegative
mass per node. Cell Y-marginals are stored sparsely as a minimal axis-aligned
bounding box plus dense values inside it, which is what keeps the domain
decomposition solver's memory footprint proportional to the coupling's
effective support.

The divergence used everywhere is the weighted Kullback-Leibler divergence

    KL(rho | sigma) = sum_y sigma_y * (r log r - r + 1),   r = rho_y / sigma_y,

with the conventions 0 log 0 = 0 (a zero entry of rho contributes sigma_y) and
KL = +inf as soon as rho puts mass where sigma has none.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import xlogy

__all__ = [
    "Grid",
    "GridMeasure",
    "SparseCellMarginal",
    "DivergenceSpec",
    "TransportProblem",
    "GridMismatchError",
    "kl_divergence",
    "kl_terms",
    "truncate_and_rebox",
    "assemble_y_marginal",
    "box_shape",
    "box_slices",
    "box_union",
    "extract_window",
]

#: A box is one (offset, extent) pair per axis, indexing into a grid.
Box = tuple[tuple[int, int], ...]


class GridMismatchError(ValueError):
    """Raised when two objects that must share a grid (or box) do not."""


@dataclass(frozen=True)
class Grid:
    """A regular grid in one or two dimensions.

    Parameters
    ----------
    dims : tuple of int
        Number of nodes per axis (1 or 2 axes).
    dx : float
        Uniform node spacing, identical on every axis.
    origin : tuple of float
        Coordinate of the node with index 0 on each axis. The node with
        multi-index ``k`` sits at ``origin + dx * k`` exactly.
    """

    dims: tuple[int, ...]
    dx: float
    origin: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "dx", float(self.dx))
        if len(self.dims) not in (1, 2):
            raise ValueError(f"only 1D and 2D grids are supported, got dims={self.dims}")
        if len(self.origin) != len(self.dims):
            raise ValueError("origin must have one coordinate per axis")
        if any(n < 1 for n in self.dims):
            raise ValueError("every axis must have at least one node")
        if not self.dx > 0:
            raise ValueError("dx must be positive")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def nnodes(self) -> int:
        return int(np.prod(self.dims))

    def axis_coords(self, axis: int, start: int = 0, extent: int | None = None) -> np.ndarray:
        """Node coordinates along one axis, optionally for an index window.

        Indices outside ``[0, dims[axis])`` are allowed and extrapolate the
        regular spacing; padded solver windows rely on this.
        """
        if extent is None:
            extent = self.dims[axis]
        idx = np.arange(start, start + extent, dtype=np.float64)
        return self.origin[axis] + self.dx * idx

    def box_coords(self, box: Box) -> list[np.ndarray]:
        """Per-axis coordinate arrays for the nodes of a box."""
        return [self.axis_coords(a, off, ext) for a, (off, ext) in enumerate(box)]

    def full_box(self) -> Box:
        return tuple((0, n) for n in self.dims)


@dataclass(frozen=True)
class GridMeasure:
    """A nonnegative measure stored densely on a grid."""

    grid: Grid
    mass: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=np.float64)
        if m.shape != self.grid.dims:
            raise ValueError(f"mass shape {m.shape} does not match grid dims {self.grid.dims}")
        if np.any(m < 0):
            raise ValueError("measure entries must be nonnegative")
        if not np.all(np.isfinite(m)):
            raise ValueError("measure entries must be finite")
        object.__setattr__(self, "mass", m)

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())

    def window(self, box: Box, fill: float = 0.0) -> np.ndarray:
        """Dense values over a box; out-of-grid indices read as ``fill``."""
        return extract_window(self.mass, box, fill=fill)

    # -- file format ---------------------------------------------------------
    #
    # One JSON header line {"dims", "dx", "origin", "encoding"} followed by
    # the row-major payload: either CSV text (one line per leading-axis row,
    # repr-formatted so values round-trip bit-exact) or raw little-endian
    # IEEE-754 64-bit values.

    def save(self, path: str | Path, encoding: str = "csv") -> None:
        if encoding not in ("csv", "f64"):
            raise ValueError(f"unknown encoding {encoding!r}")
        header = json.dumps(
            {
                "dims": list(self.grid.dims),
                "dx": self.grid.dx,
                "origin": list(self.grid.origin),
                "encoding": encoding,
            }
        )
        rows = self.mass.reshape(self.grid.dims[0], -1)
        with open(path, "wb") as fh:
            fh.write(header.encode("utf-8") + b"\n")
            if encoding == "csv":
                text = "\n".join(",".join(repr(float(v)) for v in row) for row in rows)
                fh.write(text.encode("utf-8"))
            else:
                fh.write(np.ascontiguousarray(self.mass, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "GridMeasure":
        with open(path, "rb") as fh:
            raw = fh.read()
        head, _, payload = raw.partition(b"\n")
        meta = json.loads(head.decode("utf-8"))
        dims = tuple(int(n) for n in meta["dims"])
        grid = Grid(dims=dims, dx=meta["dx"], origin=tuple(meta["origin"]))
        if meta["encoding"] == "csv":
            values = [float(v) for line in payload.decode("utf-8").splitlines() for v in line.split(",") if v]
            mass = np.array(values, dtype=np.float64).reshape(dims)
        elif meta["encoding"] == "f64":
            mass = np.frombuffer(payload, dtype="<f8", count=int(np.prod(dims))).reshape(dims).copy()
        else:
            raise ValueError(f"unknown encoding {meta['encoding']!r} in header")
        return cls(grid=grid, mass=mass)


@dataclass(frozen=True)
class SparseCellMarginal:
    """A cell's Y-marginal: a bounding box into the Y grid plus dense values.

    The box is one ``(offset, extent)`` pair per axis; ``values`` has shape
    equal to the extents. An empty marginal has every extent equal to zero.
    """

    box: Box
    values: np.ndarray

    def __post_init__(self):
        box = tuple((int(o), int(e)) for o, e in self.box)
        object.__setattr__(self, "box", box)
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != box_shape(box):
            raise ValueError(f"values shape {v.shape} does not match box {box}")
        if v.size and np.any(v < 0):
            raise ValueError("marginal entries must be nonnegative")
        object.__setattr__(self, "values", v)

    @property
    def is_empty(self) -> bool:
        return self.values.size == 0

    @property
    def total_mass(self) -> float:
        return float(self.values.sum())

    @classmethod
    def empty(cls, ndim: int) -> "SparseCellMarginal":
        box = tuple((0, 0) for _ in range(ndim))
        return cls(box=box, values=np.zeros((0,) * ndim))


@dataclass(frozen=True)
class DivergenceSpec:
    """The marginal penalty: a KL divergence weighted by ``lam``.

    The associated entropy function and its convex conjugate are

        phi(s)  = lam * (s log s - s + 1),
        phi*(z) = lam * (exp(z / lam) - 1),
        phi'(s) = lam * log s,

    which satisfy the Fenchel identity phi*(phi'(s)) + phi(s) = s phi'(s).
    """

    lam: float
    kind: str = "kl"

    def __post_init__(self):
        if self.kind != "kl":
            raise ValueError("only the weighted KL divergence is supported")
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError("lam must be positive and finite")

    def phi(self, s):
        s = np.asarray(s, dtype=np.float64)
        return self.lam * (xlogy(s, s) - s + 1.0)

    def phi_star(self, z):
        z = np.asarray(z, dtype=np.float64)
        return self.lam * np.expm1(z / self.lam)

    def phi_prime(self, s):
        s = np.asarray(s, dtype=np.float64)
        return self.lam * np.log(s)


@dataclass(frozen=True)
class TransportProblem:
    """An unbalanced transport problem between two grid measures.

    The cost is the squared Euclidean distance between node coordinates; both
    marginal penalties are ``div.lam * KL``. ``nu`` must have full support
    (every background-marginal density divides by it); ``mu`` may contain
    zero nodes, which simply never carry mass.
    """

    mu: GridMeasure
    nu: GridMeasure
    div: DivergenceSpec
    eps: float

    def __post_init__(self):
        if self.mu.grid.ndim != self.nu.grid.ndim:
            raise GridMismatchError("mu and nu must have the same dimensionality")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.mu.total_mass <= 0:
            raise ValueError("mu must carry positive mass")
        if np.any(self.nu.mass <= 0):
            raise ValueError("nu must have full support (strictly positive everywhere)")


# -- box utilities ------------------------------------------------------------


def box_shape(box: Box) -> tuple[int, ...]:
    return tuple(e for _, e in box)


def box_slices(box: Box) -> tuple[slice, ...]:
    return tuple(slice(o, o + e) for o, e in box)


def box_union(boxes: Iterable[Box]) -> Box:
    """Smallest box containing every given non-empty box."""
    boxes = [b for b in boxes if all(e > 0 for _, e in b)]
    if not boxes:
        raise ValueError("no non-empty boxes to unite")
    ndim = len(boxes[0])
    out = []
    for a in range(ndim):
        lo = min(b[a][0] for b in boxes)
        hi = max(b[a][0] + b[a][1] for b in boxes)
        out.append((lo, hi - lo))
    return tuple(out)


def extract_window(arr: np.ndarray, box: Box, fill: float = 0.0) -> np.ndarray:
    """Copy a box out of a dense array, filling out-of-range indices."""
    shape = box_shape(box)
    out = np.full(shape, fill, dtype=np.float64)
    src, dst = [], []
    for (off, ext), n in zip(box, arr.shape):
        lo, hi = max(off, 0), min(off + ext, n)
        if lo >= hi:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - off, hi - off))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def marginal_window(m: SparseCellMarginal, box: Box) -> np.ndarray:
    """Values of a sparse marginal on an arbitrary box, zero off its support."""
    out = np.zeros(box_shape(box), dtype=np.float64)
    if m.is_empty:
        return out
    src, dst = [], []
    for (m_off, m_ext), (b_off, b_ext) in zip(m.box, box):
        lo, hi = max(m_off, b_off), min(m_off + m_ext, b_off + b_ext)
        if lo >= hi:
            return out
        src.append(slice(lo - m_off, hi - m_off))
        dst.append(slice(lo - b_off, hi - b_off))
    out[tuple(dst)] = m.values[tuple(src)]
    return out


# -- KL divergence ------------------------------------------------------------


def kl_terms(rho: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Per-node KL contributions sigma*(r log r - r + 1); +inf where invalid."""
    rho = np.asarray(rho, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    out = np.where(sigma > 0, sigma, 0.0).astype(np.float64)
    pos = sigma > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(pos, rho, 0.0) / np.where(pos, sigma, 1.0)
        out = np.where(pos, xlogy(rho, r) - rho + sigma, 0.0)
    out = np.where((~pos) & (rho > 0), np.inf, out)
    return out


def kl_divergence(rho, sigma) -> float:
    """KL(rho | sigma) for grid measures, cell marginals, or plain arrays.

    Accepted pairings: two :class:`GridMeasure` on the same grid, two
    :class:`SparseCellMarginal` on the same box, a marginal against a
    :class:`GridMeasure` (the measure is restricted to the marginal's box;
    sound because the marginal is zero outside it and zero entries of rho
    contribute sigma, accounted for by the off-box correction), or two bare
    arrays of equal shape.
    """
    if isinstance(rho, GridMeasure) and isinstance(sigma, GridMeasure):
        if rho.grid != sigma.grid:
            raise GridMismatchError("measures live on different grids")
        return float(kl_terms(rho.mass, sigma.mass).sum())
    if isinstance(rho, SparseCellMarginal) and isinstance(sigma, SparseCellMarginal):
        if rho.box != sigma.box:
            raise GridMismatchError("marginals use different boxes")
        return float(kl_terms(rho.values, sigma.values).sum())
    if isinstance(rho, SparseCellMarginal) and isinstance(sigma, GridMeasure):
        if rho.is_empty:
            return sigma.total_mass
        inside = sigma.window(rho.box)
        off_box = sigma.total_mass - float(inside.sum())
        return float(kl_terms(rho.values, inside).sum()) + off_box
    rho_a, sigma_a = np.asarray(rho, float), np.asarray(sigma, float)
    if rho_a.shape != sigma_a.shape:
        raise GridMismatchError("arrays have different shapes")
    return float(kl_terms(rho_a, sigma_a).sum())


# -- sparse marginal operations ------------------------------------------------


def truncate_and_rebox(
    m: SparseCellMarginal, threshold: float
) -> tuple[SparseCellMarginal, float]:
    """Drop entries below ``threshold`` and shrink the box to the survivors.

    Returns the reboxed marginal and the total mass removed. An input whose
    entries all fall below the threshold yields the empty marginal (its
    zero-extent box is the emptiness flag).
    """
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    if m.is_empty:
        return m, 0.0
    keep = m.values >= threshold
    removed = float(m.values[~keep].sum())
    if not keep.any():
        return SparseCellMarginal.empty(len(m.box)), removed
    new_box = []
    idx = np.nonzero(keep)
    for a, (off, _) in enumerate(m.box):
        lo, hi = int(idx[a].min()), int(idx[a].max()) + 1
        new_box.append((off + lo, hi - lo))
    inner = tuple(slice(lo - off, (lo - off) + ext) for (lo, ext), (off, _) in zip(new_box, m.box))
    values = np.where(keep, m.values, 0.0)[inner]
    return SparseCellMarginal(box=tuple(new_box), values=values), removed


def assemble_y_marginal(cells: Sequence[SparseCellMarginal], grid: Grid) -> GridMeasure:
    """Sum cell marginals into one dense measure on the Y grid.

    Accumulation follows the fixed cell order given, node by node, so the
    result is deterministic; downstream exact-preservation checks rely on
    this canonical order.
    """
    total = np.zeros(grid.dims, dtype=np.float64)
    for c in cells:
        if c.is_empty:
            continue
        for (off, ext), n in zip(c.box, grid.dims):
            if off < 0 or off + ext > n:
                raise GridMismatchError(f"cell box {c.box} exceeds grid dims {grid.dims}")
        total[box_slices(c.box)] += c.values
    return GridMeasure(grid=grid, mass=total)
