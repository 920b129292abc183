"""Time-varying vector fields: analytic built-ins and gridded data.

Every field answers velocity queries at arbitrary (x, t) through `sample`,
which clamps out-of-domain coordinates to the boundary. Gridded fields use
multilinear interpolation over an (n+1)-dimensional node lattice with axis
order [t, x, y(, z)].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .binio import expect_payload_size, read_payload_file, write_payload_file
from .errors import FormatError

Array = np.ndarray

GRID_MAGIC = "nifm-grid"
GRID_VERSION = 1

# Queries this close to a lattice plane (in cell units) snap onto it, so node
# positions recomputed by callers stay bit-exact despite rounding.
_SNAP_TOL = 1e-9


@dataclass(frozen=True)
class Domain:
    """Spatiotemporal box: per-axis spatial bounds plus a time interval."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    t_lo: float
    t_hi: float

    def __post_init__(self) -> None:
        if self.n not in (2, 3):
            raise ValueError(f"spatial dimension must be 2 or 3, got {self.n}")
        if len(self.hi) != self.n:
            raise ValueError("lo and hi must have equal length")
        if not all(a < b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"need lo < hi per axis, got lo={self.lo} hi={self.hi}")
        if not self.t_lo < self.t_hi:
            raise ValueError(f"need t_lo < t_hi, got [{self.t_lo}, {self.t_hi}]")

    @property
    def n(self) -> int:
        return len(self.lo)

    @property
    def lo_arr(self) -> Array:
        return np.asarray(self.lo, dtype=np.float64)

    @property
    def hi_arr(self) -> Array:
        return np.asarray(self.hi, dtype=np.float64)

    @property
    def diagonal(self) -> float:
        """Length of the spatial bounding-box diagonal (error normalizer)."""
        return float(np.linalg.norm(self.hi_arr - self.lo_arr))

    def clamp_x(self, x: Array) -> Array:
        return np.clip(x, self.lo_arr, self.hi_arr)

    def clamp_t(self, t: Array | float):
        return np.clip(t, self.t_lo, self.t_hi)


@dataclass(frozen=True)
class GridUnits:
    """Conversion between physical time spans and temporal voxel counts."""

    time_unit: float  # physical duration of one temporal voxel

    @classmethod
    def from_domain(cls, domain: Domain, dims_t: int) -> "GridUnits":
        if dims_t < 2:
            raise ValueError("need at least 2 temporal nodes")
        return cls((domain.t_hi - domain.t_lo) / (dims_t - 1))

    def to_grid(self, tau_physical: float) -> float:
        return tau_physical / self.time_unit

    def to_physical(self, tau_grid: float) -> float:
        return tau_grid * self.time_unit


class VectorField:
    """Base: a velocity function over a spatiotemporal domain."""

    domain: Domain

    @property
    def n(self) -> int:
        return self.domain.n

    def velocity(self, x: Array, t: Array) -> Array:
        """Velocity at already-clamped positions x (B, n) and times t (B,)."""
        raise NotImplementedError


@dataclass(frozen=True)
class Constant(VectorField):
    c: tuple[float, ...]
    domain: Domain = field(default_factory=lambda: Domain((0.0, 0.0), (2.0, 1.0), 0.0, 1.0))

    def velocity(self, x: Array, t: Array) -> Array:
        return np.broadcast_to(np.asarray(self.c, dtype=np.float64), x.shape).copy()


@dataclass(frozen=True)
class RigidRotation(VectorField):
    """v(x, y) = omega0 * (-y, x); circular trajectories about the origin."""

    omega0: float = 1.0
    domain: Domain = field(default_factory=lambda: Domain((-1.0, -1.0), (1.0, 1.0), 0.0, 4.0))

    def velocity(self, x: Array, t: Array) -> Array:
        return self.omega0 * np.stack([-x[..., 1], x[..., 0]], axis=-1)


@dataclass(frozen=True)
class Saddle(VectorField):
    """v(x, y) = (lam*x, -lam*y); stretches along x, compresses along y."""

    lam: float = 0.5
    domain: Domain = field(default_factory=lambda: Domain((-1.0, -1.0), (1.0, 1.0), 0.0, 4.0))

    def velocity(self, x: Array, t: Array) -> Array:
        return np.stack([self.lam * x[..., 0], -self.lam * x[..., 1]], axis=-1)


@dataclass(frozen=True)
class DoubleGyre(VectorField):
    """Canonical periodically-perturbed double gyre on [0,2] x [0,1].

    Stream function psi = A sin(pi f(x,t)) sin(pi y) with
    f = eps sin(w t) x^2 + (1 - 2 eps sin(w t)) x; u = -dpsi/dy, v = dpsi/dx.
    """

    A: float = 0.1
    eps: float = 0.25
    omega: float = 2.0 * np.pi / 10.0
    domain: Domain = field(default_factory=lambda: Domain((0.0, 0.0), (2.0, 1.0), 0.0, 10.0))

    def velocity(self, x: Array, t: Array) -> Array:
        px, py = x[..., 0], x[..., 1]
        st = self.eps * np.sin(self.omega * np.asarray(t))
        f = st * px**2 + (1.0 - 2.0 * st) * px
        fx = 2.0 * st * px + 1.0 - 2.0 * st
        u = -np.pi * self.A * np.sin(np.pi * f) * np.cos(np.pi * py)
        v = np.pi * self.A * np.cos(np.pi * f) * np.sin(np.pi * py) * fx
        return np.stack([u, v], axis=-1)


class GriddedField(VectorField):
    """Velocity vectors stored on an (n+1)-D node lattice, axis order [t, x, y(, z)].

    `data` is node-major in that axis order with the n components
    fastest-varying; sampling is multilinear with boundary clamping.
    """

    def __init__(self, dims: Sequence[int], domain: Domain, data: Array):
        dims = tuple(int(d) for d in dims)
        if len(dims) != domain.n + 1:
            raise ValueError(f"dims must have {domain.n + 1} axes [t,x,y(,z)], got {dims}")
        if any(d < 2 for d in dims):
            raise ValueError(f"need at least 2 nodes per axis, got {dims}")
        data = np.asarray(data, dtype=np.float64)
        expected = int(np.prod(dims)) * domain.n
        if data.size != expected:
            raise ValueError(f"data has {data.size} floats, dims {dims} require {expected}")
        self.dims = dims
        self.domain = domain
        self.data = data.reshape(dims + (domain.n,))

    @property
    def grid_units(self) -> GridUnits:
        return GridUnits.from_domain(self.domain, self.dims[0])

    def node_coordinates(self) -> list[Array]:
        """Per-axis node positions, time axis first."""
        axes = [np.linspace(self.domain.t_lo, self.domain.t_hi, self.dims[0])]
        for a in range(self.domain.n):
            axes.append(np.linspace(self.domain.lo[a], self.domain.hi[a], self.dims[a + 1]))
        return axes

    def velocity(self, x: Array, t: Array) -> Array:
        coords = np.concatenate([np.asarray(t)[..., None], x], axis=-1)
        lo = np.concatenate([[self.domain.t_lo], self.domain.lo_arr])
        hi = np.concatenate([[self.domain.t_hi], self.domain.hi_arr])
        res = np.asarray(self.dims)
        ci = (coords - lo) / (hi - lo) * (res - 1)
        flat = ci.reshape(-1, len(self.dims))
        out = multilinear_interpolate(self.data.reshape(-1, self.domain.n), self.dims, flat)
        return out.reshape(x.shape)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, GriddedField)
            and self.dims == other.dims
            and self.domain == other.domain
            and np.array_equal(self.data, other.data)
        )


def corner_weights(dims: Sequence[int], ci: Array) -> tuple[Array, Array]:
    """Flat node indices and multilinear weights for each query.

    ci: (B, len(dims)) continuous indices; clamped to [0, res-1] per axis and
    snapped onto lattice planes within _SNAP_TOL so node queries are exact.
    Returns (idx, w), both (B, 2**len(dims)); weights sum to 1 per row.
    """
    dims = tuple(dims)
    m = len(dims)
    ci = np.clip(ci, 0.0, np.asarray(dims, dtype=np.float64) - 1.0)
    nearest = np.round(ci)
    ci = np.where(np.abs(ci - nearest) <= _SNAP_TOL, nearest, ci)

    i0 = np.minimum(ci.astype(np.int64), np.asarray(dims) - 2)
    frac = ci - i0

    strides = np.empty(m, dtype=np.int64)
    strides[-1] = 1
    for a in range(m - 2, -1, -1):
        strides[a] = strides[a + 1] * dims[a + 1]
    base = i0 @ strides

    n_corners = 1 << m
    idx = np.empty((ci.shape[0], n_corners), dtype=np.int64)
    w = np.empty((ci.shape[0], n_corners))
    for corner in range(n_corners):
        wc = np.ones(ci.shape[0])
        ic = base.copy()
        for a in range(m):
            if corner >> (m - 1 - a) & 1:
                wc = wc * frac[:, a]
                ic += strides[a]
            else:
                wc = wc * (1.0 - frac[:, a])
        idx[:, corner] = ic
        w[:, corner] = wc
    return idx, w


def multilinear_interpolate(values: Array, dims: Sequence[int], ci: Array) -> Array:
    """Multilinear interpolation of (prod(dims), C) node payloads at ci (B, axes)."""
    idx, w = corner_weights(dims, ci)
    return (w[:, :, None] * values[idx]).sum(axis=1)


def sample(src: VectorField, x: Array | Sequence[float], t: Array | float) -> Array:
    """Velocity of `src` at (x, t); out-of-domain coordinates are clamped.

    Accepts a single position (n,) or a batch (B, n); `t` broadcasts.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if x.shape[-1] != src.n:
        raise ValueError(f"position has {x.shape[-1]} components, field is {src.n}-dimensional")
    xb = np.atleast_2d(x)
    tb = np.broadcast_to(np.asarray(t, dtype=np.float64), xb.shape[:-1])
    v = src.velocity(src.domain.clamp_x(xb), src.domain.clamp_t(tb))
    return v[0] if single else v.reshape(x.shape)


def rasterize(src: VectorField, dims: Sequence[int]) -> GriddedField:
    """Sample `src` on a [t, x, y(, z)] node lattice of the given resolution."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != src.n + 1:
        raise ValueError(f"dims must have {src.n + 1} axes [t,x,y(,z)], got {dims}")
    if any(d < 2 for d in dims):
        raise ValueError(f"need at least 2 nodes per axis, got {dims}")
    out = GriddedField(dims, src.domain, np.zeros(int(np.prod(dims)) * src.n))
    axes = out.node_coordinates()
    mesh = np.meshgrid(*axes, indexing="ij")
    t = mesh[0].reshape(-1)
    x = np.stack([m.reshape(-1) for m in mesh[1:]], axis=-1)
    out.data[...] = sample(src, x, t).reshape(dims + (src.n,))
    return out


def save_grid(grid: GriddedField, path: str) -> None:
    header = {
        "magic": GRID_MAGIC,
        "version": GRID_VERSION,
        "n": grid.domain.n,
        "dims": list(grid.dims),
        "lo": list(grid.domain.lo),
        "hi": list(grid.domain.hi),
        "t_lo": grid.domain.t_lo,
        "t_hi": grid.domain.t_hi,
    }
    write_payload_file(path, header, grid.data.reshape(-1))


def load_grid(path: str) -> GriddedField:
    header, payload = read_payload_file(path, GRID_MAGIC, GRID_VERSION)
    try:
        n = int(header["n"])
        dims = [int(d) for d in header["dims"]]
        lo, hi = header["lo"], header["hi"]
        t_lo, t_hi = float(header["t_lo"]), float(header["t_hi"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: incomplete grid header: {exc}") from exc
    if n not in (2, 3):
        raise FormatError(f"{path}: unsupported spatial dimension n={n}")
    if len(dims) != n + 1 or len(lo) != n or len(hi) != n:
        raise FormatError(f"{path}: header dims/bounds inconsistent with n={n}")
    domain = Domain(tuple(float(v) for v in lo), tuple(float(v) for v in hi), t_lo, t_hi)
    expect_payload_size(path, payload, int(np.prod(dims)) * n)
    return GriddedField(dims, domain, payload)


def analytic_flow_map(src: VectorField, x: Array, t: Array | float, tau: float) -> Array:
    """Closed-form flow-map endpoint for fields that admit one.

    Supported: Constant (translation), RigidRotation (rotation by omega0*tau),
    Saddle (exponential stretch). Raises for other kinds.
    """
    x = np.asarray(x, dtype=np.float64)
    if isinstance(src, Constant):
        return x + tau * np.asarray(src.c)
    if isinstance(src, RigidRotation):
        ang = src.omega0 * tau
        c, s = np.cos(ang), np.sin(ang)
        return np.stack(
            [c * x[..., 0] - s * x[..., 1], s * x[..., 0] + c * x[..., 1]], axis=-1
        )
    if isinstance(src, Saddle):
        return np.stack(
            [x[..., 0] * np.exp(src.lam * tau), x[..., 1] * np.exp(-src.lam * tau)], axis=-1
        )
    raise ValueError(f"no closed-form flow map for {type(src).__name__}")
