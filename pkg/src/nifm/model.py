"""Neural flow-map representation.

The network maps (position, time, span) to the advected position through
tau-gated residual blocks over two multiresolution feature-grid encoders:

    z0   = tanh(tn*m0) * g_nu(x,t)
    z1   = z0 + tanh(tn*m1) * swish(z0 * (W1 g_tau(x,t)))
    zl   = z(l-1) + tanh(tn*ml) * swish(Wl z(l-1))      l = 2, 3
    out  = x + W_out z3

with tn the span normalized by the trained maximum span, and no bias vector
anywhere. The structure forces two properties: the output is exactly x at
zero span, and the span-derivative at zero span collapses to the closed form
W_out (m0 * g_nu(x,t)), which depends on neither g_tau nor W1..W3, m1..m3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError
from .fields import Domain, corner_weights

Array = np.ndarray

POLICIES = ("sqrt", "full", "log", "single")
NUM_BLOCKS = 4  # m0..m3 gates: input scaling + three residual blocks


# ---------------------------------------------------------------------------
# activations (smoothness of swish keeps the span-tangent well-defined)


def sigmoid(u: Array) -> Array:
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def swish(u: Array) -> Array:
    return u * sigmoid(u)


def swish_d1(u: Array) -> Array:
    s = sigmoid(u)
    return s * (1.0 + u * (1.0 - s))


def swish_d2(u: Array) -> Array:
    s = sigmoid(u)
    ds = s * (1.0 - s)
    return ds * (2.0 + u * (1.0 - 2.0 * s))


# ---------------------------------------------------------------------------
# configuration and parameter containers


@dataclass(frozen=True)
class ModelConfig:
    """Architecture settings; base_res or compression sizes the feature grids."""

    d: int = 64
    levels: int = 4
    feat_dim: int = 8
    scale: float = 1.65
    base_res: tuple[int, ...] | None = None  # coarsest level, [t, x, y(, z)]
    compression: float | None = None  # field float count / parameter count
    tau_max_grid: float = 48.0  # maximum trained span, temporal voxels
    grid_init: float = 1e-4


@dataclass
class FeatureGrid:
    """One resolution level: trainable feature vectors on a [t,x,y(,z)] lattice."""

    res: tuple[int, ...]
    values: Array  # (prod(res), feat_dim)


@dataclass
class EncoderStack:
    """Multiresolution feature grids plus a bias-free MLP on the concatenation."""

    levels: list[FeatureGrid]
    mlp: list[Array]  # two matrices for g_nu (swish between), one for g_tau


class NifmModel:
    """All trainable parameters plus domain/normalization metadata."""

    def __init__(
        self,
        domain: Domain,
        f_nu: EncoderStack,
        f_tau: EncoderStack,
        w: list[Array],
        w_out: Array,
        m: list[Array],
        tau_max: float,
        time_unit: float,
    ):
        if len(w) != NUM_BLOCKS - 1 or len(m) != NUM_BLOCKS:
            raise ValueError(f"expected {NUM_BLOCKS - 1} block matrices and {NUM_BLOCKS} gates")
        self.domain = domain
        self.f_nu = f_nu
        self.f_tau = f_tau
        self.w = w
        self.w_out = w_out
        self.m = m
        self.tau_max = float(tau_max)
        self.time_unit = float(time_unit)

    @property
    def n(self) -> int:
        return self.domain.n

    @property
    def d(self) -> int:
        return self.w_out.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.f_nu.levels[0].values.shape[1]

    @property
    def resolutions(self) -> list[tuple[int, ...]]:
        return [g.res for g in self.f_nu.levels]

    def param_items(self) -> Iterator[tuple[str, Array]]:
        """(name, array) pairs in the fixed serialization order."""
        for prefix, stack in (("nu", self.f_nu), ("tau", self.f_tau)):
            for i, grid in enumerate(stack.levels):
                yield f"{prefix}.grid{i}", grid.values
            for i, mat in enumerate(stack.mlp):
                yield f"{prefix}.mlp{i}", mat
        for i, mat in enumerate(self.w):
            yield f"w{i + 1}", mat
        yield "w_out", self.w_out
        for i, vec in enumerate(self.m):
            yield f"m{i}", vec

    def params(self) -> dict[str, Array]:
        return dict(self.param_items())

    def set_param(self, name: str, value: Array) -> None:
        current = self.params()[name]
        if current.shape != value.shape:
            raise ValueError(f"{name}: shape {value.shape} != expected {current.shape}")
        current[...] = value

    def parameter_count(self) -> int:
        return sum(arr.size for _, arr in self.param_items())

    def copy(self) -> "NifmModel":
        return NifmModel(
            self.domain,
            EncoderStack(
                [FeatureGrid(g.res, g.values.copy()) for g in self.f_nu.levels],
                [m.copy() for m in self.f_nu.mlp],
            ),
            EncoderStack(
                [FeatureGrid(g.res, g.values.copy()) for g in self.f_tau.levels],
                [m.copy() for m in self.f_tau.mlp],
            ),
            [m.copy() for m in self.w],
            self.w_out.copy(),
            [m.copy() for m in self.m],
            self.tau_max,
            self.time_unit,
        )


def stage1_param_names(model: NifmModel) -> tuple[str, ...]:
    """Parameters of the closed-form velocity network: g_nu stack, m0, w_out."""
    names = [f"nu.grid{i}" for i in range(len(model.f_nu.levels))]
    names += [f"nu.mlp{i}" for i in range(len(model.f_nu.mlp))]
    names += ["w_out", "m0"]
    return tuple(names)


# ---------------------------------------------------------------------------
# step policy


def k_for_tau(policy: str, tau_g: float) -> int:
    """Composition step count for a span expressed in temporal voxels."""
    if tau_g < 0:
        raise ValueError(f"tau_g must be >= 0, got {tau_g}")
    if policy == "sqrt":
        k = math.ceil(math.sqrt(tau_g))
    elif policy == "full":
        k = math.ceil(tau_g)
    elif policy == "log":
        k = math.ceil(math.log1p(tau_g))
    elif policy == "single":
        k = 1
    else:
        raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")
    return max(k, 1)


# ---------------------------------------------------------------------------
# grid sizing and initialization


def level_resolutions(
    base_res: tuple[int, ...], scale: float = 1.65, levels: int = 4
) -> list[tuple[int, ...]]:
    """Geometric resolution ladder: res_l = ceil(res_0 * scale**l) per axis."""
    if levels < 1:
        raise ValueError("need at least one level")
    return [tuple(math.ceil(r * scale**lvl) for r in base_res) for lvl in range(levels)]


def parameter_count(
    n: int, d: int, feat_dim: int, level_res: list[tuple[int, ...]]
) -> int:
    """Total trainable floats for both encoders plus all dense weights."""
    nodes = sum(int(np.prod(r)) for r in level_res)
    concat = len(level_res) * feat_dim
    dense = d * concat + d * d  # g_nu MLP
    dense += d * concat  # g_tau MLP
    dense += (NUM_BLOCKS - 1) * d * d + n * d + NUM_BLOCKS * d  # blocks, output, gates
    return 2 * nodes * feat_dim + dense


def solve_base_res(
    dims: tuple[int, ...], n: int, compression: float, cfg: ModelConfig
) -> tuple[int, ...]:
    """Coarsest-level resolution whose total parameter count best matches
    field_float_count / compression. Axes scale proportionally to the field
    resolution; raises when even 2-node-per-axis grids overshoot the target."""
    if compression <= 0:
        raise ConfigError(f"compression must be positive, got {compression}")
    target = int(np.prod(dims)) * n / compression

    def count(base: tuple[int, ...]) -> int:
        return parameter_count(n, cfg.d, cfg.feat_dim, level_resolutions(base, cfg.scale, cfg.levels))

    floor_base = tuple(2 for _ in dims)
    if count(floor_base) > target:
        raise ConfigError(
            f"compression {compression} infeasible: minimum model "
            f"({count(floor_base)} params) exceeds target ({target:.0f})"
        )

    def base_for(alpha: float) -> tuple[int, ...]:
        return tuple(max(2, round(alpha * dim)) for dim in dims)

    lo_a, hi_a = 0.0, 4.0
    for _ in range(60):
        mid = 0.5 * (lo_a + hi_a)
        if count(base_for(mid)) < target:
            lo_a = mid
        else:
            hi_a = mid
    center = base_for(0.5 * (lo_a + hi_a))

    # Fine-tune around the bisection point; per-axis rounding is coarse.
    best, best_err = center, abs(count(center) - target)
    deltas = np.stack(np.meshgrid(*[[-1, 0, 1]] * len(dims), indexing="ij"), -1).reshape(-1, len(dims))
    for delta in deltas:
        cand = tuple(max(2, c + int(dv)) for c, dv in zip(center, delta))
        err = abs(count(cand) - target)
        if err < best_err:
            best, best_err = cand, err
    return best


def init_model(
    domain: Domain, dims: tuple[int, ...], cfg: ModelConfig, seed: int
) -> NifmModel:
    """Fresh model sized for a field of lattice resolution `dims` [t,x,y(,z)].

    Feature grids start near zero, dense weights use fan-in scaling, and the
    gate vectors start at 1 so tanh(tn*m) spans a useful range over the
    normalized span tn in [0, 1]. Deterministic under `seed`.
    """
    n = domain.n
    if len(dims) != n + 1:
        raise ValueError(f"dims must have {n + 1} axes [t,x,y(,z)], got {dims}")
    if cfg.base_res is not None:
        base = tuple(int(r) for r in cfg.base_res)
        if len(base) != n + 1 or any(r < 2 for r in base):
            raise ConfigError(f"base_res needs {n + 1} axes of >= 2 nodes, got {base}")
    elif cfg.compression is not None:
        base = solve_base_res(dims, n, cfg.compression, cfg)
    else:
        raise ConfigError("model config needs base_res or compression")
    level_res = level_resolutions(base, cfg.scale, cfg.levels)

    rng = np.random.default_rng(seed)
    concat = cfg.levels * cfg.feat_dim

    def grids() -> list[FeatureGrid]:
        return [
            FeatureGrid(
                res, rng.uniform(-cfg.grid_init, cfg.grid_init, (int(np.prod(res)), cfg.feat_dim))
            )
            for res in level_res
        ]

    def dense(out_dim: int, in_dim: int) -> Array:
        return rng.normal(0.0, 1.0 / np.sqrt(in_dim), (out_dim, in_dim))

    f_nu = EncoderStack(grids(), [dense(cfg.d, concat), dense(cfg.d, cfg.d)])
    f_tau = EncoderStack(grids(), [dense(cfg.d, concat)])
    w = [dense(cfg.d, cfg.d) for _ in range(NUM_BLOCKS - 1)]
    w_out = dense(n, cfg.d)
    m = [np.ones(cfg.d) for _ in range(NUM_BLOCKS)]

    time_unit = (domain.t_hi - domain.t_lo) / (dims[0] - 1)
    return NifmModel(domain, f_nu, f_tau, w, w_out, m, cfg.tau_max_grid * time_unit, time_unit)


# ---------------------------------------------------------------------------
# evaluation


def _as_batch(x, t, tau=None):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    tb = np.broadcast_to(np.asarray(t, dtype=np.float64), xb.shape[:1])
    if tau is None:
        return xb, tb, single
    taub = np.broadcast_to(np.asarray(tau, dtype=np.float64), xb.shape[:1])
    return xb, tb, taub, single


def normalized_coords(model: NifmModel, x: Array, t: Array) -> Array:
    """Map (x, t) into per-axis [0,1] lattice coordinates, time axis first."""
    dom = model.domain
    xs = (dom.clamp_x(x) - dom.lo_arr) / (dom.hi_arr - dom.lo_arr)
    ts = (dom.clamp_t(t) - dom.t_lo) / (dom.t_hi - dom.t_lo)
    return np.concatenate([ts[:, None], xs], axis=1)


def _encode(stack: EncoderStack, u: Array):
    feats, corners = [], []
    for grid in stack.levels:
        ci = u * (np.asarray(grid.res, dtype=np.float64) - 1.0)
        idx, w = corner_weights(grid.res, ci)
        feats.append((w[:, :, None] * grid.values[idx]).sum(axis=1))
        corners.append((idx, w))
    c = np.concatenate(feats, axis=1)
    if len(stack.mlp) == 2:
        h = c @ stack.mlp[0].T
        sh = swish(h)
        g = sh @ stack.mlp[1].T
        return g, {"corners": corners, "c": c, "h": h, "sh": sh}
    g = c @ stack.mlp[0].T
    return g, {"corners": corners, "c": c}


def encode_features(model: NifmModel, which: str, x, t) -> Array:
    """Encoder output g(x, t) in R^d for stack "nu" or "tau"."""
    xb, tb, single = _as_batch(x, t)
    stack = model.f_nu if which == "nu" else model.f_tau
    g, _ = _encode(stack, normalized_coords(model, xb, tb))
    return g[0] if single else g


def graph_forward(model: NifmModel, xb: Array, tb: Array, taub: Array, tangent: bool) -> dict:
    """All layer intermediates for a batch; with `tangent`, also the exact
    forward-mode span-derivative chain. Consumed by the gradient engine."""
    u = normalized_coords(model, xb, tb)
    gnu, enc_nu = _encode(model.f_nu, u)
    gtau, enc_tau = _encode(model.f_tau, u)

    r = 1.0 / model.tau_max
    tn = (taub * r)[:, None]
    a = [np.tanh(tn * mi) for mi in model.m]

    z0 = a[0] * gnu
    p = gtau @ model.w[0].T
    u1 = z0 * p
    s1, s1p = swish(u1), swish_d1(u1)
    z1 = z0 + a[1] * s1
    u2 = z1 @ model.w[1].T
    s2, s2p = swish(u2), swish_d1(u2)
    z2 = z1 + a[2] * s2
    u3 = z2 @ model.w[2].T
    s3, s3p = swish(u3), swish_d1(u3)
    z3 = z2 + a[3] * s3
    out = xb + z3 @ model.w_out.T

    g = {
        "x": xb, "t": tb, "tau": taub, "tn": tn, "r": r,
        "gnu": gnu, "gtau": gtau, "enc_nu": enc_nu, "enc_tau": enc_tau,
        "a": a, "z0": z0, "p": p,
        "u1": u1, "s1": s1, "s1p": s1p, "z1": z1,
        "u2": u2, "s2": s2, "s2p": s2p, "z2": z2,
        "u3": u3, "s3": s3, "s3p": s3p, "z3": z3,
        "out": out,
    }
    if tangent:
        b = [(1.0 - ai**2) * (mi * r) for ai, mi in zip(a, model.m)]
        d0 = b[0] * gnu
        e1 = d0 * p
        d1 = d0 + b[1] * s1 + a[1] * s1p * e1
        e2 = d1 @ model.w[1].T
        d2 = d1 + b[2] * s2 + a[2] * s2p * e2
        e3 = d2 @ model.w[2].T
        d3 = d2 + b[3] * s3 + a[3] * s3p * e3
        g.update(
            b=b, d0=d0, e1=e1, d1=d1, e2=e2, d2=d2, e3=e3, d3=d3,
            deriv=d3 @ model.w_out.T,
        )
    return g


def forward(model: NifmModel, x, t, tau) -> Array:
    """Predicted flow-map endpoint; exactly x when tau == 0."""
    xb, tb, taub, single = _as_batch(x, t, tau)
    out = graph_forward(model, xb, tb, taub, tangent=False)["out"]
    return out[0] if single else out


def tau_derivative(model: NifmModel, x, t, tau) -> Array:
    """Exact d(endpoint)/d(span) in physical velocity units, by forward-mode
    propagation of the span tangent (not finite differences)."""
    xb, tb, taub, single = _as_batch(x, t, tau)
    deriv = graph_forward(model, xb, tb, taub, tangent=True)["deriv"]
    return deriv[0] if single else deriv


def instantaneous_velocity(model: NifmModel, x, t) -> Array:
    """Closed-form zero-span derivative W_out (m0 * g_nu(x,t)), rescaled to
    physical velocity units. Reads nothing outside the g_nu stack, m0, W_out."""
    xb, tb, single = _as_batch(x, t)
    g, _ = _encode(model.f_nu, normalized_coords(model, xb, tb))
    v = ((model.m[0] * g) @ model.w_out.T) / model.tau_max
    return v[0] if single else v


def forward_multi_step(model: NifmModel, x, t, tau, k: int) -> Array:
    """Compose k forward steps of span tau/k, advancing time each step.

    Intermediate positions are clamped into the domain; the final output is
    returned unclamped.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    xb, tb, taub, single = _as_batch(x, t, tau)
    step = taub / k
    pos = graph_forward(model, xb, tb, step, tangent=False)["out"]
    for i in range(1, k):
        pos = model.domain.clamp_x(pos)
        pos = graph_forward(model, pos, tb + i * step, step, tangent=False)["out"]
    return pos[0] if single else pos
