"""Reference numerical integration: Euler and classical RK4.

Ground truth for training ablations and every evaluation. Integrations are
batched with per-sample time spans: all particles advance together, finished
ones take zero-length sub-steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .binio import expect_payload_size, read_payload_file, write_payload_file
from .errors import FormatError, NonFiniteError
from .fields import Domain, VectorField, sample

Array = np.ndarray

FMS_MAGIC = "nifm-fms"
FMS_VERSION = 1

SCHEMES = ("euler", "rk4")


@dataclass(frozen=True)
class IntegratorSpec:
    """Fixed-step scheme; h is a physical time step (conventionally half the
    temporal voxel size of the field under study)."""

    scheme: str = "rk4"
    h: float = 1e-2

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not self.h > 0:
            raise ValueError(f"step size must be positive, got {self.h}")


@dataclass(frozen=True)
class FlowQuery:
    """(start position, start time, signed time span) — possibly batched.

    x is (n,) or (B, n); t and tau broadcast against the batch.
    """

    x: Array
    t: Array | float
    tau: Array | float

    def batched(self, n: int) -> tuple[Array, Array, Array]:
        x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        if x.shape[-1] != n:
            raise ValueError(f"query position has {x.shape[-1]} components, field has {n}")
        t = np.broadcast_to(np.asarray(self.t, dtype=np.float64), x.shape[:1]).copy()
        tau = np.broadcast_to(np.asarray(self.tau, dtype=np.float64), x.shape[:1]).copy()
        return x, t, tau

    @property
    def is_single(self) -> bool:
        return np.asarray(self.x).ndim == 1


@dataclass
class Polyline:
    """Ordered (position, time) vertices of a pathline or streakline."""

    positions: Array  # (M, n)
    times: Array  # (M,)

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass
class FlowMapSampleSet:
    """Ground-truth records: query (x, t, tau), endpoint, and end velocity."""

    x: Array  # (B, n)
    t: Array  # (B,)
    tau: Array  # (B,)
    end: Array  # (B, n)
    vel: Array  # (B, n)

    @property
    def count(self) -> int:
        return self.x.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[1]


def _substep_counts(tau: Array, h: float) -> Array:
    counts = np.ceil(np.abs(tau) / h).astype(np.int64)
    return np.where(tau == 0.0, 0, np.maximum(counts, 1))


def integrate(src: VectorField, q: FlowQuery, spec: IntegratorSpec) -> Array:
    """Advance q.x from q.t over q.tau; returns endpoints with q.x's shape.

    Sub-steps have length h except the final one, shortened to land exactly
    on t + tau. Field evaluations clamp to the domain; the particle state
    itself is not clamped.
    """
    x, t0, tau = q.batched(src.n)
    end = _advance(src, x, t0, tau, spec)
    return end[0] if q.is_single else end.reshape(np.asarray(q.x).shape)


def _advance(src: VectorField, x: Array, t0: Array, tau: Array, spec: IntegratorSpec) -> Array:
    counts = _substep_counts(tau, spec.h)
    total = int(counts.max()) if counts.size else 0
    sgn_h = np.where(tau < 0, -spec.h, spec.h)
    x = x.copy()
    for j in range(total):
        hj = np.where(
            j < counts - 1, sgn_h, np.where(j == counts - 1, tau - (counts - 1) * sgn_h, 0.0)
        )
        tj = np.where(j < counts, t0 + j * sgn_h, t0 + tau)
        if spec.scheme == "euler":
            x = x + hj[:, None] * sample(src, x, tj)
        else:
            half = 0.5 * hj
            k1 = sample(src, x, tj)
            k2 = sample(src, x + half[:, None] * k1, tj + half)
            k3 = sample(src, x + half[:, None] * k2, tj + half)
            k4 = sample(src, x + hj[:, None] * k3, tj + hj)
            x = x + (hj / 6.0)[:, None] * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(np.sum(x)):
            bad = np.where(~np.isfinite(x).all(axis=1))[0][0]
            raise NonFiniteError(
                f"non-finite state at sub-step {j + 1} for particle {bad} "
                f"(start {np.asarray(t0).reshape(-1)[bad]:.6g}, span {tau[bad]:.6g})"
            )
    return x


def pathline(
    src: VectorField, q: FlowQuery, spec: IntegratorSpec, record_every: int = 1
) -> Polyline:
    """Trajectory of a single particle, recording every record_every-th
    sub-step plus both endpoints."""
    if not q.is_single:
        raise ValueError("pathline expects a single-particle query")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    x, t0, tau = q.batched(src.n)
    count = int(_substep_counts(tau, spec.h)[0])
    if count == 0:
        return Polyline(x.copy(), np.asarray([float(t0[0])]))

    sgn_h = spec.h if tau[0] >= 0 else -spec.h
    verts = [x[0].copy()]
    times = [float(t0[0])]
    cur = x
    for j in range(count):
        # Same per-sub-step arithmetic as a direct integrate() call.
        hj = sgn_h if j < count - 1 else float(tau[0]) - (count - 1) * sgn_h
        tj = t0 + j * sgn_h
        cur = _advance(src, cur, tj, np.asarray([hj]), spec)
        done = j + 1
        if done == count or done % record_every == 0:
            verts.append(cur[0].copy())
            times.append(float(t0[0] + tau[0]) if done == count else float(t0[0] + done * sgn_h))
    return Polyline(np.asarray(verts), np.asarray(times))


def reference_streakline(
    src: VectorField,
    seed: Array,
    releases: Array,
    t_obs: float,
    spec: IntegratorSpec,
) -> Polyline:
    """Positions at t_obs of particles released from `seed` at each release
    time; vertices ordered by release time (a release at t_obs is the seed)."""
    releases = np.sort(np.asarray(releases, dtype=np.float64))
    if releases.size and releases[-1] > t_obs:
        raise ValueError(f"release time {releases[-1]} is after observation time {t_obs}")
    seeds = np.broadcast_to(np.asarray(seed, dtype=np.float64), (releases.size, src.n)).copy()
    ends = _advance(src, seeds, releases.copy(), t_obs - releases, spec)
    return Polyline(ends, releases)


def sample_flow_map_dataset(
    src: VectorField,
    count: int,
    tau_range: tuple[float, float],
    spec: IntegratorSpec,
    seed: int,
    fit_time_span: bool = False,
) -> FlowMapSampleSet:
    """Ground-truth flow-map samples at uniform-random queries.

    Starts are uniform over the domain, spans uniform over tau_range
    (physical units). With fit_time_span, start times are drawn from
    [t_lo, t_hi - tau] so t + tau stays inside the time domain. Philox keeps
    generation deterministic (and splittable) under a fixed seed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = tau_range
    if lo > hi:
        raise ValueError(f"empty tau range [{lo}, {hi}]")
    rng = np.random.Generator(np.random.Philox(seed))
    dom = src.domain
    x = rng.uniform(dom.lo_arr, dom.hi_arr, size=(count, src.n))
    tau = rng.uniform(lo, hi, size=count)
    t_hi = np.maximum(dom.t_hi - tau, dom.t_lo) if fit_time_span else dom.t_hi
    t = rng.uniform(dom.t_lo, t_hi, size=count)
    end = _advance(src, x, t, tau, spec)
    vel = sample(src, end, t + tau)
    return FlowMapSampleSet(x, t, tau, end, vel)


def save_samples(samples: FlowMapSampleSet, path: str) -> None:
    header = {
        "magic": FMS_MAGIC,
        "version": FMS_VERSION,
        "n": samples.n,
        "count": samples.count,
    }
    records = np.concatenate(
        [samples.x, samples.t[:, None], samples.tau[:, None], samples.end, samples.vel], axis=1
    )
    write_payload_file(path, header, records.reshape(-1))


def load_samples(path: str) -> FlowMapSampleSet:
    header, payload = read_payload_file(path, FMS_MAGIC, FMS_VERSION)
    try:
        n = int(header["n"])
        count = int(header["count"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: incomplete sample-set header: {exc}") from exc
    width = 3 * n + 2
    expect_payload_size(path, payload, count * width)
    rec = payload.reshape(count, width)
    return FlowMapSampleSet(
        x=rec[:, :n],
        t=rec[:, n],
        tau=rec[:, n + 1],
        end=rec[:, n + 2 : 2 * n + 2],
        vel=rec[:, 2 * n + 2 :],
    )


def default_spec(domain: Domain, dims_t: int, scheme: str = "rk4") -> IntegratorSpec:
    """Step size set to half the temporal voxel size of the field."""
    voxel = (domain.t_hi - domain.t_lo) / (dims_t - 1)
    return IntegratorSpec(scheme=scheme, h=0.5 * voxel)
