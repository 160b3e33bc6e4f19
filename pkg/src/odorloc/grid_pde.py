"""Explicit finite-difference solver for 2D advection-diffusion-reaction.

The grid is cell-centered: cell ``(i, j)`` covers ``[i*dx, (i+1)*dx) x
[j*dy, (j+1)*dy)`` and its value lives at the cell center.  Arrays are indexed
``values[i, j]`` with ``i`` along x.  Boundary conditions act through a ghost
layer just outside the domain (zero for Dirichlet, mirror for zero-flux).

The update is written in coefficient form::

    C'[i,j] = a0 C[i,j] + aW C[i-1,j] + aE C[i+1,j] + aS C[i,j-1] + aN C[i,j+1]

with diffusion by central differences, advection by first-order upwinding in
flux form, and decay ``-lambda C dt``.  Every coefficient is non-negative
when ``dt`` respects the stability bound with the default safety factor, so
the scheme is positivity-preserving in exact and in floating-point arithmetic.
"""
from __future__ import annotations

import dataclasses
import enum
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

DT_SAFETY = 0.5
_EPS_VEL = 1e-30


class ConfigError(ValueError):
    """Raised when a simulation configuration violates a physical bound."""


class InstabilityError(RuntimeError):
    """Raised when the solver produces non-finite values."""

    def __init__(self, step: int, time: float):
        super().__init__(f"non-finite concentration at step {step} (t={time:.6g} s)")
        self.step = step
        self.time = time


class Boundary(str, enum.Enum):
    DIRICHLET = "dirichlet"
    NEUMANN = "neumann"


@dataclass(frozen=True)
class SimConfig:
    """Full parameter set of one forward simulation, in SI units."""

    domain_size: tuple[float, float] = (1e-5, 1e-5)
    grid: tuple[int, int] = (50, 50)
    diffusion: float = 1e-10
    flow: tuple[float, float] = (0.5e-6, 0.0)
    degradation: float = 0.01
    emission: float = 1.0
    source_pos: tuple[float, float] = (5e-6, 5e-6)
    injection_duration: float = 10.0
    dt: float = 5e-5
    total_time: float = 27.5
    boundary: Boundary = Boundary.DIRICHLET
    noise_sigma_frac: float = 0.1

    def __post_init__(self):
        # normalise container types so configs hash and compare by value
        object.__setattr__(self, "domain_size", tuple(float(v) for v in self.domain_size))
        object.__setattr__(self, "grid", tuple(int(v) for v in self.grid))
        object.__setattr__(self, "flow", tuple(float(v) for v in self.flow))
        object.__setattr__(self, "source_pos", tuple(float(v) for v in self.source_pos))
        try:
            object.__setattr__(self, "boundary", Boundary(self.boundary))
        except ValueError:
            raise ConfigError(f"boundary must be one of {[b.value for b in Boundary]}, "
                              f"got {self.boundary!r}") from None
        validate(self)

    @property
    def dx(self) -> float:
        return self.domain_size[0] / self.grid[0]

    @property
    def dy(self) -> float:
        return self.domain_size[1] / self.grid[1]

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def n_steps(self) -> int:
        return steps_for(self.total_time, self.dt)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return 1D arrays of cell-center coordinates along x and y."""
        nx, ny = self.grid
        return (np.arange(nx) + 0.5) * self.dx, (np.arange(ny) + 0.5) * self.dy

    def source_cell(self) -> tuple[int, int]:
        return locate_cell(self.source_pos, self)

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


def stability_bound(domain_size, grid, diffusion, flow) -> float:
    """Largest admissible explicit time step."""
    dx = domain_size[0] / grid[0]
    dy = domain_size[1] / grid[1]
    diff = dx**2 * dy**2 / (2.0 * diffusion * (dx**2 + dy**2))
    adv_x = dx / max(abs(flow[0]), _EPS_VEL)
    adv_y = dy / max(abs(flow[1]), _EPS_VEL)
    return min(diff, adv_x, adv_y)


def validate(cfg: SimConfig) -> None:
    nx, ny = cfg.grid
    lx, ly = cfg.domain_size
    checks = [
        (nx >= 2 and ny >= 2, f"grid must be at least 2x2, got {cfg.grid}"),
        (lx > 0 and ly > 0, f"domain_size must be positive, got {cfg.domain_size}"),
        (cfg.diffusion > 0, f"diffusion D must be > 0, got {cfg.diffusion}"),
        (cfg.degradation >= 0, f"degradation lambda must be >= 0, got {cfg.degradation}"),
        (cfg.emission >= 0, f"emission Q must be >= 0, got {cfg.emission}"),
        (cfg.injection_duration >= 0,
         f"injection_duration T_inj must be >= 0, got {cfg.injection_duration}"),
        (cfg.dt > 0, f"dt must be > 0, got {cfg.dt}"),
        (cfg.total_time >= 0, f"total_time must be >= 0, got {cfg.total_time}"),
        (cfg.noise_sigma_frac >= 0,
         f"noise_sigma_frac must be >= 0, got {cfg.noise_sigma_frac}"),
        (all(math.isfinite(v) for v in (*cfg.flow, *cfg.source_pos)),
         "flow and source_pos must be finite"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    if not (0.0 <= cfg.source_pos[0] <= lx and 0.0 <= cfg.source_pos[1] <= ly):
        raise ConfigError(f"source_pos {cfg.source_pos} lies outside [0,{lx}]x[0,{ly}]")
    bound = stability_bound(cfg.domain_size, cfg.grid, cfg.diffusion, cfg.flow)
    if cfg.dt > bound * (1 + 1e-12):
        raise ConfigError(f"dt={cfg.dt:.3g} s exceeds the stability bound {bound:.3g} s")


_FIELDS = {f.name for f in dataclasses.fields(SimConfig)}


def make_config(overrides: dict | None = None, **kwargs) -> SimConfig:
    """Build a config from the defaults merged with ``overrides``.

    When ``dt`` is not given it is set to half the stability bound of the
    merged parameters.
    """
    params = dict(overrides or {})
    params.update(kwargs)
    unknown = set(params) - _FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if params.get("dt") is None:
        base = {f.name: f.default for f in dataclasses.fields(SimConfig)}
        base.update(params)
        try:
            bound = stability_bound(base["domain_size"], base["grid"],
                                    base["diffusion"], base["flow"])
        except (ZeroDivisionError, TypeError, ValueError):
            bound = float("nan")
        # an underivable bound means another parameter is invalid; a placeholder
        # dt lets validation report that parameter by name
        params["dt"] = DT_SAFETY * bound if bound > 0 else 1.0
    return SimConfig(**params)


def steps_for(t: float, dt: float) -> int:
    """Number of whole steps that reach time ``t``."""
    return int(math.floor(t / dt + 1e-9))


def locate_cell(pos, cfg: SimConfig) -> tuple[int, int]:
    """Index of the cell containing ``pos`` (the upper edge belongs to the last cell)."""
    nx, ny = cfg.grid
    i = min(int(math.floor(pos[0] / cfg.dx + 1e-9)), nx - 1)
    j = min(int(math.floor(pos[1] / cfg.dy + 1e-9)), ny - 1)
    return max(i, 0), max(j, 0)


@dataclass(frozen=True)
class ConcentrationField:
    values: np.ndarray
    config: SimConfig
    time: float = 0.0
    clamped: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.values.shape != tuple(self.config.grid):
            raise ValueError(f"field shape {self.values.shape} does not match grid "
                             f"{self.config.grid}")

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.config.cell_area)

    def centroid(self) -> tuple[float, float]:
        xs, ys = self.config.cell_centers()
        total = self.values.sum()
        return (float((self.values.sum(axis=1) * xs).sum() / total),
                float((self.values.sum(axis=0) * ys).sum() / total))

    def argmax_position(self) -> tuple[float, float]:
        i, j = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        xs, ys = self.config.cell_centers()
        return float(xs[i]), float(ys[j])

    def sample(self, positions) -> np.ndarray:
        return sensor_weights(positions, self.config) @ self.values.ravel()


def zero_field(cfg: SimConfig) -> ConcentrationField:
    return ConcentrationField(np.zeros(cfg.grid), cfg, 0.0)


# ---------------------------------------------------------------------------
# stencil

@dataclass(frozen=True)
class Stencil:
    center: np.ndarray
    west: np.ndarray   # weight of C[i-1, j]
    east: np.ndarray   # weight of C[i+1, j]
    south: np.ndarray  # weight of C[i, j-1]
    north: np.ndarray  # weight of C[i, j+1]


def _axis_coefficients(n: int, r: float, c_pos: float, c_neg: float, dirichlet: bool):
    """1D center/lower/upper coefficients along one axis (without the identity)."""
    lower = np.full(n, r + c_pos)   # inflow from i-1
    upper = np.full(n, r + c_neg)   # inflow from i+1
    center = np.full(n, -2.0 * r - c_pos - c_neg)
    lower[0] = upper[-1] = 0.0
    if not dirichlet:
        # zero-flux walls: no diffusive or advective exchange across the wall
        center[0] += r + c_neg
        center[-1] += r + c_pos
    return center, lower, upper


@lru_cache(maxsize=64)
def stencil(cfg: SimConfig) -> Stencil:
    nx, ny = cfg.grid
    dirichlet = cfg.boundary is Boundary.DIRICHLET
    rx = cfg.diffusion * cfg.dt / cfg.dx**2
    ry = cfg.diffusion * cfg.dt / cfg.dy**2
    ux, uy = cfg.flow
    cx_c, cx_w, cx_e = _axis_coefficients(nx, rx, max(ux, 0.0) * cfg.dt / cfg.dx,
                                          max(-ux, 0.0) * cfg.dt / cfg.dx, dirichlet)
    cy_c, cy_s, cy_n = _axis_coefficients(ny, ry, max(uy, 0.0) * cfg.dt / cfg.dy,
                                          max(-uy, 0.0) * cfg.dt / cfg.dy, dirichlet)
    center = 1.0 - cfg.degradation * cfg.dt + cx_c[:, None] + cy_c[None, :]
    ones = np.ones((nx, ny))
    st = Stencil(center=center, west=cx_w[:, None] * ones, east=cx_e[:, None] * ones,
                 south=cy_s[None, :] * ones, north=cy_n[None, :] * ones)
    for arr in dataclasses.astuple(st):
        arr.setflags(write=False)
    if center.min() < 0:
        log.warning("negative center coefficient %.3g: scheme is not positivity-preserving",
                    center.min())
    return st


def apply_stencil(c: np.ndarray, st: Stencil) -> np.ndarray:
    """Linear transport part of one step; works on arrays shaped (..., nx, ny)."""
    out = st.center * c
    out[..., 1:, :] += st.west[1:, :] * c[..., :-1, :]
    out[..., :-1, :] += st.east[:-1, :] * c[..., 1:, :]
    out[..., :, 1:] += st.south[:, 1:] * c[..., :, :-1]
    out[..., :, :-1] += st.north[:, :-1] * c[..., :, 1:]
    return out


@lru_cache(maxsize=16)
def transport_matrix(cfg: SimConfig) -> sp.csr_matrix:
    """Sparse matrix ``A`` with ``vec(C') = A vec(C)`` for the source-free step."""
    st = stencil(cfg)
    nx, ny = cfg.grid
    idx = np.arange(nx * ny).reshape(nx, ny)
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [st.center.ravel()]
    for weights, dst, src in (
        (st.west[1:, :], idx[1:, :], idx[:-1, :]),
        (st.east[:-1, :], idx[:-1, :], idx[1:, :]),
        (st.south[:, 1:], idx[:, 1:], idx[:, :-1]),
        (st.north[:, :-1], idx[:, :-1], idx[:, 1:]),
    ):
        rows.append(dst.ravel())
        cols.append(src.ravel())
        vals.append(weights.ravel())
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(nx * ny, nx * ny))


def injection_active(k: int, cfg: SimConfig) -> bool:
    """Whether step ``k`` (covering [k dt, (k+1) dt]) deposits source mass.

    The step midpoint is tested so a pulse of duration T_inj deposits
    exactly round(T_inj/dt) increments.
    """
    return k < _injection_steps(cfg)


def source_increment(cfg: SimConfig) -> float:
    return cfg.emission * cfg.dt / cfg.cell_area


def _clamp(values: np.ndarray) -> int:
    neg = values < 0
    n = int(np.count_nonzero(neg))
    if n:
        log.debug("clamping %d negative cells (min %.3g)", n, values.min())
        values[neg] = 0.0
    return n


def step(fld: ConcentrationField, cfg: SimConfig | None = None, t: float | None = None
         ) -> ConcentrationField:
    """Advance ``fld`` by one time step starting at time ``t``."""
    cfg = cfg or fld.config
    t = fld.time if t is None else t
    if fld.values.shape != tuple(cfg.grid):
        raise ValueError("field does not match config grid")
    k = int(round(t / cfg.dt))
    new = apply_stencil(fld.values, stencil(cfg))
    if injection_active(k, cfg):
        new[cfg.source_cell()] += source_increment(cfg)
    if not np.isfinite(new).all():
        raise InstabilityError(k, t)
    clamped = _clamp(new)
    return ConcentrationField(new, cfg, t + cfg.dt, fld.clamped + clamped)


# ---------------------------------------------------------------------------
# sensors

def sensor_weights(positions, cfg: SimConfig) -> sp.csr_matrix:
    """Bilinear interpolation weights mapping the flattened field to sensor readings.

    Between the outermost cell centers and the walls the ghost layer takes
    part: it holds zero for Dirichlet walls, so those weights are dropped, and
    mirrors the edge cell for zero-flux walls, so they fold back onto it.
    """
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    nx, ny = cfg.grid
    lx, ly = cfg.domain_size
    tol = 1e-12 * max(lx, ly)
    if (pos[:, 0] < -tol).any() or (pos[:, 0] > lx + tol).any() or \
            (pos[:, 1] < -tol).any() or (pos[:, 1] > ly + tol).any():
        raise ValueError(f"sensor position outside domain: {pos.tolist()}")
    dirichlet = cfg.boundary is Boundary.DIRICHLET
    rows, cols, vals = [], [], []
    for s, (x, y) in enumerate(pos):
        # padded index space: padded cell p sits at (p - 0.5) * dx
        fx = min(max(x / cfg.dx + 0.5, 0.0), nx + 1.0)
        fy = min(max(y / cfg.dy + 0.5, 0.0), ny + 1.0)
        px = min(int(math.floor(fx)), nx)
        py = min(int(math.floor(fy)), ny)
        tx, ty = fx - px, fy - py
        for qx, wx in ((px, 1 - tx), (px + 1, tx)):
            for qy, wy in ((py, 1 - ty), (py + 1, ty)):
                w = wx * wy
                if w == 0.0:
                    continue
                i, j = qx - 1, qy - 1
                ghost = not (0 <= i < nx and 0 <= j < ny)
                if ghost:
                    if dirichlet:
                        continue
                    i, j = min(max(i, 0), nx - 1), min(max(j, 0), ny - 1)
                rows.append(s)
                cols.append(i * ny + j)
                vals.append(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(pos), nx * ny))


# ---------------------------------------------------------------------------
# time integration

@dataclass
class SimulationRecord:
    final: ConcentrationField
    sample_times: np.ndarray
    readings: np.ndarray          # (n_times, n_sensors)
    snapshots: dict = field(default_factory=dict)
    field_max: float = 0.0        # max over all cells and all recorded/final times


def simulate(cfg: SimConfig, sensors=None, sample_times: Sequence[float] = (),
             snapshot_times: Iterable[float] = (), initial: ConcentrationField | None = None,
             ) -> SimulationRecord:
    """Integrate from ``initial`` (zero by default) to ``cfg.total_time``.

    Readings are taken at ``sample_times`` at every sensor; full fields at
    ``snapshot_times``.  ``field_max`` is the largest concentration reached in
    any cell over the run, which defines the noise scale.
    """
    fld = initial if initial is not None else zero_field(cfg)
    nx, ny = cfg.grid
    c = fld.values.ravel().copy()
    k0 = int(round(fld.time / cfg.dt))
    n_total = cfg.n_steps
    A = transport_matrix(cfg)
    positive = bool(stencil(cfg).center.min() >= 0)
    i_s, j_s = cfg.source_cell()
    src = i_s * ny + j_s
    q = source_increment(cfg)

    sample_times = np.asarray(sample_times, dtype=float)
    sample_steps = np.array([steps_for(t, cfg.dt) for t in sample_times], dtype=int)
    if sample_steps.size and (sample_steps.min() < k0 or sample_steps.max() > n_total):
        raise ValueError("sample times must lie within [start, total_time]")
    W = sensor_weights(sensors, cfg) if sensors is not None else None
    readings = np.zeros((sample_steps.size, W.shape[0] if W is not None else 0))
    snap_steps: dict[int, list[float]] = {}
    for t in snapshot_times:
        ks = steps_for(t, cfg.dt)
        if ks > n_total or ks < k0:
            log.warning("snapshot time %.4g s outside simulated interval; skipped", t)
            continue
        snap_steps.setdefault(ks, []).append(float(t))
    snapshots = {}
    order = np.argsort(sample_steps, kind="stable")
    ptr = 0
    clamped = fld.clamped
    fmax = float(c.max())

    def record(k):
        nonlocal ptr
        while ptr < order.size and sample_steps[order[ptr]] == k:
            readings[order[ptr]] = W @ c
            ptr += 1
        for t in snap_steps.get(k, ()):
            snapshots[t] = ConcentrationField(c.reshape(nx, ny).copy(), cfg, k * cfg.dt, clamped)

    record(k0)
    for k in range(k0, n_total):
        c = A @ c
        injecting = injection_active(k, cfg)
        if injecting:
            c[src] += q
        if not math.isfinite(c.sum()):
            raise InstabilityError(k, k * cfg.dt)
        if not positive and c.min() < 0:
            clamped += _clamp(c)
        if injecting or not positive:
            # rows of A sum to at most one, so without injection the max cannot grow
            fmax = max(fmax, float(c.max()))
        record(k + 1)
    final = ConcentrationField(c.reshape(nx, ny), cfg, n_total * cfg.dt, clamped)
    return SimulationRecord(final, sample_times, readings, snapshots, fmax)


def response_bank(cfg: SimConfig, sensors, sample_times: Sequence[float]) -> np.ndarray:
    """Readings for every possible source cell, via the adjoint (transposed) step.

    Returns an array shaped (n_times, n_sensors, nx, ny): entry ``[t, s, i, j]``
    is what :func:`simulate` would report at sensor ``s`` and time ``t`` with
    the source in cell ``(i, j)`` and a zero initial field.  One sweep of
    ``A^T`` per sensor replaces one forward solve per candidate; the two agree
    to rounding because the step is linear (no clamping occurs when the
    stencil is positivity-preserving).
    """
    nx, ny = cfg.grid
    if stencil(cfg).center.min() < 0:
        raise ValueError("response bank requires a positivity-preserving time step")
    steps = np.array([steps_for(t, cfg.dt) for t in sample_times], dtype=int)
    if steps.size and (steps.min() < 0 or steps.max() > cfg.n_steps):
        raise ValueError("sample times must lie within [0, total_time]")
    n_inj = _injection_steps(cfg)
    lo = steps - np.minimum(steps, n_inj)
    needed = np.union1d(steps, lo)
    AT = transport_matrix(cfg).T.tocsr()
    adj = sensor_weights(sensors, cfg).T.toarray()      # (n_cells, n_sensors)
    prefix = np.zeros_like(adj)
    stored = {}
    ptr = 0
    for j in range(int(needed.max(initial=0)) + 1):
        while ptr < needed.size and needed[ptr] == j:
            stored[j] = prefix.copy()
            ptr += 1
        if j == needed.max(initial=0):
            break
        prefix += adj
        adj = AT @ adj
    q = source_increment(cfg)
    out = np.stack([q * (stored[n] - stored[m]) for n, m in zip(steps, lo)]) if steps.size \
        else np.zeros((0, adj.shape[1], nx * ny))
    if steps.size:
        out = out.transpose(0, 2, 1)
    return out.reshape(len(steps), -1, nx, ny)


def _symmetric_spectrum(center, lower, upper):
    """Eigen-decomposition of a tridiagonal operator made symmetric by diagonal similarity.

    ``lower[i]`` weights entry ``i-1`` in row ``i`` and ``upper[i]`` weights
    entry ``i+1``.  The similarity leaves the diagonal of every matrix power
    unchanged, which is all :func:`peak_concentration` needs.
    """
    from scipy.linalg import eigh_tridiagonal

    off = np.sqrt(upper[:-1] * lower[1:])
    return eigh_tridiagonal(center, off)


def peak_concentration(cfg: SimConfig) -> np.ndarray:
    """Source-cell concentration at the end of injection, for every possible source cell.

    Entry ``[i, j]`` is the value ``simulate`` reaches in cell ``(i, j)`` after
    the pulse when the source sits in that cell.  The source cell holds the
    field maximum whenever diffusion dominates the cell-scale transport
    (cell Peclet number well below one), and the maximum principle of the
    scheme makes the end of injection the peak time.
    """
    st = stencil(cfg)
    nx, ny = cfg.grid
    if st.center.min() < 0:
        raise ValueError("peak_concentration requires a positivity-preserving time step")
    rx = cfg.diffusion * cfg.dt / cfg.dx**2
    ry = cfg.diffusion * cfg.dt / cfg.dy**2
    dirichlet = cfg.boundary is Boundary.DIRICHLET
    ux, uy = cfg.flow
    ax = _axis_coefficients(nx, rx, max(ux, 0.0) * cfg.dt / cfg.dx,
                            max(-ux, 0.0) * cfg.dt / cfg.dx, dirichlet)
    ay = _axis_coefficients(ny, ry, max(uy, 0.0) * cfg.dt / cfg.dy,
                            max(-uy, 0.0) * cfg.dt / cfg.dy, dirichlet)
    ex, vx = _symmetric_spectrum(*ax)
    ey, vy = _symmetric_spectrum(*ay)
    r = 1.0 - cfg.degradation * cfg.dt + ex[:, None] + ey[None, :]
    m = _injection_steps(cfg)
    with np.errstate(divide="ignore", invalid="ignore"):
        geo = np.where(np.abs(1.0 - r) > 1e-14, (1.0 - r**m) / (1.0 - r), float(m))
    return source_increment(cfg) * (vx**2) @ geo @ (vy**2).T


def _injection_steps(cfg: SimConfig) -> int:
    """Number of leading steps during which the source is active."""
    return max(0, int(math.floor(cfg.injection_duration / cfg.dt + 0.5 + 1e-9)))


def run_to_time(cfg: SimConfig, snapshot_times: Iterable[float] = (),
                initial: ConcentrationField | None = None):
    """Run to ``cfg.total_time``.

    Returns the final field, or ``(final, snapshots)`` when snapshot times are
    requested.
    """
    snapshot_times = list(snapshot_times)
    rec = simulate(cfg, snapshot_times=snapshot_times, initial=initial)
    if snapshot_times:
        return rec.final, rec.snapshots
    return rec.final


def forward_concentration(candidate, sensor_pos, cfg: SimConfig, times=None) -> np.ndarray:
    """Readings at ``sensor_pos`` for a source relocated to ``candidate``.

    Without ``times`` the final field is sampled and a vector (one value per
    sensor) is returned; otherwise an array shaped (len(times), n_sensors).
    """
    lx, ly = cfg.domain_size
    if not (0 <= candidate[0] <= lx and 0 <= candidate[1] <= ly):
        raise ValueError(f"candidate source {tuple(candidate)} outside domain")
    moved = cfg.replace(source_pos=tuple(candidate))
    if times is None:
        fld = simulate(moved).final
        return fld.sample(sensor_pos)
    return simulate(moved, sensors=sensor_pos, sample_times=times).readings


# ---------------------------------------------------------------------------
# file formats

def write_field_csv(fld: ConcentrationField, path) -> None:
    """Row-major CSV: a ``nx,ny,lx,ly,t`` header, its values, then one line per x index."""
    nx, ny = fld.config.grid
    lx, ly = fld.config.domain_size
    with open(path, "w") as fh:
        fh.write("nx,ny,lx,ly,t\n")
        fh.write(f"{nx},{ny},{lx!r},{ly!r},{float(fld.time)!r}\n")
        for row in fld.values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_field_csv(path) -> tuple[np.ndarray, dict]:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "nx,ny,lx,ly,t":
            raise ValueError(f"unexpected field CSV header {header!r}")
        nx, ny, lx, ly, t = fh.readline().strip().split(",")
        values = np.loadtxt(fh, delimiter=",", ndmin=2)
    meta = {"nx": int(nx), "ny": int(ny), "lx": float(lx), "ly": float(ly), "t": float(t)}
    if values.shape != (meta["nx"], meta["ny"]):
        raise ValueError(f"field CSV body has shape {values.shape}, header says "
                         f"({meta['nx']}, {meta['ny']})")
    return values, meta


def grayscale(values: np.ndarray) -> np.ndarray:
    """Linear 8-bit scaling with the maximum mapped to 255; an all-zero array stays zero."""
    values = np.asarray(values, dtype=float)
    vmax = values.max() if values.size else 0.0
    if not np.isfinite(vmax) or vmax <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.clip(np.rint(np.clip(values, 0, None) / vmax * 255.0), 0, 255).astype(np.uint8)


def write_pgm(values: np.ndarray, path) -> None:
    """Binary PGM heatmap of a grid indexed ``[i, j]``.

    Image columns follow x; rows follow y from top (largest y) to bottom, so
    cell ``(i, j)`` lands at pixel ``(row=ny-1-j, col=i)``.
    """
    img = grayscale(values).T[::-1]
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by :func:`write_pgm` back into image layout."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def pixel_to_cell(row: int, col: int, grid) -> tuple[int, int]:
    return col, grid[1] - 1 - row


def write_config(cfg: SimConfig, path) -> None:
    with open(path, "w") as fh:
        for f in dataclasses.fields(SimConfig):
            v = getattr(cfg, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x if isinstance(x, int) else float(x)) for x in v)
            elif isinstance(v, Boundary):
                v = v.value
            else:
                v = repr(v if isinstance(v, (int, str)) else float(v))
            fh.write(f"{f.name}={v}\n")


_TUPLE_KEYS = {"domain_size": float, "grid": int, "flow": float, "source_pos": float}


def parse_config_text(text: str) -> dict:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            if key in _TUPLE_KEYS:
                conv = _TUPLE_KEYS[key]
                items = [conv(float(x)) if conv is int else conv(x) for x in val.split(",")]
                if len(items) != 2:
                    raise ValueError("expected two comma-separated values")
                out[key] = tuple(items)
            elif key == "boundary":
                out[key] = val
            else:
                out[key] = float(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return out


def load_config(path, **extra) -> SimConfig:
    with open(path) as fh:
        params = parse_config_text(fh.read())
    params.update(extra)
    return make_config(params)
