"""Likelihood-based localization: grid-search MAP and an extended Kalman filter.

Both methods evaluate the forward model for many candidate sources.  The
solver is linear in the source, so the readings for every candidate cell are
obtained at once from :func:`grid_pde.response_bank` and cached per
(configuration, sensors, sample times).
"""
from __future__ import annotations

import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .datagen import SensorTrace
from .estimate import SourceEstimate
from .grid_pde import (SimConfig, forward_concentration, locate_cell, response_bank,
                       sensor_weights, write_pgm)

log = logging.getLogger(__name__)

PROCESS_VAR = (1e-8) ** 2
INIT_STD = 2.5e-6
REPAIR_FLOOR = 1e-18

_BANKS: OrderedDict = OrderedDict()
_BANK_CACHE_SIZE = 8


class FilterDivergence(FloatingPointError):
    pass


def cached_bank(cfg: SimConfig, sensors, times) -> np.ndarray:
    """:func:`response_bank` memoised on its arguments (shape (T, S, nx, ny))."""
    sensors = np.atleast_2d(np.asarray(sensors, dtype=float))
    times = np.asarray(times, dtype=float)
    key = (cfg, sensors.tobytes(), sensors.shape, times.tobytes())
    if key in _BANKS:
        _BANKS.move_to_end(key)
        return _BANKS[key]
    bank = response_bank(cfg, sensors, times)
    bank.setflags(write=False)
    _BANKS[key] = bank
    while len(_BANKS) > _BANK_CACHE_SIZE:
        _BANKS.popitem(last=False)
    return bank


def _sigma(trace: SensorTrace, sigma: float | None) -> float:
    s = trace.noise_sigma if sigma is None else sigma
    if not s > 0:
        raise ValueError(f"noise standard deviation must be positive, got {s}")
    return float(s)


def log_likelihood(candidate, trace: SensorTrace, cfg: SimConfig | None = None,
                   sigma: float | None = None) -> float:
    """Gaussian log-likelihood of the trace for one candidate source, without the constant.

    This runs a full forward solve; :func:`map_estimate` uses the cached
    response bank instead.
    """
    cfg = cfg or trace.config
    sigma = _sigma(trace, sigma)
    pred = forward_concentration(candidate, trace.sensors, cfg, trace.times)
    r = trace.readings - pred
    return float(-np.sum(r * r) / (2.0 * sigma**2))


# ---------------------------------------------------------------------------
# MAP

@dataclass
class Posterior:
    """Normalised posterior on an ``nc x nc`` candidate grid; ``log_post[i, j]`` pairs ``xs[i], ys[j]``."""

    xs: np.ndarray
    ys: np.ndarray
    log_post: np.ndarray
    log_norm: float
    tie_count: int = 1

    @property
    def prob(self) -> np.ndarray:
        return np.exp(self.log_post)

    def argmax(self) -> tuple[int, int]:
        """Index of the maximum; ties go to the lowest row-major index."""
        k = int(np.argmax(self.log_post))  # numpy returns the first occurrence
        return divmod(k, self.log_post.shape[1])

    def position(self, idx=None) -> tuple[float, float]:
        i, j = self.argmax() if idx is None else idx
        return float(self.xs[i]), float(self.ys[j])


def candidate_grid(cfg: SimConfig, nc: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Centers of an ``nc x nc`` partition of the domain (the solver cells by default)."""
    nx, ny = cfg.grid
    ncx, ncy = (nx, ny) if nc is None else (nc, nc)
    lx, ly = cfg.domain_size
    return (np.arange(ncx) + 0.5) * lx / ncx, (np.arange(ncy) + 0.5) * ly / ncy


def normalize_log(ll: np.ndarray) -> tuple[np.ndarray, float]:
    """Shift log values so that their exponentials sum to one; returns ``(log_post, log_norm)``."""
    m = ll.max()
    log_norm = float(m + np.log(np.exp(ll - m).sum()))
    return ll - log_norm, log_norm


def grid_log_likelihood(trace: SensorTrace, cfg: SimConfig | None = None, nc: int | None = None,
                        sigma: float | None = None):
    """Log-likelihood of every candidate on the grid, from the cached bank."""
    cfg = cfg or trace.config
    sigma = _sigma(trace, sigma)
    xs, ys = candidate_grid(cfg, nc)
    bank = cached_bank(cfg, trace.sensors, trace.times)
    ci = np.array([locate_cell((x, ys[0]), cfg)[0] for x in xs])
    cj = np.array([locate_cell((xs[0], y), cfg)[1] for y in ys])
    pred = bank[:, :, ci][:, :, :, cj]                     # (T, S, ncx, ncy)
    r = trace.readings[:, :, None, None] - pred
    ll = -np.einsum("tsij,tsij->ij", r, r) / (2.0 * sigma**2)
    return xs, ys, ll


def map_estimate(trace: SensorTrace, cfg: SimConfig | None = None, nc: int | None = None,
                 sigma: float | None = None):
    """Grid-search MAP under a uniform prior; returns ``(SourceEstimate, Posterior)``."""
    if nc is not None and nc < 2:
        raise ValueError("candidate resolution must be at least 2")
    if len(trace) == 0:
        raise ValueError("empty trace")
    cfg = cfg or trace.config
    t0 = time.perf_counter()
    xs, ys, ll = grid_log_likelihood(trace, cfg, nc, sigma)
    log_post, log_norm = normalize_log(ll)
    ties = int(np.count_nonzero(ll == ll.max()))
    post = Posterior(xs, ys, log_post, log_norm, ties)
    idx = post.argmax()
    elapsed = time.perf_counter() - t0
    flags = []
    if np.ptp(ll) <= 1e-12 * max(1.0, abs(float(ll.max()))):
        flags.append("uninformative data")
    est = SourceEstimate("MAP", post.position(idx), trace.truth, inference_time=elapsed,
                         flags=flags, info={"cell": list(idx), "ties": ties,
                                            "tie_break": "lowest index"})
    return est, post


def write_posterior_csv(post: Posterior, path) -> None:
    with open(path, "w") as fh:
        fh.write("x,y,log_posterior,posterior\n")
        for i, x in enumerate(post.xs):
            for j, y in enumerate(post.ys):
                lp = post.log_post[i, j]
                fh.write(f"{float(x)!r},{float(y)!r},{float(lp)!r},{float(np.exp(lp))!r}\n")


def write_posterior_pgm(post: Posterior, path) -> None:
    write_pgm(post.prob, path)


# ---------------------------------------------------------------------------
# extended Kalman filter

@dataclass
class FilterState:
    mean: np.ndarray
    cov: np.ndarray
    step: int = 0
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=float)
        n = self.mean.size
        if self.cov.shape != (n, n):
            raise ValueError(f"covariance shape {self.cov.shape} does not match state size {n}")
        if not np.allclose(self.cov, self.cov.T, rtol=0, atol=1e-12 * np.abs(self.cov).max()):
            raise ValueError("covariance is not symmetric")
        if np.linalg.eigvalsh(self.cov).min() <= 0:
            raise ValueError("covariance is not positive definite")


def initial_state(cfg: SimConfig, std: float = INIT_STD, mean=None) -> FilterState:
    lx, ly = cfg.domain_size
    mean = (lx / 2, ly / 2) if mean is None else mean
    return FilterState(np.asarray(mean, dtype=float), std**2 * np.eye(2))


def fd_jacobian(h: Callable, x: np.ndarray, step) -> np.ndarray:
    """Central-difference Jacobian of ``h`` (vector output) at ``x``."""
    x = np.asarray(x, dtype=float)
    step = np.broadcast_to(np.asarray(step, dtype=float), x.shape)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step[k]
        cols.append((np.atleast_1d(h(x + e)) - np.atleast_1d(h(x - e))) / (2.0 * step[k]))
    return np.stack(cols, axis=-1)


def kalman_update(state: FilterState, z, h: Callable, R, process_var: float = PROCESS_VAR,
                  fd_step=5e-8, jacobian: Callable | None = None) -> FilterState:
    """One static-state predict/correct step with measurement ``z ~ h(x) + noise(R)``.

    ``h`` maps a state to predicted readings; its Jacobian comes from
    ``jacobian`` when given, else from central differences with ``fd_step``.
    The covariance uses the Joseph form and is symmetrised; eigenvalues
    below 1e-18 are lifted to that floor and the repair is flagged.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if R.shape == (1, 1) and z.size > 1:
        R = R[0, 0] * np.eye(z.size)
    if not (np.linalg.eigvalsh(R).min() > 0):
        raise ValueError("measurement variance must be positive")
    flags = list(state.flags)
    n = state.mean.size
    x = state.mean
    P = state.cov + process_var * np.eye(n)
    H = np.atleast_2d(jacobian(x) if jacobian is not None else fd_jacobian(h, x, fd_step))
    if not np.all(np.isfinite(H)):
        raise FilterDivergence(f"non-finite measurement Jacobian at step {state.step + 1}")
    y = z - np.atleast_1d(h(x))
    S = H @ P @ H.T + R
    K = np.linalg.solve(S, H @ P).T          # P H^T S^-1 with S, P symmetric
    x_new = x + K @ y
    IKH = np.eye(n) - K @ H
    P_new = IKH @ P @ IKH.T + K @ R @ K.T
    P_new = 0.5 * (P_new + P_new.T)
    w, V = np.linalg.eigh(P_new)
    if w.min() < REPAIR_FLOOR:
        log.warning("covariance repaired at step %d (min eigenvalue %.3g)", state.step + 1, w.min())
        P_new = (V * np.maximum(w, REPAIR_FLOOR)) @ V.T
        P_new = 0.5 * (P_new + P_new.T)
        flags.append(f"covariance repaired at step {state.step + 1}")
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(P_new))):
        raise FilterDivergence(f"non-finite filter state at step {state.step + 1}")
    return FilterState(x_new, P_new, state.step + 1, flags)


def bank_model(bank_slice: np.ndarray, cfg: SimConfig) -> Callable:
    """Measurement function interpolating per-cell readings at a continuous source position.

    ``bank_slice`` is (S, nx, ny): readings of every sensor for a source in
    each cell.  Between cell centers the readings are interpolated
    bilinearly, which makes the model differentiable; positions outside the
    domain are clamped to it.
    """
    lx, ly = cfg.domain_size
    flat = bank_slice.reshape(bank_slice.shape[0], -1)

    def h(x):
        p = (min(max(x[0], 0.0), lx), min(max(x[1], 0.0), ly))
        w = sensor_weights([p], cfg)
        return np.asarray(w @ flat.T).reshape(-1)
    return h


def run_filter(trace: SensorTrace, cfg: SimConfig | None = None, init: FilterState | None = None,
               R: float | None = None, process_var: float = PROCESS_VAR, fd_step=None):
    """Fold :func:`kalman_update` over the trace, one sample time (all sensors) per step.

    Returns ``(SourceEstimate, trajectory)`` where the trajectory starts with
    the initial state.  The mean is kept inside the domain after each step.
    """
    if len(trace) == 0:
        raise ValueError("empty trace")
    cfg = cfg or trace.config
    R = _sigma(trace, None) ** 2 if R is None else R
    fd_step = 0.5 * np.array([cfg.dx, cfg.dy]) if fd_step is None else fd_step
    state = init or initial_state(cfg)
    lx, ly = cfg.domain_size
    t0 = time.perf_counter()
    bank = cached_bank(cfg, trace.sensors, trace.times)
    traj = [state]
    clipped = 0
    for k in range(len(trace)):
        h = bank_model(bank[k], cfg)
        state = kalman_update(state, trace.readings[k], h, R, process_var, fd_step)
        m = np.clip(state.mean, (0.0, 0.0), (lx, ly))
        if not np.array_equal(m, state.mean):
            clipped += 1
            state = FilterState(m, state.cov, state.step, state.flags)
        traj.append(state)
    elapsed = time.perf_counter() - t0
    flags = sorted(set(f.split(" at step")[0] for f in state.flags))
    if clipped:
        flags.append("mean clipped to domain")
    est = SourceEstimate("KF", tuple(state.mean), trace.truth, inference_time=elapsed,
                         flags=flags, info={"cov": state.cov.tolist(), "steps": state.step})
    return est, traj


def write_trajectory_csv(traj, path) -> None:
    with open(path, "w") as fh:
        fh.write("step,x,y,cov_xx,cov_xy,cov_yy\n")
        for s in traj:
            vals = (s.mean[0], s.mean[1], s.cov[0, 0], s.cov[0, 1], s.cov[1, 1])
            fh.write(f"{s.step}," + ",".join(repr(float(v)) for v in vals) + "\n")
