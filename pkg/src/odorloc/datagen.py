"""Noisy sensor observations and the supervised offset-regression dataset."""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .grid_pde import (SimConfig, locate_cell, make_config, peak_concentration,
                       response_bank, sensor_weights, simulate)

log = logging.getLogger(__name__)

N_READINGS = 600
N_FEATURES = N_READINGS + 2
LENGTH_SCALE = 1e6          # meters -> micrometers for training
INTERIOR_FRAC = 0.8


class DegenerateSplitWarning(UserWarning):
    pass


@dataclass
class SensorTrace:
    """Readings at one or more sensors; ``readings[t, s]`` pairs ``times[t]`` with ``sensors[s]``."""

    sensors: np.ndarray
    times: np.ndarray
    readings: np.ndarray
    clean: np.ndarray
    noise_sigma: float
    rng_seed: int | None
    config: SimConfig

    def __post_init__(self):
        self.sensors = np.atleast_2d(np.asarray(self.sensors, dtype=float))
        self.times = np.asarray(self.times, dtype=float)
        self.readings = np.asarray(self.readings, dtype=float).reshape(len(self.times), len(self.sensors))
        self.clean = np.asarray(self.clean, dtype=float).reshape(self.readings.shape)
        if self.times.size > 1 and not (np.diff(self.times) > 0).all():
            raise ValueError("trace times must be strictly increasing")
        if self.readings.shape[1] != len(self.sensors):
            raise ValueError("readings do not match the number of sensors")

    @property
    def truth(self) -> tuple[float, float]:
        return self.config.source_pos

    def __len__(self):
        return len(self.times)

    def single(self, s: int = 0) -> "SensorTrace":
        """Trace restricted to sensor ``s``."""
        return SensorTrace(self.sensors[s:s + 1], self.times, self.readings[:, s:s + 1],
                           self.clean[:, s:s + 1], self.noise_sigma, self.rng_seed, self.config)


def uniform_times(total_time: float, n: int = N_READINGS) -> np.ndarray:
    """``n`` evenly spaced sample times ending at ``total_time`` (t=0 is omitted: it is always zero)."""
    return total_time * np.arange(1, n + 1) / n


def noise_sigma(field_max: float, cfg: SimConfig) -> float:
    return cfg.noise_sigma_frac * field_max


def observe(cfg: SimConfig, sensor_pos, sample_times, seed: int | None = 0) -> SensorTrace:
    """Simulate once and record noisy readings at ``sensor_pos``.

    The noise is i.i.d. Gaussian with standard deviation
    ``noise_sigma_frac`` times the largest clean concentration anywhere in the
    field over the run.
    """
    sample_times = np.asarray(sample_times, dtype=float)
    if sample_times.size and (sample_times.min() < 0 or sample_times.max() > cfg.total_time):
        raise ValueError("sample_times must lie within [0, total_time]")
    sensor_weights(sensor_pos, cfg)  # raises for sensors outside the domain
    rec = simulate(cfg, sensors=sensor_pos, sample_times=sample_times)
    sigma = noise_sigma(rec.field_max, cfg)
    rng = np.random.default_rng(seed)
    noisy = rec.readings + sigma * rng.standard_normal(rec.readings.shape)
    return SensorTrace(np.atleast_2d(sensor_pos), sample_times, noisy, rec.readings,
                       sigma, seed, cfg)


# ---------------------------------------------------------------------------
# supervised dataset

@dataclass
class DatasetSample:
    features: np.ndarray
    label: np.ndarray
    source: tuple[float, float]
    sensor: tuple[float, float]
    seed: int


@dataclass
class Dataset:
    """Column-stacked samples; indexing yields :class:`DatasetSample`."""

    features: np.ndarray          # (n, 602): 600 readings then (u_x, u_y) in m/s
    labels: np.ndarray            # (n, 2): source - sensor, meters
    sources: np.ndarray           # (n, 2)
    sensors: np.ndarray           # (n, 2)
    seeds: np.ndarray             # (n,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[1] != N_FEATURES:
            raise ValueError(f"features must be (n, {N_FEATURES}), got {self.features.shape}")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, k) -> DatasetSample:
        return DatasetSample(self.features[k], self.labels[k], tuple(self.sources[k]),
                             tuple(self.sensors[k]), int(self.seeds[k]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.features[idx], self.labels[idx], self.sources[idx],
                       self.sensors[idx], self.seeds[idx], dict(self.meta))


def dataset_config(**overrides) -> SimConfig:
    """Simulation settings for training traces: a 0.5 s pulse watched for 1 s.

    The window spans about one diffusion time across the channel, so each
    trace shows the arrival, the plateau and the washout.
    """
    params = {"total_time": 1.0, "injection_duration": 0.5}
    params.update(overrides)
    return make_config(params)


def interior_sampler(cfg: SimConfig, frac: float = INTERIOR_FRAC) -> Callable:
    lx, ly = cfg.domain_size
    lo = (1 - frac) / 2

    def draw(rng: np.random.Generator) -> tuple[float, float]:
        u = rng.random(2)
        return (lx * (lo + frac * u[0]), ly * (lo + frac * u[1]))

    return draw


def wind_levels(wind_range, n_levels: int) -> np.ndarray:
    (ux_lo, ux_hi), _ = wind_range
    if n_levels <= 1 or ux_hi == ux_lo:
        return np.array([ux_lo])
    return np.linspace(ux_lo, ux_hi, n_levels)


def _quantize(v: float, lo: float, hi: float, n_levels: int) -> float:
    if n_levels <= 1 or hi == lo:
        return lo
    k = int(round((v - lo) / (hi - lo) * (n_levels - 1)))
    return lo + (hi - lo) * k / (n_levels - 1)


def _draw_sample(rng: np.random.Generator, source_sampler, wind_range, n_levels):
    """Fixed draw order per sample: source, wind, then noise (drawn by the caller)."""
    source = source_sampler(rng)
    (ux_lo, ux_hi), (uy_lo, uy_hi) = wind_range
    w = rng.random(2)
    ux = _quantize(ux_lo + (ux_hi - ux_lo) * w[0], ux_lo, ux_hi, n_levels)
    uy = _quantize(uy_lo + (uy_hi - uy_lo) * w[1], uy_lo, uy_hi, n_levels)
    return source, (ux, uy)


def build_dataset(n: int, sensor_pos=(2e-6, 3e-6), wind_range=((0.0, 1e-6), (0.0, 0.0)),
                  source_sampler: Callable | None = None, seed: int = 0,
                  cfg: SimConfig | None = None, n_levels: int = 21,
                  method: str = "bank") -> Dataset:
    """Generate ``n`` (trace, wind) -> offset samples.

    Each sample draws a source (interior 80% of the domain by default) and a
    wind vector, simulates, keeps :data:`N_READINGS` uniformly spaced noisy
    readings at ``sensor_pos`` and appends the wind.  The wind is snapped to
    ``n_levels`` evenly spaced values per axis so that ``method="bank"`` can
    serve every source with one adjoint sweep per wind level; the snapped
    value is what the sample is simulated with and what its features record.
    ``method="direct"`` runs one forward simulation per sample and gives the
    same numbers to rounding.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    cfg = cfg or dataset_config()
    source_sampler = source_sampler or interior_sampler(cfg)
    sensor = (float(sensor_pos[0]), float(sensor_pos[1]))
    sensor_weights([sensor], cfg)
    times = uniform_times(cfg.total_time)

    draws = []
    for k in range(n):
        rng = np.random.default_rng([seed, k])
        source, wind = _draw_sample(rng, source_sampler, wind_range, n_levels)
        noise = rng.standard_normal(N_READINGS)
        draws.append((source, wind, noise))

    clean = np.empty((n, N_READINGS))
    peaks = np.empty(n)
    if method == "bank":
        by_wind: dict[tuple, list[int]] = {}
        for k, (_, wind, _) in enumerate(draws):
            by_wind.setdefault(wind, []).append(k)
        for wind, ks in sorted(by_wind.items()):
            wcfg = cfg.replace(flow=wind)
            bank = response_bank(wcfg, [sensor], times)[:, 0]
            peak = peak_concentration(wcfg)
            for k in ks:
                cell = locate_cell(draws[k][0], wcfg)
                clean[k] = bank[:, cell[0], cell[1]]
                peaks[k] = peak[cell]
    elif method == "direct":
        for k, (source, wind, _) in enumerate(draws):
            rec = simulate(cfg.replace(flow=wind, source_pos=source), sensors=[sensor],
                           sample_times=times)
            clean[k] = rec.readings[:, 0]
            peaks[k] = rec.field_max
    else:
        raise ValueError(f"unknown method {method!r}")

    sigma = cfg.noise_sigma_frac * peaks
    noise = np.stack([d[2] for d in draws])
    readings = clean + sigma[:, None] * noise
    winds = np.array([d[1] for d in draws])
    sources = np.array([d[0] for d in draws])
    features = np.hstack([readings, winds])
    labels = sources - np.asarray(sensor)
    meta = {"master_seed": seed, "sensor": list(sensor), "n_levels": n_levels,
            "wind_range": [list(r) for r in wind_range], "total_time": cfg.total_time,
            "injection_duration": cfg.injection_duration}
    return Dataset(features, labels, sources, np.tile(sensor, (n, 1)),
                   np.full(n, seed, dtype=np.int64), meta)


def trace_features(trace: SensorTrace, sensor: int = 0) -> np.ndarray:
    """602-wide feature vector from a trace: down-sampled readings plus wind."""
    z = trace.readings[:, sensor]
    if len(z) != N_READINGS:
        idx = np.linspace(0, len(z) - 1, N_READINGS)
        if len(z) < N_READINGS or not np.allclose(idx, np.round(idx)):
            raise ValueError(f"trace with {len(z)} readings cannot be down-sampled to "
                             f"{N_READINGS} by a uniform stride")
        z = z[np.round(idx).astype(int)]
    return np.concatenate([z, trace.config.flow])


def split(dataset: Dataset, train_frac: float = 0.8, seed: int = 0):
    """Deterministic shuffled split into (train, test).

    The test part gets ``floor((1 - train_frac) * n)`` samples and the train
    part the rest, so a single sample always lands in train.
    """
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must be in (0, 1)")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    n_test = int(math.floor((1 - train_frac) * n + 1e-9))
    if n_test == 0 or n_test == n:
        warnings.warn(f"degenerate split of {n} samples: test part has {n_test}",
                      DegenerateSplitWarning, stacklevel=2)
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(perm[n_test:]), dataset.subset(perm[:n_test])


# ---------------------------------------------------------------------------
# normalisation

@dataclass
class Normalizer:
    """Feature/label scaling: concentrations by a dataset max, lengths and speeds in micrometers."""

    conc_scale: float
    length_scale: float = LENGTH_SCALE

    @classmethod
    def fit(cls, dataset: Dataset) -> "Normalizer":
        peak = float(np.abs(dataset.features[:, :N_READINGS]).max())
        return cls(conc_scale=peak if peak > 0 else 1.0)

    def features(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = x.copy()
        out[..., :N_READINGS] /= self.conc_scale
        out[..., N_READINGS:] *= self.length_scale
        return out

    def features_inverse(self, x: np.ndarray) -> np.ndarray:
        out = np.array(x, dtype=float)
        out[..., :N_READINGS] *= self.conc_scale
        out[..., N_READINGS:] /= self.length_scale
        return out

    def labels(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) * self.length_scale

    def labels_inverse(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) / self.length_scale

    def to_dict(self) -> dict:
        return {"conc_scale": self.conc_scale, "length_scale": self.length_scale}


# ---------------------------------------------------------------------------
# persistence

def save_dataset(dataset: Dataset, path, normalizer: Normalizer | None = None) -> Path:
    """CSV with feature, label and meta columns plus a ``.json`` sidecar."""
    path = Path(path)
    cols = ([f"f{i}" for i in range(N_FEATURES)] + ["label_dx", "label_dy"]
            + ["source_x", "source_y", "sensor_x", "sensor_y", "seed"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for k in range(len(dataset)):
            row = [repr(float(v)) for v in dataset.features[k]]
            row += [repr(float(v)) for v in dataset.labels[k]]
            row += [repr(float(v)) for v in (*dataset.sources[k], *dataset.sensors[k])]
            row.append(str(int(dataset.seeds[k])))
            w.writerow(row)
    normalizer = normalizer or Normalizer.fit(dataset)
    sidecar = {"normalization": normalizer.to_dict(), **dataset.meta}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    return path


def load_dataset(path) -> tuple[Dataset, Normalizer]:
    path = Path(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    norm = Normalizer(**sidecar.pop("normalization"))
    f = N_FEATURES
    ds = Dataset(data[:, :f], data[:, f:f + 2], data[:, f + 2:f + 4], data[:, f + 4:f + 6],
                 data[:, f + 6].astype(np.int64), sidecar)
    return ds, norm
