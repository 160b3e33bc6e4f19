"""Experiment orchestration: scenarios, benchmark reports and figure export."""
from __future__ import annotations

import json
import logging
import platform
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import bayes, rl_agent
from .datagen import build_dataset, dataset_config, observe, split, uniform_times
from .estimate import SourceEstimate
from .estimators_nn import mlp_predict, train_mlp, train_pinn
from .grid_pde import SimConfig, locate_cell, make_config, run_to_time, write_field_csv, write_pgm

log = logging.getLogger(__name__)

MARKDOWN_HEADER = "| Method | Estimated Source | True Source | Error (m) |"
FIGURE_TIMES = (5.0, 10.0, 15.0, 27.5)
REFERENCE_SENSOR = (2e-6, 3e-6)
RL_SOURCE = (3e-6, 7e-6)


@dataclass
class Scenario:
    name: str
    config: SimConfig
    sensors: np.ndarray
    times: np.ndarray
    seed: int = 0
    methods: tuple[str, ...] = ("MAP", "KF", "PINN", "MLP")
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sensors = np.atleast_2d(np.asarray(self.sensors, dtype=float))
        self.times = np.asarray(self.times, dtype=float)
        self.methods = tuple(m.upper() for m in self.methods)
        unknown = [m for m in self.methods if m not in RUNNERS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; registered: {sorted(RUNNERS)}")
        unknown = [m for m in self.overrides if m.upper() not in RUNNERS]
        if unknown:
            raise ValueError(f"overrides for unknown methods {unknown}")

    @property
    def truth(self) -> tuple[float, float]:
        return self.config.source_pos

    def options(self, method: str) -> dict:
        return dict(self.overrides.get(method, self.overrides.get(method.lower(), {})))


def reference_scenario(seed: int = 0, cfg: SimConfig | None = None, methods=None, **overrides) -> Scenario:
    """Single sensor at (2, 3) um, 600 readings over a 1 s window, source at the center."""
    cfg = cfg or dataset_config()
    return Scenario("reference", cfg, [REFERENCE_SENSOR], uniform_times(cfg.total_time), seed,
                    tuple(methods or ("MAP", "KF", "PINN", "MLP")), overrides)


def rl_scenario(seed: int = 0, cfg: SimConfig | None = None, **overrides) -> Scenario:
    """Grid search task with the source at (3, 7) um; no sensor data is used."""
    cfg = (cfg or make_config()).replace(source_pos=RL_SOURCE)
    return Scenario("rl", cfg, np.zeros((0, 2)), np.zeros(0), seed, ("RL",), overrides)


# ---------------------------------------------------------------------------
# method runners: (scenario, trace, seed, cache) -> SourceEstimate

def _run_map(sc, trace, seed, cache):
    est, post = bayes.map_estimate(trace, sc.config, **sc.options("MAP"))
    cache.setdefault("posteriors", []).append(post)
    return est


def _run_kf(sc, trace, seed, cache):
    est, traj = bayes.run_filter(trace, sc.config, **sc.options("KF"))
    cache.setdefault("trajectories", []).append(traj)
    return est


def _run_pinn(sc, trace, seed, cache):
    model, est = train_pinn(trace, sc.config, seed=seed, **sc.options("PINN"))
    cache.setdefault("pinn_history", []).append(model.history)
    return est


MLP_TRAINING = {"epochs": 40, "batch_size": 64, "lr": 1e-3, "weight_decay": 0.3}


def train_standard_mlp(n_samples: int = 4000, sensor_pos=REFERENCE_SENSOR, cfg: SimConfig | None = None,
                       data_seed: int = 0, train_seed: int = 0, **opts):
    """Build the dataset, split it 80/20 into train/test and fit the MLP.

    A fifth of the training part is held out for early stopping, so the
    test part is never seen during training.  Returns
    ``(estimator, history, test_set, train_time)``.
    """
    t0 = time.perf_counter()
    ds = build_dataset(n_samples, sensor_pos=tuple(sensor_pos), seed=data_seed, cfg=cfg)
    train, test = split(ds, 0.8, seed=data_seed)
    fit, val = split(train, 0.8, seed=data_seed + 1)
    est, hist = train_mlp(fit, val, seed=train_seed, **{**MLP_TRAINING, **opts})
    return est, hist, test, time.perf_counter() - t0


def _run_mlp(sc, trace, seed, cache):
    if "mlp" not in cache:
        opts = sc.options("MLP")
        est, hist, _, train_time = train_standard_mlp(sensor_pos=sc.sensors[0], cfg=sc.config,
                                                      **opts)
        cache["mlp"], cache["mlp_history"], cache["mlp_train_time"] = est, hist, train_time
    est = mlp_predict(cache["mlp"], trace, wind=sc.config.flow)
    est.train_time = cache["mlp_train_time"]
    return est


def _run_rl(sc, trace, seed, cache):
    opts = sc.options("RL")
    episodes = opts.pop("episodes", 500)
    n = opts.pop("n", 10)
    start = opts.pop("start", (0, 0))
    env = rl_agent.GridEnv.from_source(sc.truth, n=n, domain_size=sc.config.domain_size)
    hyper = rl_agent.DqnConfig(**opts)
    net, tlog = rl_agent.train_dqn(env, episodes, seed=seed, hyper=hyper)
    _, est, _ = rl_agent.rollout(net, env, start=start)
    est.train_time = tlog.train_time
    est.flags += tlog.flags
    # the grid estimate is scored against the continuous source position
    est.truth = sc.truth
    cache.setdefault("rl_logs", []).append(tlog)
    return est


RUNNERS: dict[str, Callable] = {"MAP": _run_map, "KF": _run_kf, "PINN": _run_pinn,
                                "MLP": _run_mlp, "RL": _run_rl}


# ---------------------------------------------------------------------------
# reports

def fingerprint() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "machine": platform.machine(), "system": platform.system()}


@dataclass
class BenchmarkReport:
    scenario: str
    estimates: dict[str, list[SourceEstimate]] = field(default_factory=dict)
    failures: dict[str, list[str]] = field(default_factory=dict)
    environment: dict = field(default_factory=dict)

    @property
    def methods(self) -> list[str]:
        return sorted(set(self.estimates) | set(self.failures))

    def errors(self, method: str) -> list[float]:
        return [e.error for e in self.estimates.get(method, []) if e.error is not None]

    def median_error(self, method: str) -> float:
        errs = self.errors(method)
        return float(np.median(errs)) if errs else float("nan")

    def mean_error(self, method: str) -> float:
        errs = self.errors(method)
        return float(np.mean(errs)) if errs else float("nan")

    def mean_inference_time(self, method: str) -> float:
        ts = [e.inference_time for e in self.estimates.get(method, [])]
        return float(np.mean(ts)) if ts else float("nan")

    def representative(self, method: str) -> SourceEstimate | None:
        """The repetition whose error is the (lower) median."""
        ests = self.estimates.get(method, [])
        if not ests:
            return None
        order = sorted(range(len(ests)), key=lambda k: ests[k].error)
        return ests[order[(len(ests) - 1) // 2]]

    @property
    def partial(self) -> bool:
        return any(self.failures.values())

    def to_dict(self) -> dict:
        return {"scenario": self.scenario,
                "estimates": {m: [e.to_dict() for e in self.estimates[m]]
                              for m in sorted(self.estimates)},
                "failures": {m: list(self.failures[m]) for m in sorted(self.failures)},
                "environment": dict(self.environment),
                "summary": {m: {"median_error": self.median_error(m),
                                "mean_error": self.mean_error(m),
                                "mean_inference_time": self.mean_inference_time(m),
                                "repetitions": len(self.estimates.get(m, []))}
                            for m in self.methods}}

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkReport":
        return cls(d["scenario"],
                   {m: [SourceEstimate.from_dict(e) for e in v] for m, v in d["estimates"].items()},
                   {m: list(v) for m, v in d.get("failures", {}).items()},
                   dict(d.get("environment", {})))

    def merge(self, other: "BenchmarkReport") -> "BenchmarkReport":
        est = {**self.estimates, **other.estimates}
        fail = {**self.failures, **other.failures}
        return BenchmarkReport(f"{self.scenario}+{other.scenario}", est, fail,
                               self.environment or other.environment)


def run_scenario(scenario: Scenario, repetitions: int = 1, cache: dict | None = None) -> BenchmarkReport:
    """Run every method of ``scenario`` on shared data for each repetition.

    Repetition ``r`` uses noise seed ``scenario.seed + r``; all methods see
    the same trace.  A failing method is recorded in ``failures`` and the
    others carry on.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be positive")
    cache = {} if cache is None else cache
    report = BenchmarkReport(scenario.name, environment=fingerprint())
    for rep in range(repetitions):
        seed = scenario.seed + rep
        trace = None
        if scenario.sensors.size:
            trace = observe(scenario.config, scenario.sensors, scenario.times, seed=seed)
        for method in scenario.methods:
            try:
                est = RUNNERS[method](scenario, trace, seed, cache)
            except Exception as exc:  # isolate per-method failures
                log.exception("%s failed on repetition %d", method, rep)
                report.failures.setdefault(method, []).append(
                    f"rep {rep}: {type(exc).__name__}: {exc}")
                continue
            report.estimates.setdefault(method, []).append(est)
    return report


def _fmt_pos(p) -> str:
    return f"[{p[0]:.3e}, {p[1]:.3e}]"


def export_report(report: BenchmarkReport, path, fmt: str = "md") -> Path:
    """Write ``report`` as ``csv``, ``json`` or a markdown table (``md``)."""
    path = Path(path)
    fmt = {"markdown": "md", "markdown-table": "md"}.get(fmt, fmt)
    if fmt == "json":
        text = json.dumps(report.to_dict(), indent=2)
    elif fmt == "csv":
        lines = ["method,repetition,estimate_x,estimate_y,true_x,true_y,error_m,"
                 "inference_time_s,train_time_s,flags"]
        for m in report.methods:
            for k, e in enumerate(report.estimates.get(m, [])):
                t = e.truth or (float("nan"), float("nan"))
                lines.append(f"{m},{k},{e.position[0]!r},{e.position[1]!r},{t[0]!r},{t[1]!r},"
                             f"{e.error!r},{e.inference_time!r},{e.train_time!r},"
                             f"{';'.join(e.flags)}")
        text = "\n".join(lines) + "\n"
    elif fmt == "md":
        lines = [MARKDOWN_HEADER, "|---|---|---|---|"]
        for m in report.methods:
            e = report.representative(m)
            if e is None:
                continue
            lines.append(f"| {m} | {_fmt_pos(e.position)} | {_fmt_pos(e.truth)} | "
                         f"{report.median_error(m):.2e} |")
        text = "\n".join(lines) + "\n"
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path.write_text(text)
    return path


def load_report(path) -> BenchmarkReport:
    return BenchmarkReport.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# figures

def _marker_image(values: np.ndarray, cells, levels) -> np.ndarray:
    """Scale ``values`` into [0, 160] and stamp marker cells with brighter levels."""
    vmax = values.max() if values.size else 0.0
    img = np.zeros_like(values, dtype=float) if vmax <= 0 else np.clip(values, 0, None) / vmax * 160.0
    for (i, j), level in zip(cells, levels):
        img[i, j] = level
    return img


def emit_figures(out_dir, cfg: SimConfig | None = None, snapshot_times=FIGURE_TIMES,
                 posterior: bayes.Posterior | None = None,
                 estimates: list[SourceEstimate] | None = None,
                 grid_cfg: SimConfig | None = None) -> list[Path]:
    """Concentration snapshots, the posterior map and estimate overlays as PGM/CSV files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if cfg is not None and snapshot_times:
        valid = [t for t in snapshot_times if 0 <= t <= cfg.total_time]
        for t in sorted(set(snapshot_times) - set(valid)):
            warnings.warn(f"snapshot time {t} s outside [0, {cfg.total_time}] s; skipped")
        if valid:
            _, snaps = run_to_time(cfg, snapshot_times=valid)
            for t in valid:
                if t not in snaps:
                    warnings.warn(f"no snapshot recorded at {t} s; skipped")
                    continue
                csv, pgm = out / f"field_t{t:g}s.csv", out / f"field_t{t:g}s.pgm"
                write_field_csv(snaps[t], csv)
                write_pgm(snaps[t].values, pgm)
                written += [csv, pgm]
    if posterior is not None:
        p = out / "posterior.pgm"
        bayes.write_posterior_pgm(posterior, p)
        bayes.write_posterior_csv(posterior, out / "posterior.csv")
        marked = _marker_image(posterior.prob, [posterior.argmax()], [255])
        write_pgm(marked, out / "posterior_map_marker.pgm")
        written += [p, out / "posterior.csv", out / "posterior_map_marker.pgm"]
    gcfg = grid_cfg or cfg
    if estimates and gcfg is not None:
        lines = ["method,estimate_x,estimate_y,true_x,true_y,error_m"]
        for e in estimates:
            truth = e.truth or e.position
            img = np.zeros(gcfg.grid)
            cells = [locate_cell(_clip(truth, gcfg), gcfg), locate_cell(_clip(e.position, gcfg), gcfg)]
            write_pgm(_marker_image(img, cells, [128, 255]), out / f"overlay_{e.method.lower()}.pgm")
            written.append(out / f"overlay_{e.method.lower()}.pgm")
            lines.append(f"{e.method},{e.position[0]!r},{e.position[1]!r},{truth[0]!r},"
                         f"{truth[1]!r},{e.error!r}")
        (out / "estimates.csv").write_text("\n".join(lines) + "\n")
        written.append(out / "estimates.csv")
    return written


def _clip(p, cfg: SimConfig):
    lx, ly = cfg.domain_size
    return min(max(p[0], 0.0), lx), min(max(p[1], 0.0), ly)
