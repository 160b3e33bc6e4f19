"""Learning-based localizers: MLP offset regression and a physics-informed network.

The MLP maps a sensor trace plus wind to the offset from the sensor to the
source.  The PINN fits a steady concentration surrogate ``c(x, y)`` whose
transport-equation residual contains a smooth source centered at a
trainable position; that position is the estimate.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .datagen import N_FEATURES, Dataset, Normalizer, SensorTrace, trace_features
from .estimate import SourceEstimate
from .grid_pde import SimConfig
from .nn_engine import (AdamState, DenseNet, adam_init, adam_step, backward, forward,
                        init_net, input_derivatives, net_from_dict, net_to_dict,
                        tape_derivatives)

log = logging.getLogger(__name__)

MLP_DIMS = (N_FEATURES, 256, 128, 64, 2)
PINN_DIMS = (2, 64, 64, 64, 1)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at epoch {epoch}")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# MLP

@dataclass
class MlpEstimator:
    net: DenseNet
    normalizer: Normalizer
    sensor_pos: tuple[float, float]

    def predict_offset(self, features: np.ndarray) -> np.ndarray:
        """Offsets in meters for raw 602-wide feature rows."""
        x = self.normalizer.features(np.atleast_2d(features))
        return self.normalizer.labels_inverse(forward(self.net, x))

    def to_dict(self) -> dict:
        return {"net": net_to_dict(self.net), "normalization": self.normalizer.to_dict(),
                "sensor_pos": list(self.sensor_pos)}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpEstimator":
        return cls(net_from_dict(d["net"]), Normalizer(**d["normalization"]),
                   tuple(d["sensor_pos"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MlpEstimator":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _mse_grad(net: DenseNet, x, y):
    out = forward(net, x)
    err = out - y
    loss = float(np.mean(np.sum(err * err, axis=1)))
    grads, _ = backward(net, x, 2.0 * err / len(x))
    return loss, grads


def _mse(net, x, y) -> float:
    if len(x) == 0:
        return float("nan")
    err = forward(net, x) - y
    return float(np.mean(np.sum(err * err, axis=1)))


def train_mlp(train: Dataset, val: Dataset | None = None, epochs: int = 500, lr: float = 1e-3,
              seed: int = 0, batch_size: int | None = None, hidden=(256, 128, 64),
              normalizer: Normalizer | None = None, keep_best: bool = True,
              weight_decay: float = 0.0):
    """Fit the offset regressor with Adam on the summed squared offset error.

    Features and labels are normalised (:class:`Normalizer`); offsets are in
    micrometers inside the network.  ``batch_size=None`` trains full batch.
    With ``keep_best`` the weights from the epoch with the lowest validation
    error are returned.  ``weight_decay``
    adds an L2 penalty on the weight matrices (not the biases).  Returns the
    estimator and a history dict of per-epoch ``train``/``val`` MSE.
    """
    if train.features.shape[1] != N_FEATURES:
        raise ValueError("training features must be 602 wide")
    normalizer = normalizer or Normalizer.fit(train)
    x = normalizer.features(train.features)
    y = normalizer.labels(train.labels)
    if val is not None and len(val):
        xv, yv = normalizer.features(val.features), normalizer.labels(val.labels)
    else:
        xv = yv = None
    net = init_net((N_FEATURES, *hidden, 2), "relu", seed=seed)
    params = net.params()
    state = adam_init(params, lr=lr)
    rng = np.random.default_rng(seed)
    n = len(x)
    bs = n if not batch_size else min(batch_size, n)
    history = {"train": [], "val": []}
    best = (np.inf, params)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, grads = _mse_grad(net, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            if weight_decay:
                grads = [g + weight_decay * p if k % 2 == 0 else g
                         for k, (g, p) in enumerate(zip(grads, params))]
            params, state = adam_step(params, grads, state)
            net = net.with_params(params)
        tr = _mse(net, x, y)
        if not np.isfinite(tr):
            raise TrainingDiverged(epoch)
        va = _mse(net, xv, yv) if xv is not None else float("nan")
        history["train"].append(tr)
        history["val"].append(va)
        score = va if xv is not None else tr
        if score < best[0]:
            best = (score, params)
    if keep_best:
        net = net.with_params(best[1])
    net.meta.update({"epochs": epochs, "lr": lr, "batch_size": batch_size, "seed": seed})
    return MlpEstimator(net, normalizer, tuple(train.sensors[0])), history


def mlp_predict(est: MlpEstimator, trace: SensorTrace, wind=None, sensor: int = 0,
                sensor_pos=None) -> SourceEstimate:
    """Absolute estimate = sensor position + predicted offset."""
    t0 = time.perf_counter()
    feats = trace_features(trace, sensor)
    if wind is not None:
        feats[-2:] = wind
    if feats.shape != (N_FEATURES,):
        raise ValueError(f"feature vector has length {feats.size}, expected {N_FEATURES}")
    pos = np.asarray(trace.sensors[sensor] if sensor_pos is None else sensor_pos, dtype=float)
    offset = est.predict_offset(feats)[0]
    elapsed = time.perf_counter() - t0
    return SourceEstimate("MLP", tuple(pos + offset), trace.truth, inference_time=elapsed,
                          info={"offset": offset.tolist()})


# ---------------------------------------------------------------------------
# PINN

@dataclass
class PinnPhysics:
    """Steady transport operator in unit-square coordinates, divided by ``D / Lx^2``.

    ``residual = c_xx + aspect2 c_yy - pe_x c_x - pe_y c_y - da c + strength g``
    where ``g`` is a Gaussian of physical width ``width`` (meters) with unit
    integral over the physical domain, evaluated at the physical offset from
    the source.
    """

    length: tuple[float, float]
    aspect2: float
    pe: tuple[float, float]
    da: float
    strength: float
    width: float

    @classmethod
    def from_config(cls, cfg: SimConfig, conc_scale: float, width: float | None = None):
        lx, ly = cfg.domain_size
        d = cfg.diffusion
        ux, uy = cfg.flow
        return cls(
            length=(lx, ly),
            aspect2=(lx / ly) ** 2,
            pe=(ux * lx / d, uy * lx**2 / (d * ly)),
            da=cfg.degradation * lx**2 / d,
            strength=cfg.emission * lx**2 / (d * conc_scale),
            width=width if width is not None else float(np.sqrt(cfg.dx * cfg.dy)),
        )

    def source(self, pts, src):
        """Source term at unit-square points ``pts`` (n, 2) for a source at ``src`` (2,)."""
        lx, ly = self.length
        off = (ad.as_var(pts) - src) * np.array([lx, ly])
        r2 = off.square().sum(axis=1)
        amp = self.strength / (2.0 * np.pi * self.width**2)
        return (r2 * (-0.5 / self.width**2)).exp() * amp

    def self_energy(self) -> float:
        """Mean square of the source term over the unit square, ignoring wall truncation."""
        lx, ly = self.length
        return self.strength**2 / (4.0 * np.pi * self.width**2 * lx * ly)


@dataclass
class PinnModel:
    net: DenseNet
    source_param: np.ndarray
    lambda_mse: float
    lambda_phy: float
    physics: PinnPhysics
    conc_scale: float
    collocation: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    history: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.lambda_mse <= 0 or self.lambda_phy <= 0:
            raise ValueError("loss weights must be positive")
        self.source_param = np.clip(np.asarray(self.source_param, dtype=float), 0.0, 1.0)

    def source_position(self) -> tuple[float, float]:
        lx, ly = self.physics.length
        return float(self.source_param[0] * lx), float(self.source_param[1] * ly)

    def to_dict(self) -> dict:
        p = self.physics
        return {"net": net_to_dict(self.net), "source_param": self.source_param.tolist(),
                "lambda_mse": self.lambda_mse, "lambda_phy": self.lambda_phy,
                "conc_scale": self.conc_scale,
                "physics": {"length": list(p.length), "aspect2": p.aspect2, "pe": list(p.pe),
                            "da": p.da, "strength": p.strength, "width": p.width}}

    @classmethod
    def from_dict(cls, d: dict) -> "PinnModel":
        ph = dict(d["physics"])
        ph["length"] = tuple(ph["length"])
        ph["pe"] = tuple(ph["pe"])
        return cls(net_from_dict(d["net"]), np.asarray(d["source_param"]), d["lambda_mse"],
                   d["lambda_phy"], PinnPhysics(**ph), d["conc_scale"])


def _operator_var(params, pts, activations, physics: PinnPhysics):
    """Transport operator applied to the surrogate (the residual without its source)."""
    c, dc, d2c = tape_derivatives(params, pts, activations)
    c, cx, cy = c.column(0), dc[0].column(0), dc[1].column(0)
    cxx, cyy = d2c[0].column(0), d2c[1].column(0)
    r = cxx + cyy * physics.aspect2 - c * physics.da
    if physics.pe[0]:
        r = r - cx * physics.pe[0]
    if physics.pe[1]:
        r = r - cy * physics.pe[1]
    return r


def pinn_residual(model: PinnModel, points) -> np.ndarray | float:
    """Steady-state transport residual of the surrogate at unit-square ``points``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if (pts < 0).any() or (pts > 1).any():
        raise ValueError("PINN points must lie in the unit square")
    ph = model.physics
    c, g, h = input_derivatives(model.net, pts)
    src = ph.source(pts, ad.Var(model.source_param)).value
    r = (h[:, 0, 0] + ph.aspect2 * h[:, 0, 1] - ph.pe[0] * g[:, 0, 0] - ph.pe[1] * g[:, 0, 1]
         - ph.da * c[:, 0] + src)
    return float(r[0]) if np.ndim(points) == 1 else r


def boundary_points(n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points spread uniformly over the four walls of the unit square."""
    t = rng.random(n)
    side = rng.integers(0, 4, n)
    pts = np.empty((n, 2))
    pts[:, 0] = np.where(side == 0, 0.0, np.where(side == 1, 1.0, t))
    pts[:, 1] = np.where(side == 2, 0.0, np.where(side == 3, 1.0, t))
    pts[side < 2, 1] = t[side < 2]
    return pts


def steady_readings(trace: SensorTrace, settle_frac: float = 0.5):
    """Readings taken while the source is on, after ``settle_frac`` of the injection window.

    Returns ``(positions (n, 2), values (n,))``; every sensor/time pair is one
    sample of the steady field.  When the source is on for the whole trace
    the settling window is measured against the trace length instead.
    """
    cfg = trace.config
    t_on = min(cfg.injection_duration, trace.times[-1])
    keep = (trace.times >= settle_frac * t_on) & (trace.times <= cfg.injection_duration)
    if not keep.any():
        keep = np.ones_like(trace.times, dtype=bool)
    vals = trace.readings[keep]
    pos = np.repeat(trace.sensors[None, :, :], vals.shape[0], axis=0)
    return pos.reshape(-1, 2), vals.reshape(-1)


@dataclass
class PinnSettings:
    lambda_mse: float = 1.0
    lambda_phy: float = 1e-2
    n_collocation: int = 1024
    n_boundary: int = 128
    epochs: int = 500
    lr: float = 1e-3
    source_lr: float | None = None
    width: float | None = None
    settle_frac: float = 0.5
    hidden: tuple = (64, 64, 64)
    init_source: tuple | None = None
    multi_start: bool = False


def _train_one(trace: SensorTrace, cfg: SimConfig, s: PinnSettings, seed: int, init_src):
    rng = np.random.default_rng(seed)
    conc_scale = trace.noise_sigma / cfg.noise_sigma_frac if trace.noise_sigma > 0 \
        else float(np.abs(trace.readings).max()) or 1.0
    physics = PinnPhysics.from_config(cfg, conc_scale, s.width)
    lx, ly = cfg.domain_size
    pos, vals = steady_readings(trace, s.settle_frac)
    data_pts = pos / np.array([lx, ly])
    data_vals = vals / conc_scale

    net = init_net((2, *s.hidden, 1), "tanh", seed=seed)
    params = net.params()
    src = np.clip(np.asarray(init_src, dtype=float), 0.0, 1.0)
    state = adam_init(params, lr=s.lr)
    src_state = adam_init([src], lr=s.source_lr or s.lr)
    hist = {"data": [], "physics": [], "boundary": [], "total": [], "source": []}
    at_bound = 0
    colloc = np.zeros((0, 2))
    self_energy = physics.self_energy()
    for epoch in range(s.epochs):
        colloc = rng.random((s.n_collocation, 2))
        bpts = boundary_points(s.n_boundary, rng)
        P = [ad.Var(p, requires_grad=True) for p in params]
        S = ad.Var(src, requires_grad=True)
        # mean r^2 with r = N[c] + source: the source-only term is replaced by its
        # closed-form integral, which removes its sampling noise and the spurious
        # pull of the walls on the source (they truncate the bump)
        op = _operator_var(P, colloc, net.activations, physics)
        l_phys = (op.square() + op * physics.source(colloc, S) * 2.0).mean() + self_energy
        # value-only passes for the data and wall terms
        h = ad.Var(np.vstack([data_pts, bpts]))
        for layer, act in enumerate(net.activations):
            h = ad.linear(h, P[2 * layer], P[2 * layer + 1])
            if act == "tanh":
                h = h.tanh()
        out = h.column(0)
        nd = len(data_pts)
        pred = out.value
        mask_d = np.zeros(len(pred))
        mask_d[:nd] = 1.0 / max(nd, 1)
        mask_b = np.zeros(len(pred))
        mask_b[nd:] = 1.0 / s.n_boundary
        target = np.concatenate([data_vals, np.zeros(s.n_boundary)])
        sq = (out - target).square()
        l_data = (sq * mask_d).sum()
        l_bc = (sq * mask_b).sum()
        total = l_data * s.lambda_mse + (l_phys + l_bc) * s.lambda_phy
        if not np.isfinite(total.value):
            raise TrainingDiverged(epoch)
        total.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in P]
        params, state = adam_step(params, grads, state)
        net = net.with_params(params)
        g_src = S.grad if S.grad is not None else np.zeros(2)
        (src,), src_state = adam_step([src], [g_src], src_state)
        src = np.clip(src, 0.0, 1.0)
        if epoch >= int(0.8 * s.epochs) and ((src == 0) | (src == 1)).any():
            at_bound += 1
        hist["data"].append(float(l_data.value))
        hist["physics"].append(float(l_phys.value))
        hist["boundary"].append(float(l_bc.value))
        hist["total"].append(float(total.value))
        hist["source"].append(src.tolist())
    model = PinnModel(net, src, s.lambda_mse, s.lambda_phy, physics, conc_scale, colloc, hist)
    tail = s.epochs - int(0.8 * s.epochs)
    if tail and at_bound > 0.2 * tail:
        model.flags.append("boundary-stuck")
    return model


def write_training_curves(model: PinnModel, path) -> None:
    """CSV of per-epoch losses: ``epoch,data_loss,physics_loss,total``."""
    h = model.history
    with open(path, "w") as fh:
        fh.write("epoch,data_loss,physics_loss,total\n")
        for k, row in enumerate(zip(h.get("data", []), h.get("physics", []), h.get("total", []))):
            fh.write(f"{k}," + ",".join(repr(float(v)) for v in row) + "\n")


def train_pinn(trace: SensorTrace, cfg: SimConfig | None = None, settings: PinnSettings | None = None,
               seed: int = 0, **overrides):
    """Jointly fit the surrogate and the source position; returns ``(model, estimate)``.

    ``settings`` fields can also be passed as keyword overrides.  With
    ``multi_start`` the fit is repeated from the four quarter points and the
    center and the run with the lowest final loss is kept.
    """
    cfg = cfg or trace.config
    s = settings or PinnSettings()
    if overrides:
        s = PinnSettings(**{**s.__dict__, **overrides})
    if len(trace) == 0:
        raise ValueError("PINN needs at least one observation")
    t0 = time.perf_counter()
    starts = [s.init_source or (0.5, 0.5)]
    if s.multi_start:
        starts += [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]
    runs = [_train_one(trace, cfg, s, seed, st) for st in starts]
    model = min(runs, key=lambda m: np.mean(m.history["total"][-max(1, s.epochs // 20):]))
    elapsed = time.perf_counter() - t0
    est = SourceEstimate("PINN", model.source_position(), trace.truth, inference_time=elapsed,
                         train_time=elapsed, flags=list(model.flags),
                         info={"final_loss": model.history["total"][-1] if model.history["total"] else None})
    return model, est
