"""Dense feed-forward networks with hand-written gradients and Adam."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

ACTIVATIONS = ("relu", "tanh", "identity")


class UnsupportedActivation(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class DenseNet:
    """Weights ``W`` are stored (out, in); a layer computes ``act(x @ W.T + b)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        for k, (W, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {k}: weight {W.shape} / bias {b.shape} mismatch")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k} expects {W.shape[1]} inputs, previous layer "
                                 f"gives {self.weights[k - 1].shape[0]}")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [W.shape[0] for W in self.weights]

    def params(self) -> list[np.ndarray]:
        """Flat parameter list ``[W0, b0, W1, b1, ...]``."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_params(self, params) -> "DenseNet":
        return DenseNet(list(params[0::2]), list(params[1::2]), list(self.activations),
                        self.seed, dict(self.meta))

    def copy(self) -> "DenseNet":
        return self.with_params([p.copy() for p in self.params()])

    def n_params(self) -> int:
        return sum(p.size for p in self.params())


def init_net(dims, activations="tanh", seed: int = 0) -> DenseNet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    ``activations`` is either one name used for every hidden layer (the
    output layer is then linear) or a list with one name per layer.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"invalid layer dimensions {dims}")
    n_layers = len(dims) - 1
    if isinstance(activations, str):
        acts = [activations] * (n_layers - 1) + ["identity"]
    else:
        acts = list(activations)
        if len(acts) != n_layers:
            raise ValueError(f"need {n_layers} activations, got {len(acts)}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNet(weights, biases, acts, seed)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        # subgradient 0 at z == 0
        return (z > 0).astype(float)
    return np.ones_like(z)


def _check_input(net: DenseNet, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != net.input_dim:
        raise ValueError(f"expected input of width {net.input_dim}, got shape {x.shape}")
    return x2, single


def forward(net: DenseNet, x, return_cache: bool = False):
    """Evaluate ``net`` on one input vector or a batch (rows)."""
    a, single = _check_input(net, x)
    cache = [(a, None, None)]
    for W, b, act in zip(net.weights, net.biases, net.activations):
        z = a @ W.T + b
        a = _act(act, z)
        cache.append((a, z, act))
    out = a[0] if single else a
    return (out, cache) if return_cache else out


def backward(net: DenseNet, x, upstream):
    """Gradients of ``<upstream, net(x)>`` (summed over the batch).

    Returns ``(param_grads, input_grad)`` where ``param_grads`` follows the
    layout of :meth:`DenseNet.params`.
    """
    x2, single = _check_input(net, x)
    _, cache = forward(net, x2, return_cache=True)
    g = np.asarray(upstream, dtype=float)
    g = g[None, :] if g.ndim == 1 else g
    if g.shape != (x2.shape[0], net.output_dim):
        raise ValueError(f"upstream gradient shape {g.shape} does not match output")
    grads = [None] * (2 * len(net.weights))
    for k in range(len(net.weights) - 1, -1, -1):
        a, z, act = cache[k + 1]
        gz = g * _act_grad(act, z, a)
        a_prev = cache[k][0]
        grads[2 * k] = gz.T @ a_prev
        grads[2 * k + 1] = gz.sum(axis=0)
        g = gz @ net.weights[k]
    return grads, (g[0] if single else g)


def input_derivatives(net: DenseNet, x):
    """Value, input gradient and diagonal input Hessian of every output.

    Derivatives are carried forward through the layers in closed form::

        z' = W a',  z'' = W a''
        tanh:  a' = s z',  a'' = s z'' - 2 a s z'^2,  with s = 1 - a^2

    Returns ``(value (n, out), grad (n, out, in), hess_diag (n, out, in))``.
    """
    if "relu" in net.activations:
        raise UnsupportedActivation("input second derivatives need smooth activations; "
                                    "ReLU is not twice differentiable")
    a, single = _check_input(net, x)
    n, d = a.shape
    da = np.broadcast_to(np.eye(d), (n, d, d)).transpose(0, 2, 1).copy()  # (n, width, d)
    d2a = np.zeros_like(da)
    for W, b, act in zip(net.weights, net.biases, net.activations):
        z = a @ W.T + b
        dz = np.einsum("ow,nwd->nod", W, da)
        d2z = np.einsum("ow,nwd->nod", W, d2a)
        if act == "tanh":
            a = np.tanh(z)
            s = (1.0 - a * a)[:, :, None]
            da = s * dz
            d2a = s * d2z - 2.0 * a[:, :, None] * s * dz * dz
        else:
            a, da, d2a = z, dz, d2z
    if single:
        return a[0], da[0], d2a[0]
    return a, da, d2a


def tape_derivatives(params: list, x: np.ndarray, activations):
    """Same forward propagation as :func:`input_derivatives` on :class:`autodiff.Var` values.

    ``params`` is a ``[W0, b0, ...]`` list of Vars.  Returns Vars
    ``(value, [d/dx_k], [d2/dx_k^2])`` with columns per output, so losses built
    from them can be differentiated with respect to the parameters.
    """
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    h = ad.Var(x)
    dh = [ad.Var(np.broadcast_to(np.eye(d)[k], (n, d)).copy()) for k in range(d)]
    d2h = [None] * d
    for layer, act in enumerate(activations):
        W, b = params[2 * layer], params[2 * layer + 1]
        z = ad.linear(h, W, b)
        dz = [ad.linear(g, W) for g in dh]
        d2z = [ad.linear(g, W) if g is not None else None for g in d2h]
        if act == "tanh":
            h = z.tanh()
            s = 1.0 - h.square()
            two_hs = (h * s) * 2.0
            dh = [s * g for g in dz]
            d2h = [(s * g2 if g2 is not None else 0.0) - two_hs * g.square()
                   for g, g2 in zip(dz, d2z)]
        elif act == "identity":
            h, dh, d2h = z, dz, d2z
        else:
            raise UnsupportedActivation(f"activation {act!r} is not twice differentiable")
    d2h = [g if g is not None else ad.Var(np.zeros(h.shape)) for g in d2h]
    return h, dh, d2h


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                     0, lr, beta1, beta2, eps)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update; returns new ``(params, state)`` without mutating inputs."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state have different lengths")
    for k, g in enumerate(grads):
        if g.shape != params[k].shape:
            raise ValueError(f"gradient {k} has shape {g.shape}, parameter {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {k} at step {state.t + 1}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)


# ---------------------------------------------------------------------------
# checkpoints

def net_to_dict(net: DenseNet, **training) -> dict:
    return {
        "dims": net.dims,
        "activations": list(net.activations),
        "params": np.concatenate([p.ravel() for p in net.params()]).tolist(),
        "seed": net.seed,
        "training": {**net.meta, **training},
    }


def net_from_dict(d: dict) -> DenseNet:
    dims = d["dims"]
    flat = np.asarray(d["params"], dtype=float)
    weights, biases, pos = [], [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(flat[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in))
        pos += fan_in * fan_out
        biases.append(flat[pos:pos + fan_out].copy())
        pos += fan_out
    if pos != flat.size:
        raise ValueError(f"checkpoint has {flat.size} parameters, dims need {pos}")
    return DenseNet(weights, biases, list(d["activations"]), d.get("seed"),
                    dict(d.get("training", {})))


def save_net(net: DenseNet, path, **training) -> None:
    Path(path).write_text(json.dumps(net_to_dict(net, **training)))


def load_net(path) -> DenseNet:
    return net_from_dict(json.loads(Path(path).read_text()))
