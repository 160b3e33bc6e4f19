"""Deep Q-learning agent that walks a coarse grid toward the source.

The state is the agent's normalized position only; the reward is the
negative distance to the source cell after each move.
"""
from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .estimate import SourceEstimate
from .nn_engine import DenseNet, adam_init, adam_step, backward, forward, init_net

# (di, dj) per action
ACTIONS = {0: (0, 1), 1: (0, -1), 2: (-1, 0), 3: (1, 0)}
ACTION_NAMES = ("up", "down", "left", "right")
Q_LIMIT = 1e6


class QDivergence(FloatingPointError):
    pass


@dataclass
class GridEnv:
    n: int = 10
    source_cell: tuple[int, int] = (3, 7)
    agent_cell: tuple[int, int] = (0, 0)
    max_steps: int = 200
    domain_size: tuple[float, float] = (1e-5, 1e-5)
    steps: int = 0

    def __post_init__(self):
        for name in ("source_cell", "agent_cell"):
            i, j = (int(v) for v in getattr(self, name))
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"{name} {(i, j)} outside the {self.n}x{self.n} grid")
            setattr(self, name, (i, j))

    @classmethod
    def from_source(cls, source_pos, n: int = 10, domain_size=(1e-5, 1e-5), **kw) -> "GridEnv":
        """Environment whose source cell is ``floor(pos / L * n)``."""
        cell = tuple(min(int(np.floor(p / L * n + 1e-9)), n - 1)
                     for p, L in zip(source_pos, domain_size))
        return cls(n=n, source_cell=cell, domain_size=tuple(domain_size), **kw)

    def state(self) -> np.ndarray:
        return np.asarray(self.agent_cell, dtype=float) / self.n

    def distance(self) -> float:
        """Normalised Euclidean distance between agent and source."""
        a, s = np.asarray(self.agent_cell), np.asarray(self.source_cell)
        return float(np.hypot(*(a - s)) / self.n)

    def reset(self, start=None) -> np.ndarray:
        self.agent_cell = tuple(int(v) for v in (start if start is not None else (0, 0)))
        self.steps = 0
        return self.state()

    def cell_position(self, cell=None) -> tuple[float, float]:
        i, j = self.agent_cell if cell is None else cell
        return i / self.n * self.domain_size[0], j / self.n * self.domain_size[1]

    @property
    def truth(self) -> tuple[float, float]:
        return self.cell_position(self.source_cell)


def env_step(env: GridEnv, action: int):
    """Move one cell (clamped at walls); returns ``(next_state, reward, done)``."""
    if action not in ACTIONS:
        raise ValueError(f"invalid action {action!r}")
    di, dj = ACTIONS[action]
    i = min(max(env.agent_cell[0] + di, 0), env.n - 1)
    j = min(max(env.agent_cell[1] + dj, 0), env.n - 1)
    env.agent_cell = (i, j)
    env.steps += 1
    dist = env.distance()
    done = env.agent_cell == env.source_cell or env.steps >= env.max_steps
    return env.state(), -dist, done


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool


class ReplayBuffer:
    """Bounded FIFO of transitions; batches are drawn without replacement."""

    def __init__(self, capacity: int = 10_000, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self._items)

    def push(self, tr: Transition) -> None:
        self._items.append(tr)

    def sample(self, batch: int) -> list[Transition]:
        idx = self.rng.choice(len(self._items), size=min(batch, len(self._items)), replace=False)
        return [self._items[k] for k in idx]

    def __iter__(self):
        return iter(self._items)


@dataclass
class DqnConfig:
    lr: float = 1e-3
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay: float = 0.995
    capacity: int = 10_000
    batch: int = 64
    hidden: tuple = (64, 64)
    max_steps: int = 200
    random_starts: bool = True
    target_sync: int | None = None   # episodes between target-network copies; None = no target net
    zero_init: bool = False

    def epsilon(self, episode: int) -> float:
        return max(self.eps_end, self.eps_start * self.eps_decay**episode)


@dataclass
class TrainingLog:
    episodes: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    steps: list[int] = field(default_factory=list)
    epsilons: list[float] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    train_time: float = 0.0

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("episode,total_reward,steps,epsilon\n")
            for row in zip(self.episodes, self.rewards, self.steps, self.epsilons):
                fh.write(f"{row[0]},{row[1]!r},{row[2]},{row[3]!r}\n")


def q_targets(net: DenseNet, batch: list[Transition], gamma: float) -> np.ndarray:
    """``r + gamma * max_a' Q(s', a')`` for non-terminal transitions, ``r`` otherwise."""
    nxt = forward(net, np.array([t.next_state for t in batch]))
    r = np.array([t.reward for t in batch])
    done = np.array([t.done for t in batch], dtype=float)
    return r + gamma * (1.0 - done) * nxt.max(axis=1)


def q_update(net: DenseNet, target_net: DenseNet, batch: list[Transition], state, gamma: float):
    """One Adam step on the mean squared TD error; returns ``(net, state, loss)``."""
    s = np.array([t.state for t in batch])
    a = np.array([t.action for t in batch])
    y = q_targets(target_net, batch, gamma)
    q = forward(net, s)
    rows = np.arange(len(batch))
    err = q[rows, a] - y
    upstream = np.zeros_like(q)
    upstream[rows, a] = 2.0 * err / len(batch)
    grads, _ = backward(net, s, upstream)
    params, state = adam_step(net.params(), grads, state)
    return net.with_params(params), state, float(np.mean(err * err))


def greedy_action(net: DenseNet, state) -> int:
    return int(np.argmax(forward(net, state)))


def train_dqn(env: GridEnv, episodes: int = 500, seed: int = 0, hyper: DqnConfig | None = None):
    """Epsilon-greedy DQN with experience replay; returns ``(net, TrainingLog)``.

    Every episode starts from a random cell unless ``random_starts`` is off,
    in which case it starts from ``env.agent_cell``.  Training stops early
    with a ``diverged`` flag if any Q-value exceeds 1e6 in magnitude.
    """
    if episodes < 1:
        raise ValueError("need at least one episode")
    hp = hyper or DqnConfig()
    rng = np.random.default_rng(seed)
    net = init_net((2, *hp.hidden, len(ACTIONS)), "relu", seed=seed)
    if hp.zero_init:
        net = net.with_params([np.zeros_like(p) for p in net.params()])
    target = net
    opt = adam_init(net.params(), lr=hp.lr)
    buf = ReplayBuffer(hp.capacity, seed=seed)
    log = TrainingLog()
    home = env.agent_cell
    env = GridEnv(env.n, env.source_cell, home, hp.max_steps, env.domain_size)
    t0 = time.perf_counter()
    for ep in range(episodes):
        eps = hp.epsilon(ep)
        start = tuple(rng.integers(0, env.n, 2)) if hp.random_starts else home
        s = env.reset(start)
        total, done = 0.0, env.agent_cell == env.source_cell
        while not done:
            if rng.random() < eps:
                a = int(rng.integers(len(ACTIONS)))
            else:
                a = greedy_action(net, s)
            s2, r, done = env_step(env, a)
            buf.push(Transition(s, a, r, s2, done and env.agent_cell == env.source_cell))
            total += r
            s = s2
            if len(buf) >= hp.batch:
                net, opt, _ = q_update(net, target if hp.target_sync else net,
                                       buf.sample(hp.batch), opt, hp.gamma)
        log.episodes.append(ep)
        log.rewards.append(total)
        log.steps.append(env.steps)
        log.epsilons.append(eps)
        if hp.target_sync and (ep + 1) % hp.target_sync == 0:
            target = net.copy()
        qmax = np.abs(forward(net, np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.5]]))).max()
        if not np.isfinite(qmax) or qmax > Q_LIMIT:
            log.flags.append(f"diverged at episode {ep}")
            break
    log.train_time = time.perf_counter() - t0
    net.meta.update({"episodes": episodes, "seed": seed, "gamma": hp.gamma, "lr": hp.lr})
    return net, log


def rollout(net: DenseNet, env: GridEnv, max_steps: int | None = None, start=None):
    """Greedy episode; returns ``(final_cell, SourceEstimate, path)``.

    The final cell is converted to meters with ``cell / n * L``.  Truncation
    at the step budget is reported as a flag.
    """
    env = GridEnv(env.n, env.source_cell, env.agent_cell, max_steps or env.max_steps,
                  env.domain_size)
    t0 = time.perf_counter()
    s = env.reset(start if start is not None else env.agent_cell)
    path = [env.agent_cell]
    done = env.agent_cell == env.source_cell
    while not done:
        s, _, done = env_step(env, greedy_action(net, s))
        path.append(env.agent_cell)
    elapsed = time.perf_counter() - t0
    flags = [] if env.agent_cell == env.source_cell else ["step budget exhausted"]
    est = SourceEstimate("RL", env.cell_position(), env.truth, inference_time=elapsed,
                         flags=flags, info={"steps": env.steps, "final_cell": list(env.agent_cell)})
    return env.agent_cell, est, path
