"""Source estimates and the single place where localization error is computed."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


def localization_error(estimate, truth) -> float:
    """Euclidean distance in meters."""
    return float(np.hypot(estimate[0] - truth[0], estimate[1] - truth[1]))


@dataclass
class SourceEstimate:
    method: str
    position: tuple[float, float]
    truth: tuple[float, float] | None = None
    inference_time: float = 0.0
    train_time: float = 0.0
    flags: list[str] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.position = (float(self.position[0]), float(self.position[1]))
        if self.truth is not None:
            self.truth = (float(self.truth[0]), float(self.truth[1]))
        self.inference_time = float(self.inference_time)
        self.train_time = float(self.train_time)

    @property
    def error(self) -> float | None:
        if self.truth is None:
            return None
        return localization_error(self.position, self.truth)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["position"] = list(self.position)
        d["truth"] = list(self.truth) if self.truth is not None else None
        d["error"] = self.error
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SourceEstimate":
        d = dict(d)
        d.pop("error", None)
        d["position"] = tuple(d["position"])
        if d.get("truth") is not None:
            d["truth"] = tuple(d["truth"])
        return cls(**d)
