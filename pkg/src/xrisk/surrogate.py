"""Scalar surrogate losses, gates and smoothing primitives.

Every function is vectorized and returns ``(value, derivative)`` so callers
can chain-rule through them without a separate gradient pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

# tag -> name of its single parameter
SURROGATE_PARAMS = {
    "squared_hinge": "margin",
    "logistic": "scale",
    "sigmoid": "temperature",
    "square": "margin",
    "indicator": None,
}
NON_DECREASING = {"squared_hinge", "logistic", "sigmoid", "indicator"}


@dataclass(frozen=True)
class SurrogateKind:
    """A pairwise surrogate ``l(z)`` where ``z = h(other) - h(anchor)``.

    ``indicator`` is the exact step ``I(z >= 0)`` with zero derivative; it is
    only meaningful for evaluation, never for training.
    """

    tag: str = "squared_hinge"
    param: float = 1.0

    def __post_init__(self):
        if self.tag not in SURROGATE_PARAMS:
            raise ValueError(f"unknown surrogate {self.tag!r}; valid: {sorted(SURROGATE_PARAMS)}")
        if SURROGATE_PARAMS[self.tag] is not None and not self.param > 0:
            raise ValueError(f"{self.tag} {SURROGATE_PARAMS[self.tag]} must be > 0")

    @property
    def non_decreasing(self) -> bool:
        return self.tag in NON_DECREASING

    def to_dict(self) -> dict:
        name = SURROGATE_PARAMS[self.tag]
        return {"tag": self.tag} if name is None else {"tag": self.tag, name: self.param}

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateKind":
        tag = d["tag"]
        if tag not in SURROGATE_PARAMS:
            raise ValueError(f"unknown surrogate {tag!r}; valid: {sorted(SURROGATE_PARAMS)}")
        name = SURROGATE_PARAMS[tag]
        return cls(tag) if name is None else cls(tag, float(d.get(name, 1.0)))


@dataclass(frozen=True)
class GateKind:
    tag: str = "sigmoid"
    temperature: float = 0.1

    def __post_init__(self):
        if self.tag not in ("sigmoid", "indicator"):
            raise ValueError(f"unknown gate {self.tag!r}")
        if not self.temperature > 0:
            raise ValueError("gate temperature must be > 0")

    def to_dict(self) -> dict:
        return {"tag": self.tag, "temperature": self.temperature}

    @classmethod
    def from_dict(cls, d: dict) -> "GateKind":
        return cls(d.get("tag", "sigmoid"), float(d.get("temperature", 0.1)))


def softplus(z, tau1: float):
    """``tau1 * ln(1 + exp(z / tau1))`` and its derivative ``sigmoid(z / tau1)``."""
    z = np.asarray(z, dtype=np.float64)
    t = z / tau1
    return tau1 * np.logaddexp(0.0, t), expit(t)


def pair_loss(kind: SurrogateKind, z):
    z = np.asarray(z, dtype=np.float64)
    tag, c = kind.tag, kind.param
    if tag == "squared_hinge":
        r = np.maximum(z + c, 0.0)
        return r * r, 2.0 * r
    if tag == "square":
        r = z + c
        return r * r, 2.0 * r
    if tag == "logistic":
        return softplus(z, c)
    if tag == "sigmoid":
        s = expit(z / c)
        return s, s * (1.0 - s) / c
    return (z >= 0).astype(np.float64), np.zeros_like(z)


def gate(kind: GateKind, z):
    z = np.asarray(z, dtype=np.float64)
    if kind.tag == "indicator":
        return (z > 0).astype(np.float64), np.zeros_like(z)
    s = expit(z / kind.temperature)
    return s, s * (1.0 - s) / kind.temperature


def conjugate(kind: SurrogateKind, s):
    """Convex conjugate of the plain square loss ``z**2``: ``s**2 / 4``."""
    if kind.tag != "square":
        raise ValueError(f"conjugate is only available for 'square', not {kind.tag!r}")
    s = np.asarray(s, dtype=np.float64)
    return s * s / 4.0
