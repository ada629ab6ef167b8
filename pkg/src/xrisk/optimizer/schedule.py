"""Step-size configuration and the theorem-derived schedules."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

UPDATE_STYLES = ("momentum", "adam")
U_EVAL = ("pre", "post")
ALGOS = ("fcco", "mbmmo", "mbbo")


@dataclass
class ScheduleConfig:
    """Hyperparameters of one solver run.

    ``gamma0`` is the moving-average weight of the inner estimators, ``beta1``
    the momentum of the gradient estimator (``gamma1 = 1 - beta1``), ``eta``
    the primal step, ``eta0`` the dual / threshold step and ``gamma_hess``
    the moving-average weight of the lower-level Hessian estimators.
    """

    B1: int = 1
    B2: int = 1
    T: int = 100
    gamma0: float = 0.9
    beta1: float = 0.9
    eta: float = 0.01
    eta0: float = 0.1
    gamma_hess: float = 0.9
    update_style: str = "momentum"
    beta2: float = 0.999
    delta: float = 1e-8
    u_eval: str = "pre"
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def gamma1(self):
        return 1.0 - self.beta1

    def validate(self):
        for key in ("B1", "B2"):
            v = getattr(self, key)
            if int(v) != v or v < 1:
                raise ValueError(f"{key} must be a positive integer, got {v!r}")
        if int(self.T) != self.T or self.T < 0:
            raise ValueError(f"T must be a non-negative integer, got {self.T!r}")
        for key in ("gamma0", "gamma_hess"):
            v = getattr(self, key)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{key} must lie in (0, 1], got {v!r}")
        if not 0.0 <= self.beta1 < 1.0:
            raise ValueError(f"beta1 must lie in [0, 1), got {self.beta1!r}")
        if not 0.0 < self.beta2 < 1.0:
            raise ValueError(f"beta2 must lie in (0, 1), got {self.beta2!r}")
        for key in ("eta", "eta0", "delta"):
            v = getattr(self, key)
            if not (v >= 0.0 and math.isfinite(v)):
                raise ValueError(f"{key} must be a finite non-negative number, got {v!r}")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.update_style not in UPDATE_STYLES:
            raise ValueError(f"update_style must be one of {UPDATE_STYLES}, got {self.update_style!r}")
        if self.u_eval not in U_EVAL:
            raise ValueError(f"u_eval must be one of {U_EVAL}, got {self.u_eval!r}")
        self.B1, self.B2, self.T = int(self.B1), int(self.B2), int(self.T)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _ceil(x):
    # guard against 9999.999999999998 style rounding of exact integers
    return int(math.ceil(x - 1e-9 * max(1.0, abs(x))))


def theorem_schedule(eps, B1, B2, m, constants=None, algo="fcco", **overrides) -> ScheduleConfig:
    """Schedule from the convergence theorems with every hidden constant
    exposed (``c_gamma0``, ``c_gamma1``, ``c_eta``, ``c_eta0``, ``c_hess``,
    ``c_T``; all default to 1).  Values are clamped into their valid ranges."""
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    if not 1 <= B1 <= m:
        raise ValueError("need 1 <= B1 <= m")
    if algo not in ALGOS:
        raise ValueError(f"algo must be one of {ALGOS}")
    c = {"c_gamma0": 1.0, "c_gamma1": 1.0, "c_eta": 1.0, "c_eta0": 1.0, "c_hess": 1.0, "c_T": 1.0}
    unknown = set(constants or {}) - set(c)
    if unknown:
        raise ValueError(f"unknown schedule constants: {sorted(unknown)}")
    c.update(constants or {})
    e2 = eps * eps
    bmin = min(B1, B2)
    gamma0 = min(1.0, c["c_gamma0"] * B2 * e2)
    gamma1 = min(1.0, c["c_gamma1"] * bmin * e2)
    beta1 = 1.0 - gamma1
    gamma_hess = min(1.0, c["c_hess"] * B2 * e2)
    if algo == "fcco":
        eta0 = 0.0
        eta = c["c_eta"] * min(gamma1, gamma0 * B1 / m)
    elif algo == "mbmmo":
        eta0 = c["c_eta0"] * B2 * e2
        eta = c["c_eta"] * min(gamma1, B1 * eta0 / m)
    else:
        eta0 = c["c_eta0"] * B1 * gamma0 / m
        eta = c["c_eta"] * min(B1 * gamma0 / m, gamma1)
    T = _ceil(c["c_T"] * max(m / (B1 * B2 * e2 * e2), 1.0 / (bmin * e2 * e2)))
    cfg = dict(B1=int(B1), B2=int(B2), T=max(T, 1), gamma0=gamma0, beta1=beta1, eta=eta,
               eta0=eta0, gamma_hess=gamma_hess, constants=c)
    cfg.update(overrides)
    return ScheduleConfig(**cfg)
