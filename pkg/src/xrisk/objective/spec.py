"""Objective descriptions: kind tags, hyperparameters, validation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

from ..surrogate import GateKind, SurrogateKind


class ConfigError(ValueError):
    """Invalid configuration value; ``key`` names the offending field."""

    def __init__(self, key, msg):
        super().__init__(f"{key}: {msg}")
        self.key = key


FCCO_KINDS = ("auroc_pairwise", "ap", "map", "ndcg", "listnet", "pnorm_push", "pauc_kl",
              "recall_k_fcco", "gcl_oneway", "gcl_twoway", "supcon_ratio",
              "supcon_log_ratio", "supcon_per_pair")
MINMAX_KINDS = ("auroc_minmax",)
BILEVEL_KINDS = ("pauc_bilevel_oneway", "pauc_bilevel_twoway", "topk_ndcg", "topk_map",
                 "top_push", "recall_k_bilevel", "prec_at_recall", "pap_k")
CVAR_KINDS = ("pauc_cvar_oneway",)
ALL_KINDS = FCCO_KINDS + MINMAX_KINDS + BILEVEL_KINDS + CVAR_KINDS

RANKING_KINDS = ("map", "ndcg", "listnet", "topk_ndcg", "topk_map")
CONTRASTIVE_KINDS = ("gcl_oneway", "gcl_twoway", "supcon_ratio", "supcon_log_ratio",
                     "supcon_per_pair")


def family(kind):
    if kind in FCCO_KINDS:
        return "fcco"
    if kind in MINMAX_KINDS:
        return "minmax"
    if kind in BILEVEL_KINDS:
        return "bilevel"
    if kind in CVAR_KINDS:
        return "cvar"
    raise ConfigError("kind", f"unknown objective {kind!r}; valid: {', '.join(ALL_KINDS)}")


def data_kind(kind):
    if kind in RANKING_KINDS:
        return "ranking"
    if kind in CONTRASTIVE_KINDS:
        return "contrastive_pool"
    return "binary"


def default_surrogate(kind):
    if kind in ("ap", "recall_k_fcco", "map", "topk_map"):
        return SurrogateKind("sigmoid", 0.1)
    if kind in ("auroc_pairwise", "pnorm_push", "pauc_kl", "pauc_bilevel_oneway",
                "pauc_bilevel_twoway", "top_push", "pap_k", "pauc_cvar_oneway"):
        return SurrogateKind("squared_hinge", 1.0)
    return SurrogateKind("logistic", 1.0)


@dataclass(frozen=True)
class ObjectiveSpec:
    """Kind tag plus every hyperparameter; unused fields are ignored by a kind.

    ``surrogate`` is the pairwise loss; ``None`` picks the kind's default.
    ``outer_surrogate`` is the outer rank loss of ``recall_k_fcco``.
    ``normalization`` selects ``full`` (1/(n+ n-)) or ``band`` scaling for
    the partial-AUC kinds.
    """

    kind: str
    surrogate: SurrogateKind | None = None
    gate: GateKind = field(default_factory=GateKind)
    outer_surrogate: SurrogateKind = field(default_factory=lambda: SurrogateKind("sigmoid", 1.0))
    alpha: float = 0.0
    beta: float = 1.0
    tau1: float = 0.05
    tau2: float = 0.05
    eps_sel: float = 0.5
    K: int = 5
    p: float = 2.0
    lambda_dro: float = 1.0
    tau: float = 0.5
    eps_gcl: float = 0.0
    c: float = 1.0
    tasks: int = 1
    normalization: str = "full"
    exclude_positive: bool = False
    n_views: int = 2

    def __post_init__(self):
        if self.surrogate is None:
            object.__setattr__(self, "surrogate", default_surrogate(self.kind) if self.kind in ALL_KINDS else None)
        self.validate()

    @property
    def family(self):
        return family(self.kind)

    def validate(self):
        k = self.kind
        family(k)
        pos = ["tau1", "tau2", "tau", "lambda_dro", "c"]
        for name in pos:
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(name, f"must be a positive number, got {v!r}")
        if not 0.0 < self.eps_sel < 1.0:
            raise ConfigError("eps_sel", "must lie in (0, 1)")
        if self.eps_gcl < 0:
            raise ConfigError("eps_gcl", "must be >= 0")
        if int(self.K) != self.K or self.K < 1:
            raise ConfigError("K", f"must be an integer >= 1, got {self.K!r}")
        if self.p < 1:
            raise ConfigError("p", "must be >= 1")
        if int(self.tasks) != self.tasks or self.tasks < 1:
            raise ConfigError("tasks", "must be an integer >= 1")
        if int(self.n_views) != self.n_views or self.n_views < 1:
            raise ConfigError("n_views", "must be an integer >= 1")
        if self.normalization not in ("full", "band"):
            raise ConfigError("normalization", "must be 'full' or 'band'")
        if k in ("pauc_bilevel_oneway", "pauc_cvar_oneway", "pauc_bilevel_twoway"):
            for name in ("alpha", "beta"):
                v = getattr(self, name)
                if not 0.0 <= v <= 1.0:
                    raise ConfigError(name, f"must lie in [0, 1], got {v}")
        if k == "pauc_bilevel_oneway" and not self.alpha < self.beta:
            raise ConfigError("alpha", f"alpha must be < beta (alpha={self.alpha}, beta={self.beta})")
        if k == "pauc_bilevel_twoway" and not (self.alpha > 0 and self.beta > 0):
            raise ConfigError("alpha", "two-way pAUC needs alpha > 0 and beta > 0")
        if k == "pauc_cvar_oneway":
            if self.alpha != 0.0:
                raise ConfigError("alpha", "the CVaR form requires alpha = 0")
            if not self.beta > 0:
                raise ConfigError("beta", "must lie in (0, 1]")
            if not self.surrogate.non_decreasing:
                raise ConfigError("surrogate", f"{self.surrogate.tag} is not non-decreasing; "
                                  "the CVaR form needs a non-decreasing loss")
        if self.surrogate.tag == "indicator" and k not in BILEVEL_KINDS + ("auroc_pairwise", "ndcg"):
            raise ConfigError("surrogate", "the indicator surrogate is for evaluation only")

    def to_dict(self):
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.to_dict() if hasattr(v, "to_dict") else v
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "kind" not in d:
            raise ConfigError("kind", "missing objective kind")
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown objective key")
        try:
            if d.get("surrogate") is not None:
                d["surrogate"] = SurrogateKind.from_dict(d["surrogate"])
            if "gate" in d:
                d["gate"] = GateKind.from_dict(d["gate"])
            if "outer_surrogate" in d:
                d["outer_surrogate"] = SurrogateKind.from_dict(d["outer_surrogate"])
        except (ValueError, KeyError) as exc:
            key = next(k for k in ("surrogate", "gate", "outer_surrogate") if k in d)
            raise ConfigError(key, str(exc)) from None
        return cls(**d)

    def with_(self, **kw):
        return replace(self, **kw)
