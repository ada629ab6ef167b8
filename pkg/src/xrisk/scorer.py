"""Differentiable scoring models with analytic parameter gradients.

Two families are supported: a bias-free linear scorer ``h(x) = W x`` and a
small MLP (one or two smooth hidden layers).  Either can emit a scalar score
or a vector embedding, optionally projected onto the unit sphere.

Parameters always live in one flat float64 vector so optimizers can treat
every model the same way.  The layout of an MLP is, layer by layer, the
row-major weight matrix followed by its bias.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.special import expit

NORM_EPS = 1e-12
CHECKPOINT_MAGIC = "# xrisk-model"

_ACTIVATIONS = ("tanh", "softplus")


@dataclass(frozen=True)
class ScoreModelSpec:
    kind: str = "linear"
    input_dim: int = 1
    hidden_dims: tuple[int, ...] = ()
    activation: str = "tanh"
    output_dim: int = 1
    normalize_output: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        self.validate()

    def validate(self) -> None:
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if self.kind == "mlp":
            if not self.hidden_dims or len(self.hidden_dims) > 2:
                raise ValueError("mlp needs one or two hidden layers")
            if any(h < 1 for h in self.hidden_dims):
                raise ValueError("hidden layer sizes must be positive")
            if self.activation not in _ACTIVATIONS:
                raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        elif self.hidden_dims:
            raise ValueError("linear models take no hidden_dims")
        if self.output_dim == 1 and self.normalize_output:
            raise ValueError("normalize_output requires output_dim >= 2")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.output_dim]

    @property
    def n_params(self) -> int:
        if self.kind == "linear":
            return self.input_dim * self.output_dim
        sizes = self.layer_sizes
        return sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreModelSpec":
        return cls(**{**d, "hidden_dims": tuple(d.get("hidden_dims", ()))})


@dataclass(frozen=True)
class ScoreModel:
    spec: ScoreModelSpec
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64).ravel().copy()
        if p.shape[0] != self.spec.n_params:
            raise ValueError(
                f"expected {self.spec.n_params} parameters, got {p.shape[0]}")
        if not np.all(np.isfinite(p)):
            raise ValueError("parameters must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @property
    def d(self) -> int:
        return self.spec.n_params


def init_model(spec: ScoreModelSpec, seed: int = 0) -> ScoreModel:
    """Linear weights start at zero; MLP weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    spec.validate()
    if spec.kind == "linear":
        return ScoreModel(spec, np.zeros(spec.n_params))
    rng = np.random.default_rng(seed)
    chunks = []
    sizes = spec.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_out * fan_in))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return ScoreModel(spec, np.concatenate(chunks))


def _unpack(spec: ScoreModelSpec, params: np.ndarray):
    if spec.kind == "linear":
        return [(params.reshape(spec.output_dim, spec.input_dim), None)]
    layers, pos = [], 0
    sizes = spec.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = params[pos:pos + fan_out * fan_in].reshape(fan_out, fan_in)
        pos += fan_out * fan_in
        b = params[pos:pos + fan_out]
        pos += fan_out
        layers.append((W, b))
    return layers


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    return np.logaddexp(0.0, z)


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    return expit(z)


class Forward:
    """Cached forward pass over a batch; ``vjp`` reuses the activations."""

    def __init__(self, spec: ScoreModelSpec, params: np.ndarray, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != spec.input_dim:
            raise ValueError(
                f"feature dimension mismatch: expected (*, {spec.input_dim}), got {X.shape}")
        self.spec = spec
        self.layers = _unpack(spec, params)
        acts, pre = [X], []
        a = X
        for li, (W, b) in enumerate(self.layers):
            z = a @ W.T
            if b is not None:
                z = z + b
            if li < len(self.layers) - 1:
                pre.append(z)
                a = _act(spec.activation, z)
                acts.append(a)
            else:
                a = z
        self.acts, self.pre = acts, pre
        self.raw = a
        if spec.normalize_output:
            self.norm = np.maximum(np.linalg.norm(a, axis=1, keepdims=True), NORM_EPS)
            a = a / self.norm
        self.full = a
        self.out = a[:, 0] if spec.output_dim == 1 else a

    def vjp(self, upstream: np.ndarray) -> np.ndarray:
        """Sum over the batch of ``upstream[n] . d out[n] / d params``."""
        U = np.asarray(upstream, dtype=np.float64)
        n = self.raw.shape[0]
        U = U.reshape(n, self.spec.output_dim)
        if self.spec.normalize_output:
            y = self.full
            U = (U - y * np.sum(y * U, axis=1, keepdims=True)) / self.norm
        grads = []
        delta = U
        for li in range(len(self.layers) - 1, -1, -1):
            W, b = self.layers[li]
            a_in = self.acts[li]
            gW = delta.T @ a_in
            grads.append(gW.ravel() if b is None else np.concatenate([gW.ravel(), delta.sum(axis=0)]))
            if li > 0:
                z = self.pre[li - 1]
                delta = (delta @ W) * _act_grad(self.spec.activation, z, self.acts[li])
        return np.concatenate(grads[::-1])


def forward(model: ScoreModel, X: np.ndarray) -> Forward:
    return Forward(model.spec, model.params, np.atleast_2d(X))


def score(model: ScoreModel, x: np.ndarray):
    """Score one feature vector (scalar) or a batch of rows (array)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = forward(model, x[None, :] if single else x).out
    if single:
        return float(out[0]) if model.spec.output_dim == 1 else out[0].copy()
    return out


def vjp(model: ScoreModel, x: np.ndarray, upstream) -> np.ndarray:
    """upstream^T times the Jacobian of ``score(model, x)`` with respect to params."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.atleast_1d(np.asarray(upstream, dtype=np.float64))
    if x.ndim == 1:
        if upstream.shape != (model.spec.output_dim,):
            raise ValueError("upstream length must equal output_dim")
        return forward(model, x[None, :]).vjp(upstream[None, :])
    return forward(model, x).vjp(upstream)


def apply_update(model: ScoreModel, direction: np.ndarray, step: float) -> ScoreModel:
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != model.params.shape:
        raise ValueError("direction length does not match parameter count")
    if not np.isfinite(step):
        raise ValueError("step must be finite")
    return ScoreModel(model.spec, model.params - step * direction)


def save_model(model: ScoreModel, path) -> None:
    """Text checkpoint: one JSON header line, then one value per line (17 sig. digits)."""
    lines = [f"{CHECKPOINT_MAGIC} {json.dumps(model.spec.to_dict(), sort_keys=True)}"]
    lines += [f"{v:.17g}" for v in model.params]
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> ScoreModel:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an xrisk model checkpoint")
    spec = ScoreModelSpec.from_dict(json.loads(text[0][len(CHECKPOINT_MAGIC):]))
    values = np.array([float(t) for t in text[1:] if t.strip()])
    return ScoreModel(spec, values)
