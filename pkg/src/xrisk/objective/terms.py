"""Building blocks of compiled objectives, expressed on model outputs.

A pair term maps an anchor output ``ha`` and reference outputs ``hr`` to
per-reference values together with their derivatives in ``ha`` and ``hr``.
An outer function maps the inner value ``u`` (length k) of a block to
``(f, grad f)``.  Parameter gradients are obtained afterwards by pushing the
output-level derivatives through the model's vector-Jacobian product.
"""

from __future__ import annotations

import math

import numpy as np

from ..surrogate import SurrogateKind, pair_loss

LN2 = math.log(2.0)


# ---------------------------------------------------------------- pair terms

class LossPair:
    """``l(h(z) - h(x))`` on scalar scores."""

    def __init__(self, surrogate: SurrogateKind):
        self.surrogate = surrogate

    def __call__(self, ha, hr):
        val, dz = pair_loss(self.surrogate, hr - ha)
        return val, -dz, dz


class ExpLossPair:
    """``exp(l(h(z) - h(x)) / lam)``."""

    def __init__(self, surrogate: SurrogateKind, lam):
        self.surrogate, self.lam = surrogate, lam

    def __call__(self, ha, hr):
        val, dz = pair_loss(self.surrogate, hr - ha)
        e = np.exp(val / self.lam)
        d = e * dz / self.lam
        return e, -d, d


class ExpPair:
    """``exp(h(z) - h(x))``."""

    def __call__(self, ha, hr):
        e = np.exp(hr - ha)
        return e, -e, e


class DotExpPair:
    """``exp(e_x . e_z / tau)`` on embeddings."""

    def __init__(self, tau):
        self.tau = tau

    def __call__(self, ha, hr):
        e = np.exp(hr @ ha / self.tau)
        k = (e / self.tau)[:, None]
        return e, k * hr, k * ha[None, :]


class RbfPair:
    """``exp(-||e_x - e_z||^2)`` on embeddings."""

    def __call__(self, ha, hr):
        diff = ha[None, :] - hr
        e = np.exp(-np.sum(diff * diff, axis=1))
        da = (-2.0 * e)[:, None] * diff
        return e, da, -da


# ------------------------------------------------------------ outer functions

class Linear:
    k = 1

    def __call__(self, u, c):
        return c * u[0], np.array([c])


class Const:
    """``f == 1``: used when a bilevel kind has no compositional part."""

    k = 1

    def __call__(self, u, c):
        return 1.0, np.zeros(1)


class NegRatio:
    """``-c u1 / u2``."""

    k = 2

    def __call__(self, u, c):
        return -c * u[0] / u[1], np.array([-c / u[1], c * u[0] / (u[1] * u[1])])


class NdcgOuter:
    """``-c / log2(u + 1)``."""

    k = 1

    def __call__(self, u, c):
        lg = math.log2(u[0] + 1.0)
        return -c / lg, np.array([c / ((u[0] + 1.0) * LN2 * lg * lg)])


class Log:
    """``c ln(u[comp] + eps)``."""

    def __init__(self, k=1, comp=0, eps=0.0):
        self.k, self.comp, self.eps = k, comp, eps

    def __call__(self, u, c):
        g = np.zeros(self.k)
        x = u[self.comp] + self.eps
        g[self.comp] = c / x
        return c * math.log(x), g


class LogRatio:
    """``c (ln u2 - ln u1)``."""

    k = 2

    def __call__(self, u, c):
        return c * (math.log(u[1]) - math.log(u[0])), np.array([-c / u[0], c / u[1]])


class Power:
    """``c u^p`` (u is a mean of non-negative losses)."""

    k = 1

    def __init__(self, p):
        self.p = p

    def __call__(self, u, c):
        x = max(u[0], 0.0)
        return c * x ** self.p, np.array([c * self.p * x ** (self.p - 1.0)])


class LossOuter:
    """``c l1(u - K)``."""

    k = 1

    def __init__(self, surrogate: SurrogateKind, K):
        self.surrogate, self.K = surrogate, K

    def __call__(self, u, c):
        v, d = pair_loss(self.surrogate, u[0] - self.K)
        return c * float(v), np.array([c * float(d)])


# ---------------------------------------------------------------- direct terms

class DirectTerm:
    """Deterministic per-block term ``sum_r coef_r K(e_p[r], e_q[r])``.

    ``K`` is the inner product (``dot``) or the squared distance
    (``sqdist``).  Its gradient is exact, so it needs no moving average.
    """

    def __init__(self, kind, p, q, coef):
        if kind not in ("dot", "sqdist"):
            raise ValueError(kind)
        self.kind = kind
        self.p = np.asarray(p, dtype=np.int64)
        self.q = np.asarray(q, dtype=np.int64)
        self.coef = np.asarray(coef, dtype=np.float64)

    @property
    def ids(self):
        return np.concatenate([self.p, self.q])

    def __call__(self, E):
        """``E`` holds the outputs of ``self.ids`` in order; returns value and
        the derivative rows aligned with ``self.ids``."""
        n = self.p.size
        Ep, Eq = E[:n], E[n:]
        c = self.coef[:, None]
        if self.kind == "dot":
            val = float(np.sum(self.coef * np.sum(Ep * Eq, axis=1)))
            return val, np.concatenate([c * Eq, c * Ep])
        diff = Ep - Eq
        val = float(np.sum(self.coef * np.sum(diff * diff, axis=1)))
        return val, np.concatenate([2.0 * c * diff, -2.0 * c * diff])
