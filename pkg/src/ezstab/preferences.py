"""Epstein-Zin preference primitives.

Everything here is a pure function of the preference parameters
``(gamma, psi, delta)``.  Functions accept scalars or numpy arrays and
broadcast; domain violations raise :class:`~ezstab.errors.DomainError`
instead of returning NaN.

Notation used throughout the package:

    theta = (1 - gamma) / (1 - 1/psi)          p = 1 - 1/psi

    f(c, u) = delta c^p / p ((1-gamma) u)^(1 - 1/theta) - delta theta u
    g(d, v) = delta^psi d^(1-psi) / (psi-1) ((1-gamma) v)^(1 - gamma psi/theta) - delta theta v
    U_T(c)  = c^(1-gamma) / (1-gamma)
    V_T(d)  = gamma / (1-gamma) d^((gamma-1)/gamma)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ParameterError


def _theta(gamma: float, psi: float) -> float:
    if psi == 1.0:
        raise ParameterError("psi = 1 is a degenerate parametrization (log EIS limit)")
    if gamma == 1.0:
        raise ParameterError("gamma = 1 is a degenerate parametrization (log risk aversion)")
    return (1.0 - gamma) / (1.0 - 1.0 / psi)


@dataclass(frozen=True)
class EZPreferences:
    """Risk aversion ``gamma``, EIS ``psi`` and discount rate ``delta``.

    ``theta`` is derived on construction and never passed in.
    """

    gamma: float
    psi: float
    delta: float
    theta: float = field(init=False)

    def __post_init__(self):
        for name in ("gamma", "psi", "delta"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ParameterError(f"{name} must be a positive finite number, got {value!r}")
        object.__setattr__(self, "theta", _theta(self.gamma, self.psi))

    @property
    def p(self) -> float:
        return 1.0 - 1.0 / self.psi

    @property
    def main_regime(self) -> bool:
        return self.gamma > 1.0 and self.psi > 1.0

    @property
    def additive(self) -> bool:
        return abs(self.theta - 1.0) < 1e-12

    def require_main_regime(self, where: str = "this operation") -> None:
        if not self.main_regime:
            raise ParameterError(
                f"{where} requires gamma > 1 and psi > 1; got gamma={self.gamma}, psi={self.psi}"
            )


@dataclass(frozen=True)
class UtilityPoint:
    """A (consumption, utility) argument pair; fields may be arrays."""

    c: float | np.ndarray
    u: float | np.ndarray

    def is_valid(self, prefs: EZPreferences) -> bool:
        c = np.asarray(self.c)
        u = np.asarray(self.u)
        return bool(np.all(c > 0) and np.all((1.0 - prefs.gamma) * u > 0))


def theta(prefs: EZPreferences) -> float:
    return _theta(prefs.gamma, prefs.psi)


def _check_point(prefs: EZPreferences, c, u):
    c = np.asarray(c, dtype=float)
    u = np.asarray(u, dtype=float)
    if np.any(~(c > 0)):
        raise DomainError("aggregator requires c > 0", c=c[~(c > 0)].ravel()[:5].tolist())
    w = (1.0 - prefs.gamma) * u
    if np.any(~(w > 0)):
        raise DomainError(
            "aggregator requires (1 - gamma) u > 0", u=u[~(w > 0)].ravel()[:5].tolist()
        )
    return c, u, w


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def aggregator_f(prefs: EZPreferences, p: UtilityPoint):
    c, u, w = _check_point(prefs, p.c, p.u)
    pp, th, d = prefs.p, prefs.theta, prefs.delta
    return _out(d * c**pp / pp * w ** (1.0 - 1.0 / th) - d * th * u)


def aggregator_partials(prefs: EZPreferences, p: UtilityPoint):
    """Return ``(df/dc, df/du)`` at ``p``."""
    c, u, w = _check_point(prefs, p.c, p.u)
    pp, th, d, g = prefs.p, prefs.theta, prefs.delta, prefs.gamma
    df_dc = d * c ** (-1.0 / prefs.psi) * w ** (1.0 - 1.0 / th)
    # d/du of w^(1-1/theta) is (1-1/theta) (1-gamma) w^(-1/theta)
    df_du = d * c**pp / pp * (1.0 - 1.0 / th) * (1.0 - g) * w ** (-1.0 / th) - d * th
    return _out(df_dc), _out(df_du)


def dual_aggregator_g(prefs: EZPreferences, d, v):
    d = np.asarray(d, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(~(d > 0)):
        raise DomainError("dual aggregator requires d > 0", d=d[~(d > 0)].ravel()[:5].tolist())
    w = (1.0 - prefs.gamma) * v
    if np.any(~(w > 0)):
        raise DomainError(
            "dual aggregator requires (1 - gamma) v > 0", v=v[~(w > 0)].ravel()[:5].tolist()
        )
    g, psi, th, dl = prefs.gamma, prefs.psi, prefs.theta, prefs.delta
    return _out(dl**psi * d ** (1.0 - psi) / (psi - 1.0) * w ** (1.0 - g * psi / th) - dl * th * v)


def bequest_utility(prefs: EZPreferences, c):
    c = np.asarray(c, dtype=float)
    if np.any(~(c > 0)):
        raise DomainError("bequest utility requires c > 0", c=c[~(c > 0)].ravel()[:5].tolist())
    g = prefs.gamma
    return _out(c ** (1.0 - g) / (1.0 - g))


def bequest_dual(prefs: EZPreferences, d):
    """Convex conjugate of the bequest utility: ``sup_c [U_T(c) - c d]``."""
    d = np.asarray(d, dtype=float)
    if np.any(~(d > 0)):
        raise DomainError("bequest dual requires d > 0", d=d[~(d > 0)].ravel()[:5].tolist())
    g = prefs.gamma
    return _out(g / (1.0 - g) * d ** ((g - 1.0) / g))


def transform_u_to_y(prefs: EZPreferences, t, u):
    return _out(np.exp(-prefs.delta * prefs.theta * np.asarray(t)) * (1.0 - prefs.gamma) * np.asarray(u))


def transform_y_to_u(prefs: EZPreferences, t, y):
    return _out(np.exp(prefs.delta * prefs.theta * np.asarray(t)) * np.asarray(y) / (1.0 - prefs.gamma))


def transform_y_to_bby(prefs: EZPreferences, y, z):
    """Map ``(Y, Z)`` to the jointly concave pair ``(bbY, bbZ)``.

    ``bbY = Y^(1/theta) / p`` and ``bbZ = Y^(1/theta - 1) Z / (p theta)``.
    ``z`` broadcasts against ``y`` with a trailing Brownian dimension.
    """
    y = np.asarray(y, dtype=float)
    if np.any(~(y > 0)):
        raise DomainError("transform requires y > 0", y=y[~(y > 0)].ravel()[:5].tolist())
    p, th = prefs.p, prefs.theta
    z = np.asarray(z, dtype=float)
    bby = y ** (1.0 / th) / p
    scale = y ** (1.0 / th - 1.0) / (p * th)
    bbz = scale[..., None] * z if z.ndim > y.ndim else scale * z
    return _out(bby), _out(bbz)


def dbby_dy(prefs: EZPreferences, y):
    """Derivative of ``bbY`` with respect to ``y``."""
    y = np.asarray(y, dtype=float)
    p, th = prefs.p, prefs.theta
    return _out(y ** (1.0 / th - 1.0) / (p * th))
