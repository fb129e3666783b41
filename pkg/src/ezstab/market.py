"""Market models, perturbation families and the processes built from them.

A :class:`MarketModel` holds coefficient functions ``r(t, s)``, ``mu(t, s)``
and ``sigma(t, s)`` of time and an optional factor state ``s``.  They are
evaluated vectorised over paths: ``s`` has shape ``(n_paths, k)``.  Prices
are never simulated; everything works with the return increments

    dR^eps = mu^eps dt + sigma^eps dW^rho,   dW^rho = rho dW + rho_perp dW_perp.

``N^eps`` and the minimal state-price density are integrated in log space,
which is exact for constant coefficients and keeps both strictly positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DomainError, NonFiniteError, ParameterError, SingularVolatilityError
from .paths import ConsumptionStream, PathBundle, TimeGrid
from .preferences import EZPreferences, UtilityPoint, aggregator_partials


@dataclass(frozen=True)
class FactorDynamics:
    """Ornstein-Uhlenbeck factor ``ds = kappa (mean - s) dt + eta dW``."""

    kappa: np.ndarray
    mean: np.ndarray
    eta: np.ndarray
    s0: np.ndarray

    @classmethod
    def ou(cls, kappa, mean, eta, s0) -> "FactorDynamics":
        arr = [np.atleast_1d(np.asarray(v, dtype=float)) for v in (kappa, mean, eta, s0)]
        return cls(*arr)

    @property
    def k(self) -> int:
        return self.s0.size

    def simulate(self, dW: np.ndarray, dt: float) -> np.ndarray:
        """Exact OU transition driven by the factor increments ``dW`` (P, M, k)."""
        P, M, k = dW.shape
        s = np.empty((P, M + 1, k))
        s[:, 0] = self.s0
        decay = np.exp(-self.kappa * dt)
        with np.errstate(divide="ignore", invalid="ignore"):
            sd = np.where(
                self.kappa > 0,
                self.eta * np.sqrt((1 - decay**2) / (2 * self.kappa * dt)),
                self.eta,
            )
        for i in range(M):
            s[:, i + 1] = self.mean + (s[:, i] - self.mean) * decay + sd * dW[:, i]
        return s


@dataclass
class PathCoefficients:
    """Coefficients evaluated along a bundle at every node ``0..M``.

    Leading axes are ``(paths, nodes)``; constant models keep a length-1
    path axis and broadcast.
    """

    r: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    dw_rho: np.ndarray  # (P, M, n) increments of W^rho
    factor: np.ndarray | None

    def left(self, name: str) -> np.ndarray:
        """Values at the left node of every step."""
        return getattr(self, name)[:, :-1]

    @property
    def market_price(self) -> np.ndarray:
        """``sigma^{-1} mu`` at every node."""
        return np.linalg.solve(self.sigma, self.mu[..., None])[..., 0]


@dataclass(frozen=True)
class MarketModel:
    """One market: ``n`` risky assets, ``k`` extra Brownian factors."""

    n: int
    k: int
    r: Callable
    mu: Callable
    sigma: Callable
    rho: np.ndarray
    rho_perp: np.ndarray
    factor: FactorDynamics | None = None
    constant: bool = False
    cond_max: float = 1e8
    label: str = ""

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float).reshape(self.n, self.k)
        rho_perp = np.asarray(self.rho_perp, dtype=float).reshape(self.n, self.n)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "rho_perp", rho_perp)
        gram = rho @ rho.T + rho_perp @ rho_perp.T
        if not np.allclose(gram, np.eye(self.n), atol=1e-10, rtol=0):
            raise ParameterError("correlation matrices must satisfy rho rho^T + rho_perp rho_perp^T = I")
        if self.k and (self.factor is None or self.factor.k != self.k):
            raise ParameterError(f"model declares k={self.k} factors but factor dynamics do not match")

    @property
    def dim(self) -> int:
        return self.k + self.n

    def coefficients(self, t: float, state=None):
        """Return ``(r, mu, sigma)`` at time ``t`` and factor ``state``.

        Raises on negative interest or a singular volatility matrix.
        """
        r = np.asarray(self.r(t, state), dtype=float)
        mu = np.asarray(self.mu(t, state), dtype=float)
        sigma = np.asarray(self.sigma(t, state), dtype=float)
        if np.any(r < 0):
            raise ParameterError(f"negative interest rate evaluated at t={t}")
        cond = np.linalg.cond(sigma.reshape(-1, self.n, self.n))
        bad = ~(cond < self.cond_max)
        if np.any(bad):
            j = int(np.argmax(bad))
            loc = None if state is None else np.asarray(state)[j].tolist()
            raise SingularVolatilityError(t, loc, float(cond[j]))
        return r, mu, sigma

    def dw_rho(self, bundle: PathBundle) -> np.ndarray:
        if bundle.dim != self.dim:
            raise ParameterError(f"bundle has dim {bundle.dim}, model needs k+n = {self.dim}")
        dW = bundle.increments[..., : self.k]
        dWp = bundle.increments[..., self.k:]
        return dW @ self.rho.T + dWp @ self.rho_perp.T

    def factor_path(self, bundle: PathBundle) -> np.ndarray | None:
        if not self.k:
            return None
        return self.factor.simulate(bundle.increments[..., : self.k], bundle.grid.dt)

    def path_coefficients(self, bundle: PathBundle, factor: np.ndarray | None = None) -> PathCoefficients:
        grid = bundle.grid
        dwr = self.dw_rho(bundle)
        if self.constant:
            r, mu, sigma = self.coefficients(0.0)
            M1 = grid.n_steps + 1
            return PathCoefficients(
                r=np.broadcast_to(r, (1, M1)),
                mu=np.broadcast_to(mu, (1, M1, self.n)),
                sigma=np.broadcast_to(sigma, (1, M1, self.n, self.n)),
                dw_rho=dwr,
                factor=None,
            )
        if factor is None:
            factor = self.factor_path(bundle)
        P = bundle.n_paths
        rs, mus, sigs = [], [], []
        for i, t in enumerate(grid.nodes):
            st = None if factor is None else factor[:, i]
            r, mu, sigma = self.coefficients(float(t), st)
            rs.append(np.broadcast_to(r, (P,)))
            mus.append(np.broadcast_to(mu, (P, self.n)))
            sigs.append(np.broadcast_to(sigma, (P, self.n, self.n)))
        return PathCoefficients(
            r=np.stack(rs, axis=1), mu=np.stack(mus, axis=1), sigma=np.stack(sigs, axis=1),
            dw_rho=dwr, factor=factor,
        )

    def constant_values(self):
        """``(r, mu, sigma)`` of a constant-coefficient model."""
        if not self.constant:
            raise ParameterError(f"model '{self.label}' does not have constant coefficients")
        r, mu, sigma = self.coefficients(0.0)
        return float(r), np.atleast_1d(mu), np.atleast_2d(sigma)


def black_scholes(r: float, mu, sigma, label: str = "black-scholes", cond_max: float = 1e8) -> MarketModel:
    """Constant-coefficient market; ``mu`` is the excess drift over ``r``."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    n = mu.size
    sigma = np.asarray(sigma, dtype=float)
    sigma = np.diag(np.broadcast_to(sigma, (n,))) if sigma.ndim <= 1 else sigma.reshape(n, n)
    r = float(r)
    return MarketModel(
        n=n, k=0,
        r=lambda t, s: r, mu=lambda t, s: mu, sigma=lambda t, s: sigma,
        rho=np.zeros((n, 0)), rho_perp=np.eye(n), constant=True,
        cond_max=cond_max, label=label,
    )


@dataclass(frozen=True)
class PerturbationFamily:
    """Markets indexed by ``eps`` in ``(-eps0, eps0)``; ``perturbed(0)`` is the base."""

    base: MarketModel
    perturbed: Callable[[float], MarketModel]
    eps0: float
    name: str = ""
    knobs: dict = field(default_factory=dict)

    def __call__(self, eps: float) -> MarketModel:
        if not abs(eps) < self.eps0:
            raise ParameterError(f"|eps|={abs(eps)} outside the admissible range (-{self.eps0}, {self.eps0})")
        return self.base if eps == 0 else self.perturbed(eps)


def shift_family(r: float, mu, sigma, a: float = 0.0, b: float = 0.0, c: float = 0.0,
                 eps0: float = 1.0, name: str = "shift") -> PerturbationFamily:
    """Constant-coefficient family ``(r + a eps, mu + b eps, sigma (1 + c eps))``."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.asarray(sigma, dtype=float)

    def perturbed(eps):
        return black_scholes(r + a * eps, mu + b * eps, sigma * (1.0 + c * eps), label=f"{name}[eps={eps}]")

    return PerturbationFamily(
        base=black_scholes(r, mu, sigma, label=f"{name}[eps=0]"), perturbed=perturbed, eps0=eps0,
        name=name, knobs={"a": a, "b": b, "c": c},
    )


def factor_vol_family(r: float, mu: float, sigma: float, loading: float, kappa: float, eta: float,
                      rho: float, s0: float = 0.0, eps0: float = 1.0,
                      name: str = "factor-vol") -> PerturbationFamily:
    """One asset, one OU factor; volatility ``sigma exp(eps loading tanh(s))``.

    At ``eps = 0`` the factor does not enter the coefficients and the market
    is Black-Scholes (driven by the correlated ``W^rho``), so the base
    problem keeps its explicit solution while every ``eps != 0`` market is
    incomplete.  ``tanh`` keeps volatility and market price of risk bounded.
    """
    if not -1.0 < rho < 1.0:
        raise ParameterError("factor correlation must lie in (-1, 1)")
    dyn = FactorDynamics.ou(kappa, 0.0, eta, s0)
    rho_m = np.array([[rho]])
    rho_p = np.array([[np.sqrt(1.0 - rho * rho)]])
    mu_v = np.array([float(mu)])

    def make(eps, constant):
        def sig(t, s):
            if s is None:
                return np.array([[sigma]])
            return (sigma * np.exp(eps * loading * np.tanh(s[:, 0])))[:, None, None]

        return MarketModel(
            n=1, k=1, r=lambda t, s: float(r), mu=lambda t, s: mu_v, sigma=sig,
            rho=rho_m, rho_perp=rho_p, factor=dyn, constant=constant, label=f"{name}[eps={eps}]",
        )

    return PerturbationFamily(
        base=make(0.0, True), perturbed=lambda eps: make(eps, False), eps0=eps0, name=name,
        knobs={"loading": loading, "kappa": kappa, "eta": eta, "rho": rho},
    )


def _lambda_from(sig0, mu0, sige, mue):
    th0 = np.linalg.solve(sig0, mu0[..., None])[..., 0]
    the = np.linalg.solve(sige, mue[..., None])[..., 0]
    return np.linalg.solve(np.swapaxes(sig0, -1, -2), (the - th0)[..., None])[..., 0]


def lambda_eps(family: PerturbationFamily, eps: float, t: float, state=None) -> np.ndarray:
    """``((sigma^0)^T)^{-1} ((sigma^eps)^{-1} mu^eps - (sigma^0)^{-1} mu^0)``."""
    model = family(eps)
    _, mu0, s0 = family.base.coefficients(t, state)
    _, mue, se = model.coefficients(t, state)
    s0 = np.broadcast_to(s0, np.broadcast_shapes(np.shape(s0), np.shape(se)))
    se = np.broadcast_to(se, s0.shape)
    mu0 = np.broadcast_to(mu0, s0.shape[:-1])
    mue = np.broadcast_to(mue, s0.shape[:-1])
    return _lambda_from(s0, mu0, se, mue)


def lambda_path(family: PerturbationFamily, eps: float, bundle: PathBundle):
    """``lambda^eps`` at every node plus the base and perturbed coefficients."""
    base, model = family.base, family(eps)
    factor = base.factor_path(bundle) if base.k else None
    c0 = base.path_coefficients(bundle, factor=factor)
    ce = model.path_coefficients(bundle, factor=factor)
    shape = np.broadcast_shapes(c0.sigma.shape, ce.sigma.shape)
    s0 = np.broadcast_to(c0.sigma, shape)
    se = np.broadcast_to(ce.sigma, shape)
    lam = _lambda_from(s0, np.broadcast_to(c0.mu, shape[:-1]), se, np.broadcast_to(ce.mu, shape[:-1]))
    return lam, c0, ce


def _check_finite(arr: np.ndarray, what: str):
    bad = ~np.isfinite(arr)
    if bad.any():
        p, n = np.argwhere(bad)[0][:2]
        raise NonFiniteError(what, int(p), int(n))


def n_eps_path(family: PerturbationFamily, eps: float, bundle: PathBundle) -> np.ndarray:
    """``N^eps`` on every node: ``dN = N ((r^0 - r^eps) dt - lambda^eps dR)``.

    ``dR = mu^0 dt + sigma^0 dW^rho``; integrated as the exact stochastic
    exponential over each step with coefficients frozen at the left node.
    """
    grid = bundle.grid
    P, M, dt = bundle.n_paths, grid.n_steps, grid.dt
    if eps == 0:
        return np.ones((P, M + 1))
    lam, c0, ce = lambda_path(family, eps, bundle)
    lam = lam[:, :-1]
    r0, re = c0.left("r"), ce.left("r")
    mu0 = np.broadcast_to(c0.left("mu"), lam.shape)
    s0 = np.broadcast_to(c0.left("sigma"), lam.shape + lam.shape[-1:])
    vol = np.einsum("pmi,pmij->pmj", lam, s0)  # lambda^T sigma^0
    drift = (r0 - re) - np.sum(lam * mu0, axis=-1) - 0.5 * np.sum(vol**2, axis=-1)
    incr = drift * dt - np.sum(vol * c0.dw_rho, axis=-1)
    incr = np.broadcast_to(incr, (P, M))
    logn = np.zeros((P, M + 1))
    np.cumsum(incr, axis=1, out=logn[:, 1:])
    _check_finite(logn, "N^eps")
    return np.exp(logn)


def minimal_spd_path(model: MarketModel, bundle: PathBundle, y: float = 1.0) -> np.ndarray:
    """Minimal state-price density ``E(-int r dt - int sigma^{-1} mu dW^rho)``, scaled to start at ``y``."""
    grid = bundle.grid
    P, M, dt = bundle.n_paths, grid.n_steps, grid.dt
    coef = model.path_coefficients(bundle)
    theta = coef.market_price[:, :-1]
    r = coef.left("r")
    incr = (-r - 0.5 * np.sum(theta**2, axis=-1)) * dt - np.sum(theta * coef.dw_rho, axis=-1)
    incr = np.broadcast_to(incr, (P, M))
    logd = np.zeros((P, M + 1))
    np.cumsum(incr, axis=1, out=logd[:, 1:])
    _check_finite(logd, "state-price density")
    return y * np.exp(logd)


def financing_strategy(family: PerturbationFamily, eps: float, pi0, bundle: PathBundle) -> np.ndarray:
    """Portfolio in the ``eps``-market whose wealth equals ``X^0 / N^eps``.

    ``pi^eps = ((sigma^eps)^T)^{-1} ((sigma^0)^T pi^0 + theta^eps - theta^0)``
    with ``theta = sigma^{-1} mu``; follows from Ito's formula for the ratio.
    """
    lam, c0, ce = lambda_path(family, eps, bundle)
    P, M1, n = bundle.n_paths, bundle.n_steps + 1, family.base.n
    pi0 = np.broadcast_to(np.asarray(pi0, dtype=float).reshape(-1, n) if np.ndim(pi0) < 3 else pi0, (P, M1, n))
    s0 = np.broadcast_to(c0.sigma, (P, M1, n, n))
    se = np.broadcast_to(ce.sigma, (P, M1, n, n))
    dtheta = np.einsum("pmji,pmj->pmi", s0, np.broadcast_to(lam, (P, M1, n)))  # (sigma^0)^T lambda
    target = np.einsum("pmji,pmj->pmi", s0, pi0) + dtheta
    return np.linalg.solve(np.swapaxes(se, -1, -2), target[..., None])[..., 0]


def asset_prices(model: MarketModel, bundle: PathBundle, s0=1.0) -> np.ndarray:
    """Reconstruct risky prices ``(P, M+1, n)`` for display only."""
    coef = model.path_coefficients(bundle)
    dt = bundle.grid.dt
    r = coef.left("r")[..., None]
    mu, sig = coef.left("mu"), coef.left("sigma")
    var = np.sum(sig**2, axis=-1)
    shock = np.einsum("pmij,pmj->pmi", np.broadcast_to(sig, coef.dw_rho.shape + (model.n,)), coef.dw_rho)
    incr = (r + mu - 0.5 * var) * dt + shock
    logs = np.zeros((bundle.n_paths, bundle.n_steps + 1, model.n))
    np.cumsum(incr, axis=1, out=logs[:, 1:])
    return np.asarray(s0, dtype=float) * np.exp(logs)


def utility_gradient_density(prefs: EZPreferences, c, u_path: np.ndarray, grid: TimeGrid,
                             y: float) -> np.ndarray:
    """Deflator ``C exp(int_0^t df/du ds) df/dc`` along ``(c, U)``, with ``C`` set so it starts at ``y``.

    ``c`` is a :class:`ConsumptionStream` (its rates are used, including the
    rate in force at ``T``) or an array of rates.
    """
    rates = c.rates() if isinstance(c, ConsumptionStream) else np.atleast_2d(np.asarray(c, dtype=float))
    u = np.atleast_2d(np.asarray(u_path, dtype=float))
    try:
        dfc, dfu = aggregator_partials(prefs, UtilityPoint(rates, u))
    except DomainError as exc:
        raise DomainError("utility-gradient density needs domain-valid (c, U) on every node", **exc.values) from exc
    integral = np.zeros_like(dfu)
    integral[:, 1:] = np.cumsum(0.5 * grid.dt * (dfu[:, 1:] + dfu[:, :-1]), axis=1)
    dens = np.exp(integral) * dfc
    return y * dens / dens[:, :1]
