"""Value brackets for perturbed markets.

The primal side evaluates a feasible candidate consumption built from the
unperturbed optimizer; the dual side evaluates a deflator built from the
unperturbed dual optimizer.  Their values sandwich the perturbed value
function up to Monte-Carlo and discretization error.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import minimize_scalar

from .bsde import Basis, evaluate_dual, evaluate_utility
from .errors import DomainError, GridBoundaryError, InadmissibleError, OptimizerError, ParameterError
from .market import MarketModel, PerturbationFamily, financing_strategy, n_eps_path, utility_gradient_density
from .paths import ConsumptionStream, PathBundle, RatioPolicy, TimeGrid, clock_integral, simulate_wealth
from .preferences import EZPreferences


@dataclass
class OracleSolution:
    """Exact solution of a constant-coefficient problem.

    Unpacks as ``(u_exact, k_path, pi_star)``; ``k_path`` is a callable of time.
    """

    u_exact: float
    pi_star: np.ndarray
    h0: float
    x: float
    prefs: EZPreferences = field(repr=False)
    _h: object = field(repr=False, default=None)
    trace: list = field(repr=False, default_factory=list)

    def h(self, t):
        return self._h(np.asarray(t, dtype=float))

    def ratio(self, t) -> np.ndarray:
        """Optimal consumption-wealth ratio ``k(t) = delta^psi H(t)^(-psi/theta)``."""
        pr = self.prefs
        return pr.delta**pr.psi * self.h(t) ** (-pr.psi / pr.theta)

    def k_path(self, grid: TimeGrid) -> np.ndarray:
        return self.ratio(grid.nodes)

    @property
    def y_star(self) -> float:
        """Marginal value ``du/dx``, the minimizer of the conjugate problem."""
        return self.h0 * self.x ** (-self.prefs.gamma)

    def utility_path(self, wealth: np.ndarray, grid: TimeGrid) -> np.ndarray:
        g = self.prefs.gamma
        return self.h(grid.nodes) * np.asarray(wealth) ** (1.0 - g) / (1.0 - g)

    def __iter__(self):
        return iter((self.u_exact, self.ratio, self.pi_star))


def _h_rhs(prefs: EZPreferences, q: float, k_fn):
    d, th, p, g = prefs.delta, prefs.theta, prefs.p, prefs.gamma

    def rhs(t, h):
        hv = np.maximum(h, 1e-300)
        k = k_fn(t, hv)
        return d * th * hv - d * th * k**p * hv ** (1.0 - 1.0 / th) + (g - 1.0) * hv * (q - k)

    return rhs


def _optimal_k(prefs: EZPreferences):
    return lambda t, h: prefs.delta**prefs.psi * h ** (-prefs.psi / prefs.theta)


def _solve_h(prefs: EZPreferences, T: float, q: float, k_fn=None, dense: bool = False):
    k_fn = k_fn or _optimal_k(prefs)
    sol = solve_ivp(_h_rhs(prefs, q, k_fn), (T, 0.0), [1.0], method="DOP853", rtol=1e-11, atol=1e-13,
                    dense_output=dense)
    if not sol.success:
        raise OptimizerError(f"ODE integration failed: {sol.message}")
    return sol


def certainty_rate(r: float, mu, sigma, pi, gamma: float) -> float:
    """``r + pi.mu - gamma/2 |sigma^T pi|^2`` for a constant weight ``pi``."""
    pi = np.atleast_1d(np.asarray(pi, dtype=float))
    return float(r + pi @ mu - 0.5 * gamma * np.sum((sigma.T @ pi) ** 2))


def policy_value(prefs: EZPreferences, r: float, mu, sigma, pi, ratio_fn, T: float, x: float) -> float:
    """Utility of a constant weight and a deterministic ratio ``ratio_fn(t)``."""
    q = certainty_rate(r, np.atleast_1d(mu), np.atleast_2d(sigma), pi, prefs.gamma)
    sol = _solve_h(prefs, T, q, lambda t, h: ratio_fn(t))
    h0 = float(sol.y[0, -1])
    return h0 * x ** (1.0 - prefs.gamma) / (1.0 - prefs.gamma)


def constant_model_value(prefs: EZPreferences, model: MarketModel, x: float, T: float) -> OracleSolution:
    """Exact value, weight and ratio of a constant-coefficient market.

    Within constant weights and deterministic ratios the utility is
    ``H(t) X^(1-gamma)/(1-gamma)`` with ``H`` solving a scalar ODE.  The ratio
    is optimized pointwise and the weight through the certainty rate; the
    ODE is integrated to high accuracy.
    """
    prefs.require_main_regime("the constant-coefficient oracle")
    if not x > 0:
        raise ParameterError("initial wealth must be positive")
    r, mu, sigma = model.constant_values()
    trace = []

    def h0_of(pi):
        q = certainty_rate(r, mu, sigma, pi, prefs.gamma)
        h0 = float(_solve_h(prefs, T, q).y[0, -1])
        trace.append((np.array(pi, dtype=float).tolist(), h0))
        return h0

    # The weight enters only through the certainty rate, a concave quadratic,
    # so its maximizer is exact.  1 - gamma < 0, so the best weight minimizes
    # H(0); a scalar search along each coordinate confirms it.
    pi_star = np.linalg.solve(sigma @ sigma.T, mu) / prefs.gamma
    h_star = h0_of(pi_star)
    for j in range(model.n):
        e = np.zeros(model.n)
        e[j] = 1.0
        res = minimize_scalar(lambda s: h0_of(pi_star + s * e), bounds=(-0.5, 0.5), method="bounded",
                              options={"xatol": 1e-8})
        if res.fun < h_star - 1e-10 * abs(h_star):
            raise OptimizerError(f"weight {pi_star} is not optimal along coordinate {j}", trace)
    q = certainty_rate(r, mu, sigma, pi_star, prefs.gamma)
    sol = _solve_h(prefs, T, q, dense=True)
    h0 = float(sol.y[0, -1])
    dense = sol.sol
    return OracleSolution(
        u_exact=h0 * x ** (1.0 - prefs.gamma) / (1.0 - prefs.gamma), pi_star=pi_star, h0=h0, x=float(x),
        prefs=prefs, _h=lambda t: dense(t)[0], trace=trace,
    )


@dataclass
class BaseOptimizer:
    """The unperturbed optimizer simulated on a bundle."""

    oracle: OracleSolution
    wealth: object  # WealthPath
    consumption: ConsumptionStream
    utility: np.ndarray

    def deflator(self, prefs: EZPreferences, grid: TimeGrid, y: float) -> np.ndarray:
        return utility_gradient_density(prefs, self.consumption, self.utility, grid, y)


def base_optimizer(prefs: EZPreferences, family: PerturbationFamily, x: float, bundle: PathBundle,
                   oracle: OracleSolution | None = None) -> BaseOptimizer:
    grid = bundle.grid
    oracle = oracle or constant_model_value(prefs, family.base, x, grid.T)
    wealth = simulate_wealth(family.base, oracle.pi_star, RatioPolicy(oracle.k_path(grid)), x, bundle)
    # utility at T is that of the bequest, i.e. of wealth before the lump
    util = oracle.utility_path(np.column_stack([wealth.values[:, :-1], wealth.pre_atom]), grid)
    return BaseOptimizer(oracle, wealth, wealth.consumption, util)


def clamp_levels(x: float, T: float, delta_prime: float | None = None, M: float | None = None):
    dp = 1e-3 * x if delta_prime is None else float(delta_prime)
    big = 1e3 * x / (T + 1.0) if M is None else float(M)
    if not (dp > 0 and big > 0):
        raise ParameterError("clamp levels must be positive")
    return dp, big


def candidate_consumption(base_opt: ConsumptionStream, n_eps, x: float, delta_prime: float,
                          M: float) -> ConsumptionStream:
    """Clamp ``c / N`` node-wise to ``[x delta'/(x + delta'), M]``."""
    n_eps = np.broadcast_to(np.asarray(n_eps, dtype=float), base_opt.values.shape)
    if np.any(~(n_eps > 0)):
        raise DomainError("N^eps must be positive", n=n_eps[~(n_eps > 0)].ravel()[:5].tolist())
    lo = x * delta_prime / (x + delta_prime)
    if lo > M:
        raise ParameterError(f"lower clamp {lo} exceeds upper clamp {M}")
    vals = np.clip(base_opt.values / n_eps, lo, M)
    tr = None
    if base_opt.terminal_rate is not None:
        tr = np.clip(base_opt.terminal_rate / n_eps[..., -1], lo, M)
    return ConsumptionStream(vals, f"candidate({base_opt.description})", terminal_rate=tr)


@dataclass
class PrimalCandidate:
    value: float
    se: float
    consumption: ConsumptionStream
    wealth: object
    utility: np.ndarray
    n_eps: np.ndarray


def primal_candidate(prefs: EZPreferences, family: PerturbationFamily, eps: float, x: float,
                     delta_prime: float | None, M: float | None, bundle: PathBundle,
                     basis: Basis | None = None, base: BaseOptimizer | None = None,
                     **eval_kw) -> PrimalCandidate:
    """Candidate ``c^eps``, its financing wealth in the ``eps``-market and its utility."""
    grid = bundle.grid
    base = base or base_optimizer(prefs, family, x, bundle)
    dp, big = clamp_levels(x, grid.T, delta_prime, M)
    n = n_eps_path(family, eps, bundle)
    cand = candidate_consumption(base.consumption, n, x, dp, big)
    pi_eps = financing_strategy(family, eps, base.oracle.pi_star, bundle)
    lo = x * dp / (x + dp)
    wealth = simulate_wealth(family(eps), pi_eps, cand, x, bundle, terminal="all", lump_bounds=(lo, big))
    if not wealth.admissible:
        raise InadmissibleError(f"candidate at eps={eps} is not financeable", wealth.violating_fraction)
    ev = evaluate_utility(prefs, wealth.consumption, bundle, basis, **eval_kw)
    return PrimalCandidate(ev.value0, ev.se, wealth.consumption, wealth, ev.path, n)


def primal_lower_bound(prefs: EZPreferences, family: PerturbationFamily, eps: float, x: float,
                       delta_prime: float | None, M: float | None, bundle: PathBundle,
                       basis: Basis | None = None, **kw) -> float:
    return primal_candidate(prefs, family, eps, x, delta_prime, M, bundle, basis, **kw).value


@dataclass
class DualCandidate:
    value: float
    se: float
    deflator: np.ndarray
    v_path: np.ndarray


def dual_candidate(prefs: EZPreferences, family: PerturbationFamily, eps: float, x: float, y: float,
                   bundle: PathBundle, basis: Basis | None = None, base: BaseOptimizer | None = None,
                   n_eps=None, **eval_kw) -> DualCandidate:
    if not y > 0:
        raise ParameterError("dual variable y must be positive")
    base = base or base_optimizer(prefs, family, x, bundle)
    n = n_eps_path(family, eps, bundle) if n_eps is None else n_eps
    D = base.deflator(prefs, bundle.grid, y) * n
    ev = evaluate_dual(prefs, D, bundle, basis, **eval_kw)
    return DualCandidate(ev.value0 + x * y, ev.se, D, ev.path)


def dual_upper_bound(prefs: EZPreferences, family: PerturbationFamily, eps: float, x: float, y: float,
                     bundle: PathBundle, basis: Basis | None = None, **kw) -> float:
    return dual_candidate(prefs, family, eps, x, y, bundle, basis, **kw).value


def y_guess(prefs: EZPreferences, x: float) -> float:
    return prefs.delta * x ** (-prefs.gamma)


def log_grid(center: float, n_points: int = 33, factor: float = 8.0) -> np.ndarray:
    return np.geomspace(center / factor, center * factor, n_points)


@dataclass
class ScanResult:
    """Unpacks as ``(y_star, gap)``."""

    y_star: float
    gap: float
    y_grid: np.ndarray
    values: np.ndarray
    ses: np.ndarray
    u_exact: float
    widened: bool = False
    refined_value: float | None = None

    @property
    def minimum(self) -> float:
        return float(self.values.min() if self.refined_value is None else min(self.refined_value, self.values.min()))

    def __iter__(self):
        return iter((self.y_star, self.gap))


def conjugacy_scan(prefs: EZPreferences, family: PerturbationFamily, x: float, y_grid, bundle: PathBundle,
                   basis: Basis | None = None, base: BaseOptimizer | None = None, widen: bool = True,
                   refine: bool = False, **eval_kw) -> ScanResult:
    """Minimize ``v(y) + x y`` over a log-spaced grid at ``eps = 0``.

    ``y_grid=None`` uses 33 points over ``[y_g/8, 8 y_g]`` with
    ``y_g = delta x^(-gamma)``.  A minimum on the grid boundary re-centers
    the grid there once; a second boundary hit raises.
    """
    base = base or base_optimizer(prefs, family, x, bundle)
    ys = log_grid(y_guess(prefs, x)) if y_grid is None else np.asarray(y_grid, dtype=float)
    if np.any(~(ys > 0)) or np.any(np.diff(ys) <= 0):
        raise ParameterError("y grid must be positive and increasing")
    ones = np.ones((bundle.n_paths, bundle.n_steps + 1))

    def scan(grid_y):
        out = [dual_candidate(prefs, family, 0.0, x, y, bundle, basis, base=base, n_eps=ones, **eval_kw)
               for y in grid_y]
        return np.array([o.value for o in out]), np.array([o.se for o in out])

    vals, ses = scan(ys)
    widened = False
    j = int(np.argmin(vals))
    if j in (0, len(ys) - 1):
        if not widen:
            raise GridBoundaryError(f"conjugacy minimum on grid boundary y={ys[j]:.4g}; widen the grid")
        ratio = ys[-1] / ys[0]
        ys = np.geomspace(ys[j] / np.sqrt(ratio), ys[j] * np.sqrt(ratio), len(ys))
        vals, ses = scan(ys)
        widened = True
        j = int(np.argmin(vals))
        if j in (0, len(ys) - 1):
            raise GridBoundaryError(f"conjugacy minimum on grid boundary y={ys[j]:.4g} after widening")
    y_star = float(ys[j])
    refined = None
    if refine:
        f = lambda ly: dual_candidate(prefs, family, 0.0, x, float(np.exp(ly)), bundle, basis, base=base,
                                      n_eps=ones, **eval_kw).value
        res = minimize_scalar(f, bounds=(np.log(ys[j - 1]), np.log(ys[j + 1])), method="bounded",
                              options={"xatol": 1e-4})
        if res.fun < vals[j]:
            y_star, refined = float(np.exp(res.x)), float(res.fun)
    u = base.oracle.u_exact
    best = vals[j] if refined is None else refined
    return ScanResult(y_star=y_star, gap=float(best - u), y_grid=ys, values=vals, ses=ses, u_exact=u,
                      widened=widened, refined_value=refined)


@dataclass
class HolderCheck:
    """Unpacks as ``(finite, estimate, spread)``."""

    finite: bool
    estimate: float
    spread: float
    se: float
    batch_means: np.ndarray

    def __iter__(self):
        return iter((self.finite, self.estimate, self.spread))


def reverse_holder_check(prefs: EZPreferences, D, grid: TimeGrid, n_batches: int = 4,
                         max_spread: float = 0.5) -> HolderCheck:
    """Estimate ``E int D^(1-psi) dkappa`` and check it is stable across batches.

    The spread is ``(max - min)/|mean|`` of the batch means; ``finite`` is
    false when it exceeds ``max_spread``.
    """
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if np.any(~(D > 0)):
        raise DomainError("deflator must be positive", d=D[~(D > 0)][:5].tolist())
    per_path = clock_integral(D ** (1.0 - prefs.psi), grid)
    est = float(per_path.mean())
    batches = np.array([b.mean() for b in np.array_split(per_path, n_batches)]) if per_path.size >= n_batches \
        else np.array([est])
    spread = float((batches.max() - batches.min()) / abs(est)) if est != 0 else 0.0
    se = float(per_path.std(ddof=1) / np.sqrt(per_path.size)) if per_path.size > 1 else 0.0
    finite = bool(np.isfinite(est) and spread <= max_spread)
    return HolderCheck(finite, est, spread, se, batches)


@dataclass
class ValueBracket:
    x: float
    eps: float
    lower: float
    upper: float
    y_used: float
    se_lower: float
    se_upper: float
    delta_prime: float
    M: float
    seed: int
    u_exact: float | None = None

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @property
    def combined_se(self) -> float:
        return self.se_lower + self.se_upper

    @property
    def weak_duality(self) -> bool:
        return self.lower <= self.upper + 2.0 * self.combined_se

    def contains(self, value: float, slack: float = 0.0) -> bool:
        return self.lower - 2.0 * self.se_lower - slack <= value <= self.upper + 2.0 * self.se_upper + slack


BRACKET_COLUMNS = ["x", "eps", "y", "lower", "upper", "se_lower", "se_upper", "width",
                   "delta_prime", "M", "seed", "u_exact"]


def bracket(prefs: EZPreferences, family: PerturbationFamily, eps: float, x: float, y: float,
            bundle: PathBundle, basis: Basis | None = None, delta_prime: float | None = None,
            M: float | None = None, base: BaseOptimizer | None = None, exact: bool = False,
            **eval_kw) -> ValueBracket:
    """Primal and dual bounds at one ``eps`` on a shared bundle."""
    base = base or base_optimizer(prefs, family, x, bundle)
    dp, big = clamp_levels(x, bundle.grid.T, delta_prime, M)
    lo = primal_candidate(prefs, family, eps, x, dp, big, bundle, basis, base=base, **eval_kw)
    up = dual_candidate(prefs, family, eps, x, y, bundle, basis, base=base, n_eps=lo.n_eps, **eval_kw)
    u = None
    if exact and family(eps).constant:
        u = constant_model_value(prefs, family(eps), x, bundle.grid.T).u_exact
    return ValueBracket(x=float(x), eps=float(eps), lower=lo.value, upper=up.value, y_used=float(y),
                        se_lower=lo.se, se_upper=up.se, delta_prime=dp, M=big, seed=bundle.seed, u_exact=u)


def brackets_to_csv(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BRACKET_COLUMNS)
        for b in rows:
            d = asdict(b)
            w.writerow([repr(float(d["x"])), repr(float(d["eps"])), repr(float(d["y_used"])),
                        repr(d["lower"]), repr(d["upper"]), repr(d["se_lower"]), repr(d["se_upper"]),
                        repr(b.width), repr(d["delta_prime"]), repr(d["M"]), d["seed"],
                        "" if d["u_exact"] is None else repr(d["u_exact"])])
