"""Least-squares Monte Carlo for the transformed utility and dual equations.

Two generator kinds are supported.

``utility-Y``
    ``Y_t = e^{-delta theta t} (1-gamma) U_t`` solves
    ``Y_t = e^{-delta theta T} c_T^{1-gamma} + int_t^T F(s, c_s, Y_s) ds - int Z dB``
    with ``F(t, c, y) = delta theta e^{-delta t} c^p y^{1-1/theta}``.

``dual-V``
    ``V_t = E_t[V_T(D_T) + int_t^T g(D_s, V_s / gamma) ds]``.

Both are solved with the truncated (globally Lipschitz) generators
``F^m = delta theta e^{-delta t} (c^p ^ m)(|y| ^ m)^{1-1/theta}`` and the
analogous cap for ``g``, plus a terminal cap ``n``.  Each backward step uses
an implicit theta-scheme whose nonlinearity is resolved by a fixed number of
Picard iterations.
"""

from __future__ import annotations

import csv
import itertools
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, ParameterError, RegressionError
from .paths import ConsumptionStream, PathBundle
from .preferences import EZPreferences

UTILITY = "utility-Y"
DUAL = "dual-V"


class TruncationWarning(RuntimeWarning):
    """The generator cap bit on more nodes than the configured fraction."""


@dataclass(frozen=True)
class Truncation:
    n_level: float = np.inf
    m_level: float = np.inf

    def __post_init__(self):
        if not (self.n_level > 0 and self.m_level > 0):
            raise ParameterError("truncation levels must be positive")


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str
    prefs: EZPreferences
    truncation: Truncation = field(default_factory=Truncation)

    def __post_init__(self):
        if self.kind not in (UTILITY, DUAL):
            raise ParameterError(f"unknown generator kind {self.kind!r}")

    @property
    def y_sign(self) -> float:
        """Sign the solution keeps on its domain."""
        return 1.0 if self.kind == UTILITY else float(np.sign(1.0 - self.prefs.gamma))

    @property
    def y_exponent(self) -> float:
        pr = self.prefs
        if self.kind == UTILITY:
            return 1.0 - 1.0 / pr.theta
        return 1.0 - pr.gamma * pr.psi / pr.theta

    def lipschitz(self) -> float:
        """Lipschitz constant in ``y`` of the truncated generator (``inf`` if unbounded)."""
        pr, m = self.prefs, self.truncation.m_level
        q = self.y_exponent
        if self.kind == UTILITY:
            lead, scale = abs(pr.delta * pr.theta), 1.0
            lin = 0.0
        else:
            lead = pr.delta**pr.psi / abs(pr.psi - 1.0)
            scale = abs(1.0 - pr.gamma) / pr.gamma
            lin = abs(pr.delta * pr.theta / pr.gamma)
        if q == 0:
            return lin
        if q < 1 or not np.isfinite(m):
            return np.inf
        return lead * m * q * m ** (q - 1.0) * scale + lin

    def driver(self, t: float, x: np.ndarray, y: np.ndarray):
        """Truncated generator at time ``t``; returns ``(values, saturated_x, saturated_y)``.

        ``x`` is the consumption rate (utility) or the deflator (dual).
        """
        pr, m = self.prefs, self.truncation.m_level
        if self.kind == UTILITY:
            xp = x**pr.p
            w = np.abs(y)
            lead = pr.delta * pr.theta * np.exp(-pr.delta * t)
            sat_x, sat_y = xp > m, w > m
            return lead * np.minimum(xp, m) * np.minimum(w, m) ** self.y_exponent, sat_x, sat_y
        xp = x ** (1.0 - pr.psi)
        w = np.abs((1.0 - pr.gamma) * y / pr.gamma)
        sat_x, sat_y = xp > m, w > m
        nonlin = pr.delta**pr.psi / (pr.psi - 1.0) * np.minimum(xp, m) * np.minimum(w, m) ** self.y_exponent
        return nonlin - pr.delta * pr.theta * y / pr.gamma, sat_x, sat_y

    def exact_driver(self, t: float, x, y) -> np.ndarray:
        """Untruncated generator (``m = inf``)."""
        return GeneratorSpec(self.kind, self.prefs).driver(t, np.asarray(x), np.asarray(y))[0]

    def cap_terminal(self, terminal) -> tuple[np.ndarray, int]:
        term = np.asarray(terminal, dtype=float)
        n = self.truncation.n_level
        hit = np.abs(term) > n
        return np.where(hit, np.sign(term) * n, term), int(hit.sum())


@dataclass(frozen=True)
class Basis:
    """Regression basis on the Markov state.

    Total-degree polynomial in the standardized log of the primary state
    (and the standardized extra state columns), plus power functions of the
    primary state.  ``powers=None`` selects the exponent under which the
    value function of a homothetic problem is exactly linear.
    """

    degree: int = 2
    powers: tuple | None = None
    strict: bool = False

    def __post_init__(self):
        if self.degree < 0:
            raise ParameterError("basis degree must be nonnegative")

    def default_powers(self, gen: GeneratorSpec) -> tuple:
        if self.powers is not None:
            return tuple(self.powers)
        g = gen.prefs.gamma
        return (1.0 - g,) if gen.kind == UTILITY else ((g - 1.0) / g,)

    def features(self, primary: np.ndarray, extra: np.ndarray | None, powers: tuple) -> np.ndarray:
        """Design matrix with intercept first; near-constant columns are dropped."""
        cols = [np.log(np.maximum(primary, 1e-300))]
        if extra is not None:
            cols.extend(np.atleast_2d(extra.T))
        std_cols = []
        for c in cols:
            s = c.std()
            if s > 1e-12 * (1.0 + abs(c.mean())):
                std_cols.append((c - c.mean()) / s)
        out = [np.ones_like(primary)]
        for d in range(1, self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(len(std_cols)), d):
                out.append(np.prod([std_cols[j] for j in combo], axis=0))
        for a in powers:
            pw = np.maximum(primary, 1e-300) ** a
            s = pw.std()
            if s > 1e-12 * (1.0 + abs(pw.mean())):
                out.append((pw - pw.mean()) / s)
        return np.column_stack(out)


class _Regressor:
    """Least-squares projection onto one design matrix, reused across targets."""

    def __init__(self, design: np.ndarray, strict: bool):
        self.design = design
        q, r = np.linalg.qr(design)
        diag = np.abs(np.diag(r))
        tol = diag.max() * max(design.shape) * np.finfo(float).eps
        self.rank = int(np.sum(diag > tol))
        if self.rank < design.shape[1]:
            if strict:
                raise RegressionError(f"design matrix rank {self.rank} < {design.shape[1]} columns")
            self._lstsq = True
        else:
            self._lstsq = False
            self.q = q

    def fit(self, target: np.ndarray) -> np.ndarray:
        if self._lstsq:
            coef = np.linalg.lstsq(self.design, target, rcond=None)[0]
            return self.design @ coef
        return self.q @ (self.q.T @ target)


@dataclass
class StepDiagnostics:
    step: int
    t: float
    residual_rms: float
    rank: int
    n_features: int
    saturated_x: int
    saturated_y: int
    floors: int


@dataclass
class BsdeSolution:
    y: np.ndarray
    z: np.ndarray
    truncation: Truncation
    kind: str
    value0: float
    se: float
    pathwise: np.ndarray = field(repr=False)
    diagnostics: list = field(default_factory=list, repr=False)
    lipschitz: float = np.inf
    terminal_capped: int = 0
    ui_proxy: float = 0.0
    ladder_diff: float | None = None

    @property
    def saturation(self) -> float:
        """Fraction of (path, step) cells where either cap was active."""
        n = self.y.shape[0] * max(len(self.diagnostics), 1)
        hits = sum(max(d.saturated_x, d.saturated_y) for d in self.diagnostics)
        return hits / n

    @property
    def floor_events(self) -> int:
        return sum(d.floors for d in self.diagnostics)

    def to_csv(self, path: str | Path) -> None:
        fields = ["step", "t", "residual_rms", "rank", "n_features", "saturated_x", "saturated_y", "floors"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(fields)
            for d in sorted(self.diagnostics, key=lambda d: d.step):
                w.writerow([d.step, repr(d.t), repr(d.residual_rms), d.rank, d.n_features,
                            d.saturated_x, d.saturated_y, d.floors])


def default_truncation(gen_kind: str, prefs: EZPreferences, driver_inputs, terminal) -> Truncation:
    """Caps at 10x the 99.9th percentile of the driver input power and of the terminal.

    The generator cap bounds both ``x`` and ``|y|`` so it takes the larger
    of the two data scales.
    """
    x = np.asarray(driver_inputs, dtype=float)
    xp = x**prefs.p if gen_kind == UTILITY else x ** (1.0 - prefs.psi)
    term = np.abs(np.asarray(terminal, dtype=float))
    if gen_kind == DUAL:
        term = term * abs(1.0 - prefs.gamma) / prefs.gamma
    qx = float(np.percentile(xp, 99.9))
    qt = float(np.percentile(term, 99.9))
    n = 10.0 * qt if qt > 0 else 1.0
    return Truncation(n_level=n, m_level=10.0 * max(qx, qt, 1e-300))


def solve_backward(gen: GeneratorSpec, terminal, driver_inputs, bundle: PathBundle,
                   basis: Basis | None = None, extra_state=None, scheme: float = 1.0,
                   picard: int = 3, y_floor: float = 1e-12, max_saturation: float = 1e-3,
                   strict: bool = False) -> BsdeSolution:
    """Backward induction with regression conditional expectations.

    Parameters
    ----------
    gen : GeneratorSpec
    terminal : array (paths,)
        Uncapped terminal value; capped at ``n_level`` here.
    driver_inputs : array (paths, nodes)
        Consumption rates (utility) or deflator (dual); also the primary
        regression state.
    bundle : PathBundle
    basis : Basis, optional
    extra_state : array (paths, nodes, k), optional
        Additional Markov state (e.g. a factor) for the regression.
    scheme : float
        Weight on the left-node generator: 1 is implicit Euler, 0.5 the
        trapezoidal (Crank-Nicolson) rule.
    picard : int
        Inner fixed-point iterations per step.
    strict : bool
        Raise on rank deficiency or excess saturation instead of recording it.
    """
    basis = basis or Basis(strict=strict)
    grid = bundle.grid
    P, M, dt = bundle.n_paths, grid.n_steps, grid.dt
    x = np.broadcast_to(np.asarray(driver_inputs, dtype=float), (P, M + 1))
    if np.any(~(x > 0)):
        bad = x[~(x > 0)]
        raise DomainError("driver inputs must be positive", values=bad.ravel()[:5].tolist())
    extra = None if extra_state is None else np.asarray(extra_state, dtype=float).reshape(P, M + 1, -1)
    if not 0.0 <= scheme <= 1.0:
        raise ParameterError("scheme weight must lie in [0, 1]")
    powers = basis.default_powers(gen)
    sgn = gen.y_sign
    if gen.kind == UTILITY:
        floor_val = y_floor
    else:
        floor_val = y_floor * gen.prefs.gamma / abs(1.0 - gen.prefs.gamma)

    y = np.empty((P, M + 1))
    z = np.zeros((P, M + 1, bundle.dim))
    y[:, M], n_capped = gen.cap_terminal(terminal)
    if np.any(sgn * y[:, M] <= 0):
        raise DomainError("terminal value outside the generator domain",
                          terminal=y[:, M][sgn * y[:, M] <= 0][:5].tolist())
    f_next, _, _ = gen.driver(grid.nodes[M], x[:, M], y[:, M])
    f_all = np.empty((P, M + 1))
    f_all[:, M] = f_next
    diags = []
    for i in range(M - 1, -1, -1):
        t = grid.nodes[i]
        design = basis.features(x[:, i], None if extra is None else extra[:, i], powers)
        reg = _Regressor(design, basis.strict or strict)
        target = y[:, i + 1] + (1.0 - scheme) * dt * f_next
        ey = reg.fit(target)
        resid = float(np.sqrt(np.mean((target - ey) ** 2)))
        # centring by the conditional mean removes the sampling noise of dB
        centred = y[:, i + 1] - reg.fit(y[:, i + 1])
        z[:, i] = np.column_stack([reg.fit(centred * bundle.increments[:, i, j])
                                   for j in range(bundle.dim)]) / dt
        yi = ey.copy()
        floors = 0
        for _ in range(max(picard, 1) if scheme > 0 else 1):
            low = sgn * yi < floor_val
            floors = int(low.sum())
            yi = np.where(low, sgn * floor_val, yi)
            fi, sx, sy = gen.driver(t, x[:, i], yi)
            yi = ey + scheme * dt * fi
        low = sgn * yi < floor_val
        floors = max(floors, int(low.sum()))
        yi = np.where(low, sgn * floor_val, yi)
        fi, sx, sy = gen.driver(t, x[:, i], yi)
        y[:, i] = yi
        f_all[:, i] = fi
        f_next = fi
        diags.append(StepDiagnostics(i, float(t), resid, reg.rank, design.shape[1],
                                     int(sx.sum()), int(sy.sum()), floors))

    w = np.full(M + 1, dt)
    w[0] = scheme * dt
    w[M] = (1.0 - scheme) * dt
    w[1:M] = dt
    pathwise = y[:, M] + f_all @ w
    value0 = float(np.mean(y[:, 0]))
    se = float(np.std(pathwise, ddof=1) / np.sqrt(P)) if P > 1 else 0.0
    absy = np.abs(y)
    q = np.percentile(absy, 99.0, axis=0)
    ui = float(np.max(np.mean(absy * (absy > q), axis=0)))
    sol = BsdeSolution(y=y, z=z, truncation=gen.truncation, kind=gen.kind, value0=value0, se=se,
                       pathwise=pathwise, diagnostics=diags, lipschitz=gen.lipschitz(),
                       terminal_capped=n_capped, ui_proxy=ui)
    if sol.saturation > max_saturation:
        msg = (f"generator cap active on {sol.saturation:.2%} of cells "
               f"(m={gen.truncation.m_level:.4g}); raise the truncation level")
        if strict:
            raise RegressionError(msg)
        warnings.warn(msg, TruncationWarning, stacklevel=2)
    return sol


@dataclass
class Evaluation:
    """Result of a utility or dual evaluation; unpacks as ``(value0, path)``."""

    value0: float
    path: np.ndarray
    se: float
    solution: BsdeSolution = field(repr=False)

    def __iter__(self):
        return iter((self.value0, self.path))


def utility_terminal(prefs: EZPreferences, T: float, lump) -> np.ndarray:
    return np.exp(-prefs.delta * prefs.theta * T) * np.asarray(lump, dtype=float) ** (1.0 - prefs.gamma)


def evaluate_utility(prefs: EZPreferences, c: ConsumptionStream, bundle: PathBundle,
                     basis: Basis | None = None, truncation: Truncation | None = None,
                     extra_state=None, **solver_kw) -> Evaluation:
    """Epstein-Zin utility ``U`` of a consumption stream.

    Returns the time-0 value, the path ``U_t = e^{delta theta t} Y_t / (1-gamma)``
    and the Monte-Carlo standard error of the time-0 value.
    """
    grid = bundle.grid
    rates = c.rates()
    if np.any(~(rates > 0)) or np.any(~(c.lump > 0)):
        raise DomainError("utility evaluation needs strictly positive consumption",
                          c=rates[~(rates > 0)].ravel()[:5].tolist())
    proxy = float(np.mean(rates**prefs.p @ grid.dt_weights))
    if not np.isfinite(proxy):
        raise DomainError("integrability proxy E[int c^p dt] is not finite", proxy=proxy)
    term = utility_terminal(prefs, grid.T, c.lump)
    rates = np.broadcast_to(rates, (bundle.n_paths, grid.n_steps + 1))
    term = np.broadcast_to(term, (bundle.n_paths,))
    if truncation is None:
        truncation = default_truncation(UTILITY, prefs, rates, term)
    gen = GeneratorSpec(UTILITY, prefs, truncation)
    sol = solve_backward(gen, term, rates, bundle, basis, extra_state=extra_state, **solver_kw)
    scale = np.exp(prefs.delta * prefs.theta * grid.nodes) / (1.0 - prefs.gamma)
    return Evaluation(value0=sol.value0 / (1.0 - prefs.gamma), path=sol.y * scale,
                      se=sol.se / abs(1.0 - prefs.gamma), solution=sol)


def evaluate_dual(prefs: EZPreferences, D, bundle: PathBundle, basis: Basis | None = None,
                  truncation: Truncation | None = None, extra_state=None, **solver_kw) -> Evaluation:
    """Stochastic differential dual ``V`` of a deflator path ``D``."""
    grid = bundle.grid
    D = np.broadcast_to(np.asarray(D, dtype=float), (bundle.n_paths, grid.n_steps + 1))
    if np.any(~(D > 0)):
        raise DomainError("dual evaluation needs a strictly positive deflator", d=D[~(D > 0)][:5].tolist())
    proxy = float(np.mean(D ** (1.0 - prefs.psi) @ grid.dt_weights))
    if not np.isfinite(proxy):
        raise DomainError("integrability proxy E[int D^(1-psi) dt] is not finite", proxy=proxy)
    g = prefs.gamma
    term = g / (1.0 - g) * D[:, -1] ** ((g - 1.0) / g)
    if truncation is None:
        truncation = default_truncation(DUAL, prefs, D, term)
    gen = GeneratorSpec(DUAL, prefs, truncation)
    sol = solve_backward(gen, term, D, bundle, basis, extra_state=extra_state, **solver_kw)
    return Evaluation(value0=sol.value0, path=sol.y, se=sol.se, solution=sol)


def truncation_ladder(gen: GeneratorSpec, terminal, driver, bundle: PathBundle, basis: Basis | None,
                      levels, **solver_kw) -> list:
    """Solve along increasing ``(n, m)`` levels.

    Each solution after the first carries ``ladder_diff``, the largest
    node-wise difference from the previous level.
    """
    levels = [tuple(map(float, lv)) for lv in levels]
    for (n0, m0), (n1, m1) in zip(levels, levels[1:]):
        if n1 < n0 or m1 < m0:
            raise ParameterError("truncation levels must be nondecreasing in both coordinates")
    out = []
    for n, m in levels:
        g = GeneratorSpec(gen.kind, gen.prefs, Truncation(n, m))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            sol = solve_backward(g, terminal, driver, bundle, basis, **solver_kw)
        if out:
            sol.ladder_diff = float(np.max(np.abs(sol.y - out[-1].y)))
        out.append(sol)
    return out


@dataclass
class ConcavityReport:
    eta0: float
    eta0_se: float
    surplus: float
    surplus_se: float
    surplus_lower: float
    values: tuple
    xi_min: float


def concavity_gap(prefs: EZPreferences, c1: ConsumptionStream, c2: ConsumptionStream, lam: float,
                  bundle: PathBundle, basis: Basis | None = None, **eval_kw):
    """Concavity defect of ``c -> U_0^c`` along the mixture ``lam c1 + (1-lam) c2``.

    Works in the coordinates ``bbY = Y^{1/theta}/p``, ``bbZ = Y^{1/theta-1} Z/(p theta)``
    in which the generator is jointly concave.  The mixture of the two
    ``(bbY, bbZ)`` solutions maps back to a process ``DY`` whose gap
    ``eta = DY - Y^{mix}`` solves a linear equation with nonnegative source
    ``xi``; ``eta_0 = E[int Gamma xi dkappa]`` with ``Gamma = exp(int alpha)``.
    Since ``U = Y/(1-gamma)`` at time 0, ``eta_0/(gamma-1)`` bounds the direct
    surplus ``U^{mix} - lam U^{c1} - (1-lam) U^{c2}`` from below.

    Returns ``(eta0, report)``.
    """
    if not 0.0 < lam < 1.0:
        raise ParameterError("mixing weight must lie in (0, 1)")
    prefs.require_main_regime("the concavity-gap estimator")
    grid = bundle.grid
    P, M, dt = bundle.n_paths, grid.n_steps, grid.dt
    mix = ConsumptionStream(
        lam * c1.values + (1.0 - lam) * c2.values, "mixture",
        terminal_rate=lam * c1.rates()[:, -1] + (1.0 - lam) * c2.rates()[:, -1],
    )
    e1 = evaluate_utility(prefs, c1, bundle, basis, **eval_kw)
    e2 = evaluate_utility(prefs, c2, bundle, basis, **eval_kw)
    em = evaluate_utility(prefs, mix, bundle, basis, **eval_kw)
    p, th, d = prefs.p, prefs.theta, prefs.delta

    def bb(sol):
        yv = np.maximum(sol.y, 1e-300)
        return yv ** (1.0 / th) / p, (yv ** (1.0 / th - 1.0) / (p * th))[..., None] * sol.z

    b1, z1 = bb(e1.solution)
    b2, z2 = bb(e2.solution)
    db = lam * b1 + (1.0 - lam) * b2
    dz = lam * z1 + (1.0 - lam) * z2
    r1, r2 = np.broadcast_to(c1.rates(), (P, M + 1)), np.broadcast_to(c2.rates(), (P, M + 1))
    rm = lam * r1 + (1.0 - lam) * r2
    t = grid.nodes[None, :]
    cons = d * np.exp(-d * t) / p * (rm**p - lam * r1**p - (1.0 - lam) * r2**p)
    quad = 0.5 * (th - 1.0) * (np.sum(dz**2, -1) / db - lam * np.sum(z1**2, -1) / b1
                               - (1.0 - lam) * np.sum(z2**2, -1) / b2)
    A = cons + quad
    dY = (p * db) ** th
    xi = -(1.0 - prefs.gamma) * A * dY ** (1.0 - 1.0 / th)
    ym = em.solution.y

    # terminal gap from the uncapped closed forms
    T = grid.T
    lump1 = np.broadcast_to(c1.lump, (P,))
    lump2 = np.broadcast_to(c2.lump, (P,))
    bbT = lam * np.exp(-d * T) * lump1**p / p + (1.0 - lam) * np.exp(-d * T) * lump2**p / p
    xi_T = (p * bbT) ** th - utility_terminal(prefs, T, lam * lump1 + (1.0 - lam) * lump2)

    eta = dY - ym
    gen = GeneratorSpec(UTILITY, prefs)
    f_d = gen.exact_driver(0.0, rm, dY) * np.exp(-d * t)
    f_m = gen.exact_driver(0.0, rm, ym) * np.exp(-d * t)
    slope = (1.0 - 1.0 / th) * d * th * np.exp(-d * t) * rm**p * np.maximum(ym, 1e-300) ** (-1.0 / th)
    small = np.abs(eta) < 1e-12 * np.maximum(np.abs(ym), 1.0)
    alpha = np.where(small, slope, (f_d - f_m) / np.where(small, 1.0, eta))
    Gamma = np.ones((P, M + 1))
    Gamma[:, 1:] = np.exp(np.cumsum(0.5 * dt * (alpha[:, 1:] + alpha[:, :-1]), axis=1))
    per_path = (Gamma * xi) @ grid.dt_weights + Gamma[:, -1] * xi_T
    eta0 = float(max(np.mean(per_path), 0.0))
    eta_se = float(np.std(per_path, ddof=1) / np.sqrt(P)) if P > 1 else 0.0

    g1 = prefs.gamma - 1.0
    s_path = (em.solution.pathwise - lam * e1.solution.pathwise - (1.0 - lam) * e2.solution.pathwise) / (-g1)
    surplus = em.value0 - lam * e1.value0 - (1.0 - lam) * e2.value0
    surplus_se = float(np.std(s_path, ddof=1) / np.sqrt(P)) if P > 1 else 0.0
    report = ConcavityReport(
        eta0=eta0, eta0_se=eta_se, surplus=float(surplus), surplus_se=surplus_se,
        surplus_lower=eta0 / g1, values=(e1.value0, e2.value0, em.value0),
        xi_min=float(min(xi.min(), xi_T.min())),
    )
    return eta0, report
