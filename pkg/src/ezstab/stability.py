"""Epsilon sweeps: brackets and distances between perturbed candidates and the base optimizer.

The perturbed optimizer itself is not computed.  Each row tracks the
candidate ``c^eps = c_hat / N^eps`` (clamped), whose convergence to the base
optimizer is what the sweep measures, and certifies its near-optimality by
the width of the value bracket.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bounds import (
    ValueBracket, base_optimizer, clamp_levels, conjugacy_scan, dual_candidate,
    primal_candidate,
)
from .bsde import Basis, evaluate_utility
from .errors import EZError, ParameterError
from .market import PerturbationFamily
from .paths import ConsumptionStream, TimeGrid, cumulative_clock_integral, make_bundle
from .preferences import EZPreferences

REPORT_HEADER = (
    "Rows track the candidate c_hat(x,0)/N^eps built from the unperturbed optimizer, "
    "not the perturbed optimizer; its near-optimality is certified by the bracket width."
)


def _pair(a, b):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from exc
    return np.broadcast_to(a, shape), np.broadcast_to(b, shape)


def dist_kp(a, b, grid: TimeGrid, part: str = "all") -> float:
    """Capped distance ``E[(1/(T+1)) int |a - b| ^ 1 dkappa]``.

    Consumption streams contribute their rates to the ``dt`` part and their
    lumps to the atom.  ``part="dt"`` drops the atom and normalizes by ``T``.
    """
    if isinstance(a, ConsumptionStream) or isinstance(b, ConsumptionStream):
        ra, rb = _pair(_rates(a), _rates(b))
        la, lb = _pair(_lumps(a), _lumps(b))
        diff = np.minimum(np.abs(ra - rb), 1.0)
        atom = np.minimum(np.abs(la - lb), 1.0)[:, -1]
    else:
        a, b = _pair(a, b)
        diff = np.minimum(np.abs(a - b), 1.0)
        atom = diff[:, -1]
    if diff.shape[-1] != grid.n_steps + 1:
        raise ValueError(f"processes have {diff.shape[-1]} nodes, grid has {grid.n_steps + 1}")
    dt_part = diff @ grid.dt_weights
    if part == "dt":
        return float(np.mean(dt_part) / grid.T)
    if part != "all":
        raise ValueError(f"unknown part {part!r}")
    return float(np.mean(dt_part + atom) / grid.kappa_mass)


def _rates(c):
    return c.rates() if isinstance(c, ConsumptionStream) else np.asarray(c, dtype=float)


def _lumps(c):
    return c.values if isinstance(c, ConsumptionStream) else np.asarray(c, dtype=float)


def dist_ucp(a, b) -> float:
    """Capped distance ``E[sup_t |a - b| ^ 1]``."""
    a, b = _pair(a, b)
    return float(np.mean(np.minimum(np.max(np.abs(a - b), axis=1), 1.0)))


def nonincreasing_within(values, slack: float = 0.1) -> bool:
    """``v[i+1] <= v[i] + slack |v[i]|`` along the sequence."""
    v = np.asarray(values, dtype=float)
    return bool(np.all(v[1:] <= v[:-1] + slack * np.abs(v[:-1])))


@dataclass
class DeflationCheck:
    drift: np.ndarray
    se: np.ndarray
    is_supermartingale: bool
    is_martingale: bool

    def __iter__(self):
        return iter((self.drift, self.is_martingale if self.is_martingale else self.is_supermartingale))


def martingale_deflation_check(D, X, c: ConsumptionStream, grid: TimeGrid, tol: float = 1e-12) -> DeflationCheck:
    """Drift of ``D_t X_t + int_0^t D c dkappa`` per node.

    ``X`` is a :class:`~ezstab.paths.WealthPath` (wealth after the lump on the
    last node) or a plain array.  The process is flagged a martingale when
    every ``E[M_t - M_0]`` is within 2 SE of zero and a supermartingale when
    every one of them is below 2 SE.
    """
    D = np.atleast_2d(np.asarray(D, dtype=float))
    Xv = np.atleast_2d(np.asarray(getattr(X, "values", X), dtype=float))
    P = max(D.shape[0], Xv.shape[0], c.values.shape[0])
    D = np.broadcast_to(D, (P, grid.n_steps + 1))
    Xv = np.broadcast_to(Xv, D.shape)
    rates = np.broadcast_to(c.rates(), D.shape)
    lump = np.broadcast_to(c.lump, (P,))
    m = D * Xv + cumulative_clock_integral(D * rates, grid, atom=D[:, -1] * lump)
    rel = m - m[:, :1]
    drift = rel.mean(axis=0)
    se = rel.std(axis=0, ddof=1) / np.sqrt(P) if P > 1 else np.zeros_like(drift)
    scale = tol * max(1.0, float(np.abs(m[:, 0]).mean()))
    is_mart = bool(np.all(np.abs(drift) <= 2.0 * se + scale))
    # one-sided test on the cumulative drift; testing every one-step increment
    # at 2 SE would reject a true martingale most of the time on a fine grid
    is_super = bool(np.all(drift <= 2.0 * se + scale))
    return DeflationCheck(drift, se, is_super, is_mart)


@dataclass
class SweepConfig:
    n_paths: int = 10_000
    n_steps: int = 50
    T: float = 1.0
    seed: int = 20240601
    basis_degree: int = 2
    delta_prime: float | None = None
    M: float | None = None
    y: float | None = None
    antithetic: bool = False
    slack: float = 0.1

    def basis(self) -> Basis:
        return Basis(degree=self.basis_degree)


@dataclass
class StabilityRow:
    eps: float
    bracket: ValueBracket
    consumption_kp: float
    utility_ucp: float
    wealth_kp: float
    wealth_ucp: float
    n_kp: float
    martingale_drift: float
    martingale_flat: bool
    cand_sup: float
    cand_inf: float


COLUMNS = ["eps", "lower", "upper", "se_lower", "se_upper", "width", "consumption_kp", "utility_ucp",
           "wealth_kp", "wealth_ucp", "n_kp", "martingale_drift", "martingale_flat", "cand_sup",
           "cand_inf", "y", "seed"]


@dataclass
class StabilityReport:
    family: str
    x: float
    config: SweepConfig
    y_star: float
    rows: list = field(default_factory=list)
    header: str = REPORT_HEADER

    @property
    def eps_list(self) -> list:
        return [r.eps for r in self.rows]

    def column(self, name: str, include_zero: bool = False) -> np.ndarray:
        rows = self.rows if include_zero else [r for r in self.rows if r.eps != 0]
        if name == "width":
            return np.array([r.bracket.width for r in rows])
        return np.array([getattr(r, name) for r in rows])

    def trends(self) -> dict:
        """Monotonicity (within slack) of each tracked quantity over the nonzero rows."""
        s = self.config.slack
        return {k: nonincreasing_within(self.column(k), s)
                for k in ("width", "consumption_kp", "utility_ucp", "wealth_ucp")}

    def row_values(self, r: StabilityRow) -> list:
        b = r.bracket
        return [r.eps, b.lower, b.upper, b.se_lower, b.se_upper, b.width, r.consumption_kp, r.utility_ucp,
                r.wealth_kp, r.wealth_ucp, r.n_kp, r.martingale_drift, int(r.martingale_flat), r.cand_sup,
                r.cand_inf, b.y_used, b.seed]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for r in self.rows:
                w.writerow([v if isinstance(v, (int, np.integer)) else repr(float(v)) for v in self.row_values(r)])

    def to_svg(self, path: str | Path) -> None:
        from .svg import loglog_chart

        rows = [r for r in self.rows if r.eps > 0]
        eps = [r.eps for r in rows]
        series = {
            "|bracket width|": [abs(r.bracket.width) for r in rows],
            "consumption d_kP": [r.consumption_kp for r in rows],
            "utility d_ucp": [r.utility_ucp for r in rows],
            "wealth d_ucp": [r.wealth_ucp for r in rows],
        }
        Path(path).write_text(loglog_chart(eps, series, title=f"{self.family}: stability sweep",
                                           xlabel="eps", ylabel="distance"))


class StabilityError(EZError):
    def __init__(self, message: str, eps: float | None = None):
        self.eps = eps
        super().__init__(message if eps is None else f"[eps={eps}] {message}")


def stability_sweep(prefs: EZPreferences, family: PerturbationFamily, x: float, eps_list,
                    config: SweepConfig | None = None, dim: int | None = None) -> StabilityReport:
    """Run every ``eps`` row on one common bundle.

    ``eps_list`` must decrease to 0 and end with the reference row 0.  The
    dual variable is the conjugacy-scan minimizer at ``eps = 0`` unless the
    config fixes it.
    """
    config = config or SweepConfig()
    eps_list = [float(e) for e in eps_list]
    if not eps_list or eps_list[-1] != 0.0:
        raise ParameterError("eps_list must end with the reference value 0")
    if any(e2 >= e1 for e1, e2 in zip(eps_list, eps_list[1:])) or any(e < 0 for e in eps_list):
        raise ParameterError("eps_list must be strictly decreasing and nonnegative")
    grid = TimeGrid(config.T, config.n_steps)
    dim = dim or family.base.dim
    bundle = make_bundle(config.seed, config.n_paths, grid, dim, antithetic=config.antithetic)
    basis = config.basis()
    base = base_optimizer(prefs, family, x, bundle)
    y = config.y if config.y is not None else conjugacy_scan(prefs, family, x, None, bundle, basis,
                                                             base=base).y_star
    ref = evaluate_utility(prefs, base.consumption, bundle, basis)
    ref_wealth = np.column_stack([base.wealth.values[:, :-1], base.wealth.pre_atom])
    dp, big = clamp_levels(x, grid.T, config.delta_prime, config.M)
    report = StabilityReport(family=family.name, x=float(x), config=config, y_star=float(y))

    n_kps = []
    for eps in eps_list:
        try:
            lo = primal_candidate(prefs, family, eps, x, dp, big, bundle, basis, base=base)
            n_kp = dist_kp(lo.n_eps, 1.0, grid)
            if eps > 0:
                if n_kps and n_kp > n_kps[-1]:
                    raise StabilityError(
                        f"dist_kp(N^eps, 1) = {n_kp:.4g} increased from {n_kps[-1]:.4g}; "
                        f"family '{family.name}' does not satisfy N^eps -> 1", eps)
                n_kps.append(n_kp)
            up = dual_candidate(prefs, family, eps, x, y, bundle, basis, base=base, n_eps=lo.n_eps)
        except StabilityError:
            raise
        except EZError as exc:
            raise StabilityError(str(exc), eps) from exc
        wealth = np.column_stack([lo.wealth.values[:, :-1], lo.wealth.pre_atom])
        mart = martingale_deflation_check(up.deflator, lo.wealth, lo.consumption, grid)
        br = ValueBracket(x=float(x), eps=eps, lower=lo.value, upper=up.value, y_used=float(y),
                          se_lower=lo.se, se_upper=up.se, delta_prime=dp, M=big, seed=config.seed)
        rates = lo.consumption.rates()
        report.rows.append(StabilityRow(
            eps=eps, bracket=br,
            consumption_kp=dist_kp(lo.consumption, base.consumption, grid),
            utility_ucp=dist_ucp(lo.utility, ref.path),
            wealth_kp=dist_kp(wealth, ref_wealth, grid),
            wealth_ucp=dist_ucp(wealth, ref_wealth),
            n_kp=n_kp,
            martingale_drift=float(np.max(np.abs(mart.drift))),
            martingale_flat=mart.is_martingale,
            cand_sup=float(rates.max()), cand_inf=float(rates.min()),
        ))
    return report
