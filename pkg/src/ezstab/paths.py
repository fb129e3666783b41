"""Seeded path simulation on a shared time grid with the consumption clock.

The clock ``kappa_t = t + 1{t = T}`` is represented by node weights: the
trapezoidal rule for the ``dt`` part plus a unit atom on the last node.

Random numbers come from a counter-based generator (Philox) keyed by the
seed, with the path index placed in its own counter word, so every path can
be generated independently of the others and of the generation order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonFiniteError, ParameterError


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int
    nodes: np.ndarray = field(init=False, repr=False)
    kappa_weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not (self.T > 0) or self.n_steps < 1:
            raise ParameterError(f"need T > 0 and n_steps >= 1, got T={self.T}, n_steps={self.n_steps}")
        nodes = np.linspace(0.0, self.T, self.n_steps + 1)
        w = np.full(self.n_steps + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        w[-1] += 1.0
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "kappa_weights", w)

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def kappa_mass(self) -> float:
        return self.T + 1.0

    @property
    def dt_weights(self) -> np.ndarray:
        """Trapezoidal weights of the ``dt`` part alone."""
        w = self.kappa_weights.copy()
        w[-1] -= 1.0
        return w


@dataclass(frozen=True)
class PathBundle:
    """Brownian increments ``(path, step, dim)`` already scaled by ``sqrt(dt)``.

    The first ``k`` columns drive the factor Brownian motion ``W``; the
    remaining ``n`` the orthogonal ``W_perp``.
    """

    seed: int
    n_paths: int
    grid: TimeGrid
    dim: int
    increments: np.ndarray = field(repr=False)
    antithetic: bool = False

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    def brownian(self) -> np.ndarray:
        """Cumulative Brownian paths ``(path, node, dim)`` starting at 0."""
        b = np.zeros((self.n_paths, self.n_steps + 1, self.dim))
        np.cumsum(self.increments, axis=1, out=b[:, 1:])
        return b


def _path_normals(seed: int, path: int, n_steps: int, dim: int) -> np.ndarray:
    bitgen = np.random.Philox(key=seed, counter=[0, 0, path, 0])
    return np.random.Generator(bitgen).standard_normal((n_steps, dim))


def make_bundle(seed: int, n_paths: int, grid: TimeGrid, dim: int, antithetic: bool = False) -> PathBundle:
    if n_paths < 1 or dim < 1:
        raise ParameterError(f"bundle needs n_paths >= 1 and dim >= 1, got {n_paths}, {dim}")
    if antithetic and n_paths % 2:
        raise ParameterError("antithetic pairing needs an even number of paths")
    if seed < 0:
        raise ParameterError("seed must be nonnegative")
    n_draw = n_paths // 2 if antithetic else n_paths
    z = np.empty((n_paths, grid.n_steps, dim))
    for j in range(n_draw):
        z[j] = _path_normals(seed, j, grid.n_steps, dim)
    if antithetic:
        z[n_draw:] = -z[:n_draw]
    z *= np.sqrt(grid.dt)
    return PathBundle(seed=seed, n_paths=n_paths, grid=grid, dim=dim, increments=z, antithetic=antithetic)


_MAGIC = b"EZSTBNDL"
_HEADER = struct.Struct("<8sqqqqdq")


def dump_bundle(bundle: PathBundle, path: str | Path) -> None:
    """Binary layout: header ``(magic, seed, n_paths, n_steps, dim, T,
    antithetic)`` little-endian, then float64 increments in row-major
    ``(path, step, dim)`` order."""
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                _MAGIC, bundle.seed, bundle.n_paths, bundle.n_steps, bundle.dim,
                bundle.grid.T, int(bundle.antithetic),
            )
        )
        fh.write(np.ascontiguousarray(bundle.increments, dtype="<f8").tobytes())


def load_bundle(path: str | Path) -> PathBundle:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, seed, n_paths, n_steps, dim, T, anti = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ValueError(f"{path} is not a path-bundle file")
        data = np.frombuffer(fh.read(), dtype="<f8")
    grid = TimeGrid(T, n_steps)
    inc = data.reshape(n_paths, n_steps, dim).astype(float)
    return PathBundle(seed=seed, n_paths=n_paths, grid=grid, dim=dim, increments=inc, antithetic=bool(anti))


@dataclass
class ConsumptionStream:
    """Consumption on the grid: rates on ``[0, T)`` nodes and the lump at ``T``.

    ``values[:, -1]`` is the bequest lump ``c_T``.  The rate in force just
    before ``T`` is kept separately in ``terminal_rate`` (it defaults to the
    lump) because the driver of the utility equation needs it at the last
    node while the clock atom needs the lump.
    """

    values: np.ndarray
    description: str = ""
    terminal_rate: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if np.any(self.values < 0):
            raise ParameterError(f"consumption stream '{self.description}' has negative entries")
        if self.terminal_rate is not None:
            self.terminal_rate = np.broadcast_to(
                np.asarray(self.terminal_rate, dtype=float), self.values.shape[:1]
            ).copy()

    @property
    def lump(self) -> np.ndarray:
        return self.values[:, -1]

    def rates(self) -> np.ndarray:
        r = self.values.copy()
        if self.terminal_rate is not None:
            r[:, -1] = self.terminal_rate
        return r

    def scaled(self, a: float) -> "ConsumptionStream":
        tr = None if self.terminal_rate is None else a * self.terminal_rate
        return ConsumptionStream(a * self.values, f"{a}*{self.description}", tr)

    @classmethod
    def constant(cls, value: float, grid: TimeGrid, n_paths: int) -> "ConsumptionStream":
        return cls(np.full((n_paths, grid.n_steps + 1), float(value)), "constant")


@dataclass(frozen=True)
class RatioPolicy:
    """Feedback consumption ``c_t = k(t) X_t``; all wealth is consumed at ``T``."""

    ratio: np.ndarray  # k on the grid nodes


@dataclass
class WealthPath:
    """Wealth on the grid; the last node holds wealth *after* the terminal lump."""

    values: np.ndarray
    x0: float
    strategy: np.ndarray
    consumption: ConsumptionStream
    pre_atom: np.ndarray  # wealth at T before the lump is paid

    @property
    def admissible(self) -> bool:
        return bool(np.all(self.values >= 0.0))

    @property
    def violating_fraction(self) -> float:
        return float(np.mean(np.any(self.values < 0.0, axis=1)))

    @property
    def riskless_weight(self) -> np.ndarray:
        """Residual weight ``1 - sum(pi_risky)`` held in the riskless asset."""
        return 1.0 - self.strategy.sum(axis=-1)


def clock_integral(values, grid: TimeGrid, atom=None) -> np.ndarray:
    """Per-path ``int_0^T values dkappa``.

    The ``dt`` part is trapezoidal over all nodes; the atom at ``T`` uses
    ``atom`` if given, else the last node of ``values``.
    """
    v = np.atleast_2d(np.asarray(values, dtype=float))
    if v.shape[-1] != grid.n_steps + 1:
        raise ValueError(f"values have {v.shape[-1]} nodes, grid has {grid.n_steps + 1}")
    out = v @ grid.dt_weights
    out += v[:, -1] if atom is None else np.asarray(atom, dtype=float)
    return out


def cumulative_clock_integral(values, grid: TimeGrid, atom=None) -> np.ndarray:
    """Running ``int_0^t values dkappa`` at every node (atom included at ``T``)."""
    v = np.atleast_2d(np.asarray(values, dtype=float))
    out = np.zeros_like(v)
    out[:, 1:] = np.cumsum(0.5 * grid.dt * (v[:, 1:] + v[:, :-1]), axis=1)
    out[:, -1] += v[:, -1] if atom is None else np.asarray(atom, dtype=float)
    return out


def _as_strategy(strategy, n_paths: int, n_steps: int, n: int) -> np.ndarray:
    pi = np.asarray(strategy, dtype=float)
    if pi.ndim <= 1:
        pi = np.broadcast_to(pi.reshape(1, 1, -1) if pi.ndim else pi.reshape(1, 1, 1), (n_paths, n_steps + 1, n))
    elif pi.ndim == 2:  # (node, n) shared by all paths
        pi = np.broadcast_to(pi[None], (n_paths, n_steps + 1, n))
    if pi.shape != (n_paths, n_steps + 1, n):
        raise ValueError(f"strategy shape {pi.shape} incompatible with ({n_paths}, {n_steps + 1}, {n})")
    return pi


def simulate_wealth(model, strategy, consumption, x0: float, bundle: PathBundle,
                    terminal: str = "stream", lump_bounds=(0.0, np.inf)) -> WealthPath:
    """Simulate ``dX = X (r + pi.mu) dt + X pi.sigma dW^rho - c dkappa``.

    Each step applies the exact portfolio growth factor for coefficients
    frozen at the left node, then charges consumption with the trapezoidal
    rule (discounted by the step's growth).  This is the same quadrature the
    clock integral uses, so deflated wealth plus deflated consumption is a
    discrete martingale under the minimal state-price density of a
    constant-coefficient market.

    ``consumption`` is a :class:`ConsumptionStream` or a :class:`RatioPolicy`.
    With ``terminal="all"`` (always the case for a policy) the lump at ``T``
    is whatever wealth is left, clipped to ``lump_bounds``; otherwise the
    stream's lump is paid.
    """
    if not x0 > 0:
        raise ParameterError("initial wealth must be positive")
    grid = bundle.grid
    P, M, dt = bundle.n_paths, grid.n_steps, grid.dt
    coef = model.path_coefficients(bundle)
    pi = _as_strategy(strategy, P, M, model.n)
    mu_i, sig_i, r_i = coef.left("mu"), coef.left("sigma"), coef.left("r")
    p_left = pi[:, :M, :]
    drift = r_i + np.einsum("pmi,pmi->pm", p_left, np.broadcast_to(mu_i, p_left.shape))
    vol = np.einsum("pmi,pmij->pmj", p_left, np.broadcast_to(sig_i, (P, M, model.n, model.n)))
    growth = np.exp((drift - 0.5 * np.sum(vol**2, axis=-1)) * dt + np.sum(vol * coef.dw_rho, axis=-1))

    X = np.empty((P, M + 1))
    X[:, 0] = x0
    if isinstance(consumption, RatioPolicy):
        k = np.asarray(consumption.ratio, dtype=float)
        rates = np.empty((P, M + 1))
        rates[:, 0] = k[0] * x0
        for i in range(M):
            X[:, i + 1] = growth[:, i] * (X[:, i] - 0.5 * dt * rates[:, i]) / (1.0 + 0.5 * dt * k[i + 1])
            rates[:, i + 1] = k[i + 1] * X[:, i + 1]
        terminal = "all"
        pre = X[:, M].copy()
        values = rates.copy()
        values[:, M] = np.clip(pre, *lump_bounds)
        stream = ConsumptionStream(values, "policy k(t)*X", terminal_rate=rates[:, M])
    else:
        stream = consumption
        rates = stream.rates()
        for i in range(M):
            X[:, i + 1] = growth[:, i] * (X[:, i] - 0.5 * dt * rates[:, i]) - 0.5 * dt * rates[:, i + 1]
        pre = X[:, M].copy()
        if terminal == "all":
            values = stream.values.copy()
            values[:, M] = np.clip(pre, *lump_bounds)
            stream = ConsumptionStream(values, stream.description, terminal_rate=rates[:, M])
        elif terminal != "stream":
            raise ValueError(f"unknown terminal mode {terminal!r}")
    X[:, M] = pre - stream.lump
    bad = ~np.isfinite(X)
    if bad.any():
        p_idx, n_idx = np.argwhere(bad)[0]
        raise NonFiniteError("wealth", int(p_idx), int(n_idx))
    return WealthPath(values=X, x0=float(x0), strategy=np.asarray(pi), consumption=stream, pre_atom=pre)
