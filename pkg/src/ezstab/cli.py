"""Command-line front end.

``ezstab {oracle,bracket,sweep,diagnostics,run} CONFIG [--seed N] [--output-dir DIR]``

Exit status: 0 success, 2 configuration error, 3 a configured assertion
failed, 4 numerical error.  The output directory is ``--output-dir``, else
``output.directory`` from the config, else ``$EZSTAB_OUTPUT_DIR``, else
``./ezstab-out``.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from .bounds import (
    base_optimizer, bracket, brackets_to_csv, constant_model_value, conjugacy_scan, log_grid,
    reverse_holder_check, y_guess,
)
from .bsde import Basis, Truncation, evaluate_utility
from .config import COMMANDS, ExperimentConfig, dump_config, load_config
from .errors import ConfigError, EZError
from .market import minimal_spd_path
from .paths import TimeGrid, make_bundle
from .stability import SweepConfig, martingale_deflation_check, stability_sweep
from .svg import line_chart

EXIT_OK, EXIT_CONFIG, EXIT_ASSERT, EXIT_NUMERIC = 0, 2, 3, 4
ENV_OUTPUT = "EZSTAB_OUTPUT_DIR"


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _setup(cfg: ExperimentConfig):
    family = cfg.model.build()
    grid = TimeGrid(cfg.model.T, cfg.numerics.n_steps)
    bundle = make_bundle(cfg.numerics.seed, cfg.numerics.n_paths, grid, family.base.dim,
                         antithetic=cfg.numerics.antithetic)
    basis = Basis(degree=cfg.numerics.basis_degree)
    kw = {}
    if cfg.numerics.truncation is not None:
        kw["truncation"] = Truncation(*cfg.numerics.truncation)
    return family, grid, bundle, basis, kw


def cmd_oracle(cfg: ExperimentConfig, out: Path) -> list:
    """Exact value, weight and ratio path of the unperturbed constant-coefficient model."""
    family = cfg.model.build()
    model = family.base
    if not model.constant:
        raise ConfigError("the oracle needs a constant-coefficient model")
    sol = constant_model_value(cfg.prefs, model, cfg.x, cfg.model.T)
    grid = TimeGrid(cfg.model.T, cfg.numerics.n_steps)
    n = sol.pi_star.size
    _write_csv(out / "oracle.csv", ["x", "u_exact", "h0", "y_star"] + [f"pi_{i + 1}" for i in range(n)],
               [[cfg.x, sol.u_exact, sol.h0, sol.y_star, *sol.pi_star]])
    _write_csv(out / "oracle_ratio.csv", ["t", "k"], zip(grid.nodes, sol.k_path(grid)))
    if "svg" in cfg.formats:
        t = grid.nodes[1:]
        (out / "oracle_ratio.svg").write_text(
            line_chart(t, {"k(t)": list(sol.k_path(grid)[1:])}, title="optimal consumption ratio",
                       xlabel="t", ylabel="k"))
    return []


def cmd_bracket(cfg: ExperimentConfig, out: Path) -> list:
    """Primal/dual bracket at ``experiment.eps``; scans for ``y`` unless fixed."""
    family, grid, bundle, basis, kw = _setup(cfg)
    base = base_optimizer(cfg.prefs, family, cfg.x, bundle)
    failures = []
    y = cfg.numerics.y
    if y is None:
        ys = log_grid(y_guess(cfg.prefs, cfg.x), cfg.numerics.y_points, cfg.numerics.y_factor)
        scan = conjugacy_scan(cfg.prefs, family, cfg.x, ys, bundle, basis, base=base, **kw)
        y = scan.y_star
        _write_csv(out / "scan.csv", ["y", "value", "se"], zip(scan.y_grid, scan.values, scan.ses))
        if "svg" in cfg.formats:
            (out / "scan.svg").write_text(line_chart(
                list(scan.y_grid), {"v(y) + x y": list(scan.values)}, title="conjugacy scan",
                xlabel="y", ylabel="dual bound"))
    br = bracket(cfg.prefs, family, cfg.eps, cfg.x, y, bundle, basis, cfg.numerics.delta_prime,
                 cfg.numerics.M, base=base, exact=True, **kw)
    brackets_to_csv([br], out / "bracket.csv")
    if not br.weak_duality:
        failures.append(f"weak duality violated: lower={br.lower} upper={br.upper}")
    if br.u_exact is not None and not br.contains(br.u_exact, slack=0.05 * abs(br.u_exact)):
        failures.append(f"exact value {br.u_exact} outside [{br.lower}, {br.upper}]")
    return failures


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> list:
    """Stability sweep over ``experiment.eps_list`` on common random numbers."""
    family = cfg.model.build()
    n = cfg.numerics
    sc = SweepConfig(n_paths=n.n_paths, n_steps=n.n_steps, T=cfg.model.T, seed=n.seed,
                     basis_degree=n.basis_degree, delta_prime=n.delta_prime, M=n.M, y=n.y,
                     antithetic=n.antithetic)
    rep = stability_sweep(cfg.prefs, family, cfg.x, cfg.eps_list, sc)
    rep.to_csv(out / "sweep.csv")
    if "svg" in cfg.formats:
        rep.to_svg(out / "sweep.svg")
    failures = [f"{k} not nonincreasing along eps" for k, ok in rep.trends().items() if not ok]
    perturbed = [r for r in rep.rows if r.eps > 0]
    if perturbed:
        last = perturbed[-1]
        for name in ("consumption_kp", "utility_ucp", "wealth_ucp"):
            if getattr(last, name) > 0.02:
                failures.append(f"final {name}={getattr(last, name):.4g} exceeds 0.02")
        if abs(last.bracket.width) > 0.02:
            failures.append(f"final bracket width {last.bracket.width:.4g} exceeds 0.02")
    for r in rep.rows:
        if not r.bracket.weak_duality:
            failures.append(f"weak duality violated at eps={r.eps}")
    return failures


def cmd_diagnostics(cfg: ExperimentConfig, out: Path) -> list:
    """Reverse-Hoelder integrability, deflation martingale drift and solver step diagnostics."""
    family, grid, bundle, basis, kw = _setup(cfg)
    base = base_optimizer(cfg.prefs, family, cfg.x, bundle)
    if cfg.deflator == "one":
        D = np.ones((bundle.n_paths, grid.n_steps + 1))
    elif cfg.deflator == "minimal-spd":
        D = minimal_spd_path(family.base, bundle, y=base.oracle.y_star)
    else:
        D = base.deflator(cfg.prefs, grid, base.oracle.y_star)
    hold = reverse_holder_check(cfg.prefs, D, grid)
    mart = martingale_deflation_check(D, base.wealth, base.consumption, grid)
    ev = evaluate_utility(cfg.prefs, base.consumption, bundle, basis, **kw)
    sol = ev.solution
    rows = [
        ("reverse_holder_estimate", hold.estimate), ("reverse_holder_se", hold.se),
        ("reverse_holder_spread", hold.spread), ("reverse_holder_finite", hold.finite),
        ("martingale_max_drift", float(np.max(np.abs(mart.drift)))),
        ("is_martingale", mart.is_martingale), ("is_supermartingale", mart.is_supermartingale),
        ("utility_value0", ev.value0), ("utility_se", ev.se), ("u_exact", base.oracle.u_exact),
        ("truncation_n", sol.truncation.n_level), ("truncation_m", sol.truncation.m_level),
        ("lipschitz", sol.lipschitz), ("saturation", sol.saturation), ("floor_events", sol.floor_events),
        ("terminal_capped", sol.terminal_capped), ("ui_proxy", sol.ui_proxy),
    ]
    _write_csv(out / "diagnostics.csv", ["name", "value"], rows)
    _write_csv(out / "martingale.csv", ["node", "t", "drift", "se"],
               zip(range(grid.n_steps + 1), grid.nodes, mart.drift, mart.se))
    sol.to_csv(out / "bsde_steps.csv")
    if "svg" in cfg.formats:
        (out / "martingale.svg").write_text(line_chart(
            list(grid.nodes[1:]), {"drift": list(mart.drift[1:]), "+2 SE": list(2 * mart.se[1:]),
                                   "-2 SE": list(-2 * mart.se[1:])},
            title="deflated wealth drift", xlabel="t", ylabel="E[M_t - M_0]"))
    failures = []
    if not hold.finite:
        failures.append("reverse-Hoelder batch spread above threshold")
    if cfg.deflator != "one" and not mart.is_supermartingale:
        failures.append("deflated wealth is not a supermartingale")
    return failures


HANDLERS = {"oracle": cmd_oracle, "bracket": cmd_bracket, "sweep": cmd_sweep, "diagnostics": cmd_diagnostics}


def output_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir or os.environ.get(ENV_OUTPUT) or "ezstab-out")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ezstab", description="Stability experiments for Epstein-Zin utility.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS + ("run",):
        sp = sub.add_parser(name, help="use experiment.command from the config" if name == "run" else None)
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override numerics.seed")
        sp.add_argument("--output-dir", default=None, help="override the output directory")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, output_dir=args.output_dir)
        command = args.command
        if command == "run":
            if cfg.command is None:
                raise ConfigError("'run' needs experiment.command in the config")
            command = cfg.command
        elif cfg.command is not None and cfg.command != command:
            raise ConfigError(f"config is for '{cfg.command}', not '{command}'")
        if command == "oracle" and not cfg.model.build().base.constant:
            raise ConfigError("the oracle needs a constant-coefficient model")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = output_dir(cfg)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.yaml").write_text(dump_config(cfg))
        failures = HANDLERS[command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EZError as exc:
        print(f"{command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for f in failures:
        print(f"{command}: assertion failed: {f}", file=sys.stderr)
    if failures and cfg.assert_:
        return EXIT_ASSERT
    print(f"{command}: outputs written to {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
