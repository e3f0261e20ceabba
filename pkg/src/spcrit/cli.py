"""Command-line front end.

Exit codes: 0 success, 1 runtime error, 2 validation or criticality
failure, 3 acceptance failure.  All numeric output is CSV with a header
row and 17 significant digits, so identical invocations produce
byte-identical files.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import loglaplace, moments, montecarlo, spectral
from .model import ModelError, load_model_file
from .spectral import NotCriticalError


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _parse_vector(arg: str) -> np.ndarray:
    """Inline comma-separated values, or a path to a one-column CSV."""
    if os.path.exists(arg):
        rows = []
        with open(arg, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    rows.append(float(line.split(",")[0]))
                except ValueError:
                    continue  # header line
        return np.array(rows)
    return np.array([float(v) for v in arg.split(",")])


def _parse_t_grid(arg: str) -> np.ndarray:
    """a:b:n means n log-spaced points in [a, b]."""
    parts = arg.split(":")
    if len(parts) != 3:
        raise ValueError(f"--t-grid expects a:b:n, got {arg!r}")
    a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
    if not (0 < a <= b and n >= 1):
        raise ValueError(f"--t-grid needs 0 < a <= b and n >= 1, got {arg!r}")
    return np.geomspace(a, b, n)


def _emit(lines: list[str], out: str | None) -> None:
    text = "\n".join(lines) + "\n"
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cmd_validate(args) -> int:
    from .model import check_grey_domination, derived_coefficients

    model = load_model_file(args.model)
    grey = check_grey_domination(model)
    dc = derived_coefficients(model)
    lines = [
        "quantity,value",
        f"n_states,{model.n_states}",
        f"kbound,{_fmt(dc.kbound)}",
        f"grey_satisfied,{int(grey.satisfied)}",
        f"b_tilde,{_fmt(grey.b_tilde)}",
    ]
    _emit(lines, args.out)
    return 0


def _cmd_spectral(args) -> int:
    model = load_model_file(args.model)
    sd = spectral.spectral_data(model)
    lines = [
        "quantity,value",
        f"lambda0,{_fmt(sd.lambda0)}",
        f"gamma,{_fmt(sd.gamma)}",
        f"c_expansion,{_fmt(sd.c_expansion)}",
    ]
    if sd.is_critical:
        lines.append(f"nu,{_fmt(spectral.nu(model, sd))}")
    lines.append("state,phi0,psi0")
    for i, label in enumerate(model.labels):
        lines.append(f"{label},{_fmt(sd.phi0[i])},{_fmt(sd.psi0[i])}")
    _emit(lines, args.out)
    if not sd.is_critical:
        print(f"model is not critical: lambda0 = {sd.lambda0:g}", file=sys.stderr)
        return 2
    return 0


def _cmd_kolmogorov(args) -> int:
    model = load_model_file(args.model)
    sd = spectral.spectral_data(model)
    mu = _parse_vector(args.mu)
    report = loglaplace.kolmogorov_table(model, sd, mu, _parse_t_grid(args.t_grid))
    lines = ["t,p_survival,t_times_p,limit"]
    for row in report.rows:
        lines.append(
            f"{_fmt(row.t)},{_fmt(row.p_survival)},"
            f"{_fmt(row.t_times_p)},{_fmt(row.limit)}"
        )
    _emit(lines, args.out)
    return 0


def _cmd_yaglom(args) -> int:
    model = load_model_file(args.model)
    sd = spectral.spectral_data(model)
    f = _parse_vector(args.f)
    mu = (
        _parse_vector(args.mu)
        if args.mu
        else np.eye(model.n_states)[0]
    )
    res = loglaplace.yaglom_transform(model, sd, mu, f, args.lam, args.t)
    lines = [
        "lambda,t,value,target,p_survival",
        f"{_fmt(res.lam)},{_fmt(res.t)},{_fmt(res.value)},"
        f"{_fmt(res.target)},{_fmt(res.p_survival)}",
    ]
    _emit(lines, args.out)
    return 0


def _cmd_moments(args) -> int:
    model = load_model_file(args.model)
    f = _parse_vector(args.f)
    mu = _parse_vector(args.mu)
    mean = moments.first_moment(model, f, args.t, mu)
    var = moments.variance(model, f, args.t, mu)
    lines = [
        "mean,variance,second_moment",
        f"{_fmt(mean)},{_fmt(var)},{_fmt(var + mean * mean)}",
    ]
    _emit(lines, args.out)
    return 0


def _cmd_simulate(args) -> int:
    model = load_model_file(args.model)
    sd = spectral.spectral_data(model)
    mu = _parse_vector(args.mu)
    f = _parse_vector(args.f)
    cfg = montecarlo.SimConfig(
        t_end=args.t, dt=args.dt, n_paths=args.paths, seed=args.seed,
        n_threads=args.threads,
    )
    ens = montecarlo.simulate_paths(model, mu, cfg, sd=sd)
    f_tilde = spectral.remove_principal_component(np.asarray(f, float), sd)
    v = ens.states_at_t @ sd.phi0 / cfg.t_end
    z = ens.states_at_t @ f_tilde / math.sqrt(cfg.t_end)
    header = "path_id,survived," + ",".join(
        f"mass_{label}" for label in model.labels
    ) + ",V,Z"
    lines = [header]
    for p in range(ens.n_paths):
        masses = ",".join(_fmt(x) for x in ens.states_at_t[p])
        lines.append(
            f"{p},{int(ens.survived[p])},{masses},{_fmt(v[p])},{_fmt(z[p])}"
        )
    _emit(lines, args.out)
    return 0


def _cmd_verify(args) -> int:
    from . import acceptance

    load_model_file(args.model)  # the supplied model must at least validate
    results = acceptance.run_all(fast=args.fast)
    for res in results:
        print(res.line())
    n_bad = sum(1 for r in results if not (r.passed and r.in_budget))
    print(f"{len(results) - n_bad}/{len(results)} criteria passed")
    return 0 if n_bad == 0 else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spcrit",
        description="critical superprocess constants, limits and simulation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("model", help="path to a model JSON file")
        p.add_argument("--out", default=None, help="output CSV path (default stdout)")
        p.set_defaults(fn=fn)
        return p

    add("validate", _cmd_validate, "validate a model file")
    add("spectral", _cmd_spectral, "principal eigendata and constants")

    p = add("kolmogorov", _cmd_kolmogorov, "t * P(survival) table")
    p.add_argument("--mu", required=True, help="initial measure (csv or file)")
    p.add_argument("--t-grid", required=True, help="a:b:n log-spaced times")

    p = add("yaglom", _cmd_yaglom, "conditional Laplace transform vs target")
    p.add_argument("--f", required=True, help="test field (csv or file)")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--mu", default=None, help="initial measure (default: first state)")

    p = add("moments", _cmd_moments, "mean, variance and second moment")
    p.add_argument("--f", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--mu", required=True)

    p = add("simulate", _cmd_simulate, "simulate paths and emit samples")
    p.add_argument("--mu", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--dt", type=float, required=True)
    p.add_argument("--paths", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--f", required=True)
    p.add_argument("--threads", type=int, default=1)

    p = add("verify", _cmd_verify, "run the acceptance suite")
    p.add_argument("--fast", action="store_true", help="smaller Monte Carlo run")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ModelError, NotCriticalError) as exc:
        print(f"spcrit: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"spcrit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
