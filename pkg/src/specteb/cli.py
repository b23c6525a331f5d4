"""Command-line interface: ``specteb {fit,cv,posterior,shrinkage,simulate,bootstrap}``.

Exit codes: 0 success, 2 bad input, 3 numerical or solver failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .core import ExperimentRecord, make_domain, default_half_length, rescale_arrays
from .gmm import GmmPrior, gmm_posterior
from .mle import FitConfig, fit
from .modelsel import cv_to_csv, default_workers, monte_carlo_cv, monte_carlo_cv_gmm, select
from .posterior import posterior_density, posterior_moments
from .sim import NoiseLaw, PriorSpec, sample_experiments
from .spectral import SpectralPrior, eval_density

logger = logging.getLogger(__name__)

EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(Exception):
    """Malformed input; maps to exit code 2."""


class NumericalError(Exception):
    """Solver or numerical failure; maps to exit code 3."""


# ----------------------------------------------------------------------------- data files


def parse_dataset(text: str) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Parse ``delta_hat,s[,delta_true]`` CSV text; errors name the row and field."""
    reader = csv.DictReader(io.StringIO(text))
    fields = reader.fieldnames or []
    for col in ("delta_hat", "s"):
        if col not in fields:
            raise InputError(f"missing required column '{col}' (header: {','.join(fields) or 'empty'})")
    has_truth = "delta_true" in fields
    dh, s, truth = [], [], []
    # header is line 1, so data row i sits on line i + 2
    for i, row in enumerate(reader):
        line = i + 2
        vals = {}
        for col in ("delta_hat", "s") + (("delta_true",) if has_truth else ()):
            raw = row.get(col)
            try:
                v = float(raw)
            except (TypeError, ValueError):
                raise InputError(f"line {line}: field '{col}' is not a number: {raw!r}") from None
            if not math.isfinite(v):
                raise InputError(f"line {line}: field '{col}' is not finite: {raw!r}")
            vals[col] = v
        if vals["s"] < 0:
            raise InputError(f"line {line}: field 's' is negative: {vals['s']!r}")
        dh.append(vals["delta_hat"])
        s.append(vals["s"])
        if has_truth:
            truth.append(vals["delta_true"])
    if not dh:
        raise InputError("dataset has no rows")
    logger.info("read %d records", len(dh))
    return np.array(dh), np.array(s), (np.array(truth) if has_truth else None)


def read_dataset(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_dataset(fh.read())
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None


def load_model(path: str) -> SpectralPrior | GmmPrior:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        obj = json.loads(text)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read model {path}: {exc}") from None
    try:
        if "f" in obj:
            return SpectralPrior.from_json(text)
        if "alpha" in obj:
            return GmmPrior.from_json(text)
    except (ValueError, TypeError) as exc:
        raise InputError(f"invalid model {path}: {exc}") from None
    raise InputError(f"model {path} is neither a spectral ('f') nor a GMM ('alpha') model")


def _write(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _center(text: str):
    if text == "auto":
        return None
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("--center must be 'auto' or a number") from None


def _step(text: str):
    if text == "backtracking":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("--step-size must be 'backtracking' or a number") from None


# ----------------------------------------------------------------------------- fitting helpers


def _domain_for(delta_hat, s, half_length, center):
    L = half_length if half_length is not None else default_half_length((delta_hat, s), center)
    try:
        return make_domain((delta_hat, s), L, center)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _config(args) -> FitConfig:
    try:
        return FitConfig(N=args.order, max_iters=args.max_iters, step_size=args.step_size, tol=args.tol,
                         restart=not args.no_restart)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def fit_dataset(delta_hat, s, domain, config: FitConfig):
    x, t = rescale_arrays(delta_hat, s, domain, project=True)
    return fit(x, t, config, domain)


def raw_density_grid(prior: SpectralPrior, grid_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint grid over the raw domain and the fitted prior density per raw unit."""
    lo, hi = prior.domain.bounds
    h = (hi - lo) / grid_size
    grid = lo + (np.arange(grid_size) + 0.5) * h
    u = (grid - prior.domain.x0) * prior.domain.scale
    return grid, np.asarray(eval_density(prior, u, 0.0)) * prior.domain.scale


# ----------------------------------------------------------------------------- bootstrap


def _bootstrap_replicate(args):
    delta_hat, s, domain, config, grid_size, seed, b = args
    rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
    idx = rng.integers(0, delta_hat.size, delta_hat.size)
    try:
        prior, _ = fit_dataset(delta_hat[idx], s[idx], domain, config)
    except (ValueError, RuntimeError) as exc:
        logger.warning("bootstrap replicate %d failed: %s", b, exc)
        return None
    return raw_density_grid(prior, grid_size)[1]


def bootstrap_bands(delta_hat, s, domain, config: FitConfig, replicates: int, alpha: float = 0.05,
                    seed: int = 0, grid_size: int = 200, workers: int | None = None):
    """Percentile pointwise bands for the prior density from row-resampling bootstrap.

    Returns ``(grid, estimate, lower, upper, failures)``.  The domain is held
    fixed across replicates.
    """
    if replicates < 2:
        raise InputError("--replicates must be at least 2")
    if not 0 < alpha < 1:
        raise InputError("--alpha must lie in (0, 1)")
    prior, _ = fit_dataset(delta_hat, s, domain, config)
    grid, estimate = raw_density_grid(prior, grid_size)
    jobs = [(delta_hat, s, domain, config, grid_size, seed, b) for b in range(replicates)]
    workers = default_workers() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            draws = list(pool.map(_bootstrap_replicate, jobs))
    else:
        draws = [_bootstrap_replicate(j) for j in jobs]
    ok = [d for d in draws if d is not None]
    failures = replicates - len(ok)
    if failures > 0.1 * replicates:
        raise NumericalError(f"{failures} of {replicates} bootstrap fits failed")
    lower, upper = np.quantile(np.array(ok), [alpha / 2, 1 - alpha / 2], axis=0)
    return grid, estimate, lower, upper, failures


def bands_to_csv(grid, estimate, lower, upper) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "estimate", "lower", "upper"])
    for row in zip(grid, estimate, lower, upper):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def bands_from_csv(text: str):
    rows = list(csv.DictReader(io.StringIO(text)))
    return tuple(np.array([float(r[c]) for r in rows]) for c in ("x", "estimate", "lower", "upper"))


# ----------------------------------------------------------------------------- commands


def cmd_fit(args) -> int:
    delta_hat, s, _ = read_dataset(args.data)
    domain = _domain_for(delta_hat, s, args.half_length, args.center)
    prior, report = fit_dataset(delta_hat, s, domain, _config(args))
    _write(prior.to_json(), args.out)
    summary = {
        "nll": report.final_nll,
        "iterations": report.iterations,
        "converged": report.converged,
        "pg_norm": report.pg_norm,
        "records": int(delta_hat.size),
    }
    print(json.dumps(summary), file=sys.stderr if args.out in (None, "-") else sys.stdout)
    return 0


def cmd_cv(args) -> int:
    delta_hat, s, _ = read_dataset(args.data)
    if not args.orders and not args.gmm_k:
        raise InputError("give --orders and/or --gmm-k")
    if not 0 < args.holdout < 1:
        raise InputError("--holdout must lie in (0, 1)")
    if args.splits < 1:
        raise InputError("--splits must be >= 1")
    results = []
    if args.orders:
        domain = _domain_for(delta_hat, s, args.half_length, args.center)
        x, t = rescale_arrays(delta_hat, s, domain, project=True)
        results += monte_carlo_cv(x, t, args.orders, args.splits, args.holdout, args.seed, domain=domain,
                                  workers=args.workers, max_iters=args.max_iters, tol=args.tol)
    if args.gmm_k:
        results += monte_carlo_cv_gmm(delta_hat, s, args.gmm_k, args.splits, args.holdout, args.seed,
                                      workers=args.workers)
    _write(cv_to_csv(results), args.out)
    for kind in ("spectral", "gmm"):
        group = [r for r in results if r.kind == kind]
        if group:
            by_ll, by_sm = select(group)
            print(f"{kind}: loglik selects {by_ll}, score selects {by_sm}", file=sys.stderr)
    return 0


def cmd_posterior(args) -> int:
    if args.s < 0:
        raise InputError("--s must be non-negative")
    if args.cost is not None and args.cost < 0:
        raise InputError("--cost must be non-negative")
    model = load_model(args.model)
    out = {}
    if isinstance(model, GmmPrior):
        post = gmm_posterior(model, args.delta_hat, args.s)
        out.update(mean=post.mean, variance=post.variance)
        if post.null_probability is not None:
            out["null_probability"] = post.null_probability
    else:
        lo, hi = model.domain.bounds
        if not args.project and not lo <= args.delta_hat <= hi:
            raise InputError(f"--delta-hat {args.delta_hat} lies outside [{lo}, {hi}]; pass --project")
        mean, var = posterior_moments(model, args.delta_hat, args.s, project=args.project)
        out.update(mean=float(mean[0]), variance=float(var[0]))
        if args.grid:
            grid, values = posterior_density(model, ExperimentRecord(args.delta_hat, args.s), args.grid)
            out["density"] = {"x": grid.tolist(), "p": values.tolist()}
    if args.cost is not None:
        out["launch"] = bool(out["mean"] > args.cost)
    _write(json.dumps(out) + "\n", args.out)
    return 0


def cmd_shrinkage(args) -> int:
    model = load_model(args.model)
    if not isinstance(model, SpectralPrior):
        raise InputError("shrinkage curves need a spectral model")
    if args.grid < 2:
        raise InputError("--grid must be at least 2")
    if any(v < 0 for v in args.s):
        raise InputError("--s values must be non-negative")
    lo, hi = model.domain.bounds
    xs = np.linspace(lo, hi, args.grid)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["s", "delta_hat", "shrinkage"])
    for sv in args.s:
        mean, _ = posterior_moments(model, xs, np.full(xs.shape, sv))
        for x, m in zip(xs, mean - xs):
            w.writerow([repr(float(sv)), repr(float(x)), repr(float(m))])
    _write(buf.getvalue(), args.out)
    return 0


def parse_prior(text: str, x0: float, L: float | None) -> PriorSpec:
    """``uniform:a,b`` or ``gmm:w,mu,var;w,mu,var;...``."""
    kind, _, body = text.partition(":")
    try:
        if kind == "uniform":
            a, b = (float(v) for v in body.split(","))
            return PriorSpec.uniform(a, b, x0=x0, L=L)
        if kind == "gmm":
            comps = [[float(v) for v in part.split(",")] for part in body.split(";") if part]
            if any(len(c) != 3 for c in comps):
                raise ValueError("each component needs weight,mean,variance")
            alpha, mu, V = (np.array(col) for col in zip(*comps))
            g = GmmPrior(len(comps), alpha, mu, V)
            if L is None:
                sd = np.sqrt(V)
                L = float(np.max(np.abs(np.concatenate([mu - 6 * sd, mu + 6 * sd]) - x0)))
            return PriorSpec.mixture(g, x0=x0, L=L)
    except ValueError as exc:
        raise InputError(f"invalid --prior {text!r}: {exc}") from None
    raise InputError(f"unknown prior kind in --prior {text!r}")


def parse_noise(text: str) -> NoiseLaw:
    """``uniform:lo,hi``, ``fixed:v`` or ``tabulated:v1,v2,...``."""
    kind, _, body = text.partition(":")
    try:
        vals = [float(v) for v in body.split(",") if v]
        if kind == "uniform" and len(vals) == 2:
            return NoiseLaw.uniform(*vals)
        if kind == "fixed" and len(vals) == 1:
            return NoiseLaw.fixed(vals[0])
        if kind == "tabulated" and vals:
            return NoiseLaw.tabulated(vals)
    except ValueError as exc:
        raise InputError(f"invalid --noise {text!r}: {exc}") from None
    raise InputError(f"invalid --noise {text!r}")


def cmd_simulate(args) -> int:
    if args.n < 1:
        raise InputError("--n must be >= 1")
    prior = parse_prior(args.prior, args.x0, args.half_length)
    data = sample_experiments(prior, args.n, parse_noise(args.noise), args.mode, args.seed)
    _write(data.to_csv(), args.out)
    return 0


def cmd_bootstrap(args) -> int:
    delta_hat, s, _ = read_dataset(args.data)
    domain = _domain_for(delta_hat, s, args.half_length, args.center)
    grid, est, lower, upper, failures = bootstrap_bands(
        delta_hat, s, domain, _config(args), args.replicates, args.alpha, args.seed, args.grid, args.workers
    )
    if failures:
        print(f"{failures} bootstrap replicate(s) failed", file=sys.stderr)
    _write(bands_to_csv(grid, est, lower, upper), args.out)
    return 0


# ----------------------------------------------------------------------------- parser


def _add_fit_flags(p, order_required=True):
    if order_required:
        p.add_argument("--order", "-N", type=int, required=True, help="spectral order N")
    p.add_argument("--half-length", "-L", type=float, default=None, help="domain half-length (default: 1.1 x max spread)")
    p.add_argument("--center", type=_center, default=None, help="'auto' (median) or a number")
    p.add_argument("--max-iters", type=int, default=5000)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--step-size", type=_step, default="backtracking")
    p.add_argument("--no-restart", action="store_true", help="disable function-value restarts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specteb", description="Spectral empirical Bayes for A/B test effects.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a spectral prior")
    p.add_argument("data")
    _add_fit_flags(p)
    p.add_argument("--out", "-o", default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("cv", help="Monte Carlo cross-validation")
    p.add_argument("data")
    p.add_argument("--orders", type=_int_list, default=None)
    p.add_argument("--gmm-k", type=_int_list, default=None)
    p.add_argument("--splits", type=int, default=100)
    p.add_argument("--holdout", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--half-length", "-L", type=float, default=None)
    p.add_argument("--center", type=_center, default=None)
    p.add_argument("--max-iters", type=int, default=5000)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", "-o", default=None)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("posterior", help="posterior mean, variance and launch decision")
    p.add_argument("model")
    p.add_argument("--delta-hat", type=float, required=True)
    p.add_argument("--s", type=float, required=True)
    p.add_argument("--cost", type=float, default=None)
    p.add_argument("--grid", type=int, default=None, help="also emit the posterior density on this many points")
    p.add_argument("--project", action="store_true", help="project out-of-domain observations to the boundary")
    p.add_argument("--out", "-o", default=None)
    p.set_defaults(func=cmd_posterior)

    p = sub.add_parser("shrinkage", help="shrinkage curves E[delta | delta_hat] - delta_hat")
    p.add_argument("model")
    p.add_argument("--s", type=_float_list, required=True)
    p.add_argument("--grid", type=int, default=201)
    p.add_argument("--out", "-o", default=None)
    p.set_defaults(func=cmd_shrinkage)

    p = sub.add_parser("simulate", help="simulate a dataset with known truth")
    p.add_argument("--prior", required=True, help="uniform:a,b or gmm:w,mu,var;w,mu,var")
    p.add_argument("--noise", required=True, help="uniform:lo,hi | fixed:v | tabulated:v1,v2,...")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--mode", choices=("real_line", "torus"), default="real_line")
    p.add_argument("--x0", type=float, default=0.0)
    p.add_argument("--half-length", "-L", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", "-o", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bootstrap", help="pointwise bootstrap bands for the prior density")
    p.add_argument("data")
    _add_fit_flags(p)
    p.add_argument("--replicates", "-B", type=int, default=500)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=200)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", "-o", default=None)
    p.set_defaults(func=cmd_bootstrap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining ValueErrors come from density evaluation or solver state
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
