"""Command-line front end.

Subcommands cover simulation (simulate, bridge-approx, bridge-exact,
oracle-ou), evaluation (estimate-pi, compare, benchmark, spectral-bound)
and inference (em-fit, posterior).  Every run writes its artifacts plus
a run-manifest JSON recording the full configuration, seed, package
versions and wall time.  Exit codes: 0 ok, 2 usage, 3 numeric, 4 budget
exhausted, 5 I/O.
"""

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import scipy

from . import __version__
from ._streams import substream
from .bridge_approx import sample_bridges
from .bridge_exact import exact_bridge_mh
from .errors import BudgetError, DomainError, NumericError, UsageError
from .inference import (
    FAMILIES,
    DiscreteSample,
    EstepMhConfig,
    ParamVector,
    conjugate_posterior,
    em_fit,
    expfam_stats,
    simulate_estep_bridges,
)
from .models import load_model_spec, make_model, spectral_gap_lower_bound
from .ou_oracle import OuParams, ou_bridge_paths
from .schemes import GridPath, Scheme, simulate_path, write_path_csv
from .stats import (
    SampleSet,
    benchmark_table,
    estimate_miss_prob,
    ks_two_sample,
    qq_data,
    write_table_csv,
)

DEFAULT_SEED = 123456789
BLOCK_SAMPLES = 2048
LONG_FORMAT_THRESHOLD = 1000


def _fmt(x):
    return format(float(x), ".17g")


def _add_model_flags(parser):
    parser.add_argument("--model", default=None, help="built-in model name (ou, hyperbolic)")
    parser.add_argument("--model-spec", default=None, help="path to a model spec JSON")
    parser.add_argument("--theta", type=float, default=None)
    parser.add_argument("--sigma", type=float, default=None)


def _resolve_model(args):
    if args.model_spec:
        return load_model_spec(args.model_spec)
    if not args.model:
        raise UsageError("provide --model or --model-spec")
    params = {}
    if args.theta is not None:
        params["theta"] = args.theta
    if args.sigma is not None:
        params["sigma"] = args.sigma
    return make_model(args.model, **params)


def _add_common(parser, bridge=True):
    _add_model_flags(parser)
    if bridge:
        parser.add_argument("--a", type=float, required=True)
        parser.add_argument("--b", type=float, required=True)
    parser.add_argument("--delta", type=float, required=True, help="interval length")
    parser.add_argument("--steps", type=int, required=True, help="grid steps over the interval")
    parser.add_argument("--scheme", default="euler", choices=["euler", "milstein"])
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED)
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1)


def _write_manifest(outdir, args, wall_seconds):
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "subcommand": args.subcommand,
        "config": config,
        "seed": getattr(args, "seed", None),
        "versions": {
            "bridgesim": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
        "wall_seconds": wall_seconds,
    }
    with open(os.path.join(outdir, "run-manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
        fh.write("\n")


def _write_json(outdir, name, payload):
    with open(os.path.join(outdir, name), "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _write_bridge_files(outdir, values, delta_step, prefix="bridge"):
    """One CSV per bridge for small batches, a single long CSV otherwise."""
    n = values.shape[0]
    times = delta_step * np.arange(values.shape[1])
    if n <= LONG_FORMAT_THRESHOLD:
        for i in range(n):
            with open(os.path.join(outdir, f"{prefix}_{i:04d}.csv"), "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["t", "x"])
                for t, v in zip(times, values[i]):
                    writer.writerow([_fmt(t), _fmt(v)])
    else:
        with open(os.path.join(outdir, f"{prefix}s.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "t", "x"])
            for i in range(n):
                for t, v in zip(times, values[i]):
                    writer.writerow([i, _fmt(t), _fmt(v)])


def _sharded_bridges(model, a, b, interval, n_steps, scheme, n_samples, seed, threads):
    """Accepted bridges in fixed-size blocks with per-block substreams, so
    the merged output is independent of the worker count."""
    blocks = [
        (idx, min(BLOCK_SAMPLES, n_samples - start))
        for idx, start in enumerate(range(0, n_samples, BLOCK_SAMPLES))
    ]

    def run(block):
        idx, size = block
        return sample_bridges(
            model, a, b, interval, n_steps, scheme, size, substream(seed, 17, idx)
        )

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, blocks))
    else:
        results = [run(block) for block in blocks]
    values = np.concatenate([r.values for r in results])
    attempts = np.concatenate([r.attempts for r in results])
    aborts = np.concatenate([r.boundary_aborts for r in results])
    return values, attempts, aborts


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_simulate(args):
    model = _resolve_model(args)
    rng = substream(args.seed, 11)
    path = simulate_path(model, args.x0, args.delta, args.steps, args.scheme, rng)
    with open(os.path.join(args.out, "path.csv"), "w", newline="") as fh:
        write_path_csv(path, fh)


def _cmd_bridge_approx(args):
    model = _resolve_model(args)
    t0 = time.perf_counter()
    values, attempts, aborts = _sharded_bridges(
        model, args.a, args.b, args.delta, args.steps, args.scheme,
        args.samples, args.seed, args.threads,
    )
    cpu = time.perf_counter() - t0
    _write_bridge_files(args.out, values, args.delta / args.steps)
    _write_json(args.out, "summary.json", {
        "attempts": int(attempts.sum()),
        "rejections": int(attempts.sum()) - args.samples,
        "boundary_aborts": int(aborts.sum()),
        "cpu_seconds": cpu,
    })


def _cmd_oracle_ou(args):
    model = _resolve_model(args)
    if model.name != "ou":
        raise UsageError("oracle-ou requires the built-in 'ou' model")
    p = OuParams(**model.params)
    t0 = time.perf_counter()
    blocks = []
    for idx, start in enumerate(range(0, args.samples, BLOCK_SAMPLES)):
        size = min(BLOCK_SAMPLES, args.samples - start)
        blocks.append(
            ou_bridge_paths(p, args.a, args.b, args.delta, args.steps,
                            substream(args.seed, 17, idx), size)
        )
    values = np.concatenate(blocks)
    cpu = time.perf_counter() - t0
    _write_bridge_files(args.out, values, args.delta / args.steps)
    _write_json(args.out, "summary.json", {
        "attempts": args.samples,
        "rejections": 0,
        "boundary_aborts": 0,
        "cpu_seconds": cpu,
    })


def _cmd_bridge_exact(args):
    model = _resolve_model(args)
    rng = substream(args.seed, 23)
    result = exact_bridge_mh(
        model, args.a, args.b, args.delta, args.steps, args.scheme,
        args.nt, args.iters, args.burnin, rng,
    )
    kept = result.states[:: args.thin]
    values = np.stack([s.bridge.values for s in kept])
    _write_bridge_files(args.out, values, args.delta / args.steps)
    _write_json(args.out, "summary.json", {
        "acceptance_rate": result.acceptance_rate,
        "mean_rho_hat": float(np.mean([s.mean_count for s in result.states])),
        "capped_iterations": result.capped_proposals,
        "n_states": len(kept),
    })


def _cmd_estimate_pi(args):
    model = _resolve_model(args)
    rng = substream(args.seed, 29)
    miss = estimate_miss_prob(
        model, args.a, args.b, args.delta, args.steps, args.samples, rng,
        scheme=args.scheme,
    )
    _write_json(args.out, "pi.json", {
        "one_minus_pi": miss,
        "pi": 1.0 - miss,
        "n_bridges": args.samples,
    })


def _load_values(path, at_time=None):
    with open(path) as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [row for row in reader if row]
    if header == ["x"]:
        return np.array([float(r[0]) for r in rows])
    if header == ["t", "x"]:
        return np.array([float(r[1]) for r in rows])
    if header == ["sample_id", "t", "x"]:
        if at_time is None:
            raise UsageError(f"{path} holds full paths; pass --at-time to slice")
        vals = [float(r[2]) for r in rows if abs(float(r[1]) - at_time) < 1e-12]
        if not vals:
            raise UsageError(f"no rows at t={at_time} in {path}")
        return np.array(vals)
    raise UsageError(f"unrecognized sample CSV header {header} in {path}")


def _cmd_compare(args):
    x = SampleSet(_load_values(args.x, args.at_time), label=args.x)
    y = SampleSet(_load_values(args.y, args.at_time), label=args.y)
    stat, p_value = ks_two_sample(x, y)
    _write_json(args.out, "ks.json", {
        "statistic": stat,
        "p_value": p_value,
        "n_x": int(x.values.size),
        "n_y": int(y.values.size),
    })
    pairs = qq_data(x, y, args.quantiles)
    with open(os.path.join(args.out, "qq.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["q_x", "q_y"])
        for qx, qy in pairs:
            writer.writerow([_fmt(qx), _fmt(qy)])


def _cmd_benchmark(args):
    with open(args.spec) as fh:
        spec = json.load(fh)
    model = (
        load_model_spec(args.model_spec)
        if args.model_spec
        else make_model(spec["model"]["name"], **spec["model"].get("parameters", {}))
    )
    rows = benchmark_table(model, spec, args.seed)
    with open(os.path.join(args.out, "table.csv"), "w", newline="") as fh:
        write_table_csv(rows, fh)


def _cmd_spectral_bound(args):
    model = _resolve_model(args)
    grid = np.linspace(args.grid_lo, args.grid_hi, args.grid_points)
    bound = spectral_gap_lower_bound(model, grid)
    _write_json(args.out, "spectral.json", {"lower_bound": bound})


def _read_data_csv(path):
    with open(path) as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if header != ["t", "x"]:
            raise UsageError(f"data CSV must have 't,x' header, got {header}")
        rows = [(float(r[0]), float(r[1])) for r in reader if r]
    times, values = zip(*rows)
    return DiscreteSample(times=np.array(times), values=np.array(values))


def _parse_vector(text):
    return np.array([float(v) for v in text.split(",")])


def _family_and_init(args):
    if args.model_family not in FAMILIES:
        raise UsageError(
            f"unknown model family {args.model_family!r}; available: {sorted(FAMILIES)}"
        )
    family = FAMILIES[args.model_family]()
    init = _parse_vector(args.init)
    if init.size != family.alpha_dim + family.beta_dim:
        raise UsageError(
            f"--init needs {family.alpha_dim + family.beta_dim} values, got {init.size}"
        )
    return family, ParamVector(alpha=init[: family.alpha_dim], beta=init[family.alpha_dim:])


def _estep_config(args):
    return EstepMhConfig(
        sampler=args.sampler,
        burn_in=args.mh_burnin,
        n_hit_draws=args.nt,
        steps_per_unit=args.steps_per_unit,
    )


def _cmd_em_fit(args):
    family, init = _family_and_init(args)
    data = _read_data_csv(args.data)
    params, trace = em_fit(
        family, data, init, substream(args.seed, 41),
        bridges_per_interval=args.bridges,
        mh_config=_estep_config(args),
        max_iter=args.iters,
        tol=args.tol,
        final_bridges=args.final_bridges,
    )
    _write_json(args.out, "em.json", {
        "estimate": {"alpha": list(params.alpha), "beta": list(params.beta)},
        "trace": [
            {
                "alpha": list(s.params.alpha),
                "beta": list(s.params.beta),
                "q_value": s.q_value,
                "n_bridges": s.n_bridges,
                "wall_seconds": s.wall_seconds,
                "final": s.final,
            }
            for s in trace.steps
        ],
        "diagnostics": {"warnings": trace.warnings, "n_iterations": len(trace.steps)},
    })


def _cmd_posterior(args):
    family, init = _family_and_init(args)
    data = _read_data_csv(args.data)
    config = _estep_config(args)
    bridges = simulate_estep_bridges(
        family, data, init, 1, config, substream(args.seed, 43)
    )
    h_lin, b_quad, _ = expfam_stats(family, init.beta, bridges, data, init.beta)
    prior_mean = _parse_vector(args.prior_mean)
    k = prior_mean.size
    prior_cov = _parse_vector(args.prior_cov).reshape(k, k)
    mean, cov = conjugate_posterior(prior_mean, prior_cov, h_lin, b_quad)
    _write_json(args.out, "posterior.json", {
        "mean": list(mean),
        "cov": [list(row) for row in cov],
        "beta": list(init.beta),
    })


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bridgesim",
        description="Diffusion bridge simulation and likelihood inference",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("simulate", help="simulate one unconditioned path")
    _add_common(p, bridge=False)
    p.add_argument("--x0", type=float, required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("bridge-approx", help="crossing rejection sampler bridges")
    _add_common(p)
    p.add_argument("--samples", type=int, default=1)
    p.set_defaults(func=_cmd_bridge_approx)

    p = sub.add_parser("oracle-ou", help="closed-form OU bridges (ground truth)")
    _add_common(p)
    p.add_argument("--samples", type=int, default=1)
    p.set_defaults(func=_cmd_oracle_ou)

    p = sub.add_parser("bridge-exact", help="pseudo-marginal MH exact bridges")
    _add_common(p)
    p.add_argument("--nt", type=int, default=1, help="hitting counts per proposal")
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--burnin", type=int, default=5000)
    p.add_argument("--thin", type=int, default=1)
    p.set_defaults(func=_cmd_bridge_exact)

    p = sub.add_parser("estimate-pi", help="miss probability of exact bridges")
    _add_common(p)
    p.add_argument("--samples", type=int, default=10000)
    p.set_defaults(func=_cmd_estimate_pi)

    p = sub.add_parser("compare", help="two-sample KS test and Q-Q data")
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--at-time", type=float, default=None)
    p.add_argument("--quantiles", type=int, default=99)
    p.add_argument("--out", default=".")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("benchmark", help="run a benchmark job spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--model-spec", default=None)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", default=".")
    p.add_argument("--threads", type=int, default=1, help="benchmark mode is single-threaded")
    p.set_defaults(func=_cmd_benchmark)

    p = sub.add_parser("spectral-bound", help="lower bound on the spectral gap")
    _add_model_flags(p)
    p.add_argument("--grid-lo", type=float, required=True)
    p.add_argument("--grid-hi", type=float, required=True)
    p.add_argument("--grid-points", type=int, default=401)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", default=".")
    p.set_defaults(func=_cmd_spectral_bound)

    for name, handler in (("em-fit", _cmd_em_fit), ("posterior", _cmd_posterior)):
        p = sub.add_parser(name, help="EM fit" if name == "em-fit" else "conjugate posterior")
        p.add_argument("--model-family", default="ou")
        p.add_argument("--data", required=True, help="CSV of t,x observations")
        p.add_argument("--init", required=True, help="comma-separated alpha,beta start")
        p.add_argument("--bridges", type=int, default=100)
        p.add_argument("--final-bridges", type=int, default=1000)
        p.add_argument("--iters", type=int, default=30)
        p.add_argument("--tol", type=float, default=1e-3)
        p.add_argument("--sampler", default="exact", choices=["exact", "approx"])
        p.add_argument("--mh-burnin", type=int, default=50)
        p.add_argument("--nt", type=int, default=1)
        p.add_argument("--steps-per-unit", type=int, default=100)
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument("--out", default=".")
        if name == "posterior":
            p.add_argument("--prior-mean", required=True)
            p.add_argument("--prior-cov", required=True,
                           help="row-major comma-separated covariance entries")
        p.set_defaults(func=handler)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    t_start = time.perf_counter()
    try:
        outdir = getattr(args, "out", ".")
        os.makedirs(outdir, exist_ok=True)
        args.func(args)
        _write_manifest(outdir, args, time.perf_counter() - t_start)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except BudgetError as exc:
        print(f"budget exhausted: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
