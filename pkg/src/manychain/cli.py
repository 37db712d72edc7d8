"""Command-line front end: sampling runs, chain-scaling benchmarks, gradient
verification, and the single-vs-double precision failure demo.

Model selectors:
    gaussian:P                   standard normal in P dimensions
    synthetic:N,D,SPARSITY       generated regression dataset (deterministic in --seed)
    german-credit:PATH           CSV file, header row, label in the last column

Seed handling: --seed expands through a fixed schedule,
root -> (data_key, init_key, warmup_key, run_key), so one integer pins the
dataset, the start states, warmup adaptation, and the sampling pass. Two runs
with the same seed and flags produce byte-identical outputs at any --threads.

Exit codes: 0 success, 1 a requested check failed, 2 usage or input errors.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import diagnostics as diag
from .gradients import finite_difference_check
from .model import (
    Dataset,
    DatasetError,
    GaussianTarget,
    ModelTarget,
    generate_synthetic,
    load_csv_dataset,
    replicate_dataset,
)
from .prng import fold_in, key_from_seed, normal, split, uniform
from .sampler import (
    ChainBatch,
    HmcConfig,
    MomentsSink,
    TraceSink,
    leapfrog_step,
    run_chains,
    warmup_adapt,
)


class UsageError(Exception):
    pass


def _expand_seed(seed: int):
    root = key_from_seed(seed)
    return split(root, 4)  # data, init, warmup, run


def build_dataset(selector: str, data_key) -> Dataset:
    kind, sep, rest = selector.partition(":")
    if kind == "synthetic" and sep:
        parts = rest.split(",")
        if len(parts) != 3:
            raise UsageError(f"synthetic selector needs N,D,SPARSITY, got {rest!r}")
        try:
            n, d, sparsity = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise UsageError(f"could not parse synthetic selector {rest!r}")
        return generate_synthetic(data_key, n, d, sparsity)
    if kind == "german-credit" and sep:
        return load_csv_dataset(rest)
    raise UsageError(
        f"bad dataset selector {selector!r}; expected "
        "synthetic:N,D,SPARSITY or german-credit:PATH"
    )


def build_target(selector: str, precision: str, data_key):
    kind, sep, rest = selector.partition(":")
    if kind == "gaussian" and sep:
        try:
            dim = int(rest)
        except ValueError:
            raise UsageError(f"gaussian selector needs an integer dimension, got {rest!r}")
        return GaussianTarget(dim, precision=precision)
    if kind in ("synthetic", "german-credit"):
        return ModelTarget(build_dataset(selector, data_key), precision=precision)
    raise UsageError(
        f"bad model selector {selector!r}; expected gaussian:P, "
        "synthetic:N,D,SPARSITY or german-credit:PATH"
    )


def initial_states(init_key, num_chains: int, dim: int) -> np.ndarray:
    """Mildly overdispersed start: 0.5 * standard normal per chain/dim."""
    return 0.5 * np.asarray(normal(init_key, [num_chains, dim]))


# ---------------------------------------------------------------- file IO

def _fmt(v) -> str:
    return repr(float(v))


def write_trace_csv(path, param_names, z_trace, is_accepted, log_accept_ratios):
    """Trace rows grouped by chain: chain, draw, P params, is_accepted (0/1),
    log_accept_ratio. Floats use shortest round-trip formatting."""
    t, c, p = z_trace.shape
    with open(path, "w") as fh:
        fh.write(",".join(["chain", "draw"] + list(param_names)
                          + ["is_accepted", "log_accept_ratio"]) + "\n")
        for ci in range(c):
            for ti in range(t):
                cells = [str(ci), str(ti)]
                cells += [_fmt(v) for v in z_trace[ti, ci]]
                cells.append("1" if is_accepted[ti, ci] else "0")
                cells.append(_fmt(log_accept_ratios[ti, ci]))
                fh.write(",".join(cells) + "\n")


def read_trace_csv(path):
    """Returns (param_names, z (T, C, P), is_accepted (T, C), ratios (T, C))."""
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split(",")
        if header[:2] != ["chain", "draw"] or header[-2:] != ["is_accepted", "log_accept_ratio"]:
            raise ValueError(f"{path}: not a trace CSV")
        names = header[2:-2]
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    if not rows:
        raise ValueError(f"{path}: trace CSV has no rows")
    c = max(int(r[0]) for r in rows) + 1
    t = max(int(r[1]) for r in rows) + 1
    p = len(names)
    z = np.empty((t, c, p))
    acc = np.empty((t, c), dtype=bool)
    ratios = np.empty((t, c))
    for r in rows:
        ci, ti = int(r[0]), int(r[1])
        z[ti, ci] = [float(v) for v in r[2 : 2 + p]]
        acc[ti, ci] = r[2 + p] == "1"
        ratios[ti, ci] = float(r[3 + p])
    return names, z, acc, ratios


def write_diagnostics_json(path, report: diag.DiagnosticsReport):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_diagnostics_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def write_bench_csv(path, rows):
    with open(path, "w") as fh:
        fh.write("chains,wall_seconds,draws_per_second\n")
        for r in rows:
            fh.write(f"{r['chains']},{_fmt(r['wall_seconds'])},{_fmt(r['draws_per_second'])}\n")


def read_bench_csv(path):
    out = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != "chains,wall_seconds,draws_per_second":
            raise ValueError(f"{path}: not a bench CSV")
        for line in fh:
            if not line.strip():
                continue
            c, w, d = line.rstrip("\n").split(",")
            out.append(
                {"chains": int(c), "wall_seconds": float(w), "draws_per_second": float(d)}
            )
    return out


# ---------------------------------------------------------------- sample

def cmd_sample(args) -> int:
    data_key, init_key, warmup_key, run_key = _expand_seed(args.seed)
    target = build_target(args.model, args.precision, data_key)
    if args.retention == "full" and args.draws < 8:
        raise UsageError("need at least 8 draws for trace diagnostics")
    if args.draws < 2:
        raise UsageError("need at least 2 draws")
    if args.chains < 1:
        raise UsageError("need at least 1 chain")

    config = HmcConfig(
        step_size=args.step_size,
        num_leapfrog_steps=args.leapfrog_steps,
        jitter=args.jitter,
        precision=args.precision,
        stable_ratio=args.stable_ratio,
    )
    z0 = initial_states(init_key, args.chains, target.dim)

    if args.adapt:
        config, start, info = warmup_adapt(
            target, config, z0, warmup_key, args.warmup, threads=args.threads
        )
        warm_note = (
            f"adapted: step_size={config.step_size:.5g} "
            f"warmup accept(harmonic)={info.final_harmonic_accept:.3f}"
        )
    elif args.warmup > 0:
        summary = run_chains(target, config, z0, warmup_key, args.warmup,
                             sink=None, threads=args.threads)
        start = summary.final_batch
        warm_note = f"warmup: {args.warmup} discarded iterations, no adaptation"
    else:
        start = ChainBatch.init(target, z0)
        warm_note = "no warmup"

    sink = TraceSink() if args.retention == "full" else MomentsSink()
    summary = run_chains(target, config, start, run_key, args.draws,
                         sink=sink, threads=args.threads)

    if args.retention == "full":
        tau_trace = None
        if isinstance(target, ModelTarget):
            tau_trace = np.exp(sink.z_trace()[:, :, 0])
        report = sink.report(tau_trace=tau_trace)
    else:
        report = sink.report()

    os.makedirs(args.output, exist_ok=True)
    json_path = os.path.join(args.output, "diagnostics.json")
    write_diagnostics_json(json_path, report)
    written = [json_path]
    if args.retention == "full":
        csv_path = os.path.join(args.output, "trace.csv")
        write_trace_csv(csv_path, target.param_names(), sink.z_trace(),
                        sink.is_accepted(), sink.log_accept_ratios())
        written.append(csv_path)

    print(f"model={args.model}  chains={args.chains}  draws={args.draws}  "
          f"precision={args.precision}  jitter={'on' if args.jitter else 'off'}")
    print(warm_note)
    print(f"accept: mean={summary.accept_rate:.3f}  "
          f"harmonic={summary.harmonic_accept:.3f}")
    line = f"R-hat: max={max(report.rhat):.4f}"
    if report.ess is not None:
        line += f"  ESS: min={min(report.ess):.0f} median={float(np.median(report.ess)):.0f}"
    if report.ess_tau is not None:
        line += f"  ESS(tau)={report.ess_tau:.0f}"
    print(line)
    print(f"ESJD={report.esjd:.4g}  ChEES={report.chees:.4g}  "
          f"roundoff flags={report.roundoff_flag_fraction:.2%}")
    print(f"throughput: {summary.draws_per_second:.0f} draws/s  "
          f"wall={summary.wall_seconds:.2f}s")
    print("wrote " + ", ".join(written))
    return 0


# ---------------------------------------------------------------- bench

def cmd_bench_chains(args) -> int:
    data_key, init_key, _, run_key = _expand_seed(args.seed)
    try:
        chain_counts = [int(v) for v in args.chain_list.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad --chain-list {args.chain_list!r}")
    if not chain_counts or any(c < 1 for c in chain_counts):
        raise UsageError("--chain-list needs positive integers")
    if args.draws_per_chain < 1:
        raise UsageError("--draws-per-chain must be positive")

    target = build_target(args.model, "double", data_key)
    config = HmcConfig(
        step_size=args.step_size,
        num_leapfrog_steps=args.leapfrog_steps,
        jitter=True,
        precision="double",
    )
    rows = []
    print(f"model={args.model}  draws/chain={args.draws_per_chain}  "
          f"leapfrog={args.leapfrog_steps} (jittered)  threads={args.threads}")
    for c in chain_counts:
        try:
            z0 = initial_states(fold_in(init_key, c), c, target.dim)
            # one discarded warm-start iteration, then the timed run
            warm = run_chains(target, config, z0, fold_in(run_key, 0), 1,
                              sink=None, threads=args.threads)
            summary = run_chains(target, config, warm.final_batch, fold_in(run_key, c),
                                 args.draws_per_chain, sink=None, threads=args.threads)
            row = {
                "chains": c,
                "wall_seconds": summary.wall_seconds,
                "draws_per_second": summary.draws_per_second,
            }
        except MemoryError:
            print(f"chains={c}: allocation failed, skipping", file=sys.stderr)
            row = {"chains": c, "wall_seconds": float("nan"),
                   "draws_per_second": float("nan")}
        rows.append(row)
        print(f"chains={row['chains']:>5}  wall={row['wall_seconds']:.3f}s  "
              f"throughput={row['draws_per_second']:.0f} draws/s")
    write_bench_csv(args.output, rows)
    print(f"wrote {args.output}")
    return 0


# ---------------------------------------------------------------- grad-check

def cmd_grad_check(args) -> int:
    data_key, init_key, _, _ = _expand_seed(args.seed)
    target = build_target(args.model, "double", data_key)
    if args.states < 1:
        raise UsageError("--states must be positive")
    if args.fd_step <= 0:
        raise UsageError("--fd-step must be positive")
    states = np.asarray(normal(init_key, [args.states, target.dim]))
    worst = 0.0
    for i in range(args.states):
        rep = finite_difference_check(target, states[i], h=args.fd_step)
        worst = max(worst, rep.max_rel_error)
    print(f"model={args.model}  states={args.states}  h={args.fd_step:g}")
    print(f"max relative gradient error: {worst:.3e}  (threshold {args.threshold:g})")
    if worst > args.threshold:
        print("FAIL: analytic gradient disagrees with finite differences",
              file=sys.stderr)
        return 1
    print("OK")
    return 0


# ---------------------------------------------------------------- precision-demo

TWO_24 = float(1 << 24)


# scale coordinates get this mass in the demo; they stay pinned at zero
_DEMO_PIN_MASS = 1e30


def _demo_start(dataset: Dataset) -> np.ndarray:
    """Deterministic start: scales at 1 (u = 0), raw weights at 0.45 leaning
    AGAINST the generating coefficients when those are known. The misfit
    keeps per-row likelihood terms large, so the 2^24 cliff is reached with
    far fewer rows."""
    d = dataset.num_features
    z0 = np.zeros(1 + 2 * d)
    if dataset.true_coef is not None:
        signs = np.where(dataset.true_coef >= 0.0, 1.0, -1.0)
    else:
        signs = np.where(np.arange(d) % 2 == 0, 1.0, -1.0)
    z0[1 + d :] = -0.45 * signs
    return z0


def _demo_mass(target: ModelTarget) -> np.ndarray:
    """Demo preconditioner: weights get a curvature bound, scales get pinned.

    sigma' <= 1/4 caps the Bernoulli curvature, so 0.25 * sum x^2 + 1 per
    weight (scales sit at 1) keeps trajectories sane on the huge replicated
    dataset without any warmup pass. The scale coordinates get effectively
    infinite mass: with u exactly 0 in every visited state, exp(u) is exact
    even in float32, so the comparison isolates the summation error in the
    data term. A moving scale adds a single-rounding error proportional to
    the scale gradient, which is a representation problem both ratio paths
    share and neither can fix."""
    d = target.num_features
    x2 = np.square(target._x.astype(np.float64)).sum(axis=0)  # (D,)
    mass = np.full(target.dim, _DEMO_PIN_MASS)
    mass[1 + d :] = 0.25 * x2 + 1.0
    return mass


def cmd_precision_demo(args) -> int:
    data_key, init_key, _, _ = _expand_seed(args.seed)
    if args.steps < 1 or args.chains < 1:
        raise UsageError("--steps and --chains must be positive")
    if args.model is not None:
        base = build_dataset(args.model, data_key)
    else:
        base = generate_synthetic(data_key, args.base_rows, 1, 1.0)
        base = Dataset(base.x * args.feature_scale, base.y,
                       true_coef=base.true_coef)

    z0 = _demo_start(base)
    probe = ModelTarget(base, precision="double")
    base_mag = abs(float(probe.log_prob(z0)))
    del probe
    k = args.replication
    if k < 0:
        raise UsageError("--replication must be >= 0")
    if k == 0:
        # smallest K that pushes |log density| safely past the 2^24 cliff
        k = max(1, math.ceil(1.05 * TWO_24 / max(base_mag, 1.0)))
    dataset = replicate_dataset(base, k) if k > 1 else base

    t32 = ModelTarget(dataset, precision="single")
    t64 = ModelTarget(dataset, precision="double")
    magnitude = abs(float(t64.log_prob(z0)))
    if magnitude <= TWO_24:
        print(
            f"warning: |log density| = {magnitude:.4g} does not exceed 2^24 = "
            f"{TWO_24:.4g}; replication {k} is too small for the failure to show",
            file=sys.stderr,
        )

    mass = _demo_mass(t64)
    inv_mass32 = (1.0 / mass).astype(np.float32)
    inv_mass64 = 1.0 / mass
    sqrt_mass = np.sqrt(mass)
    c, dim = args.chains, t32.dim
    eps = args.step_size

    z = np.tile(z0.astype(np.float32), (c, 1))
    value, grad = t32.value_and_grad(z)

    k_mom, k_u = split(init_key, 2)
    mom_keys = split(k_mom, args.steps)
    u_keys = split(k_u, args.steps)
    naive, stable, oracle = [], [], []
    with np.errstate(over="ignore", invalid="ignore",
                     under="ignore", divide="ignore"):
        for t in range(args.steps):
            m0 = (np.asarray(normal(mom_keys[t], [c, dim])) * sqrt_mass).astype(np.float32)
            zc, mc, vc, gc = z, m0, value, grad
            for _ in range(args.leapfrog_steps):
                zc, mc, vc, gc = leapfrog_step(t32, eps, zc, mc, gc, mass_diag=mass)
            ok = np.all(np.isfinite(zc), axis=1) & np.all(np.isfinite(mc), axis=1)
            zc = np.where(ok[:, None], zc, z)
            mc = np.where(ok[:, None], mc, m0)
            # naive: difference of two independently rounded energy totals
            kin0 = (0.5 * m0 * m0 * inv_mass32).sum(axis=1)
            kin1 = (0.5 * mc * mc * inv_mass32).sum(axis=1)
            r_naive = (kin0 - value) - (kin1 - vc)
            # stable: per-term differences before any summation
            kd32 = (0.5 * (m0 * m0 - mc * mc) * inv_mass32).sum(axis=1)
            r_stable = kd32 + t32.log_prob_ratio(zc, z)
            # oracle: the same transition, everything in double
            kd64 = (0.5 * (m0.astype(np.float64) ** 2 - mc.astype(np.float64) ** 2)
                    * inv_mass64).sum(axis=1)
            r_oracle = kd64 + t64.log_prob_ratio(zc.astype(np.float64),
                                                 z.astype(np.float64))
            neg_inf = np.float64(-np.inf)
            naive.append(np.where(ok, np.float64(r_naive), neg_inf))
            stable.append(np.where(ok, np.float64(r_stable), neg_inf))
            oracle.append(np.where(ok, r_oracle, neg_inf))
            # advance by the oracle rule so all three see identical transitions
            log_u = np.log(np.asarray(uniform(u_keys[t], [c])))
            accept = ok & np.isfinite(r_oracle) & (log_u < r_oracle)
            z = np.where(accept[:, None], zc, z)
            value, grad = t32.value_and_grad(z)

    naive = np.stack(naive)
    stable = np.stack(stable)
    oracle = np.stack(oracle)
    finite = np.isfinite(oracle) & np.isfinite(naive) & np.isfinite(stable)
    result = {
        "replication": int(k),
        "base_rows": int(base.num_rows),
        "total_rows": int(dataset.num_rows),
        "log_density_magnitude": float(magnitude),
        "naive_flag_fraction": diag.roundoff_suspicion(naive),
        "stable_flag_fraction": diag.roundoff_suspicion(stable),
        "max_abs_err_naive": float(np.abs((naive - oracle)[finite]).max()),
        "max_abs_err_stable": float(np.abs((stable - oracle)[finite]).max()),
        "steps": int(args.steps),
        "chains": int(c),
    }
    print(f"replication K={result['replication']}  rows={result['total_rows']}  "
          f"|log density|={magnitude:.4g}  (2^24={TWO_24:.4g})")
    print(f"roundoff flag fraction: naive={result['naive_flag_fraction']:.3f}  "
          f"stable={result['stable_flag_fraction']:.3f}")
    print(f"max |ratio - double oracle|: naive={result['max_abs_err_naive']:.4g}  "
          f"stable={result['max_abs_err_stable']:.4g}")
    if args.output:
        with open(args.output, "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"wrote {args.output}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="manychain",
        description="Lockstep multi-chain HMC: sampling, benchmarks, checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("sample", help="run chains and write diagnostics/trace")
    ps.add_argument("model")
    ps.add_argument("--chains", type=int, default=4)
    ps.add_argument("--draws", type=int, default=1000)
    ps.add_argument("--warmup", type=int, default=500)
    ps.add_argument("--step-size", type=float, default=0.2)
    ps.add_argument("--leapfrog-steps", type=int, default=8)
    ps.add_argument("--jitter", action=argparse.BooleanOptionalAction, default=True)
    ps.add_argument("--adapt", action=argparse.BooleanOptionalAction, default=True)
    ps.add_argument("--precision", choices=["single", "double"], default="double")
    ps.add_argument("--stable-ratio", action=argparse.BooleanOptionalAction, default=False)
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--retention", choices=["full", "moments-only"], default="full")
    ps.add_argument("--threads", type=int, default=1)
    ps.add_argument("--output", default="manychain_run")
    ps.set_defaults(func=cmd_sample)

    pb = sub.add_parser("bench-chains", help="throughput vs chain count")
    pb.add_argument("model")
    pb.add_argument("--chain-list", default="1,2,4,8,16,32,64,128,256")
    pb.add_argument("--draws-per-chain", type=int, default=64)
    pb.add_argument("--step-size", type=float, default=0.05)
    pb.add_argument("--leapfrog-steps", type=int, default=8)
    pb.add_argument("--seed", type=int, default=0)
    pb.add_argument("--threads", type=int, default=1)
    pb.add_argument("--output", default="bench.csv")
    pb.set_defaults(func=cmd_bench_chains)

    pg = sub.add_parser("grad-check", help="finite-difference gradient check")
    pg.add_argument("model")
    pg.add_argument("--states", type=int, default=20)
    pg.add_argument("--fd-step", type=float, default=1e-5)
    pg.add_argument("--threshold", type=float, default=1e-5)
    pg.add_argument("--seed", type=int, default=0)
    pg.set_defaults(func=cmd_grad_check)

    pp = sub.add_parser(
        "precision-demo",
        help="single-precision accept-ratio failure vs the stable ratio path",
    )
    pp.add_argument("--model", default=None,
                    help="optional dataset selector; default: built-in synthetic base")
    pp.add_argument("--replication", type=int, default=0,
                    help="dataset replication factor K; 0 = auto-size past 2^24")
    pp.add_argument("--base-rows", type=int, default=1_200_000)
    pp.add_argument("--feature-scale", type=float, default=25.0)
    pp.add_argument("--steps", type=int, default=30)
    pp.add_argument("--chains", type=int, default=2)
    pp.add_argument("--leapfrog-steps", type=int, default=2)
    pp.add_argument("--step-size", type=float, default=2e-3)
    pp.add_argument("--seed", type=int, default=0)
    pp.add_argument("--output", default=None)
    pp.set_defaults(func=cmd_precision_demo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
