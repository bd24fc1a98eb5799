"""Command-line driver: ``gaugempc <command> [options]``.

Exit codes:

    0  success
    1  unexpected internal error
    2  usage error (bad arguments, missing input file)
    3  Phase I infeasible (no affine policy with negative margin)
    4  I/O error (unreadable or malformed input, unwritable output)
    5  solver failure (LP/QP did not converge, Phase I margin check failed)
    6  training diverged
    7  a safe policy violated the state constraints in a benchmark
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4
EXIT_SOLVER = 5
EXIT_DIVERGED = 6
EXIT_UNSAFE = 7

log = logging.getLogger("gaugempc")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _set_threads(n):
    # only effective before numpy is first imported
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS"):
        os.environ[var] = str(n)


def _input_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"no such file: {p}", EXIT_USAGE)
    return p


def _read_json(path):
    try:
        with open(_input_file(path)) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise CliError(f"malformed JSON in {path}: {e}", EXIT_IO) from e
    except OSError as e:
        raise CliError(f"cannot read {path}: {e}", EXIT_IO) from e


def _load_system(args):
    from .config import SystemConfig, bundled_path

    path = args.system or bundled_path()
    try:
        cfg = SystemConfig.from_dict(_read_json(path))
    except (ValueError, KeyError, TypeError) as e:
        raise CliError(f"invalid system file {path}: {e}", EXIT_IO) from e
    if args.horizon is not None:
        cfg.horizon = args.horizon
    sys_ = cfg.system()
    return cfg, sys_, cfg.mpc(sys_)


def _run_dir(args) -> Path:
    stamp = args.run_name or f"{args.command}-{_dt.datetime.now().strftime('%Y%m%d-%H%M%S')}"
    d = Path(args.out) / stamp
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create output directory {d}: {e}", EXIT_IO) from e
    return d


def _write_json(path: Path, obj):
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise CliError(f"cannot write {path}: {e}", EXIT_IO) from e


def _manifest(run: Path, args, extra=None):
    d = {k: v for k, v in vars(args).items() if k != "func"}
    d["created"] = _dt.datetime.now().isoformat(timespec="seconds")
    d.update(extra or {})
    _write_json(run / "run.json", d)


def _phase1_for(args, sys_):
    from .phase1 import AffinePhaseOne, synthesize_affine

    if getattr(args, "phase1", None):
        return AffinePhaseOne.from_dict(_read_json(args.phase1))
    return synthesize_affine(sys_)


def cmd_phase1(args):
    import numpy as np

    from .phase1 import PhaseOneInfeasible, synthesize_affine, violation
    from .polytope import sample_uniform

    _, sys_, _ = _load_system(args)
    run = _run_dir(args)
    try:
        p1 = synthesize_affine(sys_)
    except PhaseOneInfeasible as e:
        raise CliError(f"{e}. No affine Phase I policy exists for this S; "
                       "use the per-state LP fallback (phase1_fallback_lp) or a smaller S.", EXIT_INFEASIBLE) from e
    X = sample_uniform(sys_.S, args.samples, seed=args.seed)
    v = violation(sys_, X, p1(X))
    report = {"margin": p1.margin, "samples": int(args.samples), "max_violation": float(np.max(v)),
              "mean_violation": float(np.mean(v)), "certified": bool(np.max(v) <= p1.margin + 1e-6)}
    _write_json(run / "phase1.json", p1.to_dict())
    _write_json(run / "certification.json", report)
    _manifest(run, args)
    return {"run_dir": str(run), **report}


def cmd_train(args):
    from .nn import save_weights
    from .train import TrainConfig, train

    _, sys_, mpc = _load_system(args)
    p1 = _phase1_for(args, sys_) if args.kind == "gauge" else None
    over = {k: getattr(args, k) for k in ("width", "lr", "batch_size", "iterations", "beta", "squash", "n_val",
                                          "val_every") if getattr(args, k) is not None}
    cfg = TrainConfig.preset(args.kind, seed=args.seed, **over)
    run = _run_dir(args)
    params, _, trace = train(cfg, mpc, p1)
    meta = {"kind": cfg.kind, "config": cfg.to_dict(), "phase1": p1.to_dict() if p1 is not None else None}
    try:
        save_weights(run / "weights.json", params, None, meta)
        trace.write_csv(run / "trace.csv", run / "trace_timing.csv")
    except OSError as e:
        raise CliError(f"cannot write training output: {e}", EXIT_IO) from e
    _manifest(run, args)
    return {"run_dir": str(run), "kind": cfg.kind, "best_delta": min(trace.val_delta) if trace.val_delta else None,
            "final_loss": trace.loss[-1]}


def _load_policy(path, mpc, sys_):
    from .nn import MlpParams
    from .phase1 import AffinePhaseOne
    from .policy import make_policy

    d = _read_json(path)
    try:
        params = MlpParams.from_dict(d["params"])
        meta = d.get("meta", {})
        cfg = meta.get("config", {})
        p1 = AffinePhaseOne.from_dict(meta["phase1"]) if meta.get("phase1") else None
        return make_policy(meta["kind"], params, mpc, p1, beta=cfg.get("beta", 10.0),
                           squash=cfg.get("squash", "tanh"), proj_tol=cfg.get("proj_tol", 1e-6))
    except (KeyError, ValueError, TypeError) as e:
        raise CliError(f"invalid weights file {path}: {e}", EXIT_IO) from e


def cmd_eval(args):
    from .mpc import MpcOracle
    from .train import ValidationSet

    _, sys_, mpc = _load_system(args)
    val = ValidationSet(mpc, args.n_val, seed=[args.seed, 2])
    if args.weights:
        pol = _load_policy(args.weights, mpc, sys_)
        delta = val.delta(pol)
        name = pol.kind
    else:
        # the oracle itself: delta is zero by definition of the metric
        oracle = MpcOracle(mpc)

        class _Oracle:
            def forward(self, X):
                return oracle.solve(X)[0], None

        delta = val.delta(_Oracle())
        name = "oracle"
    run = _run_dir(args)
    report = {"policy": name, "n_val": args.n_val, "delta": float(delta)}
    _write_json(run / "eval.json", report)
    _manifest(run, args)
    return {"run_dir": str(run), **report}


def cmd_bench(args):
    from .evalsim import benchmark_suite
    from .mpc import MpcOracle
    from .train import ValidationSet

    _, sys_, mpc = _load_system(args)
    policies = {}
    for spec in args.weights or []:
        name, _, path = spec.partition("=")
        if not path:
            name, path = Path(spec).stem, spec
        policies[name] = _load_policy(path, mpc, sys_)
    if args.oracle:
        policies["oracle"] = MpcOracle(mpc)
    if not policies:
        raise CliError("nothing to benchmark: pass --weights and/or --oracle", EXIT_USAGE)
    val = ValidationSet(mpc, args.n_val, seed=[args.seed, 2]) if args.n_val else None
    seeds = [args.seed + i for i in range(args.seeds)]
    res = benchmark_suite(policies, sys_, mpc, n_traj=args.n_traj, T=args.steps, seeds=seeds, alpha=args.alpha,
                          validation=val)
    run = _run_dir(args)
    try:
        res.write_csv(run / "bench.csv", run / "bench_timing.csv", run / "bench_summary.csv")
    except OSError as e:
        raise CliError(f"cannot write benchmark output: {e}", EXIT_IO) from e
    _manifest(run, args)
    summary = res.summary()
    out = {"run_dir": str(run), "summary": summary, "failures": res.failures}
    unsafe = [n for n, p in policies.items() if getattr(p, "kind", "oracle") in ("gauge", "projection")
              and summary[n]["violations"] > 0]
    if unsafe:
        out["unsafe"] = unsafe
        raise CliError(f"state constraint violations by {', '.join(unsafe)}", EXIT_UNSAFE)
    return out


def cmd_rci(args):
    import numpy as np

    from .polytope import certify_rci, invariant_under_affine, rci_iterate, sample_uniform

    cfg, _, _ = _load_system(args)
    from .config import polytope_from_spec

    X, U, D = (polytope_from_spec(getattr(cfg, k)) for k in ("X", "U", "D"))
    A, B = np.array(cfg.A, float), np.array(cfg.B, float)
    if args.method == "preset":
        res = rci_iterate(X, U, D, A, B, max_iter=args.max_iter)
    else:
        if args.phase1:
            ref = _read_json(args.phase1)
        elif cfg.reference_policy:
            ref = cfg.reference_policy
        else:
            raise CliError("the affine method needs --phase1 or a reference_policy in the system file", EXIT_USAGE)
        res = invariant_under_affine(X, U, D, A, B, ref["W"], ref["w"], margin=args.margin, max_iter=args.max_iter)
    S = res.polytope
    samples = sample_uniform(S, args.samples, seed=args.seed)
    vals = certify_rci(S, U, D, A, B, samples)
    run = _run_dir(args)
    report = {"method": args.method, "converged": bool(res.converged), "iterations": int(res.iterations),
              "rows": int(S.nrows), "samples": int(args.samples), "max_violation_lp": float(np.max(vals)),
              "certified": bool(res.converged and np.max(vals) <= 1e-9)}
    _write_json(run / "S.json", S.to_dict())
    _write_json(run / "rci_report.json", report)
    _manifest(run, args)
    return {"run_dir": str(run), **report}


def cmd_hpsearch(args):
    import csv

    from .train import random_search

    _, sys_, mpc = _load_system(args)
    p1 = _phase1_for(args, sys_) if args.kind == "gauge" else None
    rows = random_search(mpc, p1, args.kind, trials=args.trials, iterations=args.iterations, seed=args.seed)
    run = _run_dir(args)
    try:
        with open(run / "hpsearch.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["width", "batch_size", "lr", "delta"])
            for r in rows:
                w.writerow([r["width"], r["batch_size"], repr(r["lr"]), repr(r["delta"])])
    except OSError as e:
        raise CliError(f"cannot write {run / 'hpsearch.csv'}: {e}", EXIT_IO) from e
    _manifest(run, args)
    best = min(rows, key=lambda r: r["delta"])
    return {"run_dir": str(run), "best": best}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--system", help="system JSON file (default: bundled example)")
    common.add_argument("--horizon", type=int, help="override the MPC horizon")
    common.add_argument("--out", default="runs", help="parent directory for run outputs")
    common.add_argument("--run-name", help="output subdirectory name (default: command and timestamp)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="BLAS thread cap")
    common.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gaugempc", description="Safe learned explicit MPC via gauge maps.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phase1", parents=[common], help="synthesize and certify an affine Phase I policy")
    s.add_argument("--samples", type=int, default=10000)
    s.set_defaults(func=cmd_phase1)

    s = sub.add_parser("train", parents=[common], help="train a policy")
    s.add_argument("--kind", choices=["gauge", "penalty", "projection"], default="gauge")
    s.add_argument("--phase1", help="Phase I JSON (default: synthesize)")
    s.add_argument("--iterations", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--beta", type=float)
    s.add_argument("--squash", choices=["tanh", "clamp"])
    s.add_argument("--n-val", type=int)
    s.add_argument("--val-every", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="open-loop suboptimality against online MPC")
    s.add_argument("--weights", help="weights JSON from train (default: evaluate the oracle itself)")
    s.add_argument("--n-val", type=int, default=100)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="closed-loop benchmark and timing")
    s.add_argument("--weights", action="append", metavar="[NAME=]PATH")
    s.add_argument("--oracle", action="store_true", help="include online MPC")
    s.add_argument("--n-traj", type=int, default=100)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds starting at --seed")
    s.add_argument("--alpha", type=float, default=0.9)
    s.add_argument("--n-val", type=int, default=100, help="validation size for delta (0 to skip)")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("rci", parents=[common], help="compute a robust control invariant set")
    s.add_argument("--method", choices=["affine", "preset"], default="affine")
    s.add_argument("--phase1", help="JSON with W and w (affine method)")
    s.add_argument("--margin", type=float, default=0.01)
    s.add_argument("--max-iter", type=int, default=200)
    s.add_argument("--samples", type=int, default=200)
    s.set_defaults(func=cmd_rci)

    s = sub.add_parser("hpsearch", parents=[common], help="random hyperparameter search")
    s.add_argument("--kind", choices=["gauge", "penalty", "projection"], default="gauge")
    s.add_argument("--phase1")
    s.add_argument("--trials", type=int, default=30)
    s.add_argument("--iterations", type=int, default=200)
    s.set_defaults(func=cmd_hpsearch)
    return p


def _jsonable(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    return str(o)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .optim import SolverError
    from .phase1 import PhaseOneFailure, PhaseOneInfeasible
    from .polytope import EmptyPolytopeError
    from .train import TrainingDiverged

    code, out = EXIT_OK, None
    try:
        out = args.func(args)
    except CliError as e:
        code, out = e.code, {"error": str(e)}
    except PhaseOneInfeasible as e:
        code, out = EXIT_INFEASIBLE, {"error": str(e)}
    except (SolverError, PhaseOneFailure, EmptyPolytopeError) as e:
        code, out = EXIT_SOLVER, {"error": f"{type(e).__name__}: {e}"}
    except TrainingDiverged as e:
        code, out = EXIT_DIVERGED, {"error": str(e)}
    except OSError as e:
        code, out = EXIT_IO, {"error": str(e)}
    except Exception as e:  # noqa: BLE001
        log.exception("internal error")
        code, out = EXIT_INTERNAL, {"error": f"{type(e).__name__}: {e}"}
    if code != EXIT_OK:
        print(f"gaugempc {args.command}: {out['error']}", file=sys.stderr)
    if args.json:
        print(json.dumps({"command": args.command, "exit_code": code, **(out or {})}, default=_jsonable,
                         sort_keys=True))
    elif code == EXIT_OK and out:
        for k, v in out.items():
            print(f"{k}: {v}")
    return code


if __name__ == "__main__":
    sys.exit(main())
