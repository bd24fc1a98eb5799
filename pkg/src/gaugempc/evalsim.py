"""Closed-loop simulation under autoregressive disturbances, and benchmarks."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .mpc import CondensedMpc, LinearSystem, MpcOracle, QuadraticCost
from .polytope import Polytope, sample_uniform

log = logging.getLogger(__name__)

VIOLATION_TOL = 1e-7
BENCH_COLUMNS = ["policy", "seed", "trajectory", "trajectory_cost", "violations", "delta_open_loop"]


class DisturbanceProcess:
    """d_{t+1} = alpha d_t + (1 - alpha) d_hat with d_hat uniform on D.

    Uniform draws are taken in blocks so a trajectory does not pay the
    rejection-sampler overhead at every step.
    """

    def __init__(self, D: Polytope, alpha: float = 0.9, seed=None, d0=None, block: int = 256):
        if not 0.0 <= alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        self.D = D
        self.alpha = float(alpha)
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.block = block
        self._bbox = D.bounding_box()
        self._buf = np.zeros((0, D.dim))
        self.reset(d0)

    def reset(self, d0=None):
        d = np.zeros(self.D.dim) if d0 is None else np.asarray(d0, dtype=float).copy()
        if not self.D.contains_point(d, 1e-12):
            raise ValueError("d0 is not in D")
        self.d = d
        return d

    def _draw(self):
        if self._buf.shape[0] == 0:
            self._buf = sample_uniform(self.D, self.block, self.rng, bbox=self._bbox)
        d, self._buf = self._buf[0], self._buf[1:]
        return d

    def step(self) -> np.ndarray:
        d = self.alpha * self.d + (1.0 - self.alpha) * self._draw()
        # convex combination of points of D
        assert self.D.contains_point(d, 1e-12), "disturbance left D"
        self.d = d
        return d


def disturbance_step(proc: DisturbanceProcess) -> np.ndarray:
    return proc.step()


@dataclass
class ClosedLoopResult:
    states: np.ndarray
    inputs: np.ndarray
    cost: float
    solve_times: np.ndarray
    violations: int
    failed: bool = False
    error: str | None = None

    @property
    def mean_solve_time(self) -> float:
        return float(np.mean(self.solve_times)) if self.solve_times.size else float("nan")


def count_violations(S: Polytope, states, tol: float = VIOLATION_TOL) -> int:
    states = np.atleast_2d(states)
    return int(np.sum(np.any(states @ S.F.T > S.g + tol, axis=1)))


def run_closed_loop(policy, sys: LinearSystem, x0, T: int, proc: DisturbanceProcess | None = None,
                    timer: bool = True, cost: QuadraticCost | None = None) -> ClosedLoopResult:
    """Simulate x_{t+1} = A x_t + B u_t + d_t with u_t = policy(x_t) for T steps.

    ``policy`` maps a state to the first input. Only the policy call is timed.
    A policy exception ends the trajectory early and marks it failed.
    """
    cost = cost or QuadraticCost()
    x = np.asarray(x0, dtype=float).copy()
    if not sys.S.contains_point(x, VIOLATION_TOL):
        raise ValueError("x0 is not in S")
    xs = [x]
    us = []
    times = []
    failed, err = False, None
    clock = time.perf_counter
    for _ in range(T):
        try:
            if timer:
                t0 = clock()
                u = policy(x)
                times.append(clock() - t0)
            else:
                u = policy(x)
        except Exception as e:  # noqa: BLE001 - any policy failure ends the run
            failed, err = True, f"{type(e).__name__}: {e}"
            log.warning("policy failed at t=%d: %s", len(us), err)
            break
        u = np.asarray(u, dtype=float)
        d = proc.step() if proc is not None else 0.0
        x = sys.A @ x + sys.B @ u + d
        us.append(u)
        xs.append(x)
    X = np.array(xs)
    U = np.array(us).reshape(len(us), sys.m)
    total = float(cost.terminal(X[-1]))
    if len(us):
        total += float(np.sum(cost.stage(X[:-1], U)))
    return ClosedLoopResult(X, U, total, np.array(times), count_violations(sys.S, X), failed, err)


@dataclass
class BenchmarkResult:
    rows: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def costs(self, policy: str) -> np.ndarray:
        return np.array([r["trajectory_cost"] for r in self.rows if r["policy"] == policy])

    def violations(self, policy: str) -> int:
        return int(sum(r["violations"] for r in self.rows if r["policy"] == policy))

    def summary(self) -> dict:
        """Quartiles of the trajectory cost and mean action time per policy."""
        out = {}
        for name in dict.fromkeys(r["policy"] for r in self.rows):
            c = self.costs(name)
            q1, med, q3 = np.percentile(c, [25, 50, 75])
            out[name] = {"n": int(c.size), "min": float(c.min()), "q1": float(q1), "median": float(med),
                         "q3": float(q3), "max": float(c.max()), "violations": self.violations(name),
                         "mean_action_seconds": self.timings.get(name, float("nan"))}
        return out

    def write_csv(self, path, timing_path=None, summary_path=None):
        """Deterministic rows to ``path``; wall-clock data to the optional side files."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(BENCH_COLUMNS)
            for r in self.rows:
                w.writerow([r["policy"], r["seed"], r["trajectory"], repr(float(r["trajectory_cost"])),
                            r["violations"], "" if r["delta_open_loop"] is None else repr(float(r["delta_open_loop"]))])
        if timing_path is not None:
            with open(timing_path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["policy", "mean_action_seconds"])
                for name, t in self.timings.items():
                    w.writerow([name, f"{t:.9f}"])
        if summary_path is not None:
            with open(summary_path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["policy", "n", "min", "q1", "median", "q3", "max", "violations"])
                for name, s in self.summary().items():
                    w.writerow([name, s["n"], *(repr(s[k]) for k in ("min", "q1", "median", "q3", "max")),
                                s["violations"]])


def action_fn(policy):
    """First-action callable for a policy object, an oracle, or a plain function."""
    if hasattr(policy, "first_action"):
        return policy.first_action
    return policy


def time_actions(policy, states, warmup: int = 5) -> float:
    """Mean wall time of single-state policy calls, excluding warmup calls."""
    fn = action_fn(policy)
    for x in states[:warmup]:
        fn(x)
    clock = time.perf_counter
    total = 0.0
    for x in states:
        t0 = clock()
        fn(x)
        total += clock() - t0
    return total / len(states)


def initial_states(S: Polytope, n: int, seed) -> np.ndarray:
    return sample_uniform(S, n, np.random.default_rng([int(seed), 7]))


def benchmark_suite(policies: dict, sys: LinearSystem, mpc: CondensedMpc, n_traj: int = 100, T: int = 50,
                    seeds=(0,), alpha: float = 0.9, validation=None, warmup: int = 5,
                    timing_states: int = 200) -> BenchmarkResult:
    """Closed-loop costs, violation counts, open-loop delta and action timing per policy.

    ``policies`` maps a name to a policy object (with ``first_action`` and
    optionally ``forward``), an :class:`MpcOracle`, or a callable x -> u0.
    Initial states and disturbances depend only on the seed and the
    trajectory index, so every policy sees the same scenarios.
    """
    res = BenchmarkResult()
    cost = mpc.cost
    deltas = {}
    for name, pol in policies.items():
        if isinstance(pol, MpcOracle):
            deltas[name] = 0.0
        elif validation is not None and hasattr(pol, "forward"):
            deltas[name] = float(validation.delta(pol))
        else:
            deltas[name] = None
    for seed in seeds:
        X0 = initial_states(sys.S, n_traj, seed)
        for name, pol in policies.items():
            fn = action_fn(pol)
            for i, x0 in enumerate(X0):
                proc = DisturbanceProcess(sys.D, alpha, seed=np.random.default_rng([int(seed), 11, i]))
                r = run_closed_loop(fn, sys, x0, T, proc, timer=False, cost=cost)
                if r.failed:
                    res.failures.append({"policy": name, "seed": seed, "trajectory": i, "error": r.error})
                res.rows.append({"policy": name, "seed": int(seed), "trajectory": i, "trajectory_cost": r.cost,
                                 "violations": r.violations, "delta_open_loop": deltas[name],
                                 "failed": r.failed})
    # timing on a fixed state set, after warmup, one call per state
    Xt = initial_states(sys.S, timing_states, 12345)
    for name, pol in policies.items():
        res.timings[name] = time_actions(pol, Xt, warmup)
    return res
