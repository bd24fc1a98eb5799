"""Unsupervised training of MPC policies on sampled initial states."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .mpc import CondensedMpc, MpcOracle
from .nn import Adam, MlpParams
from .optim import SolverError
from .phase1 import AffinePhaseOne
from .policy import make_policy
from .polytope import sample_uniform

log = logging.getLogger(__name__)

# width, learning rate, batch size
TABLE_I = {
    "gauge": (859, 4.7e-4, 1655),
    "penalty": (318, 8.7e-4, 133),
    "projection": (956, 9.0e-5, 813),
}

SEARCH_RANGES = {"width": (64, 1024), "batch_size": (100, 3000), "lr": (1e-5, 1e-3)}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    kind: str = "gauge"
    width: int = 859
    lr: float = 4.7e-4
    batch_size: int = 1655
    iterations: int = 2000
    seed: int = 0
    beta: float = 10.0
    n_val: int = 100
    val_every: int = 50
    squash: str = "tanh"
    proj_tol: float = 1e-6
    safety_every: int = 10
    output_scale: float = 0.01

    @classmethod
    def preset(cls, kind: str, **overrides) -> TrainConfig:
        width, lr, batch = TABLE_I[kind]
        args = {"width": width, "lr": lr, "batch_size": batch}
        args.update(overrides)
        return cls(kind=kind, **args)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainTrace:
    iteration: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    val_iteration: list = field(default_factory=list)
    val_delta: list = field(default_factory=list)
    max_violation: list = field(default_factory=list)

    def write_csv(self, path, timing_path=None):
        """Deterministic columns go to ``path``; wall-clock times to ``timing_path``."""
        deltas = dict(zip(self.val_iteration, self.val_delta))
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "loss", "delta"])
            for it, loss in zip(self.iteration, self.loss):
                d = deltas.get(it)
                w.writerow([it, repr(float(loss)), "" if d is None else repr(float(d))])
        if timing_path is not None:
            with open(timing_path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["iteration", "seconds"])
                for it, s in zip(self.iteration, self.seconds):
                    w.writerow([it, f"{s:.6f}"])


class ValidationSet:
    """Fixed validation states with their optimal MPC costs."""

    def __init__(self, mpc: CondensedMpc, n_val: int = 100, seed=0, oracle: MpcOracle | None = None,
                 bbox=None):
        self.mpc = mpc
        rng = np.random.default_rng(seed)
        oracle = oracle or MpcOracle(mpc)
        S = mpc.sys.S
        bbox = bbox if bbox is not None else S.bounding_box()
        X = sample_uniform(S, n_val, rng, bbox=bbox)
        try:
            U, c, _ = oracle.solve(X)
        except SolverError:
            U = np.zeros((n_val, mpc.nu))
            c = np.zeros(n_val)
            for j in range(n_val):
                while True:
                    try:
                        U[j], c[j], _ = oracle.solve(X[j])
                        break
                    except SolverError:
                        log.warning("oracle failed at validation state %s; resampling", X[j])
                        X[j] = sample_uniform(S, 1, rng, bbox=bbox)[0]
        self.X = X
        self.U_opt = U
        self.cost_opt = np.asarray(c)

    def delta(self, policy) -> float:
        U, _ = policy.forward(self.X)
        c_nn = float(np.mean(self.mpc.trajectory_cost(self.X, U)))
        c_mpc = float(np.mean(self.cost_opt))
        return (c_nn - c_mpc) / c_mpc


def validate(policy, mpc: CondensedMpc, n_val: int = 100, seed=0) -> float:
    """Fractional suboptimality of the mean open-loop cost against online MPC."""
    return ValidationSet(mpc, n_val, seed).delta(policy)


def batch_loss(policy, mpc: CondensedMpc, X0):
    """Mean open-loop cost over the batch plus any policy-specific term; also dloss/dU."""
    U, cache = policy.forward(X0)
    c, g = mpc.trajectory_cost_grad(X0, U)
    nb = X0.shape[0]
    loss = float(np.mean(c))
    dU = g / nb
    extra, dE = policy.extra_loss(X0, U)
    if dE is not None:
        loss += extra
        dU = dU + dE
    return loss, U, cache, dU


def loss_and_grad(policy, mpc, X0):
    loss, _, cache, dU = batch_loss(policy, mpc, X0)
    return loss, policy.backward(cache, dU)


def train(cfg: TrainConfig, mpc: CondensedMpc, phase1: AffinePhaseOne | None = None,
          validation: ValidationSet | None = None, callback=None):
    """Run the sampling/gradient loop; returns (best params, policy, trace)."""
    rng = np.random.default_rng([cfg.seed, 0])
    params = MlpParams.init([mpc.n, cfg.width, cfg.width, mpc.nu], seed=np.random.default_rng([cfg.seed, 1]),
                           output_scale=cfg.output_scale)
    policy = make_policy(cfg.kind, params, mpc, phase1, beta=cfg.beta, squash=cfg.squash, proj_tol=cfg.proj_tol)
    opt = Adam(params, cfg.lr)
    if validation is None and cfg.n_val > 0:
        validation = ValidationSet(mpc, cfg.n_val, seed=[cfg.seed, 2])
    S = mpc.sys.S
    bbox = S.bounding_box()
    trace = TrainTrace()
    best = (np.inf, params.copy())
    t0 = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        X0 = sample_uniform(S, cfg.batch_size, rng, bbox=bbox)
        loss, U, cache, dU = batch_loss(policy, mpc, X0)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at iteration {it}")
        if cfg.kind != "penalty" and cfg.safety_every and it % cfg.safety_every == 0:
            worst = float(np.max(U @ mpc.G.T - mpc.constraint_rhs(X0)))
            trace.max_violation.append((it, worst))
        grads = policy.backward(cache, dU)
        opt.step(params, grads)
        trace.iteration.append(it)
        trace.loss.append(loss)
        trace.seconds.append(time.perf_counter() - t0)
        if validation is not None and (it % cfg.val_every == 0 or it == cfg.iterations):
            d = validation.delta(policy)
            trace.val_iteration.append(it)
            trace.val_delta.append(d)
            if d < best[0]:
                best = (d, params.copy())
            log.info("%s it %d loss %.5f delta %.5f", cfg.kind, it, loss, d)
        if callback is not None:
            callback(it, loss, policy)
    final = best[1] if validation is not None else params
    policy.params = final
    return final, policy, trace


def random_search(mpc, phase1, kind: str, trials: int = 30, iterations: int = 200, seed: int = 0):
    """Random search over width, batch size and learning rate (log-uniform)."""
    rng = np.random.default_rng(seed)
    results = []
    validation = ValidationSet(mpc, 100, seed=[seed, 2])
    for t in range(trials):
        width = int(rng.integers(SEARCH_RANGES["width"][0], SEARCH_RANGES["width"][1] + 1))
        batch = int(rng.integers(SEARCH_RANGES["batch_size"][0], SEARCH_RANGES["batch_size"][1] + 1))
        lo, hi = np.log10(SEARCH_RANGES["lr"][0]), np.log10(SEARCH_RANGES["lr"][1])
        lr = float(10 ** rng.uniform(lo, hi))
        cfg = TrainConfig(kind=kind, width=width, lr=lr, batch_size=batch, iterations=iterations, seed=seed + t,
                          val_every=max(iterations // 4, 1))
        _, policy, trace = train(cfg, mpc, phase1, validation=validation)
        results.append({"width": width, "batch_size": batch, "lr": lr, "delta": min(trace.val_delta)})
    return results
