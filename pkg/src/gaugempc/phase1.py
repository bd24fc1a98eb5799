"""Strictly feasible starting points for the MPC feasible set."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .mpc import CondensedMpc, LinearSystem
from .optim import OPTIMAL, LpProblem, SolverError, solve_lp
from .polytope import safe_action_lp

STRICT_TOL = 1e-9


class PhaseOneInfeasible(Exception):
    """No strictly feasible affine policy exists (optimal margin >= 0).

    ``best`` holds the optimal, non-strict policy when the LP was solvable.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class PhaseOneFailure(RuntimeError):
    """A state produced a nonpositive interior margin."""


@dataclass(frozen=True)
class AffinePhaseOne:
    W: np.ndarray
    w: np.ndarray
    margin: float

    def __call__(self, x):
        return np.asarray(x) @ self.W.T + self.w

    def to_dict(self):
        return {"W": self.W.tolist(), "w": self.w.tolist(), "margin": self.margin}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["W"], float), np.array(d["w"], float), float(d.get("margin", np.nan)))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


@dataclass(frozen=True)
class PhaseOneResult:
    mu0: np.ndarray
    slack: np.ndarray
    margin: float
    states: np.ndarray


def violation(sys: LinearSystem, x0, u) -> np.ndarray:
    """Largest constraint violation of the one-step problem at a fixed input.

    This is the optimal value of the max-violation LP once ``u`` is fixed.
    Batched over rows of ``x0`` and ``u``.
    """
    x0 = np.asarray(x0, dtype=float)
    u = np.asarray(u, dtype=float)
    xn = x0 @ sys.A.T + u @ sys.B.T
    vt = xn @ sys.T.F.T - sys.T.g
    vu = u @ sys.U.F.T - sys.U.g
    return np.maximum(np.max(vt, axis=-1), np.max(vu, axis=-1))


def max_violation_lp(sys: LinearSystem, x0, u=None):
    """Solve min s s.t. F_s(A x0 + B u) <= g~_s + s, F_u u <= g_u + s.

    With ``u`` given only ``s`` is free and the value is returned in closed form.
    """
    x0 = np.asarray(x0, dtype=float)
    if u is not None:
        return np.asarray(u, dtype=float), float(violation(sys, x0, u))
    return safe_action_lp(sys.T, sys.U, sys.A, sys.B, x0)


def _containment_lp(sys: LinearSystem):
    """LP in (vec W, w, s, vec Lambda) encoding S subset of Y(s)."""
    n, m = sys.n, sys.m
    Fs, gs = sys.S.F, sys.S.g
    Ft, gt = sys.T.F, sys.T.g
    Fu, gu = sys.U.F, sys.U.g
    ks = Fs.shape[0]
    FtB = Ft @ sys.B
    FtA = Ft @ sys.A
    # rows of Y(s): C(W) x <= d(w, s)
    # first block: C = FtA + FtB W, d = gt - FtB w + s
    # second block: C = Fu W,       d = gu - Fu w + s
    L = np.vstack([FtB, Fu])  # coefficient of W in C and of w in d
    C0 = np.vstack([FtA, np.zeros((Fu.shape[0], n))])
    d0 = np.concatenate([gt, gu])
    r = L.shape[0]
    nW, nw, nL = m * n, m, r * ks
    iW, iw, i_s, iL = 0, nW, nW + nw, nW + nw + 1
    nv = iL + nL

    def lam(i, l):
        return iL + i * ks + l

    # Lambda Fs = C0 + L W   (r x n equalities)
    Aeq = np.zeros((r * n, nv))
    beq = np.zeros(r * n)
    for i in range(r):
        for j in range(n):
            row = i * n + j
            for l in range(ks):
                Aeq[row, lam(i, l)] = Fs[l, j]
            for a in range(m):
                Aeq[row, iW + a * n + j] = -L[i, a]
            beq[row] = C0[i, j]
    # Lambda gs <= d0 - L w + s
    G1 = np.zeros((r, nv))
    for i in range(r):
        G1[i, lam(i, 0):lam(i, 0) + ks] = gs
        G1[i, iw:iw + m] = L[i]
        G1[i, i_s] = -1.0
    h1 = d0
    # Lambda >= 0
    G2 = np.zeros((nL, nv))
    G2[:, iL:] = -np.eye(nL)
    c = np.zeros(nv)
    c[i_s] = 1.0
    return LpProblem(c, np.vstack([G1, G2]), np.concatenate([h1, np.zeros(nL)]), Aeq, beq), (iW, iw, i_s)


def synthesize_affine(sys: LinearSystem, tol: float = 1e-9) -> AffinePhaseOne:
    """Find (W, w) minimizing the worst-case violation over all of S.

    Raises :class:`PhaseOneInfeasible` when the optimal margin is not
    strictly negative.
    """
    p, (iW, iw, i_s) = _containment_lp(sys)
    r = solve_lp(p, tol=tol)
    if r.status != OPTIMAL:
        raise PhaseOneInfeasible(f"containment LP ended with status {r.status}")
    n, m = sys.n, sys.m
    W = r.x[iW:iW + m * n].reshape(m, n)
    w = r.x[iw:iw + m]
    s = float(r.x[i_s])
    pol = AffinePhaseOne(W, w, s)
    if s > -STRICT_TOL:
        raise PhaseOneInfeasible(f"best affine policy has margin {s:.3e} >= 0", best=pol)
    return pol


def _slack(mpc: CondensedMpc, x0, u):
    return mpc.constraint_rhs(x0) - u @ mpc.G.T


def phase1_batch(mpc: CondensedMpc, p1: AffinePhaseOne, X0):
    """Rollout of the affine Phase I policy for each row of ``X0``.

    Returns ``(mu0, slack)`` with shapes ``(B, m tau)`` and ``(B, rows)``.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    sys = mpc.sys
    x = X0
    us = []
    for _ in range(mpc.tau):
        u = p1(x)
        us.append(u)
        x = x @ sys.A.T + u @ sys.B.T
    mu0 = np.concatenate(us, axis=1)
    return mu0, _slack(mpc, X0, mu0)


def rollout_phase1(mpc: CondensedMpc, p1: AffinePhaseOne, x0, check_membership: bool = True) -> PhaseOneResult:
    """Interior point of F(x0) from rolling the affine policy over the horizon."""
    x0 = np.asarray(x0, dtype=float)
    if check_membership and not mpc.sys.S.contains_point(x0, 1e-9):
        raise ValueError("x0 is not in S")
    mu0, slack = phase1_batch(mpc, p1, x0[None, :])
    states = mpc.predict(x0, mu0[0]).reshape(mpc.tau, mpc.n)
    margin = float(np.min(slack[0]))
    if margin <= STRICT_TOL:
        raise PhaseOneFailure(f"Phase I margin {margin:.3e} is not positive")
    return PhaseOneResult(mu0[0], slack[0], margin, states)


def phase1_fallback_lp(mpc: CondensedMpc, x0) -> PhaseOneResult:
    """Interior point of F(x0) from one max-violation LP per step of the nominal rollout."""
    sys = mpc.sys
    x = np.asarray(x0, dtype=float)
    us = []
    states = []
    for k in range(mpc.tau):
        try:
            u, s = max_violation_lp(sys, x)
        except SolverError as e:
            raise PhaseOneFailure(f"max-violation LP failed at step {k}") from e
        if s >= -STRICT_TOL:
            raise PhaseOneFailure(f"step {k}: max-violation LP value {s:.3e} is not negative")
        us.append(u)
        x = sys.A @ x + sys.B @ u
        states.append(x)
    mu0 = np.concatenate(us)
    slack = _slack(mpc, np.asarray(x0, float), mu0)
    margin = float(np.min(slack))
    if margin <= STRICT_TOL:
        raise PhaseOneFailure(f"Phase I margin {margin:.3e} is not positive")
    return PhaseOneResult(mu0, slack, margin, np.array(states))
