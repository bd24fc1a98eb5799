"""Linear systems, condensed MPC matrices, costs and the online-MPC oracle."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .optim import OPTIMAL, AdmmQp, SolverError
from .polytope import EmptyPolytopeError, Polytope, contains_polytope, tighten


class QuadraticCost:
    """l(x, u) = |x|^2 + c1 |u|^2 and l_F(x) = c2 |x|^2.

    All methods broadcast over leading batch dimensions. Any object with the
    same four methods can be used in place of this class.
    """

    def __init__(self, c1: float = 1.0, c2: float = 1.0):
        if c1 <= 0 or c2 <= 0:
            raise ValueError("cost weights must be positive")
        self.c1 = float(c1)
        self.c2 = float(c2)

    def stage(self, x, u):
        return np.sum(x * x, axis=-1) + self.c1 * np.sum(u * u, axis=-1)

    def stage_grad(self, x, u):
        return 2.0 * x, 2.0 * self.c1 * u

    def terminal(self, x):
        return self.c2 * np.sum(x * x, axis=-1)

    def terminal_grad(self, x):
        return 2.0 * self.c2 * x


def stage_cost(x, u, c1: float = 1.0) -> float:
    x, u = np.asarray(x, float), np.asarray(u, float)
    return float(x @ x + c1 * u @ u)


def terminal_cost(x, c2: float = 1.0) -> float:
    x = np.asarray(x, float)
    return float(c2 * x @ x)


@dataclass(frozen=True)
class LinearSystem:
    """x+ = A x + B u + d with state set X, inputs U, disturbances D and RCI S."""

    A: np.ndarray
    B: np.ndarray
    X: Polytope
    U: Polytope
    D: Polytope
    S: Polytope
    T: Polytope = field(default=None)
    check: bool = True

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        n, m = B.shape
        if A.shape != (n, n):
            raise ValueError(f"A has shape {A.shape}, expected {(n, n)}")
        for name, P, d in (("X", self.X, n), ("U", self.U, m), ("D", self.D, n), ("S", self.S, n)):
            if P.dim != d:
                raise ValueError(f"{name} has dimension {P.dim}, expected {d}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        T = tighten(self.S, self.D)
        if self.T is not None:
            if self.T.F.shape != T.F.shape or not np.allclose(self.T.F, T.F) or not np.allclose(self.T.g, T.g, atol=1e-8):
                raise ValueError("T does not match tighten(S, D)")
        object.__setattr__(self, "T", T)
        if self.check and not contains_polytope(self.X, self.S, tol=1e-8):
            raise ValueError("S is not contained in X")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def step(self, x, u, d=None):
        x1 = self.A @ x + self.B @ u
        return x1 if d is None else x1 + d


class CondensedMpc:
    """Horizon-``tau`` MPC with states eliminated.

    Stacked states are ``x_1..x_tau = M0 x0 + Mu u`` and the feasible set is
    ``{u | Hs (M0 x0 + Mu u) <= hs_t, Hu u <= hu}``.
    """

    def __init__(self, sys: LinearSystem, tau: int, c1: float = 1.0, c2: float = 1.0, cost=None):
        if tau < 1:
            raise ValueError("horizon must be at least 1")
        self.sys = sys
        self.tau = int(tau)
        self.c1 = float(c1)
        self.c2 = float(c2)
        self.cost = cost if cost is not None else QuadraticCost(c1, c2)
        A, B = sys.A, sys.B
        n, m = sys.n, sys.m
        powers = [np.eye(n)]
        for _ in range(tau):
            powers.append(A @ powers[-1])
        self.M0 = np.vstack(powers[1:])
        Mu = np.zeros((n * tau, m * tau))
        for i in range(tau):
            for j in range(i + 1):
                Mu[i * n:(i + 1) * n, j * m:(j + 1) * m] = powers[i - j] @ B
        self.Mu = Mu
        self.Hs = np.kron(np.eye(tau), sys.T.F)
        self.hs = np.tile(sys.T.g, tau)
        self.Hu = np.kron(np.eye(tau), sys.U.F)
        self.hu = np.tile(sys.U.g, tau)
        G = np.vstack([self.Hs @ self.Mu, self.Hu])
        self._row_ok = np.linalg.norm(G, axis=1) > 1e-12
        # feasible set {u | G u <= h0 - E x0}
        self.G = G[self._row_ok]
        self._G_all = G
        self._h0_all = np.concatenate([self.hs, self.hu])
        self._E_all = np.vstack([self.Hs @ self.M0, np.zeros((self.Hu.shape[0], n))])
        self.h0 = self._h0_all[self._row_ok]
        self.E = self._E_all[self._row_ok]

    @property
    def n(self) -> int:
        return self.sys.n

    @property
    def m(self) -> int:
        return self.sys.m

    @property
    def nu(self) -> int:
        return self.m * self.tau

    def predict(self, x0, u):
        """Stacked states x_1..x_tau (batched over leading axis if 2-D)."""
        return np.asarray(x0) @ self.M0.T + np.asarray(u) @ self.Mu.T

    def constraint_rhs(self, x0):
        """h(x0) for the retained (u-dependent) rows; batched over rows of x0."""
        return self.h0 - np.asarray(x0) @ self.E.T

    def feasible_set(self, x0) -> Polytope:
        return feasible_set(self, x0)

    def trajectory_cost(self, x0, u):
        """Open-loop cost sum_k l(x_k, u_k) + l_F(x_tau); batched over rows."""
        x0 = np.asarray(x0, dtype=float)
        u = np.asarray(u, dtype=float)
        single = x0.ndim == 1
        x0 = np.atleast_2d(x0)
        u = np.atleast_2d(u)
        nb = x0.shape[0]
        X = self.predict(x0, u).reshape(nb, self.tau, self.n)
        Us = u.reshape(nb, self.tau, self.m)
        Xs = np.concatenate([x0[:, None, :], X[:, :-1, :]], axis=1)
        c = np.sum(self.cost.stage(Xs, Us), axis=1) + self.cost.terminal(X[:, -1, :])
        return float(c[0]) if single else c

    def trajectory_cost_grad(self, x0, u):
        """Cost and its gradient with respect to the stacked inputs (batched)."""
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        u = np.atleast_2d(np.asarray(u, dtype=float))
        nb = x0.shape[0]
        X = self.predict(x0, u).reshape(nb, self.tau, self.n)
        Us = u.reshape(nb, self.tau, self.m)
        Xs = np.concatenate([x0[:, None, :], X[:, :-1, :]], axis=1)
        c = np.sum(self.cost.stage(Xs, Us), axis=1) + self.cost.terminal(X[:, -1, :])
        gx, gu = self.cost.stage_grad(Xs, Us)
        # gradient wrt x_1..x_tau
        gX = np.concatenate([gx[:, 1:, :], self.cost.terminal_grad(X[:, -1, :])[:, None, :]], axis=1)
        grad = gu.reshape(nb, -1) + gX.reshape(nb, -1) @ self.Mu
        return c, grad

    def quadratic_form(self):
        """(P, Px, K) with cost(u) = 1/2 u'Pu + (Px x0)'u + x0'K x0 for the quadratic cost."""
        if not isinstance(self.cost, QuadraticCost):
            raise TypeError("the QP form needs the quadratic cost")
        n, tau = self.n, self.tau
        w = np.ones(n * tau)
        w[-n:] = self.c2
        Qb = np.diag(w)
        P = 2.0 * (self.Mu.T @ Qb @ self.Mu + self.c1 * np.eye(self.nu))
        Px = 2.0 * self.Mu.T @ Qb @ self.M0
        K = np.eye(n) + self.M0.T @ Qb @ self.M0
        return 0.5 * (P + P.T), Px, K


def condense(sys: LinearSystem, tau: int, c1: float = 1.0, c2: float = 1.0) -> CondensedMpc:
    return CondensedMpc(sys, tau, c1, c2)


def feasible_set(mpc: CondensedMpc, x0) -> Polytope:
    """The polytope of input sequences feasible from ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    h_all = mpc._h0_all - mpc._E_all @ x0
    fixed = ~mpc._row_ok
    if np.any(h_all[fixed] < 0):
        raise EmptyPolytopeError("a constraint independent of u is violated at x0")
    return Polytope(mpc.G, h_all[mpc._row_ok])


class MpcOracle:
    """Online MPC: solves the condensed QP at each state.

    The QP matrix factorization is built once and reused across states.
    """

    def __init__(self, mpc: CondensedMpc, tol: float = 1e-8):
        self.mpc = mpc
        self.tol = tol
        self.P, self.Px, self.K = mpc.quadratic_form()
        self._qp = AdmmQp(self.P, mpc.G)

    def solve(self, x0, tol: float | None = None):
        """Return ``(u*, cost, report)`` for one state, or batched over rows of ``x0``."""
        tol = self.tol if tol is None else tol
        x0 = np.asarray(x0, dtype=float)
        single = x0.ndim == 1
        X0 = np.atleast_2d(x0)
        q = (X0 @ self.Px.T).T
        h = self.mpc.constraint_rhs(X0).T
        rep = self._qp.solve(q, h, tol=tol)
        if rep.status != OPTIMAL:
            raise SolverError(f"MPC oracle QP ended with status {rep.status}", rep)
        U = rep.x.T if rep.x.ndim == 2 else rep.x[None, :]
        cost = self.mpc.trajectory_cost(X0, U)
        if single:
            return U[0], float(cost[0]), rep
        return U, cost, rep

    def first_action(self, x0):
        u, _, _ = self.solve(x0)
        return u[: self.mpc.m]


def solve_mpc_oracle(mpc: CondensedMpc, x0, tol: float = 1e-8):
    u, c, _ = MpcOracle(mpc, tol).solve(x0)
    return u, c
