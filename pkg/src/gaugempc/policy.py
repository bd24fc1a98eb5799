"""Neural MPC policies mapping states to input sequences.

``GaugePolicy`` is safe by construction: the MLP output is squashed into the
unit hypercube and carried onto the feasible set shifted by a Phase I
interior point, using the gauge map. ``PenaltyPolicy`` and
``ProjectionPolicy`` are the usual baselines.
"""

from __future__ import annotations

import warnings

import numpy as np

from .mpc import CondensedMpc
from .nn import MlpParams, mlp_backward, mlp_forward
from .optim import OPTIMAL, AdmmQp, SolverError
from .phase1 import STRICT_TOL, AffinePhaseOne, PhaseOneFailure, phase1_batch
from .polytope import Polytope, contains_polytope

GAUGE_FLOOR = 1e-12


def extract_first_action(useq, m: int) -> np.ndarray:
    useq = np.asarray(useq)
    if useq.shape[-1] % m:
        raise ValueError(f"sequence length {useq.shape[-1]} is not a multiple of m={m}")
    return useq[..., :m]


class _MlpPolicy:
    kind = "base"

    def __init__(self, params: MlpParams, mpc: CondensedMpc):
        if params.sizes[0] != mpc.n or params.sizes[-1] != mpc.nu:
            raise ValueError(f"MLP sizes {params.sizes} do not match n={mpc.n}, m*tau={mpc.nu}")
        self.params = params
        self.mpc = mpc

    def __call__(self, x0):
        U, _ = self.forward(np.asarray(x0, dtype=float)[None, :])
        return U[0]

    def first_action(self, x0):
        return extract_first_action(self(x0), self.mpc.m)

    def extra_loss(self, X0, U):
        """Additional loss term and its gradient wrt U (none by default)."""
        return 0.0, None


class GaugePolicy(_MlpPolicy):
    kind = "gauge"

    def __init__(self, params: MlpParams, mpc: CondensedMpc, phase1: AffinePhaseOne, squash: str = "tanh"):
        super().__init__(params, mpc)
        if squash not in ("tanh", "clamp"):
            raise ValueError("squash must be 'tanh' or 'clamp'")
        self.phase1 = phase1
        self.squash = squash

    def forward(self, X0):
        """Batched forward pass; returns ``(U, cache)`` with one sequence per row."""
        X0 = np.atleast_2d(np.asarray(X0, dtype=float))
        Z, mcache = mlp_forward(self.params, X0)
        psi = np.tanh(Z) if self.squash == "tanh" else np.clip(Z, -1.0, 1.0)
        mu0, slack = phase1_batch(self.mpc, self.phase1, X0)
        if np.min(slack) <= STRICT_TOL:
            raise PhaseOneFailure(f"Phase I margin {np.min(slack):.3e} is not positive")
        gt = np.maximum(slack, GAUGE_FLOOR)
        out, gcache = _gauge_map_batch(psi, self.mpc.G, gt)
        return mu0 + out, (mcache, Z, psi, gt, gcache)

    def backward(self, cache, dU) -> MlpParams:
        mcache, Z, psi, gt, gcache = cache
        dpsi = _gauge_map_batch_vjp(psi, self.mpc.G, gt, gcache, dU)
        if self.squash == "tanh":
            dZ = dpsi * (1.0 - psi * psi)
        else:
            dZ = dpsi * (np.abs(Z) < 1.0)
        return mlp_backward(self.params, mcache, dZ)

    def shifted_set(self, x0) -> Polytope:
        """F(x0) translated by minus the Phase I point (a C-set)."""
        mu0, slack = phase1_batch(self.mpc, self.phase1, np.asarray(x0, float)[None, :])
        return Polytope(self.mpc.G, slack[0])


def _gauge_map_batch(psi, G, gt):
    """Row-wise gauge map from the unit hypercube to {v | G v <= gt_b}."""
    N = psi.shape[1]
    # hypercube rows are [I; -I], so ratios are [psi, -psi]; argmax takes the lowest index on ties
    both = np.concatenate([psi, -psi], axis=1)
    ip = np.argmax(both, axis=1)
    rows = np.arange(psi.shape[0])
    gp = np.maximum(both[rows, ip], 0.0)
    ratios = (psi @ G.T) / gt
    iq = np.argmax(ratios, axis=1)
    gq = ratios[rows, iq]
    zero = gp == 0.0
    r = np.where(zero, 0.0, gp / np.where(zero, 1.0, gq))
    return r[:, None] * psi, (ip, iq, gp, gq, r, zero, N)


def _gauge_map_batch_vjp(psi, G, gt, gcache, dU):
    ip, iq, gp, gq, r, zero, N = gcache
    rows = np.arange(psi.shape[0])
    if np.any(zero):
        # Clarke element along the first axis at the origin
        psi = psi.copy()
        psi[zero, 0] = 1.0
        both = np.concatenate([psi, -psi], axis=1)
        ip = np.argmax(both, axis=1)
        gp = both[rows, ip]
        ratios = (psi @ G.T) / gt
        iq = np.argmax(ratios, axis=1)
        gq = ratios[rows, iq]
        r = gp / gq
    da = np.zeros_like(psi)
    sign = np.where(ip < N, 1.0, -1.0)
    da[rows, ip % N] = sign
    db = G[iq] / gt[rows, iq][:, None]
    pu = np.sum(psi * dU, axis=1)
    coef = da / gq[:, None] - (gp / gq**2)[:, None] * db
    return r[:, None] * dU + coef * pu[:, None]


class PenaltyPolicy(_MlpPolicy):
    """Outputs squashed onto the input box; state constraints enter the loss only."""

    kind = "penalty"

    def __init__(self, params: MlpParams, mpc: CondensedMpc, beta: float = 10.0):
        super().__init__(params, mpc)
        if beta < 0:
            raise ValueError("beta must be nonnegative")
        self.beta = float(beta)
        U = mpc.sys.U
        lo, hi = U.bounding_box()
        box = Polytope.box(lo, hi)
        if not (contains_polytope(U, box, 1e-9) and contains_polytope(box, U, 1e-9)):
            raise ValueError("the penalty baseline needs an axis-aligned box input set")
        self.center = np.tile((hi + lo) / 2.0, mpc.tau)
        self.half = np.tile((hi - lo) / 2.0, mpc.tau)

    def forward(self, X0):
        X0 = np.atleast_2d(np.asarray(X0, dtype=float))
        Z, mcache = mlp_forward(self.params, X0)
        t = np.tanh(Z)
        return self.center + self.half * t, (mcache, t)

    def backward(self, cache, dU) -> MlpParams:
        mcache, t = cache
        return mlp_backward(self.params, mcache, dU * self.half * (1.0 - t * t))

    def violations(self, X0, U):
        """Elementwise positive parts of target-set violations along x_1..x_tau."""
        mpc = self.mpc
        nb = np.atleast_2d(X0).shape[0]
        X = mpc.predict(np.atleast_2d(X0), np.atleast_2d(U)).reshape(nb, mpc.tau, mpc.n)
        return X @ mpc.sys.T.F.T - mpc.sys.T.g

    def extra_loss(self, X0, U):
        """Batch mean of beta * sum(max(0, F x_t - g~)), and its gradient wrt U."""
        mpc = self.mpc
        viol = self.violations(X0, U)
        nb = viol.shape[0]
        value = self.beta * float(np.sum(np.maximum(viol, 0.0))) / nb
        active = (viol > 0).astype(float)
        dX = self.beta * (active @ mpc.sys.T.F) / nb
        return value, dX.reshape(nb, -1) @ mpc.Mu


class ProjectionPolicy(_MlpPolicy):
    """Raw MLP output projected onto F(x0) by a QP in the output layer."""

    kind = "projection"

    def __init__(self, params: MlpParams, mpc: CondensedMpc, tol: float = 1e-6, active_tol: float = 1e-7):
        super().__init__(params, mpc)
        self.tol = tol
        self.active_tol = active_tol
        self._qp = AdmmQp(2.0 * np.eye(mpc.nu), mpc.G)

    def project(self, X0, V, tol=None):
        tol = self.tol if tol is None else tol
        h = self.mpc.constraint_rhs(X0)
        rep = self._qp.solve(-2.0 * V.T, h.T, tol=tol)
        U = rep.x.T
        if rep.status != OPTIMAL:
            worst = float(np.max(U @ self.mpc.G.T - h))
            if worst > tol:
                raise SolverError(f"projection QP ended with status {rep.status} (violation {worst:.2e})", rep)
        return U, h

    def forward(self, X0):
        X0 = np.atleast_2d(np.asarray(X0, dtype=float))
        V, mcache = mlp_forward(self.params, X0)
        U, h = self.project(X0, V)
        return U, (mcache, U, h)

    def backward(self, cache, dU) -> MlpParams:
        mcache, U, h = cache
        return mlp_backward(self.params, mcache, self.projection_vjp(U, h, dU))

    def projection_vjp(self, U, h, dU):
        """Implicit differentiation of the projection at its active set.

        With active rows ``A`` the projection is locally ``v - A^T (A A^T)^{-1} (A v - b)``,
        whose Jacobian is the orthogonal projector onto the null space of ``A``.
        """
        G = self.mpc.G
        slack = h - U @ G.T
        dV = np.array(dU, dtype=float, copy=True)
        for j in range(U.shape[0]):
            act = slack[j] <= self.active_tol
            if not np.any(act):
                continue
            Aa = G[act]
            AAt = Aa @ Aa.T
            rhs = Aa @ dU[j]
            try:
                if np.linalg.cond(AAt) > 1e12:
                    raise np.linalg.LinAlgError
                coef = np.linalg.solve(AAt, rhs)
            except np.linalg.LinAlgError:
                warnings.warn("ill-conditioned active set in projection backward; using least squares",
                              RuntimeWarning, stacklevel=2)
                coef = np.linalg.lstsq(AAt, rhs, rcond=None)[0]
            dV[j] = dU[j] - Aa.T @ coef
        return dV


def make_policy(kind: str, params: MlpParams, mpc: CondensedMpc, phase1: AffinePhaseOne | None = None,
                beta: float = 10.0, squash: str = "tanh", proj_tol: float = 1e-6):
    if kind == "gauge":
        if phase1 is None:
            raise ValueError("the gauge policy needs a Phase I policy")
        return GaugePolicy(params, mpc, phase1, squash)
    if kind == "penalty":
        return PenaltyPolicy(params, mpc, beta)
    if kind == "projection":
        return ProjectionPolicy(params, mpc, tol=proj_tol)
    raise ValueError(f"unknown policy kind {kind!r}")


def policy_forward(p, x0):
    """Single-state forward pass returning ``(u_sequence, cache)``."""
    U, cache = p.forward(np.asarray(x0, dtype=float)[None, :])
    return U[0], cache


def policy_backward(p, cache, upstream) -> MlpParams:
    return p.backward(cache, np.atleast_2d(upstream))
