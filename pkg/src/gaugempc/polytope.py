"""Halfspace-representation polytopes {z | F z <= g}."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .optim import OPTIMAL, UNBOUNDED, LpProblem, SolverError, solve_lp

log = logging.getLogger(__name__)

CSET_TOL = 1e-9


class EmptyPolytopeError(ValueError):
    pass


class NotCSetError(ValueError):
    pass


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class Polytope:
    """Immutable polytope ``{z | F z <= g}``."""

    __slots__ = ("F", "g")

    def __init__(self, F, g):
        F = np.atleast_2d(np.asarray(F, dtype=float))
        g = np.asarray(g, dtype=float).ravel()
        if F.shape[0] != g.size:
            raise ValueError(f"F has {F.shape[0]} rows but g has {g.size} entries")
        if np.any(np.linalg.norm(F, axis=1) == 0):
            raise ValueError("zero rows are not allowed in F")
        object.__setattr__(self, "F", _frozen(F))
        object.__setattr__(self, "g", _frozen(g))

    def __setattr__(self, name, value):
        raise AttributeError("Polytope is immutable")

    def __repr__(self):
        return f"Polytope(dim={self.dim}, rows={self.nrows})"

    @classmethod
    def box(cls, lo, hi):
        lo = np.asarray(lo, dtype=float).ravel()
        hi = np.asarray(hi, dtype=float).ravel()
        n = lo.size
        return cls(np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([hi, -lo]))

    @classmethod
    def inf_ball(cls, n, radius=1.0):
        return cls.box(-radius * np.ones(n), radius * np.ones(n))

    @property
    def dim(self) -> int:
        return self.F.shape[1]

    @property
    def nrows(self) -> int:
        return self.F.shape[0]

    def scaled(self, lam: float) -> Polytope:
        """``lam * P`` for ``lam > 0``."""
        return Polytope(self.F, lam * self.g)

    def translated(self, shift) -> Polytope:
        """``P + shift``."""
        return Polytope(self.F, self.g + self.F @ np.asarray(shift, dtype=float))

    def intersect(self, other: Polytope) -> Polytope:
        return Polytope(np.vstack([self.F, other.F]), np.concatenate([self.g, other.g]))

    def normalized(self) -> Polytope:
        nr = np.linalg.norm(self.F, axis=1)
        return Polytope(self.F / nr[:, None], self.g / nr)

    def contains_point(self, z, tol: float = 1e-9) -> bool:
        return bool(np.all(self.F @ np.asarray(z, dtype=float) <= self.g + tol))

    def contains_points(self, Z, tol: float = 1e-9) -> np.ndarray:
        """Row-wise membership for an array of points (one per row)."""
        Z = np.atleast_2d(Z)
        return np.all(Z @ self.F.T <= self.g + tol, axis=1)

    def is_cset(self) -> bool:
        """Origin strictly inside (boundedness is not checked here)."""
        return bool(np.all(self.g > 0))

    def support(self, direction) -> float:
        """``max_{z in P} direction' z``; ``inf`` if unbounded."""
        r = solve_lp(LpProblem(-np.asarray(direction, dtype=float), self.F, self.g))
        if r.status == OPTIMAL:
            return -r.objective
        if r.status == UNBOUNDED:
            return np.inf
        if r.status == "infeasible":
            raise EmptyPolytopeError("support of an empty polytope")
        raise SolverError(f"support LP ended with status {r.status}", r)

    def bounding_box(self):
        """Per-axis (lo, hi) from 2n LPs; entries are +-inf along unbounded axes."""
        n = self.dim
        lo = np.empty(n)
        hi = np.empty(n)
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            hi[i] = self.support(e)
            lo[i] = -self.support(-e)
        return lo, hi

    def is_bounded(self) -> bool:
        lo, hi = self.bounding_box()
        return bool(np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)))

    def chebyshev(self) -> CSetCertificate:
        return chebyshev(self)

    def to_dict(self) -> dict:
        return {"F": self.F.tolist(), "g": self.g.tolist()}

    @classmethod
    def from_dict(cls, d) -> Polytope:
        return cls(d["F"], d["g"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> Polytope:
        return cls.from_dict(json.loads(s))

    def __eq__(self, other):
        if not isinstance(other, Polytope):
            return NotImplemented
        return self.F.shape == other.F.shape and np.array_equal(self.F, other.F) and np.array_equal(self.g, other.g)

    __hash__ = None


@dataclass(frozen=True)
class CSetCertificate:
    center: np.ndarray
    radius: float
    bounded: bool

    @property
    def has_interior(self) -> bool:
        return self.radius > 0


def chebyshev(P: Polytope) -> CSetCertificate:
    """Largest inscribed Euclidean ball: max r s.t. F_i'c + r |F_i| <= g_i."""
    n = P.dim
    nr = np.linalg.norm(P.F, axis=1)
    G = np.hstack([P.F, nr[:, None]])
    c = np.zeros(n + 1)
    c[-1] = -1.0
    r = solve_lp(LpProblem(c, np.vstack([G, -np.eye(n + 1)[-1:]]), np.concatenate([P.g, [0.0]])))
    bounded = P.is_bounded() if r.status != "infeasible" else True
    if r.status == OPTIMAL:
        return CSetCertificate(r.x[:n], max(float(r.x[-1]), 0.0), bounded)
    if r.status == "infeasible":
        return CSetCertificate(np.full(n, np.nan), 0.0, True)
    if r.status == UNBOUNDED:
        return CSetCertificate(np.full(n, np.nan), np.inf, False)
    raise SolverError(f"Chebyshev LP ended with status {r.status}", r)


# ---------------------------------------------------------------------------
# gauge functions


def _require_cset(P: Polytope):
    if not P.is_cset():
        raise NotCSetError("polytope does not contain the origin in its interior (some g_i <= 0)")


def gauge(P: Polytope, v) -> float:
    """Gauge of ``v`` with respect to the C-set ``P``."""
    _require_cset(P)
    v = np.asarray(v, dtype=float)
    return max(float(np.max(P.F @ v / P.g)), 0.0)


def _gauge_argmax(P: Polytope, v):
    ratios = P.F @ v / P.g
    i = int(np.argmax(ratios))  # lowest index among ties
    return max(float(ratios[i]), 0.0), i


def gauge_map(P: Polytope, Q: Polytope, v) -> np.ndarray:
    """Map ``v`` in ``P`` to ``Q`` by rescaling with the ratio of gauges.

    The zero vector maps to itself.
    """
    _require_cset(P)
    _require_cset(Q)
    v = np.asarray(v, dtype=float)
    gp, _ = _gauge_argmax(P, v)
    if gp > 1 + CSET_TOL:
        raise ValueError(f"v is outside P (gauge {gp:.6g} > 1)")
    if not np.any(v):
        return np.zeros_like(v)
    gq, _ = _gauge_argmax(Q, v)
    if gq <= 0:
        raise ValueError("Q is unbounded along v")
    return (gp / gq) * v


def gauge_map_vjp(P: Polytope, Q: Polytope, v, upstream) -> np.ndarray:
    """Vector-Jacobian product of :func:`gauge_map` at ``v``.

    Uses the lowest-index maximizing row of each gauge as its subgradient.
    The map is positively homogeneous, so at ``v = 0`` the Jacobian taken
    along the first coordinate axis is used (an element of the Clarke
    Jacobian there).
    """
    _require_cset(P)
    _require_cset(Q)
    v = np.asarray(v, dtype=float)
    up = np.asarray(upstream, dtype=float)
    gp, _ = _gauge_argmax(P, v)
    if gp > 1 + CSET_TOL:
        raise ValueError(f"v is outside P (gauge {gp:.6g} > 1)")
    if not np.any(v):
        v = np.zeros_like(v)
        v[0] = 1.0
    gp, ip = _gauge_argmax(P, v)
    gq, iq = _gauge_argmax(Q, v)
    if gq <= 0:
        raise ValueError("Q is unbounded along v")
    da = P.F[ip] / P.g[ip]
    db = Q.F[iq] / Q.g[iq]
    r = gp / gq
    return r * up + (da / gq - gp * db / gq**2) * (v @ up)


# ---------------------------------------------------------------------------
# tightening, redundancy, projection


def support_vector(D: Polytope, directions) -> np.ndarray:
    """Support function of ``D`` along each row of ``directions`` (one LP per row)."""
    directions = np.atleast_2d(directions)
    return np.array([D.support(d) for d in directions])


def tighten(S: Polytope, D: Polytope) -> Polytope:
    """Pontryagin difference ``S - D`` for rows of ``S``: ``{x | x + d in S for all d in D}``."""
    h = support_vector(D, S.F)
    if not np.all(np.isfinite(h)):
        raise ValueError("disturbance set must be bounded")
    return Polytope(S.F, S.g - h)


def remove_redundancy(P: Polytope, tol: float = 1e-9) -> Polytope:
    """Drop rows implied by the others (one LP per row)."""
    Pn = P.normalized()
    F, g = Pn.F, Pn.g
    # exact duplicates first; keep the tightest copy
    tightest = {}
    for i, row in enumerate(np.round(F, 12)):
        key = row.tobytes()
        if key not in tightest or g[i] < g[tightest[key]]:
            tightest[key] = i
    keep = sorted(tightest.values())
    i_pos = len(keep) - 1
    while i_pos >= 0:
        i = keep[i_pos]
        others = [j for j in keep if j != i]
        if others:
            G = np.vstack([F[others], F[i]])
            h = np.concatenate([g[others], [g[i] + 1.0]])
            r = solve_lp(LpProblem(-F[i], G, h))
            if r.status == OPTIMAL and -r.objective <= g[i] + tol:
                keep = others
            elif r.status == "infeasible":
                raise EmptyPolytopeError("polytope is empty")
        i_pos -= 1
    return Polytope(F[keep], g[keep])


def _fourier_motzkin(F, g, k):
    """Eliminate variable ``k`` from ``F z <= g``."""
    col = F[:, k]
    pos = np.flatnonzero(col > 1e-12)
    neg = np.flatnonzero(col < -1e-12)
    zer = np.flatnonzero(np.abs(col) <= 1e-12)
    rows = [F[zer]]
    rhs = [g[zer]]
    if pos.size and neg.size:
        Fp = F[pos] / col[pos, None]
        gp = g[pos] / col[pos]
        Fm = F[neg] / -col[neg, None]
        gm = g[neg] / -col[neg]
        rows.append((Fp[:, None, :] + Fm[None, :, :]).reshape(-1, F.shape[1]))
        rhs.append((gp[:, None] + gm[None, :]).ravel())
    F2 = np.delete(np.vstack(rows), k, axis=1)
    g2 = np.concatenate(rhs)
    nr = np.linalg.norm(F2, axis=1)
    trivial = nr <= 1e-12
    if np.any(g2[trivial] < -1e-12):
        raise EmptyPolytopeError("projection is empty")
    return F2[~trivial], g2[~trivial]


def project(P: Polytope, keep_dims: int) -> Polytope:
    """Projection onto the first ``keep_dims`` coordinates (Fourier-Motzkin with LP pruning)."""
    F, g = np.array(P.F), np.array(P.g)
    for k in range(P.dim - 1, keep_dims - 1, -1):
        F, g = _fourier_motzkin(F, g, k)
        if F.shape[0] == 0:
            raise ValueError("projection is unbounded in every direction")
        Q = remove_redundancy(Polytope(F, g))
        F, g = np.array(Q.F), np.array(Q.g)
    return Polytope(F, g)


def contains_polytope(outer: Polytope, inner: Polytope, tol: float = 1e-9) -> bool:
    """``inner`` is a subset of ``outer`` (one LP per row of ``outer``)."""
    for f, gi in zip(outer.F, outer.g):
        if inner.support(f) > gi + tol:
            return False
    return True


# ---------------------------------------------------------------------------
# sampling


def sample_uniform(P: Polytope, count: int, seed=None, chunk: int = 4096,
                   min_rate: float = 1e-6, bbox=None) -> np.ndarray:
    """Uniform samples from a bounded polytope by rejection from its bounding box.

    Returns an array of shape ``(count, dim)``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = P.dim
    if count <= 0:
        return np.zeros((0, n))
    lo, hi = bbox if bbox is not None else P.bounding_box()
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("cannot sample an unbounded polytope")
    out = []
    got = 0
    drawn = 0
    while got < count:
        size = max(chunk, 2 * (count - got))
        Z = lo + (hi - lo) * rng.random((size, n))
        ok = np.all(Z @ P.F.T <= P.g, axis=1)
        drawn += size
        acc = Z[ok]
        out.append(acc)
        got += acc.shape[0]
        if drawn >= 1_000_000 and got / drawn < min_rate:
            raise ValueError(f"acceptance rate {got / drawn:.2e} too low for rejection sampling")
    return np.vstack(out)[:count]


# ---------------------------------------------------------------------------
# invariant sets


def safe_action_lp(T: Polytope, U: Polytope, A, B, x):
    """min s s.t. F_t (A x + B u) <= g_t + s, F_u u <= g_u + s.

    Returns ``(u, s)``; ``s < 0`` certifies that the one-step safe action
    set has nonempty interior.
    """
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    m = B.shape[1]
    FtB = T.F @ B
    G = np.vstack([np.hstack([FtB, -np.ones((T.nrows, 1))]),
                   np.hstack([U.F, -np.ones((U.nrows, 1))])])
    h = np.concatenate([T.g - T.F @ (A @ x), U.g])
    c = np.zeros(m + 1)
    c[-1] = 1.0
    r = solve_lp(LpProblem(c, G, h))
    if r.status != OPTIMAL:
        raise SolverError(f"max-violation LP ended with status {r.status}", r)
    return r.x[:m], float(r.x[-1])


@dataclass(frozen=True)
class RciResult:
    polytope: Polytope
    converged: bool
    iterations: int


def rci_iterate(X: Polytope, U: Polytope, D: Polytope, A, B, max_iter: int = 50,
                tol: float = 1e-8) -> RciResult:
    """Backward-reachability iteration ``S <- X & Pre(S - D)``.

    Stops at the first iterate contained (within ``tol``) in its successor,
    which is then robust control invariant. Raises ``EmptyPolytopeError``
    if an iterate loses its interior.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, m = B.shape
    S = remove_redundancy(X)
    Fu_block = np.hstack([np.zeros((U.nrows, n)), U.F])
    for it in range(1, max_iter + 1):
        T = tighten(S, D)
        if not chebyshev(T).has_interior:
            raise EmptyPolytopeError("no robust control invariant set inside X")
        lifted = Polytope(np.vstack([np.hstack([T.F @ A, T.F @ B]), Fu_block]),
                          np.concatenate([T.g, U.g]))
        try:
            pre = project(lifted, n)
            nxt = remove_redundancy(X.intersect(pre))
        except EmptyPolytopeError:
            raise EmptyPolytopeError("no robust control invariant set inside X") from None
        if not chebyshev(nxt).has_interior:
            raise EmptyPolytopeError("no robust control invariant set inside X")
        log.debug("rci iteration %d: %d rows", it, nxt.nrows)
        if contains_polytope(nxt, S, tol):
            return RciResult(nxt, True, it)
        S = nxt
    return RciResult(S, False, max_iter)


def invariant_under_affine(X: Polytope, U: Polytope, D: Polytope, A, B, W, w,
                           margin: float = 0.0, max_iter: int = 200, tol: float = 1e-9) -> RciResult:
    """Largest subset of ``X`` kept robustly invariant by ``u = W x + w``.

    Inputs stay ``margin`` inside ``U`` and the nominal successor stays
    ``margin`` inside the tightened set (row-wise), so the affine policy
    has strictly negative maximum violation on the result.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    w = np.asarray(w, dtype=float).ravel()
    Acl = A + B @ W
    off = B @ w
    S = remove_redundancy(X.intersect(Polytope(U.F @ W, U.g - U.F @ w - margin)))
    for it in range(1, max_iter + 1):
        T = tighten(S, D)
        nxt = remove_redundancy(S.intersect(Polytope(T.F @ Acl, T.g - T.F @ off - margin)))
        if not chebyshev(nxt).has_interior:
            raise EmptyPolytopeError("affine policy admits no invariant set with interior")
        if contains_polytope(nxt, S, tol):
            return RciResult(nxt, True, it)
        S = nxt
    return RciResult(S, False, max_iter)


def certify_rci(S: Polytope, U: Polytope, D: Polytope, A, B, samples) -> np.ndarray:
    """Optimal max-violation LP value at each sample (``<= 0`` means a safe input exists)."""
    T = tighten(S, D)
    return np.array([safe_action_lp(T, U, A, B, x)[1] for x in np.atleast_2d(samples)])
