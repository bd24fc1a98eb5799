"""Independent brute-force oracles used by the test-suite."""

import itertools

import numpy as np


def lp2_vertex_min(c, G, h, tol=1e-9):
    """Minimum of c'x over a bounded 2-D polygon by enumerating vertices."""
    best = np.inf
    arg = None
    for i, j in itertools.combinations(range(len(h)), 2):
        M = G[[i, j]]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        v = np.linalg.solve(M, h[[i, j]])
        if np.all(G @ v <= h + tol):
            val = c @ v
            if val < best:
                best, arg = val, v
    return best, arg


def qp_active_set_min(Q, q, G, h, tol=1e-9):
    """Minimum of a convex QP by trying every active set.

    For each subset the equality-constrained KKT system is solved; a
    candidate is kept if it is primal feasible and the multipliers are
    nonnegative.
    """
    n = q.size
    best = np.inf
    arg = None
    for r in range(0, min(n, len(h)) + 1):
        for act in itertools.combinations(range(len(h)), r):
            act = list(act)
            Ga = G[act]
            K = np.block([[Q, Ga.T], [Ga, np.zeros((r, r))]])
            rhs = np.concatenate([-q, h[act]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:n], sol[n:]
            if np.any(lam < -tol) or np.any(G @ x > h + tol):
                continue
            val = 0.5 * x @ Q @ x + q @ x
            if val < best:
                best, arg = val, x
    return best, arg


def box_vertices(lo, hi):
    return np.array(list(itertools.product(*zip(lo, hi))), dtype=float)


def polygon_vertices(F, g, tol=1e-9):
    """Vertices of a bounded 2-D polytope {x | Fx <= g}."""
    out = []
    for i, j in itertools.combinations(range(len(g)), 2):
        M = F[[i, j]]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        v = np.linalg.solve(M, g[[i, j]])
        if np.all(F @ v <= g + tol):
            out.append(v)
    return np.array(out)
