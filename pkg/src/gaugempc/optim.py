"""Dense LP and QP solvers plus small numerical helpers.

The LP solver is a homogeneous self-dual interior-point method with
Mehrotra predictor-corrector steps. The QP solver is an operator-splitting
(ADMM) method in the style of OSQP with over-relaxation, adaptive step size
and an active-set polishing pass. Both work on dense numpy arrays only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"


class SolverError(RuntimeError):
    """Raised when a solve does not reach an optimal status."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class LpProblem:
    """min c^T x  s.t.  G x <= h,  Aeq x = beq."""

    c: np.ndarray
    G: np.ndarray
    h: np.ndarray
    Aeq: np.ndarray | None = None
    beq: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).ravel()
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        h = np.asarray(self.h, dtype=float).ravel()
        if G.shape != (h.size, c.size):
            raise ValueError(f"G has shape {G.shape}, expected {(h.size, c.size)}")
        if h.size < 1:
            raise ValueError("at least one inequality is required")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)
        if (self.Aeq is None) != (self.beq is None):
            raise ValueError("Aeq and beq must be given together")
        if self.Aeq is not None:
            Aeq = np.atleast_2d(np.asarray(self.Aeq, dtype=float))
            beq = np.asarray(self.beq, dtype=float).ravel()
            if Aeq.shape != (beq.size, c.size):
                raise ValueError(f"Aeq has shape {Aeq.shape}, expected {(beq.size, c.size)}")
            object.__setattr__(self, "Aeq", Aeq)
            object.__setattr__(self, "beq", beq)

    @property
    def n(self) -> int:
        return self.c.size


@dataclass(frozen=True)
class QpProblem:
    """min 1/2 x^T Q x + q^T x  s.t.  G x <= h."""

    Q: np.ndarray
    q: np.ndarray
    G: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        q = np.asarray(self.q, dtype=float).ravel()
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        h = np.asarray(self.h, dtype=float).ravel()
        n = q.size
        if Q.shape != (n, n):
            raise ValueError(f"Q has shape {Q.shape}, expected {(n, n)}")
        if np.max(np.abs(Q - Q.T), initial=0.0) > 1e-10:
            raise ValueError("Q must be symmetric")
        if G.shape != (h.size, n):
            raise ValueError(f"G has shape {G.shape}, expected {(h.size, n)}")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)


@dataclass
class SolveReport:
    status: str
    x: np.ndarray
    objective: float
    dual: np.ndarray
    primal_residual: float
    dual_residual: float
    iterations: int
    seconds: float
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


# ---------------------------------------------------------------------------
# LP: homogeneous self-dual embedding


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def solve_lp(p: LpProblem, tol: float = 1e-9, max_iter: int = 200) -> SolveReport:
    """Solve a dense LP with a primal-dual interior-point method.

    Infeasibility and unboundedness are detected through the homogeneous
    embedding: the returned ``dual`` (resp. ``x``) is then a Farkas
    certificate rather than a solution.
    """
    t0 = time.perf_counter()
    c, G, h = p.c, p.G, p.h
    n, k = c.size, h.size
    if p.Aeq is not None:
        A, b = p.Aeq, p.beq
    else:
        A, b = np.zeros((0, n)), np.zeros(0)
    m = b.size

    # scale rows of G for conditioning; duals are unscaled at the end
    rs = np.linalg.norm(G, axis=1)
    rs[rs == 0] = 1.0
    Gs, hs = G / rs[:, None], h / rs

    x = np.zeros(n)
    y = np.zeros(m)
    z = np.ones(k)
    s = np.ones(k)
    tau = 1.0
    kappa = 1.0
    # Newton systems are solved in reduced form: the slack/dual block is
    # eliminated, leaving an (n + m + 1) square system
    N = n + m + 1
    ix, iy, it = slice(0, n), slice(n, n + m), n + m

    cn = 1.0 + np.max(np.abs(c), initial=0.0)
    bn = 1.0 + max(np.max(np.abs(b), initial=0.0), np.max(np.abs(hs), initial=0.0))
    status = MAX_ITER
    it_count = 0
    pres = dres = np.inf
    best = (np.inf,)
    for it_count in range(1, max_iter + 1):
        r1 = A.T @ y + Gs.T @ z + c * tau
        r2 = -A @ x + b * tau
        r3 = -Gs @ x + hs * tau - s
        r4 = -c @ x - b @ y - hs @ z - kappa
        mu = (s @ z + tau * kappa) / (k + 1)

        pobj = c @ x / tau
        dobj = (-b @ y - hs @ z) / tau
        pres = max(np.max(np.abs(r2), initial=0.0), np.max(np.abs(r3), initial=0.0)) / tau
        dres = np.max(np.abs(r1), initial=0.0) / tau
        gap = abs(pobj - dobj)
        merit = max(pres / bn, dres / cn, gap / (1.0 + abs(pobj)))
        if merit <= tol:
            status = OPTIMAL
            break
        if merit < best[0]:
            best = (merit, x / tau, z / tau, y / tau, pres, dres)
        # certificates of infeasibility
        hz = b @ y + hs @ z
        if hz < 0:
            resid = np.max(np.abs(A.T @ y + Gs.T @ z), initial=0.0)
            if resid <= tol * -hz * cn:
                status = INFEASIBLE
                break
        cx = c @ x
        if cx < 0:
            resid = max(np.max(np.abs(A @ x), initial=0.0), np.max(np.abs(Gs @ x + s), initial=0.0))
            if resid <= tol * -cx * bn:
                status = UNBOUNDED
                break

        if mu < 1e-300 or np.min(s) <= 0.0 or np.min(z) <= 0.0:
            break
        dinv = z / s
        GtD = Gs.T * dinv
        K = np.zeros((N, N))
        K[ix, ix] = GtD @ Gs
        K[ix, iy] = A.T
        K[ix, it] = c - GtD @ hs
        K[iy, ix] = -A
        K[iy, it] = b
        K[it, ix] = -c - GtD @ hs
        K[it, iy] = -b
        K[it, it] = hs @ (dinv * hs) + kappa / tau

        def direction(eta, rsz, rtk):
            R1 = -eta * r1
            R2 = -eta * r2
            R3 = -eta * r3 + rsz / z
            R4 = -eta * r4 + rtk / tau
            rhs = np.concatenate([R1 - GtD @ R3, R2, [R4 + hs @ (dinv * R3)]])
            try:
                d = np.linalg.solve(K, rhs)
                # one step of iterative refinement
                d = d + np.linalg.solve(K, rhs - K @ d)
            except np.linalg.LinAlgError:
                d = np.linalg.lstsq(K, rhs, rcond=None)[0]
            dx, dy, dtau = d[ix], d[iy], d[it]
            dz = dinv * (R3 + Gs @ dx - hs * dtau)
            ds = (rsz - s * dz) / z
            dkap = (rtk - kappa * dtau) / tau
            return dx, dy, dz, dtau, ds, dkap

        # predictor
        with np.errstate(all="ignore"):
            aff = direction(1.0, -s * z, -tau * kappa)
        if not all(np.all(np.isfinite(v)) for v in aff):
            break
        _, _, dza, dta, dsa, dka = aff
        a_aff = min(1.0, _max_step(s, dsa), _max_step(z, dza), _max_step(np.array([tau]), np.array([dta])),
                    _max_step(np.array([kappa]), np.array([dka])))
        mu_aff = ((s + a_aff * dsa) @ (z + a_aff * dza) + (tau + a_aff * dta) * (kappa + a_aff * dka)) / (k + 1)
        sigma = min(1.0, (mu_aff / mu) ** 3) if mu > 0 else 0.0
        # corrector
        with np.errstate(all="ignore"):
            step = direction(1.0 - sigma, -s * z + sigma * mu - dsa * dza, -tau * kappa + sigma * mu - dta * dka)
        if not all(np.all(np.isfinite(v)) for v in step):
            break
        dx, dy, dz, dtau, ds, dkap = step
        alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz),
                                    _max_step(np.array([tau]), np.array([dtau])),
                                    _max_step(np.array([kappa]), np.array([dkap]))))
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
        tau = tau + alpha * dtau
        kappa = kappa + alpha * dkap
        # keep the embedding normalised; it is homogeneous
        scale = tau + kappa
        if scale > 1e8 or scale < 1e-8:
            x, y, z, s = x / scale, y / scale, z / scale, s / scale
            tau, kappa = tau / scale, kappa / scale

    elapsed = time.perf_counter() - t0
    if status == OPTIMAL:
        xs = x / tau
        dual = z / tau / rs
        return SolveReport(OPTIMAL, xs, float(c @ xs), dual, float(pres), float(dres), it_count, elapsed,
                           {"eq_dual": y / tau})
    if status == INFEASIBLE:
        dual = z / rs
        dual = dual / max(-(b @ y + hs @ z), 1e-300)
        return SolveReport(INFEASIBLE, np.full(n, np.nan), np.inf, dual, float(pres), float(dres), it_count, elapsed)
    if status == UNBOUNDED:
        ray = x / max(-(c @ x), 1e-300)
        return SolveReport(UNBOUNDED, ray, -np.inf, np.full(k, np.nan), float(pres), float(dres), it_count, elapsed)
    if best[0] <= 100.0 * tol:
        # late iterations lost accuracy; fall back to the best iterate seen
        _, xs, zs, ys, pres, dres = best
        return SolveReport(OPTIMAL, xs, float(c @ xs), zs / rs, float(pres), float(dres), it_count, elapsed,
                           {"eq_dual": ys, "reduced_accuracy": True})
    xs = x / tau if tau > 0 else x
    return SolveReport(MAX_ITER, xs, float(c @ xs), z / max(tau, 1e-300) / rs, float(pres), float(dres), it_count,
                       elapsed)


def linprog(c, G, h, Aeq=None, beq=None, tol: float = 1e-9) -> SolveReport:
    """Convenience wrapper around :func:`solve_lp`."""
    return solve_lp(LpProblem(c, G, h, Aeq, beq), tol=tol)


# ---------------------------------------------------------------------------
# QP: ADMM with polishing


class AdmmQp:
    """Operator-splitting solver for ``min 1/2 x'Qx + q'x s.t. Gx <= h``.

    Q and G are fixed at construction so the linear-system factorization is
    reused across calls. ``q`` and ``h`` may be 2-D with one problem per
    column, in which case all columns are solved together.
    """

    def __init__(self, Q, G, rho: float = 0.1, sigma: float = 1e-6, alpha: float = 1.6,
                 max_iter: int = 50_000, adaptive_rho: bool = True, polish: bool = True):
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.G = np.atleast_2d(np.asarray(G, dtype=float))
        self.n = self.Q.shape[0]
        self.k = self.G.shape[0]
        self.sigma = sigma
        self.alpha = alpha
        self.max_iter = max_iter
        self.adaptive_rho = adaptive_rho
        self.polish = polish
        self.rho0 = rho
        self._set_rho(rho)

    def _set_rho(self, rho):
        self.rho = float(np.clip(rho, 1e-6, 1e6))
        M = self.Q + self.sigma * np.eye(self.n) + self.rho * self.G.T @ self.G
        L = np.linalg.cholesky(M)
        Linv = np.linalg.solve(L, np.eye(self.n))
        # explicit inverse from the Cholesky factor: cheap for the small dense systems used here
        self._Minv = Linv.T @ Linv

    def _solve_lin(self, rhs):
        return self._Minv @ rhs

    def kkt_residuals(self, x, lam, q, h):
        """Stationarity, primal infeasibility and complementarity (inf-norms, per column)."""
        Gx = self.G @ x
        stat = np.max(np.abs(self.Q @ x + q + self.G.T @ lam), axis=0)
        prim = np.max(np.maximum(Gx - h, 0.0), axis=0)
        comp = np.max(np.abs(lam * (h - Gx)), axis=0)
        return stat, prim, comp

    def solve(self, q, h, tol: float = 1e-8, x0=None, y0=None) -> SolveReport:
        t0 = time.perf_counter()
        q = np.asarray(q, dtype=float)
        h = np.asarray(h, dtype=float)
        single = q.ndim == 1 and h.ndim == 1
        if q.ndim == 1:
            q = q[:, None]
        if h.ndim == 1:
            h = h[:, None]
        if h.shape[1] != q.shape[1]:
            if h.shape[1] == 1:
                h = np.repeat(h, q.shape[1], axis=1)
            elif q.shape[1] == 1:
                q = np.repeat(q, h.shape[1], axis=1)
            else:
                raise ValueError("q and h batch sizes differ")
        nb = q.shape[1]
        x = np.zeros((self.n, nb)) if x0 is None else np.array(x0, dtype=float).reshape(self.n, nb)
        y = np.zeros((self.k, nb)) if y0 is None else np.array(y0, dtype=float).reshape(self.k, nb)
        # ADMM only needs to identify the active set when polishing
        eps = max(tol, 1e-5) if self.polish else tol
        status, x, y, it = self._admm(x, y, q, h, eps)
        lam = np.maximum(y, 0.0)
        if status in (OPTIMAL, MAX_ITER):
            if self.polish:
                x, lam = self._polish(x, lam, q, h)
            good = self._good(x, lam, q, h, tol)
            if self.polish and not np.all(good) and eps > tol:
                # degenerate active sets: run ADMM to full accuracy on the stragglers
                bad = np.flatnonzero(~good)
                st2, xb, yb, it2 = self._admm(x[:, bad], y[:, bad], q[:, bad], h[:, bad], 0.1 * tol)
                it += it2
                lb = np.maximum(yb, 0.0)
                xp, lp = self._polish(xb, lb, q[:, bad], h[:, bad])
                gp = self._good(xp, lp, q[:, bad], h[:, bad], tol)
                x[:, bad] = np.where(gp, xp, xb)
                lam[:, bad] = np.where(gp, lp, lb)
                good = self._good(x, lam, q, h, tol)
            status = OPTIMAL if np.all(good) else MAX_ITER
        stat, prim, comp = self.kkt_residuals(x, lam, q, h)
        obj = 0.5 * np.sum(x * (self.Q @ x), axis=0) + np.sum(q * x, axis=0)
        elapsed = time.perf_counter() - t0
        if single:
            return SolveReport(status, x[:, 0], float(obj[0]), lam[:, 0], float(prim[0]), float(stat[0]), it,
                               elapsed, {"complementarity": float(comp[0]), "rho": self.rho})
        return SolveReport(status, x, obj, lam, float(np.max(prim)), float(np.max(stat)), it, elapsed,
                           {"complementarity": comp, "stationarity": stat, "primal": prim, "rho": self.rho})

    def _good(self, x, lam, q, h, tol):
        stat, prim, comp = self.kkt_residuals(x, lam, q, h)
        return (stat <= tol * (1 + np.max(np.abs(q), axis=0))) & (prim <= tol) & \
            (comp <= tol * (1 + np.max(np.abs(h), axis=0)))

    def _admm(self, x, y, q, h, eps):
        G, Q = self.G, self.Q
        z = np.minimum(G @ x, h)
        if abs(self.rho - self.rho0) > 0:
            self._set_rho(self.rho0)
        rho = self.rho
        status = MAX_ITER
        qn = np.max(np.abs(q), axis=0)
        it = 0
        nb = q.shape[1]
        X_out, Y_out = np.empty_like(x), np.empty_like(y)
        live = np.arange(nb) if nb > 1 else None
        for it in range(1, self.max_iter + 1):
            x_prev, y_prev = x, y
            xt = self._solve_lin(self.sigma * x - q + G.T @ (rho * z - y))
            zt = G @ xt
            x = self.alpha * xt + (1.0 - self.alpha) * x
            zr = self.alpha * zt + (1.0 - self.alpha) * z
            z_new = np.minimum(zr + y / rho, h)
            y = y + rho * (zr - z_new)
            z = z_new
            if it % 10 and it != 1:
                continue
            Gx = G @ x
            Qx = Q @ x
            Gty = G.T @ y
            r_prim = np.max(np.abs(Gx - z), axis=0)
            r_dual = np.max(np.abs(Qx + q + Gty), axis=0)
            s_prim = np.maximum(np.max(np.abs(Gx), axis=0), np.max(np.abs(z), axis=0))
            s_dual = np.maximum.reduce([np.max(np.abs(Qx), axis=0), np.max(np.abs(Gty), axis=0), qn])
            conv = (r_prim <= eps * (1 + s_prim)) & (r_dual <= eps * (1 + s_dual))
            if np.all(conv):
                status = OPTIMAL
                break
            if np.any(conv) and live is not None:
                # freeze converged columns and keep iterating on the rest
                idx = live[conv]
                X_out[:, idx], Y_out[:, idx] = x[:, conv], y[:, conv]
                keep = ~conv
                live = live[keep]
                x, y, z, q, h, qn = x[:, keep], y[:, keep], z[:, keep], q[:, keep], h[:, keep], qn[keep]
                x_prev, y_prev = x_prev[:, keep], y_prev[:, keep]
                r_prim, r_dual, s_prim, s_dual = r_prim[keep], r_dual[keep], s_prim[keep], s_dual[keep]
            # infeasibility certificates from successive differences; only the
            # nonnegative part of dy is a valid Farkas vector for G x <= h
            dyp = np.maximum(y - y_prev, 0.0)
            dyn = np.max(dyp, axis=0)
            with np.errstate(invalid="ignore", divide="ignore"):
                prim_inf = (dyn > 1e-12) & (np.max(np.abs(G.T @ dyp), axis=0) <= 1e-6 * dyn) & \
                           (np.sum(h * dyp, axis=0) < -1e-6 * dyn)
                dx = x - x_prev
                dxn = np.max(np.abs(dx), axis=0)
                dual_inf = (dxn > 1e-12) & (np.max(np.abs(Q @ dx), axis=0) <= 1e-6 * dxn) & \
                           (np.sum(q * dx, axis=0) < -1e-6 * dxn) & (np.max(G @ dx, axis=0) <= 1e-6 * dxn)
            if np.any(prim_inf | dual_inf) and it > 100:
                status = INFEASIBLE if np.any(prim_inf) else UNBOUNDED
                break
            if self.adaptive_rho and it % 50 == 0:
                num = np.max(r_prim / (1e-12 + s_prim))
                den = np.max(r_dual / (1e-12 + s_dual))
                new = rho * np.sqrt(num / max(den, 1e-12))
                if new > 5 * rho or new < rho / 5:
                    self._set_rho(new)
                    rho = self.rho
        if live is None:
            return status, x, y, it
        X_out[:, live], Y_out[:, live] = x, y
        return status, X_out, Y_out, it

    def _polish(self, x, lam, q, h):
        G, Q = self.G, self.Q
        x = x.copy()
        lam = lam.copy()
        for j in range(x.shape[1]):
            slack = h[:, j] - G @ x[:, j]
            base = (lam[:, j] > 1e-9) | (slack < 1e-7 * (1 + np.abs(h[:, j])))
            best = None
            first = lam[:, j] > 1e-9
            guesses = (first,) if np.array_equal(first, base) else (first, base)
            # a couple of active-set guesses; keep whichever satisfies KKT best
            for active in guesses:
                cand = self._solve_active(active, q[:, j], h[:, j])
                if cand is None:
                    continue
                xa, la = cand
                st, pr, co = self.kkt_residuals(xa[:, None], la[:, None], q[:, j:j + 1], h[:, j:j + 1])
                score = max(st[0], pr[0], co[0])
                if best is None or score < best[0]:
                    best = (score, xa, la)
                if score <= 1e-12:
                    break
            if best is not None:
                st, pr, co = self.kkt_residuals(x[:, j:j + 1], lam[:, j:j + 1], q[:, j:j + 1], h[:, j:j + 1])
                if best[0] <= max(st[0], pr[0], co[0]):
                    x[:, j], lam[:, j] = best[1], best[2]
        return x, lam

    def _solve_active(self, active, q, h):
        idx = np.flatnonzero(active)
        # parallel active rows make the KKT matrix singular; keep the tightest of each group
        if idx.size > 1:
            nr = np.linalg.norm(self.G[idx], axis=1)
            keep = {}
            for i, row, hb in zip(idx, np.round(self.G[idx] / nr[:, None], 9), h[idx] / nr):
                key = row.tobytes()
                if key not in keep or hb < keep[key][1]:
                    keep[key] = (i, hb)
            idx = np.sort([v[0] for v in keep.values()])
        n = self.n
        Ga = self.G[idx]
        na = idx.size
        delta = 1e-12
        KK = np.zeros((n + na, n + na))
        KK[:n, :n] = self.Q + delta * np.eye(n)
        KK[:n, n:] = Ga.T
        KK[n:, :n] = Ga
        KK[n:, n:] = -delta * np.eye(na)
        rhs = np.concatenate([-q, h[idx]])
        try:
            sol = np.linalg.solve(KK, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(KK, rhs, rcond=None)[0]
        # iterative refinement against the unregularised system
        KK0 = KK.copy()
        KK0[:n, :n] = self.Q
        KK0[n:, n:] = 0.0
        for _ in range(3):
            res = rhs - KK0 @ sol
            if np.max(np.abs(res)) <= 1e-14 * (1.0 + np.max(np.abs(rhs))):
                break
            try:
                sol = sol + np.linalg.solve(KK, res)
            except np.linalg.LinAlgError:
                break
        if not np.all(np.isfinite(sol)):
            return None
        xa = sol[:n]
        lam = np.zeros(self.k)
        lam[idx] = sol[n:]
        if np.any(lam < -1e-9):
            return None
        return xa, np.maximum(lam, 0.0)


def check_psd(Q, allow_zero: bool = False):
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    ev = np.linalg.eigvalsh(Q)
    scale = max(1.0, float(np.max(np.abs(ev), initial=0.0)))
    if ev.size and ev[0] < -1e-10 * scale:
        raise ValueError(f"Q is not positive semidefinite (min eigenvalue {ev[0]:.3e})")
    if not allow_zero and np.max(np.abs(ev), initial=0.0) == 0.0:
        raise ValueError("Q is zero; pass allow_lp=True to solve the LP with ADMM")


def solve_qp(p: QpProblem, tol: float = 1e-8, allow_lp: bool = False, x0=None) -> SolveReport:
    """Solve a convex QP with ADMM and an active-set polishing step.

    ``status == "optimal"`` is only reported when the KKT residuals of the
    returned point are below ``tol``.
    """
    check_psd(p.Q, allow_zero=allow_lp)
    return AdmmQp(p.Q, p.G).solve(p.q, p.h, tol=tol, x0=x0)


def finite_diff_grad(f, x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = eps
        gf[i] = (f((flat + e).reshape(x.shape)) - f((flat - e).reshape(x.shape))) / (2.0 * eps)
    return g
