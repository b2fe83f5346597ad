"""Primal-dual interior-point solver for trial-PEF optimisation.

The problem is posed in deviation coordinates ``y = (F - 1)/beta``:

    maximise   (1/beta) * sum_i w_i * log1p(beta * y_i)
    subject to A y <= rho,   1 + beta * y > 0,

where row ``v`` of ``A`` collects ``nu(z) * mu_v(c|z)^(1+beta)`` over the 16
cells and ``rho_v = (1 - sum_i A_vi)/beta``.  Working with ``y`` rather than
``F`` keeps full precision at the tiny powers this protocol uses, where the
optimal ``F`` differs from 1 by parts in 1e6.

A Mehrotra predictor-corrector loop drives the KKT residuals down; an
active-set Newton polish then lands on the face and produces a certificate
from the dual decomposition

    gap = (1/beta) * sum_i w_i * h(u_i) + lam . s,    h(u) = u - 1 - ln(u),

whose two terms are nonnegative, so the bound survives floating-point
cancellation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_LN2 = math.log(2.0)

#: absolute duality-gap floor, in the E[ln F]/beta objective units; gains of
#: interest are 1e-4 and larger, so this only matters for zero-gain inputs
GAP_FLOOR = 1e-12


class PefOptimizationError(RuntimeError):
    """Solver failed to certify the requested optimality gap.

    ``solution`` carries the best deviation vector found, ``rel_gap`` the
    certified relative duality gap at that point.
    """

    def __init__(self, message: str, solution: np.ndarray, rel_gap: float):
        super().__init__(message)
        self.solution = solution
        self.rel_gap = rel_gap


@dataclass(frozen=True)
class PefSolution:
    """Optimal deviation vector with its optimality certificate.

    ``excess`` is the full 16-vector ``y`` (zero-weight cells are zero and
    are filled by the caller), ``gain_bits`` the certified objective
    ``E[log2 F]/beta`` and ``rel_gap`` the certified relative duality gap.
    """

    excess: np.ndarray
    gain_bits: float
    rel_gap: float
    dual: np.ndarray


def _spd_solve(B: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve B z = rhs for SPD B with diagonal scaling for conditioning."""
    with np.errstate(over="ignore", invalid="ignore"):
        return _spd_solve_inner(B, rhs)


def _spd_solve_inner(B: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    d = 1.0 / np.sqrt(np.diag(B))
    Bs = B * d[:, None] * d[None, :]
    try:
        L = np.linalg.cholesky(Bs)
        z = np.linalg.solve(L.T, np.linalg.solve(L, rhs * d))
    except np.linalg.LinAlgError:
        z = np.linalg.solve(Bs + 1e-14 * np.eye(B.shape[0]), rhs * d)
    return z * d


def _certified_gap(ws, A, r, beta, y, lam) -> float:
    """Duality gap at (y, lam), computed as a sum of nonnegative terms."""
    lam = np.maximum(lam, 0.0)
    fy = 1.0 + beta * y
    atl = A.T @ lam
    delta = (atl * fy - ws) / ws
    if (delta <= -1.0).any():
        return math.inf
    s = r - A @ y
    if (s < -1e-10 * np.maximum(1.0, np.abs(r))).any():
        return math.inf
    h = delta - np.log1p(delta)
    return float(np.dot(ws, h)) / beta + float(np.dot(lam, np.maximum(s, 0.0)))


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not neg.any():
        return 1.0
    return min(1.0, float((v[neg] / -dv[neg]).min()))


def _phi_factory(ws, beta):
    def phi(yv):
        arg = beta * yv
        if (arg <= -1.0).any():
            return -math.inf
        return float(np.dot(ws, np.log1p(arg))) / beta

    return phi


def _pdipm(ws, A, r, beta, rel_tol, max_iter=150):
    M, m = A.shape
    phi = _phi_factory(ws, beta)

    y = np.full(m, -1.0 / max(1.0, 2.0 * beta))  # strictly inside everything
    s = r - A @ y
    lam = np.ones(M)
    best = (y.copy(), phi(y), math.inf, lam.copy())
    # slacks can hit denormals near convergence; 1/s overflow is expected
    # there and any non-finite step is rejected by the step-length rules
    with np.errstate(over="ignore", invalid="ignore"):
        best = _pdipm_loop(ws, A, r, beta, rel_tol, max_iter, y, s, lam, best, phi)
    return best


def _pdipm_loop(ws, A, r, beta, rel_tol, max_iter, y, s, lam, best, phi):
    M, m = A.shape
    for _ in range(max_iter):
        fy = 1.0 + beta * y
        D = beta * ws / fy**2
        r_d = ws / fy - A.T @ lam
        r_p = A @ y + s - r
        mu = float(lam @ s) / M

        gap = _certified_gap(ws, A, r, beta, y, lam)
        pv = phi(y)
        if gap < best[2]:
            best = (y.copy(), pv, gap, lam.copy())
        if gap <= max(rel_tol * abs(pv), GAP_FLOOR):
            break

        inv_s = 1.0 / s
        B = np.diag(D) + (A.T * (lam * inv_s)) @ A
        # predictor
        rc = lam * s
        dy_a = _spd_solve(B, r_d + A.T @ (inv_s * (rc - lam * r_p)))
        ds_a = -r_p - A @ dy_a
        dl_a = inv_s * (-rc - lam * ds_a)
        ap = _max_step(s, ds_a)
        ad = _max_step(lam, dl_a)
        mu_aff = float((lam + ad * dl_a) @ (s + ap * ds_a)) / M
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.1
        # corrector
        rc = lam * s + dl_a * ds_a - sigma * mu
        dy = _spd_solve(B, r_d + A.T @ (inv_s * (rc - lam * r_p)))
        ds = -r_p - A @ dy
        dl = inv_s * (-rc - lam * ds)
        tau = 0.995 if mu > 1e-10 else 0.9999
        ap = tau * _max_step(s, ds)
        ad = tau * _max_step(lam, dl)
        y = y + ap * dy
        s = s + ap * ds
        lam = lam + ad * dl
        if mu < 1e-17 and max(np.abs(r_p).max(), np.abs(r_d).max()) < 1e-14:
            break
    return best


def _polish(ws, A, r, beta, y0, lam0, best, act=None):
    """Exact Newton solve on the active face guessed from the dual point."""
    M, m = A.shape
    phi = _phi_factory(ws, beta)

    s0 = r - A @ y0
    if act is None:
        act = [int(i) for i in range(M) if lam0[i] > s0[i]]
    for _ in range(len(act) + 2):
        if act:
            Aact = A[act]
            u_, sv_, vt_ = np.linalg.svd(Aact, full_matrices=True)
            rank = int((sv_ > 1e-12 * sv_[0]).sum()) if sv_.size else 0
            yp = vt_[:rank].T @ ((u_.T[:rank] @ r[act]) / sv_[:rank])
            Z = vt_[rank:].T
        else:
            yp = np.zeros(m)
            Z = np.eye(m)
        u = Z.T @ (y0 - yp)
        if (1.0 + beta * (yp + Z @ u) <= 0).any():
            u = np.zeros(Z.shape[1])
        if Z.shape[1]:
            for _n in range(100):
                yv = yp + Z @ u
                fy = 1.0 + beta * yv
                gradu = Z.T @ (ws / fy)
                Hu = (Z.T * (ws / fy**2)) @ Z  # -hessian/beta, SPD
                du = _spd_solve(Hu, gradu) / beta
                ndec = float(gradu @ du) * beta
                if not np.isfinite(ndec) or ndec <= 0:
                    break
                step = 1.0
                while step > 1e-16 and (
                    1.0 + beta * (yp + Z @ (u + step * du)) <= 0
                ).any():
                    step *= 0.5
                u = u + step * du
                if 0.5 * ndec <= 1e-18 * max(abs(phi(yv)) * beta, 1e-20):
                    break
            ycand = yp + Z @ u
        else:
            ycand = yp
        fy = 1.0 + beta * ycand
        if (fy <= 0).any():
            break  # face pins a support cell to F = 0; no valid multipliers
        if act:
            lam_act, *_ = np.linalg.lstsq(A[act].T, ws / fy, rcond=None)
        else:
            lam_act = np.zeros(0)
        lam = np.zeros(M)
        for k_, a_ in enumerate(act):
            lam[a_] = max(float(lam_act[k_]), 0.0)
        gap = _certified_gap(ws, A, r, beta, ycand, lam)
        if gap < best[2]:
            best = (ycand.copy(), phi(ycand), gap, lam.copy())
        scale = max(1.0, float(np.abs(lam_act).max())) if act else 1.0
        negs = [act[k_] for k_ in range(len(act)) if lam_act[k_] < -1e-9 * scale]
        if not negs:
            break
        act = [a_ for a_ in act if a_ not in negs]
    return best


def solve_trial_pef(
    w: np.ndarray,
    A_full: np.ndarray,
    rho: np.ndarray,
    beta: float,
    rel_tol: float = 1e-7,
    strict: bool = True,
) -> PefSolution:
    """Optimise a trial PEF in deviation coordinates.

    ``w`` are the 16 honest joint cell probabilities (objective weights),
    ``A_full`` the (n_vertices, 16) constraint matrix and ``rho`` its
    right-hand side, all as produced by ``pef.pef_constraints``.  Cells with
    zero weight are excluded from the optimisation (their deviation is
    returned as 0) and constraint rows that do not touch the support are
    vacuous.  Raises :class:`PefOptimizationError` if the certified relative
    gap exceeds ``max(rel_tol, 1e-6)``; with ``strict=False`` the best
    feasible iterate is returned instead together with its certified gap
    (useful for coarse design sweeps at extreme powers where float64 cannot
    certify below roughly 1e-5).
    """
    sup = w > 0
    if not sup.any():
        raise ValueError("objective weights are all zero")
    A = np.ascontiguousarray(A_full[:, sup])
    keep = (A != 0).any(axis=1)
    A = A[keep]
    r = rho[keep].astype(np.float64)
    ws = w[sup]
    m = A.shape[1]
    # the F >= 0 bounds join the constraint set so they carry dual variables
    A = np.vstack([A, -beta * np.eye(m)])
    r = np.concatenate([r, np.ones(m)])

    best = _pdipm(ws, A, r, beta, rel_tol)
    if best[2] > max(rel_tol * abs(best[1]), GAP_FLOOR):
        best = _polish(ws, A, r, beta, best[0], best[3], best)
    if best[2] > max(rel_tol * abs(best[1]), GAP_FLOOR):
        # fall back to scanning candidate faces by ascending slack
        order = np.argsort(r - A @ best[0])
        for size in range(1, min(A.shape[0], 2 * m) + 1):
            cand = [int(i) for i in order[:size]]
            best = _polish(ws, A, r, beta, best[0], best[3], best, act=cand)
            if best[2] <= max(rel_tol * abs(best[1]), GAP_FLOOR):
                break

    y, pv, gap, lam = best
    rel_gap = gap / max(abs(pv), 1e-300)
    y_full = np.zeros(16)
    y_full[sup] = y
    lam_full = np.zeros(A_full.shape[0])
    lam_full[keep] = lam[: keep.sum()]  # bound-row duals are internal
    if not math.isfinite(gap) or gap > max(max(rel_tol, 1e-6) * abs(pv), GAP_FLOOR):
        if strict or not math.isfinite(gap):
            raise PefOptimizationError(
                f"PEF optimisation stalled with certified relative gap {rel_gap:.3e}",
                solution=y_full,
                rel_gap=rel_gap,
            )
    return PefSolution(excess=y_full, gain_bits=pv / _LN2, rel_gap=rel_gap, dual=lam_full)
