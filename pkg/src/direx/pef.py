"""Probability estimation factors: validity, optimisation, interpolation.

A trial PEF with power ``beta`` for input distribution ``nu_q`` is a
nonnegative table ``F(ab, xy)`` satisfying, at every extreme point ``mu`` of
the trial polytope,

    sum_{ab,xy} nu_q(xy) * mu(ab|xy)^(1+beta) * F(ab,xy) <= 1.

Products of per-trial PEFs over a block witness accumulated randomness: the
block rate is ``E[log2 F]/beta`` summed over positions weighted by the
probability the block reaches them.  At the powers used in practice
(``beta ~ 5e-8``) the optimal ``F`` sits within parts in 1e6 of the constant
table, so this module tracks PEFs in deviation form ``F = 1 + beta * y``
wherever precision matters.

Per-position PEFs for a whole block are built from three optimised anchor
positions by piecewise-linear interpolation in the spot-check probability
``q``, after rescaling each anchor by ``4 nu_q(z)`` (which maps any
fixed-input PEF to a valid uniform-input PEF, and convex combinations of
those are again valid).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from direx._ipm import PefOptimizationError, PefSolution, solve_trial_pef
from direx.model import (
    ConditionalDistribution,
    InputDistribution,
    PolytopeVertexSet,
    enumerate_extreme_points,
    input_distribution,
)

__all__ = [
    "TrialPef",
    "PefTable",
    "GainReport",
    "PefOptimizationError",
    "InvalidRegimeError",
    "pef_constraints",
    "is_valid_pef",
    "optimize_trial_pef",
    "lift_to_uniform",
    "interpolate",
    "block_gain",
    "entropy_certificate",
    "build_pef_table",
]

_LN2 = math.log(2.0)

PEF_VALIDITY_TOL = 1e-9


class InvalidRegimeError(ValueError):
    """Raised when certificate parameters are outside their domain."""


def _cell_input_weights(q: float) -> np.ndarray:
    """nu_q(z) per cell as a flat 16-vector (settings-major layout)."""
    out = np.empty(16)
    out[:4] = 1.0 - 0.75 * q
    out[4:] = q / 4.0
    return out


_LOG_V: np.ndarray | None = None


def _log_vertices(vertices: PolytopeVertexSet) -> np.ndarray:
    """log(mu) per vertex cell with zeros left at 0 (0^(1+beta) = 0)."""
    global _LOG_V
    if _LOG_V is None or _LOG_V.shape[0] != len(vertices):
        V = vertices.vertices
        with np.errstate(divide="ignore"):
            _LOG_V = np.where(V > 0, np.log(np.where(V > 0, V, 1.0)), 0.0)
    return _LOG_V


def pef_constraints(
    q: float, beta: float, vertices: PolytopeVertexSet | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Constraint system of the PEF inequality in deviation coordinates.

    Returns ``(A, rho)`` with ``A[v, i] = nu_q(z_i) * mu_v(c_i|z_i)^(1+beta)``
    over flat cells ``i`` and ``rho_v = (1 - sum_i A[v, i])/beta`` evaluated
    without cancellation, so that ``F = 1 + beta*y`` is a valid PEF iff
    ``A y <= rho``.  Local-deterministic vertices give ``rho_v = 0`` exactly.
    """
    if vertices is None:
        vertices = enumerate_extreme_points()
    V = vertices.vertices
    nu = _cell_input_weights(q)
    e1 = np.expm1(beta * _log_vertices(vertices))
    e1[V == 0.0] = 0.0
    A = nu[None, :] * V * (1.0 + e1)
    # sum_i nu*mu = 1 per vertex, so 1 - sum(A) = -sum(nu*mu*e1) term by term
    rho = -np.einsum("i,vi,vi->v", nu, V, e1) / beta
    return A, rho


@dataclass(frozen=True)
class TrialPef:
    """PEF table for one trial position.

    ``f`` holds the (4, 4) values ``F(ab|xy)`` in the standard layout.  For
    unit-scale PEFs the deviation table ``excess = (F - 1)/beta`` carries the
    full working precision; ``scale`` is non-None only for lifted
    (uniform-model) PEFs, where ``F = scale * (1 + beta*excess)``.
    """

    f: np.ndarray
    beta: float
    position_q: float
    excess: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        f = np.ascontiguousarray(self.f, dtype=np.float64)
        if f.shape != (4, 4):
            raise ValueError(f"expected a (4, 4) PEF table, got {f.shape}")
        if (f < 0).any():
            raise ValueError("PEF values must be nonnegative")
        if self.beta <= 0:
            raise ValueError("the power beta must be positive")
        f.setflags(write=False)
        object.__setattr__(self, "f", f)
        for name in ("excess", "scale"):
            v = getattr(self, name)
            if v is not None:
                v = np.ascontiguousarray(v, dtype=np.float64)
                v.setflags(write=False)
                object.__setattr__(self, name, v)

    @classmethod
    def constant_one(cls, beta: float, q: float) -> "TrialPef":
        return cls.from_excess(np.zeros((4, 4)), beta, q)

    @classmethod
    def from_excess(
        cls, excess: np.ndarray, beta: float, q: float, scale: np.ndarray | None = None
    ) -> "TrialPef":
        excess = np.asarray(excess, dtype=np.float64)
        base = 1.0 + beta * excess
        f = base if scale is None else scale * base
        return cls(f=f, beta=beta, position_q=q, excess=excess, scale=scale)

    def log2_values(self) -> np.ndarray:
        """log2 F per cell, from the deviation table when available."""
        if self.excess is not None and self.scale is None:
            return np.log1p(self.beta * self.excess) / _LN2
        return np.log2(np.clip(self.f, 1e-300, None))

    def flat_outcome_major(self) -> np.ndarray:
        """Flat 16-vector ordered by (ab, xy), outcomes major."""
        return self.f.T.ravel()


def is_valid_pef(
    f: TrialPef,
    q: InputDistribution | float,
    vertices: PolytopeVertexSet | None = None,
    tol: float = PEF_VALIDITY_TOL,
) -> bool:
    """Check the PEF inequality at every extreme point of the polytope."""
    if vertices is None:
        vertices = enumerate_extreme_points()
    qv = q.q if isinstance(q, InputDistribution) else float(q)
    if (f.f < -tol).any():
        return False
    A, rho = pef_constraints(qv, f.beta, vertices)
    if f.excess is not None and f.scale is None:
        # constraint in deviation form avoids the 1 +/- 1e-6 cancellation
        return bool((A @ f.excess.ravel() <= rho + tol / f.beta).all())
    lhs = A @ f.f.ravel()
    return bool((lhs <= 1.0 + tol).all())


def optimize_trial_pef(
    nu_h: ConditionalDistribution,
    q: InputDistribution | float,
    beta: float,
    vertices: PolytopeVertexSet | None = None,
    rel_tol: float = 1e-7,
    strict: bool = True,
) -> tuple[TrialPef, float]:
    """Best trial PEF for honest distribution ``nu_h`` at one position.

    Maximises ``E[log2 F]/beta`` under the honest joint distribution
    ``nu_q(z) * nu_h(c|z)`` subject to the PEF inequality at all extreme
    points.  Returns the PEF and its certified gain in bits; the certified
    relative duality gap is at most ``max(rel_tol, 1e-6)`` or
    :class:`PefOptimizationError` is raised.

    Cells with zero honest probability do not enter the objective; they are
    raised afterwards to the largest common value that keeps every vertex
    constraint satisfied, which keeps the output deterministic.
    """
    if vertices is None:
        vertices = enumerate_extreme_points()
    qv = q.q if isinstance(q, InputDistribution) else float(q)
    nu = _cell_input_weights(qv)
    w = nu * nu_h.table.ravel()
    A, rho = pef_constraints(qv, beta, vertices)
    sol: PefSolution = solve_trial_pef(w, A, rho, beta, rel_tol=rel_tol, strict=strict)
    y = sol.excess.copy()

    zero = w == 0
    if zero.any():
        slack = rho - A @ y
        col = A[:, zero].sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(col > 0, slack / np.where(col > 0, col, 1.0), np.inf)
        lift = max(float(ratios.min()), 0.0)
        y[zero] = lift

    pef = TrialPef.from_excess(y.reshape(4, 4), beta, qv)
    return pef, sol.gain_bits


def lift_to_uniform(f: TrialPef, q: InputDistribution | float) -> TrialPef:
    """Rescale a PEF for ``nu_q`` into one valid for uniform inputs.

    The lifted table is ``4 nu_q(z) F(cz)``; the stored scale keeps the
    round trip ``unlift(lift(f)) == f`` exact to floating rounding.
    """
    qv = q.q if isinstance(q, InputDistribution) else float(q)
    scale = _cell_input_weights(qv).reshape(4, 4) * 4.0
    if f.excess is not None and f.scale is None:
        return TrialPef.from_excess(f.excess, f.beta, 1.0, scale=scale)
    return TrialPef(f=scale * f.f, beta=f.beta, position_q=1.0, scale=scale)


def interpolate(
    anchors: tuple[TrialPef, TrialPef, TrialPef],
    j: int,
    k: int,
) -> TrialPef:
    """PEF for position ``j`` from three lifted anchors.

    ``anchors`` are lifted (uniform-model) PEFs, as produced by
    :func:`lift_to_uniform`, built at increasing spot probabilities
    ``q1 < q_mid < q_max`` (positions 1, j_mid, 2^k).  The lifted table at
    ``q_j`` is the linear interpolant on the enclosing segment, a convex
    combination of valid uniform-model PEFs and hence valid; dividing by
    ``4 nu_{q_j}(z)`` returns a PEF for position ``j``.
    """
    f1, fm, fk = anchors
    if not 1 <= j <= 2**k:
        raise ValueError(f"position j={j} outside 1..2^{k}")
    if any(a.scale is None for a in anchors):
        raise ValueError("interpolation anchors must be lifted PEFs")
    q_j = input_distribution(j, k).q
    qs = [_scale_q(a) for a in anchors]
    q1, qm, qk = qs
    if not q1 < qm < qk:
        raise ValueError(f"anchor spot probabilities must increase, got {qs}")
    if q_j <= qm:
        lo, hi, qlo, qhi = f1, fm, q1, qm
    else:
        lo, hi, qlo, qhi = fm, fk, qm, qk
    lam = (qhi - q_j) / (qhi - qlo)

    if lo.excess is not None and hi.excess is not None:
        # scales are linear in q, so the combined scale is exactly the
        # position scale and the quotient stays in deviation form
        s_j = lam * lo.scale + (1.0 - lam) * hi.scale
        y_j = (lam * lo.scale * lo.excess + (1.0 - lam) * hi.scale * hi.excess) / s_j
        return TrialPef.from_excess(y_j, lo.beta, q_j)
    lifted = lam * lo.f + (1.0 - lam) * hi.f
    scale = _cell_input_weights(q_j).reshape(4, 4) * 4.0
    return TrialPef(f=lifted / scale, beta=lo.beta, position_q=q_j)


def _scale_q(a: TrialPef) -> float:
    """Recover the spot probability a lifted anchor was built from."""
    return float(a.scale[1, 0])  # rows z != 00 carry scale q


# ---------------------------------------------------------------------------
# per-block tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PefTable:
    """Per-position PEF family for blocks of up to ``2^k`` trials.

    Holds the three optimised anchors (unit scale, with deviations) and
    produces the interpolated PEF for any position.  The heavy consumers
    (gain, variance, witness accumulation) use the vectorised
    :meth:`log2_f` / :meth:`excess_at` paths.
    """

    k: int
    beta: float
    j_mid: int
    anchors: tuple[TrialPef, TrialPef, TrialPef]

    def __post_init__(self):
        if not 1 < self.j_mid < 2**self.k:
            raise ValueError(f"j_mid={self.j_mid} outside 2..2^{self.k}-1")
        for a in self.anchors:
            if a.excess is None or a.scale is not None:
                raise ValueError("anchors must be unit-scale PEFs with deviations")

    @property
    def n_positions(self) -> int:
        return 2**self.k

    def f_at(self, j: int) -> TrialPef:
        """Interpolated PEF for position ``j`` (anchors returned exactly)."""
        if j == 1:
            return self.anchors[0]
        if j == self.j_mid:
            return self.anchors[1]
        if j == self.n_positions:
            return self.anchors[2]
        lifted = tuple(
            lift_to_uniform(a, a.position_q) for a in self.anchors
        )
        return interpolate(lifted, j, self.k)

    def excess_at(self, positions: np.ndarray) -> np.ndarray:
        """Deviation tables ``(F - 1)/beta`` for many positions at once.

        Returns an ``(n, 16)`` array over flat cells.  Equivalent to the
        lift/interpolate/unlift chain of :meth:`f_at`, written directly in
        deviation coordinates: scales are linear in ``q``, so the lifted
        interpolant divided by the position scale is
        ``1 + beta * (lam*s'*y' + (1-lam)*s''*y'') / s_j``.
        """
        j = np.asarray(positions, dtype=np.int64)
        if ((j < 1) | (j > self.n_positions)).any():
            raise ValueError("positions outside 1..2^k")
        q = 1.0 / (self.n_positions - j + 1.0)
        a1, am, ak = self.anchors
        q1, qm, qk = a1.position_q, am.position_q, ak.position_q
        s1 = _cell_input_weights(q1) * 4.0
        sm = _cell_input_weights(qm) * 4.0
        sk = _cell_input_weights(qk) * 4.0
        y1 = a1.excess.ravel()
        ym = am.excess.ravel()
        yk = ak.excess.ravel()
        sq = np.empty((j.size, 16))
        sq[:, :4] = (4.0 * (1.0 - 0.75 * q))[:, None]
        sq[:, 4:] = q[:, None]
        out = np.empty((j.size, 16))
        seg = q <= qm
        lam = ((qm - q[seg]) / (qm - q1))[:, None]
        out[seg] = (lam * (s1 * y1)[None, :] + (1 - lam) * (sm * ym)[None, :]) / sq[seg]
        lam = ((qk - q[~seg]) / (qk - qm))[:, None]
        out[~seg] = (lam * (sm * ym)[None, :] + (1 - lam) * (sk * yk)[None, :]) / sq[~seg]
        return out

    def log2_f(self, positions: np.ndarray) -> np.ndarray:
        """``log2 F_j`` per cell for many positions, shape ``(n, 16)``."""
        return np.log1p(self.beta * self.excess_at(positions)) / _LN2

    # --- serialization --------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(
            {
                "k": self.k,
                "beta": self.beta,
                "j_mid": self.j_mid,
                "anchors": [
                    [float(v) for v in a.flat_outcome_major()] for a in self.anchors
                ],
                "anchors_excess": [
                    [float(v) for v in a.excess.T.ravel()] for a in self.anchors
                ],
                "anchor_q": [a.position_q for a in self.anchors],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "PefTable":
        obj = json.loads(text)
        k, beta, j_mid = int(obj["k"]), float(obj["beta"]), int(obj["j_mid"])
        qs = obj.get("anchor_q")
        if qs is None:
            qs = [input_distribution(j, k).q for j in (1, j_mid, 2**k)]
        anchors = []
        if "anchors_excess" in obj:
            for exc, q in zip(obj["anchors_excess"], qs):
                y = np.array(exc, dtype=np.float64).reshape(4, 4).T
                anchors.append(TrialPef.from_excess(y, beta, float(q)))
        else:
            for fvals, q in zip(obj["anchors"], qs):
                f = np.array(fvals, dtype=np.float64).reshape(4, 4).T
                anchors.append(
                    TrialPef.from_excess((f - 1.0) / beta, beta, float(q))
                )
        return cls(k=k, beta=beta, j_mid=j_mid, anchors=tuple(anchors))


@dataclass(frozen=True)
class GainReport:
    """Expected witness rate and variance per block for honest devices."""

    g_block: float
    var_block: float
    beta: float
    k: int
    per_position_gain: np.ndarray | None = None

    def to_json(self) -> str:
        obj = {
            "g_block_bits": self.g_block,
            "var_block_bits2": self.var_block,
            "beta": self.beta,
            "k": self.k,
        }
        if self.per_position_gain is not None:
            obj["per_position_gain"] = [float(v) for v in self.per_position_gain]
        return json.dumps(obj)


def block_gain(
    table: PefTable,
    nu_h: ConditionalDistribution,
    keep_per_position: bool = False,
) -> GainReport:
    """Expected per-block witness rate and variance at ``nu_h``.

    The rate is ``sum_j omega_j E_j[log2 F_j]/beta`` with
    ``omega_j = (2^k - j + 1)/2^k`` the probability the block reaches
    position ``j``.  The variance uses the exact second-moment expansion for
    honest devices: trials are conditionally independent given the inputs
    and every pre-spot trial has settings 00, so cross terms reduce to
    products of conditional means with prefix sums over earlier positions.
    """
    n = table.n_positions
    j = np.arange(1, n + 1, dtype=np.float64)
    q = 1.0 / (n - j + 1.0)
    log2f = table.log2_f(np.arange(1, n + 1))
    nu_cells = np.empty((n, 16))
    nu_cells[:, :4] = (1.0 - 0.75 * q)[:, None]
    nu_cells[:, 4:] = (q / 4.0)[:, None]
    w = nu_cells * nu_h.table.ravel()[None, :]
    omega = (n - j + 1.0) / n

    m_j = np.einsum("ji,ji->j", w, log2f)
    s_j = np.einsum("ji,ji->j", w, log2f**2)
    m00 = log2f[:, :4] @ nu_h.table[0]  # E[log2 F_j | z = 00]
    prefix = np.concatenate(([0.0], np.cumsum(m00)[:-1]))

    e1 = float(omega @ m_j)
    e2 = float(omega @ s_j + 2.0 * (omega * m_j) @ prefix)
    beta = table.beta
    g_block = e1 / beta
    var_block = max((e2 - e1 * e1) / beta**2, 0.0)
    per = (m_j / beta) if keep_per_position else None
    return GainReport(
        g_block=g_block,
        var_block=var_block,
        beta=beta,
        k=table.k,
        per_position_gain=per,
    )


def entropy_certificate(
    log2_T: float, beta: float, eps_s: float, kappa: float
) -> float:
    """Smooth min-entropy certified by an achieved PEF product.

    Solves ``log2 T = -beta*log2(p) - log2(eps_s)`` for the guessing
    probability level ``p`` and returns the bound
    ``-log2(p) + ((1+beta)/beta) * log2(kappa)`` in bits, where ``kappa``
    lower-bounds the probability of the success event.  A nonpositive
    return means nothing is certified at these parameters.
    """
    if beta <= 0:
        raise InvalidRegimeError("beta must be positive")
    if not 0.0 < eps_s <= 1.0:
        raise InvalidRegimeError(f"eps_s must be in (0, 1], got {eps_s}")
    if not 0.0 < kappa <= 1.0:
        raise InvalidRegimeError(f"kappa must be in (0, 1], got {kappa}")
    minus_log2_p = (log2_T + math.log2(eps_s)) / beta
    return minus_log2_p + (1.0 + beta) / beta * math.log2(kappa)


# ---------------------------------------------------------------------------
# table construction
# ---------------------------------------------------------------------------

DEFAULT_J_MID_K17 = 53_478


def _anchor(nu_h, j, k, beta, vertices, rel_tol, strict=True):
    q = input_distribution(j, k)
    pef, gain = optimize_trial_pef(
        nu_h, q, beta, vertices=vertices, rel_tol=rel_tol, strict=strict
    )
    return pef


def _table_gain_estimate(table: PefTable, nu_h, n_samples: int = 2048) -> float:
    """Trapezoid estimate of the block rate on a decimated position grid."""
    n = table.n_positions
    if n <= n_samples:
        return block_gain(table, nu_h).g_block
    pos = np.unique(np.round(np.linspace(1, n, n_samples)).astype(np.int64))
    log2f = table.log2_f(pos)
    q = 1.0 / (n - pos + 1.0)
    nu_cells = np.empty((pos.size, 16))
    nu_cells[:, :4] = (1.0 - 0.75 * q)[:, None]
    nu_cells[:, 4:] = (q / 4.0)[:, None]
    w = nu_cells * nu_h.table.ravel()[None, :]
    m_j = np.einsum("ji,ji->j", w, log2f)
    omega = (n - pos + 1.0) / n
    return float(np.trapezoid(omega * m_j, pos) / table.beta)


def build_pef_table(
    nu_h: ConditionalDistribution,
    beta: float,
    k: int,
    j_mid: int | None = None,
    optimize_j_mid: bool = False,
    vertices: PolytopeVertexSet | None = None,
    rel_tol: float = 1e-7,
    strict: bool = True,
) -> PefTable:
    """Optimise anchors and assemble the per-block PEF table.

    When ``j_mid`` is given it is used as the middle anchor position.  With
    ``optimize_j_mid`` a line search (coarse log-spaced grid, then ternary
    refinement, on a decimated rate estimate) picks the position that
    maximises the interpolated block rate.  Without either, ``k == 17``
    falls back to the production value 53478, other ``k`` run the search.
    """
    if k < 2:
        raise ValueError("table construction needs k >= 2 (a middle anchor must exist)")
    if vertices is None:
        vertices = enumerate_extreme_points()
    n = 2**k
    a1 = _anchor(nu_h, 1, k, beta, vertices, rel_tol, strict)
    ak = _anchor(nu_h, n, k, beta, vertices, rel_tol, strict)

    def table_at(jm: int, mid_pef=None) -> PefTable:
        mid = mid_pef or _anchor(nu_h, jm, k, beta, vertices, rel_tol, strict)
        return PefTable(k=k, beta=beta, j_mid=jm, anchors=(a1, mid, ak))

    if j_mid is None and not optimize_j_mid and k == 17:
        j_mid = DEFAULT_J_MID_K17
    if j_mid is not None:
        return table_at(int(j_mid))

    cache: dict[int, float] = {}

    def score(jm: int) -> float:
        jm = int(min(max(jm, 2), n - 1))
        if jm not in cache:
            cache[jm] = _table_gain_estimate(table_at(jm), nu_h)
        return cache[jm]

    grid = np.unique(np.round(np.geomspace(2, n - 1, 25)).astype(np.int64))
    best = int(grid[int(np.argmax([score(int(g)) for g in grid]))])
    gi = int(np.searchsorted(grid, best))
    lo = int(grid[max(0, gi - 1)])
    hi = int(grid[min(len(grid) - 1, gi + 1)])
    while hi - lo > 2:
        m1 = lo + (hi - lo) // 3
        m2 = hi - (hi - lo) // 3
        if score(m1) < score(m2):
            lo = m1
        else:
            hi = m2
    best = max(range(lo, hi + 1), key=lambda jm: (score(jm), -jm))
    return table_at(best)
