"""Seed and output budgets for the Trevisan extractor parameterisation.

Only the parameter arithmetic is implemented: how many near-uniform bits
``k_out`` can be drawn from ``m_in`` input bits carrying ``sigma_in`` bits of
conditional min-entropy at extractor error ``eps_ext``, and how many seed
bits ``d_s`` that costs.  The governing constraints are

    k_out + 4*log2(k_out) <= sigma_in - 6 + 4*log2(eps_ext)
    d_s <= w^2 * max(2, 1 + ceil((log2(k_out - e) - log2(w - e))
                                 / (log2(e) - log2(e - 1))))

with ``w`` the smallest prime above ``2*ceil(log2(4*m_in*k_out^2 /
eps_ext^2))`` and ``e`` Euler's number.  Ceilings sit on the critical path
of ``w``, so the huge ratio is handled in exact rational arithmetic; the
inner ceiling is evaluated in high-precision floating point with a
near-integer guard.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction

import mpmath

__all__ = [
    "ExtractorParams",
    "InfeasibleParameters",
    "smallest_prime_above",
    "ceil_log2_fraction",
    "max_kout",
    "seed_length",
    "check_set_X",
]


class InfeasibleParameters(ValueError):
    """Raised when no parameter choice satisfies the extractor constraints."""


def smallest_prime_above(n: int) -> int:
    """Least prime strictly greater than ``n``, by deterministic testing."""
    if n < 1:
        raise ValueError("n must be at least 1")
    m = n + 1
    while not _is_prime(m):
        m += 1
    return m


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    for p in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n % p == 0:
            return n == p
    # deterministic Miller-Rabin, valid far beyond any size used here
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def ceil_log2_fraction(value: Fraction) -> int:
    """Exact ``ceil(log2(value))`` for a positive rational.

    Uses integer bit lengths to bracket the exponent and integer
    comparisons to decide ties, so the result is correct even when the
    true logarithm sits next to an integer.
    """
    if value <= 0:
        raise ValueError("value must be positive")
    p, q = value.numerator, value.denominator
    c = p.bit_length() - q.bit_length() - 1
    # now verify: smallest c with p/q <= 2^c
    while not _le_pow2(p, q, c):
        c += 1
    while c > 0 and _le_pow2(p, q, c - 1):
        c -= 1
    return c


def _le_pow2(p: int, q: int, c: int) -> bool:
    """p/q <= 2^c using integers only."""
    if c >= 0:
        return p <= q << c
    return p << (-c) <= q


def max_kout(sigma_in: float, eps_ext: float) -> int:
    """Largest output length satisfying the entropy-loss inequality.

    Monotone bisection on ``k_out + 4*log2(k_out)`` against
    ``sigma_in - 6 + 4*log2(eps_ext)``.  Raises
    :class:`InfeasibleParameters` when even one output bit is impossible.
    """
    if eps_ext <= 0 or eps_ext > 1:
        raise ValueError("eps_ext must be in (0, 1]")
    rhs = sigma_in - 6 + 4.0 * math.log2(eps_ext)
    if 1.0 + 4.0 * math.log2(1.0) > rhs:
        raise InfeasibleParameters(
            f"sigma_in={sigma_in} too small for any output at eps_ext={eps_ext}"
        )
    lo, hi = 1, 1 << 62
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if mid + 4.0 * math.log2(mid) <= rhs:
            lo = mid
        else:
            hi = mid - 1
    return lo


def seed_length(m_in: int, k_out: int, eps_ext: float) -> tuple[int, int]:
    """Seed bits ``d_s`` and field size prime ``w`` for the extractor.

    ``w`` is the smallest prime above ``2*ceil(log2(4*m_in*k_out^2 /
    eps_ext^2))`` with the ceiling taken over exact rationals.  The second
    constraint is evaluated at 60 significant digits; a result within 1e-30
    of an integer would be ambiguous and raises instead of guessing.
    """
    if m_in <= 0 or k_out <= 0:
        raise ValueError("m_in and k_out must be positive")
    if eps_ext <= 0 or eps_ext > 1:
        raise ValueError("eps_ext must be in (0, 1]")
    ratio = Fraction(4) * m_in * k_out * k_out / (Fraction(eps_ext) ** 2)
    w = smallest_prime_above(2 * ceil_log2_fraction(ratio))
    e = mpmath.e
    if k_out <= e or w <= e:
        raise InfeasibleParameters("k_out and w must exceed Euler's number")
    with mpmath.workdps(60):
        inner = (mpmath.log(k_out - e, 2) - mpmath.log(w - e, 2)) / (
            mpmath.log(e, 2) - mpmath.log(e - 1, 2)
        )
        nearest = mpmath.nint(inner)
        if abs(inner - nearest) < mpmath.mpf("1e-30"):
            raise InfeasibleParameters(
                f"seed-length ceiling ambiguous at {inner}; cannot certify d_s"
            )
        d_s = int(w) * int(w) * max(2, 1 + int(mpmath.ceil(inner)))
    return d_s, w


@dataclass(frozen=True)
class ExtractorParams:
    """Full parameter tuple of one extractor invocation."""

    m_in: int
    sigma_in: float
    eps_ext: float
    eps: float
    k_out: int
    d_s: int
    w: int

    @classmethod
    def budget(
        cls, m_in: int, sigma_in: float, eps_ext: float, eps: float
    ) -> "ExtractorParams":
        """Derive the maximal output budget from the entropy input."""
        k_out = max_kout(sigma_in, eps_ext)
        d_s, w = seed_length(m_in, k_out, eps_ext)
        return cls(
            m_in=m_in,
            sigma_in=sigma_in,
            eps_ext=eps_ext,
            eps=eps,
            k_out=k_out,
            d_s=d_s,
            w=w,
        )

    def constraint_slacks(self) -> dict[str, float]:
        """Slack of each governing inequality (nonnegative when satisfied)."""
        lhs = self.k_out + 4.0 * math.log2(self.k_out)
        rhs = self.sigma_in - 6 + 4.0 * math.log2(self.eps_ext)
        d_cap, _ = seed_length(self.m_in, self.k_out, self.eps_ext)
        return {
            "entropy_loss": rhs - lhs,
            "seed_cap": float(d_cap - self.d_s),
            "output_entropy": self.sigma_in - self.k_out,
            "input_entropy": self.m_in - self.sigma_in,
            "error_budget": self.eps - self.eps_ext,
        }

    def satisfies_constraints(self) -> bool:
        if not (1 <= self.sigma_in <= self.m_in):
            return False
        if not (0 < self.eps_ext <= 1) or self.d_s < 0:
            return False
        if self.k_out > self.sigma_in:
            return False
        s = self.constraint_slacks()
        return s["entropy_loss"] >= 0 and s["seed_cap"] >= 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "m_in": self.m_in,
                "sigma_in": self.sigma_in,
                "eps_ext": self.eps_ext,
                "eps": self.eps,
                "k_out": self.k_out,
                "d_s": self.d_s,
                "w": self.w,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ExtractorParams":
        o = json.loads(text)
        return cls(
            m_in=int(o["m_in"]),
            sigma_in=float(o["sigma_in"]),
            eps_ext=float(o["eps_ext"]),
            eps=float(o["eps"]),
            k_out=int(o["k_out"]),
            d_s=int(o["d_s"]),
            w=int(o["w"]),
        )


def check_set_X(params: ExtractorParams, beta: float) -> bool:
    """Whether the parameter tuple is admissible for the protocol.

    Requires the extractor constraints, a strict error split
    ``eps_ext < eps``, and the entropy cap
    ``sigma_in <= m_in + ((1+beta)/beta) * log2(eps)``.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    if not params.eps_ext < params.eps:
        return False
    if not params.satisfies_constraints():
        return False
    cap = params.m_in + (1.0 + beta) / beta * math.log2(params.eps)
    return params.sigma_in <= cap
