"""Sparse multivariate polynomial algebra with interval bounding.

A polynomial is a dict from exponent tuples (one non-negative int per
variable) to float coefficients; zero coefficients are never stored.
Monomials are ordered globally by graded lexicographic order so that
serialization and SOS constraint indexing are deterministic.

Coefficients are double precision floats.  That is deliberate: everything
downstream (Bernstein sampling, SDP solves) is float anyway, and the
degrees involved (<= 12) stay far from where float polynomial arithmetic
loses meaningful accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

Monomial = tuple  # exponent tuple, one entry per variable

__all__ = [
    "Monomial",
    "Polynomial",
    "Box",
    "Interval",
    "grlex_key",
    "interval_range",
]


def grlex_key(mono: Monomial):
    """Graded lexicographic sort key: total degree first, then lex on exponents."""
    return (sum(mono), mono)


class Polynomial:
    """Immutable sparse polynomial in ``nvars`` variables.

    ``terms`` maps exponent tuples to nonzero float coefficients.  All
    arithmetic returns new normalized polynomials; instances are never
    mutated after construction.
    """

    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms: Mapping[Monomial, float] | None = None):
        if nvars < 0:
            raise ValueError("nvars must be non-negative")
        self.nvars = int(nvars)
        clean: dict[Monomial, float] = {}
        if terms:
            for mono, coef in terms.items():
                mono = tuple(int(e) for e in mono)
                if len(mono) != nvars:
                    raise ValueError(
                        f"monomial {mono} has {len(mono)} exponents, expected {nvars}"
                    )
                if any(e < 0 for e in mono):
                    raise ValueError(f"negative exponent in monomial {mono}")
                c = float(coef)
                if c != 0.0:
                    clean[mono] = clean.get(mono, 0.0) + c
                    if clean[mono] == 0.0:
                        del clean[mono]
        self.terms = clean

    # -- constructors -------------------------------------------------

    @staticmethod
    def zero(nvars: int) -> "Polynomial":
        return Polynomial(nvars, {})

    @staticmethod
    def constant(nvars: int, c: float) -> "Polynomial":
        return Polynomial(nvars, {(0,) * nvars: c})

    @staticmethod
    def variable(nvars: int, i: int) -> "Polynomial":
        if not 0 <= i < nvars:
            raise ValueError(f"variable index {i} out of range for nvars={nvars}")
        e = [0] * nvars
        e[i] = 1
        return Polynomial(nvars, {tuple(e): 1.0})

    @staticmethod
    def affine(nvars: int, coeffs: Sequence[float], const: float = 0.0) -> "Polynomial":
        terms: dict[Monomial, float] = {(0,) * nvars: float(const)}
        for i, c in enumerate(coeffs):
            e = [0] * nvars
            e[i] = 1
            terms[tuple(e)] = float(c)
        return Polynomial(nvars, terms)

    # -- basic queries -------------------------------------------------

    def degree(self) -> int:
        """Max total degree; the zero polynomial has degree 0 by convention."""
        if not self.terms:
            return 0
        return max(sum(m) for m in self.terms)

    def per_var_degree(self) -> tuple:
        if not self.terms:
            return (0,) * self.nvars
        return tuple(max(m[i] for m in self.terms) for i in range(self.nvars))

    def is_zero(self) -> bool:
        return not self.terms

    def sorted_terms(self) -> list:
        return sorted(self.terms.items(), key=lambda kv: grlex_key(kv[0]))

    def coefficient(self, mono: Monomial) -> float:
        return self.terms.get(tuple(mono), 0.0)

    # -- arithmetic ----------------------------------------------------

    def _check_same(self, other: "Polynomial"):
        if self.nvars != other.nvars:
            raise ValueError(f"nvars mismatch: {self.nvars} vs {other.nvars}")

    def add(self, other: "Polynomial") -> "Polynomial":
        self._check_same(other)
        out = dict(self.terms)
        for m, c in other.terms.items():
            out[m] = out.get(m, 0.0) + c
        return Polynomial(self.nvars, out)

    def sub(self, other: "Polynomial") -> "Polynomial":
        return self.add(other.scale(-1.0))

    def scale(self, c: float) -> "Polynomial":
        c = float(c)
        if c == 0.0:
            return Polynomial.zero(self.nvars)
        return Polynomial(self.nvars, {m: v * c for m, v in self.terms.items()})

    def mul(self, other: "Polynomial") -> "Polynomial":
        self._check_same(other)
        out: dict[Monomial, float] = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = tuple(a + b for a, b in zip(m1, m2))
                out[m] = out.get(m, 0.0) + c1 * c2
        return Polynomial(self.nvars, out)

    def pow(self, k: int) -> "Polynomial":
        if k < 0:
            raise ValueError("pow exponent must be >= 0")
        result = Polynomial.constant(self.nvars, 1.0)
        base = self
        while k:
            if k & 1:
                result = result.mul(base)
            base = base.mul(base) if k > 1 else base
            k >>= 1
        return result

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.nvars, other)
        return self.add(other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.nvars, other)
        return self.sub(other)

    def __rsub__(self, other):
        return self.scale(-1.0).__add__(other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.scale(other)
        return self.mul(other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.scale(-1.0)

    def __pow__(self, k):
        return self.pow(k)

    def __eq__(self, other):
        return (
            isinstance(other, Polynomial)
            and self.nvars == other.nvars
            and self.terms == other.terms
        )

    def __hash__(self):
        return hash((self.nvars, tuple(self.sorted_terms())))

    def __repr__(self):
        if not self.terms:
            return "Polynomial(0)"
        bits = []
        for m, c in self.sorted_terms():
            mono = "*".join(
                f"x{i}^{e}" if e > 1 else f"x{i}" for i, e in enumerate(m) if e
            )
            bits.append(f"{c:+g}{'*' + mono if mono else ''}")
        return f"Polynomial({' '.join(bits)})"

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    # -- evaluation / substitution --------------------------------------

    def eval(self, x: Sequence[float]) -> float:
        if len(x) != self.nvars:
            raise ValueError(f"point has {len(x)} coords, polynomial has {self.nvars}")
        total = 0.0
        for m, c in self.terms.items():
            v = c
            for xi, e in zip(x, m):
                if e:
                    v *= xi**e
            total += v
        return total

    def eval_batch(self, pts: np.ndarray) -> np.ndarray:
        """Evaluate at an (N, nvars) array of points, returning shape (N,)."""
        pts = np.asarray(pts, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != self.nvars:
            raise ValueError(f"expected (N, {self.nvars}) array, got {pts.shape}")
        out = np.zeros(pts.shape[0])
        for m, c in self.terms.items():
            v = np.full(pts.shape[0], c)
            for i, e in enumerate(m):
                if e:
                    v = v * pts[:, i] ** e
            out += v
        return out

    def compose(self, subs: Sequence["Polynomial"]) -> "Polynomial":
        """Substitute subs[i] for variable i.  All subs share one nvars."""
        if len(subs) != self.nvars:
            raise ValueError(f"need {self.nvars} substitutions, got {len(subs)}")
        if not subs:
            # 0-variable polynomial is a constant
            return Polynomial(0, dict(self.terms))
        n_out = subs[0].nvars
        for s in subs:
            if s.nvars != n_out:
                raise ValueError("substitution polynomials must share nvars")
        # cache powers of each substitution polynomial
        pow_cache: list[dict[int, Polynomial]] = [
            {0: Polynomial.constant(n_out, 1.0)} for _ in subs
        ]

        def power(i: int, e: int) -> Polynomial:
            cache = pow_cache[i]
            if e not in cache:
                cache[e] = power(i, e - 1).mul(subs[i])
            return cache[e]

        out = Polynomial.zero(n_out)
        for m, c in self.terms.items():
            term = Polynomial.constant(n_out, c)
            for i, e in enumerate(m):
                if e:
                    term = term.mul(power(i, e))
            out = out.add(term)
        return out

    def partial(self, i: int) -> "Polynomial":
        """Partial derivative with respect to variable i."""
        out: dict[Monomial, float] = {}
        for m, c in self.terms.items():
            if m[i] == 0:
                continue
            d = list(m)
            d[i] -= 1
            out[tuple(d)] = out.get(tuple(d), 0.0) + c * m[i]
        return Polynomial(self.nvars, out)

    # -- serialization ---------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "nvars": self.nvars,
            "terms": [
                {"exp": list(m), "coef": c} for m, c in self.sorted_terms()
            ],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "Polynomial":
        return Polynomial(
            d["nvars"], {tuple(t["exp"]): t["coef"] for t in d["terms"]}
        )


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    def contains(self, x: float, atol: float = 0.0) -> bool:
        return self.lo - atol <= x <= self.hi + atol

    def width(self) -> float:
        return self.hi - self.lo

    def max_abs(self) -> float:
        return max(abs(self.lo), abs(self.hi))


class Box:
    """Axis-aligned box lo <= x <= hi, in state-space units."""

    __slots__ = ("lo", "hi")

    def __init__(self, lo: Sequence[float], hi: Sequence[float]):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size == 0:
            raise ValueError("lo/hi must be equal-length non-empty vectors")
        if np.any(lo > hi):
            raise ValueError("box has lo > hi on some axis")
        self.lo = lo
        self.hi = hi

    @property
    def nvars(self) -> int:
        return self.lo.size

    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def halfwidth(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, x, atol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo - atol) and np.all(x <= self.hi + atol))

    def contains_batch(self, pts: np.ndarray, atol: float = 0.0) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return np.all((pts >= self.lo - atol) & (pts <= self.hi + atol), axis=1)

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        if n is None:
            return rng.uniform(self.lo, self.hi)
        return rng.uniform(self.lo, self.hi, size=(n, self.nvars))

    def corners(self) -> np.ndarray:
        n = self.nvars
        out = np.zeros((2**n, n))
        for j in range(2**n):
            for i in range(n):
                out[j, i] = self.hi[i] if (j >> i) & 1 else self.lo[i]
        return out

    def face_constraints(self, nvars: int | None = None, offset: int = 0) -> list:
        """Linear constraints h(x) <= 0 describing the box, as polynomials.

        The polynomials live in ``nvars`` variables (default: box dimension)
        with this box's axes starting at variable index ``offset``.
        Order: for each axis i, first x_i - hi_i, then lo_i - x_i.
        """
        if nvars is None:
            nvars = self.nvars
        out = []
        for i in range(self.nvars):
            coeffs = [0.0] * nvars
            coeffs[offset + i] = 1.0
            out.append(Polynomial.affine(nvars, coeffs, -self.hi[i]))
            coeffs = [0.0] * nvars
            coeffs[offset + i] = -1.0
            out.append(Polynomial.affine(nvars, coeffs, self.lo[i]))
        return out

    def scaled(self, factor: float) -> "Box":
        """Scale the box about its center."""
        c, h = self.center(), self.halfwidth()
        return Box(c - factor * h, c + factor * h)

    def to_json_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @staticmethod
    def from_json_dict(d: dict) -> "Box":
        return Box(d["lo"], d["hi"])

    def __eq__(self, other):
        return (
            isinstance(other, Box)
            and np.array_equal(self.lo, other.lo)
            and np.array_equal(self.hi, other.hi)
        )

    def __repr__(self):
        return f"Box(lo={list(self.lo)}, hi={list(self.hi)})"


def _interval_pow_sym(h: float, e: int) -> Interval:
    # range of y^e over the symmetric interval [-h, h]
    if e == 0:
        return Interval(1.0, 1.0)
    p = h**e
    if e % 2 == 0:
        return Interval(0.0, p)
    return Interval(-p, p)


def interval_range(p: Polynomial, box: Box) -> Interval:
    """Sound over-approximation of the range of p over box.

    The box is centered first (exact affine substitution), then each term is
    bounded by products of symmetric-interval powers.  Conservative but
    cheap; tightness only affects downstream conservatism.
    """
    if box.nvars != p.nvars:
        raise ValueError(f"box has {box.nvars} axes, polynomial has {p.nvars}")
    c = box.center()
    h = box.halfwidth()
    centered = p.compose(
        [
            Polynomial.affine(p.nvars, [1.0 if j == i else 0.0 for j in range(p.nvars)], c[i])
            for i in range(p.nvars)
        ]
    )
    lo = hi = 0.0
    for m, coef in centered.terms.items():
        t_lo, t_hi = 1.0, 1.0
        for i, e in enumerate(m):
            if e == 0:
                continue
            iv = _interval_pow_sym(h[i], e)
            cand = (t_lo * iv.lo, t_lo * iv.hi, t_hi * iv.lo, t_hi * iv.hi)
            t_lo, t_hi = min(cand), max(cand)
        if coef >= 0:
            lo += coef * t_lo
            hi += coef * t_hi
        else:
            lo += coef * t_hi
            hi += coef * t_lo
    return Interval(lo, hi)


def lipschitz_bound_inf(p: Polynomial, box: Box) -> float:
    """Upper bound on the inf-norm Lipschitz constant of p over box.

    Uses sup over box of the 1-norm of the gradient (the dual norm), each
    partial bounded by interval arithmetic.
    """
    total = 0.0
    for i in range(p.nvars):
        iv = interval_range(p.partial(i), box)
        total += iv.max_abs()
    return total
