"""Compile robust-invariance conditions for a hybrid polynomial system into
a standard-form SDP (Gram parameterization, per-monomial coefficient
matching, ball-moment objective).

Conditions, for the unknown polynomial v of even degree deg_v and a ball
B = {|x|_2 <= H} containing the one-step reachable set:

  decrease, one per partition p (variables: x plus active disturbance axes):

      lam * v(x) - v(fhat_p(x, e, w)) - margin
        + sum_l s_{p,l}(x,e,w) * h_{p,l}(x)        [partition faces, h <= 0]
        + sum_l s_l(x,e,w) * h_l(e,w)              [disturbance faces]
        + s_p(x,e,w) * (|x|^2 - H^2)               [ball]
      in SOS

  containment, one per safe-set face h0j <= 0 (variables: x):

      (1 + h0j^2) * v(x) - h0j(x) - margin + s'_j(x) * (|x|^2 - H^2) in SOS

All set constraints are written h <= 0 and every multiplier enters the
identity with a plus sign, so on the constrained domain each multiplier
term is nonpositive and the SOS certificate dominates it.  On {v <= 0} in
B this yields v(fhat) <= lam * v <= 0 and h0j <= 0.

lam = 1 is the exact non-increase condition; with additive disturbance that
admits only trivial v (a polynomial non-increasing along every admissible
transition near a noise-excited equilibrium must be constant), so the
default is lam slightly below 1, which keeps soundness and restores
feasibility.  The margin constant absorbs solver residuals.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bernstein import HybridPolySystem
from .poly import Box, Polynomial, grlex_key
from .sdp import BlockEntries, SdpProblem, SdpSolution

__all__ = [
    "BallConstraint",
    "SosOptions",
    "SosProgram",
    "SosExtractionError",
    "ball_moments",
    "build_invariant_program",
    "to_sdp",
    "extract_solution",
    "certify_sos",
]


class SosExtractionError(Exception):
    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


@dataclass(frozen=True)
class BallConstraint:
    H: float

    def __post_init__(self):
        if self.H <= 0:
            raise ValueError("ball radius must be positive")


@dataclass
class SosOptions:
    deg_v: int = 4
    deg_mult: int = 4  # degree of the face multipliers (box and disturbance)
    lam: float = 0.9
    margin: float = 1e-4
    coeff_bound: float = 0.0  # optional |c_k| box (0 = off); the containment
    # conditions pin v on the ball boundary, which bounds the objective in
    # every shipped configuration

    def __post_init__(self):
        if self.deg_v % 2 or self.deg_v < 2:
            raise ValueError("deg_v must be even and >= 2")
        if self.deg_mult % 2:
            raise ValueError("deg_mult must be even")
        if not 0 < self.lam <= 1.0:
            raise ValueError("lam must be in (0, 1]")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")


def monomials_upto(nvars: int, deg: int) -> list:
    out = [
        m
        for m in itertools.product(range(deg + 1), repeat=nvars)
        if sum(m) <= deg
    ]
    return sorted(out, key=grlex_key)


def ball_moments(n: int, H: float, basis: Sequence[tuple]) -> np.ndarray:
    """Integrals of x^alpha over the n-ball of radius H, per basis monomial.

    Zero for any odd exponent; otherwise the classical Gamma-product
    closed form.
    """
    if H <= 0:
        raise ValueError("H must be positive")
    out = np.zeros(len(basis))
    for idx, alpha in enumerate(basis):
        if any(a % 2 for a in alpha):
            continue
        betas = [(a + 1) / 2.0 for a in alpha]
        total = sum(alpha)
        surf = 2.0 * math.prod(math.gamma(b) for b in betas) / math.gamma(sum(betas))
        out[idx] = surf / (total + n) * H ** (total + n)
    return out


@dataclass
class _Multiplier:
    name: str
    h: Polynomial  # in the constraint's active variables
    basis: list  # Gram basis monomials


@dataclass
class _Constraint:
    name: str
    nvars: int
    deg: int
    content_free: list  # per v-coefficient: Polynomial multiplying c_k
    content_const: Polynomial
    multipliers: list  # list[_Multiplier]
    main_basis: list
    row_monos: list


@dataclass
class SosProgram:
    """Symbolic SOS program: one decrease condition per partition plus one
    containment condition per safe-set face, sharing the decision vector c
    (coefficients of v over v_basis)."""

    n_state: int
    v_basis: list  # monomials of v, in the state variables
    objective: np.ndarray  # ball moments, aligned with v_basis
    constraints: list  # list[_Constraint]
    ball: BallConstraint
    options: SosOptions
    meta: dict = field(default_factory=dict)

    def n_free(self) -> int:
        return len(self.v_basis)

    def v_from_coeffs(self, c: np.ndarray) -> Polynomial:
        return Polynomial(
            self.n_state, {m: float(ck) for m, ck in zip(self.v_basis, c)}
        )


def _mono_poly(mono: tuple, nvars: int) -> Polynomial:
    return Polynomial(nvars, {tuple(mono): 1.0})


def _even_up(d: int) -> int:
    return d if d % 2 == 0 else d + 1


def build_invariant_program(
    sys: HybridPolySystem,
    safe_faces: Sequence[Polynomial],
    ball: BallConstraint,
    options: SosOptions,
) -> SosProgram:
    """Assemble the SOS program for the hybrid system's invariant conditions.

    ``safe_faces`` are the h0j <= 0 constraints of the safe set X expressed
    in the state variables.  Disturbance axes whose interval is a single
    point are substituted out before compilation.
    """
    if not sys.pieces:
        raise ValueError("hybrid system has no partitions")
    n = sys.n_state
    opts = options

    v_basis = monomials_upto(n, opts.deg_v)
    v_monos = [_mono_poly(m, n) for m in v_basis]
    w = ball_moments(n, ball.H, v_basis)

    # active disturbance axes (nonzero width)
    widths = sys.dist_box.widths()
    active_dist = [k for k in range(sys.n_dist) if widths[k] > 0]
    n_active = n + len(active_dist)

    # substitution from full (x, e, w) variables into active variables;
    # degenerate axes become their constant value
    subs = [Polynomial.variable(n_active, i) for i in range(n)]
    pos = n
    dist_lo, dist_hi = sys.dist_box.lo, sys.dist_box.hi
    for k in range(sys.n_dist):
        if k in active_dist:
            subs.append(Polynomial.variable(n_active, pos))
            pos += 1
        else:
            subs.append(Polynomial.constant(n_active, dist_lo[k]))

    ball_poly_x = Polynomial(
        n, {tuple(2 if j == i else 0 for j in range(n)): 1.0 for i in range(n)}
    ) - ball.H ** 2

    constraints = []

    # decrease condition per partition
    for pi, (piece, pbox) in enumerate(zip(sys.pieces, sys.partition)):
        fhat = [fp.compose(subs) for fp in piece]  # in active vars
        # v(fhat): substitute state updates into each v-basis monomial
        vmono_at_f = [mp.compose(fhat) for mp in v_monos]
        content_free = [
            (opts.lam * _embed(mp, n_active)).sub(mf)
            for mp, mf in zip(v_monos, vmono_at_f)
        ]
        deg_core = max(
            [p.degree() for p in content_free] + [opts.deg_v, 2]
        )
        # multipliers may raise the identity degree (deg_mult + 1 for the
        # linear faces); the ball multiplier is sized to reach deg_f exactly
        deg_face = opts.deg_mult
        deg_f = _even_up(max(deg_core, deg_face + 1))
        deg_ball = deg_f - 2

        mults = []
        for li, h in enumerate(pbox.face_constraints(nvars=n_active)):
            mults.append(
                _Multiplier(
                    f"s_part{pi}_face{li}",
                    h,
                    monomials_upto(n_active, deg_face // 2),
                )
            )
        for ak, k in enumerate(active_dist):
            lo_k, hi_k = dist_lo[k], dist_hi[k]
            var = Polynomial.variable(n_active, n + ak)
            for side, hpoly in (("hi", var - hi_k), ("lo", lo_k - var)):
                mults.append(
                    _Multiplier(
                        f"s_part{pi}_dist{k}_{side}",
                        hpoly,
                        monomials_upto(n_active, deg_face // 2),
                    )
                )
        mults.append(
            _Multiplier(
                f"s_part{pi}_ball",
                _embed(ball_poly_x, n_active),
                monomials_upto(n_active, deg_ball // 2),
            )
        )
        constraints.append(
            _Constraint(
                name=f"decrease_p{pi}",
                nvars=n_active,
                deg=deg_f,
                content_free=content_free,
                content_const=Polynomial.constant(n_active, -opts.margin),
                multipliers=mults,
                main_basis=monomials_upto(n_active, deg_f // 2),
                row_monos=monomials_upto(n_active, deg_f),
            )
        )

    # containment condition per safe-set face
    for ji, h0 in enumerate(safe_faces):
        if h0.nvars != n:
            raise ValueError("safe-set faces must be in the state variables")
        weight = Polynomial.constant(n, 1.0).add(h0.mul(h0))
        content_free = [weight.mul(mp) for mp in v_monos]
        deg_c = _even_up(max(p.degree() for p in content_free))
        constraints.append(
            _Constraint(
                name=f"contain_f{ji}",
                nvars=n,
                deg=deg_c,
                content_free=content_free,
                content_const=(-h0) - opts.margin,
                multipliers=[
                    _Multiplier(
                        f"sp_face{ji}",
                        ball_poly_x,
                        monomials_upto(n, (deg_c - 2) // 2),
                    )
                ],
                main_basis=monomials_upto(n, deg_c // 2),
                row_monos=monomials_upto(n, deg_c),
            )
        )

    return SosProgram(
        n_state=n,
        v_basis=v_basis,
        objective=w,
        constraints=constraints,
        ball=ball,
        options=opts,
        meta={
            "n_active_dist": len(active_dist),
            "partitions": len(sys.pieces),
            "eps_overall": sys.eps_overall,
        },
    )


def _embed(p: Polynomial, nvars: int) -> Polynomial:
    if nvars < p.nvars:
        raise ValueError("cannot embed into fewer variables")
    return Polynomial(nvars, {m + (0,) * (nvars - p.nvars): c for m, c in p.terms.items()})


def _even_down(d: int) -> int:
    return d if d % 2 == 0 else d - 1


def to_sdp(prog: SosProgram) -> SdpProblem:
    """Per-monomial coefficient matching of every SOS identity.

    Deterministic: block order is (per constraint: main Gram then
    multipliers in declaration order, plus the coefficient-bound slacks),
    row order is grlex within each constraint.
    """
    n_free = prog.n_free()
    block_sizes = []
    for con in prog.constraints:
        block_sizes.append(len(con.main_basis))
        block_sizes.extend(len(mu.basis) for mu in con.multipliers)
    n_bound = n_free if prog.options.coeff_bound else 0
    block_sizes.extend([1, 1] * n_bound)  # slack pairs for +/- coefficient bounds

    m = sum(len(con.row_monos) for con in prog.constraints) + 2 * n_bound
    p = SdpProblem.empty(block_sizes, n_free, m)
    p.c_free = np.asarray(prog.objective, dtype=float).copy()

    row0 = 0
    bi = 0
    for con in prog.constraints:
        row_index = {mlo: row0 + k for k, mlo in enumerate(con.row_monos)}

        # free part: v coefficients
        for k, cf in enumerate(con.content_free):
            for mono, coef in cf.terms.items():
                p.F[row_index[mono], k] += coef
        # identity: sum_k c_k cf_k + const + sum s h - sigma = 0, so the
        # known constants move to the right-hand side with flipped sign
        for mono, coef in con.content_const.terms.items():
            p.b[row_index[mono]] -= coef

        # main Gram, negative sign
        main = p.blocks[bi]
        basis = con.main_basis
        for a in range(len(basis)):
            for b_ in range(a, len(basis)):
                mono = tuple(x + y for x, y in zip(basis[a], basis[b_]))
                mult = 1.0 if a == b_ else 2.0
                main.add(row_index[mono], a, b_, -mult)
        bi += 1

        # multiplier Grams, h-shifted, positive sign
        for mu in con.multipliers:
            blk = p.blocks[bi]
            mb = mu.basis
            for a in range(len(mb)):
                for b_ in range(a, len(mb)):
                    mult = 1.0 if a == b_ else 2.0
                    base = tuple(x + y for x, y in zip(mb[a], mb[b_]))
                    for hm, hc in mu.h.terms.items():
                        mono = tuple(x + y for x, y in zip(base, hm))
                        blk.add(row_index[mono], a, b_, mult * hc)
            bi += 1
        row0 += len(con.row_monos)

    # coefficient bounds: c_k + slack+ = bound, -c_k + slack- = bound
    if n_bound:
        bound = prog.options.coeff_bound
        for k in range(n_free):
            p.blocks[bi].add(row0, 0, 0, 1.0)
            p.F[row0, k] = 1.0
            p.b[row0] = bound
            bi += 1
            row0 += 1
            p.blocks[bi].add(row0, 0, 0, 1.0)
            p.F[row0, k] = -1.0
            p.b[row0] = bound
            bi += 1
            row0 += 1
    return p


@dataclass
class SosSolutionInfo:
    v: Polynomial
    multipliers: dict  # name -> Polynomial
    residual: float
    min_gram_eig: float
    solver: SdpSolution

    def diagnostics(self) -> dict:
        return {
            "residual": self.residual,
            "min_gram_eig": self.min_gram_eig,
            "sdp_status": self.solver.status,
            "sdp_iterations": self.solver.iterations,
            "sdp_gap": self.solver.gap,
            "objective": self.solver.primal_obj,
        }


def _gram_to_poly(Q: np.ndarray, basis: list, nvars: int) -> Polynomial:
    terms: dict = {}
    for a in range(len(basis)):
        for b_ in range(a, len(basis)):
            mono = tuple(x + y for x, y in zip(basis[a], basis[b_]))
            mult = 1.0 if a == b_ else 2.0
            terms[mono] = terms.get(mono, 0.0) + mult * Q[a, b_]
    return Polynomial(nvars, terms)


def extract_solution(
    prog: SosProgram,
    sol: SdpSolution,
    residual_tol: float = 1e-6,
    eig_tol: float = -1e-8,
) -> SosSolutionInfo:
    """Rebuild v and the multipliers from the SDP solution and re-verify.

    Every Gram block must be PSD to eig_tol and the per-monomial identity
    residual must stay below residual_tol, otherwise the candidate is
    rejected (raises SosExtractionError).
    """
    if sol.status not in ("optimal",):
        raise SosExtractionError(f"SDP not solved to optimality: {sol.status}")
    c = sol.free
    v = prog.v_from_coeffs(c)

    min_eig = math.inf
    worst_res = 0.0
    multipliers: dict = {}
    bi = 0
    for con in prog.constraints:
        sigma = _gram_to_poly(sol.blocks[bi], con.main_basis, con.nvars)
        min_eig = min(min_eig, float(np.min(np.linalg.eigvalsh(sol.blocks[bi]))))
        bi += 1
        total = con.content_const
        for k, cf in enumerate(con.content_free):
            total = total.add(cf.scale(float(c[k])))
        for mu in con.multipliers:
            s_poly = _gram_to_poly(sol.blocks[bi], mu.basis, con.nvars)
            min_eig = min(min_eig, float(np.min(np.linalg.eigvalsh(sol.blocks[bi]))))
            multipliers[mu.name] = s_poly
            total = total.add(s_poly.mul(mu.h))
            bi += 1
        total = total.sub(sigma)
        worst_res = max(worst_res, total.max_abs_coeff())

    if min_eig < eig_tol:
        raise SosExtractionError(
            f"Gram block indefinite: min eigenvalue {min_eig:.3e}", worst_res
        )
    if worst_res > residual_tol:
        raise SosExtractionError(
            f"coefficient-matching residual {worst_res:.3e} exceeds {residual_tol:.1e}",
            worst_res,
        )
    return SosSolutionInfo(
        v=v, multipliers=multipliers, residual=worst_res,
        min_gram_eig=min_eig, solver=sol,
    )


def certify_sos(p: Polynomial, tol: float = 1e-7):
    """Feasibility check: is p a sum of squares?  Returns (ok, Gram, basis).

    Used by fixtures and cross-checks; the Gram basis is every monomial up
    to half the (evened-up) degree.
    """
    from . import sdp as sdp_mod

    deg = _even_up(p.degree())
    basis = monomials_upto(p.nvars, deg // 2)
    row_monos = monomials_upto(p.nvars, deg)
    row_index = {m: i for i, m in enumerate(row_monos)}
    prob = SdpProblem.empty([len(basis)], 0, len(row_monos))
    for a in range(len(basis)):
        for b_ in range(a, len(basis)):
            mono = tuple(x + y for x, y in zip(basis[a], basis[b_]))
            prob.blocks[0].add(row_index[mono], a, b_, 1.0 if a == b_ else 2.0)
    for mono, coef in p.terms.items():
        if mono not in row_index:
            raise ValueError("polynomial degree bookkeeping error")
        prob.b[row_index[mono]] = coef
    sol = sdp_mod.solve(prob, tol=tol)
    if sol.status != "optimal":
        return False, None, basis
    Q = sol.blocks[0]
    if float(np.min(np.linalg.eigvalsh(Q))) < -1e-8:
        return False, None, basis
    # verify the reconstruction matches p
    rec = _gram_to_poly(Q, basis, p.nvars)
    if rec.sub(p).max_abs_coeff() > 1e-5:
        return False, None, basis
    return True, Q, basis
