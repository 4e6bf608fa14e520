"""Primal-dual interior-point solver for small standard-form SDPs.

Problem form:

    min  sum_b <C_b, Q_b> + c_f . u
    s.t. sum_b <A_{r,b}, Q_b> + (F u)_r = b_r     r = 1..m
         Q_b PSD,  u free

Nesterov-Todd scaling with predictor-corrector centering (affine predictor
fixes sigma, then a centered Newton step), infeasible start,
fraction-to-boundary 0.98, dense linear algebra (Cholesky on the Schur
complement).  Free variables are kept in the Newton system rather than
eliminated, which preserves the sparsity of the constraint data.

Everything is deterministic: identical problems produce bit-identical
iterate sequences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla

__all__ = [
    "BlockEntries",
    "SdpProblem",
    "SdpSolution",
    "SdpError",
    "solve",
    "presolve",
    "read_sparse_text",
    "write_sparse_text",
]


class SdpError(Exception):
    pass


class BlockEntries:
    """Sparse constraint data for one PSD block.

    Triples (row, i, j, v) with i <= j mean the constraint ``row`` contains
    the term v * Q[i, j]; for i < j this already accounts for the symmetric
    pair (i.e. <A, Q> with A[i,j] = A[j,i] = v/2).
    """

    def __init__(self, size: int):
        self.size = int(size)
        self.rows: list = []
        self.ii: list = []
        self.jj: list = []
        self.vv: list = []

    def add(self, row: int, i: int, j: int, v: float):
        if not (0 <= i <= j < self.size):
            raise SdpError(f"bad block entry indices ({i},{j}) for size {self.size}")
        if v != 0.0:
            self.rows.append(int(row))
            self.ii.append(int(i))
            self.jj.append(int(j))
            self.vv.append(float(v))

    def finalize(self):
        """Internal ordered-entry arrays: off-diagonal triples are mirrored
        with half weight so that <A_r, Q> = sum_e v_e Q[i_e, j_e]."""
        r = np.asarray(self.rows, dtype=np.int64)
        i = np.asarray(self.ii, dtype=np.int64)
        j = np.asarray(self.jj, dtype=np.int64)
        v = np.asarray(self.vv, dtype=float)
        off = i != j
        r_o = np.concatenate([r, r[off]])
        i_o = np.concatenate([i, j[off]])
        j_o = np.concatenate([j, i[off]])
        v_o = np.concatenate([np.where(off, v / 2.0, v), v[off] / 2.0])
        order = np.lexsort((j_o, i_o, r_o))
        return r_o[order], i_o[order], j_o[order], v_o[order]


@dataclass
class SdpProblem:
    block_sizes: list
    n_free: int
    m: int
    blocks: list  # list[BlockEntries], aligned with block_sizes
    F: np.ndarray  # (m, n_free)
    b: np.ndarray  # (m,)
    C_blocks: list  # list[np.ndarray|None] dense symmetric objectives
    c_free: np.ndarray  # (n_free,)

    @staticmethod
    def empty(block_sizes: Sequence[int], n_free: int, m: int) -> "SdpProblem":
        return SdpProblem(
            block_sizes=list(int(s) for s in block_sizes),
            n_free=int(n_free),
            m=int(m),
            blocks=[BlockEntries(s) for s in block_sizes],
            F=np.zeros((m, n_free)),
            b=np.zeros(m),
            C_blocks=[None] * len(list(block_sizes)),
            c_free=np.zeros(n_free),
        )

    def row_dense(self, r: int) -> np.ndarray:
        """Dense concatenation of constraint row r (packed blocks + free)."""
        out = []
        for be in self.blocks:
            n = be.size
            M = np.zeros((n, n))
            for row, i, j, v in zip(be.rows, be.ii, be.jj, be.vv):
                if row == r:
                    M[i, j] += v
            iu = np.triu_indices(n)
            out.append(M[iu])
        out.append(self.F[r])
        return np.concatenate(out)


@dataclass
class SdpSolution:
    status: str  # optimal | max_iter | infeasible | unbounded | singular
    blocks: list  # primal PSD blocks
    free: np.ndarray
    y: np.ndarray
    Z_blocks: list
    iterations: int
    primal_obj: float
    dual_obj: float
    gap: float
    primal_res: float
    dual_res: float

    def summary_dict(self) -> dict:
        return {
            "status": self.status,
            "iterations": self.iterations,
            "primal_obj": self.primal_obj,
            "dual_obj": self.dual_obj,
            "gap": self.gap,
            "primal_res": self.primal_res,
            "dual_res": self.dual_res,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary_dict())


# ---------------------------------------------------------------------------
# presolve: dependent equality rows


def presolve(p: SdpProblem, tol: float = 1e-9):
    """Remove linearly dependent equality rows.

    Rank detection by pivoted Cholesky on the (row-normalized) Gram matrix
    of [A | F].  Returns (problem, report) where report lists removed rows;
    inconsistent dependent rows make report['infeasible'] true.
    """
    m = p.m
    # assemble sparse row matrix over packed entries + free columns
    import scipy.sparse as sp

    mats = []
    for be in p.blocks:
        n = be.size
        pack = {}
        idx = 0
        for a in range(n):
            for bcol in range(a, n):
                pack[(a, bcol)] = idx
                idx += 1
        cols = [pack[(i, j)] for i, j in zip(be.ii, be.jj)]
        mats.append(
            sp.coo_matrix(
                (be.vv, (be.rows, cols)), shape=(m, n * (n + 1) // 2)
            ).tocsr()
        )
    if p.n_free:
        mats.append(sp.csr_matrix(p.F))
    A = sp.hstack(mats).tocsr() if mats else sp.csr_matrix((m, 0))

    norms = np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).ravel())
    norms[norms == 0] = 1.0
    D = sp.diags(1.0 / norms)
    An = D @ A
    G = (An @ An.T).toarray()
    G = 0.5 * (G + G.T)

    # pivoted Cholesky; rank = number of accepted pivots
    c, piv, rank, _info = sla.lapack.dpstrf(G, lower=1, tol=m * 1e-14)
    piv = piv - 1  # LAPACK is 1-based
    keep = sorted(piv[:rank].tolist())
    drop = sorted(piv[rank:].tolist())

    report = {"removed": drop, "n_removed": len(drop), "infeasible": False}
    if not drop:
        return p, report

    # consistency of dropped rows: coefficients in the span of kept rows
    Gkk = G[np.ix_(keep, keep)] + 1e-14 * np.eye(len(keep))
    bn = p.b / norms
    for d in drop:
        alpha = np.linalg.solve(Gkk, G[np.ix_(keep, [d])]).ravel()
        pred = float(alpha @ bn[keep])
        if abs(pred - bn[d]) > tol * (1.0 + abs(bn[d])):
            report["infeasible"] = True

    remap = {old: new for new, old in enumerate(keep)}
    q = SdpProblem.empty(p.block_sizes, p.n_free, len(keep))
    for bi, be in enumerate(p.blocks):
        nbe = q.blocks[bi]
        for row, i, j, v in zip(be.rows, be.ii, be.jj, be.vv):
            if row in remap:
                nbe.add(remap[row], i, j, v)
    q.F = p.F[keep] if p.n_free else np.zeros((len(keep), 0))
    q.b = p.b[keep]
    q.C_blocks = p.C_blocks
    q.c_free = p.c_free
    return q, report


# ---------------------------------------------------------------------------
# NT interior point


class _BlockOps:
    """Vectorized constraint/block operators built once per solve."""

    def __init__(self, p: SdpProblem):
        self.sizes = p.block_sizes
        self.m = p.m
        self.entries = []
        for be in p.blocks:
            r, i, j, v = be.finalize()
            # group by row for Schur formation
            row_starts = np.searchsorted(r, np.arange(self.m + 1))
            self.entries.append((r, i, j, v, row_starts))

    def apply_A(self, Xb: list) -> np.ndarray:
        out = np.zeros(self.m)
        for (r, i, j, v, _rs), X in zip(self.entries, Xb):
            if len(r):
                out += np.bincount(r, weights=v * X[i, j], minlength=self.m)
        return out

    def apply_At(self, y: np.ndarray) -> list:
        mats = []
        for (r, i, j, v, _rs), n in zip(self.entries, self.sizes):
            M = np.zeros((n, n))
            if len(r):
                np.add.at(M, (i, j), v * y[r])
            mats.append(M)
        return mats

    def schur(self, Wb: list) -> np.ndarray:
        """M[r,s] = sum_b <A_rb, W_b A_sb W_b> (NT Schur complement)."""
        M = np.zeros((self.m, self.m))
        for (r, i, j, v, rs), W in zip(self.entries, Wb):
            if not len(r):
                continue
            for row in range(self.m):
                lo, hi = rs[row], rs[row + 1]
                if lo == hi:
                    continue
                ii, jj, vv = i[lo:hi], j[lo:hi], v[lo:hi]
                T = (W[:, ii] * vv) @ W[jj, :]
                M[row] += np.bincount(r, weights=v * T[i, j], minlength=self.m)
        return 0.5 * (M + M.T)


def _is_pd(M: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(M)
        return True
    except np.linalg.LinAlgError:
        return False


def _chol_max_step(X: np.ndarray, dX: np.ndarray) -> float:
    """sup { a >= 0 : X + a dX PSD } for X positive definite."""
    try:
        L = np.linalg.cholesky(X)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * max(float(np.trace(np.abs(X))) / len(X), 1e-300)
        try:
            L = np.linalg.cholesky(X + jitter * np.eye(len(X)))
        except np.linalg.LinAlgError:
            return 0.0
    S = sla.solve_triangular(L, dX, lower=True)
    S = sla.solve_triangular(L, S.T, lower=True)
    lam = float(np.min(sla.eigvalsh(0.5 * (S + S.T))))
    if lam >= 0:
        return np.inf
    return -1.0 / lam


def _backtrack_pd(mats: list, dmats: list, alpha: float) -> float:
    """Largest step (<= alpha, geometric backtracking) keeping all blocks PD."""
    for _ in range(40):
        if alpha < 1e-14:
            return 0.0
        if all(_is_pd(M + alpha * D) for M, D in zip(mats, dmats)):
            return alpha
        alpha *= 0.8
    return 0.0


def _nt_scaling(X: np.ndarray, Z: np.ndarray):
    """W with W Z W = X, plus Z^{-1}."""
    Lz = np.linalg.cholesky(Z)
    M = Lz.T @ X @ Lz
    M = 0.5 * (M + M.T)
    evals, U = sla.eigh(M)
    evals = np.maximum(evals, 1e-300)
    inner = (U * np.sqrt(evals)) @ U.T
    Linv = sla.solve_triangular(Lz, np.eye(len(Z)), lower=True)
    W = Linv.T @ inner @ Linv
    Zinv = Linv.T @ Linv
    return 0.5 * (W + W.T), 0.5 * (Zinv + Zinv.T)


def solve(
    p: SdpProblem,
    tol: float = 1e-7,
    max_iter: int = 200,
    run_presolve: bool = True,
    verbose: bool = False,
) -> SdpSolution:
    """NT-scaled predictor-corrector interior-point solve."""
    report = None
    if run_presolve:
        p, report = presolve(p)
        if report["infeasible"]:
            return SdpSolution(
                "infeasible", [], np.zeros(p.n_free), np.zeros(p.m), [],
                0, math.nan, math.nan, math.nan, math.inf, math.inf,
            )

    ops = _BlockOps(p)
    nb = len(p.block_sizes)
    ntot = sum(p.block_sizes)
    m = p.m
    Cb = [
        (np.zeros((n, n)) if p.C_blocks[bi] is None else np.asarray(p.C_blocks[bi], dtype=float))
        for bi, n in enumerate(p.block_sizes)
    ]

    bnorm = float(np.max(np.abs(p.b))) if m else 0.0
    cnorm = max([float(np.max(np.abs(C))) if C.size else 0.0 for C in Cb] + [
        float(np.max(np.abs(p.c_free))) if p.n_free else 0.0, 1.0
    ])
    eta = max(10.0, math.sqrt(ntot), min(bnorm, 100.0), min(cnorm, 100.0))
    Xb = [eta * np.eye(n) for n in p.block_sizes]
    Zb = [eta * np.eye(n) for n in p.block_sizes]
    y = np.zeros(m)
    u = np.zeros(p.n_free)

    def pobj():
        return sum(float(np.sum(C * X)) for C, X in zip(Cb, Xb)) + float(p.c_free @ u)

    def dobj():
        return float(p.b @ y)

    tau = 0.98  # fraction-to-boundary
    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        rp = p.b - ops.apply_A(Xb) - (p.F @ u if p.n_free else 0.0)
        Aty = ops.apply_At(y)
        Rd = [C - Z - At for C, Z, At in zip(Cb, Zb, Aty)]
        rf = p.c_free - (p.F.T @ y) if p.n_free else np.zeros(0)
        gap = sum(float(np.sum(X * Z)) for X, Z in zip(Xb, Zb))
        mu = gap / ntot

        prim_res = float(np.max(np.abs(rp))) / (1.0 + bnorm) if m else 0.0
        dual_res = max(
            [float(np.max(np.abs(R))) for R in Rd]
            + ([float(np.max(np.abs(rf)))] if p.n_free else [0.0])
        ) / (1.0 + cnorm)
        po, do = pobj(), dobj()
        relgap = abs(po - do) / (1.0 + abs(po) + abs(do))
        if verbose:
            print(
                f"iter {it:3d} mu {mu:9.2e} rp {prim_res:9.2e} rd {dual_res:9.2e} "
                f"gap {relgap:9.2e} pobj {po:+12.5e} dobj {do:+12.5e}"
            )
        if prim_res <= tol and dual_res <= tol and relgap <= tol:
            status = "optimal"
            break
        # divergence heuristics: growing dual with small scaled dual residual
        yscale = float(np.max(np.abs(y))) if m else 0.0
        if yscale > 1e9 * eta and do > 1e6 * (1.0 + bnorm) and dual_res * eta / yscale < 1e-6:
            status = "infeasible"
            break
        if po < -1e8 * (1.0 + bnorm + cnorm) and prim_res < 10 * tol and relgap > 0.5:
            status = "unbounded"
            break
        if not (math.isfinite(mu) and math.isfinite(po) and math.isfinite(do)):
            status = "singular"
            break

        try:
            scal = [_nt_scaling(X, Z) for X, Z in zip(Xb, Zb)]
        except np.linalg.LinAlgError:
            status = "singular"
            break
        Wb = [s[0] for s in scal]
        Zinvb = [s[1] for s in scal]

        M = ops.schur(Wb)
        try:
            Mfac = sla.cho_factor(M + 1e-13 * np.trace(M) / max(m, 1) * np.eye(m), lower=True)
        except np.linalg.LinAlgError:
            status = "singular"
            break

        def solve_schur(rhs):
            # Cholesky solve with two rounds of iterative refinement; the
            # Schur matrix gets brutally ill-conditioned as mu -> 0
            x = sla.cho_solve(Mfac, rhs)
            for _ in range(2):
                r = rhs - M @ x
                x = x + sla.cho_solve(Mfac, r)
            return x

        def newton(Rc):
            # A(W A*(dy) W) + F du = rp - A(Rc - W Rd W);  F^T dy = rf
            rhs_mats = [
                Rc_b - W @ R @ W for Rc_b, W, R in zip(Rc, Wb, Rd)
            ]
            h = rp - ops.apply_A(rhs_mats)
            if p.n_free:
                MinvF = solve_schur(p.F)
                Minvh = solve_schur(h)
                small = p.F.T @ MinvF
                du = np.linalg.solve(
                    small + 1e-14 * np.eye(p.n_free), p.F.T @ Minvh - rf
                )
                dy = Minvh - MinvF @ du
            else:
                du = np.zeros(0)
                dy = solve_schur(h)
            Atdy = ops.apply_At(dy)
            dZ = [R - A for R, A in zip(Rd, Atdy)]
            dX = [
                Rc_b - W @ dz @ W for Rc_b, W, dz in zip(Rc, Wb, dZ)
            ]
            dX = [0.5 * (D + D.T) for D in dX]
            dZ = [0.5 * (D + D.T) for D in dZ]
            return dX, du, dy, dZ

        # predictor (affine scaling)
        Rc_aff = [-X for X in Xb]
        dXa, dua, dya, dZa = newton(Rc_aff)
        ap = min([_chol_max_step(X, dX) for X, dX in zip(Xb, dXa)] + [1.0 / tau])
        ad = min([_chol_max_step(Z, dZ) for Z, dZ in zip(Zb, dZa)] + [1.0 / tau])
        ap, ad = min(1.0, tau * ap), min(1.0, tau * ad)
        gap_aff = sum(
            float(np.sum((X + ap * dX) * (Z + ad * dZ)))
            for X, dX, Z, dZ in zip(Xb, dXa, Zb, dZa)
        )
        sigma = min(1.0, max(0.0, (max(gap_aff, 0.0) / gap)) ** 3)
        # keep centering alive while still infeasible, so complementarity
        # cannot collapse ahead of feasibility
        infeasible_yet = max(prim_res, dual_res) > 10.0 * tol
        if infeasible_yet:
            sigma = max(sigma, 0.1)
            rp_raw = float(np.max(np.abs(rp))) if m else 0.0
            if mu < 0.1 * rp_raw:
                sigma = max(sigma, 0.9)  # complementarity outran feasibility

        # centering step with the predictor-derived sigma
        Rc = [sigma * mu * Zinv - X for X, Zinv in zip(Xb, Zinvb)]
        dX, du, dy, dZ = newton(Rc)
        ap = min([_chol_max_step(X, D) for X, D in zip(Xb, dX)] + [1.0 / tau])
        ad = min([_chol_max_step(Z, D) for Z, D in zip(Zb, dZ)] + [1.0 / tau])
        ap, ad = min(1.0, tau * ap), min(1.0, tau * ad)
        if infeasible_yet:
            ap = ad = min(ap, ad)
        ap = _backtrack_pd(Xb, dX, ap)
        ad = _backtrack_pd(Zb, dZ, ad)
        if ap <= 0.0 and ad <= 0.0:
            status = "max_iter"  # stalled: no PD-preserving step remains
            break

        Xb = [X + ap * D for X, D in zip(Xb, dX)]
        u = u + ap * du
        y = y + ad * dy
        Zb = [Z + ad * D for Z, D in zip(Zb, dZ)]

    rp = p.b - ops.apply_A(Xb) - (p.F @ u if p.n_free else 0.0)
    Aty = ops.apply_At(y)
    Rd = [C - Z - At for C, Z, At in zip(Cb, Zb, Aty)]
    rf = p.c_free - (p.F.T @ y) if p.n_free else np.zeros(0)
    gap = sum(float(np.sum(X * Z)) for X, Z in zip(Xb, Zb))
    prim_res = float(np.max(np.abs(rp))) / (1.0 + bnorm) if m else 0.0
    dual_res = max(
        [float(np.max(np.abs(R))) for R in Rd]
        + ([float(np.max(np.abs(rf)))] if p.n_free else [0.0])
    ) / (1.0 + cnorm)
    return SdpSolution(
        status=status,
        blocks=Xb,
        free=u,
        y=y,
        Z_blocks=Zb,
        iterations=it,
        primal_obj=pobj(),
        dual_obj=dobj(),
        gap=gap,
        primal_res=prim_res,
        dual_res=dual_res,
    )


# ---------------------------------------------------------------------------
# sparse text interchange format


def write_sparse_text(p: SdpProblem) -> str:
    lines = ["SDPSPARSE v1"]
    lines.append("blocks " + " ".join(str(s) for s in p.block_sizes))
    lines.append(f"free {p.n_free}")
    lines.append(f"rows {p.m}")
    for bi, C in enumerate(p.C_blocks):
        if C is None:
            continue
        C = np.asarray(C)
        n = p.block_sizes[bi]
        for i in range(n):
            for j in range(i, n):
                v = C[i, j] if i == j else C[i, j] * 2.0
                if v != 0.0:
                    lines.append(f"objblock {bi} {i} {j} {float(v)!r}")
    for k, v in enumerate(p.c_free):
        if v != 0.0:
            lines.append(f"objfree {k} {float(v)!r}")
    for bi, be in enumerate(p.blocks):
        for r, i, j, v in zip(be.rows, be.ii, be.jj, be.vv):
            lines.append(f"A {r} {bi} {i} {j} {float(v)!r}")
    if p.n_free:
        rows, cols = np.nonzero(p.F)
        for r, k in zip(rows, cols):
            lines.append(f"F {r} {k} {float(p.F[r, k])!r}")
    for r, v in enumerate(p.b):
        if v != 0.0:
            lines.append(f"b {r} {float(v)!r}")
    return "\n".join(lines) + "\n"


def read_sparse_text(text: str) -> SdpProblem:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "SDPSPARSE v1":
        raise SdpError("not a SDPSPARSE v1 stream")
    sizes: list = []
    n_free = 0
    m = 0
    body = []
    for ln in lines[1:]:
        tok = ln.split()
        if tok[0] == "blocks":
            sizes = [int(t) for t in tok[1:]]
        elif tok[0] == "free":
            n_free = int(tok[1])
        elif tok[0] == "rows":
            m = int(tok[1])
        else:
            body.append(tok)
    p = SdpProblem.empty(sizes, n_free, m)
    Cb: list = [None] * len(sizes)
    for tok in body:
        kind = tok[0]
        if kind == "A":
            r, bi, i, j = (int(t) for t in tok[1:5])
            p.blocks[bi].add(r, i, j, float(tok[5]))
        elif kind == "F":
            p.F[int(tok[1]), int(tok[2])] = float(tok[3])
        elif kind == "b":
            p.b[int(tok[1])] = float(tok[2])
        elif kind == "objfree":
            p.c_free[int(tok[1])] = float(tok[2])
        elif kind == "objblock":
            bi, i, j = int(tok[1]), int(tok[2]), int(tok[3])
            if Cb[bi] is None:
                Cb[bi] = np.zeros((sizes[bi], sizes[bi]))
            v = float(tok[4])
            if i == j:
                Cb[bi][i, i] = v
            else:
                Cb[bi][i, j] = Cb[bi][j, i] = v / 2.0
        else:
            raise SdpError(f"unknown record {kind!r}")
    p.C_blocks = Cb
    return p
