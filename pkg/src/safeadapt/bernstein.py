"""Bernstein-polynomial controller abstraction with certified error bounds.

Pipeline: partition the state box, build a degree-d Bernstein approximant of
the controller on each piece, bound the deviation on each piece, then
substitute the per-piece polynomial (plus an error disturbance channel e)
into the plant to obtain a per-partition polynomial system under the
augmented disturbance box [-eps, eps] x Omega.

Folding the approximation error into the control channel rather than the
external-disturbance channel is sound for any polynomial plant; the two are
equivalent when the plant is affine in u (true for both shipped benchmarks).
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .nnet import FeedForwardNet
from .poly import Box, Polynomial, lipschitz_bound_inf


def _worker_count() -> int:
    cap = os.environ.get("SAFEADAPT_THREADS")
    if cap:
        try:
            return max(1, int(cap))
        except ValueError:
            pass
    return min(4, os.cpu_count() or 1)


@dataclass
class BernsteinApprox:
    """Polynomial approximant of one controller component on one box."""

    box: Box
    degree: tuple
    poly: Polynomial
    eps: float  # certified sup-norm error bound on box

    def to_json_dict(self) -> dict:
        return {
            "box": self.box.to_json_dict(),
            "degree": list(self.degree),
            "poly": self.poly.to_json_dict(),
            "eps": self.eps,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "BernsteinApprox":
        return BernsteinApprox(
            Box.from_json_dict(d["box"]),
            tuple(d["degree"]),
            Polynomial.from_json_dict(d["poly"]),
            d["eps"],
        )


@dataclass
class PiecewiseApprox:
    """Partitioned approximation of a controller over the full state box."""

    pieces: list  # list[BernsteinApprox], one per partition box
    partition: list  # list[Box]
    eps_overall: float

    def __post_init__(self):
        if len(self.pieces) != len(self.partition):
            raise ValueError("pieces/partition length mismatch")

    def locate(self, x) -> int:
        """Index of the piece owning x; shared facets go to the lowest index."""
        x = np.asarray(x, dtype=float)
        for i, b in enumerate(self.partition):
            if b.contains(x, atol=0.0):
                return i
        raise ValueError(f"state {x} outside the partitioned region")

    def control(self, x) -> float:
        i = self.locate(x)
        return self.pieces[i].poly.eval(np.asarray(x, dtype=float))

    def to_json_dict(self) -> dict:
        return {
            "pieces": [p.to_json_dict() for p in self.pieces],
            "eps_overall": self.eps_overall,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "PiecewiseApprox":
        pieces = [BernsteinApprox.from_json_dict(p) for p in d["pieces"]]
        return PiecewiseApprox(pieces, [p.box for p in pieces], d["eps_overall"])

    def save(self, path: str):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @staticmethod
    def load(path: str) -> "PiecewiseApprox":
        with open(path) as fh:
            return PiecewiseApprox.from_json_dict(json.load(fh))


@dataclass
class HybridPolySystem:
    """Per-partition closed-loop dynamics with augmented bounded disturbance.

    Each piece maps (x, e, w) -> x' where e is the approximation-error
    channel on the control input and w the external disturbance.  Variable
    order in every piece polynomial: x_1..x_n, e, w_1..w_k.
    """

    pieces: list  # list[list[Polynomial]]: per partition, state-dim updates
    partition: list  # list[Box] over x
    state_box: Box  # X
    dist_box: Box  # [-eps, eps] x Omega, axes (e, w...)
    eps_overall: float
    n_state: int
    n_dist: int  # 1 + dim(Omega)

    def piece_for(self, x) -> int:
        x = np.asarray(x, dtype=float)
        for i, b in enumerate(self.partition):
            if b.contains(x):
                return i
        raise ValueError(f"state {x} outside X")


def _bernstein_basis_1d(d: int, a: int, nvars: int, var: int) -> Polynomial:
    """C(d,a) * y^a * (1-y)^(d-a) as a polynomial in variable ``var``."""
    y = Polynomial.variable(nvars, var)
    one_minus = Polynomial.constant(nvars, 1.0) - y
    return math.comb(d, a) * y.pow(a) * one_minus.pow(d - a)


def bernstein_of(
    fn: Callable[[np.ndarray], float],
    d: Sequence[int],
    box: Box,
) -> Polynomial:
    """Degree-d Bernstein approximant of fn on box, in original coordinates.

    fn receives a single point (1-D array) and returns a scalar.  The
    operator samples fn on the uniform (d_1+1) x ... x (d_n+1) grid of the
    box and weights with Bernstein basis polynomials of the unit cube, then
    maps back to the original coordinates.
    """
    d = tuple(int(x) for x in d)
    n = box.nvars
    if len(d) != n:
        raise ValueError(f"degree vector has {len(d)} entries, box has {n} axes")
    if any(di < 1 for di in d):
        raise ValueError("all degrees must be >= 1")

    # basis polynomials per axis, in unit-cube coordinates
    basis = [[_bernstein_basis_1d(d[i], a, n, i) for a in range(d[i] + 1)] for i in range(n)]

    widths = box.widths()
    result = Polynomial.zero(n)
    for idx in np.ndindex(*[di + 1 for di in d]):
        t = np.array([idx[i] / d[i] for i in range(n)])
        x = box.lo + widths * t
        val = float(fn(x))
        if not math.isfinite(val):
            raise ValueError(f"controller sample non-finite at {x}")
        term = Polynomial.constant(n, val)
        for i in range(n):
            term = term.mul(basis[i][idx[i]])
        result = result.add(term)

    # unit cube -> original coordinates: y_i = (x_i - lo_i) / width_i
    subs = []
    for i in range(n):
        coeffs = [0.0] * n
        w = widths[i] if widths[i] != 0 else 1.0
        coeffs[i] = 1.0 / w
        subs.append(Polynomial.affine(n, coeffs, -box.lo[i] / w))
    return result.compose(subs)


def error_bound(
    fn: Callable[[np.ndarray], np.ndarray],
    approx: Polynomial,
    box: Box,
    grid_n: int = 200,
    L_fn: float = 0.0,
) -> float:
    """Sound bound on sup |fn - approx| over box.

    Grid maximum of the deviation plus Lipschitz padding (L_fn + L_approx)*r
    where r is the half-spacing of the grid in inf-norm.  ``fn`` here takes a
    batch (N, n) and returns (N,) or (N, 1).  ``L_fn`` must be a valid
    inf-norm Lipschitz upper bound for fn on box.
    """
    if grid_n < 2:
        raise ValueError("grid_n must be >= 2")
    n = box.nvars
    axes = [np.linspace(box.lo[i], box.hi[i], grid_n) for i in range(n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])
    fv = np.asarray(fn(pts), dtype=float).reshape(-1)
    if not np.all(np.isfinite(fv)):
        raise ValueError("controller produced non-finite samples")
    av = approx.eval_batch(pts)
    grid_max = float(np.max(np.abs(fv - av)))
    r = float(np.max(box.widths() / (grid_n - 1))) / 2.0
    L_approx = lipschitz_bound_inf(approx, box)
    return grid_max + (L_fn + L_approx) * r


def partition(box: Box, counts: Sequence[int]) -> list:
    """Axis-aligned grid partition of box into prod(counts) sub-boxes.

    Boxes are ordered in C order over the axis indices, which fixes the
    lowest-index ownership rule for shared facets.
    """
    counts = tuple(int(c) for c in counts)
    if len(counts) != box.nvars:
        raise ValueError("counts length must match box dimension")
    if any(c < 1 for c in counts):
        raise ValueError("counts must be >= 1")
    edges = [np.linspace(box.lo[i], box.hi[i], counts[i] + 1) for i in range(box.nvars)]
    out = []
    for idx in np.ndindex(*counts):
        lo = [edges[i][idx[i]] for i in range(box.nvars)]
        hi = [edges[i][idx[i] + 1] for i in range(box.nvars)]
        out.append(Box(lo, hi))
    return out


def piecewise_approx(
    ctrl,
    box: Box,
    counts: Sequence[int],
    d: Sequence[int],
    grid_n: int = 200,
) -> PiecewiseApprox:
    """Per-partition approximation of a controller over box.

    ``ctrl`` is a FeedForwardNet (scalar output) or a Polynomial.  Polynomial
    controllers are carried over exactly on each piece with eps = 0; sampled
    Bernstein approximation would not reproduce degree >= 2 polynomials.
    """
    boxes = partition(box, counts)

    if isinstance(ctrl, Polynomial):
        pieces = [
            BernsteinApprox(b, tuple(int(x) for x in d), ctrl, 0.0) for b in boxes
        ]
        return PiecewiseApprox(pieces, boxes, 0.0)

    if not isinstance(ctrl, FeedForwardNet):
        raise TypeError(f"unsupported controller type {type(ctrl)!r}")
    if ctrl.output_dim != 1:
        raise ValueError("only scalar-control systems are supported")

    L = ctrl.lipschitz_upper("inf")

    def build(b: Box) -> BernsteinApprox:
        p = bernstein_of(lambda x: float(ctrl.forward(x)[0]), d, b)
        eps = error_bound(
            lambda X: ctrl.forward_batch(X)[:, 0], p, b, grid_n=grid_n, L_fn=L
        )
        return BernsteinApprox(b, tuple(int(x) for x in d), p, eps)

    workers = _worker_count()
    if workers > 1 and len(boxes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pieces = list(pool.map(build, boxes))
    else:
        pieces = [build(b) for b in boxes]
    eps_overall = max(p.eps for p in pieces)
    return PiecewiseApprox(pieces, boxes, eps_overall)


def hybridize(
    f: Sequence[Polynomial],
    pw: PiecewiseApprox,
    omega: Box,
    state_box: Box,
    eps_override: float | None = None,
) -> HybridPolySystem:
    """Substitute u := B_p(x) + e into the plant, piece by piece.

    ``f`` is the plant update in variables (x_1..x_n, u, w_1..w_k).  The
    result's pieces are in variables (x_1..x_n, e, w_1..w_k); the e slot
    replaces u and ranges over [-eps, eps].
    """
    n = state_box.nvars
    k = omega.nvars
    nv = n + 1 + k
    for fi in f:
        if fi.nvars != nv:
            raise ValueError(
                f"plant component has {fi.nvars} variables, expected {nv} (x,u,w)"
            )
    if len(f) != n:
        raise ValueError("plant must have one update per state variable")
    eps = pw.eps_overall if eps_override is None else float(eps_override)

    pieces = []
    for ap in pw.pieces:
        if ap.poly.nvars != n:
            raise ValueError("approximant variable count must equal state dimension")
        # embed B_p(x) into (x, e, w) variables and add the e channel
        u_sub = _embed(ap.poly, nv).add(Polynomial.variable(nv, n))
        subs = [Polynomial.variable(nv, i) for i in range(n)]
        subs.append(u_sub)
        subs.extend(Polynomial.variable(nv, n + 1 + j) for j in range(k))
        pieces.append([fi.compose(subs) for fi in f])

    dist_box = Box(np.concatenate([[-eps], omega.lo]), np.concatenate([[eps], omega.hi]))
    return HybridPolySystem(
        pieces=pieces,
        partition=list(pw.partition),
        state_box=state_box,
        dist_box=dist_box,
        eps_overall=eps,
        n_state=n,
        n_dist=1 + k,
    )


def _embed(p: Polynomial, nvars: int) -> Polynomial:
    """Reinterpret p's variables as the first p.nvars of a larger space."""
    if nvars < p.nvars:
        raise ValueError("cannot embed into fewer variables")
    return Polynomial(
        nvars, {m + (0,) * (nvars - p.nvars): c for m, c in p.terms.items()}
    )
