"""Per-controller robust-invariant pipeline: reachable-set bounding, ball
selection, SOS compile + SDP solve, certificate assembly, and an
independent sampling falsifier that gates acceptance.

Certification runs in normalized coordinates (the safe box mapped to
[-1, 1]^n) for numerical conditioning; certificates carry the affine
transform and answer queries in original coordinates.  The falsifier
always exercises the TRUE controller, not its polynomial abstraction, so
it checks the entire chain end to end.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import sdp as sdp_mod
from .bernstein import HybridPolySystem, PiecewiseApprox, hybridize, piecewise_approx
from .nnet import FeedForwardNet
from .poly import Box, Interval, Polynomial, interval_range
from .sos import (
    BallConstraint,
    SosExtractionError,
    SosOptions,
    build_invariant_program,
    extract_solution,
    to_sdp,
)


@dataclass
class ApproxConfig:
    counts: tuple = (1, 1)
    degree: tuple = (3, 3)
    grid_n: int = 200


@dataclass
class PipelineConfig:
    approx: ApproxConfig = field(default_factory=ApproxConfig)
    sos: SosOptions = field(default_factory=SosOptions)
    sdp_tol: float = 1e-7
    sdp_max_iter: int = 200
    ball_margin: float = 0.05
    falsify_samples: int = 100_000
    omega_grid: int = 9
    empty_probes: int = 10_000
    seed: int = 0
    eps_override: float | None = None


@dataclass
class ReachBound:
    box: Box  # contains the one-step image of X and X itself


def one_step_reach(sys: HybridPolySystem) -> ReachBound:
    """Interval-arithmetic bound of each piece over its partition box and
    the disturbance box, unioned with the state box."""
    lo = sys.state_box.lo.copy()
    hi = sys.state_box.hi.copy()
    for piece, pbox in zip(sys.pieces, sys.partition):
        domain = Box(
            np.concatenate([pbox.lo, sys.dist_box.lo]),
            np.concatenate([pbox.hi, sys.dist_box.hi]),
        )
        for i, fp in enumerate(piece):
            iv = interval_range(fp, domain)
            lo[i] = min(lo[i], iv.lo)
            hi[i] = max(hi[i], iv.hi)
    return ReachBound(Box(lo, hi))


def select_ball(rb: ReachBound, margin: float = 0.05) -> BallConstraint:
    if margin < 0:
        raise ValueError("margin must be >= 0")
    corners = rb.box.corners()
    H = float(np.max(np.linalg.norm(corners, axis=1)))
    return BallConstraint((1.0 + margin) * H)


@dataclass
class VerificationReport:
    samples: int
    violations: int
    worst_next_v: float  # max v at successor states (should stay <= 0)
    worst_x_excess: float  # max violation of the safe box at successors
    vacuous: bool = False
    counterexample: list | None = None

    def to_json_dict(self) -> dict:
        return {
            "samples": self.samples,
            "violations": self.violations,
            "worst_next_v": self.worst_next_v,
            "worst_x_excess": self.worst_x_excess,
            "vacuous": self.vacuous,
            "counterexample": self.counterexample,
        }


@dataclass
class InvariantCertificate:
    controller_id: str
    v: Polynomial  # in normalized coordinates
    H: float
    center: np.ndarray
    halfwidth: np.ndarray
    partition: list  # list[Box] in original coordinates
    eps_pieces: list
    eps_overall: float
    options: dict
    diagnostics: dict
    report: VerificationReport | None = None
    empty: bool = False

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.center) / self.halfwidth

    def contains(self, x) -> bool:
        z = self.normalize(x)
        if float(np.dot(z, z)) > self.H * self.H:
            return False
        return self.v.eval(z) <= 0.0

    def contains_batch(self, pts: np.ndarray) -> np.ndarray:
        Z = (np.asarray(pts, dtype=float) - self.center) / self.halfwidth
        ok = np.sum(Z * Z, axis=1) <= self.H * self.H
        ok &= self.v.eval_batch(Z) <= 0.0
        return ok

    def v_original_coords(self) -> Polynomial:
        n = self.v.nvars
        subs = []
        for i in range(n):
            coeffs = [0.0] * n
            coeffs[i] = 1.0 / self.halfwidth[i]
            subs.append(
                Polynomial.affine(n, coeffs, -self.center[i] / self.halfwidth[i])
            )
        return self.v.compose(subs)

    def to_json_dict(self) -> dict:
        return {
            "controller_id": self.controller_id,
            "v": self.v.to_json_dict(),
            "v_original": self.v_original_coords().to_json_dict(),
            "H": self.H,
            "center": list(self.center),
            "halfwidth": list(self.halfwidth),
            "partition": [b.to_json_dict() for b in self.partition],
            "eps_pieces": self.eps_pieces,
            "eps_overall": self.eps_overall,
            "options": self.options,
            "diagnostics": self.diagnostics,
            "report": self.report.to_json_dict() if self.report else None,
            "empty": self.empty,
        }

    def save(self, path: str):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @staticmethod
    def from_json_dict(d: dict) -> "InvariantCertificate":
        rep = d.get("report")
        report = None
        if rep is not None:
            report = VerificationReport(
                samples=rep["samples"],
                violations=rep["violations"],
                worst_next_v=rep["worst_next_v"],
                worst_x_excess=rep["worst_x_excess"],
                vacuous=rep.get("vacuous", False),
                counterexample=rep.get("counterexample"),
            )
        return InvariantCertificate(
            controller_id=d["controller_id"],
            v=Polynomial.from_json_dict(d["v"]),
            H=d["H"],
            center=np.asarray(d["center"], dtype=float),
            halfwidth=np.asarray(d["halfwidth"], dtype=float),
            partition=[Box.from_json_dict(b) for b in d["partition"]],
            eps_pieces=list(d["eps_pieces"]),
            eps_overall=d["eps_overall"],
            options=d.get("options", {}),
            diagnostics=d.get("diagnostics", {}),
            report=report,
            empty=d.get("empty", False),
        )

    @staticmethod
    def load(path: str) -> "InvariantCertificate":
        with open(path) as fh:
            return InvariantCertificate.from_json_dict(json.load(fh))


@dataclass
class CertificateResult:
    status: str  # ok | empty | rejected | solver_failed
    certificate: InvariantCertificate | None
    detail: str = ""
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def contains(cert: InvariantCertificate, x) -> bool:
    return cert.contains(x)


def _normalize_plant(plant):
    c = plant.X.center()
    h = plant.X.halfwidth()
    n = plant.n_state
    nv = n + plant.n_ctrl + plant.n_dist
    # f_tilde_i = (f_i(c + h * x, u, w) - c_i) / h_i
    subs = []
    for i in range(n):
        coeffs = [0.0] * nv
        coeffs[i] = h[i]
        subs.append(Polynomial.affine(nv, coeffs, c[i]))
    for j in range(n, nv):
        subs.append(Polynomial.variable(nv, j))
    f_norm = [
        (fi.compose(subs) - c[i]).scale(1.0 / h[i]) for i, fi in enumerate(plant.f)
    ]
    X_norm = Box([-1.0] * n, [1.0] * n)
    return f_norm, X_norm, c, h


def _normalize_controller(ctrl, c, h):
    if isinstance(ctrl, FeedForwardNet):
        return ctrl.precompose_affine(h, c)
    if isinstance(ctrl, Polynomial):
        n = ctrl.nvars
        subs = []
        for i in range(n):
            coeffs = [0.0] * n
            coeffs[i] = h[i]
            subs.append(Polynomial.affine(n, coeffs, c[i]))
        return ctrl.compose(subs)
    raise TypeError(f"unsupported controller type {type(ctrl)!r}")


def _denormalize_box(b: Box, c, h) -> Box:
    return Box(c + h * b.lo, c + h * b.hi)


def compute_invariant(
    plant,
    controller,
    cfg: PipelineConfig,
    controller_id: str = "controller",
) -> CertificateResult:
    """Full pipeline; returns a certificate only if independent
    falsification finds zero violations.

    An infeasible SDP or an everywhere-positive v yields an explicit
    'empty' result; falsification failure yields 'rejected' with a
    counterexample attached.
    """
    if plant.n_ctrl != 1:
        raise ValueError("only scalar-control plants are supported")
    f_norm, X_norm, c, h = _normalize_plant(plant)
    ctrl_norm = _normalize_controller(controller, c, h)

    pw = piecewise_approx(
        ctrl_norm, X_norm, cfg.approx.counts, cfg.approx.degree, cfg.approx.grid_n
    )
    sys = hybridize(f_norm, pw, plant.Omega, X_norm, eps_override=cfg.eps_override)
    rb = one_step_reach(sys)
    ball = select_ball(rb, cfg.ball_margin)
    prog = build_invariant_program(sys, X_norm.face_constraints(), ball, cfg.sos)
    problem = to_sdp(prog)
    sol = sdp_mod.solve(problem, tol=cfg.sdp_tol, max_iter=cfg.sdp_max_iter)

    diag = {
        "sdp": sol.summary_dict(),
        "ball_H": ball.H,
        "eps_overall": sys.eps_overall,
        "n_rows": problem.m,
        "block_sizes": problem.block_sizes,
    }
    if sol.status == "infeasible":
        return CertificateResult("empty", None, "SDP reported infeasibility", diag)
    if sol.status != "optimal":
        return CertificateResult(
            "solver_failed", None, f"SDP status {sol.status}", diag
        )
    try:
        info = extract_solution(prog, sol)
    except SosExtractionError as exc:
        return CertificateResult("rejected", None, str(exc), diag)
    diag.update(info.diagnostics())

    cert = InvariantCertificate(
        controller_id=controller_id,
        v=info.v,
        H=ball.H,
        center=c,
        halfwidth=h,
        partition=[_denormalize_box(b, c, h) for b in pw.partition],
        eps_pieces=[p.eps for p in pw.pieces],
        eps_overall=sys.eps_overall,
        options={
            "deg_v": cfg.sos.deg_v,
            "deg_mult": cfg.sos.deg_mult,
            "lam": cfg.sos.lam,
            "margin": cfg.sos.margin,
            "counts": list(cfg.approx.counts),
            "degree": list(cfg.approx.degree),
            "grid_n": cfg.approx.grid_n,
            "ball_margin": cfg.ball_margin,
            "eps_override": cfg.eps_override,
        },
        diagnostics=diag,
    )

    # empty-set probe on the original safe box
    rng = np.random.default_rng(cfg.seed)
    probes = plant.X.sample(rng, cfg.empty_probes)
    if not bool(np.any(cert.contains_batch(probes))):
        cert.empty = True
        cert.report = VerificationReport(0, 0, -math.inf, -math.inf, vacuous=True)
        return CertificateResult("empty", cert, "level set empty on probes", diag)

    report = falsify(
        cert, plant, controller,
        n_samples=cfg.falsify_samples,
        omega_grid=cfg.omega_grid,
        seed=cfg.seed + 1,
    )
    cert.report = report
    if report.violations > 0:
        return CertificateResult(
            "rejected",
            None,
            f"falsification found {report.violations} violations "
            f"(worst next-v {report.worst_next_v:.3e}, "
            f"worst X excess {report.worst_x_excess:.3e})",
            {**diag, "counterexample": report.counterexample},
        )
    return CertificateResult("ok", cert, "", diag)


def falsify(
    cert: InvariantCertificate,
    plant,
    true_controller,
    n_samples: int = 100_000,
    omega_grid: int = 9,
    seed: int = 0,
) -> VerificationReport:
    """Sampling check of one-step invariance under the true controller.

    Rejection-samples states inside the certificate, steps each through
    every point of a per-axis disturbance grid (grid endpoints are the
    extremes of Omega), and requires the successor to stay inside the
    certificate and the safe box.  Report-only; never raises.
    """
    from .sim import control_batch

    rng = np.random.default_rng(seed)
    accepted = []
    total = 0
    max_draws = 200
    for _ in range(max_draws):
        cand = plant.X.sample(rng, max(1024, n_samples // 8))
        mask = cert.contains_batch(cand)
        if np.any(mask):
            accepted.append(cand[mask])
            total += int(np.sum(mask))
        if total >= n_samples:
            break
    if total == 0:
        return VerificationReport(0, 0, -math.inf, -math.inf, vacuous=True)
    X = np.concatenate(accepted, axis=0)[:n_samples]

    axes = [
        np.linspace(plant.Omega.lo[k], plant.Omega.hi[k], omega_grid)
        for k in range(plant.n_dist)
    ]
    U = control_batch(true_controller, X)
    worst_v = -math.inf
    worst_excess = -math.inf
    violations = 0
    counterexample = None
    for wpt in itertools.product(*axes):
        W = np.tile(np.asarray(wpt), (len(X), 1))
        nxt = plant.step_batch(X, U, W)
        Z = (nxt - cert.center) / cert.halfwidth
        vvals = cert.v.eval_batch(Z)
        in_ball = np.sum(Z * Z, axis=1) <= cert.H * cert.H
        inside_cert = (vvals <= 0.0) & in_ball
        excess = np.maximum(
            np.max(plant.X.lo - nxt, axis=1), np.max(nxt - plant.X.hi, axis=1)
        )
        in_X = excess <= 0.0
        bad = ~(inside_cert & in_X)
        worst_v = max(worst_v, float(np.max(vvals)))
        worst_excess = max(worst_excess, float(np.max(excess)))
        nbad = int(np.sum(bad))
        if nbad and counterexample is None:
            idx = int(np.argmax(bad))
            counterexample = [list(X[idx]), list(np.asarray(wpt)), list(nxt[idx])]
        violations += nbad
    return VerificationReport(
        samples=len(X),
        violations=violations,
        worst_next_v=worst_v,
        worst_x_excess=worst_excess,
        counterexample=counterexample,
    )


def sample_union(
    certs: Sequence[InvariantCertificate],
    X: Box,
    n: int,
    rng: np.random.Generator,
    max_batches: int = 400,
) -> np.ndarray:
    """Uniform rejection sampling over the union of certificate sets."""
    out = []
    got = 0
    for _ in range(max_batches):
        cand = X.sample(rng, max(1024, n))
        mask = np.zeros(len(cand), dtype=bool)
        for cert in certs:
            mask |= cert.contains_batch(cand)
        if np.any(mask):
            out.append(cand[mask])
            got += int(np.sum(mask))
        if got >= n:
            break
    if got < n:
        raise RuntimeError(
            f"could not draw {n} states from the joint safe space "
            f"({got} after {max_batches} batches)"
        )
    return np.concatenate(out, axis=0)[:n]
