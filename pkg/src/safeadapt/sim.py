"""Discrete-time plant simulation, the two shipped benchmarks, the
multi-method evaluation protocol, and the disturbance-scaling /
outside-the-safe-space studies.

Benchmarks:
  * Van der Pol oscillator, dt 0.05, disturbance on the x2 channel in
    [-0.05, 0.05], safe box [-2, 2]^2, two saturated neural controllers.
  * Adaptive cruise control (gap s, ego speed v), dt 0.1, drag k = 0.2,
    front-vehicle speed 40 + w with w in [-4, 4], safe box
    [120, 180] x [25, 55]; an LQR controller about (150, 40) and a
    saturated-proportional neural controller.

Energy bookkeeping follows the 1-norm of the actuation summed over steps.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .nnet import FeedForwardNet
from .poly import Box, Polynomial

OSC_DELTA = 0.05
ACC_DELTA = 0.1
ACC_DRAG = 0.2
ACC_EQUILIBRIUM = (150.0, 40.0)


@dataclass
class PlantModel:
    """Polynomial plant x(t+1) = f(x, u, w) with box constraints."""

    name: str
    f: list  # list[Polynomial] in variables (x_1..x_n, u_1..u_m, w_1..w_k)
    delta: float
    X: Box
    Omega: Box
    U: Box  # recorded for documentation; not enforced in simulation
    n_state: int
    n_ctrl: int
    n_dist: int

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("sampling period must be positive")
        nv = self.n_state + self.n_ctrl + self.n_dist
        for fi in self.f:
            if fi.nvars != nv:
                raise ValueError("plant polynomial variable count mismatch")
        if len(self.f) != self.n_state:
            raise ValueError("need one update polynomial per state")

    def step(self, x, u, w) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        u = np.atleast_1d(np.asarray(u, dtype=float))
        w = np.atleast_1d(np.asarray(w, dtype=float))
        if len(x) != self.n_state or len(u) != self.n_ctrl or len(w) != self.n_dist:
            raise ValueError("step dimension mismatch")
        args = np.concatenate([x, u, w])[None, :]
        out = np.array([fi.eval_batch(args)[0] for fi in self.f])
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"non-finite state after step from {x}")
        return out

    def step_batch(self, X: np.ndarray, U: np.ndarray, W: np.ndarray) -> np.ndarray:
        args = np.column_stack([X, U, W])
        return np.column_stack([fi.eval_batch(args) for fi in self.f])

    def scaled_disturbance(self, factor: float) -> "PlantModel":
        c = self.Omega.center()
        h = self.Omega.halfwidth() * factor
        return PlantModel(
            name=f"{self.name}[omega x{factor:g}]",
            f=self.f,
            delta=self.delta,
            X=self.X,
            Omega=Box(c - h, c + h),
            U=self.U,
            n_state=self.n_state,
            n_ctrl=self.n_ctrl,
            n_dist=self.n_dist,
        )


def oscillator() -> PlantModel:
    """Van der Pol oscillator, forward-Euler discretized."""
    d = OSC_DELTA
    # variables: x1, x2, u, w
    x1 = Polynomial.variable(4, 0)
    x2 = Polynomial.variable(4, 1)
    u = Polynomial.variable(4, 2)
    w = Polynomial.variable(4, 3)
    f1 = x1 + d * x2
    f2 = x2 + d * ((1.0 - x1 * x1) * x2 - x1 + u) + w
    return PlantModel(
        name="oscillator",
        f=[f1, f2],
        delta=d,
        X=Box([-2.0, -2.0], [2.0, 2.0]),
        Omega=Box([-0.05], [0.05]),
        U=Box([-1.0], [1.0]),
        n_state=2,
        n_ctrl=1,
        n_dist=1,
    )


def acc() -> PlantModel:
    """Two-vehicle adaptive cruise control; state (gap s, ego speed v)."""
    d, k = ACC_DELTA, ACC_DRAG
    # variables: s, v, u, w  (front speed is 40 + w)
    s = Polynomial.variable(4, 0)
    v = Polynomial.variable(4, 1)
    u = Polynomial.variable(4, 2)
    w = Polynomial.variable(4, 3)
    f1 = s - (v - (40.0 + w)) * d
    f2 = v - (k * v - u) * d
    return PlantModel(
        name="acc",
        f=[f1, f2],
        delta=d,
        X=Box([120.0, 25.0], [180.0, 55.0]),
        Omega=Box([-4.0], [4.0]),
        U=Box([-20.0, ], [36.0]),
        n_state=2,
        n_ctrl=1,
        n_dist=1,
    )


# ---------------------------------------------------------------------------
# controllers


def control_value(ctrl, x) -> np.ndarray:
    if isinstance(ctrl, FeedForwardNet):
        return ctrl.forward(np.asarray(x, dtype=float))
    if isinstance(ctrl, Polynomial):
        return np.array([ctrl.eval(np.asarray(x, dtype=float))])
    raise TypeError(f"unsupported controller type {type(ctrl)!r}")


def control_batch(ctrl, X: np.ndarray) -> np.ndarray:
    if isinstance(ctrl, FeedForwardNet):
        return ctrl.forward_batch(X)
    if isinstance(ctrl, Polynomial):
        return ctrl.eval_batch(X)[:, None]
    raise TypeError(f"unsupported controller type {type(ctrl)!r}")


def riccati_gain(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray,
                 iters: int = 10_000, tol: float = 1e-12) -> np.ndarray:
    """Discrete-time LQR gain via fixed-point Riccati iteration."""
    P = Q.copy()
    for _ in range(iters):
        BtPB = R + B.T @ P @ B
        K = np.linalg.solve(BtPB, B.T @ P @ A)
        Pn = Q + A.T @ P @ (A - B @ K)
        if np.max(np.abs(Pn - P)) < tol:
            P = Pn
            break
        P = Pn
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def acc_lqr_controller() -> Polynomial:
    """LQR about (150, 40), state weight 2, control weight 0.4, as an affine
    polynomial u(s, v)."""
    d, k = ACC_DELTA, ACC_DRAG
    A = np.array([[1.0, -d], [0.0, 1.0 - k * d]])
    B = np.array([[0.0], [d]])
    K = riccati_gain(A, B, 2.0 * np.eye(2), 0.4 * np.eye(1))
    s0, v0 = ACC_EQUILIBRIUM
    u_eq = k * v0
    # u = u_eq - K1 (s - s0) - K2 (v - v0)
    return Polynomial.affine(
        2, [-K[0, 0], -K[0, 1]], u_eq + K[0, 0] * s0 + K[0, 1] * v0
    )


# demo-controller target laws (imitated by the shipped neural controllers)


def oscillator_target(kind: str) -> Callable[[np.ndarray], np.ndarray]:
    """Saturated damping laws for the oscillator.

    'gentle' uses just enough linear damping to be cheap; 'aggressive' adds
    heavy rate feedback plus x1^2 x2 shaping, expensive but wide-ranging.
    """
    if kind == "gentle":
        a1, a2, g = 0.25, 1.0, 0.55
    elif kind == "aggressive":
        a1, a2, g = 0.85, 2.6, 1.5
    else:
        raise ValueError(f"unknown oscillator target {kind!r}")

    def law(X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        z = -(a1 * X[:, 0] + a2 * X[:, 1] + g * X[:, 0] ** 2 * X[:, 1])
        return np.tanh(z)

    return law


def acc_nn_target() -> Callable[[np.ndarray], np.ndarray]:
    """Saturated proportional law toward the (150, 40) equilibrium."""
    sat = 18.0

    def law(X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        z = 0.55 * (X[:, 0] - 150.0) + 2.4 * (40.0 - X[:, 1])
        return 8.0 + sat * np.tanh(z / sat)

    return law


# ---------------------------------------------------------------------------
# methods (uniform act interface used by episodes and the evaluator)


class FixedMethod:
    """Always apply one controller; records choice index for traces."""

    def __init__(self, ctrl, index: int = 0):
        self.ctrl = ctrl
        self.index = index

    def act_batch(self, X: np.ndarray, rng: np.random.Generator):
        U = control_batch(self.ctrl, X)
        return np.full(len(X), self.index, dtype=int), U


class RandomMethod:
    """Uniform controller choice each step; no guard."""

    def __init__(self, controllers: Sequence):
        self.controllers = list(controllers)

    def act_batch(self, X: np.ndarray, rng: np.random.Generator):
        n = len(X)
        choices = rng.integers(0, len(self.controllers), size=n)
        U = np.zeros((n, 1))
        for i, ctrl in enumerate(self.controllers):
            mask = choices == i
            if np.any(mask):
                U[mask] = control_batch(ctrl, X[mask])
        return choices.astype(int), U


@dataclass
class SimTrace:
    states: np.ndarray  # (T+1, n)
    choices: np.ndarray  # (T,)
    controls: np.ndarray  # (T, m)
    violation_step: int | None
    entered_safe_step: int | None = None  # first step inside the joint space

    @property
    def energy(self) -> float:
        return float(np.sum(np.abs(self.controls)))

    def energy_cumulative(self) -> np.ndarray:
        return np.cumsum(np.sum(np.abs(self.controls), axis=1))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        n = self.states.shape[1]
        m = self.controls.shape[1] if len(self.controls) else 1
        w.writerow(
            ["t"] + [f"x{i+1}" for i in range(n)] + ["choice"]
            + [f"u{i+1}" for i in range(m)] + ["energy_cum"]
        )
        ecum = self.energy_cumulative()
        for t in range(len(self.states)):
            row = [t] + [repr(v) for v in self.states[t]]
            if t < len(self.choices):
                row += [int(self.choices[t])]
                row += [repr(v) for v in self.controls[t]]
                row += [repr(float(ecum[t]))]
            else:
                row += ["", *[""] * m, ""]
            w.writerow(row)
        return buf.getvalue()


def run_episode(plant: PlantModel, method, x0, T: int, rng: np.random.Generator) -> SimTrace:
    """Simulate T steps from x0; disturbances uniform over plant.Omega.

    Violations are recorded (first offending step), never raised, and the
    episode continues so energies stay comparable across methods.
    """
    x = np.asarray(x0, dtype=float).copy()
    states = [x.copy()]
    choices, controls = [], []
    violation = None
    for t in range(T):
        a, u = method.act_batch(x[None, :], rng)
        w = rng.uniform(plant.Omega.lo, plant.Omega.hi)
        x = plant.step(x, u[0], w)
        states.append(x.copy())
        choices.append(a[0])
        controls.append(u[0])
        if violation is None and not plant.X.contains(x):
            violation = t + 1
    return SimTrace(
        states=np.array(states),
        choices=np.array(choices, dtype=int),
        controls=np.array(controls) if controls else np.zeros((0, plant.n_ctrl)),
        violation_step=violation,
    )


@dataclass
class EvalReport:
    plant: str
    n_cases: int
    horizon: int
    seed: int
    rows: list  # list of dicts: method, safe_rate, mean_energy

    def to_json_dict(self) -> dict:
        return {
            "plant": self.plant,
            "n_cases": self.n_cases,
            "horizon": self.horizon,
            "seed": self.seed,
            "rows": self.rows,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["method", "safe_rate_pct", "mean_energy", "n_cases", "T", "seed"])
        for r in self.rows:
            w.writerow(
                [r["method"], repr(r["safe_rate"]), repr(r["mean_energy"]),
                 self.n_cases, self.horizon, self.seed]
            )
        return buf.getvalue()

    def row(self, method: str) -> dict:
        for r in self.rows:
            if r["method"] == method:
                return r
        raise KeyError(method)


def evaluate(
    plant: PlantModel,
    methods: Mapping[str, object],
    x0s: np.ndarray,
    T: int,
    seed: int,
) -> EvalReport:
    """Run every method from the same initial states under the same
    disturbance sequences (common random numbers); report per-method safe
    control rate and mean energy.
    """
    x0s = np.asarray(x0s, dtype=float)
    n_cases = len(x0s)
    root = np.random.default_rng(seed)
    # one fixed disturbance tape shared by all methods
    u_tape = root.random(size=(n_cases, T, plant.n_dist))
    w_tape = plant.Omega.lo + u_tape * plant.Omega.widths()

    rows = []
    for mi, (name, method) in enumerate(methods.items()):
        # method-internal randomness is separate from the shared tape
        mrng = np.random.default_rng((seed, 1000 + mi))
        X = x0s.copy()
        violated = np.zeros(n_cases, dtype=bool)
        energy = np.zeros(n_cases)
        for t in range(T):
            _a, U = method.act_batch(X, mrng)
            energy += np.sum(np.abs(U), axis=1)
            X = plant.step_batch(X, U, w_tape[:, t, :])
            violated |= ~plant.X.contains_batch(X)
        rows.append(
            {
                "method": name,
                "safe_rate": 100.0 * float(np.mean(~violated)),
                "mean_energy": float(np.mean(energy)),
            }
        )
    return EvalReport(plant.name, n_cases, T, seed, rows)


def disturbance_scale_study(
    plant: PlantModel,
    methods: Mapping[str, object],
    x0s: np.ndarray,
    T: int,
    seed: int,
    factors: Sequence[float] = (2.0, 4.0),
) -> dict:
    """Re-run the evaluation with the disturbance box scaled; certificates
    and policies are deliberately left untouched."""
    out = {}
    for factor in factors:
        if factor < 1.0:
            raise ValueError("scale factors must be >= 1")
        scaled = plant.scaled_disturbance(factor)
        out[factor] = evaluate(scaled, methods, x0s, T, seed)
    return out


def outside_space_study(
    plant: PlantModel,
    methods: Mapping[str, object],
    x0,
    T: int,
    seed: int,
    in_joint_space: Callable[[np.ndarray], bool],
) -> dict:
    """Run each method from an initial state outside the joint safe space.

    Reports, per method, the trace, the first step entering the joint space,
    and whether safety held from that entry onward.
    """
    results = {}
    for mi, (name, method) in enumerate(sorted(methods.items())):
        rng = np.random.default_rng((seed, mi))
        trace = run_episode(plant, method, x0, T, rng)
        entry = None
        for t, x in enumerate(trace.states):
            if in_joint_space(x):
                entry = t
                break
        trace.entered_safe_step = entry
        safe_after = None
        if entry is not None:
            tail = trace.states[entry:]
            safe_after = bool(np.all(plant.X.contains_batch(tail)))
        results[name] = {
            "trace": trace,
            "entered_step": entry,
            "safe_after_entry": safe_after,
            "violation_step": trace.violation_step,
        }
    return results
