import math

import numpy as np
import pytest

from safeadapt.bernstein import (
    BernsteinApprox,
    PiecewiseApprox,
    bernstein_of,
    error_bound,
    hybridize,
    partition,
    piecewise_approx,
)
from safeadapt.nnet import FeedForwardNet, init_net
from safeadapt.poly import Box, Polynomial


def tanh_net(seed=0):
    rng = np.random.default_rng(seed)
    return init_net(2, (8, 8), 1, rng, hidden_act="tanh", output_act="tanh")


class TestBernsteinOperator:
    def test_reproduces_constant(self):
        p = bernstein_of(lambda x: 5.0, (3, 2), Box([-1.0, 0.0], [1.0, 2.0]))
        assert (p - 5.0).max_abs_coeff() < 1e-10

    def test_reproduces_affine(self):
        p = bernstein_of(lambda x: 2.0 * x[0] + 1.0, (1,), Box([0.0], [1.0]))
        expected = Polynomial(1, {(1,): 2.0, (0,): 1.0})
        assert (p - expected).max_abs_coeff() < 1e-10

    def test_quadratic_not_reproduced(self):
        # oracle: sum_a f(a/2) C(2,a) x^a (1-x)^(2-a) for f = x^2 expands to
        # 2*(1/4)*x(1-x) + x^2 = x/2 + x^2/2
        p = bernstein_of(lambda x: x[0] ** 2, (2,), Box([0.0], [1.0]))
        assert p.coefficient((1,)) == pytest.approx(0.5, abs=1e-12)
        assert p.coefficient((2,)) == pytest.approx(0.5, abs=1e-12)

    def test_affine_exact_general_box(self):
        box = Box([-2.0, 1.0], [3.0, 4.0])
        p = bernstein_of(lambda x: -0.5 * x[0] + 2.0 * x[1] - 1.0, (3, 3), box)
        expected = Polynomial.affine(2, [-0.5, 2.0], -1.0)
        assert (p - expected).max_abs_coeff() < 1e-9

    def test_degree_bounds(self):
        p = bernstein_of(lambda x: math.sin(x[0]) * x[1], (3, 2), Box([0, 0], [1, 1]))
        pvd = p.per_var_degree()
        assert pvd[0] <= 3 and pvd[1] <= 2

    def test_bad_degree(self):
        with pytest.raises(ValueError):
            bernstein_of(lambda x: 0.0, (0,), Box([0.0], [1.0]))


class TestErrorBound:
    def test_polynomial_self_bound_shrinks(self):
        box = Box([-1.0], [1.0])
        p = Polynomial(1, {(2,): 1.0})
        coarse = error_bound(lambda X: X[:, 0] ** 2, p, box, grid_n=10, L_fn=2.0)
        fine = error_bound(lambda X: X[:, 0] ** 2, p, box, grid_n=400, L_fn=2.0)
        assert fine < coarse
        assert fine < 0.02

    def test_affine_bound(self):
        box = Box([0.0], [1.0])
        target = lambda X: 3.0 * X[:, 0] + 1.0
        p = bernstein_of(lambda x: 3.0 * x[0] + 1.0, (1,), box)
        eps = error_bound(target, p, box, grid_n=100, L_fn=3.0)
        # zero deviation, only padding ~ 2 L r
        assert eps <= 2 * 3.0 * (1.0 / 99.0) / 2.0 + 1e-9

    def test_soundness_sampling(self):
        net = tanh_net(2)
        box = Box([-2.0, -2.0], [2.0, 2.0])
        p = bernstein_of(lambda x: float(net.forward(x)[0]), (3, 3), box)
        eps = error_bound(
            lambda X: net.forward_batch(X)[:, 0], p, box,
            grid_n=150, L_fn=net.lipschitz_upper("inf"),
        )
        rng = np.random.default_rng(0)
        pts = box.sample(rng, 100_000)
        dev = np.abs(net.forward_batch(pts)[:, 0] - p.eval_batch(pts))
        assert float(np.max(dev)) <= eps


class TestPartition:
    def test_trivial(self):
        box = Box([0.0, 0.0], [1.0, 1.0])
        parts = partition(box, (1, 1))
        assert len(parts) == 1 and parts[0] == box

    def test_half_boxes(self):
        parts = partition(Box([0.0, 0.0], [1.0, 1.0]), (2, 1))
        assert len(parts) == 2
        assert parts[0] == Box([0.0, 0.0], [0.5, 1.0])
        assert parts[1] == Box([0.5, 0.0], [1.0, 1.0])

    def test_three_slabs(self):
        parts = partition(Box([-2.0, -2.0], [2.0, 2.0]), (3, 1))
        assert len(parts) == 3
        for p in parts:
            assert p.widths()[0] == pytest.approx(4.0 / 3.0)
            assert p.widths()[1] == pytest.approx(4.0)

    def test_cover_and_disjoint_interiors(self):
        box = Box([0.0, 0.0], [1.0, 1.0])
        parts = partition(box, (3, 2))
        # union: every sample is in at least one part
        rng = np.random.default_rng(1)
        pts = box.sample(rng, 2000)
        owner_count = np.zeros(2000, dtype=int)
        for p in parts:
            owner_count += p.contains_batch(pts).astype(int)
        assert np.all(owner_count >= 1)
        # interiors disjoint: strictly-interior samples have exactly one owner
        strict = np.ones(2000, dtype=bool)
        for p in parts:
            inside = p.contains_batch(pts)
            boundary = inside & ~p.contains_batch(pts, atol=-1e-12)
            strict &= ~boundary
        assert np.all(owner_count[strict] == 1)


class TestPiecewiseApprox:
    def test_polynomial_controller_exact(self):
        ctrl = Polynomial(2, {(2, 1): -1.0, (1, 0): 0.5})
        pw = piecewise_approx(ctrl, Box([-2, -2], [2, 2]), (3, 1), (3, 3), grid_n=20)
        assert pw.eps_overall == 0.0
        assert all(p.poly == ctrl for p in pw.pieces)

    def test_constant_net(self):
        net = FeedForwardNet([(np.zeros((1, 2)), np.array([0.7]), "identity")])
        pw = piecewise_approx(net, Box([-1, -1], [1, 1]), (2, 2), (2, 2), grid_n=30)
        for p in pw.pieces:
            assert (p.poly - 0.7).max_abs_coeff() < 1e-9
        assert pw.eps_overall < 1e-9

    def test_partition_beats_single(self):
        net = tanh_net(5)
        box = Box([-2.0, -2.0], [2.0, 2.0])
        single = piecewise_approx(net, box, (1, 1), (3, 3), grid_n=80)
        parted = piecewise_approx(net, box, (3, 1), (3, 3), grid_n=80)
        assert parted.eps_overall < single.eps_overall

    def test_eps_soundness_bulk(self):
        net = tanh_net(6)
        box = Box([-2.0, -2.0], [2.0, 2.0])
        pw = piecewise_approx(net, box, (3, 1), (3, 3), grid_n=100)
        rng = np.random.default_rng(2)
        for piece in pw.pieces:
            pts = piece.box.sample(rng, 40_000)
            dev = np.abs(net.forward_batch(pts)[:, 0] - piece.poly.eval_batch(pts))
            assert float(np.max(dev)) <= piece.eps

    def test_locate_boundary_lowest_index(self):
        ctrl = Polynomial.constant(2, 0.0)
        pw = piecewise_approx(ctrl, Box([0, 0], [1, 1]), (2, 1), (1, 1))
        assert pw.locate([0.5, 0.3]) == 0  # shared facet -> lower index

    def test_serialization_round_trip(self, tmp_path):
        net = tanh_net(7)
        pw = piecewise_approx(net, Box([-1, -1], [1, 1]), (2, 1), (2, 2), grid_n=40)
        path = tmp_path / "pw.json"
        pw.save(str(path))
        loaded = PiecewiseApprox.load(str(path))
        assert loaded.eps_overall == pw.eps_overall
        assert all(
            a.poly == b.poly and a.eps == b.eps and a.box == b.box
            for a, b in zip(loaded.pieces, pw.pieces)
        )


class TestHybridize:
    def _plant_1d(self):
        # f(x, u, w) = x + u, one state, no w axis -> use a dummy w with zero range
        x = Polynomial.variable(3, 0)
        u = Polynomial.variable(3, 1)
        return [x + u]

    def test_scalar_example(self):
        f = self._plant_1d()
        X = Box([-1.0], [1.0])
        pw = PiecewiseApprox(
            [BernsteinApprox(X, (1,), Polynomial.zero(1), 0.1)], [X], 0.1
        )
        sys = hybridize(f, pw, Box([0.0], [0.0]), X)
        # f_hat = x + e
        expected = Polynomial(3, {(1, 0, 0): 1.0, (0, 1, 0): 1.0})
        assert (sys.pieces[0][0] - expected).max_abs_coeff() < 1e-12
        assert sys.dist_box.lo[0] == -0.1 and sys.dist_box.hi[0] == 0.1

    def test_oscillator_control_channel(self):
        from safeadapt.sim import oscillator

        plant = oscillator()
        B = Polynomial(2, {(1, 0): -0.5, (0, 1): -1.0})
        pw = PiecewiseApprox(
            [BernsteinApprox(plant.X, (1, 1), B, 0.05)], [plant.X], 0.05
        )
        sys = hybridize(plant.f, pw, plant.Omega, plant.X)
        # x2 update gains a d*e term
        assert sys.pieces[0][1].coefficient((0, 0, 1, 0)) == pytest.approx(0.05)

    def test_consistency_coefficient_level(self):
        from safeadapt.sim import oscillator

        plant = oscillator()
        net = tanh_net(8)
        pw = piecewise_approx(net, plant.X, (3, 1), (3, 3), grid_n=40)
        sys = hybridize(plant.f, pw, plant.Omega, plant.X)
        nv = 4  # x1, x2, e, w
        for piece_idx, ap in enumerate(pw.pieces):
            # f(x, B(x)+e, w) assembled independently via explicit composition
            from safeadapt.bernstein import _embed

            u_sub = _embed(ap.poly, nv) + Polynomial.variable(nv, 2)
            subs = [
                Polynomial.variable(nv, 0),
                Polynomial.variable(nv, 1),
                u_sub,
                Polynomial.variable(nv, 3),
            ]
            for comp, fi in zip(sys.pieces[piece_idx], plant.f):
                ref = fi.compose(subs)
                assert (comp - ref).max_abs_coeff() < 1e-10

    def test_cross_evaluation_random(self):
        from safeadapt.sim import oscillator

        plant = oscillator()
        net = tanh_net(9)
        pw = piecewise_approx(net, plant.X, (2, 1), (2, 2), grid_n=30)
        sys = hybridize(plant.f, pw, plant.Omega, plant.X)
        rng = np.random.default_rng(4)
        for piece_idx, ap in enumerate(pw.pieces):
            pts = ap.box.sample(rng, 2500)
            ws = rng.uniform(plant.Omega.lo, plant.Omega.hi, size=(2500, 1))
            uvals = ap.poly.eval_batch(pts)
            args_hat = np.column_stack([pts, np.zeros(2500), ws])
            args_true = np.column_stack([pts, uvals, ws])
            for comp, fi in zip(sys.pieces[piece_idx], plant.f):
                np.testing.assert_allclose(
                    comp.eval_batch(args_hat),
                    fi.eval_batch(args_true),
                    rtol=1e-9,
                    atol=1e-9,
                )
