import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safeadapt.poly import (
    Box,
    Interval,
    Polynomial,
    grlex_key,
    interval_range,
    lipschitz_bound_inf,
)


def random_poly(rng, nvars, max_deg=4, n_terms=6):
    terms = {}
    for _ in range(n_terms):
        m = tuple(int(e) for e in rng.integers(0, max_deg + 1, size=nvars))
        if sum(m) > max_deg:
            continue
        terms[m] = rng.normal()
    return Polynomial(nvars, terms)


class TestEval:
    def test_zero_point(self):
        p = Polynomial(2, {(2, 0): 1.0, (0, 1): 2.0})  # x1^2 + 2 x2
        assert p.eval([0.0, 0.0]) == 0.0

    def test_hand_arithmetic(self):
        p = Polynomial(2, {(2, 0): 1.0, (0, 1): 2.0})
        assert p.eval([1.0, 1.0]) == 3.0

    def test_root_of_factor(self):
        p = Polynomial(2, {(0, 0): 1.0, (2, 0): -1.0})  # 1 - x1^2
        assert p.eval([1.0, 7.0]) == 0.0

    def test_dimension_mismatch(self):
        p = Polynomial(2, {(1, 0): 1.0})
        with pytest.raises(ValueError):
            p.eval([1.0])

    def test_eval_batch_matches_eval(self):
        rng = np.random.default_rng(0)
        p = random_poly(rng, 3)
        pts = rng.normal(size=(50, 3))
        batch = p.eval_batch(pts)
        for k in range(50):
            assert batch[k] == pytest.approx(p.eval(pts[k]), rel=1e-12, abs=1e-12)


class TestArithmetic:
    def test_difference_of_squares(self):
        x = Polynomial.variable(1, 0)
        prod = (x + 1.0) * (x - 1.0)
        assert prod == Polynomial(1, {(2,): 1.0, (0,): -1.0})

    def test_scale_to_zero(self):
        x2 = Polynomial(1, {(2,): 1.0})
        assert x2.scale(0.0).is_zero()

    def test_square_of_sum(self):
        x1, x2 = Polynomial.variable(2, 0), Polynomial.variable(2, 1)
        sq = (x1 + x2) ** 2
        assert sq == Polynomial(2, {(2, 0): 1.0, (1, 1): 2.0, (0, 2): 1.0})

    def test_pow_negative_rejected(self):
        with pytest.raises(ValueError):
            Polynomial.variable(1, 0).pow(-1)

    def test_nvars_mismatch(self):
        with pytest.raises(ValueError):
            Polynomial.variable(1, 0).add(Polynomial.variable(2, 0))

    def test_no_zero_terms_stored(self):
        x = Polynomial.variable(1, 0)
        assert (x - x).terms == {}
        assert ((x + 1.0) * (x - 1.0)).coefficient((1,)) == 0.0


class TestCompose:
    def test_shift(self):
        p = Polynomial(1, {(2,): 1.0})  # x^2
        q = p.compose([Polynomial.affine(1, [1.0], 1.0)])  # x -> x + 1
        assert q == Polynomial(1, {(2,): 1.0, (1,): 2.0, (0,): 1.0})

    def test_cancellation(self):
        p = Polynomial(2, {(1, 0): 1.0, (0, 1): 1.0})  # x1 + x2
        x2 = Polynomial(1, {(2,): 1.0})
        q = p.compose([x2, Polynomial(1, {(0,): 1.0, (2,): -1.0})])
        assert q == Polynomial.constant(1, 1.0)

    def test_oscillator_composition_coefficients(self):
        # v = x1^2 + x2^2 composed with the oscillator map at u = w = 0.
        # Expected coefficients computed by independent term-by-term hand
        # expansion of (x1 + d*x2)^2 + (x2 + d((1-x1^2)x2 - x1))^2, d = 0.05:
        #   x1^2: 1 + d^2 = 1.0025
        #   x1*x2: 2d - 2d(1+d) = -0.005
        #   x2^2: d^2 + (1+d)^2 = 1.105
        d = 0.05
        x1 = Polynomial.variable(2, 0)
        x2 = Polynomial.variable(2, 1)
        f1 = x1 + d * x2
        f2 = x2 + d * ((1.0 - x1 * x1) * x2 - x1)
        v = Polynomial(2, {(2, 0): 1.0, (0, 2): 1.0})
        comp = v.compose([f1, f2])
        assert comp.coefficient((2, 0)) == pytest.approx(1.0025, abs=1e-12)
        assert comp.coefficient((1, 1)) == pytest.approx(-0.005, abs=1e-12)
        assert comp.coefficient((0, 2)) == pytest.approx(1.105, abs=1e-12)

    def test_degree_bound(self):
        rng = np.random.default_rng(3)
        p = random_poly(rng, 2, max_deg=3)
        subs = [random_poly(rng, 2, max_deg=2) for _ in range(2)]
        comp = p.compose(subs)
        assert comp.degree() <= p.degree() * max(s.degree() for s in subs)


class TestRandomizedProperties:
    """Algebra consistency on bulk random draws (spec tolerances)."""

    def test_add_mul_eval_consistency(self):
        rng = np.random.default_rng(42)
        checked = 0
        for _ in range(100):
            nvars = int(rng.integers(1, 4))
            p = random_poly(rng, nvars)
            q = random_poly(rng, nvars)
            pts = rng.uniform(-2, 2, size=(100, nvars))
            pv, qv = p.eval_batch(pts), q.eval_batch(pts)
            sv = p.add(q).eval_batch(pts)
            mv = p.mul(q).eval_batch(pts)
            np.testing.assert_allclose(sv, pv + qv, rtol=1e-10, atol=1e-10)
            np.testing.assert_allclose(mv, pv * qv, rtol=1e-10, atol=1e-9)
            checked += 200
        assert checked >= 10_000

    def test_compose_eval_consistency(self):
        rng = np.random.default_rng(7)
        checked = 0
        for _ in range(100):
            nvars = int(rng.integers(1, 3))
            inner_nvars = int(rng.integers(1, 3))
            p = random_poly(rng, nvars, max_deg=3)
            subs = [random_poly(rng, inner_nvars, max_deg=2) for _ in range(nvars)]
            comp = p.compose(subs)
            pts = rng.uniform(-1.5, 1.5, size=(100, inner_nvars))
            direct = comp.eval_batch(pts)
            via = np.column_stack([s.eval_batch(pts) for s in subs])
            expected = p.eval_batch(via)
            scale = 1.0 + np.abs(expected)
            np.testing.assert_array_less(np.abs(direct - expected) / scale, 1e-10)
            checked += 100
        assert checked >= 10_000


class TestIntervalRange:
    def test_linear_exact(self):
        p = Polynomial.variable(1, 0)
        iv = interval_range(p, Box([-1.0], [2.0]))
        assert iv.lo == pytest.approx(-1.0)
        assert iv.hi == pytest.approx(2.0)

    def test_square_containment(self):
        p = Polynomial(1, {(2,): 1.0})
        iv = interval_range(p, Box([-1.0], [2.0]))
        assert iv.lo <= 0.0 and iv.hi >= 4.0

    def test_bilinear_containment(self):
        p = Polynomial(2, {(1, 1): 1.0})
        iv = interval_range(p, Box([0.0, 0.0], [1.0, 1.0]))
        assert iv.lo <= 0.0 and iv.hi >= 1.0

    def test_soundness_random(self):
        rng = np.random.default_rng(11)
        total = 0
        for _ in range(50):
            nvars = int(rng.integers(1, 4))
            p = random_poly(rng, nvars)
            lo = rng.uniform(-2, 0, size=nvars)
            hi = lo + rng.uniform(0.1, 3, size=nvars)
            box = Box(lo, hi)
            iv = interval_range(p, box)
            pts = box.sample(rng, 200)
            vals = p.eval_batch(pts)
            assert np.all(vals >= iv.lo - 1e-9) and np.all(vals <= iv.hi + 1e-9)
            total += 200
        assert total >= 10_000

    def test_lipschitz_bound(self):
        rng = np.random.default_rng(13)
        p = random_poly(rng, 2)
        box = Box([-1.0, -1.0], [1.0, 1.0])
        L = lipschitz_bound_inf(p, box)
        pts = box.sample(rng, 500)
        qts = box.sample(rng, 500)
        dv = np.abs(p.eval_batch(pts) - p.eval_batch(qts))
        dx = np.max(np.abs(pts - qts), axis=1)
        assert np.all(dv <= L * dx + 1e-9)


class TestOrderAndSerialization:
    def test_grlex_order(self):
        monos = [(0, 2), (1, 0), (0, 0), (2, 0), (1, 1)]
        assert sorted(monos, key=grlex_key) == [
            (0, 0),
            (1, 0),
            (0, 2),
            (1, 1),
            (2, 0),
        ]

    def test_json_round_trip_bit_exact(self):
        rng = np.random.default_rng(5)
        p = random_poly(rng, 3)
        blob = json.dumps(p.to_json_dict())
        q = Polynomial.from_json_dict(json.loads(blob))
        assert q == p
        assert json.dumps(q.to_json_dict()) == blob

    def test_json_terms_sorted(self):
        p = Polynomial(2, {(2, 0): 1.0, (0, 0): 3.0, (1, 1): -2.0})
        exps = [tuple(t["exp"]) for t in p.to_json_dict()["terms"]]
        assert exps == sorted(exps, key=grlex_key)


class TestBox:
    def test_invalid(self):
        with pytest.raises(ValueError):
            Box([1.0], [0.0])
        with pytest.raises(ValueError):
            Interval(2.0, 1.0)

    def test_faces(self):
        box = Box([-2.0, -2.0], [2.0, 2.0])
        faces = box.face_constraints()
        assert len(faces) == 4
        x = [0.5, -1.5]
        assert all(f.eval(x) <= 0 for f in faces)
        assert any(f.eval([3.0, 0.0]) > 0 for f in faces)

    def test_corners(self):
        c = Box([0.0, 0.0], [1.0, 2.0]).corners()
        assert c.shape == (4, 2)
        assert {tuple(r) for r in c} == {(0, 0), (1, 0), (0, 2), (1, 2)}


@given(
    st.lists(
        st.tuples(
            st.tuples(st.integers(0, 3), st.integers(0, 3)),
            st.floats(-10, 10, allow_nan=False),
        ),
        max_size=6,
    )
)
@settings(max_examples=200, deadline=None)
def test_add_commutes_hypothesis(term_list):
    terms = {m: c for m, c in term_list}
    p = Polynomial(2, terms)
    q = Polynomial(2, {(1, 1): 2.0, (0, 0): -1.0})
    assert p.add(q) == q.add(p)
