"""Tape ops, adjoints, and the finite-difference oracle."""

import math

import numpy as np
import pytest

from labeldep import autodiff as ad


def scalar_leaf(tape, v):
    return tape.leaf(np.float64(v))


class TestForwardOps:
    def test_sigmoid_at_zero(self):
        t = ad.Tape()
        assert float(ad.sigmoid(scalar_leaf(t, 0.0)).value) == 0.5

    def test_logsumexp_two_zeros(self):
        t = ad.Tape()
        out = ad.logsumexp(t.leaf([0.0, 0.0]), axis=0)
        assert math.isclose(float(out.value), math.log(2), rel_tol=1e-12)

    def test_matmul_identity(self):
        t = ad.Tape()
        a = np.random.default_rng(0).standard_normal((3, 3))
        out = ad.matmul(t.leaf(np.eye(3)), t.leaf(a))
        np.testing.assert_array_equal(out.value, a)

    def test_logsumexp_overflow_safe(self):
        t = ad.Tape()
        out = ad.logsumexp(t.leaf([1000.0, 1000.0]), axis=0)
        assert np.isfinite(out.value)
        assert math.isclose(float(out.value), 1000.0 + math.log(2), rel_tol=1e-12)

    def test_concat_and_slice_roundtrip(self):
        t = ad.Tape()
        a = t.leaf([[1.0, 2.0], [3.0, 4.0]])
        b = t.leaf([[5.0], [6.0]])
        cat = ad.concat([a, b])
        assert cat.value.shape == (2, 3)
        np.testing.assert_array_equal(ad.slice_last(cat, 2, 3).value, b.value)

    def test_clamp_values(self):
        t = ad.Tape()
        out = ad.clamp(t.leaf([-12.0, -3.0, 0.0, 3.0, 12.0]), -10.0, 10.0)
        np.testing.assert_allclose(out.value, [-10.0, -3.0, 0.0, 3.0, 10.0])


class TestErrors:
    def test_matmul_shape_error_names_op_and_shapes(self):
        t = ad.Tape()
        with pytest.raises(ad.ShapeError) as exc:
            ad.matmul(t.leaf(np.zeros((2, 3))), t.leaf(np.zeros((2, 3))))
        msg = str(exc.value)
        assert "matmul" in msg and "(2, 3)" in msg

    def test_add_shape_mismatch(self):
        t = ad.Tape()
        with pytest.raises(ad.ShapeError, match="add"):
            ad.add(t.leaf([1.0, 2.0]), t.leaf([1.0, 2.0, 3.0]))

    def test_broadcast_add_row_rejects_matrix_bias(self):
        t = ad.Tape()
        with pytest.raises(ad.ShapeError):
            ad.broadcast_add_row(t.leaf(np.zeros((2, 3))), t.leaf(np.zeros((2, 3))))

    def test_log_domain_violation_identifies_node(self):
        t = ad.Tape()
        bad = t.leaf([1.0, 0.0])
        with pytest.raises(ad.NumericError, match=f"v{bad.vid}"):
            ad.log(bad)

    def test_exp_overflow_is_an_error(self):
        t = ad.Tape()
        with pytest.raises(ad.NumericError, match="exp"):
            ad.exp(t.leaf([1000.0]))

    def test_leaf_rejects_non_finite(self):
        t = ad.Tape()
        with pytest.raises(ad.NumericError):
            t.leaf([np.nan])

    def test_mixed_tapes_rejected(self):
        a = ad.Tape().leaf([1.0])
        b = ad.Tape().leaf([1.0])
        with pytest.raises(ad.AutodiffError, match="different tapes"):
            ad.add(a, b)

    def test_backward_requires_scalar(self):
        t = ad.Tape()
        v = t.leaf([1.0, 2.0])
        with pytest.raises(ad.ShapeError, match="scalar"):
            t.backward(v)

    def test_backward_rejects_foreign_loss(self):
        t = ad.Tape()
        other = ad.Tape()
        loss = ad.reduce_sum(other.leaf([1.0]))
        with pytest.raises(ad.AutodiffError):
            t.backward(loss)

    def test_slice_range_validation(self):
        t = ad.Tape()
        with pytest.raises(ad.ShapeError, match="slice_last"):
            ad.slice_last(t.leaf([[1.0, 2.0]]), 1, 3)


class TestBackward:
    def test_square_gradient(self):
        t = ad.Tape()
        x = scalar_leaf(t, 3.0)
        t.backward(ad.mul(x, x))
        assert float(x.grad) == 6.0

    def test_sigmoid_gradient_at_zero(self):
        t = ad.Tape()
        w = scalar_leaf(t, 0.0)
        t.backward(ad.sigmoid(w))
        assert float(w.grad) == 0.25

    def test_logsumexp_gradient_uniform(self):
        t = ad.Tape()
        v = t.leaf([0.0, 0.0])
        t.backward(ad.logsumexp(v, axis=0))
        np.testing.assert_allclose(v.grad, [0.5, 0.5], rtol=1e-12)
        # independent oracle: central differences, step 1e-6
        h = 1e-6

        def lse(a, b):
            return math.log(math.exp(a) + math.exp(b))

        fd = [(lse(h, 0) - lse(-h, 0)) / (2 * h), (lse(0, h) - lse(0, -h)) / (2 * h)]
        np.testing.assert_allclose(v.grad, fd, rtol=1e-6)

    def test_gradient_map_contains_reachable_leaves(self):
        t = ad.Tape()
        x = t.leaf([1.0, 2.0])
        unused = t.leaf([5.0])
        grads = t.backward(ad.reduce_sum(ad.mul(x, x)))
        assert x in grads and unused not in grads

    def test_shared_subexpression_accumulates(self):
        # loss = x*x + x -> grad 2x + 1
        t = ad.Tape()
        x = scalar_leaf(t, 4.0)
        t.backward(ad.add(ad.mul(x, x), x))
        assert float(x.grad) == 9.0

    def test_relu_subgradient_zero_at_kink(self):
        t = ad.Tape()
        x = t.leaf([0.0, -1.0, 2.0])
        t.backward(ad.reduce_sum(ad.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def _op_cases():
    rng = np.random.default_rng(42)
    n, d = 3, 4
    a = rng.standard_normal((n, d))
    b = rng.standard_normal((n, d))
    away_from_kinks = a + np.sign(a) * 1e-3  # relu adjoint undefined near 0
    pos = rng.uniform(0.5, 2.0, (n, d))
    mat = rng.standard_normal((d, 2))
    row = rng.standard_normal(d)
    w = rng.standard_normal((n, d))

    def weighted(op_out, weights):
        # non-uniform output adjoints exercise more of each op's push rule
        return ad.reduce_sum(ad.mul(op_out, op_out.tape.leaf(weights)))

    return [
        ("matmul", [a, mat], lambda t, p: weighted(ad.matmul(p[0], p[1]), w[:, :2])),
        ("add", [a, b], lambda t, p: weighted(ad.add(p[0], p[1]), w)),
        ("sub", [a, b], lambda t, p: weighted(ad.sub(p[0], p[1]), w)),
        ("mul", [a, b], lambda t, p: weighted(ad.mul(p[0], p[1]), w)),
        ("negate", [a], lambda t, p: weighted(ad.negate(p[0]), w)),
        ("scale", [a], lambda t, p: weighted(ad.scale(p[0], -1.7), w)),
        ("add_scalar", [a], lambda t, p: weighted(ad.add_scalar(p[0], 0.3), w)),
        ("sigmoid", [a], lambda t, p: weighted(ad.sigmoid(p[0]), w)),
        ("tanh", [a], lambda t, p: weighted(ad.tanh(p[0]), w)),
        ("relu", [away_from_kinks], lambda t, p: weighted(ad.relu(p[0]), w)),
        ("exp", [a], lambda t, p: weighted(ad.exp(p[0]), w)),
        ("log", [pos], lambda t, p: weighted(ad.log(p[0]), w)),
        ("softplus", [a], lambda t, p: weighted(ad.softplus(p[0]), w)),
        ("concat", [a, b], lambda t, p: weighted(ad.concat(p), np.hstack([w, w]))),
        ("slice_last", [a], lambda t, p: weighted(ad.slice_last(p[0], 1, 3), w[:, 1:3])),
        ("reduce_sum_all", [a], lambda t, p: ad.reduce_sum(p[0])),
        ("reduce_sum_axis", [a], lambda t, p: weighted(ad.reduce_sum(p[0], axis=0), w[0])),
        ("reduce_mean_all", [a], lambda t, p: ad.reduce_mean(p[0])),
        ("reduce_mean_axis", [a], lambda t, p: weighted(ad.reduce_mean(p[0], axis=1), w[:, 0])),
        ("logsumexp", [a], lambda t, p: weighted(ad.logsumexp(p[0], axis=1), w[:, 0])),
        ("broadcast_add_row", [a, row], lambda t, p: weighted(ad.broadcast_add_row(p[0], p[1]), w)),
        ("clamp", [2.0 * a], lambda t, p: weighted(ad.clamp(p[0], -1.5, 1.5), w)),
    ]


@pytest.mark.parametrize("name,params,build", _op_cases(), ids=lambda c: c if isinstance(c, str) else "")
def test_every_primitive_matches_finite_differences(name, params, build):
    def f(ps):
        tape = ad.Tape()
        pvars = [tape.leaf(p) for p in ps]
        return build(tape, pvars), pvars

    report = ad.finite_diff_check(f, params, step=1e-5)
    assert report.max_rel_error < 1e-6, f"{name}: {report}"


def test_gradient_linearity():
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal(5)
    a, b = 2.5, -0.75

    def grad_of(combine):
        tape = ad.Tape()
        x = tape.leaf(x0)
        f = ad.reduce_sum(ad.mul(x, x))
        g = ad.reduce_sum(ad.sigmoid(x))
        tape.backward(combine(f, g))
        return x.grad.copy()

    gf = grad_of(lambda f, g: ad.add(f, ad.scale(g, 0.0)))
    gg = grad_of(lambda f, g: ad.add(ad.scale(f, 0.0), g))
    combined = grad_of(lambda f, g: ad.add(ad.scale(f, a), ad.scale(g, b)))
    np.testing.assert_allclose(combined, a * gf + b * gg, rtol=1e-12)


def test_tape_determinism_bitwise():
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((4, 3))
    m0 = rng.standard_normal((3, 2))

    def run():
        tape = ad.Tape()
        x = tape.leaf(x0)
        m = tape.leaf(m0)
        loss = ad.reduce_mean(ad.softplus(ad.matmul(ad.tanh(x), m)))
        tape.backward(loss)
        return loss.value.copy(), x.grad.copy(), m.grad.copy()

    first, second = run(), run()
    for lhs, rhs in zip(first, second):
        np.testing.assert_array_equal(lhs, rhs)


class TestFiniteDiffCheck:
    def test_quadratic_form(self):
        rng = np.random.default_rng(3)
        q = rng.standard_normal((4, 4))
        sym = (q + q.T) / 2

        def f(ps):
            tape = ad.Tape()
            x = tape.leaf(ps[0])
            out = ad.reduce_sum(ad.mul(x, ad.matmul(x, tape.leaf(sym))))
            return out, [x]

        # central differences are exact for quadratics up to roundoff
        report = ad.finite_diff_check(f, [rng.standard_normal((1, 4))], step=1e-5)
        assert report.max_rel_error < 1e-6

    def test_constant_function_zero_error(self):
        def f(ps):
            tape = ad.Tape()
            x = tape.leaf(ps[0])
            return ad.reduce_sum(ad.scale(x, 0.0)), [x]

        report = ad.finite_diff_check(f, [np.array([1.0, -2.0])], step=1e-5)
        assert report.max_rel_error == 0.0

    def test_report_locates_worst_coordinate(self):
        def f(ps):
            tape = ad.Tape()
            x = tape.leaf(ps[0])
            return ad.reduce_sum(ad.exp(x)), [x]

        report = ad.finite_diff_check(f, [np.array([0.1, 0.2])], step=1e-5)
        assert report.worst_param == 0
        assert report.worst_coord in ((0,), (1,))
        assert report.max_rel_error < 1e-8
