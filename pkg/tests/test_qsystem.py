import json
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadseries.errors import SystemFormatError
from quadseries.precision import make_context
from quadseries.qsystem import (
    QuadSystem,
    bundled_system,
    compute_bounds,
    dong_system,
    eval_rhs,
    exact,
    extend_variational,
    load_system,
    save_system,
    system_from_dict,
    system_to_dict,
)
from quadseries.series import next_coefficient


def test_dong_norms(dong):
    assert dong.norm_A == 57
    assert dong.mu == 6


def test_dong_divergence_is_constant(dong):
    # trace of A; the quadratic terms contribute nothing to the divergence
    assert sum(dong.A[i][i] for i in range(4)) == -21
    for p in range(4):
        assert dong.Q[p][p][p] == 0
        assert all(dong.Q[p][p][j] == 0 and dong.Q[p][j][p] == 0 for j in range(4))


def test_bounds_at_start(dong, ctx128):
    x0 = ctx128.vector(["10", "-27.2011", "10", "10"])
    b = compute_bounds(dong, x0)
    h1 = Fraction("57.2011")
    h2 = 6 * h1**2 + (57 + 12) * h1
    assert float(b.h2) == pytest.approx(float(h2), rel=1e-30)
    assert float(b.tau) == pytest.approx(float(1 / (h2 + Fraction("0.001"))), rel=1e-30)


def test_bounds_small_state(dong, ctx128):
    b = compute_bounds(dong, ctx128.vector(["0.1", "0", "0", "0.2"]))
    assert b.h2 == 63


def test_bounds_require_positive_delta(dong, ctx128):
    with pytest.raises(ValueError):
        compute_bounds(dong, ctx128.vector([1, 1, 1, 1]), delta="0")


def test_bounds_dimension_mismatch(dong, ctx128):
    with pytest.raises(ValueError):
        compute_bounds(dong, ctx128.vector([1, 1, 1]))


def test_rhs_matches_first_coefficient(dong, ctx128):
    x = ctx128.vector(["1.5", "-2", "3.25", "0.5"])
    assert eval_rhs(dong, x) == next_coefficient(dong, [x])


def test_rhs_by_hand(dong, ctx128):
    x1, x2, x3, x4 = 1, 2, 3, 4
    x = ctx128.vector([x1, x2, x3, x4])
    want = (
        7 * (x2 - x1) - 5 * x4,
        50 * x1 - x2 - x1 * x3 - 5 * x4,
        -3 * x3 + x1 * x2,
        -10 * x4 + 1.5 * x2 * x3,
    )
    assert [float(v) for v in eval_rhs(dong, x)] == list(want)


def test_variational_structure(dong):
    ext = extend_variational(dong)
    assert ext.n == 8
    n = 4
    # state block unchanged and independent of the perturbation
    for i in range(n):
        assert ext.A[i][:n] == dong.A[i]
        assert all(v == 0 for v in ext.A[i][n:])
    # the tangent block is linear in the perturbation
    for p in range(n, 2 * n):
        q = ext.Q[p]
        assert all(q[i][j] == 0 for i in range(n, 2 * n) for j in range(2 * n))
    assert ext.ball.radius == dong.ball.radius + 2


def test_variational_rhs_is_jacobian_product(dong, ctx128):
    ext = extend_variational(dong)
    y = [Fraction(3, 2), Fraction(-2), Fraction(13, 4), Fraction(1, 2)]
    z = [Fraction(1, 4), Fraction(1, 8), Fraction(-1, 2), Fraction(1)]
    x1, x2, x3, x4 = y
    J = [
        [-7, 7, 0, -5],
        [50 - x3, -1, -x1, -5],
        [x2, x1, -3, 0],
        [0, Fraction(3, 2) * x3, Fraction(3, 2) * x2, -10],
    ]
    want = [sum(J[i][j] * z[j] for j in range(4)) for i in range(4)]
    got = eval_rhs(ext, ctx128.vector(y + z))[4:]
    assert [Fraction(*v.as_integer_ratio()) for v in got] == want


def test_json_round_trip(dong, tmp_path):
    path = tmp_path / "dong.json"
    save_system(dong, path)
    back = load_system(path)
    assert back == dong
    assert back.params == dong.params


def test_bundled_dong_matches_builder():
    assert bundled_system("dong2019") == dong_system()
    assert bundled_system("dong2019.json") == dong_system()


def test_bundled_riccati():
    r = bundled_system("riccati")
    assert r.n == 2
    assert r.Q[0][0][0] == 1 and r.Q[0][1][1] == 1


def test_unknown_bundled():
    with pytest.raises(SystemFormatError):
        bundled_system("lorenz")


def _doc():
    return system_to_dict(QuadSystem.build([[1, 0], [0, 1]], [[[0, 1], [0, 0]], [[0, 0], [1, 0]]], [0, 0], 5))


@pytest.mark.parametrize("mutate, msg", [
    (lambda d: d.pop("A"), "missing required field 'A'"),
    (lambda d: d.__setitem__("n", 0), "positive integer"),
    (lambda d: d["A"][0].append("1"), "square"),
    (lambda d: d["A"].append(["1", "2"]), "expected 2 rows"),
    (lambda d: d["Q"].pop(), "quadratic matrices"),
    (lambda d: d["A"][0].__setitem__(0, 0.5), "binary floats"),
    (lambda d: d["A"][0].__setitem__(0, "1.2.3"), "A\\[0\\]\\[0\\]"),
    (lambda d: d["ball"].__setitem__("radius", "-1"), "radius"),
    (lambda d: d["ball"].__setitem__("center", ["0"]), "ball.center"),
    (lambda d: d.__setitem__("name", 3), "name"),
])
def test_malformed_documents(mutate, msg):
    doc = _doc()
    mutate(doc)
    with pytest.raises(SystemFormatError, match=msg):
        system_from_dict(doc)


def test_invalid_json_reports_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"n": 2,\n "A": [}')
    with pytest.raises(SystemFormatError, match="line 2"):
        load_system(p)


def test_missing_file(tmp_path):
    with pytest.raises(SystemFormatError, match="cannot read"):
        load_system(tmp_path / "none.json")


def test_exact_rejects_garbage():
    with pytest.raises((ValueError, SystemFormatError)):
        exact("one")
    assert exact("0.1") == Fraction(1, 10)
    assert exact("-2.5e-3") == Fraction(-1, 400)


def test_ball_contains():
    s = QuadSystem.build([[0, 0], [0, 0]], [[[0] * 2] * 2] * 2, [1, 1], 2)
    assert s.ball.contains([1, 3])
    assert not s.ball.contains([1, Fraction(3) + Fraction(1, 10**30)])


fractions = st.fractions(min_value=-4, max_value=4, max_denominator=16)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3).flatmap(lambda n: st.tuples(
    st.lists(st.lists(fractions, min_size=n, max_size=n), min_size=n, max_size=n),
    st.lists(st.lists(st.lists(fractions, min_size=n, max_size=n), min_size=n, max_size=n), min_size=n, max_size=n),
)))
def test_dict_round_trip_property(data):
    A, Q = data
    s = QuadSystem.build(A, Q, None, 3)
    assert system_from_dict(json.loads(json.dumps(system_to_dict(s)))) == s
    # realizing at any width gives the same nonzero pattern
    r = s.realize(make_context(64))
    assert len(r.q_entries) == sum(1 for q in Q for row in q for v in row if v)
