import math

import gmpy2
import pytest
from gmpy2 import mpfr
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import BACKENDS, END_40
from oracles import tangent_errors
from quadseries.errors import DegeneracyError, PrecisionError
from quadseries.fgbfi import IntegrationConfig, integrate
from quadseries.lyapunov import (
    BenettinConfig,
    gram_deviation,
    gram_schmidt_step,
    init_perturbations,
    lyapunov_spectrum,
    propagate_pair,
)
from quadseries.precision import format_decimal, make_context
from quadseries.qsystem import extend_variational


def _eps(bits):
    return make_context(bits).machine_epsilon


@pytest.mark.parametrize("M, tau", [(10, "0.1"), (100, "0.1"), (10, "0.01"), (100, "0.01")])
def test_decay_exponent(decay, M, tau):
    T = str(M * float(tau))
    run = lyapunov_spectrum(decay, ["3"], BenettinConfig.create(128, T, M))
    assert abs(float(run.exponents[0]) + 1) < 1e-6
    assert len(run.trace) == M
    # every running estimate is already -1
    assert all(abs(float(r[0]) + 1) < 1e-6 for r in run.trace)


def test_config_checks():
    with pytest.raises(ValueError, match="positive integer"):
        BenettinConfig.create(128, "1", 0)
    with pytest.raises(ValueError):
        BenettinConfig.create(128, "1", True)
    with pytest.raises(ValueError, match="exact"):
        BenettinConfig.create(128, "1", 27)
    with pytest.raises(ValueError):
        BenettinConfig.create(128, "0", 5)
    with pytest.raises(PrecisionError):
        BenettinConfig.create(53, "1", 10)
    cfg = BenettinConfig.create(128, "100", 20000)
    assert cfg.tau_M == cfg.context.real("0.005")


def test_init_single_vector():
    ctx = make_context(128)
    for seed in (1, 2, 99):
        assert init_perturbations(1, seed, ctx) == [(ctx.real(1),)]


def test_init_is_seeded():
    ctx = make_context(128)
    a = init_perturbations(4, 1, ctx)
    assert a == init_perturbations(4, 1, ctx)
    assert a != init_perturbations(4, 2, ctx)
    assert gram_deviation(a) <= 1000 * ctx.machine_epsilon
    with pytest.raises(ValueError):
        init_perturbations(0, 1, ctx)


def test_gram_schmidt_by_hand():
    ctx = make_context(128)
    Z = [ctx.vector([2, 0]), ctx.vector([1, 1])]
    zero = ctx.real(0)
    out, sums = gram_schmidt_step(Z, [zero, zero])
    assert out == [ctx.vector([1, 0]), ctx.vector([0, 1])]
    with ctx.local():
        assert sums == [gmpy2.log(2), 0]


def test_gram_schmidt_keeps_orthonormal_input():
    ctx = make_context(128)
    Z = init_perturbations(4, 7, ctx)
    one = ctx.real(1)
    out, sums = gram_schmidt_step(Z, [one] * 4)
    for u, v in zip(out, Z):
        for a, b in zip(u, v):
            assert abs(float(a - b)) <= 4 * float(ctx.machine_epsilon)
    assert all(abs(float(s) - 1) <= 4 * float(ctx.machine_epsilon) for s in sums)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=16, max_size=16), st.sampled_from([64, 128, 200]))
def test_gram_schmidt_orthonormal(entries, bits):
    ctx = make_context(bits)
    # diagonal shift keeps the set independent
    Z = [ctx.vector([entries[4 * i + j] + (25 if i == j else 0) for j in range(4)]) for i in range(4)]
    out, _ = gram_schmidt_step(Z, [ctx.real(0)] * 4)
    assert gram_deviation(out) <= 1000 * ctx.machine_epsilon


def test_gram_schmidt_degenerate():
    ctx = make_context(128)
    Z = [ctx.vector([1, 2]), ctx.vector([2, 4])]
    with pytest.raises(DegeneracyError, match="larger mantissa"):
        gram_schmidt_step(Z, [ctx.real(0)] * 2)


def test_propagate_zero_perturbation(dong):
    cfg = BenettinConfig.create(128, "0.005", 1)
    ext = extend_variational(dong)
    Y, Z = propagate_pair(ext, list(END_40), ["0"] * 4, "0.005", cfg)
    assert all(z == 0 for z in Z)
    plain = integrate(dong, list(END_40), IntegrationConfig.create(128, "1e-20", "0.005"))
    # same state, different step sizes (the extended ball is wider), so agree to eps_pw
    for a, b in zip(Y, plain.final_state):
        assert abs(float(a - b)) < 1e-17


@pytest.mark.parametrize("backend", BACKENDS)
def test_propagate_linear_closed_form(decay, backend):
    cfg = BenettinConfig.create(128, "0.5", 1)
    Y, Z = propagate_pair(extend_variational(decay), ["2"], ["0.25"], "0.5", cfg, backend=backend)
    assert float(Z[0]) == pytest.approx(0.25 * math.exp(-0.5), rel=1e-18)
    assert float(Y[0]) == pytest.approx(2 * math.exp(-0.5), rel=1e-18)


def test_propagate_dimension_check(dong):
    cfg = BenettinConfig.create(128, "0.005", 1)
    with pytest.raises(ValueError):
        propagate_pair(extend_variational(dong), ["1"] * 4, ["0"] * 3, "0.005", cfg)


@pytest.fixture(scope="module")
def attractor_points(dong):
    pts = []
    integrate(dong, list(END_40), IntegrationConfig.create(128, "1e-20", "0.25"), record=False, grid="0.05",
              on_sample=lambda t, x: pts.append([format_decimal(v) for v in x]))
    return pts[1:6]


def test_tangent_matches_finite_difference(dong, attractor_points):
    assert len(attractor_points) == 5
    errs = tangent_errors(dong, attractor_points)
    assert max(errs) <= 1e-12, errs


@pytest.fixture(scope="module")
def short_run(dong):
    return lyapunov_spectrum(dong, list(END_40), BenettinConfig.create(128, "0.05", 10))


def test_short_dong_run(short_run):
    run = short_run
    eps = _eps(128)
    assert len(run.exponents) == 4 and len(run.trace) == 10
    assert run.running(10) == run.exponents
    assert run.max_gram_deviation <= 1000 * eps
    assert gram_deviation(run.final_perturbations) <= 1000 * eps
    # copies of the base state differ only through step sizes
    assert run.max_base_spread < mpfr("1e-18")
    assert list(run.sorted_exponents) == sorted(run.exponents, reverse=True)
    with make_context(128).local():
        assert run.exponents == tuple(s / mpfr("0.05") for s in run.sums)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="threads only help with the compiled kernel")
def test_workers_do_not_change_results(dong, short_run):
    run = lyapunov_spectrum(dong, list(END_40), BenettinConfig.create(128, "0.05", 10), workers=4)
    assert run.exponents == short_run.exponents
    assert run.final_state == short_run.final_state


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernel not built")
def test_backends_agree(dong):
    cfg = BenettinConfig.create(128, "0.01", 2)
    a = lyapunov_spectrum(dong, list(END_40), cfg, backend="mpfr-c")
    b = lyapunov_spectrum(dong, list(END_40), cfg, backend="python")
    assert a.exponents == b.exponents


def test_progress_and_dimension(dong, decay):
    seen = []
    lyapunov_spectrum(decay, ["1"], BenettinConfig.create(128, "1", 4), progress=lambda k, m: seen.append((k, m)))
    assert seen == [(1, 4), (2, 4), (3, 4), (4, 4)]
    with pytest.raises(ValueError, match="coordinates"):
        lyapunov_spectrum(dong, ["1", "2"], BenettinConfig.create(128, "1", 4))
