from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import least_squares

from deki.models import (
    CallableModel,
    LinearModel,
    QuadraticModel,
    ReferenceSolveError,
    RegularizedProblem,
    cell_centres,
    darcy_model,
    darcy_operator_apply,
    darcy_solve,
    default_source,
    generate_transport_data,
    interpolation_matrix,
    kl_basis,
    kl_truncation_dim,
    loss,
    optimal_solution,
    read_grid_csv,
    regularized_apply,
    subblock_centres,
    transport_model,
    write_grid_csv,
)


def grid(N):
    c = cell_centres(N)
    return np.meshgrid(c, c, indexing="ij")


# -- query accounting ------------------------------------------------------------------


def test_query_count_per_call():
    m = LinearModel(np.eye(3))
    m.evaluate(np.ones(3))
    m.evaluate_batch(np.ones((3, 4)))
    m.peek(np.ones(3))
    m.jacobian(np.ones(3))
    assert m.query_count == 5


def test_query_count_is_atomic_under_threads():
    m = CallableModel(lambda u: np.sin(u), 4, 4)
    with ThreadPoolExecutor(8) as pool:
        list(pool.map(lambda _: m.evaluate(np.ones(4)), range(400)))
    assert m.query_count == 400


def test_evaluate_rejects_wrong_length():
    with pytest.raises(ValueError):
        LinearModel(np.eye(3)).evaluate(np.ones(2))


# -- regularized map and loss ---------------------------------------------------------------


def test_regularized_apply_identity_stack():
    p = RegularizedProblem(LinearModel(np.eye(2)), 1.0, np.zeros(2))
    np.testing.assert_array_equal(regularized_apply(p, [1.0, 2.0]), [1, 2, 1, 2])
    np.testing.assert_array_equal(regularized_apply(p, [0.0, 0.0]), 0.0)
    assert p.model.query_count == 2


def test_regularized_apply_scalar_square():
    p = RegularizedProblem(CallableModel(lambda u: u**2, 1, 1), 0.1, [0.0])
    np.testing.assert_allclose(regularized_apply(p, [3.0]), [9.0, 0.3])


def test_regularized_apply_dimension_mismatch():
    p = RegularizedProblem(LinearModel(np.eye(2)), 1.0, np.zeros(2))
    with pytest.raises(ValueError):
        regularized_apply(p, [1.0, 2.0, 3.0])


@pytest.mark.parametrize("reg", [0.0, -1.0, np.array([1.0, 0.0]), np.array([[1.0, 2.0], [0.0, 1.0]])])
def test_regularizer_must_be_spd(reg):
    with pytest.raises(ValueError):
        RegularizedProblem(LinearModel(np.eye(2)), reg, np.zeros(2))


def test_loss_examples():
    p0 = RegularizedProblem(LinearModel(np.eye(2)), 1.0, np.zeros(2))
    assert loss(p0, np.zeros(2)) == 0.0
    p1 = RegularizedProblem(LinearModel([[1.0]]), 1.0, [2.0])
    assert loss(p1, [1.0]) == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_loss_is_half_stacked_residual(d_u, d_y, seed):
    rng = np.random.default_rng(seed)
    reg = rng.uniform(0.1, 2.0, d_u)
    p = RegularizedProblem(QuadraticModel(rng.standard_normal((d_y, d_u)), rng.standard_normal((d_y, d_u, d_u))),
                           reg, rng.standard_normal(d_y))
    u = rng.standard_normal(d_u)
    r = p.z - regularized_apply(p, u)
    assert loss(p, u) == pytest.approx(0.5 * r @ r, rel=1e-12, abs=1e-14)


# -- reference optimum ---------------------------------------------------------------


def test_optimal_solution_scalar():
    u, lmin = optimal_solution(RegularizedProblem(LinearModel([[1.0]]), 1.0, [1.0]))
    np.testing.assert_allclose(u, [0.5])
    assert lmin == pytest.approx(0.25)


def test_optimal_solution_zero_data():
    rng = np.random.default_rng(0)
    u, lmin = optimal_solution(RegularizedProblem(LinearModel(rng.standard_normal((4, 3))), 0.5, np.zeros(4)))
    np.testing.assert_allclose(u, 0.0, atol=1e-15)
    assert lmin == 0.0


def test_optimal_solution_zero_map():
    y = np.array([1.0, -2.0, 0.5])
    u, lmin = optimal_solution(RegularizedProblem(LinearModel(np.zeros((3, 2))), 1.0, y))
    np.testing.assert_allclose(u, 0.0, atol=1e-15)
    assert lmin == pytest.approx(0.5 * y @ y)


def test_optimal_solution_linear_normal_equations():
    rng = np.random.default_rng(3)
    G = rng.standard_normal((6, 4))
    reg = np.diag(rng.uniform(0.5, 2.0, 4))
    y = rng.standard_normal(6)
    u, _ = optimal_solution(RegularizedProblem(LinearModel(G), reg, y))
    np.testing.assert_allclose(u, np.linalg.solve(G.T @ G + reg @ reg, G.T @ y), atol=1e-12)


def test_optimal_solution_quadratic_against_scipy():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((5, 3))
    B = 0.1 * rng.standard_normal((5, 3, 3))
    m = QuadraticModel(A, B)
    y = rng.standard_normal(5)
    p = RegularizedProblem(m, 0.5, y)
    u, lmin = optimal_solution(p)
    ref = least_squares(lambda v: np.concatenate([m.peek(v) - y, 0.5 * v]), np.zeros(3), xtol=1e-15, ftol=1e-15,
                        gtol=1e-15)
    assert lmin <= loss(p, ref.x) + 1e-12
    np.testing.assert_allclose(u, ref.x, atol=1e-7)


def test_optimal_solution_reports_best_iterate():
    m = QuadraticModel(np.eye(2), np.ones((2, 2, 2)))
    p = RegularizedProblem(m, 1.0, np.array([1.0, 2.0]))
    with pytest.raises(ReferenceSolveError) as info:
        optimal_solution(p, max_iter=0)
    assert info.value.loss == pytest.approx(loss(p, np.zeros(2)))
    np.testing.assert_array_equal(info.value.u, 0.0)


def test_optimal_solution_darcy_is_minimal():
    kl = kl_basis(0.1, 0.1, 0.1, 8, 1e-2)
    m = darcy_model(kl)
    rng = np.random.default_rng(2)
    p = RegularizedProblem(m, 0.1, m.peek(rng.standard_normal(kl.d_u)) + 1e-3 * rng.standard_normal(m.d_y))
    u, lmin = optimal_solution(p)
    for _ in range(20):
        assert loss(p, u + 0.05 * rng.standard_normal(kl.d_u)) >= lmin


# -- transport ------------------------------------------------------------------------


@pytest.mark.parametrize("a,T", [(0.0, 1.0), (1.0, 1.0), (0.5, 2.0), (3.0, 1.0)])
def test_transport_integer_shift_is_identity(a, T):
    m = transport_model(40, 40, a, T)
    u = np.random.default_rng(0).standard_normal(40)
    np.testing.assert_allclose(m.evaluate(u), u, atol=1e-12)


def test_transport_shifts_sinusoid():
    d_u = 50
    x = (np.arange(d_u) + 1) / d_u
    m = transport_model(d_u, 2, 0.25)
    # observation 0 sits at x = 0.5 and traces back to x = 0.25
    got = m.evaluate(np.sin(2 * np.pi * x))[0]
    assert abs(got - 1.0) <= (2 * np.pi) ** 2 / (8 * d_u**2)


def test_transport_interpolation_error_is_second_order():
    errs = []
    for d_u in (50, 100, 200):
        x = (np.arange(d_u) + 1) / d_u
        errs.append(abs(transport_model(d_u, 2, 0.2 + 1 / (3 * d_u)).evaluate(np.sin(2 * np.pi * x))[0]
                        - np.sin(2 * np.pi * (0.3 - 1 / (3 * d_u)))))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.25)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.25)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.integers(1, 60), st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
def test_transport_linearity(d_u, d_y, a, seed):
    rng = np.random.default_rng(seed)
    m = transport_model(d_u, d_y, a)
    u, v = rng.standard_normal((2, d_u))
    al, be = rng.standard_normal(2)
    np.testing.assert_allclose(m.evaluate(al * u + be * v), al * m.evaluate(u) + be * m.evaluate(v), atol=1e-12)


def test_transport_data_noiseless_and_replay():
    m = transport_model(30, 30, 0.3)
    u = np.random.default_rng(0).standard_normal(30)
    np.testing.assert_array_equal(generate_transport_data(m, u, 0.0, 1), m.evaluate(u))
    a = generate_transport_data(m, u, 1e-2, 4)
    assert a.tobytes() == generate_transport_data(m, u, 1e-2, 4).tobytes()


def test_transport_data_noise_level():
    m = transport_model(100, 100, 0.3)
    u = np.zeros(100)
    ms = np.array([np.mean(generate_transport_data(m, u, 1e-2, s) ** 2) for s in range(200)])
    # each entry is 1e-4 chi^2_100 / 100: variance 2e-8 / 100 per repeat
    assert abs(ms.mean() - 1e-4) <= 4 * np.sqrt(2e-8 / 100 / 200)


# -- Darcy solver ------------------------------------------------------------------


def manufactured_error(N):
    xx, yy = grid(N)
    f = 2 * np.pi**2 * np.sin(np.pi * xx) * np.sin(np.pi * yy)
    v = darcy_solve(np.zeros((N, N)), f, N)
    return np.abs(v - np.sin(np.pi * xx) * np.sin(np.pi * yy)).max()


def test_darcy_manufactured_second_order():
    e16, e32, e64 = (manufactured_error(N) for N in (16, 32, 64))
    assert e32 < 1e-2
    assert e16 / e32 == pytest.approx(4.0, rel=0.25)
    assert e32 / e64 == pytest.approx(4.0, rel=0.25)


def test_darcy_zero_source():
    a = np.random.default_rng(0).standard_normal((8, 8))
    np.testing.assert_array_equal(darcy_solve(a, np.zeros((8, 8)), 8), 0.0)


@pytest.mark.parametrize("c", [-1.0, 0.5, 2.0])
def test_darcy_constant_coefficient_scaling(c):
    f = default_source(12)
    v0 = darcy_solve(np.zeros((12, 12)), f, 12)
    np.testing.assert_allclose(darcy_solve(np.full((12, 12), c), f, 12), np.exp(-c) * v0, rtol=1e-12, atol=1e-15)


def test_darcy_residual():
    N = 16
    rng = np.random.default_rng(1)
    a = 0.5 * rng.standard_normal((N, N))
    f = default_source(N)
    v = darcy_solve(a, f, N)
    res = darcy_operator_apply(a, v, N) - f
    assert np.linalg.norm(res) <= 1e-10 * np.linalg.norm(f)


def test_darcy_rejects_small_or_nonfinite():
    with pytest.raises(ValueError):
        darcy_solve(np.zeros((3, 3)), np.zeros((3, 3)), 3)
    a = np.zeros((4, 4))
    a[0, 0] = np.nan
    from deki.models import DarcySolveError

    with pytest.raises(DarcySolveError):
        darcy_solve(a, np.ones((4, 4)), 4)


# -- KL basis -----------------------------------------------------------------------


def test_kl_eps_one_gives_empty_basis():
    assert kl_basis(0.1, 0.1, 0.1, 8, 1.0).d_u == 0


def test_kl_truncation_diagonal_kernel():
    assert kl_truncation_dim(np.ones(4), 0.5) == 2


def test_kl_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        kl_basis(0.1, 0.1, 0.1, 8, 0.0)


def test_kl_basis_properties():
    N, eps = 16, 1e-3
    kl = kl_basis(0.1, 0.2, 0.05, N, eps)
    lam = kl.eigvals
    assert np.all(lam >= 0) and np.all(np.diff(lam) <= 0)
    tail = lam[kl.d_u :].sum()
    assert tail <= eps * lam.sum() * (1 + 1e-12)
    assert lam[kl.d_u - 1 :].sum() > eps * lam.sum()
    gram = kl.modes.T @ kl.modes / N**2
    np.testing.assert_allclose(gram, np.eye(kl.d_u), atol=1e-8)
    # the retained modes rebuild the kernel matrix; the discarded part has
    # trace at most eps tr(K), which also bounds its Frobenius norm
    xx, yy = grid(N)
    x, y = xx.ravel(), yy.ravel()
    k = 0.1**2 * np.exp(-((x[:, None] - x) ** 2) / (2 * 0.2**2) - ((y[:, None] - y) ** 2) / (2 * 0.05**2))
    rebuilt = kl.basis @ kl.basis.T
    assert np.linalg.norm(rebuilt - k) <= (eps + 1e-8) * np.trace(k)
    assert np.linalg.norm(rebuilt - k) <= 2 * eps * np.linalg.norm(k)


def test_kl_setup_one_dimension():
    assert abs(kl_basis(0.1, 0.1, 0.1, 32, 1e-3).d_u - 136) <= 3


# -- Darcy model ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_darcy():
    return darcy_model(kl_basis(0.1, 0.1, 0.1, 16, 1e-3))


def test_subblock_centres():
    pts = subblock_centres(8)
    assert pts.shape == (64, 2)
    np.testing.assert_allclose(pts[0], [1 / 16, 1 / 16])


def test_interpolation_reproduces_bilinear_functions():
    N = 10
    xx, yy = grid(N)
    pts = np.random.default_rng(0).uniform(0.05, 0.95, (20, 2))
    w = interpolation_matrix(pts, N)
    f = (1 + 2 * xx + 3 * yy + xx * yy).ravel()
    np.testing.assert_allclose(w @ f, 1 + 2 * pts[:, 0] + 3 * pts[:, 1] + pts[:, 0] * pts[:, 1], atol=1e-12)


def test_interpolation_rejects_outside_points():
    with pytest.raises(ValueError):
        interpolation_matrix([[1.2, 0.5]], 8)


def test_darcy_model_zero_coefficients(small_darcy):
    m = small_darcy
    v = darcy_solve(np.zeros((16, 16)), default_source(16), 16)
    np.testing.assert_allclose(m.evaluate(np.zeros(m.d_u)), m.obs @ v.ravel())
    assert m.d_y == 64


def test_darcy_model_linear_in_source(small_darcy):
    kl = small_darcy.kl
    u = np.random.default_rng(0).standard_normal(kl.d_u)
    doubled = darcy_model(kl, source=2 * default_source(16))
    np.testing.assert_allclose(doubled.evaluate(u), 2 * small_darcy.evaluate(u), rtol=1e-12)


def test_darcy_model_central_difference(small_darcy):
    m = small_darcy
    u0 = np.zeros(m.d_u)
    ref = m.jacobian(u0, 1e-3, order=4)
    for i in (0, 5, 20):
        e = np.zeros(m.d_u)
        errs = []
        for h in (0.2, 0.1, 0.05, 1e-4):
            e[i] = h
            errs.append(np.abs((m.peek(u0 + e) - m.peek(u0 - e)) / (2 * h) - ref[:, i]).max())
        scale = np.abs(ref[:, i]).max()
        assert errs[-1] <= 1e-6 * scale
        # halving h cuts the error by about four
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.25)
        assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.25)


# -- grid files ------------------------------------------------------------------------


def test_grid_csv_roundtrip(tmp_path):
    v = np.random.default_rng(0).standard_normal((5, 5))
    path = tmp_path / "f.csv"
    write_grid_csv(path, v)
    assert path.read_text().splitlines()[0] == "5"
    np.testing.assert_array_equal(read_grid_csv(path), v)
