import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drdidsc.data import assign_folds
from drdidsc.errors import ConfigError, SingularSystem, Underidentified
from drdidsc.nuisance import fit_outcome_surfaces
from drdidsc.simulation import DgpSpec, generate_dgp
from drdidsc.weights import WeightOptions, build_system, solve_batch, solve_weights, weight_surface

from conftest import make_panel


def test_identical_surfaces_give_zero_system():
    m = np.tile(np.array([1.0, 2.0, 3.0, 4.0]), (4, 1))
    M, m1 = build_system(m)
    assert M.shape == (3, 2) and np.all(M == 0) and np.all(m1 == 0)


def test_two_controls_shape():
    m = np.arange(12.0).reshape(3, 4) ** 1.5
    M, m1 = build_system(m)
    assert M.shape == (3, 1)
    assert np.allclose(M[:, 0], m[1, :3] - m[2, :3])
    assert np.allclose(m1, m[0, :3] - m[2, :3])


def test_hand_built_three_groups():
    # rows are groups 1..3, columns periods 1..3; only periods 1, 2 enter
    m = np.array([[1.0, 2.0, 3.0], [4.0, 6.0, 9.0], [0.0, 1.0, 1.0]])
    M, m1 = build_system(m)
    assert M.tolist() == [[4.0], [5.0]]
    assert m1.tolist() == [1.0, 1.0]
    sol = solve_weights(M, m1)
    # w0 = (4 + 5) / (16 + 25)
    assert sol.w0[0] == pytest.approx(9 / 41, abs=1e-14)
    assert sol.w.sum() == 1.0
    assert sol.min_eig == pytest.approx(41.0)
    assert sol.residual == pytest.approx(np.linalg.norm(np.array([4.0, 5.0]) * 9 / 41 - 1))


def test_rc_system_matches_panel_layout():
    m = np.random.default_rng(0).normal(size=(4, 5))
    Mp, mp = build_system(m, mode="panel")
    Mr, mr = build_system(m, mode="rc")
    assert np.array_equal(Mp, Mr) and np.array_equal(mp, mr)
    with pytest.raises(ConfigError):
        build_system(m, mode="wide")


def test_first_column_target():
    rng = np.random.default_rng(1)
    M = rng.normal(size=(5, 3))
    sol = solve_weights(M, M[:, 0])
    assert np.allclose(sol.w, [1, 0, 0, 0], atol=1e-12)
    assert sol.w.sum() == 1.0


def test_zero_system_singular():
    with pytest.raises(SingularSystem):
        solve_weights(np.zeros((3, 2)), np.ones(3))


def test_square_system_recovery():
    rng = np.random.default_rng(2)
    w_star = np.array([0.3, 0.25, 0.45, -0.1, 0.1])
    M = rng.normal(size=(4, 4))
    sol = solve_weights(M, M @ w_star[:-1])
    assert np.max(np.abs(sol.w - w_star)) < 1e-10
    assert sol.residual < 1e-10


def test_underidentified():
    with pytest.raises(Underidentified):
        solve_weights(np.ones((2, 3)), np.ones(2))


def test_collinear_columns_fail_unless_ridge():
    rng = np.random.default_rng(3)
    a = rng.normal(size=5)
    M = np.column_stack([a, 2 * a, rng.normal(size=5)])
    m1 = rng.normal(size=5)
    with pytest.raises(SingularSystem):
        solve_weights(M, m1)
    sol = solve_weights(M, m1, WeightOptions(ridge=1e-6))
    assert np.all(np.isfinite(sol.w)) and sol.w.sum() == 1.0


def test_floor_is_relative_to_scale():
    rng = np.random.default_rng(4)
    M = rng.normal(size=(5, 3))
    m1 = rng.normal(size=5)
    a = solve_weights(M, m1)
    b = solve_weights(M * 1e-6, m1 * 1e-6)
    assert np.allclose(a.w, b.w, atol=1e-10)
    with pytest.raises(SingularSystem):
        solve_weights(M, m1, WeightOptions(min_eig_floor=10.0))


def test_invalid_options():
    with pytest.raises(ConfigError):
        WeightOptions(min_eig_floor=-1)
    with pytest.raises(ConfigError):
        WeightOptions(ridge=-1.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 6), extra=st.integers(0, 3))
def test_exact_sum_bitwise(seed, k, extra):
    rng = np.random.default_rng(seed)
    scale = 10.0 ** rng.uniform(-3, 3)
    M = rng.normal(size=(20, k + extra, k)) * scale
    m1 = rng.normal(size=(20, k + extra)) * scale
    w, _, _, failed = solve_batch(M, m1)
    assert np.all(w[~failed].sum(axis=1) == 1.0)


def test_nonneg_projection_lands_on_simplex():
    rng = np.random.default_rng(5)
    M = rng.normal(size=(6, 3))
    target = np.array([1.4, -0.6, 0.5])  # w0 of an infeasible point, last weight -0.3
    m1 = M @ target
    free = solve_weights(M, m1)
    assert free.w.min() < 0
    proj = solve_weights(M, m1, WeightOptions(nonneg=True))
    assert proj.w.min() >= 0 and proj.w.sum() == 1.0
    # projected solution is no better than the free one and beats the simplex corners
    assert proj.residual >= free.residual - 1e-12
    A = np.column_stack([M, np.zeros(6)])
    for j in range(4):
        assert proj.residual <= np.linalg.norm(A[:, j] - m1) + 1e-9


def test_nonneg_keeps_interior_solution():
    rng = np.random.default_rng(6)
    M = rng.normal(size=(6, 3))
    w0 = np.array([0.2, 0.3, 0.1])
    a = solve_weights(M, M @ w0)
    b = solve_weights(M, M @ w0, WeightOptions(nonneg=True))
    assert np.allclose(a.w, b.w, atol=1e-6)


def _surface_from_array(m):
    class S:
        pass

    s = S()
    s.m_gt = m
    s.point_id = np.arange(len(m))
    s.point_rep = np.arange(len(m))
    s.n_points = len(m)
    return s


def test_reference_group_independence():
    rng = np.random.default_rng(7)
    m = rng.normal(size=(50, 5, 6))
    base = weight_surface(_surface_from_array(m)).w
    perm = np.array([0, 3, 1, 4, 2])
    permuted = weight_surface(_surface_from_array(m[:, perm])).w
    # permuted column j holds control group perm[j+1]
    assert np.allclose(permuted, base[:, perm[1:] - 1], atol=1e-8)


def test_location_and_scale_invariance():
    rng = np.random.default_rng(8)
    m = rng.normal(size=(5, 6))
    M, m1 = build_system(m)
    M2, m12 = build_system(m + 3.7)
    assert np.allclose(M, M2, atol=1e-12) and np.allclose(m1, m12, atol=1e-12)
    M3, m13 = build_system(2.5 * m)
    assert np.allclose(M3, 2.5 * M) and np.allclose(m13, 2.5 * m1)
    assert np.allclose(solve_weights(M3, m13).w, solve_weights(M, m1).w, atol=1e-12)


def test_covariate_free_dataset_broadcasts_one_vector():
    ds = make_panel(n=300, G=4, T=5, d=0, seed=2)
    folds = assign_folds(ds, 2, 0)
    surf = fit_outcome_surfaces(ds, folds)
    ws = weight_surface(surf, ds, folds)
    for k in (1, 2):
        rows = ws.w[folds.members(k)]
        assert np.all(rows == rows[0])
    assert ws.n_points == 2


def test_pt_only_uniform_and_fixed():
    ds = make_panel(n=200, G=4, T=4, seed=1)
    folds = assign_folds(ds, 2, 0)
    surf = fit_outcome_surfaces(ds, folds)
    ws = weight_surface(surf, ds, folds, opts=WeightOptions(pt_only=True))
    assert np.allclose(ws.w, 1 / 3) and np.all(ws.w.sum(axis=1) == 1.0)
    assert ws.source == "uniform"
    fx = weight_surface(surf, ds, folds, opts=WeightOptions(fixed=(0.5, 0.25, 0.25)))
    assert np.all(fx.w == [0.5, 0.25, 0.25])
    with pytest.raises(ConfigError):
        weight_surface(surf, ds, folds, opts=WeightOptions(fixed=(0.5, 0.25)))
    with pytest.raises(ConfigError):
        weight_surface(surf, ds, folds, opts=WeightOptions(fixed=(0.5, 0.25, 0.3)))


def test_majority_failure_aborts_and_partial_drops():
    m = np.random.default_rng(9).normal(size=(10, 4, 5))
    m[:6, 1:] = m[:6, 1:2]  # controls identical at 6 of 10 points
    with pytest.raises(SingularSystem, match="6 of 10"):
        weight_surface(_surface_from_array(m), opts=WeightOptions(allow_partial=True))
    m[:6, 1:] = np.random.default_rng(9).normal(size=(6, 3, 5))
    m[:2, 1:] = m[:2, 1:2]
    with pytest.raises(SingularSystem):
        weight_surface(_surface_from_array(m))
    ws = weight_surface(_surface_from_array(m), opts=WeightOptions(allow_partial=True))
    assert ws.failed.tolist() == [True, True] + [False] * 8
    assert ws.n_failed_points == 2 and ws.notes


def test_dgp1_weights_track_truth():
    spec = DgpSpec(kind="dgp1", n=3000)
    cal = spec.resolve_calibration()
    ds, _, truth = generate_dgp(spec, np.random.default_rng(0), cal)
    folds = assign_folds(ds, 2, 0)
    ws = weight_surface(fit_outcome_surfaces(ds, folds), ds, folds)
    grid = truth["grid"]
    est = np.column_stack([np.interp(grid, *_sorted_mean(ds.x[:, 0], ws.w[:, j])) for j in range(ws.w.shape[1])])
    err = np.abs(est - truth["weights_grid"]).mean()
    assert err < 0.1


def _sorted_mean(x, v):
    o = np.argsort(x)
    return x[o], v[o]
