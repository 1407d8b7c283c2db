import json

import numpy as np
import pytest
from scipy.optimize import approx_fprime

from conftest import FIXTURE_JQ, matrix_lpf, scalar_lpf
from vvcdesign.design import (DesignProblem, _Evaluator, box_lower, design_objective, design_to_dict,
                              equilibrium_voltage, load_design, optimize_slopes, save_design, start_points)
from vvcdesign.errors import DesignError, ModelMismatchError
from vvcdesign.linmodels import ScenarioOffset
from vvcdesign.stability import check_stability


def scalar_problem(beta, **kw):
    return DesignProblem(scalar_lpf(), ScenarioOffset(np.array([1.04])), 1.0, beta, **kw)


def fixture_problem(criterion="rho", beta=0.06, v=1.04, **kw):
    return DesignProblem(matrix_lpf(FIXTURE_JQ), ScenarioOffset(np.full(2, v)), 1.0, beta,
                         criterion=criterion, **kw)


def test_equilibrium_scalar_matches_iteration():
    v = 1.04
    for _ in range(200):  # v[t+1] = Jq k (v[t] - v_r) + v_tilde
        v = 2.0 * -0.25 * (v - 1.0) + 1.04
    vs = equilibrium_voltage(np.array([[2.0]]), np.array([-0.25]), np.array([1.04]), 1.0)
    assert vs[0] == pytest.approx(v, abs=1e-14)
    assert vs[0] == pytest.approx(1.54 / 1.5, abs=1e-14)


def test_equilibrium_trivial_cases():
    Jq = np.random.default_rng(0).uniform(0.1, 1, (3, 3))
    vt = np.array([1.01, 0.98, 1.03])
    assert np.allclose(equilibrium_voltage(Jq, np.zeros(3), vt, 1.0), vt)
    assert np.allclose(equilibrium_voltage(Jq, np.array([-0.3, 0, -0.2]), np.ones(3), 1.0), 1.0)


def test_equilibrium_singular():
    with pytest.raises(DesignError):
        equilibrium_voltage(np.array([[2.0]]), np.array([0.5]), np.array([1.0]), 1.0)


def test_scalar_objective_arithmetic():
    dev = (1.54 / 1.5 - 1.0) ** 2
    reg = 0.06 * 0.25**2
    assert design_objective(np.array([-0.25]), scalar_problem(0.06)) == pytest.approx(dev + reg, abs=1e-15)
    assert dev + reg == pytest.approx(0.0044611, abs=1e-7)
    assert design_objective(np.array([-0.25]), scalar_problem(0.0)) == pytest.approx(dev, abs=1e-15)


def test_zero_objective_at_reference():
    prob = fixture_problem(v=1.0)
    assert design_objective(np.zeros(2), prob) == 0.0
    res = optimize_slopes(prob)
    assert np.allclose(res.k, 0.0, atol=1e-8)


def test_scalar_design_hits_stability_boundary():
    res = optimize_slopes(scalar_problem(0.0))
    grid = np.linspace(-0.4995, 0.0, 20001)
    objs = [design_objective(np.array([g]), scalar_problem(0.0)) for g in grid]
    k_grid = grid[int(np.argmin(objs))]
    assert res.k[0] == pytest.approx(k_grid, abs=1e-6)
    assert res.k[0] == pytest.approx(-0.4995, abs=1e-6)
    assert res.v_star[0] == pytest.approx(2.039 / 1.999, abs=1e-6)
    assert res.verdict.feasible


def test_scalar_design_with_regularization_matches_grid():
    prob = scalar_problem(0.06)
    res = optimize_slopes(prob)
    grid = np.linspace(-0.4995, 0.0, 200001)
    objs = np.array([design_objective(np.array([g]), prob) for g in grid])
    assert res.objective <= objs.min() + 1e-10
    assert res.k[0] == pytest.approx(grid[np.argmin(objs)], abs=1e-4)


def test_gradient_matches_finite_differences(study33):
    lpf = study33["lpf"]
    prob = DesignProblem(lpf, lpf.offset(study33["worst"]), 1.0, 0.06)
    ev = _Evaluator(prob)
    rng = np.random.default_rng(0)
    for _ in range(3):
        kg = rng.uniform(-0.5, 0, len(prob.gens))
        fd = approx_fprime(kg, ev.objective, 1e-7)
        assert np.allclose(ev.gradient(kg), fd, rtol=1e-4, atol=1e-7)


def test_objective_reduction_matches_full_solve(study33):
    lpf = study33["lpf"]
    prob = DesignProblem(lpf, lpf.offset(study33["worst"]), 1.0, 0.06)
    ev = _Evaluator(prob)
    kg = np.random.default_rng(1).uniform(-0.5, 0, len(prob.gens))
    assert ev.objective(kg) == pytest.approx(design_objective(ev.full(kg), prob), rel=1e-12)


@pytest.mark.parametrize("criterion", ["rho", "norm2", "holder"])
def test_result_invariants(criterion):
    prob = fixture_problem(criterion)
    res = optimize_slopes(prob)
    assert check_stability(prob.model, res.k, criterion, prob.epsilon).feasible
    assert np.all(res.k <= 0)
    assert res.objective == pytest.approx(res.deviation_term + res.regularization_term, abs=1e-12)
    assert res.starts_tried == 8


def test_sparsity_off_generators():
    Jq = np.random.default_rng(2).uniform(0.2, 1.0, (4, 4))
    prob = DesignProblem(matrix_lpf(Jq, gens=[1, 3]), ScenarioOffset(np.full(4, 1.05)), 1.0, 0.06)
    res = optimize_slopes(prob)
    assert res.k[0] == 0 and res.k[2] == 0 and np.all(res.k[[1, 3]] < 0)


def test_fixture_ordering():
    objs = {c: optimize_slopes(fixture_problem(c)).objective for c in ("rho", "norm2", "holder")}
    assert objs["rho"] <= objs["norm2"] + 1e-6
    assert objs["norm2"] <= objs["holder"] + 1e-6


def test_beta_sweep_shrinks_gains():
    norms = [np.linalg.norm(optimize_slopes(fixture_problem(beta=b)).k) for b in (0.0, 0.01, 0.06, 0.2, 1.0)]
    assert all(a >= b - 1e-6 for a, b in zip(norms, norms[1:]))


def test_deterministic_serialization():
    a = fixture_problem(seed=5, multistart=6)
    b = fixture_problem(seed=5, multistart=6, workers=3)
    da = json.dumps(design_to_dict(optimize_slopes(a), a))
    db = json.dumps(design_to_dict(optimize_slopes(b), b))
    assert da == db


def test_starts_and_bounds():
    prob = fixture_problem(multistart=5, seed=1)
    s = start_points(prob)
    assert np.all(s[0] == 0) and s.shape == (5, 2)
    k_lb = -0.9 * 0.999 / FIXTURE_JQ.diagonal().max()
    assert np.all((s >= k_lb) & (s <= 0))
    assert np.allclose(box_lower(prob), -2 * 0.999 / FIXTURE_JQ.diagonal())


def test_no_generators_gives_empty_design():
    m = matrix_lpf(np.array([[1.0, 0.5], [0.5, 1.0]]), gens=[])
    prob = DesignProblem(m, ScenarioOffset(np.array([1.02, 1.03])), 1.0, 0.06)
    res = optimize_slopes(prob)
    assert np.all(res.k == 0)
    assert res.objective == pytest.approx(0.02**2 + 0.03**2)


@pytest.mark.parametrize("kw", [{"beta": -1}, {"epsilon": 0}, {"epsilon": 1}, {"v_ref": 0.8},
                                {"criterion": "foo"}, {"multistart": 0}])
def test_problem_validation(kw):
    args = {"v_ref": 1.0, "beta": 0.06, **kw}
    with pytest.raises(DesignError):
        DesignProblem(scalar_lpf(), ScenarioOffset(np.array([1.0])), **args)


def test_design_file_round_trip(tmp_path):
    prob = fixture_problem()
    res = optimize_slopes(prob)
    save_design(tmp_path / "d.json", res, prob)
    k, rec = load_design(tmp_path / "d.json", ["1", "2"])
    assert np.array_equal(k, res.k)
    assert rec["criterion"] == "rho" and rec["beta"] == 0.06
    with pytest.raises(DesignError):
        load_design(tmp_path / "d.json", ["1", "9"])


def test_design_file_fingerprint_guard(tmp_path, study33):
    lpf = study33["lpf"]
    prob = DesignProblem(lpf, lpf.offset(study33["worst"]), 1.0, 0.06, multistart=2)
    save_design(tmp_path / "d.json", optimize_slopes(prob), prob)
    with pytest.raises(ModelMismatchError):
        load_design(tmp_path / "d.json", lpf.node_ids, fingerprint="other")
