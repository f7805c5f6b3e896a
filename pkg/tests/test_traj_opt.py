"""Collocation model, solver and table checks."""

import dataclasses

import numpy as np
import pytest

from pushrecovery.phase_space import PipmParams, RiemannianCell, lateral_cells, lateral_center
from pushrecovery.traj_opt.model import (
    NZ, BadTransition, DimensionMismatch, ReducedModelConfig, ReducedProblem, TransitionGeometry, build_nlp,
    collision_values, defect_jacobian, hermite_simpson_defects,
)
from pushrecovery.traj_opt.solver import FEASIBLE, SolverOptions, solve, violation
from pushrecovery.traj_opt.table import (
    CROSSED, WIDE, Candidate, FeasibilityTable, TableTampered, build_feasibility_table, check_transition,
    enumerate_candidates, plan_candidate, read_table, snap_width, solve_transition, write_table,
)

P = PipmParams()
CFG = ReducedModelConfig()
STEADY = Candidate(WIDE, RiemannianCell(0, 2), RiemannianCell(0, 0), RiemannianCell(0, 2))


def steady_problem(side=1):
    _, _, plan = plan_candidate(STEADY, P)
    sag, lat = STEADY.sag_c.center(P), lateral_center(STEADY.lat_c, P)
    return build_nlp(TransitionGeometry(sag, lat, plan, side), CFG, P)


def central_jacobian(fn, x, eps=1e-6):
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        cols.append((fn(x + e) - fn(x - e)) / (2 * eps))
    return np.stack(cols, axis=1)


def test_defect_gradient_matches_finite_differences():
    problem = steady_problem()
    J = defect_jacobian(problem)
    for seed in range(3):
        X = problem.x0 + np.random.default_rng(seed).normal(scale=0.1, size=problem.n)
        fd = central_jacobian(lambda z: hermite_simpson_defects(problem, z), X)
        assert np.max(np.abs(fd - J)) <= 1e-5 * max(1.0, np.max(np.abs(J)))


def test_linear_defects_equal_direct_evaluation():
    problem = steady_problem()
    X = problem.x0 + np.random.default_rng(7).normal(scale=0.05, size=problem.n)
    lin = problem.defect_matrix @ X - problem.defect_rhs
    assert np.allclose(lin, hermite_simpson_defects(problem, X), atol=1e-12)


def test_path_constraint_gradient():
    red = ReducedProblem(steady_problem())
    y = red.x0 + np.random.default_rng(3).normal(scale=0.01, size=red.x0.size)
    _, J = red.ineq(y)
    fd = central_jacobian(lambda z: red.ineq(z)[0], y)
    assert np.max(np.abs(fd - J)) <= 1e-5 * max(1.0, np.max(np.abs(J)))
    f, g = red.objective(y)
    fd_g = central_jacobian(lambda z: np.array([red.objective(z)[0]]), y)[0]
    assert np.allclose(g, fd_g, rtol=1e-6, atol=1e-6)


def test_null_space_parametrization():
    problem = steady_problem()
    red = ReducedProblem(problem)
    assert red.linear_residual < 1e-8
    y = np.random.default_rng(1).normal(size=red.Z.shape[1])
    assert np.max(np.abs(problem.A_eq @ red.lift(y) - problem.b_eq)) < 1e-8


def test_steady_transition_solves_and_survives_resampling():
    _, _, plan = plan_candidate(STEADY, P)
    sag, lat = STEADY.sag_c.center(P), lateral_center(STEADY.lat_c, P)
    sol, X, problem = solve_transition(sag, lat, plan, CFG, P)
    assert sol.status == FEASIBLE
    dense = build_nlp(problem.geometry, dataclasses.replace(CFG, samples_per_interval=5 * CFG.samples_per_interval,
                                                         backoff=0.0), P)
    h, _ = dense.ineq(X)
    assert np.max(h) <= 1e-6
    assert np.max(np.abs(hermite_simpson_defects(problem, X))) <= 1e-6


def test_mirrored_side_gives_mirrored_solution():
    _, _, plan = plan_candidate(STEADY, P)
    sag, lat = STEADY.sag_c.center(P), lateral_center(STEADY.lat_c, P)
    right, Xr, _ = solve_transition(sag, lat, plan, CFG, P, side=1)
    left, Xl, _ = solve_transition(sag, lat, plan, CFG, P, side=-1)
    assert right.feasible and left.feasible
    assert left.objective == pytest.approx(right.objective, rel=1e-6)
    flip = np.ones(NZ)
    flip[[1, 3, 5, 8, 11]] = -1
    Zr, Zl = Xr.reshape(-1, NZ), Xl.reshape(-1, NZ)
    assert np.allclose(Zl, Zr * flip, atol=1e-4)


def test_collision_arithmetic():
    cfg = ReducedModelConfig(d_min=0.1, pairs=2)
    # fractions 0.25 and 0.75; feet 0.3 apart laterally, hips 0.2 apart
    vals = collision_values(np.zeros(3), np.array([0.0, -0.3, 0.0]), 0.2, cfg)
    d = [0.2 * 0.75 + 0.25 * 0.3, 0.2 * 0.25 + 0.75 * 0.3]
    assert np.allclose(vals, [0.01 - d[0] ** 2, 0.01 - d[1] ** 2], atol=1e-15)
    # lower points coincide when the swing foot sits a third of the hip offset inward
    crossed = collision_values(np.zeros(3), np.array([0.0, 0.2 / 3, 0.0]), 0.2, cfg)
    assert crossed[1] == pytest.approx(0.01, abs=1e-15)


def test_model_input_validation():
    problem = steady_problem()
    with pytest.raises(DimensionMismatch):
        problem.unpack(np.zeros(problem.n + 1))
    _, _, plan = plan_candidate(STEADY, P)
    sag, lat = STEADY.sag_c.center(P), lateral_center(STEADY.lat_c, P)
    with pytest.raises(BadTransition):
        build_nlp(TransitionGeometry(sag, lat, plan, side=0), CFG, P)
    with pytest.raises(BadTransition):
        build_nlp(TransitionGeometry(sag, lat, dataclasses.replace(plan, step_length=0.0)), CFG, P)
    with pytest.raises(ValueError):
        ReducedModelConfig(leg_min=1.2)
    with pytest.raises(ValueError):
        ReducedModelConfig(backoff=-1e-4)
    with pytest.raises(ValueError):
        ReducedModelConfig(nodes=2)


class Toy:
    """min x^2 + y^2  s.t.  x + y = 1,  x >= 0.7."""

    x0 = np.array([0.0, 0.0])

    def objective(self, z):
        return float(z @ z), 2 * z

    def eq(self, z):
        return np.array([z[0] + z[1] - 1.0]), np.array([[1.0, 1.0]])

    def ineq(self, z):
        return np.array([0.7 - z[0]]), np.array([[-1.0, 0.0]])


class Infeasible(Toy):
    def ineq(self, z):
        return np.array([z[0] - 2.0, 3.0 - z[0]]), np.array([[1.0, 0.0], [-1.0, 0.0]])


def test_solver_on_known_problem():
    sol = solve(Toy())
    assert sol.feasible
    assert np.allclose(sol.x, [0.7, 0.3], atol=1e-6)
    assert sol.objective == pytest.approx(0.58, abs=1e-6)


def test_solver_reports_infeasible():
    sol = solve(Infeasible(), SolverOptions(max_outer=40))
    assert not sol.feasible
    assert sol.max_violation > 0.1


def test_violation_measure():
    assert violation(np.array([0.1, -0.3]), np.array([-1.0, 0.2])) == pytest.approx(0.3)
    assert violation(np.zeros(0), np.array([-1.0])) == 0.0


def test_candidate_enumeration():
    cands = enumerate_candidates()
    crossed = [c for c in cands if c.family == CROSSED]
    assert len(crossed) == 9 * 9 * 9
    assert len(cands) == len({c.key for c in cands})
    assert all(c.lat_c.vel < 0 for c in crossed)
    assert len(cands) == 9 * 9 * len(lateral_cells())


def test_snap_width_prefers_wider_on_ties():
    assert snap_width(0.0, P) == 1
    assert snap_width(P.step_widths[1], P) == 2
    assert snap_width(-P.step_widths[2] - 1.0, P) == -3


def test_table_roundtrip_and_tamper(tmp_path):
    cands = [STEADY, Candidate(CROSSED, RiemannianCell(0, 3), RiemannianCell(0, -1), RiemannianCell(0, 2))]
    table = build_feasibility_table(CFG, P, candidates=cands)
    path = tmp_path / "t.csv"
    write_table(table, str(path), "abc")
    back, meta = read_table(str(path), P, CFG)
    assert back.to_csv() == table.to_csv()
    assert meta["config_hash"] == "abc" and meta["rows"] == 2
    assert back.lookup(*STEADY.key).feasible
    path.write_text(path.read_text().replace("feasible", "infeasible", 1))
    with pytest.raises(TableTampered):
        read_table(str(path), P, CFG)


def test_duplicate_rows_rejected():
    table = FeasibilityTable([], P, CFG)
    assert len(table) == 0
    rec = check_transition(STEADY, CFG, P)
    with pytest.raises(ValueError):
        FeasibilityTable([rec, rec], P, CFG)
