import math

import numpy as np
import pytest

import bsvi
from bsvi import convex, generators
from bsvi.analysis import (
    apriori_audit,
    default_subdiff_probes,
    epsilon_rate_fit,
    path_norms,
    solution_residuals,
    stability_audit,
    yosida_audit,
)
from bsvi.lattice import AdaptedProcess, build_tree
from bsvi.problems import (
    box_linear_problem,
    delayed_box_problem,
    quadratic_problem,
    terminal_constant,
    terminal_linear,
)
from bsvi.solver import EpsilonTableRow, SolverConfig, prox_step_solve, \
    picard_solve, solve_bsvi, solve_penalized

pytestmark = pytest.mark.filterwarnings("ignore:well-posedness gate failed")


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def constant_process(tree, value, levels=None):
    levels = levels if levels is not None else tree.grid.n_steps + 1
    return AdaptedProcess(tree, [np.full((tree.level_size(i), 1), value)
                                 for i in range(levels)])


def test_path_norms_zero_and_constant():
    tree = build_tree(4, 1.0, 1)
    zeros = constant_process(tree, 0.0)
    rep = path_norms(zeros, tree)
    assert rep.s2 == 0.0 and rep.h2 == 0.0
    ones = constant_process(tree, 1.0)
    rep = path_norms(ones, tree)
    assert rep.s2 == pytest.approx(1.0)
    assert rep.h2 == pytest.approx(1.0)


def test_path_norms_brownian_two_steps():
    # hand enumeration of the four paths: h2 = 0.5*(E W1^2 + E W2^2) = 0.75,
    # s2 = mean of pathwise max(0, 0.5, W2^2) = (2 + 0.5 + 0.5 + 2)/4
    tree = build_tree(2, 1.0, 1)
    w = tree.path_sums()
    rep = path_norms(w, tree)
    assert rep.h2 == pytest.approx(0.75, abs=1e-12)
    assert rep.s2 == pytest.approx(1.25, abs=1e-12)


def leaf_enumeration_norms(process, tree, beta):
    """Independent oracle: explicit loop over every leaf path."""
    n = tree.grid.n_steps
    dt = tree.grid.dt
    last = process.last_level
    sups = []
    for leaf in range(tree.level_size(last)):
        best = 0.0
        for i in range(last + 1):
            node = leaf >> (tree.bm_dim * (last - i))
            val = process.values[i][node]
            best = max(best, math.exp(beta * i * dt) * float(np.sum(val ** 2)))
        sups.append(best)
    s2 = float(np.mean(sups))
    levels = range(1, n + 1) if last == n else range(last + 1)
    h2 = 0.0
    for i in levels:
        h2 += dt * math.exp(beta * i * dt) * float(
            np.mean(np.sum(process.values[i] ** 2, axis=tuple(range(1, process.values[i].ndim)))))
    return s2, h2


@pytest.mark.parametrize("beta", [0.0, 1.3])
def test_path_norms_against_leaf_enumeration(beta):
    tree = build_tree(4, 0.8, 1)
    rng = np.random.default_rng(17)
    proc = AdaptedProcess(tree, [rng.normal(size=(tree.level_size(i), 2))
                                 for i in range(5)])
    zproc = AdaptedProcess(tree, [rng.normal(size=(tree.level_size(i), 2, 1))
                                  for i in range(4)])
    for p in (proc, zproc):
        rep = path_norms(p, tree, beta)
        s2, h2 = leaf_enumeration_norms(p, tree, beta)
        assert rep.s2 == pytest.approx(s2, abs=1e-12)
        assert rep.h2 == pytest.approx(h2, abs=1e-12)


# ---------------------------------------------------------------------------
# rate fit
# ---------------------------------------------------------------------------

def synthetic_table(fn):
    eps = [2.0 ** -k for k in range(8)]
    return [EpsilonTableRow(epsilon=a, epsilon_next=b, dy_s2=fn(a + b),
                            dz_h2=0.0, grad_h2_sq=0.0, phi_resolvent_h1=0.0)
            for a, b in zip(eps, eps[1:])]


def test_rate_fit_recovers_planted_slopes():
    fit = epsilon_rate_fit(synthetic_table(lambda s: math.sqrt(s)))
    assert fit.slope == pytest.approx(0.5, abs=1e-12)
    assert fit.residual == pytest.approx(0.0, abs=1e-12)
    fit = epsilon_rate_fit(synthetic_table(lambda s: 3.0 * s))
    assert fit.slope == pytest.approx(1.0, abs=1e-12)


def test_rate_fit_exact_and_underdetermined():
    fit = epsilon_rate_fit(synthetic_table(lambda s: 0.0))
    assert fit.exact
    table = synthetic_table(lambda s: 0.0)[:3] + synthetic_table(lambda s: s)[:2]
    with pytest.raises(ValueError, match="at least 4"):
        epsilon_rate_fit(table)


# ---------------------------------------------------------------------------
# stability
# ---------------------------------------------------------------------------

def test_stability_identical_data_is_vacuous():
    tree = build_tree(3, 1.0, 1)
    xi = terminal_linear(tree, 0.0, 1.0)
    gen = generators.ZeroGen()
    sol = picard_solve(tree, xi, gen)
    audit = stability_audit(sol, sol, xi, xi, gen, gen, tree)
    assert audit.vacuous
    assert audit.lhs == 0.0


@pytest.mark.parametrize("beta", [0.0, 0.8])
def test_stability_martingale_shift_constant(beta):
    # shifting the terminal by delta shifts Y by delta and leaves Z alone:
    # the empirical constant is exactly exp(beta * T)
    tree = build_tree(3, 0.75, 1)
    gen = generators.ZeroGen()
    xi = terminal_linear(tree, 0.0, 1.0)
    delta = 0.37
    xi_shift = xi + delta
    sol_a = picard_solve(tree, xi, gen)
    sol_b = picard_solve(tree, xi_shift, gen)
    audit = stability_audit(sol_a, sol_b, xi, xi_shift, gen, gen, tree, beta)
    assert audit.empirical_constant == pytest.approx(
        math.exp(beta * tree.grid.horizon), abs=1e-10)


def test_stability_constant_stable_under_dt_halving():
    consts = []
    for n_steps in (2, 4):
        tree = build_tree(n_steps, 0.1, 1)
        lag = 0.05  # a grid point at both resolutions

        def drift(t, y, z, past_y, past_z):
            return -y + 0.3 * past_z(-lag)[:, 0]

        gen = generators.CustomGenerator(fn=drift, declared_instant=1.0,
                                         declared_delay=0.09,
                                         alpha=generators.Dirac(-lag))
        phi = convex.Quadratic(1.0)
        w_T = tree.path_sums().values[-1]
        xi = 0.2 + 0.5 * w_T
        xi_pert = xi + 0.05 * np.sin(3.0 * w_T)
        config = SolverConfig(picard_tol=1e-12)
        sol_a = solve_penalized(tree, xi, gen, phi, 0.25, config)
        sol_b = solve_penalized(tree, xi_pert, gen, phi, 0.25, config)
        audit = stability_audit(sol_a, sol_b, xi, xi_pert, gen, gen, tree)
        consts.append(audit.empirical_constant)
    assert consts[1] <= 2.0 * consts[0]
    assert consts[0] <= 2.0 * consts[1]


def test_stability_drift_perturbation_is_finite():
    tree = build_tree(3, 0.75, 1)
    xi = terminal_linear(tree, 0.1, 1.0)
    gen_a = generators.linear_scalar(0.4, 0.0)
    gen_b = generators.linear_scalar(0.4, 0.2)
    sol_a = picard_solve(tree, xi, gen_a)
    sol_b = picard_solve(tree, xi, gen_b)
    audit = stability_audit(sol_a, sol_b, xi, xi, gen_a, gen_b, tree)
    assert not audit.vacuous
    assert np.isfinite(audit.empirical_constant)
    assert audit.lhs > 0


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------

def test_residuals_zero_phi():
    tree = build_tree(4, 1.0, 1)
    xi = terminal_linear(tree, 0.2, 1.0)
    gen = generators.linear_scalar(0.3, 0.1)
    sol = picard_solve(tree, xi, gen)
    rep = solution_residuals(sol, xi, gen, convex.Zero(), tree)
    assert rep.equation_residual <= 1e-12
    assert rep.subdiff_residual <= 1e-12
    assert rep.phi_integrability == 0.0


@pytest.mark.parametrize("builder", [box_linear_problem, quadratic_problem,
                                     delayed_box_problem])
def test_residuals_penalized_and_prox(builder):
    tree, xi, gen, phi = builder()
    pen = solve_penalized(tree, xi, gen, phi, 2.0 ** -10)
    rep = solution_residuals(pen, xi, gen, phi, tree)
    assert rep.equation_residual <= 1e-12
    assert rep.subdiff_residual <= 1e-8
    assert np.isfinite(rep.phi_integrability)
    pr = prox_step_solve(tree, xi, gen, phi)
    rep = solution_residuals(pr, xi, gen, phi, tree)
    assert rep.equation_residual <= 1e-12
    assert rep.subdiff_residual <= 1e-10


def test_default_probe_set_contains_corners_and_origin():
    tree, xi, gen, phi = box_linear_problem(3)
    probes = default_subdiff_probes(phi, xi)
    stacked = np.stack(probes)
    assert any(np.allclose(p, 0.0) for p in stacked)
    assert any(np.allclose(p, phi.lo) for p in stacked)
    assert any(np.allclose(p, phi.hi) for p in stacked)


# ---------------------------------------------------------------------------
# schedule audits (smoke level; the full verdicts run in the acceptance suite)
# ---------------------------------------------------------------------------

def test_apriori_audit_epsilon_free_when_phi_inactive():
    tree = build_tree(3, 1.0, 1)
    xi = terminal_linear(tree, 0.0, 1.0)
    gen = generators.ZeroGen()
    config = SolverConfig(epsilon_schedule=(1.0, 0.25, 0.0625))
    res = solve_bsvi(tree, xi, gen, convex.Zero(), config)
    audit = apriori_audit(res.per_epsilon, xi, gen, tree)
    consts = [r.empirical_constant for r in audit.rows]
    assert audit.uniform_ok
    assert max(consts) == pytest.approx(min(consts))


def test_apriori_audit_vacuous_on_zero_problem():
    tree = build_tree(2, 1.0, 1)
    xi = terminal_constant(tree, 0.0)
    gen = generators.ZeroGen()
    config = SolverConfig(epsilon_schedule=(1.0, 0.5))
    res = solve_bsvi(tree, xi, gen, convex.Zero(), config)
    audit = apriori_audit(res.per_epsilon, xi, gen, tree)
    assert audit.uniform_ok
    assert all(r.lhs == 0.0 for r in audit.rows)


def test_yosida_audit_zero_phi_is_identically_zero():
    tree = build_tree(3, 1.0, 1)
    xi = terminal_linear(tree, 0.0, 1.0)
    gen = generators.ZeroGen()
    config = SolverConfig(epsilon_schedule=(1.0, 0.25, 0.0625))
    res = solve_bsvi(tree, xi, gen, convex.Zero(), config)
    audit = yosida_audit(res.per_epsilon, convex.Zero(), xi, gen, tree)
    assert audit.uniform_ok
    for row in audit.grad_rows + audit.value_rows + audit.gap_rows:
        assert row.lhs == 0.0


def test_yosida_audit_quadratic_gap_constant():
    # with phi = c|y|^2/2 the resolvent gap is eps*c*y/(1+eps*c): sanity-check
    # the audited value against the closed form at one epsilon
    tree = build_tree(2, 1.0, 1)
    xi = terminal_constant(tree, 1.5)
    gen = generators.ZeroGen()
    phi = convex.Quadratic(2.0)
    eps = 0.5
    sol = solve_penalized(tree, xi, gen, phi, eps)
    audit = yosida_audit([(eps, sol)], phi, xi, gen, tree)
    shrink = eps * 2.0 / (1 + eps * 2.0)
    expected = max(float(np.mean((shrink * y) ** 2)) for y in sol.Y.values)
    assert audit.gap_rows[0].lhs == pytest.approx(expected, abs=1e-12)
