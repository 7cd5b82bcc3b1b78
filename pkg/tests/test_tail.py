import math
from fractions import Fraction

import numpy as np
import pytest

from brwtail.brw import BrwConfig, conditional_Mn, estimate_tail, estimate_tail_grid, grow_trees
from brwtail.errors import DomainError, GridTooSmall, InconsistentModels, InsufficientCoverage, NotLattice
from brwtail.laws import StepLaw, solve_gamma, tilt, validate_offspring
from brwtail.tables import parse_csv
from brwtail.tail import (
    KappaReport,
    TailCurve,
    conditional_Mn_exact,
    finite_generation_killed,
    finite_generation_tail,
    kappa_lattice,
    kappa_nonlattice,
    killed_prefactor,
    psi_summability_diag,
    solve_u_killed_lattice,
    solve_u_lattice,
)
from brwtail.walk import ladder_stats, sample_global_min
from oracles import max_reach_probability

SKEW_CHILDREN = [0.5, 0.2, 0.3]
SKEW_ATOMS = [(-1, 0.5), (0, 0.2), (1, 0.2), (2, 0.1)]


@pytest.fixture(scope="module")
def skew():
    return validate_offspring(SKEW_CHILDREN), StepLaw.atoms(SKEW_ATOMS)


@pytest.fixture(scope="module")
def u_ref(ref):
    return solve_u_lattice(ref.offspring, ref.step, 120)


def rational_iterate(children, atoms, n_gen, i_max):
    """P(M_n > i) by the recursion in exact rational arithmetic."""
    pc = [Fraction(p).limit_denominator(1000) for p in children]
    st = [(a, Fraction(p).limit_denominator(1000)) for a, p in atoms]

    def phi(s):
        return 1 - sum(p * (1 - s) ** k for k, p in enumerate(pc))

    lo = -max(a for a, _ in atoms)
    hi = i_max - min(a for a, _ in atoms) + n_gen * max(a for a, _ in atoms)
    u = {i: Fraction(int(i < 0)) for i in range(lo, hi + 1)}
    for _ in range(n_gen):
        u = {i: (Fraction(1) if i < 0 else sum(p * phi(u.get(i - a, Fraction(0))) for a, p in st))
             for i in range(lo, hi + 1)}
    return [float(u[i]) for i in range(i_max + 1)]


def test_generation_iterates_match_rational_recursion(skew):
    off, step = skew
    for n in (1, 2, 5):
        np.testing.assert_allclose(finite_generation_tail(off, step, n, 8),
                                   rational_iterate(SKEW_CHILDREN, SKEW_ATOMS, n, 8), rtol=1e-13, atol=1e-16)
    assert finite_generation_tail(off, step, 0, 4).tolist() == [0.0] * 5


def test_iterates_increase_to_fixed_point(ref, u_ref):
    prev = np.zeros(11)
    for n in range(1, 40):
        cur = finite_generation_tail(ref.offspring, ref.step, n, 10)
        assert np.all(cur >= prev - 1e-16)
        assert np.all(cur <= u_ref.values[:11] + 1e-15)
        prev = cur


def test_enumeration_oracle_matches_dp(ref, skew):
    for level in (1, 2, 3, 4):
        o = max_reach_probability([0.6, 0.0, 0.4], [(-1, 0.5), (1, 0.5)], level, 6)
        d = finite_generation_tail(ref.offspring, ref.step, 6, level)[level - 1]
        assert abs(o - d) <= 1e-12
    off, step = skew
    for level in (1, 3, 5):
        o = max_reach_probability(SKEW_CHILDREN, SKEW_ATOMS, level, 5)
        d = finite_generation_tail(off, step, 5, level)[level - 1]
        assert abs(o - d) <= 1e-12


def test_enumeration_oracle_matches_simulator(ref):
    n = 200_000
    b = grow_trees(ref.offspring, ref.step, 0.0, n, np.random.default_rng(17), horizon=6)
    for level in (1, 3):
        o = max_reach_probability([0.6, 0.0, 0.4], [(-1, 0.5), (1, 0.5)], level, 6)
        p = np.mean(b.M_h >= level)
        assert abs(p - o) < 4 * math.sqrt(o * (1 - o) / n)


def test_unit_step_tail_is_gw_survival(ref):
    step = StepLaw.atoms([(1.0, 1.0)])
    u = solve_u_lattice(ref.offspring, step, 130)
    q = 0.0
    for k in range(1, 40):
        q = float(ref.offspring.pgf(q))  # q = P(Z_k = 0)
        assert u.values[k - 1] == pytest.approx(1 - q, rel=1e-10)


def test_reference_solution_properties(u_ref):
    assert u_ref.residual.max() <= 1e-12
    assert np.all(u_ref.values <= 2.0 ** -np.arange(u_ref.values.size) * (1 + 1e-12))
    assert u_ref.sandwich[:31].max() < 1e-9
    assert np.all(u_ref.lower <= u_ref.values + 1e-18)
    assert u_ref.u(-1) == 1.0
    assert u_ref.u(500) == pytest.approx(2.0**-500)
    scaled = u_ref.scaled()
    assert abs(scaled[60] - scaled[50]) < 1e-9
    table = parse_csv(u_ref.to_csv())
    assert table.columns == ["i", "x", "u", "envelope", "residual"]
    assert table.floats("u")[7] == u_ref.values[7]


def test_solver_input_errors(ref):
    with pytest.raises(GridTooSmall):
        solve_u_lattice(ref.offspring, ref.step, 10)
    with pytest.raises(NotLattice):
        solve_u_lattice(ref.offspring, StepLaw.gaussian(0, 1), 100)


def test_killed_grid(ref, u_ref):
    g = solve_u_killed_lattice(ref.offspring, ref.step, 1, 20)
    assert g.u(5, 4) == 1.0
    assert g.residual <= 1e-12
    assert g.u(1, 8) == pytest.approx(0.0010738585729, rel=1e-9)
    for x in (8, 12, 20):
        assert 1.5 <= g.u(1, x) / u_ref.values[x] < 1.504
    # monotone in the start height and below the free tail started there
    assert g.u(1, 10) < g.u(2, 10) < g.u(3, 10)
    with pytest.raises(IndexError):
        g.u(0, 5)
    # iterates converge to the grid values from below
    it = finite_generation_killed(ref.offspring, ref.step, 8, 200)
    np.testing.assert_allclose(it, g.values[8, 1:9], rtol=1e-9)
    early = finite_generation_killed(ref.offspring, ref.step, 8, 20)
    assert np.all(early <= it)


def test_killed_grid_matches_simulation(ref):
    g = solve_u_killed_lattice(ref.offspring, ref.step, 1, 4)
    cfg = BrwConfig(ref.offspring, ref.step, start=1.0, killed=True)
    e = estimate_tail(cfg, 4, 300_000, seed=9)
    assert abs(e.z(g.u(1, 4))) < 4


def test_conditional_exact(ref):
    off, step = ref.offspring, ref.step
    # more generations can only help M_n reach a fixed level
    assert conditional_Mn_exact(off, step, 0.5, 8) <= conditional_Mn_exact(off, step, 0.4, 10)
    lo = conditional_Mn_exact(off, step, 0.3, 40)
    hi = conditional_Mn_exact(off, step, 0.9, 40)
    assert 0.9 <= lo <= 1.0 and 0.0 <= hi <= 0.1
    k = conditional_Mn_exact(off, step, 0.3, 40, killed_y_index=1)
    assert 0.9 <= k <= 1.0
    with pytest.raises(DomainError):
        conditional_Mn_exact(off, step, 0.1, 10, killed_y_index=5)


def test_conditional_exact_matches_rejection(ref):
    exact = conditional_Mn_exact(ref.offspring, ref.step, 0.5, 6)
    mc = conditional_Mn(BrwConfig.from_model(ref), 0.5, 6, 20_000, seed=5)
    assert abs(mc.estimate.z(exact)) < 4


@pytest.fixture(scope="module")
def walk_stats(ref):
    tl = ref.tilted()
    mins = sample_global_min(tl, 100_000, seed=31)
    return mins, ladder_stats(tl, [tl.gamma], 100_000, seed=32, mins=mins)


def test_kappa_lattice_report(ref, u_ref, walk_stats):
    mins, lad = walk_stats
    r = kappa_lattice(ref.offspring, ref.step, u_ref, lad, mins)
    assert isinstance(r, KappaReport)
    assert r.term_boundary == 0.25
    assert 0 < r.kappa <= 0.25
    assert abs(r.kappa - u_ref.scaled()[50]) <= r.error_budget + 1e-3
    assert '"kappa"' in r.to_json(note="x")
    assert killed_prefactor(lad.gamma, 1.0, mins) == pytest.approx(1.5, abs=0.02)


def test_kappa_rejects_foreign_statistics(ref, u_ref, walk_stats):
    mins, lad = walk_stats
    other = validate_offspring([0.5, 0.3, 0.2])
    with pytest.raises(InconsistentModels):
        kappa_lattice(other, ref.step, u_ref, lad, mins)


def test_kappa_nonlattice_gaussian():
    off = validate_offspring([0.5, 0.4, 0.1])
    step = StepLaw.gaussian(0.0, 1.0)
    tl = tilt(step, off.mean_m, solve_gamma(step, off.mean_m))
    mins = sample_global_min(tl, 50_000, seed=1)
    lad = ladder_stats(tl, [tl.gamma], 50_000, seed=2, mins=mins)
    z = np.arange(0, 121) * 0.1 / tl.gamma
    est = estimate_tail_grid(BrwConfig(off, step), z, 100_000, seed=3)
    curve = TailCurve.from_estimates(z, est)
    r = kappa_nonlattice(off, step, curve, lad, mins)
    assert 0 < r.kappa < r.term_boundary
    assert r.error_budget > 0
    with pytest.raises(InsufficientCoverage):
        kappa_nonlattice(off, step, curve, lad, mins, z_max=0.5)


def test_summability_diag(ref):
    d = psi_summability_diag(ref.offspring, math.log(2), 60)
    assert abs(d.partial_sums[-1] - 0.4) < 1e-10
    np.testing.assert_allclose(d.ratios, 0.5, rtol=1e-12)
    with pytest.raises(DomainError):
        psi_summability_diag(ref.offspring, 1.0, 3)
