import math

import numpy as np
import pytest

from brwtail.brw import (
    BrwConfig,
    DplusWeight,
    conditional_Mn,
    dplus_diag,
    estimate_tail,
    estimate_tail_grid,
    grow_trees,
    gw_survival,
    many_to_one_check,
    sample_maxima,
    simulate_brw,
    simulate_killed_brw,
)
from brwtail.errors import DomainError, PopulationCapExceeded, RareEventBudgetExceeded
from brwtail.laws import StepLaw, validate_offspring
from brwtail.tail import finite_generation_tail, solve_u_lattice


@pytest.fixture(scope="module")
def cfg(ref):
    return BrwConfig.from_model(ref)


@pytest.fixture
def jumpy():
    return validate_offspring([0.6, 0.0, 0.4]), StepLaw.atoms([(-1, 0.5), (10, 0.5)])


def test_childless_root_keeps_start(rigged, jumpy):
    off, step = jumpy
    # jump to +10, then no children
    out = simulate_brw(BrwConfig(off, step), rigged(uniforms=[0.9, 0.1]))
    assert out.M == 0.0
    assert out.extinction_generation == 1 and out.total_progeny == 1
    assert out.running_max.tolist() == [0.0, 0.0]


def test_parent_position_counts_once_it_has_children(rigged, jumpy):
    off, step = jumpy
    # root: +10 and two children; both children: -1 and no children
    out = simulate_brw(BrwConfig(off, step), rigged(uniforms=[0.9, 0.95, 0.1, 0.1, 0.1, 0.1]))
    assert out.M == 10.0
    assert out.total_progeny == 3
    assert out.running_max.tolist() == [0.0, 10.0, 10.0]


def test_killed_semantics(rigged, jumpy):
    off, step = jumpy
    cfg = BrwConfig(off, step, start=1.0)
    # root 1 -> 0 is killed even though it draws two children
    out = simulate_killed_brw(cfg, rigged(uniforms=[0.1, 0.95]))
    assert out.M == 0.0 and out.M0inf == 0.0
    # root 1 -> 11 with two children; children die childless at 10
    out = simulate_killed_brw(cfg, rigged(uniforms=[0.9, 0.95, 0.1, 0.1, 0.1, 0.1]))
    assert out.M0inf == 11.0
    with pytest.raises(DomainError):
        BrwConfig(off, step, start=0.0, killed=True)


def test_running_max_and_coupling(cfg):
    rng = np.random.default_rng(12)
    for _ in range(200):
        out = simulate_brw(cfg, rng, track_killed=True)
        assert np.all(np.diff(out.running_max) >= 0)
        assert out.running_max[-1] == out.M
        assert out.M0inf <= out.M
        assert out.killed_progeny <= out.total_progeny


def test_killed_tree_is_subtree_of_free_tree(ref):
    # one realization: the killed subtree sits inside the free tree
    a = grow_trees(ref.offspring, ref.step, 1.0, 50_000, np.random.default_rng(3), track_killed=True)
    assert np.all(a.K <= a.M)
    assert np.all(a.killed_progeny <= a.progeny)
    # growing the killed process on its own gives the same law of its maximum
    b = grow_trees(ref.offspring, ref.step, 1.0, 50_000, np.random.default_rng(4), killed_only=True)
    pa, pb = np.mean(a.K > 2), np.mean(b.K > 2)
    assert abs(pa - pb) < 4 * math.sqrt(2 * pa * (1 - pa) / 50_000)


def test_population_cap(cfg):
    small = BrwConfig(cfg.offspring, cfg.step, population_cap=2)
    maxima, aborted = sample_maxima(small, 5000, seed=1)
    assert aborted > 0 and maxima.size + aborted == 5000
    rng = np.random.default_rng(0)
    with pytest.raises(PopulationCapExceeded):
        for _ in range(1000):
            simulate_brw(small, rng)


def test_default_cap_rarely_hit(cfg):
    _, aborted = sample_maxima(cfg, 100_000, seed=2)
    assert aborted < 1e-4 * 100_000


def test_sampling_independent_of_workers(cfg):
    a, _ = sample_maxima(cfg, 70_000, seed=5, workers=1)
    b, _ = sample_maxima(cfg, 70_000, seed=5, workers=2)
    assert np.array_equal(a, b)


def test_tail_matches_dp(cfg, ref):
    u = solve_u_lattice(ref.offspring, ref.step, 60)
    est = estimate_tail_grid(cfg, [0, 2, 4], 200_000, seed=7)
    for x, e in zip([0, 2, 4], est):
        assert abs(e.z(u.values[x])) < 4
    assert estimate_tail(cfg, 2, 200_000, seed=7).value == est[1].value
    with pytest.raises(DomainError):
        estimate_tail(cfg, 1, 10, seed=1)


def test_horizon_matches_generation_iterate(ref):
    cfg = BrwConfig(ref.offspring, ref.step, horizon=3)
    b = grow_trees(ref.offspring, ref.step, 0.0, 200_000, np.random.default_rng(8), horizon=3)
    exact = finite_generation_tail(ref.offspring, ref.step, 3, 5)
    for x in range(3):
        p = np.mean(b.M_h > x)
        assert abs(p - exact[x]) < 4 * math.sqrt(exact[x] * (1 - exact[x]) / 200_000)
    assert np.all(b.M_h <= b.M)
    assert cfg.horizon == 3


def test_gw_survival_matches_pgf_iteration():
    off = validate_offspring([0.5, 0.2, 0.3])
    q = 0.0
    for _ in range(4):
        q = float(off.pgf(q))
    est = gw_survival(off, 4, 200_000, seed=3)
    assert abs(est.z(1 - q)) < 4


def test_unit_step_tail_is_survival(ref):
    # X = 1: the maximum exceeds n exactly when generation n + 1 is nonempty
    step = StepLaw.atoms([(1.0, 1.0)])
    cfg = BrwConfig(ref.offspring, step)
    maxima, _ = sample_maxima(cfg, 100_000, seed=4)
    surv = gw_survival(ref.offspring, 3, 100_000, seed=5)
    q = 0.0
    for _ in range(3):
        q = float(ref.offspring.pgf(q))
    mc = estimate_tail_grid(cfg, [2], 100_000, seed=4)[0]
    assert np.mean(maxima > 2) == mc.value
    assert abs(mc.z(1 - q)) < 4
    assert abs(mc.value - surv.value) < 4 * math.hypot(mc.stderr, surv.stderr)


def test_conditional_rejection(ref):
    cfg = BrwConfig.from_model(ref)
    r = conditional_Mn(cfg, 0.5, 6, 2000, seed=3)
    assert 0.0 <= r.estimate.value <= 1.0
    assert r.accepted >= 2000
    with pytest.raises(RareEventBudgetExceeded):
        conditional_Mn(cfg, 0.9, 40, 100, seed=3, max_trials=10**5)
    with pytest.raises(RareEventBudgetExceeded):
        conditional_Mn(cfg, 0.9, 40, 100, seed=3, min_rate=1e-4)


def test_many_to_one_constant_and_zero_generation(cfg):
    one = many_to_one_check(cfg, 5, lambda v: np.ones_like(v), 50_000, seed=2)
    assert one.walk.value == pytest.approx(0.8**5)
    assert abs(one.z) < 4
    zero = many_to_one_check(cfg, 0, lambda v: np.ones_like(v), 1000, seed=2)
    assert zero.tree.value == 1.0 and zero.walk.value == 1.0 and zero.z == 0.0


def test_dplus(cfg):
    w = DplusWeight(3, 0.6, math.log(2))
    assert w(np.array([1.0, 2.0, 3.0])).tolist() == pytest.approx([0.0, 0.2 * 4, 1.2 * 8])
    d0 = dplus_diag(cfg, 0, 1000, seed=1)
    assert d0.tree.value == 0.0 and d0.walk.value == 0.0
    d = dplus_diag(cfg, 3, 100_000, seed=1)
    assert d.tree.value >= 0 and abs(d.z) < 4
