"""Subcritical branching random walk, jump-then-branch order.

A particle of generation ``g`` sitting at ``p`` jumps to ``p + X`` and then
leaves ``N`` children there; those children are the generation ``g + 1``
particles.  The root sits at ``start``.  ``M`` is the largest position over
all generations, so a root that jumps and dies childless leaves ``M = start``.

With killing, a particle whose post-jump position is ``<= 0`` is removed before
it reproduces.  The killed maximum only counts generations ``>= 1`` and is
``0`` when nothing survives to generation 1.

Trees are grown a generation at a time for a whole batch at once, which keeps
the work in numpy; per-tree extremal statistics are folded in as each
generation is produced and nothing else of the genealogy is kept.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Callable

import numpy as np

from .errors import DomainError, PopulationCapExceeded, RareEventBudgetExceeded
from .laws import Model, OffspringLaw, StepLaw, tilt, solve_gamma
from .stats import CHUNK, Estimate, iter_chunks, mean_estimate, proportion_estimate, run_chunks, z_score
from .walk import _slack, derive_seed, walk_endpoints

POPULATION_CAP = 10**7
MIN_ACCEPT_RATE = 1e-6


@dataclass(frozen=True)
class BrwConfig:
    offspring: OffspringLaw
    step: StepLaw
    start: float = 0.0
    horizon: int | None = None
    population_cap: int = POPULATION_CAP
    killed: bool = False

    def __post_init__(self):
        if self.population_cap < 1:
            raise DomainError("population_cap must be >= 1")
        if self.killed and not self.start > 0:
            raise DomainError("killed runs need a positive start")

    @classmethod
    def from_model(cls, model: Model, **kw) -> "BrwConfig":
        return cls(model.offspring, model.step, **kw)


@dataclass
class BrwOutcome:
    global_max: float
    running_max: np.ndarray  # M_n for n = 0 .. extinction_generation
    extinction_generation: int
    total_progeny: int
    M0inf: float | None = None
    killed_progeny: int | None = None

    @property
    def M(self) -> float:
        return self.global_max


@dataclass
class _Batch:
    M: np.ndarray
    M_h: np.ndarray
    K: np.ndarray
    K_h: np.ndarray
    progeny: np.ndarray
    killed_progeny: np.ndarray
    extinction: np.ndarray
    aborted: np.ndarray
    gen_sum: np.ndarray | None
    history: list = field(default_factory=list)


def grow_trees(
    offspring: OffspringLaw,
    step: StepLaw,
    start: float,
    size: int,
    rng,
    *,
    killed_only: bool = False,
    track_killed: bool = False,
    horizon: int | None = None,
    population_cap: int = POPULATION_CAP,
    gen_functional: tuple[int, Callable[[np.ndarray], np.ndarray]] | None = None,
    record: bool = False,
) -> _Batch:
    """Grow ``size`` independent trees to extinction.

    ``killed_only`` grows the killed process directly.  ``track_killed``
    grows the free process and follows the killed subtree inside it, so
    both maxima come from one realization.  ``gen_functional = (n, f)``
    accumulates ``sum f(V)`` over generation ``n`` particles of each tree.
    Random draws per generation: all jumps first, then all offspring counts.
    """
    fold_killed = killed_only or track_killed
    M = np.full(size, float(start))
    K = np.zeros(size)  # killed maximum, generations >= 1
    M_h, K_h = M.copy(), K.copy()
    progeny = np.ones(size, dtype=np.int64)
    kprog = np.ones(size, dtype=np.int64)
    extinction = np.zeros(size, dtype=np.int64)
    aborted = np.zeros(size, dtype=bool)
    gen_sum = np.zeros(size) if gen_functional is not None else None
    history = [(M.copy(), K.copy())] if record else []

    pos = np.full(size, float(start))
    tree = np.arange(size)
    alive = np.ones(size, dtype=bool)  # still inside the killed subtree
    g = 0
    while pos.size:
        if gen_functional is not None and g == gen_functional[0]:
            vals = gen_functional[1](pos)
            gen_sum += np.bincount(tree, weights=vals, minlength=size)
        q = pos + step.sample(rng, pos.size)
        n = offspring.sample(rng, pos.size)
        if killed_only:
            n[q <= 0] = 0
        if fold_killed:
            alive = alive & (q > 0)
        has = n > 0
        g += 1
        tq, qq = tree[has], q[has]
        np.maximum.at(M, tq, qq)
        if horizon is not None and g <= horizon:
            np.maximum.at(M_h, tq, qq)
        if fold_killed:
            ka = alive[has]
            np.maximum.at(K, tq[ka], qq[ka])
            if horizon is not None and g <= horizon:
                np.maximum.at(K_h, tq[ka], qq[ka])
        counts = np.bincount(tree, weights=n, minlength=size).astype(np.int64)
        progeny += counts
        if fold_killed:
            kprog += np.bincount(tree[alive], weights=n[alive], minlength=size).astype(np.int64)
        pos = np.repeat(q, n)
        tree_next = np.repeat(tree, n)
        alive = np.repeat(alive, n)
        extinction[(counts == 0) & (extinction == 0) & ~aborted] = g
        over = progeny > population_cap
        if over.any():
            newly = over & ~aborted
            aborted |= newly
            keep = ~aborted[tree_next]
            pos, tree_next, alive = pos[keep], tree_next[keep], alive[keep]
        tree = tree_next
        if record:
            history.append((M.copy(), K.copy()))
    return _Batch(M, M_h, K, K_h, progeny, kprog, extinction, aborted, gen_sum, history)


def _outcome(b: _Batch, killed: bool, tracked: bool) -> BrwOutcome:
    if b.aborted[0]:
        raise PopulationCapExceeded("tree exceeded the population cap")
    ext = int(b.extinction[0])
    run = np.array([h[1 if killed else 0][0] for h in b.history[: ext + 1]])
    if killed:
        return BrwOutcome(float(b.K[0]), run, ext, int(b.progeny[0]), float(b.K[0]), int(b.killed_progeny[0]))
    return BrwOutcome(
        float(b.M[0]), run, ext, int(b.progeny[0]),
        float(b.K[0]) if tracked else None,
        int(b.killed_progeny[0]) if tracked else None,
    )


def simulate_brw(config: BrwConfig, rng, track_killed: bool = False) -> BrwOutcome:
    """One tree of the free process; with ``track_killed`` the killed maximum
    of the same realization is reported in ``M0inf``."""
    b = grow_trees(config.offspring, config.step, config.start, 1, rng,
                   track_killed=track_killed, population_cap=config.population_cap, record=True)
    return _outcome(b, killed=False, tracked=track_killed)


def simulate_killed_brw(config: BrwConfig, rng) -> BrwOutcome:
    """One tree of the process killed on entering (-inf, 0]."""
    if not config.start > 0:
        raise DomainError("killed runs need a positive start")
    b = grow_trees(config.offspring, config.step, config.start, 1, rng,
                   killed_only=True, population_cap=config.population_cap, record=True)
    return _outcome(b, killed=True, tracked=True)


# ---------------------------------------------------------------- estimators


def _max_chunk(config: BrwConfig, rng, size: int):
    b = grow_trees(config.offspring, config.step, config.start, size, rng,
                   killed_only=config.killed, horizon=config.horizon,
                   population_cap=config.population_cap)
    vals = b.K if config.killed else b.M
    return vals[~b.aborted], int(b.aborted.sum())


def sample_maxima(config: BrwConfig, n: int, seed: int, workers: int = 1) -> tuple[np.ndarray, int]:
    """Global maxima (killed maxima for killed configs) of ``n`` trees, and the
    number of cap-aborted draws, which are excluded from the sample."""
    parts = run_chunks(partial(_max_chunk, config), n, seed, workers)
    return np.concatenate([p[0] for p in parts]), sum(p[1] for p in parts)


def tail_from_maxima(maxima: np.ndarray, xs, seed: int, n_aborted: int = 0) -> list[Estimate]:
    out = []
    for x in np.atleast_1d(xs):
        k = int(np.count_nonzero(maxima > x + _slack(x)))
        out.append(proportion_estimate(k, maxima.size, seed, n_aborted))
    return out


def estimate_tail(config: BrwConfig, x: float, n: int, seed: int, workers: int = 1) -> Estimate:
    """P(M > x), or P(M^(0,inf) > x) for a killed config."""
    if n < 1000:
        raise DomainError("estimate_tail needs n >= 1000")
    maxima, aborted = sample_maxima(config, n, seed, workers)
    return tail_from_maxima(maxima, [x], seed, aborted)[0]


def estimate_tail_grid(config: BrwConfig, xs, n: int, seed: int, workers: int = 1) -> list[Estimate]:
    maxima, aborted = sample_maxima(config, n, seed, workers)
    return tail_from_maxima(maxima, xs, seed, aborted)


@dataclass(frozen=True)
class ConditionalEstimate:
    estimate: Estimate
    accepted: int
    rejected: int


def _cond_chunk(config: BrwConfig, level: float, rng, size: int):
    b = grow_trees(config.offspring, config.step, config.start, size, rng,
                   killed_only=config.killed, horizon=config.horizon,
                   population_cap=config.population_cap)
    tot, upto = (b.K, b.K_h) if config.killed else (b.M, b.M_h)
    ok = ~b.aborted
    acc = ok & (tot >= level - _slack(level))
    hit = acc & (upto >= level - _slack(level))
    return int(acc.sum()), int(hit.sum()), int(ok.sum()), int(b.aborted.sum())


def conditional_Mn(config: BrwConfig, c: float, n_gen: int, n: int, seed: int, workers: int = 1,
                   min_rate: float = MIN_ACCEPT_RATE, max_trials: int = 10**9,
                   chunk: int = CHUNK) -> ConditionalEstimate:
    """P(M_n >= c n | M >= c n) by plain rejection, ``n = n_gen``.

    Draws chunks until ``n`` trees have been accepted.  Refuses with
    :class:`RareEventBudgetExceeded` once at least ``1 / min_rate`` trees show
    an acceptance rate below ``min_rate``, or after ``max_trials`` trees.
    """
    if not c > 0:
        raise DomainError("c must be positive")
    level = c * n_gen
    cfg = BrwConfig(config.offspring, config.step, config.start, n_gen, config.population_cap, config.killed)
    acc = hit = trials = aborted = 0
    for a, h, t, ab in iter_chunks(partial(_cond_chunk, cfg, level), seed, workers, chunk):
        acc, hit, trials, aborted = acc + a, hit + h, trials + t, aborted + ab
        if acc >= n:
            break
        if trials >= 1.0 / min_rate and acc < min_rate * trials:
            raise RareEventBudgetExceeded(
                f"acceptance rate {acc}/{trials} below {min_rate:g} for M >= {level:g}")
        if trials >= max_trials:
            raise RareEventBudgetExceeded(f"{trials} trials gave only {acc} accepted trees")
    est = proportion_estimate(hit, acc, seed, aborted)
    return ConditionalEstimate(est, acc, trials - acc)


# ---------------------------------------------------------------- many-to-one checks


@dataclass(frozen=True)
class IdentityCheck:
    tree: Estimate
    walk: Estimate
    z: float


def _gen_chunk(config: BrwConfig, n_gen: int, f, rng, size: int):
    b = grow_trees(config.offspring, config.step, config.start, size, rng,
                   gen_functional=(n_gen, f), population_cap=config.population_cap)
    return b.gen_sum[~b.aborted], int(b.aborted.sum())


def generation_sums(config: BrwConfig, n_gen: int, f, n: int, seed: int, workers: int = 1) -> Estimate:
    """Tree-side estimate of E[sum_{|w| = n_gen} f(V(w))]."""
    parts = run_chunks(partial(_gen_chunk, config, n_gen, f), n, seed, workers)
    return mean_estimate(np.concatenate([p[0] for p in parts]), seed, sum(p[1] for p in parts))


def many_to_one_check(config: BrwConfig, n_gen: int, f, n: int, seed: int, workers: int = 1) -> IdentityCheck:
    """Compare E[sum_{|w|=n} f(V(w))] with m^n E_0[f(S_n)], both by Monte Carlo."""
    tree = generation_sums(config, n_gen, f, n, seed, workers)
    m = config.offspring.mean_m
    if n_gen == 0:
        v = float(np.asarray(f(np.array([config.start])))[0])
        walk = Estimate(v, 0.0, n, seed)
    else:
        ends = config.start + walk_endpoints(config.step, n_gen, n, derive_seed(seed, 2), workers)
        walk = mean_estimate(m**n_gen * np.asarray(f(ends), dtype=float), seed)
    return IdentityCheck(tree, walk, z_score(tree.value, tree.stderr, walk.value, walk.stderr))


@dataclass(frozen=True)
class DplusWeight:
    """v -> (v - n drift)_+ exp(gamma v), the summand of D_n^+."""

    n_gen: int
    drift: float
    gamma: float

    def __call__(self, v):
        return np.maximum(v - self.n_gen * self.drift, 0.0) * np.exp(self.gamma * v)


def dplus_diag(config: BrwConfig, n_gen: int, n: int, seed: int, workers: int = 1) -> IdentityCheck:
    """E[D_n^+] over trees against E^[(S_n - n drift)_+] under the tilted walk."""
    if n < 1000:
        raise DomainError("dplus_diag needs n >= 1000")
    m = config.offspring.mean_m
    gamma = solve_gamma(config.step, m)
    tl = tilt(config.step, m, gamma)
    tree = generation_sums(config, n_gen, DplusWeight(n_gen, tl.drift, gamma), n, seed, workers)
    if n_gen == 0:
        walk = Estimate(0.0, 0.0, n, seed)
    else:
        ends = walk_endpoints(tl.tilted, n_gen, n, derive_seed(seed, 3), workers)
        walk = mean_estimate(np.maximum(ends - n_gen * tl.drift, 0.0), seed)
    return IdentityCheck(tree, walk, z_score(tree.value, tree.stderr, walk.value, walk.stderr))


def gw_survival(offspring: OffspringLaw, n_gen: int, n: int, seed: int) -> Estimate:
    """P(Z_n > 0) for the bare Galton-Watson process, simulated generation by generation."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    z = np.ones(n, dtype=np.int64)
    for _ in range(n_gen):
        live = z > 0
        kids = np.zeros(n, dtype=np.int64)
        tot = int(z[live].sum())
        draws = offspring.sample(rng, tot)
        owner = np.repeat(np.flatnonzero(live), z[live])
        np.add.at(kids, owner, draws)
        z = kids
    return proportion_estimate(int(np.count_nonzero(z)), n, seed)
