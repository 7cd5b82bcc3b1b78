"""Random walk machinery under the tilted measure: ladder heights, the
all-time minimum, the renewal function and the renewal-type sums whose
limits enter the tail constants.

All samplers advance a whole chunk of independent paths at once and drop
paths from the working set as they finish.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from typing import Sequence

import numpy as np

from .errors import DomainError, StepBudgetExceeded
from .laws import StepLaw, TiltedStepLaw
from .stats import Estimate, mean_estimate, proportion_estimate, run_chunks

STEP_BUDGET = 10**8
EPS_TRUNC = 1e-4
# slack for comparing lattice positions built from float sums
_LATTICE_EPS = 1e-9


def derive_seed(seed: int, tag: int) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(tag),))
    return int(ss.generate_state(1, np.uint64)[0])


def _slack(z: float) -> float:
    return _LATTICE_EPS * (1.0 + abs(z))


@dataclass
class WalkPath:
    start: float
    increments: np.ndarray

    @property
    def positions(self) -> np.ndarray:
        return self.start + np.concatenate(([0.0], np.cumsum(self.increments)))

    @property
    def running_max(self) -> np.ndarray:
        return np.maximum.accumulate(self.positions)

    @property
    def running_min(self) -> np.ndarray:
        return np.minimum.accumulate(self.positions)


def simulate_walk(law: StepLaw, start: float, n_steps: int, rng) -> WalkPath:
    return WalkPath(float(start), law.sample(rng, n_steps))


def _endpoint_chunk(law: StepLaw, n_steps: int, rng, size: int, block: int = 1 << 22) -> np.ndarray:
    out = np.zeros(size)
    rows = max(1, block // max(n_steps, 1))
    for lo in range(0, size, rows):
        hi = min(size, lo + rows)
        for done in range(0, n_steps, block):
            k = min(block, n_steps - done)
            out[lo:hi] += law.sample(rng, (hi - lo) * k).reshape(hi - lo, k).sum(axis=1)
    return out


def walk_endpoints(law: StepLaw, n_steps: int, n_paths: int, seed: int, workers: int = 1) -> np.ndarray:
    """S_n for ``n_paths`` independent walks started at 0."""
    parts = run_chunks(partial(_endpoint_chunk, law, n_steps), n_paths, seed, workers)
    return np.concatenate(parts)


def _check_budget(steps: int, budget: int) -> None:
    if steps > budget:
        raise StepBudgetExceeded(f"a path used more than {budget} increments")


# ---------------------------------------------------------------- ladder epochs


def sample_until_first_ascent(tilted: TiltedStepLaw, rng, budget: int = STEP_BUDGET) -> tuple[int, float]:
    """One draw of (T1, H1): first strict ascent epoch and the height reached."""
    s, t = 0.0, 0
    law = tilted.tilted
    while True:
        for x in law.sample(rng, 64):
            t += 1
            s += x
            if s > 0:
                return t, float(s)
        _check_budget(t, budget)


def _ascent_chunk(law: StepLaw, budget: int, rng, size: int) -> tuple[np.ndarray, np.ndarray]:
    t_out = np.zeros(size, dtype=np.int64)
    h_out = np.zeros(size)
    idx = np.arange(size)
    s = np.zeros(size)
    t = 0
    while idx.size:
        t += 1
        _check_budget(t, budget)
        s += law.sample(rng, idx.size)
        up = s > 0
        t_out[idx[up]] = t
        h_out[idx[up]] = s[up]
        idx, s = idx[~up], s[~up]
    return t_out, h_out


def sample_ascents(tilted: TiltedStepLaw, n: int, seed: int, workers: int = 1,
                   budget: int = STEP_BUDGET) -> tuple[np.ndarray, np.ndarray]:
    parts = run_chunks(partial(_ascent_chunk, tilted.tilted, budget), n, seed, workers)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


# ---------------------------------------------------------------- global minimum


def _min_chunk(law: StepLaw, bound0: float, eps: float, budget: int, rng, size: int):
    s = np.zeros(size)
    mn = np.zeros(size)  # min over j >= 0
    mn1 = np.full(size, np.inf)  # min over j >= 1
    steps = 0
    bound = bound0

    def run_to_gap(gap: float) -> None:
        nonlocal steps
        idx = np.flatnonzero(s - mn <= gap)
        while idx.size:
            steps += 1
            _check_budget(steps, budget)
            s[idx] += law.sample(rng, idx.size)
            si = s[idx]
            mn[idx] = np.minimum(mn[idx], si)
            mn1[idx] = np.minimum(mn1[idx], si)
            idx = idx[si - mn[idx] <= gap]

    run_to_gap(bound)
    while True:
        before = mn.copy()
        run_to_gap(2.0 * bound)
        frac = np.count_nonzero(mn < before) / size
        if frac < eps:
            break
        bound *= 2.0
    return mn, mn1, 2.0 * bound


@dataclass
class MinDistribution:
    samples: np.ndarray
    after_first: np.ndarray
    truncation_bound: float
    seed: int
    gamma: float = math.nan
    drift: float = math.nan

    @property
    def n(self) -> int:
        return self.samples.size

    def p_ge(self, z: float) -> Estimate:
        """P(I_inf >= z)."""
        k = int(np.count_nonzero(self.samples >= z - _slack(z)))
        return proportion_estimate(k, self.n, self.seed)

    def p_gt(self, z: float) -> Estimate:
        """P(I_inf > z); ``p_gt(-y)`` is the probability the walk never reaches -y."""
        k = int(np.count_nonzero(self.samples > z + _slack(z)))
        return proportion_estimate(k, self.n, self.seed)

    def ecdf(self, z) -> np.ndarray:
        """P(I_inf <= z), vectorised over z."""
        srt = np.sort(self.samples)
        z = np.asarray(z, dtype=float)
        return np.searchsorted(srt, z + _slack(0.0) * (1 + np.abs(z)), side="right") / self.n

    def rho(self) -> Estimate:
        """P(S_i > 0 for all i >= 1)."""
        k = int(np.count_nonzero(self.after_first > _slack(0.0)))
        return proportion_estimate(k, self.n, self.seed)


def sample_global_min(tilted: TiltedStepLaw, n: int, seed: int, eps_trunc: float = EPS_TRUNC,
                      workers: int = 1, budget: int = STEP_BUDGET) -> MinDistribution:
    """Draws of I_inf = min_j S_j under the tilted law, truncated adaptively.

    A path stops once it sits ``B`` above its running minimum.  Starting from
    ``B = 20 / gamma`` each chunk doubles ``B`` until fewer than ``eps_trunc``
    of its paths set a new minimum during the last doubling.
    """
    if not tilted.drift > 0:
        raise DomainError("tilted drift must be positive")
    fn = partial(_min_chunk, tilted.tilted, 20.0 / tilted.gamma, eps_trunc, budget)
    parts = run_chunks(fn, n, seed, workers)
    return MinDistribution(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        max(p[2] for p in parts),
        seed,
        tilted.gamma,
        tilted.drift,
    )


@dataclass
class LadderStats:
    mean_H1: Estimate
    laplace_H1: dict[float, Estimate]
    rho: Estimate
    gamma: float = math.nan
    drift: float = math.nan
    span: float | None = None

    def laplace(self, theta: float) -> Estimate:
        for th, est in self.laplace_H1.items():
            if math.isclose(th, theta, rel_tol=1e-12, abs_tol=0.0):
                return est
        raise KeyError(f"theta {theta} not in ladder statistics")


def ladder_stats(tilted: TiltedStepLaw, thetas: Sequence[float], n: int, seed: int,
                 workers: int = 1, eps_trunc: float = EPS_TRUNC,
                 mins: MinDistribution | None = None) -> LadderStats:
    if n < 1000:
        raise DomainError("ladder_stats needs n >= 1000")
    if any(th <= 0 for th in thetas):
        raise DomainError("thetas must be positive")
    _, h1 = sample_ascents(tilted, n, seed, workers)
    lap = {float(th): mean_estimate(np.exp(-th * h1), seed) for th in thetas}
    if mins is None:
        mins = sample_global_min(tilted, n, derive_seed(seed, 1), eps_trunc, workers)
    return LadderStats(mean_estimate(h1, seed), lap, mins.rho(), tilted.gamma, tilted.drift, tilted.span)


# ---------------------------------------------------------------- renewal function


def _visits_chunk(law: StepLaw, levels: np.ndarray, stop: float, budget: int, rng, size: int) -> np.ndarray:
    # hist[p, k] counts visits of path p with levels[k-1] < S <= levels[k]
    nb = levels.size + 1
    hist = np.zeros((size, nb), dtype=np.int64)
    s = np.zeros(size)
    idx = np.arange(size)
    np.add.at(hist, (idx, np.searchsorted(levels, s, side="left")), 1)
    steps = 0
    while idx.size:
        steps += 1
        _check_budget(steps, budget)
        s[idx] += law.sample(rng, idx.size)
        np.add.at(hist, (idx, np.searchsorted(levels, s[idx], side="left")), 1)
        idx = idx[s[idx] <= stop]
    return np.cumsum(hist, axis=1)[:, : levels.size]


def renewal_U_grid(tilted: TiltedStepLaw, ys: Sequence[float], n: int, seed: int, workers: int = 1,
                   bound: float | None = None, budget: int = STEP_BUDGET) -> list[Estimate]:
    """Estimates of U(y) = E #{n >= 0 : S_n <= y} for every y, from one path ensemble.

    Paths stop once they exceed ``max(ys) + bound`` (default ``40 / gamma``).
    """
    ys = np.asarray(ys, dtype=float)
    levels = np.unique(ys + np.array([_slack(y) for y in ys]))
    bound = 40.0 / tilted.gamma if bound is None else bound
    fn = partial(_visits_chunk, tilted.tilted, levels, float(levels.max() + bound), budget)
    counts = np.concatenate(run_chunks(fn, n, seed, workers, chunk=1 << 13))
    col = np.searchsorted(levels, ys + np.array([_slack(y) for y in ys]))
    return [mean_estimate(counts[:, c], seed) for c in col]


def renewal_U(tilted: TiltedStepLaw, y: float, n: int, seed: int, workers: int = 1,
              bound: float | None = None) -> Estimate:
    return renewal_U_grid(tilted, [y], n, seed, workers, bound)[0]


# ---------------------------------------------------------------- first passage above 0


@dataclass(frozen=True)
class GridFunction:
    """Nonnegative step function: ``values[k]`` on ``[x0 + k dx, x0 + (k+1) dx)``, 0 elsewhere."""

    x0: float
    dx: float
    values: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.dx <= 0:
            raise DomainError("grid step must be positive")
        if any(v < 0 for v in self.values):
            raise DomainError("grid function must be nonnegative")

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        k = np.floor((z - self.x0) / self.dx + _LATTICE_EPS).astype(np.int64)
        inside = (k >= 0) & (k < vals.size)
        out = np.zeros(z.shape)
        out[inside] = vals[k[inside]]
        return out

    def integral_below(self, t) -> np.ndarray:
        """int_{-inf}^{t} f(z) dz, vectorised over t."""
        t = np.asarray(t, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if not vals.size:
            return np.zeros(t.shape)
        cum = np.concatenate(([0.0], np.cumsum(vals) * self.dx))
        pos = np.clip((t - self.x0) / self.dx, 0.0, vals.size)
        k = np.minimum(np.floor(pos).astype(np.int64), vals.size - 1)
        return cum[k] + (pos - k) * self.dx * vals[k]


def _passage_chunk(law: StepLaw, start: float, f: GridFunction | None, budget: int, rng, size: int):
    over = np.zeros(size)
    acc = np.zeros(size)
    idx = np.arange(size)
    s = np.full(size, float(start))
    steps = 0
    while idx.size:
        steps += 1
        _check_budget(steps, budget)
        s += law.sample(rng, idx.size)
        up = s > 0
        if f is not None:
            acc[idx[~up]] += f(s[~up])
        over[idx[up]] = s[up]
        idx, s = idx[~up], s[~up]
    return over, acc


def sample_overshoot(tilted: TiltedStepLaw, x: float, n: int, seed: int, workers: int = 1,
                     f: GridFunction | None = None, budget: int = STEP_BUDGET):
    """Draws of the overshoot S_{T_0^+} for the walk started at -x, plus the
    path sums of ``f(S_l)`` over 1 <= l < T_0^+ when ``f`` is given."""
    if not x > 0:
        raise DomainError("x must be positive")
    parts = run_chunks(partial(_passage_chunk, tilted.tilted, -float(x), f, budget), n, seed, workers)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def overshoot_laplace(tilted: TiltedStepLaw, x: float, theta: float, n: int, seed: int,
                      workers: int = 1) -> Estimate:
    if not theta > 0:
        raise DomainError("theta must be positive")
    over, _ = sample_overshoot(tilted, x, n, seed, workers)
    return mean_estimate(np.exp(-theta * over), seed)


def overshoot_limit(mean_h1: float, laplace_h1: float, theta: float, span: float | None) -> float:
    """Large-x limit of E_{-x}[exp(-theta S_{T_0^+})] from ladder-height moments."""
    if span is None:
        return (1.0 - laplace_h1) / (theta * mean_h1)
    return span * (1.0 - laplace_h1) / (mean_h1 * math.expm1(theta * span))


def constrained_renewal_sum(tilted: TiltedStepLaw, x: float, f: GridFunction, n: int, seed: int,
                            workers: int = 1) -> Estimate:
    """E_{-x} sum_{l >= 1} f(S_l) 1{max_{j <= l} S_j <= 0}."""
    if not any(f.values):
        return Estimate(0.0, 0.0, n, seed)
    _, acc = sample_overshoot(tilted, x, n, seed, workers, f=f)
    return mean_estimate(acc, seed)


def constrained_renewal_limit(tilted: TiltedStepLaw, f: GridFunction, mins: MinDistribution) -> Estimate:
    """Large-x limit of :func:`constrained_renewal_sum` via the law of I_inf."""
    h = tilted.span
    if h is None:
        per = f.integral_below(mins.samples)
    else:
        # sum_{i <= I/h} f(i h) over the grid support
        lo = math.floor(f.x0 / h) - 1
        hi = math.ceil((f.x0 + f.dx * len(f.values)) / h) + 1
        pts = np.arange(lo, hi + 1) * h
        fv = f(pts)
        cum = np.cumsum(fv)
        k = np.floor(mins.samples / h + _LATTICE_EPS).astype(np.int64) - lo
        per = np.where(k < 0, 0.0, cum[np.clip(k, 0, cum.size - 1)]) * h
    return mean_estimate(per / tilted.drift, mins.seed)


def _corridor_chunk(law: StepLaw, x: float, y: float, gamma: float, budget: int, rng, size: int):
    out = np.zeros(size)
    idx = np.arange(size)
    s = np.full(size, y - x)
    steps = 0
    while idx.size:
        steps += 1
        _check_budget(steps, budget)
        s += law.sample(rng, idx.size)
        up = s > 0
        out[idx[up]] = np.exp(-gamma * s[up])
        keep = ~up & (s > -x)
        idx, s = idx[keep], s[keep]
    return out


def killed_renewal_sum(tilted: TiltedStepLaw, x: float, y: float, gamma: float, n: int, seed: int,
                       workers: int = 1) -> Estimate:
    """E_{y-x}[exp(-gamma S_l); S_j in (-x, 0] for j < l, S_l > 0] summed over l."""
    if not 0 < y < x:
        raise DomainError("killed renewal sum needs 0 < y < x")
    parts = run_chunks(partial(_corridor_chunk, tilted.tilted, float(x), float(y), float(gamma), STEP_BUDGET),
                       n, seed, workers)
    return mean_estimate(np.concatenate(parts), seed)


def killed_renewal_limit(ladder: LadderStats, mins: MinDistribution, y: float, gamma: float,
                         span: float | None) -> float:
    lap = ladder.laplace(gamma).value
    return mins.p_gt(-y).value * overshoot_limit(ladder.mean_H1.value, lap, gamma, span)
