"""Exact lattice solvers for u(x) = P(M > x) and the killed u(y, x), and the
evaluators of the limit constants built from them.

On a lattice of span h the tail solves

    u(ih) = sum_k p_k * phi(u(ih - a_k h)),   i >= 0,   u = 1 below 0,

with phi(s) = m s - psi(s) = 1 - G(1 - s) and a_k the atom offsets.  Iterating
from u = 1{x < 0} gives u^(n)(x) = P(M_n > x), so iterates increase
monotonically to u and the n-th iterate is itself a quantity of interest.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate

from .errors import (
    DomainError,
    GridTooSmall,
    InconsistentModels,
    InsufficientCoverage,
    NotLattice,
    NumericalFailure,
    SolverInvariantError,
)
from .laws import OffspringLaw, StepLaw, solve_gamma, tilt
from .stats import Estimate
from .walk import LadderStats, MinDistribution, _slack

TOL = 1e-12
MAX_ITER = 10**6
# roundoff allowance when asserting monotone iterates and the envelope
_ROUND = 1e-13


def _lattice(step: StepLaw) -> tuple[float, np.ndarray, np.ndarray]:
    if step.kind != "atoms" or step.span is None:
        raise NotLattice("exact solver needs a finitely supported lattice step law")
    return step.span, step.lattice_offsets(), np.asarray(step.probs)


def _map_free(offspring: OffspringLaw, offs, probs, ext, lo: int, n: int) -> np.ndarray:
    # ext[j - lo] holds u(j h) for lo <= j
    out = np.zeros(n)
    i = np.arange(n)
    for a, p in zip(offs, probs):
        out += p * offspring.phi(ext[i - a - lo])
    return out


@dataclass
class TailFunction:
    span: float
    gamma: float
    values: np.ndarray
    lower: np.ndarray  # same solve closed with 0 beyond the grid
    residual: np.ndarray
    iterations: int
    tol: float

    @property
    def i_max(self) -> int:
        return self.values.size - 1

    @property
    def x(self) -> np.ndarray:
        return self.span * np.arange(self.values.size)

    @property
    def envelope(self) -> np.ndarray:
        return np.exp(-self.gamma * self.x)

    @property
    def sandwich(self) -> np.ndarray:
        return self.values - self.lower

    def scaled(self) -> np.ndarray:
        """e^(gamma i h) u(i h)."""
        return np.exp(self.gamma * self.x) * self.values

    def u(self, i: int) -> float:
        if i < 0:
            return 1.0
        if i > self.i_max:
            return math.exp(-self.gamma * i * self.span)
        return float(self.values[i])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("i,x,u,envelope,residual\n")
        for i, (x, u, e, r) in enumerate(zip(self.x, self.values, self.envelope, self.residual)):
            buf.write(f"{i},{float(x)!r},{float(u)!r},{float(e)!r},{float(r)!r}\n")
        return buf.getvalue()


def _solve_free(offspring, step, i_max, tol, closure: str, gamma: float, check: bool = True,
                n_iter: int | None = None):
    h, offs, probs = _lattice(step)
    lo = min(0, int(offs.min()))
    hi = i_max + max(0, -int(offs.min()))
    lo = min(lo, -max(0, int(offs.max())))
    js = np.arange(lo, hi + 1)
    ext = np.ones(js.size)
    inside = (js >= 0) & (js <= i_max)
    beyond = js > i_max
    ext[beyond] = np.exp(-gamma * js[beyond] * h) if closure == "envelope" else 0.0
    ext[inside] = 0.0
    env = np.exp(-gamma * h * np.arange(i_max + 1))
    weight = 1.0 / env
    u = ext[inside].copy()
    it = 0
    while True:
        new = _map_free(offspring, offs, probs, ext, lo, i_max + 1)
        it += 1
        if check:
            if np.any(new < u - _ROUND * np.maximum(u, 1e-300)):
                raise SolverInvariantError("fixed-point iterates decreased")
            if np.any(new > env * (1 + _ROUND) + 1e-300):
                raise SolverInvariantError("iterate above the exp(-gamma x) envelope")
        step_size = np.max(np.abs(new - u) * weight)
        u = new
        ext[inside] = u
        if n_iter is not None:
            if it >= n_iter:
                break
        elif step_size < tol:
            break
        if it >= MAX_ITER:
            raise NumericalFailure("fixed-point iteration did not converge")
    resid = np.abs(_map_free(offspring, offs, probs, ext, lo, i_max + 1) - u)
    return u, resid, it


def solve_u_lattice(offspring: OffspringLaw, step: StepLaw, i_max: int, tol: float = TOL) -> TailFunction:
    """u(ih) = P(M > ih) for i = 0..i_max.

    Beyond the grid u is replaced by the envelope exp(-gamma x) (an upper
    closure); a second solve closed with 0 gives a lower bracket, stored in
    ``lower``.  Convergence is declared when the iterate change, scaled by
    exp(gamma x), drops below ``tol``.
    """
    h, _, _ = _lattice(step)
    gamma = solve_gamma(step, offspring.mean_m)
    if math.exp(-gamma * h * (i_max + 1)) > 10 * tol:
        raise GridTooSmall(f"exp(-gamma x) at the grid edge exceeds {10 * tol:g}; raise i_max")
    u, resid, it = _solve_free(offspring, step, i_max, tol, "envelope", gamma)
    lower, _, _ = _solve_free(offspring, step, i_max, tol, "zero", gamma)
    return TailFunction(h, gamma, u, lower, resid, it, tol)


def finite_generation_tail(offspring: OffspringLaw, step: StepLaw, n_gen: int, i_max: int) -> np.ndarray:
    """P(M_n > ih), i = 0..i_max, for n = n_gen (exact: no closure error)."""
    h, offs, _ = _lattice(step)
    gamma = solve_gamma(step, offspring.mean_m)
    reach = n_gen * max(int(offs.max()), 0)
    grid = max(i_max, reach)
    if n_gen == 0:
        return np.zeros(i_max + 1)
    u, _, _ = _solve_free(offspring, step, grid, 0.0, "zero", gamma, n_iter=n_gen)
    return u[: i_max + 1]


# ---------------------------------------------------------------- killed tail


def _map_killed(offspring, offs, probs, w, x_idx: int) -> np.ndarray:
    # w[j] = u(jh, x), j = 1..x_idx; 0 below the corridor, 1 above it
    j = np.arange(1, x_idx + 1)
    out = np.zeros(x_idx)
    full = np.concatenate(([0.0], w))
    for a, p in zip(offs, probs):
        t = j + a
        val = np.where(t > x_idx, 1.0, full[np.clip(t, 0, x_idx)])
        val = np.where(t <= 0, 0.0, val)
        out += p * offspring.phi(val)
    return out


def _solve_killed(offspring, offs, probs, h, gamma, x_idx, tol, n_iter=None):
    w = np.zeros(x_idx)
    weight = np.exp(gamma * h * (x_idx - np.arange(1, x_idx + 1)))
    it = 0
    while True:
        new = _map_killed(offspring, offs, probs, w, x_idx)
        it += 1
        if n_iter is None and np.any(new < w - _ROUND * np.maximum(w, 1e-300)):
            raise SolverInvariantError("killed iterates decreased")
        change = np.max(np.abs(new - w) * weight)
        w = new
        if n_iter is not None:
            if it >= n_iter:
                break
        elif change < tol:
            break
        if it >= MAX_ITER:
            raise NumericalFailure("killed iteration did not converge")
    resid = np.abs(_map_killed(offspring, offs, probs, w, x_idx) - w)
    return w, resid


@dataclass
class KilledTailGrid:
    span: float
    gamma: float
    x_index: int
    # values[k, j] = u(jh, kh) for 1 <= j <= k <= x_index; nan elsewhere
    values: np.ndarray
    residual: float

    @property
    def x_max(self) -> float:
        return self.x_index * self.span

    def u(self, y_index: int, x_index: int) -> float:
        if y_index > x_index:
            return 1.0
        if y_index < 1 or x_index > self.x_index:
            raise IndexError(f"({y_index}, {x_index}) outside the solved grid")
        return float(self.values[x_index, y_index])


def solve_u_killed_lattice(offspring: OffspringLaw, step: StepLaw, y_index: int, x_index: int,
                           tol: float = TOL) -> KilledTailGrid:
    """u(y, x) = P_y(M^(0,inf) > x) on the triangle 1 <= y/h <= x/h <= x_index."""
    h, offs, probs = _lattice(step)
    if not 1 <= y_index <= x_index:
        raise IndexError("need 1 <= y_index <= x_index")
    gamma = solve_gamma(step, offspring.mean_m)
    vals = np.full((x_index + 1, x_index + 1), np.nan)
    worst = 0.0
    for k in range(1, x_index + 1):
        w, resid = _solve_killed(offspring, offs, probs, h, gamma, k, tol)
        vals[k, 1 : k + 1] = w
        worst = max(worst, float(resid.max()))
    return KilledTailGrid(h, gamma, x_index, vals, worst)


def finite_generation_killed(offspring: OffspringLaw, step: StepLaw, x_index: int, n_gen: int) -> np.ndarray:
    """P_{jh}(M_n^(0,inf) > x) for j = 1..x_index, x = x_index h, n = n_gen."""
    h, offs, probs = _lattice(step)
    if n_gen == 0:
        return np.zeros(x_index)
    w, _ = _solve_killed(offspring, offs, probs, h, 0.0, x_index, 0.0, n_iter=n_gen)
    return w


def _level_index(level: float, h: float) -> int:
    # M >= level  <=>  M > i h on the lattice
    return math.ceil(level / h - _slack(level / h)) - 1


def conditional_Mn_exact(offspring: OffspringLaw, step: StepLaw, c: float, n_gen: int,
                         killed_y_index: int | None = None, tol: float = TOL) -> float:
    """P(M_n >= c n | M >= c n) computed exactly from the generation iterates."""
    if not c > 0:
        raise DomainError("c must be positive")
    h, _, _ = _lattice(step)
    i = _level_index(c * n_gen, h)
    if killed_y_index is None:
        if i < 0:
            return 1.0
        gamma = solve_gamma(step, offspring.mean_m)
        i_max = max(i + 1, math.ceil(-math.log(tol) / (gamma * h)) + i)
        full = solve_u_lattice(offspring, step, i_max, tol)
        return float(finite_generation_tail(offspring, step, n_gen, i)[i] / full.values[i])
    if not 1 <= killed_y_index <= i:
        raise DomainError("killed start must lie strictly below the level")
    grid = solve_u_killed_lattice(offspring, step, killed_y_index, i, tol)
    num = finite_generation_killed(offspring, step, i, n_gen)[killed_y_index - 1]
    return float(num / grid.u(killed_y_index, i))


# ---------------------------------------------------------------- limit constants


@dataclass
class KappaReport:
    kappa: float
    term_boundary: float
    term_correction: float
    error_budget: float
    provenance: dict = field(default_factory=dict)
    components: dict = field(default_factory=dict)

    def to_json(self, **extra) -> str:
        d = asdict(self)
        d.update(extra)
        return json.dumps(d, indent=2, sort_keys=True)


def _check_models(offspring, step, ladder: LadderStats, mins: MinDistribution, gamma_u: float | None = None):
    gamma = solve_gamma(step, offspring.mean_m)
    tl = tilt(step, offspring.mean_m, gamma)
    for name, g, d in (("ladder", ladder.gamma, ladder.drift), ("mins", mins.gamma, mins.drift)):
        if not (math.isclose(g, gamma, rel_tol=1e-12) and math.isclose(d, tl.drift, rel_tol=1e-12)):
            raise InconsistentModels(f"{name} statistics were built for a different model")
    if gamma_u is not None and not math.isclose(gamma_u, gamma, rel_tol=1e-12):
        raise InconsistentModels("tail function was solved for a different model")
    return gamma, tl


def _boundary(offspring, gamma, ladder: LadderStats, span: float | None):
    lap = ladder.laplace(gamma)
    eh = ladder.mean_H1
    m, p0 = offspring.mean_m, offspring.p0
    if span is None:
        scale = (1 - p0) / (m * gamma)
    else:
        scale = (1 - p0) * span / (m * math.expm1(gamma * span))
    value = scale * (1 - lap.value) / eh.value
    d_lap = scale / eh.value
    d_eh = value / eh.value
    return value, math.hypot(d_lap * lap.stderr, d_eh * eh.stderr)


def _envelope_tail_sum(offspring: OffspringLaw, gamma: float, h: float, start: int) -> float:
    # sum_{i >= start} psi(exp(-gamma i h)) exp(gamma i h)
    total, i = 0.0, start
    while True:
        idx = np.arange(i, i + 256)
        x = gamma * h * idx
        t = offspring.psi(np.exp(-x)) * np.exp(x)
        total += float(t.sum())
        if t[-1] < 1e-18 * max(total, 1e-300) or i > start + 10**6:
            return total
        i += 256


def kappa_lattice(offspring: OffspringLaw, step: StepLaw, u: TailFunction, ladder: LadderStats,
                  mins: MinDistribution) -> KappaReport:
    """Lattice limit of e^(gamma h n) P(M > h n) from ladder and I_inf statistics."""
    h, _, _ = _lattice(step)
    gamma, tl = _check_models(offspring, step, ladder, mins, u.gamma)
    if not math.isclose(u.span, h):
        raise InconsistentModels("tail function span differs from the step law span")
    m = offspring.mean_m
    boundary, se_b = _boundary(offspring, gamma, ladder, h)

    w = np.exp(gamma * u.x)
    terms = offspring.psi(u.values) * w
    suffix = np.concatenate((np.cumsum(terms[::-1])[::-1], [0.0]))
    k = np.rint(-mins.samples / h).astype(np.int64)
    per = suffix[np.clip(k, 0, u.i_max + 1)]
    scale = h / (m * tl.drift)
    correction = scale * float(per.mean())
    se_c = scale * float(per.std(ddof=1) / math.sqrt(per.size))
    truncation = scale * _envelope_tail_sum(offspring, gamma, h, u.i_max + 1)
    dp_err = scale * float(np.sum((offspring.psi(u.values) - offspring.psi(u.lower)) * w))
    budget = 3.0 * math.hypot(se_b, se_c) + truncation + dp_err
    return KappaReport(
        boundary - correction, boundary, correction, budget,
        provenance={
            "ladder_seed": ladder.mean_H1.seed, "ladder_n": ladder.mean_H1.n_samples,
            "mins_seed": mins.seed, "mins_n": mins.n, "mins_truncation_bound": mins.truncation_bound,
            "u_i_max": u.i_max, "u_tol": u.tol,
        },
        components={"boundary_stderr": se_b, "correction_stderr": se_c,
                    "truncation": truncation, "dp_error": dp_err, "gamma": gamma, "drift": tl.drift},
    )


@dataclass
class TailCurve:
    """Monte Carlo estimates of u on an increasing grid starting at 0."""

    z: np.ndarray
    u: np.ndarray
    stderr: np.ndarray
    seed: int = 0
    n_samples: int = 0

    @classmethod
    def from_estimates(cls, z, estimates: list[Estimate]) -> "TailCurve":
        return cls(np.asarray(z, dtype=float), np.array([e.value for e in estimates]),
                   np.array([e.stderr for e in estimates]),
                   estimates[0].seed if estimates else 0, estimates[0].n_samples if estimates else 0)


def _psi_prime(offspring: OffspringLaw, s):
    # psi'(s) = m - G'(1 - s)
    dcoef = np.polynomial.polynomial.polyder(np.asarray(offspring.probs))
    return offspring.mean_m - np.polynomial.polynomial.polyval(1.0 - np.asarray(s), dcoef)


def kappa_nonlattice(offspring: OffspringLaw, step: StepLaw, u_mc: TailCurve, ladder: LadderStats,
                     mins: MinDistribution, z_max: float | None = None) -> KappaReport:
    """Non-lattice limit of e^(gamma x) P(M > x); the correction integral is a
    trapezoid rule on the Monte Carlo grid plus an envelope remainder past z_max."""
    gamma, tl = _check_models(offspring, step, ladder, mins)
    m = offspring.mean_m
    z = u_mc.z
    if z_max is None:
        z_max = float(z[-1])
    keep = z <= z_max + 1e-12
    z, uu, se = z[keep], u_mc.u[keep], u_mc.stderr[keep]
    if z.size < 2 or z[0] > 1e-12:
        raise InsufficientCoverage("tail curve must start at 0 with at least two points")
    boundary, se_b = _boundary(offspring, gamma, ladder, None)

    g = np.exp(gamma * z) * offspring.psi(np.clip(uu, 0.0, 1.0))
    cum = np.concatenate(([0.0], integrate.cumulative_trapezoid(g, z)))
    lower = np.clip(-mins.samples, 0.0, z[-1])
    per = cum[-1] - np.interp(lower, z, cum)
    scale = 1.0 / (m * tl.drift)
    correction = scale * float(per.mean())
    se_mc = scale * float(per.std(ddof=1) / math.sqrt(per.size))
    dg = np.exp(gamma * z) * np.abs(_psi_prime(offspring, np.clip(uu, 0.0, 1.0))) * se
    se_u = scale * float(integrate.trapezoid(dg, z))
    def envelope_term(t: float) -> float:
        # psi(e^(-gamma t)) e^(gamma t), written as psi(s)/s to avoid overflow
        s = math.exp(-gamma * t)
        return float(offspring.psi(s)) / s if s > 0 else 0.0

    remainder, _ = integrate.quad(envelope_term, z_max, np.inf, epsrel=1e-10, limit=200)
    remainder *= scale
    if remainder > 0.1 * correction:
        raise InsufficientCoverage(f"remainder {remainder:.3g} exceeds 10% of the correction {correction:.3g}")
    se_c = math.hypot(se_mc, se_u)
    budget = 3.0 * math.hypot(se_b, se_c) + remainder
    return KappaReport(
        boundary - correction, boundary, correction, budget,
        provenance={
            "ladder_seed": ladder.mean_H1.seed, "ladder_n": ladder.mean_H1.n_samples,
            "mins_seed": mins.seed, "mins_n": mins.n, "u_seed": u_mc.seed, "u_n": u_mc.n_samples,
            "z_max": z_max,
        },
        components={"boundary_stderr": se_b, "correction_stderr": se_c, "truncation": remainder,
                    "gamma": gamma, "drift": tl.drift},
    )


def killed_prefactor(gamma: float, y: float, mins: MinDistribution) -> float:
    """e^(gamma y) P(I_inf > -y): predicted limit of the killed/free tail ratio."""
    if not y > 0:
        raise DomainError("y must be positive")
    return math.exp(gamma * y) * mins.p_gt(-y).value


@dataclass
class SummabilityDiag:
    terms: np.ndarray
    partial_sums: np.ndarray

    @property
    def ratios(self) -> np.ndarray:
        return self.terms[1:] / self.terms[:-1]


def psi_summability_diag(offspring: OffspringLaw, gamma: float, n_terms: int, span: float = 1.0) -> SummabilityDiag:
    """Partial sums of sum_{n >= 1} psi(e^(-gamma n h)) e^(gamma n h)."""
    if n_terms < 10:
        raise DomainError("n_terms must be >= 10")
    x = gamma * span * np.arange(1, n_terms + 1)
    terms = offspring.psi(np.exp(-x)) * np.exp(x)
    return SummabilityDiag(terms, np.cumsum(terms))
