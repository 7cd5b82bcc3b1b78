"""Offspring and step-size laws, the generating functional psi and the
exponential tilt that turns the subcritical walk into a positively drifting one.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce
from pathlib import Path
from typing import Mapping, Sequence

import mpmath
import numpy as np

from .errors import (
    DegenerateExtinction,
    DomainError,
    ModelError,
    NoTiltExists,
    NotAProbabilityVector,
    NotLattice,
    NotNormalized,
    NotSubcritical,
    NumericalFailure,
)

PROB_TOL = 1e-12
SPAN_RTOL = 1e-9
_SPAN_DENOM = 10**4
_SPAN_CELLS = 10**5
# below this argument psi is evaluated from its power series in s
_SERIES_SWITCH = 0.5


@dataclass(frozen=True)
class OffspringLaw:
    probs: tuple[float, ...]
    mean_m: float
    # power-series coefficients of s -> G(1 - s), G the pgf
    _coef: np.ndarray = field(repr=False, compare=False)

    @property
    def p0(self) -> float:
        return self.probs[0]

    @property
    def max_children(self) -> int:
        return len(self.probs) - 1

    def pgf(self, s):
        s = np.asarray(s, dtype=float)
        return np.polynomial.polynomial.polyval(s, np.asarray(self.probs))

    def psi(self, s):
        """psi(s) = sum_n p_n (1-s)^n + m s - 1, evaluated without cancellation."""
        s = np.asarray(s, dtype=float)
        small = np.polynomial.polynomial.polyval(s, self._coef[2:]) * s * s
        large = self.pgf(1.0 - s) + self.mean_m * s - 1.0
        out = np.where(s <= _SERIES_SWITCH, small, large)
        return np.maximum(out, 0.0)

    def phi(self, s):
        """m s - psi(s) = 1 - G(1 - s): probability that some child is marked."""
        s = np.asarray(s, dtype=float)
        return self.mean_m * s - self.psi(s)

    def sample(self, rng, size: int) -> np.ndarray:
        cdf = np.cumsum(self.probs)
        cdf[-1] = 1.0
        u = rng.random(size)
        return np.searchsorted(cdf, u, side="right").astype(np.int64)


def validate_offspring(probs: Sequence[float] | Mapping[int, float]) -> OffspringLaw:
    """Build an :class:`OffspringLaw` from a vector ``p_0..p_K`` or a ``{k: p_k}`` map."""
    if isinstance(probs, Mapping):
        if not probs:
            raise NotAProbabilityVector("empty offspring law")
        k_max = max(int(k) for k in probs)
        vec = [0.0] * (k_max + 1)
        for k, p in probs.items():
            if int(k) < 0:
                raise NotAProbabilityVector(f"negative child count {k}")
            vec[int(k)] += float(p)
    else:
        vec = [float(p) for p in probs]
    if not vec:
        raise NotAProbabilityVector("empty offspring law")
    if any(not math.isfinite(p) or p < 0 for p in vec):
        raise NotAProbabilityVector(f"probabilities must be finite and >= 0: {vec}")
    if abs(math.fsum(vec) - 1.0) > PROB_TOL:
        raise NotAProbabilityVector(f"probabilities sum to {math.fsum(vec)!r}")
    while len(vec) > 1 and vec[-1] == 0.0:
        vec.pop()
    if vec[0] == 1.0:
        raise DegenerateExtinction("p_0 = 1")
    m = math.fsum(k * p for k, p in enumerate(vec))
    if not 0.0 < m < 1.0:
        raise NotSubcritical(f"offspring mean {m} not in (0, 1)")
    coef = np.zeros(max(len(vec), 3))
    for n, p in enumerate(vec):
        for j in range(n + 1):
            coef[j] += p * math.comb(n, j) * (-1.0) ** j
    return OffspringLaw(tuple(vec), m, coef)


def psi(law: OffspringLaw, s: float) -> float:
    if not 0.0 <= s <= 1.0:
        raise DomainError(f"psi needs s in [0, 1], got {s}")
    return float(law.psi(s))


def big_h(law: OffspringLaw, s: float) -> float:
    """H(s) = psi(s) / (m s); H(0) is the right limit, 0 for finite support."""
    if not 0.0 <= s <= 1.0:
        raise DomainError(f"H needs s in [0, 1], got {s}")
    if s == 0.0:
        return 0.0
    return float(law.psi(s)) / (law.mean_m * s)


def _detect_span(positions: Sequence[float]) -> float | None:
    """Largest h with every atom in h Z, or None.

    Atoms must be rationals with denominator at most ``_SPAN_DENOM`` up to
    ``SPAN_RTOL``, and the lattice must have at most ``_SPAN_CELLS`` cells
    across the support; anything finer is treated as non-lattice.
    """
    nonzero = [x for x in positions if x != 0.0]
    if not nonzero:
        return None
    fracs = [Fraction(x).limit_denominator(_SPAN_DENOM) for x in nonzero]
    for x, f in zip(nonzero, fracs):
        if abs(x - float(f)) > SPAN_RTOL * max(1.0, abs(x)):
            return None
    num = reduce(math.gcd, (abs(f.numerator) for f in fracs))
    den = reduce(math.lcm, (f.denominator for f in fracs))
    h = num / den
    if max(abs(x) for x in nonzero) / h > _SPAN_CELLS:
        return None
    return h


@dataclass(frozen=True)
class StepLaw:
    kind: str  # "atoms" or "gaussian"
    positions: tuple[float, ...] = ()
    probs: tuple[float, ...] = ()
    mu: float = 0.0
    sigma: float = 1.0
    span: float | None = None

    @classmethod
    def atoms(cls, pairs: Sequence[Sequence[float]], span: float | None = None) -> "StepLaw":
        merged: dict[float, float] = {}
        for x, p in pairs:
            x, p = float(x), float(p)
            if not math.isfinite(x) or not math.isfinite(p) or p < 0:
                raise NotAProbabilityVector(f"bad atom ({x}, {p})")
            merged[x] = merged.get(x, 0.0) + p
        merged = {x: p for x, p in merged.items() if p > 0}
        if not merged or abs(math.fsum(merged.values()) - 1.0) > PROB_TOL:
            raise NotAProbabilityVector("atom probabilities must sum to 1")
        xs = tuple(sorted(merged))
        ps = tuple(merged[x] for x in xs)
        if xs[-1] <= 0:
            raise NoTiltExists("P(X > 0) = 0")
        if span is None:
            span = _detect_span(xs)
        elif span <= 0:
            raise ModelError("span must be positive")
        return cls("atoms", xs, ps, span=span)

    @classmethod
    def gaussian(cls, mu: float, sigma: float) -> "StepLaw":
        if not sigma > 0:
            raise ModelError("gaussian sigma must be positive")
        return cls("gaussian", mu=float(mu), sigma=float(sigma))

    @property
    def is_lattice(self) -> bool:
        return self.span is not None

    def mgf(self, theta: float) -> float:
        if self.kind == "gaussian":
            return math.exp(theta * self.mu + 0.5 * theta**2 * self.sigma**2)
        return math.fsum(p * math.exp(theta * x) for x, p in zip(self.positions, self.probs))

    def mean(self) -> float:
        if self.kind == "gaussian":
            return self.mu
        return math.fsum(p * x for x, p in zip(self.positions, self.probs))

    def prob_greater(self, x: float) -> float:
        if self.kind == "gaussian":
            return 0.5 * math.erfc((x - self.mu) / (self.sigma * math.sqrt(2.0)))
        return math.fsum(p for a, p in zip(self.positions, self.probs) if a > x)

    def sample(self, rng, size: int) -> np.ndarray:
        if self.kind == "gaussian":
            return self.mu + self.sigma * rng.standard_normal(size)
        cdf = np.cumsum(self.probs)
        u = rng.random(size) * cdf[-1]
        idx = np.searchsorted(cdf, u, side="right")
        np.minimum(idx, len(cdf) - 1, out=idx)
        return np.asarray(self.positions)[idx]

    def lattice_offsets(self) -> np.ndarray:
        """Atom positions in units of the span."""
        if self.span is None:
            raise NotLattice("step law has no lattice span")
        return np.rint(np.asarray(self.positions) / self.span).astype(np.int64)

    def to_dict(self) -> dict:
        if self.kind == "gaussian":
            return {"kind": "gaussian", "mu": self.mu, "sigma": self.sigma}
        out = {"kind": "atoms", "atoms": [[x, p] for x, p in zip(self.positions, self.probs)]}
        if self.span is not None:
            out["span"] = self.span
        return out


def solve_gamma(step: StepLaw, m: float) -> float:
    """Positive root of E[exp(gamma X)] = 1/m."""
    if not 0.0 < m < 1.0:
        raise NotSubcritical(f"m = {m} not in (0, 1)")
    target = 1.0 / m
    if step.kind == "gaussian":
        mu, s2 = step.mu, step.sigma**2
        return (-mu + math.sqrt(mu * mu - 2.0 * s2 * math.log(m))) / s2
    x_max = step.positions[-1]
    if x_max <= 0:
        raise NoTiltExists("esssup X <= 0")
    cap = 700.0 / x_max
    f = lambda th: step.mgf(th) - target  # noqa: E731
    lo, hi = 0.0, min(1.0, cap)
    while f(hi) <= 0.0:
        if hi >= cap:
            raise NumericalFailure("bracket expansion exceeded the overflow guard")
        lo, hi = hi, min(2.0 * hi, cap)
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if f(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    gamma = _polish_root(step, target, lo if abs(f(lo)) <= abs(f(hi)) else hi)
    if abs(f(gamma)) > 1e-12:
        raise NumericalFailure(f"|E e^(gamma X) - 1/m| = {abs(f(gamma))!r} after bisection")
    return gamma


def _polish_root(step: StepLaw, target: float, theta: float, width: int = 4) -> float:
    # double-precision residuals tie across several ulps; rank neighbours exactly
    cands = [theta]
    lo = hi = theta
    for _ in range(width):
        lo, hi = math.nextafter(lo, -math.inf), math.nextafter(hi, math.inf)
        cands += [lo, hi]
    with mpmath.workdps(40):
        xs = [mpmath.mpf(x) for x in step.positions]
        ps = [mpmath.mpf(p) for p in step.probs]
        t = mpmath.mpf(target)

        def resid(th):
            th = mpmath.mpf(th)
            return abs(mpmath.fsum(p * mpmath.exp(th * x) for x, p in zip(xs, ps)) - t)

        return min(sorted(cands), key=resid)


@dataclass(frozen=True)
class TiltedStepLaw:
    base: StepLaw
    m: float
    gamma: float
    tilted: StepLaw
    drift: float

    @property
    def span(self) -> float | None:
        return self.base.span


def _tilted_drift(xs, ps, m: float, gamma: float) -> float:
    # m E[X e^(gamma X)] correctly rounded, so exact cases come out exact
    with mpmath.workdps(40):
        g = mpmath.mpf(gamma)
        val = mpmath.mpf(m) * mpmath.fsum(mpmath.mpf(p) * mpmath.mpf(x) * mpmath.exp(g * mpmath.mpf(x))
                                          for x, p in zip(xs, ps))
        return float(val)


def tilt(step: StepLaw, m: float, gamma: float) -> TiltedStepLaw:
    if step.kind == "gaussian":
        tilted = StepLaw.gaussian(step.mu + gamma * step.sigma**2, step.sigma)
        drift = m * step.mgf(gamma) * (step.mu + gamma * step.sigma**2)
        if abs(m * step.mgf(gamma) - 1.0) > 1e-12:
            raise NotNormalized("gaussian tilt does not integrate to 1")
    else:
        xs, ps = step.positions, step.probs
        tp = tuple(m * math.exp(gamma * x) * p for x, p in zip(xs, ps))
        total = math.fsum(tp)
        if abs(total - 1.0) > 1e-11:
            raise NotNormalized(f"tilted masses sum to {total!r}")
        tilted = StepLaw("atoms", xs, tp, span=step.span)
        drift = _tilted_drift(xs, ps, m, gamma)
    if not drift > 0:
        raise NumericalFailure(f"tilted drift {drift} is not positive")
    return TiltedStepLaw(step, m, gamma, tilted, drift)


@dataclass(frozen=True)
class Model:
    offspring: OffspringLaw
    step: StepLaw

    @property
    def m(self) -> float:
        return self.offspring.mean_m

    def gamma(self) -> float:
        return solve_gamma(self.step, self.m)

    def tilted(self) -> TiltedStepLaw:
        return tilt(self.step, self.m, self.gamma())

    def to_dict(self) -> dict:
        return {
            "offspring": {str(k): p for k, p in enumerate(self.offspring.probs) if p > 0},
            "step": self.step.to_dict(),
        }


def parse_model(obj: Mapping) -> Model:
    """Model from the JSON schema ``{"offspring": {...}, "step": {...}, "span"?: h}``."""
    try:
        off = {int(k): float(v) for k, v in obj["offspring"].items()}
        st = obj["step"]
        kind = st["kind"]
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ModelError(f"malformed model: {exc}") from exc
    offspring = validate_offspring(off)
    span = obj.get("span", st.get("span"))
    span = None if span is None else float(span)
    if kind == "atoms":
        pairs = [(float(x), float(p)) for x, p in st["atoms"]]
        step = StepLaw.atoms(pairs, span=span)
    elif kind == "gaussian":
        step = StepLaw.gaussian(float(st["mu"]), float(st["sigma"]))
    else:
        raise ModelError(f"unknown step kind {kind!r}")
    return Model(offspring, step)


def load_model(path: str | Path) -> Model:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelError(f"{path}: {exc}") from exc
    return parse_model(obj)


def reference_model() -> Model:
    """p_0 = 0.6, p_2 = 0.4 offspring with symmetric +-1 steps."""
    return Model(validate_offspring({0: 0.6, 2: 0.4}), StepLaw.atoms([(-1, 0.5), (1, 0.5)]))
