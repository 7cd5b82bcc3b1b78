"""Monte Carlo plumbing: the Estimate record, pooling, and reproducible streams.

Samples are generated in fixed-size chunks.  Chunk ``k`` of a run seeded with
``seed`` always draws from ``Philox(key=seed)`` jumped ``k`` times, so the
sample set (and every reduction, which is done in chunk order) does not
depend on how many worker processes share the work.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

CHUNK = 1 << 15
SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float
    n_samples: int
    seed: int
    n_aborted: int = 0

    def z(self, target: float) -> float:
        return z_score(self.value, self.stderr, target, 0.0)

    def to_dict(self) -> dict:
        return asdict(self)


# differences below this many ulps of the operands count as rounding, not signal
_ROUNDING_ULPS = 16


def z_score(a: float, se_a: float, b: float, se_b: float) -> float:
    diff = a - b
    if abs(diff) <= _ROUNDING_ULPS * np.finfo(float).eps * max(abs(a), abs(b)):
        return 0.0
    se = math.hypot(se_a, se_b)
    if se == 0.0:
        return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    return diff / se


def mean_estimate(samples: np.ndarray, seed: int, n_aborted: int = 0) -> Estimate:
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    if n == 0:
        return Estimate(math.nan, math.nan, 0, seed, n_aborted)
    value = float(samples.mean())
    if n == 1:
        se = math.inf
    elif samples.min() == samples.max():
        se = 0.0  # a constant sample; std would only report rounding
    else:
        se = float(samples.std(ddof=1) / math.sqrt(n))
    return Estimate(value, se, n, seed, n_aborted)


def wilson_stderr(k: int, n: int) -> float:
    """Half-width of the one-sigma Wilson score interval for k successes in n."""
    if n == 0:
        return math.inf
    p = k / n
    z2 = 1.0
    return math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / (1 + z2 / n)


def proportion_estimate(k: int, n: int, seed: int, n_aborted: int = 0) -> Estimate:
    value = k / n if n else math.nan
    return Estimate(value, wilson_stderr(k, n), n, seed, n_aborted)


def pool(estimates: Sequence[Estimate]) -> Estimate:
    """Sample-size weighted pooling of independent estimates of one quantity."""
    n = sum(e.n_samples for e in estimates)
    if n == 0:
        raise ValueError("nothing to pool")
    w = [e.n_samples / n for e in estimates]
    value = math.fsum(wi * e.value for wi, e in zip(w, estimates))
    se = math.sqrt(math.fsum((wi * e.stderr) ** 2 for wi, e in zip(w, estimates)))
    return Estimate(value, se, n, estimates[0].seed, sum(e.n_aborted for e in estimates))


def stream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for chunk ``index`` of a run keyed by ``seed``."""
    bitgen = np.random.Philox(key=int(seed) & SEED_MASK)
    if index:
        bitgen = bitgen.jumped(index)
    return np.random.Generator(bitgen)


def default_workers() -> int:
    return os.cpu_count() or 1


def _chunk_sizes(n: int, chunk: int) -> list[int]:
    full, rest = divmod(n, chunk)
    return [chunk] * full + ([rest] if rest else [])


def _run_one(fn, seed, index, size):
    return fn(stream(seed, index), size)


def run_chunks(
    fn: Callable[[np.random.Generator, int], object],
    n: int,
    seed: int,
    workers: int = 1,
    chunk: int = CHUNK,
    first_index: int = 0,
) -> list:
    """Evaluate ``fn(rng, size)`` over the chunks covering ``n`` samples, in chunk order."""
    sizes = _chunk_sizes(n, chunk)
    idx = range(first_index, first_index + len(sizes))
    if workers <= 1 or len(sizes) <= 1:
        return [_run_one(fn, seed, i, s) for i, s in zip(idx, sizes)]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_one, [fn] * len(sizes), [seed] * len(sizes), idx, sizes))


def iter_chunks(
    fn: Callable[[np.random.Generator, int], object],
    seed: int,
    workers: int = 1,
    chunk: int = CHUNK,
) -> Iterator[object]:
    """Unbounded chunk-ordered stream of ``fn`` results, ``workers`` chunks at a time."""
    index = 0
    if workers <= 1:
        while True:
            yield _run_one(fn, seed, index, chunk)
            index += 1
    with ProcessPoolExecutor(max_workers=workers) as ex:
        while True:
            batch = range(index, index + workers)
            yield from ex.map(_run_one, [fn] * workers, [seed] * workers, batch, [chunk] * workers)
            index += workers
