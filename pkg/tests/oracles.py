"""Brute-force reference values that share no code with the solvers.

``max_reach_probability`` enumerates whole population configurations
generation by generation: every particle of the current generation picks a
step atom and a child count, and the multiset of child positions becomes the
next configuration.  No independence between subtrees is used, so it checks
the fixed-point recursion from outside.
"""
from __future__ import annotations

from collections import defaultdict


def max_reach_probability(child_probs, step_atoms, level: int, n_gen: int) -> float:
    """P(M_n >= level) for integer steps, start 0, at most two children.

    ``child_probs`` is ``[p0, p1, p2]``; ``step_atoms`` is a list of
    ``(offset, prob)`` with integer offsets.
    """
    if len(child_probs) > 3:
        raise ValueError("enumeration is limited to at most two children")
    if level <= 0:
        return 1.0
    top = max(a for a, _ in step_atoms)
    outcomes = [(a, c, pa * pc) for a, pa in step_atoms for c, pc in enumerate(child_probs) if pc > 0]
    configs = {(0,): 1.0}
    hit = 0.0
    for g in range(1, n_gen + 1):
        left = n_gen - g  # jumps still available to the new generation
        nxt: dict[tuple, float] = defaultdict(float)
        for conf, prob in configs.items():
            # partial[(children so far)] = probability, particle by particle
            partial: dict[tuple, float] = {(): prob}
            for pos in conf:
                step_out: dict[tuple, float] = defaultdict(float)
                for kids, pk in partial.items():
                    for a, c, p in outcomes:
                        q = pos + a
                        if c > 0 and q >= level:
                            hit += pk * p
                            continue
                        if c > 0 and q + left * top >= level:
                            kids2 = tuple(sorted(kids + (q,) * c))
                        else:
                            kids2 = kids  # no children, or they can never reach the level
                        step_out[kids2] += pk * p
                partial = step_out
            for kids, pk in partial.items():
                if kids:
                    nxt[kids] += pk
        configs = nxt
    return hit
