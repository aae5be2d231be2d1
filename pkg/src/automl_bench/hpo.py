"""Bayesian (TPE-style) search over batch size and kernel size.

The search space is a finite grid, so the Parzen densities are plain
categorical frequencies and the argmax over the grid is exact.
"""
from __future__ import annotations

import itertools
import math
import random
from dataclasses import dataclass
from typing import Sequence

from scipy.stats import qmc

BATCH_SIZES = (32, 64, 128, 256, 448, 512)
KERNEL_SIZES = (1, 3, 5, 7)
DEFAULT_BATCH_SIZE = 448
DEFAULT_KERNEL_SIZE = 3

WARMUP_ROUNDS = 3
GAMMA = 0.25


@dataclass(frozen=True, order=True)
class HyperParams:
    batch_size: int = DEFAULT_BATCH_SIZE
    kernel_size: int = DEFAULT_KERNEL_SIZE

    def __post_init__(self):
        if self.batch_size not in BATCH_SIZES:
            raise ValueError(f"batch_size {self.batch_size} not in {BATCH_SIZES}")
        if self.kernel_size not in KERNEL_SIZES:
            raise ValueError(f"kernel_size {self.kernel_size} not in {KERNEL_SIZES}")


GRID = tuple(HyperParams(b, k) for b, k in itertools.product(BATCH_SIZES, KERNEL_SIZES))


@dataclass(frozen=True)
class HpoObservation:
    params: HyperParams
    error: float
    predicted: bool = False

    def __post_init__(self):
        if not 0.0 < self.error < 1.0:
            raise ValueError(f"observation error must lie in (0, 1), got {self.error}")


def quasi_random_point(index: int, rng_seed: int) -> HyperParams:
    """``index``-th point of a scrambled 2-D Halton sequence mapped onto the grid."""
    sampler = qmc.Halton(d=2, scramble=True, seed=rng_seed)
    if index:
        sampler.fast_forward(index)
    u = sampler.random(1)[0]
    b = BATCH_SIZES[min(int(u[0] * len(BATCH_SIZES)), len(BATCH_SIZES) - 1)]
    k = KERNEL_SIZES[min(int(u[1] * len(KERNEL_SIZES)), len(KERNEL_SIZES) - 1)]
    return HyperParams(b, k)


def split_good_bad(observations: Sequence[HpoObservation], gamma: float = GAMMA):
    """Lowest-error ``ceil(gamma * n)`` observations (at least one) versus the rest.

    Sorting is stable, so equal errors keep their arrival order.
    """
    ranked = sorted(observations, key=lambda o: o.error)
    n_good = max(1, math.ceil(gamma * len(ranked)))
    return ranked[:n_good], ranked[n_good:]


def _categorical(values, domain):
    # add-one smoothing keeps every grid value possible
    counts = {v: 1 for v in domain}
    for v in values:
        counts[v] += 1
    total = len(values) + len(domain)
    return {v: c / total for v, c in counts.items()}


def tpe_ratios(observations: Sequence[HpoObservation]) -> dict[HyperParams, float]:
    good, bad = split_good_bad(observations)
    ratios = {}
    dens = []
    for attr, domain in (("batch_size", BATCH_SIZES), ("kernel_size", KERNEL_SIZES)):
        g = _categorical([getattr(o.params, attr) for o in good], domain)
        b = _categorical([getattr(o.params, attr) for o in bad], domain)
        dens.append((attr, g, b))
    for point in GRID:
        r = 1.0
        for attr, g, b in dens:
            v = getattr(point, attr)
            r *= g[v] / b[v]
        ratios[point] = r
    return ratios


def suggest(observations: Sequence[HpoObservation], rng_seed: int = 0) -> HyperParams:
    """Next hyperparameters to try.

    During warm-up (fewer than four observations) the errors are ignored and a
    quasi-random grid point is returned.  Afterwards the grid point with the
    largest good/bad density ratio wins; exact ties are broken with ``rng_seed``.
    """
    if len(observations) <= WARMUP_ROUNDS:
        return quasi_random_point(len(observations), rng_seed)
    ratios = tpe_ratios(observations)
    best = max(ratios.values())
    top = [p for p in GRID if math.isclose(ratios[p], best, rel_tol=1e-12)]
    if len(top) == 1:
        return top[0]
    return random.Random(rng_seed * 1_000_003 + len(observations)).choice(top)


def _hp_distance(a: HyperParams, b: HyperParams) -> float:
    span_b = BATCH_SIZES[-1] - BATCH_SIZES[0]
    span_k = KERNEL_SIZES[-1] - KERNEL_SIZES[0]
    return abs(a.batch_size - b.batch_size) / span_b + abs(a.kernel_size - b.kernel_size) / span_k


def predict_warmup_error(history, params: HyperParams, k: int = 3) -> float:
    """Stand-in error for warm-up rounds: mean best error of the ``k`` nearest records.

    Nearness is the range-normalised hyperparameter difference; ties keep
    history order.  Empty history predicts 0.9.  Clamped to [0.01, 0.99].
    """
    if not history:
        return 0.9
    ranked = sorted(history, key=lambda r: _hp_distance(r.hyperparams, params))
    near = ranked[:k]
    pred = sum(r.best_error for r in near) / len(near)
    return min(0.99, max(0.01, pred))
